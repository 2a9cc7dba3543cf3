"""``merge-kit`` command line: sim, train, eval, sweep and rerun.

Every run writes ``manifest.json`` into its output directory before any
result file.  The manifest records the resolved configuration and the
request (seeds, policies, checkpoint hash), so ``merge-kit rerun`` can
reproduce the CSV artifacts byte for byte.

Exit codes: 0 success, 2 bad configuration, 3 missing or mismatched
checkpoint, 4 planner fault.  Errors go to stderr as one JSON object.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import replace

from . import __version__
from .bench import (
    PLANNER_TRACE_COLUMNS, SweepCell, SweepRow, VELOCITY_CLASSES, aggregate, default_workers,
    parse_policies, run_episode, run_jobs, run_sweep, write_episodes_csv, write_rows, write_sweep_csv,
)
from .config import ConfigError, RunConfig, describe_keys, file_digest, from_mapping, load_config
from .dqn import NetworkSizes, file_sha256, save_agent
from .planner import PlannerFault
from .policies import CheckpointError, Policy, PolicyKind
from .traffic import TRACE_COLUMNS
from .training import TRAIN_LOG_COLUMNS, TrainingSchedule, train_agent

log = logging.getLogger("merge_kit")

EXIT_OK, EXIT_CONFIG, EXIT_CHECKPOINT, EXIT_FAULT = 0, 2, 3, 4
LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
MANIFEST = "manifest.json"

OUTPUTS = {
    "sim": ("trace.csv", "planner.csv"),
    "train": ("agent.ckpt", "agent.ckpt.json", "train_log.csv"),
    "eval": ("metrics.csv", "episodes.csv"),
    "sweep": ("sweep.csv", "episodes.csv"),
}


# ---------------------------------------------------------------- parsing

def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="merge-kit", description="Merge-scenario simulation, training, evaluation and parameter sweeps.",
        epilog=describe_keys() + "\n\nenvironment: MERGE_KIT_LOG = error | info | debug (default error)",
        formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=f"merge-kit {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, policy=True, seeds=True):
        p.add_argument("--config", help="INI file; sections and keys as listed in merge-kit --help")
        p.add_argument("--seed", type=int, help="scenario seed (sim), training seed (train) or first episode seed")
        p.add_argument("--out", default=".", help="output directory (default: current directory)")
        p.add_argument("--timeout", type=float, help="episode cut-off in simulated seconds (scenario.episode_timeout)")
        if seeds:
            p.add_argument("--seeds-file", help="episode seeds, whitespace separated; overrides --seed/--episodes")
            p.add_argument("--episodes", type=int, help="number of episodes (eval.episodes / sweep.episodes)")
            p.add_argument("--workers", type=int, help="episode worker processes (default: available cores)")
        if policy:
            p.add_argument("--checkpoint", help="agent checkpoint for the rl policy")

    p = sub.add_parser("sim", help="one recorded episode", epilog=describe_keys(),
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    common(p, seeds=False)
    p.add_argument("--policy", default="neutral", choices=[k.value for k in PolicyKind])

    p = sub.add_parser("train", help="train the Deep-Sets DQN agent", epilog=describe_keys(),
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    common(p, policy=False, seeds=False)
    p.add_argument("--steps", type=int, help="policy decisions to train for (train.total_steps)")

    p = sub.add_parser("eval", help="metrics of one policy", epilog=describe_keys(),
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    common(p)
    p.add_argument("--policy", default="neutral", choices=[k.value for k in PolicyKind])

    p = sub.add_parser("sweep", help="policies over the density / cooperation / velocity grid",
                       epilog=describe_keys(), formatter_class=argparse.RawDescriptionHelpFormatter)
    common(p)
    p.add_argument("--policies", "--policy", dest="policies", default="all",
                   help="comma separated policy names or 'all' (default)")

    p = sub.add_parser("rerun", help="repeat a run from its manifest")
    p.add_argument("manifest", help="manifest.json of an earlier run")
    p.add_argument("--out", required=True, help="output directory for the repeated artifacts")
    p.add_argument("--workers", type=int, help="episode worker processes (default: available cores)")
    return parser


def _read_seeds(path) -> list:
    try:
        with open(path) as fh:
            tokens = fh.read().split()
    except OSError as exc:
        raise ConfigError("--seeds-file", f"cannot read {path} ({exc.strerror})") from None
    try:
        seeds = [int(t) for t in tokens]
    except ValueError as exc:
        raise ConfigError("--seeds-file", str(exc)) from None
    if not seeds:
        raise ConfigError("--seeds-file", "no seeds")
    return seeds


def _episode_seeds(args, first: int, count: int) -> list:
    if getattr(args, "seeds_file", None):
        return _read_seeds(args.seeds_file)
    first = first if args.seed is None else args.seed
    count = count if args.episodes is None else args.episodes
    if count <= 0:
        raise ConfigError("--episodes", "must be positive")
    return list(range(first, first + count))


def _request_from_args(args) -> tuple[RunConfig, dict]:
    """Resolved configuration (file, then flags) plus everything else the run needs."""
    cfg = load_config(args.config)
    if args.timeout is not None:
        cfg = cfg.override("scenario", episode_timeout=args.timeout)
    req = {"command": args.command, "config_path": args.config,
           "config_file_sha256": file_digest(args.config) if args.config else None}
    if args.command == "sim":
        seed = cfg.scenario.seed if args.seed is None else args.seed
        req.update(seeds=[seed], policies=[args.policy])
    elif args.command == "train":
        if args.steps is not None:
            cfg = cfg.override("train", total_steps=args.steps)
        req.update(seeds=[0 if args.seed is None else args.seed])
    elif args.command == "eval":
        req.update(seeds=_episode_seeds(args, cfg.eval.seed, cfg.eval.episodes), policies=[args.policy])
    else:
        try:
            policies = parse_policies(args.policies)
        except ValueError as exc:
            raise ConfigError("--policies", str(exc)) from None
        req.update(seeds=_episode_seeds(args, cfg.sweep.seed, cfg.sweep.episodes), policies=policies)
    checkpoint = getattr(args, "checkpoint", None)
    if PolicyKind.RL.value in req.get("policies", []):
        if not checkpoint or not os.path.isfile(checkpoint):
            raise CheckpointError(f"rl policy needs an existing --checkpoint, got {checkpoint!r}")
        req.update(checkpoint=os.path.abspath(checkpoint), checkpoint_sha256=file_sha256(checkpoint))
    return cfg, req


# ---------------------------------------------------------------- execution

def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _write_manifest(out: str, cfg: RunConfig, req: dict) -> dict:
    resolved = cfg.to_dict()
    manifest = {
        "tool": "merge-kit",
        "tool_version": __version__,
        **req,
        "config": resolved,
        "config_sha256": hashlib.sha256(_canonical(resolved).encode()).hexdigest(),
        "outputs": [os.path.join(out, name) for name in OUTPUTS[req["command"]]],
    }
    with open(os.path.join(out, MANIFEST), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def _policies(req: dict) -> list:
    return [Policy.create(name, req.get("checkpoint")) for name in req["policies"]]


def _vel_class(mu_choices) -> str:
    for name, choices in VELOCITY_CLASSES.items():
        if tuple(float(m) for m in mu_choices) == choices:
            return name
    return "custom"


def _run_sim(out, cfg: RunConfig, req: dict, workers: int) -> None:
    (policy,) = _policies(req)
    scenario = replace(cfg.scenario, seed=req["seeds"][0])
    result, runner = run_episode(scenario, policy, cfg.mpc, cfg.weights, record=True)
    write_rows(os.path.join(out, "trace.csv"), TRACE_COLUMNS, runner.traffic_trace)
    write_rows(os.path.join(out, "planner.csv"), PLANNER_TRACE_COLUMNS, runner.planner_trace)
    log.info("sim seed %d: time %.2f s, goal %s, collision %s, comfort %.4f", scenario.seed,
             result.crossing_time, result.reached_goal, result.collision, result.comfort)


def _run_train(out, cfg: RunConfig, req: dict, workers: int) -> None:
    s = cfg.schedule
    schedule = TrainingSchedule(log_every=s.log_every, eval_every=s.eval_every, eval_episodes=s.eval_episodes,
                                eval_seed_base=s.eval_seed_base)
    seed = req["seeds"][0]

    def snapshot(step, learner):
        save_agent(os.path.join(out, f"agent_step{step}.ckpt"), learner.online, step, None, {"seed": seed})

    run = train_agent(cfg.train, seed, cfg.scenario, cfg.mpc, cfg.weights, schedule,
                      NetworkSizes(history=cfg.train.history), on_eval=snapshot)
    write_rows(os.path.join(out, "train_log.csv"), TRAIN_LOG_COLUMNS, run.log_rows)
    save_agent(os.path.join(out, "agent.ckpt"), run.learner.online, run.steps, None,
               {"seed": seed, "episodes": run.episodes})
    log.info("trained %d steps over %d episodes", run.steps, run.episodes)


def _run_eval(out, cfg: RunConfig, req: dict, workers: int) -> None:
    (policy,) = _policies(req)
    jobs = [(replace(cfg.scenario, seed=s), policy, cfg.mpc, cfg.weights) for s in req["seeds"]]
    results = run_jobs(jobs, workers)
    sc = cfg.scenario
    row = SweepRow(policy.kind.value, SweepCell(sc.p_new, sc.p_coop, _vel_class(sc.velocity_mu_choices)),
                   aggregate(results), results)
    write_sweep_csv(os.path.join(out, "metrics.csv"), [row])
    write_episodes_csv(os.path.join(out, "episodes.csv"), [row])
    r = row.report
    log.info("%s: time %.3f, comfort %.4f, return %.4f", row.policy, r.avg_time, r.comfort_cost, r.avg_return)


def _run_sweep(out, cfg: RunConfig, req: dict, workers: int) -> None:
    sw = cfg.sweep
    for vc in sw.velocity_classes:
        if vc not in VELOCITY_CLASSES:
            raise ConfigError("sweep.velocity_classes", f"unknown class {vc!r}")
    grid = [SweepCell(p, c, v) for v in sw.velocity_classes for c in sw.cooperation for p in sw.densities]
    rows = run_sweep(grid, req["seeds"], _policies(req), cfg.scenario, cfg.mpc, cfg.weights, workers)
    write_sweep_csv(os.path.join(out, "sweep.csv"), rows)
    write_episodes_csv(os.path.join(out, "episodes.csv"), rows)
    log.info("sweep: %d rows", len(rows))


RUNNERS = {"sim": _run_sim, "train": _run_train, "eval": _run_eval, "sweep": _run_sweep}


def execute(out: str, cfg: RunConfig, req: dict, workers: int | None = None) -> dict:
    os.makedirs(out, exist_ok=True)
    manifest = _write_manifest(out, cfg, req)
    RUNNERS[req["command"]](out, cfg, req, workers or default_workers())
    return manifest


def _load_manifest(path) -> tuple[RunConfig, dict]:
    try:
        with open(path) as fh:
            manifest = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError("manifest", f"cannot read {path} ({exc})") from None
    if manifest.get("command") not in RUNNERS:
        raise ConfigError("manifest.command", f"not a run manifest: {manifest.get('command')!r}")
    cfg = from_mapping(manifest["config"])
    req = {k: manifest.get(k) for k in ("command", "config_path", "config_file_sha256", "seeds")}
    if "policies" in manifest:
        req["policies"] = manifest["policies"]
    if manifest.get("checkpoint"):
        ckpt = manifest["checkpoint"]
        if not os.path.isfile(ckpt):
            raise CheckpointError(f"checkpoint {ckpt} from the manifest is missing")
        if file_sha256(ckpt) != manifest.get("checkpoint_sha256"):
            raise CheckpointError(f"checkpoint {ckpt} no longer matches the manifest hash")
        req.update(checkpoint=ckpt, checkpoint_sha256=manifest["checkpoint_sha256"])
    req["rerun_of"] = os.path.abspath(path)
    return cfg, req


# ---------------------------------------------------------------- entry point

def _fail(code: int, kind: str, message: str, key=None) -> int:
    err = {"error": kind, "message": message}
    if key is not None:
        err["key"] = key
    print(json.dumps(err), file=sys.stderr)
    return code


def _setup_logging() -> None:
    level = os.environ.get("MERGE_KIT_LOG", "error").lower()
    if level not in LOG_LEVELS:
        raise ConfigError("MERGE_KIT_LOG", f"expected one of {sorted(LOG_LEVELS)}, got {level!r}")
    logging.basicConfig(level=LOG_LEVELS[level], format="%(levelname)s %(name)s: %(message)s", force=True)


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    out = getattr(args, "out", ".")
    try:
        _setup_logging()
        if args.command == "rerun":
            cfg, req = _load_manifest(args.manifest)
        else:
            cfg, req = _request_from_args(args)
        workers = getattr(args, "workers", None)
        if workers is not None and workers < 1:
            raise ConfigError("--workers", "must be at least 1")
        execute(out, cfg, req, workers)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config", str(exc), exc.key)
    except CheckpointError as exc:
        return _fail(EXIT_CHECKPOINT, "checkpoint", str(exc))
    except PlannerFault as exc:
        path = os.path.join(out, "planner_fault.json")
        try:
            with open(path, "w") as fh:
                json.dump({k: repr(v) for k, v in exc.dump.items()}, fh, indent=2)
        except OSError:
            path = None
        return _fail(EXIT_FAULT, "planner_fault", str(exc), path)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
