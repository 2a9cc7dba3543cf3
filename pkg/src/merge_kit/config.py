"""INI configuration: one section per config type, keys named like its fields.

Unknown sections, unknown keys and malformed values raise ``ConfigError``
naming the offending ``section.key``.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
from dataclasses import dataclass, field

from .dqn import TrainConfig
from .planner import ManeuverCostWeights, MpcConfig
from .traffic import ScenarioConfig


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


def _floats(text: str) -> tuple:
    return tuple(float(t) for t in text.replace(",", " ").split())


def _strings(text: str) -> tuple:
    return tuple(t for t in text.replace(",", " ").split())


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass(frozen=True)
class SweepConfig:
    densities: tuple = (0.02, 0.1, 0.3)
    cooperation: tuple = (0.4,)
    velocity_classes: tuple = ("mixed",)
    episodes: int = 50
    seed: int = 0


@dataclass(frozen=True)
class EvalConfig:
    episodes: int = 50
    seed: int = 0


@dataclass(frozen=True)
class ScheduleConfig:
    log_every: int = 500
    eval_every: int = 5000
    eval_episodes: int = 5
    eval_seed_base: int = 0


# section -> (type, {key: (parser, description)})
SECTIONS = {
    "scenario": (ScenarioConfig, {
        "p_new": (float, "spawn probability per 0.1 s simulation step"),
        "p_coop": (float, "probability that a spawned driver is cooperative"),
        "velocity_mu_choices": (_floats, "means of the desired-velocity normal distribution [m/s]"),
        "velocity_sigma": (float, "standard deviation of desired velocities [m/s]"),
        "max_vehicles": (int, "occupancy cap on the merging lane"),
        "sim_dt": (float, "simulation step [s]; must equal mpc.step"),
        "episode_timeout": (float, "episode cut-off [s]"),
        "seed": (int, "scenario seed (episodes in sweeps and evaluation get their own)"),
    }),
    "mpc": (MpcConfig, {
        "horizon_steps": (int, "planning horizon N"),
        "step": (float, "planning step t_s [s]"),
        "v_ref": (float, "reference velocity [m/s]"),
        "state_weights": (_floats, "diagonal state weights on (d, v, a)"),
        "jerk_bounds": (_floats, "jerk limits [m/s^3]"),
        "accel_bounds": (_floats, "acceleration limits [m/s^2]"),
        "delta_t": (float, "time margin before the worst-case zone entry [s]"),
        "delta_d": (float, "distance margin to the front vehicle's stopping point [m]"),
    }),
    "weights": (ManeuverCostWeights, {
        "W_N": (float, "take-way jerk weight"),
        "W_L": (float, "progressive second-half braking-jerk weight"),
        "W_H": (float, "defensive and progressive first-half braking-jerk weight"),
        "W_C": (float, "cooperative jerk weight"),
    }),
    "train": (TrainConfig, {
        "gamma": (float, "discount factor"),
        "target_update_every": (int, "gradient steps between target-network copies"),
        "lr": (float, "Adam learning rate"),
        "eps_init": (float, "initial exploration rate"),
        "eps_final": (float, "final exploration rate"),
        "eps_decay_fraction": (float, "fraction of training over which epsilon decays linearly"),
        "rl_action_period": (float, "seconds between policy decisions"),
        "planner_period": (float, "seconds between planner calls"),
        "n_p": (int, "planner steps per policy decision"),
        "replay_capacity": (int, "replay buffer size"),
        "batch_size": (int, "minibatch size"),
        "total_steps": (int, "policy decisions (and updates) in one training run"),
        "history": (int, "observation history length H"),
    }),
    "schedule": (ScheduleConfig, {
        "log_every": (int, "policy decisions between training-log rows"),
        "eval_every": (int, "policy decisions between greedy evaluations (0 disables)"),
        "eval_episodes": (int, "episodes per greedy evaluation"),
        "eval_seed_base": (int, "first evaluation seed"),
    }),
    "sweep": (SweepConfig, {
        "densities": (_floats, "p_new values of the grid"),
        "cooperation": (_floats, "p_coop values of the grid"),
        "velocity_classes": (_strings, "velocity classes: 8 (mu in {5, 10}), 15 (mu = 15) or mixed"),
        "episodes": (int, "episodes per cell and policy"),
        "seed": (int, "first episode seed; episode k uses seed + k"),
    }),
    "eval": (EvalConfig, {
        "episodes": (int, "evaluation episodes"),
        "seed": (int, "first episode seed; episode k uses seed + k"),
    }),
}


@dataclass
class RunConfig:
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    mpc: MpcConfig = field(default_factory=MpcConfig)
    weights: ManeuverCostWeights = field(default_factory=ManeuverCostWeights)
    train: TrainConfig = field(default_factory=TrainConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        out = {}
        for name in SECTIONS:
            out[name] = {k: _plain(v) for k, v in dataclasses.asdict(getattr(self, name)).items()}
        return out

    def override(self, section: str, **values) -> "RunConfig":
        return from_mapping({**self.to_dict(), section: {**self.to_dict()[section], **values}})


def _plain(value):
    return list(value) if isinstance(value, tuple) else value


def _build(section: str, values: dict):
    cls, keys = SECTIONS[section]
    kwargs = {}
    for key, raw in values.items():
        if key not in keys:
            raise ConfigError(f"{section}.{key}", "unknown key")
        parser = keys[key][0]
        try:
            if isinstance(raw, str):
                kwargs[key] = parser(raw)
            elif isinstance(raw, list):
                kwargs[key] = tuple(raw)
            else:
                kwargs[key] = raw
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{section}.{key}", f"bad value {raw!r} ({exc})") from None
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        bad = next((k for k in kwargs if k in str(exc)), None)
        name = f"{section}.{bad}" if bad else section
        raise ConfigError(name, str(exc)) from None


def from_mapping(mapping: dict) -> RunConfig:
    built = {}
    for section, values in mapping.items():
        if section not in SECTIONS:
            raise ConfigError(section, "unknown section")
        built[section] = _build(section, dict(values))
    cfg = RunConfig(**built)
    if abs(cfg.scenario.sim_dt - cfg.mpc.step) > 1e-12:
        raise ConfigError("mpc.step", "must equal scenario.sim_dt")
    return cfg


def load_config(path=None) -> RunConfig:
    if path is None:
        return RunConfig()
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # keep W_N etc. case-sensitive
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise ConfigError(str(path), f"cannot read ({exc.strerror})") from None
    except configparser.Error as exc:
        raise ConfigError(str(path), f"malformed file ({exc.message})") from None
    return from_mapping({s: dict(parser.items(s)) for s in parser.sections()})


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        h.update(fh.read())
    return h.hexdigest()


def describe_keys() -> str:
    """Every key with its default, for ``--help``."""
    defaults = RunConfig().to_dict()
    lines = ["configuration keys ([section] key = default: meaning):"]
    for section, (_, keys) in SECTIONS.items():
        lines.append(f"  [{section}]")
        for key, (_, text) in keys.items():
            value = defaults[section][key]
            if isinstance(value, list):
                value = ", ".join(str(v) for v in value)
            lines.append(f"    {key} = {value}: {text}")
    return "\n".join(lines)
