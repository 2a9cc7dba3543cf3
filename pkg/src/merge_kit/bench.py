"""Episode runner, rewards, comfort metrics and parameter sweeps."""

from __future__ import annotations

import csv
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .dqn import ObservationStack, build_observation
from .planner import ManeuverCostWeights, ManeuverMode, MpcConfig, PlannerMemory, plan_step
from .policies import Policy, PolicyKind
from .traffic import ScenarioConfig, detect_collisions, new_world, step_world, trace_rows

COMFORT_JERK = 5.0  # m/s^3; jerks up to this are comfortable
N_P = 6             # planner steps per policy decision
GAMMA = 0.99
POLICY_STREAM = 0x5EED  # seed-sequence key of the policy's own generator

VELOCITY_CLASSES = {"8": (5.0, 10.0), "15": (15.0,), "mixed": (5.0, 10.0, 15.0)}
DENSITIES = (0.02, 0.05, 0.1, 0.2, 0.3)

SWEEP_COLUMNS = ("policy", "p_new", "p_coop", "vel_class", "avg_time", "J_emg", "C", "avg_return",
                 "collisions", "avg_discounted_return", "episodes", "timeouts")
EPISODE_COLUMNS = ("policy", "p_new", "p_coop", "vel_class", "seed", "crossing_time", "reached_goal",
                   "collision", "J_emg", "return", "discounted_return")
PLANNER_TRACE_COLUMNS = ("step", "mode", "jerk", "d", "v", "a", "t_c", "feasible_takeway")


def _excess(jerks) -> np.ndarray:
    return np.maximum(np.asarray(jerks, dtype=np.float64) - COMFORT_JERK, 0.0) ** 2


def step_reward(executed_jerks, reached_goal: bool) -> float:
    """1 on reaching the goal, else minus the mean squared jerk excess of the tick."""
    if reached_goal:
        return 1.0
    jerks = np.asarray(executed_jerks, dtype=np.float64)
    if jerks.size == 0:
        return 0.0
    return -float(np.sum(_excess(jerks))) / jerks.size


def comfort_cost(jerks, n_e: int | None = None) -> float:
    """Mean squared jerk excess above ``COMFORT_JERK`` over ``n_e`` planner steps."""
    jerks = np.asarray(jerks, dtype=np.float64)
    n_e = jerks.size if n_e is None else n_e
    if n_e <= 0 or jerks.size == 0:
        raise ValueError("comfort cost needs at least one jerk")
    return float(np.sum(_excess(jerks))) / n_e


def total_cost(j_emg: float, avg_time: float) -> float:
    if j_emg < 0 or avg_time < 0:
        raise ValueError("total cost inputs must be non-negative")
    return j_emg * avg_time**2


def discounted(rewards, gamma: float = GAMMA) -> float:
    rewards = np.asarray(rewards, dtype=np.float64)
    return float(np.sum(rewards * gamma ** np.arange(rewards.size)))


# ---------------------------------------------------------------- episodes

@dataclass
class EpisodeResult:
    seed: int
    crossing_time: float
    reached_goal: bool
    collision: bool
    jerks: np.ndarray
    modes: list
    requested: list
    rewards: list
    collisions: list = field(default_factory=list)

    @property
    def comfort(self) -> float:
        return comfort_cost(self.jerks) if len(self.jerks) else 0.0

    @property
    def undiscounted_return(self) -> float:
        return float(np.sum(self.rewards))

    @property
    def discounted_return(self) -> float:
        return discounted(self.rewards)


class EpisodeRunner:
    """Steps one episode in policy ticks of ``n_p`` planner steps.

    The observation stack (if any) is updated every planner step; the caller
    chooses the give-way variant for each tick.
    """

    def __init__(self, cfg: ScenarioConfig, mpc: MpcConfig | None = None,
                 weights: ManeuverCostWeights | None = None, history: int | None = None,
                 n_p: int = N_P, record: bool = False):
        self.cfg = cfg
        self.mpc = mpc or MpcConfig()
        self.weights = weights or ManeuverCostWeights()
        if abs(self.mpc.step - cfg.sim_dt) > 1e-12:
            raise ValueError("planner step must equal the simulation step (first jerk is held for one step)")
        self.n_p = n_p
        self.world = new_world(cfg)
        self.memory = PlannerMemory()
        self.stack = None if history is None else ObservationStack(history)
        if self.stack is not None:
            self.stack.push(build_observation(self.world))
        self.max_steps = int(round(cfg.episode_timeout / cfg.sim_dt))
        self.jerks: list = []
        self.modes: list = []
        self.requested: list = []
        self.rewards: list = []
        self.collisions: list = []
        self.reached_goal = False
        self.done = False
        self.record = record
        self.traffic_trace: list = trace_rows(self.world) if record else []
        self.planner_trace: list = []

    @property
    def collision(self) -> bool:
        return bool(self.collisions)

    def run_tick(self, requested: ManeuverMode) -> float:
        """Executes up to ``n_p`` planner steps; returns the tick's reward."""
        if self.done:
            raise RuntimeError("episode already finished")
        self.requested.append(requested.value)
        executed = []
        goal = self.world.layout.goal_position
        for _ in range(self.n_p):
            world = self.world
            traj = plan_step(world, requested, self.mpc, self.weights, self.memory)
            jerk = float(traj.jerks[0])
            if self.record:
                self.planner_trace.append((world.step_count, traj.mode.value, repr(jerk), repr(world.ego.d),
                                           repr(world.ego.v), repr(world.ego.a), repr(traj.envelope.t_c),
                                           int(traj.takeway_feasible)))
            self.world = step_world(world, jerk, self.cfg)
            executed.append(jerk)
            self.modes.append(traj.mode.value)
            if self.record:
                self.traffic_trace += trace_rows(self.world)
            hits = [h for h in detect_collisions(self.world) if h.first == "ego"]
            if hits:
                self.collisions += hits
                self.done = True
                break
            if self.stack is not None:
                self.stack.push(build_observation(self.world))
            if self.world.ego.d >= goal:
                self.reached_goal = True
                self.done = True
                break
            if self.world.step_count >= self.max_steps:
                self.done = True
                break
        self.jerks += executed
        reward = step_reward(executed, self.reached_goal)
        self.rewards.append(reward)
        return reward

    def result(self) -> EpisodeResult:
        t = self.world.time if self.reached_goal else self.cfg.episode_timeout
        if self.collision:
            t = self.world.time
        return EpisodeResult(self.cfg.seed, t, self.reached_goal, self.collision, np.asarray(self.jerks),
                             list(self.modes), list(self.requested), list(self.rewards), list(self.collisions))


def policy_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), POLICY_STREAM]))


def run_episode(cfg: ScenarioConfig, policy: Policy, mpc: MpcConfig | None = None,
                weights: ManeuverCostWeights | None = None, record: bool = False):
    """Simulate until the ego front passes the goal or ``cfg.episode_timeout``.

    Returns the ``EpisodeResult``, or ``(result, runner)`` when ``record`` is
    set (the runner holds the traces).  ``PlannerFault`` propagates.
    """
    runner = EpisodeRunner(cfg, mpc, weights, history=policy.history if policy.needs_stack else None,
                           record=record)
    rng = policy_rng(cfg.seed)
    while not runner.done:
        runner.run_tick(policy.select(runner.world, runner.stack, rng))
    result = runner.result()
    return (result, runner) if record else result


# ---------------------------------------------------------------- aggregation

@dataclass(frozen=True)
class MetricsReport:
    avg_time: float
    comfort_cost: float
    total_cost: float
    avg_return: float
    avg_discounted_return: float
    episodes: int
    collisions: int
    timeouts: int


def aggregate(results) -> MetricsReport:
    """Per-episode comfort costs and returns averaged over episodes."""
    results = list(results)
    if not results:
        raise ValueError("no episodes to aggregate")
    avg_time = float(np.mean([r.crossing_time for r in results]))
    j_emg = float(np.mean([r.comfort for r in results]))
    return MetricsReport(
        avg_time=avg_time,
        comfort_cost=j_emg,
        total_cost=total_cost(j_emg, avg_time),
        avg_return=float(np.mean([r.undiscounted_return for r in results])),
        avg_discounted_return=float(np.mean([r.discounted_return for r in results])),
        episodes=len(results),
        collisions=sum(int(r.collision) for r in results),
        timeouts=sum(int(not r.reached_goal and not r.collision) for r in results),
    )


# ---------------------------------------------------------------- sweeps

@dataclass(frozen=True)
class SweepCell:
    p_new: float
    p_coop: float
    vel_class: str = "mixed"

    def scenario(self, base: ScenarioConfig, seed: int) -> ScenarioConfig:
        if self.vel_class not in VELOCITY_CLASSES:
            raise ValueError(f"unknown velocity class {self.vel_class!r}")
        return replace(base, p_new=self.p_new, p_coop=self.p_coop,
                       velocity_mu_choices=VELOCITY_CLASSES[self.vel_class], seed=int(seed))


@dataclass
class SweepRow:
    policy: str
    cell: SweepCell
    report: MetricsReport
    episodes: list

    def csv_row(self):
        r = self.report
        return (self.policy, repr(self.cell.p_new), repr(self.cell.p_coop), self.cell.vel_class,
                repr(r.avg_time), repr(r.comfort_cost), repr(r.total_cost), repr(r.avg_return),
                r.collisions, repr(r.avg_discounted_return), r.episodes, r.timeouts)


def _episode_job(args):
    scenario, policy, mpc, weights = args
    return run_episode(scenario, policy, mpc, weights)


def run_jobs(jobs, workers: int = 1):
    """Runs ``(scenario, policy, mpc, weights)`` jobs; results keep job order."""
    if workers <= 1 or len(jobs) <= 1:
        return [_episode_job(job) for job in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_episode_job, jobs, chunksize=max(1, len(jobs) // (8 * workers))))


def default_workers() -> int:
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:
        return os.cpu_count() or 1


def run_sweep(grid, seeds, policies, base: ScenarioConfig | None = None, mpc: MpcConfig | None = None,
              weights: ManeuverCostWeights | None = None, workers: int = 1) -> list:
    """Every policy on every cell with the same seed list (paired comparison)."""
    grid = list(grid)
    if not grid:
        raise ValueError("sweep grid is empty")
    kinds = [p.kind.value for p in policies]
    if len(set(kinds)) != len(kinds):
        raise ValueError(f"duplicate policies in sweep: {kinds}")
    base = base or ScenarioConfig()
    mpc = mpc or MpcConfig()
    weights = weights or ManeuverCostWeights()
    keys, jobs = [], []
    for cell in grid:
        for policy in policies:
            for seed in seeds:
                keys.append((cell, policy.kind.value))
                jobs.append((cell.scenario(base, seed), policy, mpc, weights))
    results = run_jobs(jobs, workers)
    rows = []
    for cell in grid:
        for policy in policies:
            eps = [r for k, r in zip(keys, results) if k == (cell, policy.kind.value)]
            rows.append(SweepRow(policy.kind.value, cell, aggregate(eps), eps))
    return rows


def write_sweep_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SWEEP_COLUMNS)
        for row in rows:
            writer.writerow(row.csv_row())


def write_episodes_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(EPISODE_COLUMNS)
        for row in rows:
            c = row.cell
            for r in row.episodes:
                writer.writerow((row.policy, repr(c.p_new), repr(c.p_coop), c.vel_class, r.seed,
                                 repr(r.crossing_time), int(r.reached_goal), int(r.collision),
                                 repr(r.comfort), repr(r.undiscounted_return), repr(r.discounted_return)))


def write_rows(path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        writer.writerows(rows)


def parse_policies(spec: str) -> list:
    if spec == "all":
        return [k.value for k in (PolicyKind.RANDOM, PolicyKind.PROGRESSIVE, PolicyKind.NEUTRAL,
                                  PolicyKind.DEFENSIVE, PolicyKind.RL)]
    names = [s.strip() for s in spec.split(",") if s.strip()]
    for name in names:
        PolicyKind(name)
    return names

