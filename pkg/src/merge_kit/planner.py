"""Jerk-controlled MPC with worst-case safety envelopes and a maneuver catalog.

Every planner step first tries the take-way QP (cross the conflict zone
``delta_t`` before the worst-case arrival of the closest merging vehicle,
while keeping a full stop behind the front vehicle's worst-case stopping
point possible).  If it is infeasible, the requested give-way variant (stop
before the zone) is solved instead.  All QP positions are relative to the
current ego front bumper.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from typing import NamedTuple

import numpy as np

from .kinematics import EgoKinematicState, prediction_matrices
from .qp import QpProblem, QpSolution, prepare_workspace, solve_qp
from .traffic import RoadLayout, VehicleState, WorldState, relevant_vehicles

WORST_CASE_ACCEL = 4.0
WORST_CASE_DECEL = -4.0
WORST_CASE_VMAX = 15.0
# right-hand side of safety rows that do not apply at this step [m]
UNBOUNDED = 1e9
# warm starts older than this many planner steps are discarded
MAX_WARM_GAP = 5


class ManeuverMode(str, Enum):
    TAKE_WAY = "take_way"
    PROGRESSIVE = "progressive"
    DEFENSIVE = "defensive"
    COOPERATIVE = "cooperative"

    @property
    def is_give_way(self) -> bool:
        return self is not ManeuverMode.TAKE_WAY


# RL action index -> give-way variant; frozen for checkpoint compatibility
GIVE_WAY_ACTIONS = (ManeuverMode.PROGRESSIVE, ManeuverMode.COOPERATIVE, ManeuverMode.DEFENSIVE)


@dataclass(frozen=True)
class MpcConfig:
    horizon_steps: int = 50
    step: float = 0.1
    v_ref: float = 15.0
    state_weights: tuple = (0.0, 1.0, 0.1)
    jerk_bounds: tuple = (-15.0, 15.0)
    accel_bounds: tuple = (-10.0, 2.5)
    delta_t: float = 0.5
    delta_d: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "state_weights", tuple(float(w) for w in self.state_weights))
        object.__setattr__(self, "jerk_bounds", tuple(float(w) for w in self.jerk_bounds))
        object.__setattr__(self, "accel_bounds", tuple(float(w) for w in self.accel_bounds))
        if self.horizon_steps < 2 or not self.step > 0:
            raise ValueError("need horizon_steps >= 2 and step > 0")
        if not (self.delta_t > 0 and self.delta_d > 0):
            raise ValueError("delta_t and delta_d must be positive")
        if not self.jerk_bounds[0] < 0 < self.jerk_bounds[1]:
            raise ValueError("jerk bounds must bracket zero")
        if not self.accel_bounds[0] < 0 < self.accel_bounds[1]:
            raise ValueError("accel bounds must bracket zero")
        if any(w < 0 for w in self.state_weights):
            raise ValueError("state weights must be non-negative")

    @property
    def horizon_time(self) -> float:
        return self.horizon_steps * self.step


@dataclass(frozen=True)
class ManeuverCostWeights:
    W_N: float = 0.5
    W_L: float = 0.005
    W_H: float = 5000.0
    W_C: float = 1.0

    def __post_init__(self):
        if min(self.W_N, self.W_L, self.W_H, self.W_C) <= 0:
            raise ValueError("all jerk-cost weights must be positive")


@dataclass(frozen=True)
class SafetyEnvelope:
    t_c: float  # worst-case zone entry time, -1 if occupied, inf if no constraint
    d_cs: float
    d_ce: float
    d_max: float = math.inf

    def __post_init__(self):
        if not self.d_ce > self.d_cs:
            raise ValueError("d_ce must exceed d_cs")
        if not (self.t_c >= 0 or self.t_c == -1):
            raise ValueError("t_c must be >= 0 or the -1 sentinel")


@dataclass
class JerkTrajectory:
    jerks: np.ndarray
    d: np.ndarray
    v: np.ndarray
    a: np.ndarray
    mode: ManeuverMode
    objective: float
    takeway_feasible: bool = False
    envelope: SafetyEnvelope | None = None
    solution: QpSolution | None = field(default=None, repr=False)

    @property
    def states(self):
        return [EgoKinematicState(float(d), float(v), float(a)) for d, v, a in zip(self.d, self.v, self.a)]


class PlannerFault(RuntimeError):
    """Neither take-way nor give-way is feasible (recursive feasibility broken)."""

    def __init__(self, message, dump):
        super().__init__(message)
        self.dump = dump

    def __reduce__(self):  # crosses process boundaries in parallel sweeps
        return (PlannerFault, (self.args[0], self.dump))


def worst_case_entry_time(vehicle: VehicleState, layout: RoadLayout,
                          a_max: float = WORST_CASE_ACCEL, v_max: float = WORST_CASE_VMAX) -> float:
    """Earliest zone entry under full acceleration to ``v_max``; -1 if inside."""
    zs = layout.conflict_zone_start
    if vehicle.lane_position > zs:
        return -1.0 if vehicle.rear < layout.zone_end else math.inf
    return _entry_time(zs - vehicle.lane_position, vehicle.velocity, a_max, v_max)


def _entry_time(dist: float, v: float, a_max: float, v_max: float) -> float:
    if dist <= 0.0:
        return 0.0
    if v >= v_max:
        return dist / v
    t_acc = (v_max - v) / a_max
    d_acc = v * t_acc + 0.5 * a_max * t_acc**2
    if dist <= d_acc:
        return (-v + math.sqrt(v * v + 2.0 * a_max * dist)) / a_max
    return t_acc + (dist - d_acc) / v_max


def spawn_entry_time(layout: RoadLayout) -> float:
    """Worst-case entry time of a vehicle that might appear at the lane entry."""
    return _entry_time(layout.conflict_zone_start, WORST_CASE_VMAX, WORST_CASE_ACCEL, WORST_CASE_VMAX)


def build_safety_envelope(world: WorldState, cfg: MpcConfig | None = None) -> SafetyEnvelope:
    layout = world.layout
    ego = world.ego
    rel = relevant_vehicles(world)
    d_cs = layout.conflict_zone_start - ego.d
    d_ce = layout.zone_end + world.ego_length - ego.d
    t_c = math.inf
    if not world.ego_cleared:
        if rel.closest_before is not None:
            t_c = -1.0 if rel.before_inside else worst_case_entry_time(rel.closest_before, layout)
        if world.spawning and t_c != -1.0:
            t_c = min(t_c, spawn_entry_time(layout))
    front = rel.front_vehicle
    if front is None and rel.closest_after is not None and rel.closest_after.rear > ego.d:
        front = rel.closest_after
    d_max = math.inf
    if front is not None:
        d_max = front.rear - ego.d + front.velocity**2 / (2.0 * -WORST_CASE_DECEL)
    return SafetyEnvelope(t_c, d_cs, d_ce, d_max)


def exit_index(t_c: float, cfg: MpcConfig) -> int | None:
    """Trajectory index that must lie past the zone; ``None`` when unconstrained."""
    if math.isinf(t_c):
        return None
    idx = math.floor((t_c - cfg.delta_t) / cfg.step + 1e-9)
    return max(min(idx, cfg.horizon_steps), 0)


def _one_sided(mode: ManeuverMode) -> bool:
    return mode in (ManeuverMode.PROGRESSIVE, ManeuverMode.DEFENSIVE)


def _jerk_weights(mode: ManeuverMode, n: int, w: ManeuverCostWeights) -> np.ndarray:
    if mode is ManeuverMode.TAKE_WAY:
        return np.full(n, w.W_N)
    if mode is ManeuverMode.COOPERATIVE:
        return np.full(n, w.W_C)
    if mode is ManeuverMode.DEFENSIVE:
        return np.full(n, w.W_H)
    k = np.arange(n)
    return np.where(k <= n / 2, w.W_H, w.W_L)


@lru_cache(maxsize=64)
def _cost_blocks(mode: ManeuverMode, cfg: MpcConfig, weights: ManeuverCostWeights):
    """State-tracking Hessian over jerks plus the mode's (split) Hessian."""
    n = cfg.horizon_steps
    _, gamma = prediction_matrices(n, cfg.step)
    q_d, q_v, q_a = cfg.state_weights
    g = gamma[1:]
    h_state = 2.0 * (q_d * g[:, 0].T @ g[:, 0] + q_v * g[:, 1].T @ g[:, 1] + q_a * g[:, 2].T @ g[:, 2])
    wj = _jerk_weights(mode, n, weights)
    if _one_sided(mode):
        e = np.hstack([np.eye(n), -np.eye(n)])
        h = e.T @ h_state @ e
        h[n:, n:] += 2.0 * np.diag(wj)
    else:
        h = h_state + 2.0 * np.diag(wj)
    h = 0.5 * (h + h.T)
    h.setflags(write=False)
    return h


class _ModeRows(NamedTuple):
    hard: np.ndarray       # accel upper, accel lower, v >= 0 for steps 1..N
    exit: np.ndarray       # d_k >= d_ce rows for k = 0..N (take-way only)
    terminal: np.ndarray   # d_N, v_N, a_N, -a_N upper limits
    lift: np.ndarray | None
    workspace: object
    shift: np.ndarray      # kernel row -> same constraint one step earlier, or -1


def _lifted(rows, lift):
    return rows if lift is None else rows @ lift


@lru_cache(maxsize=64)
def _mode_rows(mode: ManeuverMode, cfg: MpcConfig, weights: ManeuverCostWeights) -> _ModeRows:
    """Constraint matrices of one mode; only right-hand sides vary per step."""
    n = cfg.horizon_steps
    _, gamma = prediction_matrices(n, cfg.step)
    g = gamma[1:]
    lift = np.hstack([np.eye(n), -np.eye(n)]) if _one_sided(mode) else None
    hard = _lifted(np.vstack([g[:, 2], -g[:, 2], -g[:, 1]]), lift)
    exit_rows = _lifted(-gamma[:, 0], lift)
    terminal = _lifted(np.vstack([gamma[n, 0], gamma[n, 1], gamma[n, 2], -gamma[n, 2]]), lift)
    nv = n if lift is None else 2 * n
    soft = [(exit_rows, np.zeros(n + 1))] if mode is ManeuverMode.TAKE_WAY else []
    soft.append((terminal, np.zeros(4)))
    proto = QpProblem(_cost_blocks(mode, cfg, weights), np.zeros(nv),
                      ineq_constraints=[(hard, np.zeros(3 * n))],
                      variable_bounds=(np.zeros(nv), np.ones(nv)),
                      soft_constraints=soft)
    ws = prepare_workspace(proto)

    # warm-start map: every time-indexed row moves one step earlier
    shift = []
    for _ in range(3):  # hard rows, steps 1..N
        shift += [-1] + [len(shift) + k - 1 for k in range(1, n)]
    if mode is ManeuverMode.TAKE_WAY:  # exit rows, steps 0..N
        base = len(shift)
        shift += [-1] + [base + k - 1 for k in range(1, n + 1)]
    base = len(shift)
    shift += [base + k for k in range(4 + len(soft))]  # terminal and slack rows stay put
    for _ in range(2 * nv // n):  # bounds, one block of n per variable group and side
        base = len(shift)
        shift += [-1] + [base + k - 1 for k in range(1, n)]
    shift = np.asarray(shift, dtype=np.int64)
    assert shift.shape[0] == ws.rows.shape[0]
    for arr in (hard, exit_rows, terminal, shift):
        arr.setflags(write=False)
    return _ModeRows(hard, exit_rows, terminal, lift, ws, shift)


def build_maneuver_qp(ego: EgoKinematicState, env: SafetyEnvelope, mode: ManeuverMode,
                      cfg: MpcConfig, weights: ManeuverCostWeights) -> QpProblem:
    """Finite-horizon jerk QP for one maneuver mode.

    Decision variables are the N jerks, or (u+, u-) pairs for the one-sided
    give-way costs.  Safety rows (zone exit, terminal stop) are soft; rows
    that do not apply to this step get the right-hand side ``UNBOUNDED``.
    Raises ``ValueError`` for take-way with an occupied zone.
    """
    if mode is ManeuverMode.TAKE_WAY and env.t_c == -1:
        raise ValueError("take-way is undefined while a vehicle occupies the conflict zone")
    n = cfg.horizon_steps
    rows = _mode_rows(mode, cfg, weights)
    phi, gamma = prediction_matrices(n, cfg.step)
    x0 = np.array([0.0, ego.v, ego.a])
    free = phi @ x0  # (N+1, 3)
    q_d, q_v, q_a = cfg.state_weights
    g = gamma[1:]
    lin = 2.0 * (q_v * g[:, 1].T @ (free[1:, 1] - cfg.v_ref) + q_a * g[:, 2].T @ free[1:, 2])

    a_lo, a_hi = cfg.accel_bounds
    hard_b = np.concatenate([a_hi - free[1:, 2], free[1:, 2] - a_lo, free[1:, 1]])

    def terminal_stop(limit):
        return np.array([limit - free[n, 0], -free[n, 1], -free[n, 2], free[n, 2]])

    soft = []
    if mode is ManeuverMode.TAKE_WAY:
        exit_b = np.full(n + 1, UNBOUNDED)
        idx = exit_index(env.t_c, cfg)
        if idx is not None:
            exit_b[idx:] = free[idx:, 0] - env.d_ce
        soft.append((rows.exit, exit_b))
        term_b = terminal_stop(env.d_max - cfg.delta_d) if math.isfinite(env.d_max) else np.full(4, UNBOUNDED)
    else:
        term_b = terminal_stop(env.d_cs)
    soft.append((rows.terminal, term_b))

    j_lo, j_hi = cfg.jerk_bounds
    if rows.lift is not None:
        lo = np.zeros(2 * n)
        hi = np.concatenate([np.full(n, j_hi), np.full(n, -j_lo)])
        lin = rows.lift.T @ lin
    else:
        lo = np.full(n, j_lo)
        hi = np.full(n, j_hi)
    return QpProblem(
        hessian=_cost_blocks(mode, cfg, weights),
        linear_term=lin,
        ineq_constraints=[(rows.hard, hard_b)],
        variable_bounds=(lo, hi),
        soft_constraints=soft,
        workspace=rows.workspace,
    )


@dataclass
class PlannerMemory:
    """Latest active set per mode; warm-starts the next planner step of one episode."""

    active: dict = field(default_factory=dict)  # mode -> (planner step, kernel rows)

    def guess(self, mode: ManeuverMode, step: int, shift: np.ndarray):
        entry = self.active.get(mode)
        if entry is None or not 0 <= step - entry[0] <= MAX_WARM_GAP:
            return None
        rows = entry[1]
        for _ in range(step - entry[0]):
            rows = shift[rows]
            rows = rows[rows >= 0]
        return rows


def solve_maneuver(ego: EgoKinematicState, env: SafetyEnvelope, mode: ManeuverMode,
                   cfg: MpcConfig, weights: ManeuverCostWeights,
                   memory: PlannerMemory | None = None, step: int = 0) -> JerkTrajectory:
    problem = build_maneuver_qp(ego, env, mode, cfg, weights)
    guess = None if memory is None else memory.guess(mode, step, _mode_rows(mode, cfg, weights).shift)
    sol = solve_qp(problem, initial_active=guess)
    if memory is not None:
        memory.active[mode] = (step, sol.active_set)
    n = cfg.horizon_steps
    jerks = sol.x[:n] - sol.x[n:] if _one_sided(mode) else sol.x.copy()
    jerks = np.clip(jerks, *cfg.jerk_bounds)
    phi, gamma = prediction_matrices(n, cfg.step)
    states = phi @ ego.as_array() + gamma @ jerks
    return JerkTrajectory(jerks, states[:, 0], states[:, 1], states[:, 2], mode,
                          sol.objective, solution=sol, envelope=env)


def plan_step(world: WorldState, requested_giveway: ManeuverMode, cfg: MpcConfig | None = None,
              weights: ManeuverCostWeights | None = None,
              memory: PlannerMemory | None = None) -> JerkTrajectory:
    """Take-way if it is feasible, otherwise the requested give-way variant.

    ``memory`` (one per episode) carries active sets between consecutive
    steps; it changes the work done, not the result.
    """
    cfg = cfg or MpcConfig()
    weights = weights or ManeuverCostWeights()
    if not requested_giveway.is_give_way:
        raise ValueError("requested maneuver must be a give-way variant")
    env = build_safety_envelope(world, cfg)
    take = None
    if env.t_c != -1:
        take = solve_maneuver(world.ego, env, ManeuverMode.TAKE_WAY, cfg, weights,
                              memory, world.step_count)
        if take.solution.optimal:
            take.takeway_feasible = True
            return take
    give = solve_maneuver(world.ego, env, requested_giveway, cfg, weights, memory, world.step_count)
    if give.solution.optimal:
        return give
    dump = {
        "time": world.time,
        "ego": world.ego,
        "envelope": env,
        "requested": requested_giveway.value,
        "vehicles": world.vehicles,
        "takeway_status": None if take is None else take.solution.status.value,
        "takeway_slack": None if take is None else take.solution.slack_norm,
        "giveway_status": give.solution.status.value,
        "giveway_slack": give.solution.slack_norm,
    }
    raise PlannerFault("no feasible maneuver", dump)
