"""Seeded single-lane merge microsimulation.

Geometry: the ego route and the merging lane share one arc-length frame.  The
conflict zone occupies ``[conflict_zone_start, conflict_zone_end]`` on both;
upstream of it the two lanes are disjoint, downstream they form one road.
Merging-lane vehicles spawn with their front bumper at 0 and retire once it
passes ``merge_lane_length``.  Positions are front-bumper arc lengths.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Optional

import numpy as np

from .kinematics import EgoKinematicState, integrate

VEHICLE_LENGTH = 4.5
V_MAX = 15.0
DESIRED_VELOCITY_RANGE = (0.5, V_MAX)
# cooperative drivers yield while the ego is this close to the zone start
COOP_TRIGGER_DISTANCE = 40.0
# ...and only if they can stop comfortably at least this far before the zone
YIELD_STOP_MARGIN = 30.0
WARMUP_TIME = 15.0
# overlap below this is numerical contact, not a collision [m]
CONTACT_TOL = 1e-6


@dataclass(frozen=True)
class RoadLayout:
    merge_lane_length: float = 150.0
    ego_approach_length: float = 100.0
    conflict_zone_start: float = 80.0
    conflict_zone_length: float = 6.0
    goal_offset: float = 20.0

    def __post_init__(self):
        for name in ("merge_lane_length", "ego_approach_length", "conflict_zone_start",
                     "conflict_zone_length", "goal_offset"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not self.zone_end < min(self.merge_lane_length, self.ego_approach_length):
            raise ValueError("conflict zone must end before both lane ends")

    @property
    def zone_end(self) -> float:
        return self.conflict_zone_start + self.conflict_zone_length

    @property
    def goal_position(self) -> float:
        return self.zone_end + self.goal_offset


@dataclass(frozen=True)
class IdmParams:
    max_accel: float = 2.0
    min_decel: float = -10.0
    comfort_decel: float = 1.6
    min_gap: float = 2.0
    time_headway: float = 2.0
    delta: float = 4.0

    def __post_init__(self):
        if not self.max_accel > 0:
            raise ValueError("max_accel must be positive")
        if not self.min_decel < -self.comfort_decel < 0:
            raise ValueError("need min_decel < -comfort_decel < 0")
        if not (self.min_gap > 0 and self.time_headway > 0):
            raise ValueError("min_gap and time_headway must be positive")


@dataclass(frozen=True)
class DriverProfile:
    desired_velocity: float
    cooperative: bool = False


@dataclass(frozen=True)
class VehicleState:
    id: int
    lane_position: float
    velocity: float
    length: float = VEHICLE_LENGTH
    profile: DriverProfile = DriverProfile(10.0)
    yielding: bool = False
    accel: float = 0.0

    @property
    def rear(self) -> float:
        return self.lane_position - self.length

    @property
    def effective_desired_velocity(self) -> float:
        return 0.0 if self.yielding else self.profile.desired_velocity


@dataclass(frozen=True)
class ScenarioConfig:
    p_new: float = 0.1
    p_coop: float = 0.4
    velocity_mu_choices: tuple = (5.0, 10.0, 15.0)
    velocity_sigma: float = 2.0
    max_vehicles: int = 16
    sim_dt: float = 0.1
    episode_timeout: float = 60.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "velocity_mu_choices", tuple(float(v) for v in self.velocity_mu_choices))
        for key in ("p_new", "p_coop"):
            if not 0.0 <= getattr(self, key) <= 1.0:
                raise ValueError(f"{key} must lie in [0, 1]")
        if not self.sim_dt > 0:
            raise ValueError("sim_dt must be positive")
        if self.max_vehicles < 1:
            raise ValueError("max_vehicles must be >= 1")
        if not self.velocity_mu_choices:
            raise ValueError("velocity_mu_choices must not be empty")
        if self.velocity_sigma < 0 or self.episode_timeout <= 0:
            raise ValueError("velocity_sigma must be >= 0 and episode_timeout > 0")


@dataclass
class WorldState:
    time: float
    ego: EgoKinematicState
    vehicles: tuple
    layout: RoadLayout
    rng: np.random.Generator
    step_count: int = 0
    next_id: int = 1
    idm: IdmParams = field(default_factory=IdmParams)
    ego_length: float = VEHICLE_LENGTH
    # False once no further vehicle can ever appear (p_new == 0)
    spawning: bool = True

    @property
    def ego_rear(self) -> float:
        return self.ego.d - self.ego_length

    @property
    def ego_cleared(self) -> bool:
        return self.ego_rear >= self.layout.zone_end


class Collision(NamedTuple):
    first: str
    second: str
    kind: str  # "conflict_zone" | "same_lane"
    time: float


class RelevantVehicles(NamedTuple):
    closest_before: Optional[VehicleState]
    closest_after: Optional[VehicleState]
    front_vehicle: Optional[VehicleState]
    before_inside: bool


def new_world(cfg: ScenarioConfig, layout: RoadLayout | None = None, idm: IdmParams | None = None,
              ego: EgoKinematicState | None = None, warmup: float = WARMUP_TIME) -> WorldState:
    """Fresh episode: traffic pre-rolled for ``warmup`` seconds, ego at rest at 0."""
    world = WorldState(
        time=0.0,
        ego=ego or EgoKinematicState(0.0, 0.0, 0.0),
        vehicles=(),
        layout=layout or RoadLayout(),
        rng=np.random.default_rng(cfg.seed),
        idm=idm or IdmParams(),
        spawning=cfg.p_new > 0.0,
    )
    for _ in range(int(round(warmup / cfg.sim_dt))):
        world = _advance_traffic(world, cfg)
        world = spawn_step(world, cfg)
    return replace(world, time=0.0, step_count=0)


def spawn_step(world: WorldState, cfg: ScenarioConfig) -> WorldState:
    """One spawn attempt at the merging-lane entry.

    Four variates are consumed on every call, spawn or not, so the realization
    sequence does not depend on the traffic state.
    """
    rng = world.rng
    u_spawn = rng.random()
    mu_idx = int(rng.integers(len(cfg.velocity_mu_choices)))
    z = rng.standard_normal()
    u_coop = rng.random()
    if u_spawn >= cfg.p_new or len(world.vehicles) >= cfg.max_vehicles:
        return world
    length = VEHICLE_LENGTH
    clear = all(v.rear >= world.idm.min_gap for v in world.vehicles)
    if not clear:
        return world
    lo, hi = DESIRED_VELOCITY_RANGE
    v_des = float(np.clip(cfg.velocity_mu_choices[mu_idx] + cfg.velocity_sigma * z, lo, hi))
    v0 = v_des
    if world.vehicles:
        last = world.vehicles[-1]
        if last.rear < world.idm.min_gap + v_des * world.idm.time_headway:
            v0 = min(v_des, last.velocity)
    vehicle = VehicleState(world.next_id, 0.0, v0, length, DriverProfile(v_des, bool(u_coop < cfg.p_coop)))
    return replace(world, vehicles=world.vehicles + (vehicle,), next_id=world.next_id + 1)


def idm_acceleration(v: float, v0: float, gap: float | None, dv: float, params: IdmParams) -> float:
    """IDM law on raw quantities; ``dv`` is follower minus leader speed.

    ``v0 <= 0`` (a yielding driver) replaces the free-road term by a
    comfortable deceleration while moving.
    """
    if gap is not None and gap <= 0.0:
        return params.min_decel
    if v0 > 0.0:
        free = 1.0 - (v / v0) ** params.delta
        acc = params.max_accel * free
    else:
        acc = -params.comfort_decel if v > 0.0 else 0.0
    if gap is not None:
        s_star = params.min_gap + max(0.0, v * params.time_headway
                                      + v * dv / (2.0 * math.sqrt(params.max_accel * params.comfort_decel)))
        acc -= params.max_accel * (s_star / gap) ** 2
    return min(max(acc, params.min_decel), params.max_accel)


def idm_accel(follower: VehicleState, leader: VehicleState | None, params: IdmParams) -> float:
    if leader is None:
        return idm_acceleration(follower.velocity, follower.effective_desired_velocity, None, 0.0, params)
    gap = leader.rear - follower.lane_position
    return idm_acceleration(follower.velocity, follower.effective_desired_velocity, gap,
                            follower.velocity - leader.velocity, params)


def apply_cooperation(world: WorldState) -> WorldState:
    """Set the yielding flag of cooperative drivers for this step."""
    if not world.vehicles:
        return world
    layout = world.layout
    zs = layout.conflict_zone_start
    ego_near = (zs - world.ego.d) <= COOP_TRIGGER_DISTANCE and not world.ego_cleared
    b = world.idm.comfort_decel
    changed = False
    out = []
    for veh in world.vehicles:
        yielding = False
        if veh.profile.cooperative and ego_near and veh.lane_position < zs:
            stop_at = veh.lane_position + veh.velocity**2 / (2.0 * b)
            yielding = stop_at <= zs - YIELD_STOP_MARGIN
        if yielding != veh.yielding:
            veh = replace(veh, yielding=yielding)
            changed = True
        out.append(veh)
    return replace(world, vehicles=tuple(out)) if changed else world


def _ballistic(pos, vel, acc, dt):
    new_v = vel + acc * dt
    if new_v >= 0.0:
        return pos + vel * dt + 0.5 * acc * dt * dt, new_v
    # comes to rest inside the step
    t_stop = -vel / acc if acc < 0 else 0.0
    return pos + vel * t_stop + 0.5 * acc * t_stop * t_stop, 0.0


def _advance_traffic(world: WorldState, cfg: ScenarioConfig, ego_leader: bool = False) -> WorldState:
    dt = cfg.sim_dt
    params = world.idm
    ego_rear = world.ego_rear
    out = []
    prev = None
    for veh in world.vehicles:
        leader = prev
        acc = None
        if ego_leader and veh.lane_position <= ego_rear and (leader is None or leader.rear > ego_rear):
            acc = idm_acceleration(veh.velocity, veh.effective_desired_velocity, ego_rear - veh.lane_position,
                                   veh.velocity - world.ego.v, params)
        if acc is None:
            acc = idm_accel(veh, leader, params)
        pos, vel = _ballistic(veh.lane_position, veh.velocity, acc, dt)
        prev = veh
        if pos > world.layout.merge_lane_length:
            continue
        out.append(replace(veh, lane_position=pos, velocity=vel, accel=acc))
    step = world.step_count + 1
    return replace(world, vehicles=tuple(out), step_count=step, time=step * dt)


def step_world(world: WorldState, ego_jerk: float, cfg: ScenarioConfig) -> WorldState:
    """Advance by one ``sim_dt``: cooperation, IDM traffic, ego, retirement, spawn.

    IDM drivers ignore the ego except as an ordinary leader once it has fully
    left the conflict zone onto the shared road.
    """
    world = apply_cooperation(world)
    ego_leader = world.ego_cleared
    ego = integrate(world.ego, ego_jerk, cfg.sim_dt)
    world = _advance_traffic(world, cfg, ego_leader=ego_leader)
    world = replace(world, ego=ego)
    return spawn_step(world, cfg)


def detect_collisions(world: WorldState) -> list:
    layout = world.layout
    zs = layout.conflict_zone_start
    hits = []
    vehicles = world.vehicles
    for lead, follow in zip(vehicles, vehicles[1:]):
        if follow.lane_position - lead.rear > CONTACT_TOL:
            hits.append(Collision(str(follow.id), str(lead.id), "same_lane", world.time))
    e_front, e_rear = world.ego.d, world.ego_rear
    for veh in vehicles:
        lo = max(e_rear, veh.rear)
        hi = min(e_front, veh.lane_position)
        if hi - lo > CONTACT_TOL and hi - zs > CONTACT_TOL:
            kind = "conflict_zone" if lo < layout.zone_end else "same_lane"
            hits.append(Collision("ego", str(veh.id), kind, world.time))
    return hits


def relevant_vehicles(world: WorldState) -> RelevantVehicles:
    """Closest vehicle behind/inside the zone, closest past it, ego's front vehicle."""
    zs, ze = world.layout.conflict_zone_start, world.layout.zone_end
    before = None
    inside = None
    after = None
    front = None
    ego_on_shared = world.ego.d > zs
    for veh in world.vehicles:
        if veh.rear >= ze:
            if after is None or veh.rear < after.rear:
                after = veh
            if ego_on_shared and veh.rear > world.ego.d and (front is None or veh.rear < front.rear):
                front = veh
        elif veh.lane_position > zs:
            if inside is None or veh.lane_position < inside.lane_position:
                inside = veh
        elif before is None or veh.lane_position > before.lane_position:
            before = veh
    if inside is not None:
        return RelevantVehicles(inside, after, front, True)
    return RelevantVehicles(before, after, front, False)


TRACE_COLUMNS = ("time", "vehicle_id", "lane", "position", "velocity", "accel", "cooperative")


def trace_rows(world: WorldState):
    t = f"{world.time:.3f}"
    rows = [(t, "ego", "ego", repr(world.ego.d), repr(world.ego.v), repr(world.ego.a), "")]
    for veh in world.vehicles:
        rows.append((t, str(veh.id), "merge", repr(veh.lane_position), repr(veh.velocity),
                     repr(veh.accel), str(int(veh.profile.cooperative))))
    return rows


def write_trace(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRACE_COLUMNS)
        writer.writerows(rows)
