"""Deep-Sets double DQN: observations, k-Markov stacking, Q-network, training.

Each vehicle's history (newest first) is one set element; the ego history is
encoded separately.  Set elements go through ``vehicle_encoder`` and ``phi``
and are summed, so the Q-values do not depend on vehicle order and any number
of vehicles (including none) is accepted.
"""

from __future__ import annotations

import json
import hashlib
import logging
from dataclasses import dataclass, field

import numpy as np

from .nn import AdamState, Mlp, NnError, adam_step, load_checkpoint, save_checkpoint
from .planner import GIVE_WAY_ACTIONS, ManeuverMode
from .traffic import WorldState

log = logging.getLogger(__name__)

N_ACTIONS = len(GIVE_WAY_ACTIONS)
MAX_OBSERVED_VEHICLES = 16
EGO_FEATURES = 4
VEHICLE_FEATURES = 2
# fixed input scaling: metres / 100, velocities / 15 m/s, acceleration / 10 m/s^2
EGO_SCALE = np.array([100.0, 100.0, 15.0, 10.0])
VEHICLE_SCALE = np.array([100.0, 15.0])
NET_NAMES = ("ego_encoder", "vehicle_encoder", "phi", "rho", "head")


# ---------------------------------------------------------------- observations

@dataclass(frozen=True)
class Observation:
    ego_static: tuple  # (d_cs, d_goal, v_e, a_e)
    vehicles: dict     # vehicle id -> (d_i relative to the zone start, v_i)


def build_observation(world: WorldState) -> Observation:
    layout = world.layout
    ego = world.ego
    zs = layout.conflict_zone_start
    ego_static = (zs - ego.d, layout.goal_position - ego.d, ego.v, ego.a)
    vehicles = {veh.id: (veh.lane_position - zs, veh.velocity) for veh in world.vehicles[:MAX_OBSERVED_VEHICLES]}
    return Observation(ego_static, vehicles)


@dataclass(frozen=True)
class StackSnapshot:
    """Immutable network input: ego (H, 4) and vehicles (n, H, 2), newest first."""

    ego: np.ndarray
    vehicles: np.ndarray
    ids: tuple = ()

    @property
    def history(self) -> int:
        return self.ego.shape[0]

    def ego_features(self) -> np.ndarray:
        return (self.ego / EGO_SCALE).reshape(-1)

    def vehicle_features(self) -> np.ndarray:
        return (self.vehicles / VEHICLE_SCALE).reshape(self.vehicles.shape[0], -1)


class ObservationStack:
    """H most recent observations; per-vehicle histories keyed by id."""

    def __init__(self, history: int = 24):
        if history < 1:
            raise ValueError("history length must be >= 1")
        self.history = history
        self.count = 0
        self.ego = np.zeros((history, EGO_FEATURES))
        self.vehicles: dict = {}

    @property
    def warm(self) -> bool:
        return self.count > 0

    def __len__(self) -> int:
        return min(self.count, self.history)

    def copy(self) -> "ObservationStack":
        out = ObservationStack(self.history)
        out.count = self.count
        out.ego = self.ego.copy()
        out.vehicles = {vid: h.copy() for vid, h in self.vehicles.items()}
        return out

    def push(self, obs: Observation) -> None:
        """In-place push; the first push (and a new vehicle) back-fills every slot."""
        ego = np.asarray(obs.ego_static, dtype=np.float64)
        if self.count == 0:
            self.ego[:] = ego
        else:
            self.ego[1:] = self.ego[:-1].copy()
            self.ego[0] = ego
        fresh = {}
        for vid, feat in obs.vehicles.items():
            feat = np.asarray(feat, dtype=np.float64)
            hist = self.vehicles.get(vid)
            if hist is None:
                hist = np.tile(feat, (self.history, 1))
            else:
                hist[1:] = hist[:-1].copy()
                hist[0] = feat
            fresh[vid] = hist
        self.vehicles = fresh
        self.count += 1

    def snapshot(self) -> StackSnapshot:
        ids = tuple(sorted(self.vehicles))
        if ids:
            veh = np.stack([self.vehicles[i] for i in ids])
        else:
            veh = np.zeros((0, self.history, VEHICLE_FEATURES))
        ego = self.ego.copy()
        ego.setflags(write=False)
        veh.setflags(write=False)
        return StackSnapshot(ego, veh, ids)


def stack_history(stack: ObservationStack, obs: Observation) -> ObservationStack:
    out = stack.copy()
    out.push(obs)
    return out


# ---------------------------------------------------------------- Q-network

@dataclass(frozen=True)
class NetworkSizes:
    history: int = 24
    ego_hidden: tuple = (64, 32)
    vehicle_hidden: tuple = (64, 32)
    phi: tuple = (64, 64)
    rho: tuple = (64,)
    head: tuple = (64, N_ACTIONS)

    def layer_sizes(self) -> dict:
        h = self.history
        return {
            "ego_encoder": (EGO_FEATURES * h,) + tuple(self.ego_hidden),
            "vehicle_encoder": (VEHICLE_FEATURES * h,) + tuple(self.vehicle_hidden),
            "phi": (self.vehicle_hidden[-1],) + tuple(self.phi),
            "rho": (self.phi[-1] + self.ego_hidden[-1],) + tuple(self.rho),
            "head": (self.rho[-1],) + tuple(self.head),
        }


@dataclass
class QCache:
    caches: dict
    seg: np.ndarray
    batch: int
    n_vehicles: int
    pooled_dim: int


class QNetwork:
    """ego_encoder; vehicle_encoder -> phi -> sum; [sum, ego] -> rho -> head."""

    def __init__(self, nets: dict):
        missing = [name for name in NET_NAMES if name not in nets]
        if missing:
            raise NnError(f"Q-network lacks {missing}")
        self.nets = {name: nets[name] for name in NET_NAMES}
        self._check()

    @classmethod
    def build(cls, sizes: NetworkSizes, rng: np.random.Generator) -> "QNetwork":
        nets = {}
        for name, dims in sizes.layer_sizes().items():
            nets[name] = Mlp.build(dims, rng, output_activation="identity" if name == "head" else "relu")
        return cls(nets)

    def _check(self):
        n = self.nets
        if n["vehicle_encoder"].out_dim != n["phi"].in_dim:
            raise NnError("vehicle encoder and phi do not chain")
        if n["phi"].out_dim + n["ego_encoder"].out_dim != n["rho"].in_dim:
            raise NnError("rho input must equal pooled plus ego feature width")
        if n["rho"].out_dim != n["head"].in_dim or n["head"].out_dim != N_ACTIONS:
            raise NnError(f"head must map rho output to {N_ACTIONS} Q-values")
        if n["ego_encoder"].in_dim % EGO_FEATURES or n["vehicle_encoder"].in_dim % VEHICLE_FEATURES:
            raise NnError("encoder inputs must be whole histories")
        if n["ego_encoder"].in_dim // EGO_FEATURES != n["vehicle_encoder"].in_dim // VEHICLE_FEATURES:
            raise NnError("ego and vehicle encoders disagree on the history length")

    @property
    def history(self) -> int:
        return self.nets["ego_encoder"].in_dim // EGO_FEATURES

    @property
    def version(self) -> tuple:
        return tuple(net.version for net in self.nets.values())

    def parameters(self) -> list:
        out = []
        for net in self.nets.values():
            out += net.parameters()
        return out

    def touch(self) -> None:
        for net in self.nets.values():
            net.touch()

    def copy(self) -> "QNetwork":
        return QNetwork({name: net.copy() for name, net in self.nets.items()})

    def load_from(self, other: "QNetwork") -> None:
        for name, net in self.nets.items():
            net.load_from(other.nets[name])

    def layer_sizes(self) -> dict:
        return {name: list(net.sizes) for name, net in self.nets.items()}

    def forward(self, states):
        """Q-values (B, 3) for a list of ``StackSnapshot``."""
        batch = len(states)
        for s in states:
            if s.history != self.history:
                raise NnError(f"stack history {s.history} does not match the network's {self.history}")
        ego = np.stack([s.ego_features() for s in states])
        counts = [s.vehicles.shape[0] for s in states]
        seg = np.repeat(np.arange(batch), counts)
        caches = {}
        e, caches["ego_encoder"] = self.nets["ego_encoder"].forward(ego)
        pooled_dim = self.nets["phi"].out_dim
        pooled = np.zeros((batch, pooled_dim))
        if seg.size:
            veh = np.concatenate([s.vehicle_features() for s in states if s.vehicles.shape[0]])
            z, caches["vehicle_encoder"] = self.nets["vehicle_encoder"].forward(veh)
            p, caches["phi"] = self.nets["phi"].forward(z)
            np.add.at(pooled, seg, p)
        r, caches["rho"] = self.nets["rho"].forward(np.hstack([pooled, e]))
        q, caches["head"] = self.nets["head"].forward(r)
        return q, QCache(caches, seg, batch, int(seg.size), pooled_dim)

    def __call__(self, states):
        return self.forward(states)[0]

    def backward(self, cache: QCache, q_grad) -> list:
        """Parameter gradients in ``parameters()`` order."""
        c = cache.caches
        g_head, g_r = self.nets["head"].backward(c["head"], q_grad)
        g_rho, g_cat = self.nets["rho"].backward(c["rho"], g_r)
        g_pooled, g_e = g_cat[:, :cache.pooled_dim], g_cat[:, cache.pooled_dim:]
        g_ego, _ = self.nets["ego_encoder"].backward(c["ego_encoder"], g_e)
        if cache.n_vehicles:
            g_phi, g_z = self.nets["phi"].backward(c["phi"], g_pooled[cache.seg])
            g_veh, _ = self.nets["vehicle_encoder"].backward(c["vehicle_encoder"], g_z)
        else:
            g_phi = [np.zeros_like(p) for p in self.nets["phi"].parameters()]
            g_veh = [np.zeros_like(p) for p in self.nets["vehicle_encoder"].parameters()]
        by_name = {"ego_encoder": g_ego, "vehicle_encoder": g_veh, "phi": g_phi, "rho": g_rho, "head": g_head}
        out = []
        for name in NET_NAMES:
            out += by_name[name]
        return out


def q_forward(net: QNetwork, state) -> np.ndarray:
    if isinstance(state, ObservationStack):
        if not state.warm:
            raise ValueError("observation stack is empty")
        state = state.snapshot()
    return net([state])[0]


def select_action(net: QNetwork, state, epsilon: float, rng: np.random.Generator) -> int:
    """Epsilon-greedy action index; ties go to the lowest index.

    One uniform variate is drawn per call, plus one integer when exploring.
    """
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must lie in [0, 1]")
    if rng.random() < epsilon:
        return int(rng.integers(N_ACTIONS))
    return int(np.argmax(q_forward(net, state)))


def action_mode(index: int) -> ManeuverMode:
    return GIVE_WAY_ACTIONS[index]


# ---------------------------------------------------------------- learning

@dataclass(frozen=True)
class Transition:
    state: StackSnapshot
    action: int
    reward: float
    next_state: StackSnapshot
    terminal: bool

    def __post_init__(self):
        if not 0 <= self.action < N_ACTIONS:
            raise ValueError(f"action index {self.action} is not a give-way variant")


@dataclass(frozen=True)
class TrainConfig:
    gamma: float = 0.99
    target_update_every: int = 200
    lr: float = 9e-7
    eps_init: float = 0.3
    eps_final: float = 0.2
    eps_decay_fraction: float = 0.5
    rl_action_period: float = 0.6
    planner_period: float = 0.1
    n_p: int = 6
    replay_capacity: int = 100_000
    batch_size: int = 32
    total_steps: int = 50_000
    history: int = 24

    def __post_init__(self):
        if abs(self.rl_action_period - self.n_p * self.planner_period) > 1e-9:
            raise ValueError("rl_action_period must equal n_p x planner_period")
        if not 0.0 <= self.eps_final <= self.eps_init <= 1.0:
            raise ValueError("need 0 <= eps_final <= eps_init <= 1")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if min(self.target_update_every, self.batch_size, self.replay_capacity, self.n_p, self.history) < 1:
            raise ValueError("counts in the training config must be positive")
        if self.total_steps < 0 or not self.lr > 0:
            raise ValueError("need total_steps >= 0 and lr > 0")


def epsilon_at(step: int, cfg: TrainConfig) -> float:
    """Linear decay from eps_init to eps_final over the first fraction of training."""
    horizon = cfg.eps_decay_fraction * cfg.total_steps
    if horizon <= 0:
        return cfg.eps_final
    frac = min(max(step / horizon, 0.0), 1.0)
    return cfg.eps_init + frac * (cfg.eps_final - cfg.eps_init)


class ReplayBuffer:
    """Fixed-capacity ring of transitions with uniform sampling."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("replay capacity must be positive")
        self.capacity = capacity
        self.items: list = []
        self.cursor = 0

    def __len__(self) -> int:
        return len(self.items)

    def add(self, transition: Transition) -> None:
        if len(self.items) < self.capacity:
            self.items.append(transition)
        else:
            self.items[self.cursor] = transition
        self.cursor = (self.cursor + 1) % self.capacity

    def sample(self, rng: np.random.Generator, batch: int) -> list:
        idx = rng.integers(len(self.items), size=batch)
        return [self.items[i] for i in idx]


def td_targets(rewards, terminals, q_online_next, q_target_next, gamma: float) -> np.ndarray:
    """y = r + gamma * Q_target(s', argmax_a Q_online(s', a)); y = r when terminal."""
    rewards = np.asarray(rewards, dtype=np.float64)
    terminals = np.asarray(terminals, dtype=bool)
    best = np.argmax(np.asarray(q_online_next), axis=1)
    boot = np.asarray(q_target_next)[np.arange(best.size), best]
    return np.where(terminals, rewards, rewards + gamma * boot)


def double_dqn_targets(batch, online: QNetwork, target: QNetwork, gamma: float) -> np.ndarray:
    if not batch:
        raise ValueError("empty batch")
    nxt = [t.next_state for t in batch]
    return td_targets([t.reward for t in batch], [t.terminal for t in batch], online(nxt), target(nxt), gamma)


def td_loss_and_grads(online: QNetwork, batch, targets):
    """Mean squared TD error over the chosen actions, and its parameter gradients."""
    q, cache = online.forward([t.state for t in batch])
    actions = np.array([t.action for t in batch])
    rows = np.arange(len(batch))
    err = q[rows, actions] - targets
    loss = float(np.mean(err**2))
    q_grad = np.zeros_like(q)
    q_grad[rows, actions] = 2.0 * err / len(batch)
    return loss, online.backward(cache, q_grad)


@dataclass
class DqnLearner:
    """Online and target networks, replay and optimizer of one training run."""

    online: QNetwork
    cfg: TrainConfig
    rng: np.random.Generator
    target: QNetwork | None = None
    replay: ReplayBuffer | None = None
    adam: AdamState | None = None
    updates: int = 0
    history: list = field(default_factory=list)

    def __post_init__(self):
        if self.target is None:
            self.target = self.online.copy()
        if self.replay is None:
            self.replay = ReplayBuffer(self.cfg.replay_capacity)
        if self.adam is None:
            self.adam = AdamState.for_params(self.online.parameters(), lr=self.cfg.lr)


def train_step(learner: DqnLearner, batch=None):
    """One Adam step on a uniformly sampled batch; returns the loss or ``None``.

    With fewer transitions than one batch the call is a no-op.  Every
    ``target_update_every`` updates the target network becomes a copy of the
    online one.
    """
    cfg = learner.cfg
    if batch is None:
        if len(learner.replay) < cfg.batch_size:
            log.warning("train_step skipped: replay holds %d of %d transitions",
                        len(learner.replay), cfg.batch_size)
            return None
        batch = learner.replay.sample(learner.rng, cfg.batch_size)
    targets = double_dqn_targets(batch, learner.online, learner.target, cfg.gamma)
    loss, grads = td_loss_and_grads(learner.online, batch, targets)
    adam_step(learner.online, grads, learner.adam)
    for k, p in enumerate(learner.online.parameters()):
        if not np.all(np.isfinite(p)):
            raise NnError(f"non-finite parameters after update {learner.updates + 1} (array {k})")
    learner.updates += 1
    if learner.updates % cfg.target_update_every == 0:
        learner.target.load_from(learner.online)
    return loss


# ---------------------------------------------------------------- checkpoints

def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def save_agent(path, net: QNetwork, step: int = 0, epsilon: float | None = None, extra: dict | None = None) -> dict:
    """Checkpoint plus ``<path>.json`` manifest; returns the manifest."""
    save_checkpoint(path, net.nets)
    manifest = {
        "format": "merge_kit.deepsets_dqn",
        "history": net.history,
        "layer_sizes": net.layer_sizes(),
        "action_modes": [m.value for m in GIVE_WAY_ACTIONS],
        "training_step": int(step),
        "epsilon": epsilon,
        "checkpoint_sha256": file_sha256(path),
    }
    manifest.update(extra or {})
    with open(f"{path}.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def load_agent(path) -> QNetwork:
    return QNetwork(load_checkpoint(path))
