"""High-level policies: map a world snapshot to a requested give-way variant.

Take-way preemption is not a policy concern; ``plan_step`` applies it for
every policy.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .dqn import N_ACTIONS, ObservationStack, QNetwork, action_mode, load_agent, select_action
from .planner import GIVE_WAY_ACTIONS, ManeuverMode
from .traffic import WorldState


class PolicyKind(str, Enum):
    RANDOM = "random"
    PROGRESSIVE = "progressive"
    DEFENSIVE = "defensive"
    NEUTRAL = "neutral"
    RL = "rl"


BASELINES = (PolicyKind.RANDOM, PolicyKind.PROGRESSIVE, PolicyKind.NEUTRAL, PolicyKind.DEFENSIVE)
ALL_POLICIES = BASELINES + (PolicyKind.RL,)

_FIXED = {
    PolicyKind.PROGRESSIVE: ManeuverMode.PROGRESSIVE,
    PolicyKind.DEFENSIVE: ManeuverMode.DEFENSIVE,
    # symmetric jerk penalty: "uniformly punishes all jerk commands"
    PolicyKind.NEUTRAL: ManeuverMode.COOPERATIVE,
}


class CheckpointError(FileNotFoundError):
    """RL policy constructed without a loadable checkpoint."""


@dataclass
class Policy:
    kind: PolicyKind
    network: QNetwork | None = None
    checkpoint: str | None = None

    @classmethod
    def create(cls, kind, checkpoint=None, network: QNetwork | None = None) -> "Policy":
        kind = PolicyKind(kind)
        if kind is PolicyKind.RL and network is None:
            if checkpoint is None or not os.path.isfile(checkpoint):
                raise CheckpointError(f"RL policy needs a checkpoint file, got {checkpoint!r}")
            try:
                network = load_agent(checkpoint)
            except ValueError as exc:
                raise CheckpointError(f"cannot load checkpoint {checkpoint}: {exc}") from exc
        return cls(kind, network, checkpoint)

    @property
    def needs_stack(self) -> bool:
        return self.kind is PolicyKind.RL

    @property
    def history(self) -> int | None:
        return None if self.network is None else self.network.history

    def select(self, world: WorldState, stack: ObservationStack | None, rng: np.random.Generator) -> ManeuverMode:
        return select_maneuver(self, world, stack, rng)


def select_maneuver(policy: Policy, world: WorldState, stack: ObservationStack | None,
                    rng: np.random.Generator) -> ManeuverMode:
    kind = policy.kind
    if kind in _FIXED:
        return _FIXED[kind]
    if kind is PolicyKind.RANDOM:
        return GIVE_WAY_ACTIONS[int(rng.integers(N_ACTIONS))]
    if stack is None or not stack.warm:
        raise ValueError("the RL policy needs a warm observation stack")
    return action_mode(select_action(policy.network, stack, 0.0, rng))
