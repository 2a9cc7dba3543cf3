"""Ego longitudinal state and the jerk-driven triple integrator."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np


@dataclass(frozen=True)
class EgoKinematicState:
    d: float  # arc length of the front bumper along the ego route [m]
    v: float  # [m/s]
    a: float  # [m/s^2]

    def as_array(self) -> np.ndarray:
        return np.array([self.d, self.v, self.a])


def transition(dt: float):
    """Exact zero-order-hold jerk discretization ``x+ = A x + B u``."""
    A = np.array([[1.0, dt, 0.5 * dt**2], [0.0, 1.0, dt], [0.0, 0.0, 1.0]])
    B = np.array([dt**3 / 6.0, 0.5 * dt**2, dt])
    return A, B


def integrate(state: EgoKinematicState, jerk: float, dt: float) -> EgoKinematicState:
    d, v, a = state.d, state.v, state.a
    return EgoKinematicState(
        d + v * dt + 0.5 * a * dt**2 + jerk * dt**3 / 6.0,
        v + a * dt + 0.5 * jerk * dt**2,
        a + jerk * dt,
    )


@lru_cache(maxsize=16)
def prediction_matrices(horizon: int, dt: float):
    """Stacked responses for steps 0..N.

    Returns ``(Phi, Gamma)`` with ``Phi`` of shape (N+1, 3, 3) and ``Gamma`` of
    shape (N+1, 3, N) so that ``x_k = Phi[k] x_0 + Gamma[k] u``.
    """
    A, B = transition(dt)
    phi = np.zeros((horizon + 1, 3, 3))
    gamma = np.zeros((horizon + 1, 3, horizon))
    phi[0] = np.eye(3)
    for k in range(horizon):
        phi[k + 1] = A @ phi[k]
        gamma[k + 1] = A @ gamma[k]
        gamma[k + 1][:, k] = B
    phi.setflags(write=False)
    gamma.setflags(write=False)
    return phi, gamma
