"""Lambda-return targets for two-player self-play trajectories.

All stored quantities (rewards, bootstrap values) are in the frame of the
player who moved at that step.  When the mover changes between two steps the
carried value is negated, so the returned targets are each in the frame of
their own step's mover.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from klent import _kernels


@dataclass
class TrajectoryStep:
    key: bytes
    features: np.ndarray
    mask: np.ndarray
    action: int
    reward: float
    target_policy: np.ndarray
    vhat: float
    mover: int


def state_value_estimate(policy, q, mask=None) -> float:
    """Expected action value under ``policy`` over legal actions."""
    policy = np.asarray(policy, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if mask is None:
        return float(np.dot(policy, q))
    mask = np.asarray(mask, dtype=bool)
    return float(np.dot(policy[mask], q[mask]))


def _check(lam: float, gamma: float, T: int):
    if T == 0:
        raise ValueError("empty trajectory")
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    if not 0.0 < gamma <= 1.0:
        raise ValueError(f"gamma must lie in (0, 1], got {gamma}")


def lambda_returns_arrays(rewards, vhat, movers, lam: float, gamma: float = 1.0) -> np.ndarray:
    """Lambda-returns for one complete episode given per-step arrays.

    ``vhat[t]`` is the bootstrap estimate of the state at step t (mover frame);
    the value of the terminal state that follows the last step is taken as 0.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    vhat = np.asarray(vhat, dtype=np.float64)
    movers = np.asarray(movers)
    T = rewards.shape[0]
    _check(lam, gamma, T)
    if vhat.shape[0] != T or movers.shape[0] != T:
        raise ValueError("rewards, vhat and movers must have equal length")
    vhat_next = np.zeros(T, dtype=np.float64)
    vhat_next[:-1] = vhat[1:]
    same_mover = np.ones(T, dtype=np.bool_)
    same_mover[:-1] = movers[1:] == movers[:-1]
    return _kernels.lambda_return(rewards, vhat_next, same_mover, float(lam), float(gamma))


def lambda_returns(traj: list[TrajectoryStep], lam: float, gamma: float = 1.0) -> np.ndarray:
    _check(lam, gamma, len(traj))
    return lambda_returns_arrays(
        [s.reward for s in traj], [s.vhat for s in traj], [s.mover for s in traj], lam, gamma
    )


def lambda_weights(horizon: int, lam: float) -> np.ndarray:
    """Mixture weights over n = 1..horizon step returns; they sum to 1."""
    w = np.empty(horizon, dtype=np.float64)
    n = np.arange(1, horizon)
    w[:-1] = (1.0 - lam) * lam ** (n - 1)
    w[-1] = lam ** (horizon - 1)
    return w
