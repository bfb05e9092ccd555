"""Test-time PUCT search over a trained policy / action-value network.

Leaf states are valued by the inner product of the improved policy and the
network's action values; terminal leaves back up the true outcome.  All
values are stored in the frame of the player to move at each node.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from klent import approx, games
from klent.approx import Parameters
from klent.regopt import RegWeights, improved_policy_batch


@dataclass(frozen=True)
class SearchConfig:
    simulations: int = 0
    c_puct: float = 1.25

    def __post_init__(self):
        if self.simulations < 0:
            raise ValueError("simulations must be >= 0")
        if self.c_puct <= 0:
            raise ValueError("c_puct must be positive")


class Node:
    __slots__ = ("state", "prior", "mask", "N", "W", "children", "visits")

    def __init__(self, state: games.GameState, prior: np.ndarray):
        self.state = state
        self.prior = prior
        self.mask = state.legal
        n = len(prior)
        self.N = np.zeros(n, dtype=np.int64)
        self.W = np.zeros(n, dtype=np.float64)
        self.children: dict[int, Node | float] = {}  # float = terminal reward for this node's mover
        self.visits = 1

    def mean_values(self) -> np.ndarray:
        return np.divide(self.W, self.N, out=np.zeros_like(self.W), where=self.N > 0)

    def select(self, c_puct: float) -> int:
        score = self.mean_values() + c_puct * self.prior * math.sqrt(self.visits) / (1.0 + self.N)
        return int(np.argmax(np.where(self.mask, score, -np.inf)))


def greedy_action(params: Parameters, state: games.GameState) -> int:
    """Argmax of the policy head over legal actions, lowest index on ties."""
    logits, _ = approx.forward_batch(params, games.encode(state)[None, :])
    return int(np.argmax(np.where(state.legal, logits[0], -np.inf)))


def _evaluate(params: Parameters, state: games.GameState, w: RegWeights) -> tuple[np.ndarray, float]:
    logits, q = approx.forward_batch(params, games.encode(state)[None, :])
    mask = state.legal[None, :]
    pi = improved_policy_batch(q, logits, mask, w)[0]
    q = np.clip(q[0], -1.0, 1.0)
    return pi, float(np.dot(pi[state.legal], q[state.legal]))


def search(
    state: games.GameState,
    params: Parameters,
    w: RegWeights,
    cfg: SearchConfig,
    rng: np.random.Generator | None = None,
) -> tuple[int, np.ndarray]:
    """Return (chosen action, root visit counts).

    With zero simulations this is the greedy policy-head action and the visit
    counts are all zero.  The search itself is deterministic; ``rng`` is
    accepted for interface symmetry with stochastic agents.
    """
    if state.terminal:
        raise ValueError("search called on a terminal state")
    n_actions = state.spec.num_actions
    if cfg.simulations == 0:
        return greedy_action(params, state), np.zeros(n_actions, dtype=np.int64)

    prior, _ = _evaluate(params, state, w)
    root = Node(state, prior)
    for _ in range(cfg.simulations):
        node = root
        path: list[tuple[Node, int]] = []
        while True:
            a = node.select(cfg.c_puct)
            path.append((node, a))
            child = node.children.get(a)
            if child is None:
                nxt, reward = games.step(node.state, a)
                if nxt.terminal:
                    node.children[a] = reward
                    value = reward
                else:
                    pi, v = _evaluate(params, nxt, w)
                    node.children[a] = Node(nxt, pi)
                    value = v if nxt.to_move == node.state.to_move else -v
                break
            if isinstance(child, float):
                value = child
                break
            node = child
        # value is in the frame of the last node on the path
        for i in range(len(path) - 1, -1, -1):
            node, a = path[i]
            node.N[a] += 1
            node.W[a] += value
            node.visits += 1
            if i and path[i - 1][0].state.to_move != node.state.to_move:
                value = -value
    visits = root.N.copy()
    return int(np.argmax(visits)), visits
