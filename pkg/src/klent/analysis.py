"""Exact solvers, agents, match harness and measurement tools."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from klent import games, search
from klent.approx import Parameters, TabularLayout, feature_key
from klent.games import GameSpec, GameState
from klent.returns import lambda_returns_arrays
from klent.selfplay import Hyperparameters, play_episodes, stream

# ---------------------------------------------------------------------------
# count-up solvers


@dataclass
class CountUpSolution:
    target: int
    increment: int
    values: np.ndarray  # (N,) +1 win / -1 loss for the player to move
    q: np.ndarray  # (N, k)
    optimal: list[tuple[int, ...]]  # optimal action indices per state

    def describe(self, state: int) -> str:
        if self.values[state] < 0:
            return "Lose anyway."
        moves = " or ".join(f"+{a + 1}" for a in self.optimal[state])
        return f"Win with A_t = {moves}."

    def table(self) -> str:
        lines = ["State | Optimal strategy", "------+------------------"]
        for s in range(self.target - 1, -1, -1):
            lines.append(f"{s:5d} | {self.describe(s)}")
        return "\n".join(lines)


def solve_countup_optimal(target: int, increment: int) -> CountUpSolution:
    """Backward induction from state N-1 down to 0."""
    if target < 1 or increment < 1:
        raise ValueError("need N >= 1 and k >= 1")
    values = np.zeros(target)
    q = np.zeros((target, increment))
    optimal = [()] * target
    for s in range(target - 1, -1, -1):
        for a in range(increment):
            nxt = s + a + 1
            q[s, a] = 1.0 if nxt >= target else -values[nxt]
        values[s] = q[s].max()
        optimal[s] = tuple(int(a) for a in np.flatnonzero(q[s] == values[s]))
    return CountUpSolution(target, increment, values, q, optimal)


@dataclass
class QrePolicy:
    alpha: float
    policy: np.ndarray  # (N, k)
    q: np.ndarray  # (N, k)

    def residual(self) -> float:
        z = self.q / self.alpha
        z = z - z.max(axis=1, keepdims=True)
        soft = np.exp(z)
        soft /= soft.sum(axis=1, keepdims=True)
        return float(np.abs(self.policy - soft).max())

    def bellman_residual(self) -> float:
        N, k = self.q.shape
        worst = 0.0
        for s in range(N):
            for a in range(k):
                nxt = s + a + 1
                target = 1.0 if nxt >= N else -float(np.dot(self.policy[nxt], self.q[nxt]))
                worst = max(worst, abs(self.q[s, a] - target))
        return worst


def solve_countup_qre(target: int, increment: int, alpha: float) -> QrePolicy:
    """Exact QRE by backward induction over the position DAG."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    policy = np.zeros((target, increment))
    q = np.zeros((target, increment))
    for s in range(target - 1, -1, -1):
        for a in range(increment):
            nxt = s + a + 1
            q[s, a] = 1.0 if nxt >= target else -float(np.dot(policy[nxt], q[nxt]))
        z = q[s] / alpha
        e = np.exp(z - z.max())
        policy[s] = e / e.sum()
    return QrePolicy(alpha, policy, q)


def countup_reachable(spec: GameSpec) -> list[tuple[int, int]]:
    """(position, player to move) pairs reachable from the initial state."""
    seen = {(0, 0)}
    frontier = [(0, 0)]
    while frontier:
        pos, who = frontier.pop()
        for a in range(spec.increment):
            nxt = (pos + a + 1, 1 - who)
            if nxt[0] < spec.size and nxt not in seen:
                seen.add(nxt)
                frontier.append(nxt)
    return sorted(seen)


def countup_policy_table(spec: GameSpec, params: Parameters) -> dict[tuple[int, int], np.ndarray]:
    """Policy-head probabilities keyed by reachable (position, player to move)."""
    from klent.approx import forward_batch
    from klent.regopt import masked_softmax

    pairs = countup_reachable(spec)
    X = np.zeros((len(pairs), spec.feature_dim))
    for i, (pos, who) in enumerate(pairs):
        X[i, pos] = 1.0
        X[i, -1] = 1.0 if who == 0 else 0.0
    logits, _ = forward_batch(params, X)
    probs = masked_softmax(logits, np.ones_like(logits, dtype=bool))
    return {pair: probs[i] for i, pair in enumerate(pairs)}


def countup_tabular_params(solution: CountUpSolution, sharpness: float = 20.0) -> Parameters:
    """Tabular parameters encoding the exact solution for both players to move."""
    spec = GameSpec.countup(solution.target, solution.increment)
    k = solution.increment
    keys, rows = [], []
    for to_move in (0, 1):
        for s in range(solution.target):
            x = np.zeros(spec.feature_dim)
            x[s] = 1.0
            x[-1] = 1.0 if to_move == 0 else 0.0
            logits = np.full(k, -sharpness)
            logits[list(solution.optimal[s])] = 0.0
            keys.append(feature_key(x))
            rows.append(np.concatenate([logits, solution.q[s]]))
    layout = TabularLayout(spec.feature_dim, k, keys)
    return Parameters(layout, np.concatenate(rows))


# ---------------------------------------------------------------------------
# agents and matches


class Agent:
    name = "agent"

    def act(self, state: GameState, rng: np.random.Generator) -> int:
        raise NotImplementedError


class RandomAgent(Agent):
    name = "random"

    def act(self, state, rng):
        return int(rng.choice(np.flatnonzero(state.legal)))


class GreedyAgent(Agent):
    name = "greedy"

    def __init__(self, params: Parameters):
        self.params = params

    def act(self, state, rng):
        return search.greedy_action(self.params, state)


class SearchAgent(Agent):
    name = "search"

    def __init__(self, params: Parameters, hp: Hyperparameters, simulations: int, c_puct: float = 1.25):
        self.params = params
        self.weights = hp.weights
        self.cfg = search.SearchConfig(simulations, c_puct)

    def act(self, state, rng):
        return search.search(state, self.params, self.weights, self.cfg, rng)[0]


class CountUpOptimalAgent(Agent):
    name = "optimal-countup"

    def __init__(self, spec: GameSpec):
        if spec.kind != "countup":
            raise ValueError("optimal agent only exists for count-up")
        self.solution = solve_countup_optimal(spec.size, spec.increment)

    def act(self, state, rng):
        return self.solution.optimal[state.position][0]


class IllegalMoveError(RuntimeError):
    def __init__(self, agent: Agent, state: GameState, action: int, transcript: list[int]):
        self.transcript = transcript
        super().__init__(f"{agent.name} played illegal action {action}; transcript {transcript}")


@dataclass
class MatchResult:
    wins: int = 0
    losses: int = 0
    draws: int = 0
    seeds: list[int] = field(default_factory=list)
    first_player_wins: int = 0  # wins by agent_a when it moved first

    @property
    def games(self) -> int:
        return self.wins + self.losses + self.draws

    @property
    def win_rate(self) -> float:
        return (self.wins + 0.5 * self.draws) / self.games

    def summary(self) -> str:
        return f"W {self.wins} / D {self.draws} / L {self.losses}  win-rate {self.win_rate:.4f} (draws count 0.5)"


def play_game(agents: tuple[Agent, Agent], spec: GameSpec, rng: np.random.Generator) -> tuple[float, list[int]]:
    """Play one game; returns (outcome for agents[0] who moves first, transcript)."""
    state = games.reset(spec)
    transcript: list[int] = []
    while not state.terminal:
        agent = agents[state.to_move]
        action = agent.act(state, rng)
        if not (0 <= action < spec.num_actions and state.legal[action]):
            raise IllegalMoveError(agent, state, action, transcript)
        transcript.append(action)
        state, _ = games.step(state, action)
    return games.outcome_for(state, 0), transcript


def play_match(agent_a: Agent, agent_b: Agent, spec: GameSpec, games_count: int, seed: int = 0) -> MatchResult:
    """agent_a moves first in even-numbered games, second in odd ones."""
    if games_count < 1:
        raise ValueError("games must be >= 1")
    result = MatchResult()
    for g in range(games_count):
        game_seed = seed * 1_000_003 + g
        rng = stream(game_seed)
        a_first = g % 2 == 0
        order = (agent_a, agent_b) if a_first else (agent_b, agent_a)
        outcome, _ = play_game(order, spec, rng)
        score = outcome if a_first else -outcome
        if score > 0:
            result.wins += 1
            result.first_player_wins += a_first
        elif score < 0:
            result.losses += 1
        else:
            result.draws += 1
        result.seeds.append(game_seed)
    return result


def elo_from_winrate(w: float, r0: float = 1000.0) -> float:
    """400 * log10(w / (1 - w)) + r0; +/-inf at w = 1 / w = 0."""
    if not 0.0 <= w <= 1.0:
        raise ValueError(f"win rate must lie in [0, 1], got {w}")
    if w == 0.0:
        return -math.inf
    if w == 1.0:
        return math.inf
    return 400.0 * math.log10(w / (1.0 - w)) + r0


def legal_action_stats(spec: GameSpec, games_count: int, seed: int = 0, policy: Agent | None = None) -> tuple[float, int]:
    """Mean and max number of legal actions over every non-terminal state visited."""
    policy = policy or RandomAgent()
    total = 0
    visited = 0
    most = 0
    for g in range(games_count):
        rng = stream(seed, g)
        state = games.reset(spec)
        while not state.terminal:
            n = int(state.legal.sum())
            total += n
            visited += 1
            most = max(most, n)
            state, _ = games.step(state, policy.act(state, rng))
    return total / visited, most


# ---------------------------------------------------------------------------
# bias / variance of lambda-returns


@dataclass
class BiasVarianceRow:
    lam: float
    bias2: float
    variance: float
    mse: float
    stderr: float  # standard error of the mse estimate


@dataclass
class BiasVarianceReport:
    rows: list[BiasVarianceRow]
    pairs: list[tuple[bytes, int]]
    oracle_rollouts: int
    rollouts_per_point: int
    per_pair: dict = field(default_factory=dict)  # lam -> list of (bias, variance, mse, stderr)

    def to_csv(self) -> str:
        lines = ["lambda,bias2,variance,mse,stderr"]
        for r in self.rows:
            lines.append(f"{r.lam!r},{r.bias2!r},{r.variance!r},{r.mse!r},{r.stderr!r}")
        return "\n".join(lines) + "\n"


def evaluation_pairs(spec: GameSpec, params: Parameters, hp: Hyperparameters, rng, probes: int = 16, plies: int = 3):
    """Distinct (state, action) pairs over the first ``plies`` plies of on-policy rollouts."""
    seen: dict[bytes, GameState] = {}
    for ep in play_episodes(spec, params, hp, rng, probes):
        state = games.reset(spec)
        for t in range(min(plies, len(ep))):
            seen.setdefault(games.state_key(state), state)
            state, _ = games.step(state, int(ep.actions[t]))
    pairs = []
    for key in sorted(seen):
        state = seen[key]
        for a in np.flatnonzero(state.legal):
            pairs.append((state, int(a)))
    return pairs


def _returns_at_start(episodes, lam: float, gamma: float) -> np.ndarray:
    return np.array([lambda_returns_arrays(e.rewards, e.vhat, e.movers, lam, gamma)[0] for e in episodes])


def bias_variance(
    spec: GameSpec,
    params: Parameters,
    hp: Hyperparameters,
    lambda_grid,
    rollouts_per_point: int = 200,
    oracle_rollouts: int = 1000,
    seed: int = 0,
    pairs=None,
) -> BiasVarianceReport:
    """Squared bias, variance and MSE of the lambda-return at the first step of
    rollouts from fixed state-action pairs, against a Monte Carlo surrogate of
    the true action value.  ``params`` are never modified."""
    if rollouts_per_point < 2 or oracle_rollouts < 2:
        raise ValueError("need at least 2 rollouts")
    if pairs is None:
        pairs = evaluation_pairs(spec, params, hp, stream(seed, 0))
    per_pair: dict[float, list] = {float(l): [] for l in lambda_grid}
    for i, (state, action) in enumerate(pairs):
        first = np.full(oracle_rollouts, action)
        oracle_eps = play_episodes(spec, params, hp, stream(seed, 1, i), oracle_rollouts, start=state, first_actions=first)
        truth = float(_returns_at_start(oracle_eps, 1.0, hp.gamma).mean())
        first = np.full(rollouts_per_point, action)
        eps = play_episodes(spec, params, hp, stream(seed, 2, i), rollouts_per_point, start=state, first_actions=first)
        for lam in per_pair:
            g = _returns_at_start(eps, lam, hp.gamma)
            err2 = (g - truth) ** 2
            bias = float(g.mean() - truth)
            var = float(g.var(ddof=1))
            mse = float(err2.mean())
            se = float(err2.std(ddof=1) / math.sqrt(len(g)))
            per_pair[lam].append((bias, var, mse, se))
    rows = []
    for lam, stats in per_pair.items():
        s = np.array(stats)
        P = len(s)
        rows.append(
            BiasVarianceRow(
                lam,
                float(np.mean(s[:, 0] ** 2)),
                float(np.mean(s[:, 1])),
                float(np.mean(s[:, 2])),
                float(np.sqrt(np.sum(s[:, 3] ** 2)) / P),
            )
        )
    keyed = [(games.state_key(s), a) for s, a in pairs]
    return BiasVarianceReport(rows, keyed, oracle_rollouts, rollouts_per_point, per_pair)
