"""Self-play collection and fitting loop.

Each iteration clears the sample buffer, fills it with complete episodes
played by the improved policy of the current parameters, then fits the
parameters on that buffer only.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from klent import approx, games
from klent.approx import AdamState, Parameters, SampleRecord, TrainBatch
from klent.regopt import RegWeights, improved_policy_batch
from klent.returns import lambda_returns_arrays

log = logging.getLogger(__name__)

METRICS_SCHEMA = "klent.metrics/1"
LAMBDA_DEFAULT = math.exp(-1 / 8)


@dataclass(frozen=True)
class Hyperparameters:
    alpha: float = 0.03
    beta: float = 0.1
    lam: float = LAMBDA_DEFAULT
    gamma: float = 1.0

    def __post_init__(self):
        RegWeights(self.alpha, self.beta)
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in (0, 1], got {self.gamma}")

    @property
    def weights(self) -> RegWeights:
        return RegWeights(self.alpha, self.beta)


# ablation presets: (alpha, beta, lambda)
PRESETS: dict[str, Hyperparameters] = {
    "klent": Hyperparameters(0.03, 0.1, LAMBDA_DEFAULT),
    "kl-only": Hyperparameters(0.0, 0.1, LAMBDA_DEFAULT),
    "ent-only": Hyperparameters(0.03, 0.0, LAMBDA_DEFAULT),
    "one-step": Hyperparameters(0.03, 0.1, 0.0),
    "monte-carlo": Hyperparameters(0.03, 0.1, 1.0),
}


@dataclass
class TrainConfig:
    game: games.GameSpec = field(default_factory=games.GameSpec.countup)
    hp: Hyperparameters = field(default_factory=Hyperparameters)
    backend: str = "mlp"  # mlp | tabular
    hidden: tuple[int, ...] = (128, 128)
    capacity: int = 4096
    batch_size: int = 256
    epochs: int = 1
    lr: float = 1e-3
    budget: int = 200_000  # simulator evaluations
    max_iterations: int = 0  # 0 = unlimited
    eval_every: int = 0  # iterations; 0 = never
    eval_games: int = 200
    seed: int = 0
    max_plies: int = 0  # guard; 0 = game's own bound
    log_wallclock: bool = False

    def __post_init__(self):
        if self.backend not in ("mlp", "tabular"):
            raise ValueError(f"unknown backend {self.backend!r}")
        for name in ("capacity", "batch_size", "epochs", "budget", "eval_games"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.lr <= 0:
            raise ValueError("lr must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["game"] = str(self.game)
        d["hidden"] = list(self.hidden)
        return d

    @property
    def ply_guard(self) -> int:
        return self.max_plies or self.game.max_plies


def init_params(cfg: TrainConfig) -> Parameters:
    if cfg.backend == "tabular":
        return approx.init_tabular(cfg.game.feature_dim, cfg.game.num_actions)
    return approx.init_mlp(cfg.game.feature_dim, cfg.game.num_actions, cfg.hidden, seed=cfg.seed)


def stream(seed: int, *tags: int) -> np.random.Generator:
    """Independent generator for (seed, tags...)."""
    return np.random.default_rng([seed, *tags])


# ---------------------------------------------------------------------------
# acting


def act_improved(params: Parameters, X: np.ndarray, masks: np.ndarray, w: RegWeights):
    """Improved policy, its q-values and the expected value for each row."""
    logits, q = approx.forward_batch(params, X)
    pi = improved_policy_batch(q, logits, masks, w)
    vhat = np.sum(np.where(masks, pi * q, 0.0), axis=1)
    return pi, q, vhat


def sample_actions(pi: np.ndarray, masks: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    u = rng.random(pi.shape[0])
    cdf = np.cumsum(pi, axis=1)
    above = cdf > u[:, None]
    actions = np.argmax(above, axis=1)
    # rounding can leave cdf[-1] < u; fall back to the last legal action
    none = ~above.any(axis=1)
    if none.any():
        last_legal = masks.shape[1] - 1 - np.argmax(masks[:, ::-1], axis=1)
        actions[none] = last_legal[none]
    return actions


@dataclass
class Episode:
    X: np.ndarray
    masks: np.ndarray
    actions: np.ndarray
    targets: np.ndarray
    vhat: np.ndarray
    rewards: np.ndarray
    movers: np.ndarray
    keys: list[bytes]
    g_lambda: np.ndarray
    version: int = 0

    def __len__(self) -> int:
        return len(self.actions)

    def records(self) -> list[SampleRecord]:
        return [
            SampleRecord(self.X[t], self.masks[t], int(self.actions[t]), self.targets[t], float(self.g_lambda[t]), self.keys[t], self.version)
            for t in range(len(self))
        ]


class EpisodeTooLong(RuntimeError):
    pass


def play_episodes(
    spec: games.GameSpec,
    params: Parameters,
    hp: Hyperparameters,
    rng: np.random.Generator,
    n: int,
    version: int = 0,
    max_plies: int = 0,
    start: games.GameState | None = None,
    first_actions: np.ndarray | None = None,
) -> list[Episode]:
    """Play ``n`` complete episodes in lockstep, sampling from the improved policy.

    ``start`` / ``first_actions`` pin the initial state and the first action of
    every lane (used for rollouts from a fixed state-action pair).
    """
    w = hp.weights
    guard = max_plies or spec.max_plies
    root = start if start is not None else games.reset(spec)
    states = [root] * n
    logs: list[dict[str, list]] = [
        {k: [] for k in ("X", "masks", "actions", "targets", "vhat", "rewards", "movers", "keys")} for _ in range(n)
    ]
    active = list(range(n))
    ply = 0
    while active:
        if ply >= guard:
            raise EpisodeTooLong(f"episode exceeded {guard} plies in {spec}")
        X = np.stack([games.encode(states[i]) for i in active])
        masks = np.stack([states[i].legal for i in active])
        pi, _, vhat = act_improved(params, X, masks, w)
        actions = sample_actions(pi, masks, rng)
        if ply == 0 and first_actions is not None:
            actions = np.asarray(first_actions, dtype=np.int64)
        still = []
        for j, i in enumerate(active):
            s = states[i]
            nxt, reward = games.step(s, int(actions[j]))
            rec = logs[i]
            rec["X"].append(X[j])
            rec["masks"].append(masks[j])
            rec["actions"].append(int(actions[j]))
            rec["targets"].append(pi[j])
            rec["vhat"].append(vhat[j])
            rec["rewards"].append(reward)
            rec["movers"].append(s.to_move)
            rec["keys"].append(games.state_key(s))
            states[i] = nxt
            if not nxt.terminal:
                still.append(i)
        active = still
        ply += 1

    episodes = []
    for rec in logs:
        rewards = np.array(rec["rewards"])
        vh = np.array(rec["vhat"])
        movers = np.array(rec["movers"])
        g = lambda_returns_arrays(rewards, vh, movers, hp.lam, hp.gamma)
        episodes.append(
            Episode(
                np.stack(rec["X"]),
                np.stack(rec["masks"]),
                np.array(rec["actions"], dtype=np.int64),
                np.stack(rec["targets"]),
                vh,
                rewards,
                movers,
                rec["keys"],
                g,
                version,
            )
        )
    return episodes


def run_episode(spec: games.GameSpec, params: Parameters, hp: Hyperparameters, rng: np.random.Generator, max_plies: int = 0) -> list[SampleRecord]:
    return play_episodes(spec, params, hp, rng, 1, max_plies=max_plies)[0].records()


# ---------------------------------------------------------------------------
# buffer


@dataclass
class SampleBuffer:
    capacity: int
    episodes: list[Episode] = field(default_factory=list)

    def __len__(self) -> int:
        return sum(len(e) for e in self.episodes)

    @property
    def records(self) -> list[SampleRecord]:
        return [r for e in self.episodes for r in e.records()]

    def as_batch(self) -> TrainBatch:
        eps = self.episodes
        return TrainBatch(
            np.concatenate([e.X for e in eps]),
            np.concatenate([e.masks for e in eps]),
            np.concatenate([e.actions for e in eps]),
            np.concatenate([e.targets for e in eps]),
            np.concatenate([e.g_lambda for e in eps]),
        )

    def versions(self) -> set[int]:
        return {e.version for e in self.episodes}

    def mean_entropy(self) -> float:
        t = np.concatenate([e.targets for e in self.episodes])
        with np.errstate(divide="ignore", invalid="ignore"):
            h = -np.where(t > 0, t * np.log(t), 0.0).sum(axis=1)
        return float(h.mean())


def fill_buffer(cfg: TrainConfig, params: Parameters, rng: np.random.Generator, version: int = 0) -> SampleBuffer:
    """Collect whole episodes until at least ``cfg.capacity`` samples are held.

    Episodes are launched in waves of ceil(remaining / max_plies) lanes, so the
    final overshoot is below one maximal episode.
    """
    buf = SampleBuffer(cfg.capacity)
    count = 0
    bound = cfg.game.max_plies
    while count < cfg.capacity:
        lanes = -(-(cfg.capacity - count) // bound)
        wave = play_episodes(cfg.game, params, cfg.hp, rng, lanes, version, cfg.ply_guard)
        buf.episodes.extend(wave)
        count += sum(len(e) for e in wave)
    return buf


# ---------------------------------------------------------------------------
# fitting


def fit(params: Parameters, opt: AdamState, batch: TrainBatch, cfg: TrainConfig, rng: np.random.Generator):
    """Run ``cfg.epochs`` shuffled minibatch passes.  Returns (params, opt, mean loss)."""
    if params.kind == "tabular":
        params, _ = approx.expand_tabular(params, batch.X)
        opt = opt.resized(params.theta.size)
    losses = []
    n = len(batch)
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for lo in range(0, n, cfg.batch_size):
            mb = batch.subset(order[lo : lo + cfg.batch_size])
            value, grad = approx.loss_and_grad(params, mb)
            params, opt = approx.optimizer_step(params, grad, opt)
            losses.append(value)
    return params, opt, float(np.mean(losses))


# ---------------------------------------------------------------------------
# training loop


@dataclass
class IterationMetrics:
    iteration: int
    sim_evals: int
    loss: float
    entropy: float
    episode_length: float
    episodes: int
    win_rate: float | None = None
    seconds: float | None = None

    def to_json(self, with_time: bool = False) -> str:
        d = {"schema": METRICS_SCHEMA, **asdict(self)}
        if not with_time:
            d.pop("seconds")
        return json.dumps(d, sort_keys=True)


class TrainingDiverged(FloatingPointError):
    def __init__(self, iteration: int, checkpoint: Path | None, cause: Exception):
        self.iteration = iteration
        self.checkpoint = checkpoint
        super().__init__(f"non-finite loss at iteration {iteration} ({cause}); checkpoint kept at {checkpoint}")


@dataclass
class TrainResult:
    params: Parameters
    optimizer: AdamState
    metrics: list[IterationMetrics]
    sim_evals: int


def greedy_evaluation(params: Parameters, spec: games.GameSpec, games_count: int, seed: int) -> float:
    from klent import analysis

    agent = analysis.GreedyAgent(params)
    result = analysis.play_match(agent, analysis.RandomAgent(), spec, games_count, seed)
    return result.win_rate


def iterate_training(
    cfg: TrainConfig,
    params: Parameters | None = None,
    opt: AdamState | None = None,
    checkpoint_dir: Path | None = None,
) -> Iterator[tuple[IterationMetrics, Parameters, AdamState]]:
    """Generator over training iterations; yields (metrics, params, optimizer)."""
    params = params if params is not None else init_params(cfg)
    opt = opt if opt is not None else AdamState.for_params(params, lr=cfg.lr)
    chash = approx.config_hash(cfg.to_dict())
    extra = {"config": cfg.to_dict()}
    sims = 0
    it = 0
    while sims < cfg.budget and (cfg.max_iterations == 0 or it < cfg.max_iterations):
        t0 = time.perf_counter()
        buf = fill_buffer(cfg, params, stream(cfg.seed, it, 0), version=it)
        sims += len(buf)
        batch = buf.as_batch()
        if buf.versions() != {it}:
            raise AssertionError("buffer holds samples from stale parameters")
        try:
            new_params, new_opt, mean_loss = fit(params, opt, batch, cfg, stream(cfg.seed, it, 1))
        except FloatingPointError as exc:
            path = None
            if checkpoint_dir is not None:
                path = Path(checkpoint_dir) / f"diverged-{it:05d}.ckpt"
                approx.save_checkpoint(path, approx.Checkpoint(params, opt, it, chash, extra))
            raise TrainingDiverged(it, path, exc) from exc
        params, opt = new_params, new_opt
        m = IterationMetrics(
            iteration=it,
            sim_evals=sims,
            loss=mean_loss,
            entropy=buf.mean_entropy(),
            episode_length=len(buf) / len(buf.episodes),
            episodes=len(buf.episodes),
        )
        last = sims >= cfg.budget or (cfg.max_iterations and it + 1 >= cfg.max_iterations)
        if cfg.eval_every and ((it + 1) % cfg.eval_every == 0 or last):
            m.win_rate = greedy_evaluation(params, cfg.game, cfg.eval_games, cfg.seed * 7919 + it)
            if checkpoint_dir is not None:
                approx.save_checkpoint(Path(checkpoint_dir) / "latest.ckpt", approx.Checkpoint(params, opt, it + 1, chash, extra))
        m.seconds = time.perf_counter() - t0
        log.debug("iteration %d: sims=%d loss=%.4f entropy=%.3f", it, sims, m.loss, m.entropy)
        yield m, params, opt
        it += 1


def train(
    cfg: TrainConfig,
    metrics_path: Path | None = None,
    checkpoint_dir: Path | None = None,
    callback: Callable[[IterationMetrics], None] | None = None,
) -> TrainResult:
    params = init_params(cfg)
    opt = AdamState.for_params(params, lr=cfg.lr)
    history = []
    if checkpoint_dir is not None:
        Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
    sink = open(metrics_path, "w") if metrics_path is not None else None
    try:
        for m, params, opt in iterate_training(cfg, params, opt, checkpoint_dir):
            history.append(m)
            if sink is not None:
                sink.write(m.to_json(cfg.log_wallclock) + "\n")
                sink.flush()
            if callback is not None:
                callback(m)
    finally:
        if sink is not None:
            sink.close()
    if checkpoint_dir is not None:
        approx.save_checkpoint(
            Path(checkpoint_dir) / "final.ckpt",
            approx.Checkpoint(params, opt, len(history), approx.config_hash(cfg.to_dict()), {"config": cfg.to_dict()}),
        )
    sims = history[-1].sim_evals if history else 0
    return TrainResult(params, opt, history, sims)


def with_overrides(cfg: TrainConfig, **kw) -> TrainConfig:
    return replace(cfg, **kw)
