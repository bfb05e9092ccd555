"""Acceptance suite: one test per numbered criterion.

Each test records a PASS/FAIL line (shown in the terminal summary) and then
asserts the same condition, so a red criterion also fails the run.
"""

import math
import time
import timeit

import numpy as np
import pytest
from oracles import (
    finite_difference_gradient,
    lambda_return_double_sum,
    monte_carlo_returns,
    one_step_returns,
    random_trajectory,
    relative_error,
    simplex_grid_argmax,
)

from klent import analysis, approx
from klent.games import GameSpec
from klent.regopt import RegWeights, improved_policy, objective
from klent.returns import lambda_returns_arrays, lambda_weights
from klent.selfplay import PRESETS, Hyperparameters, TrainConfig, iterate_training, train

COUNTUP = GameSpec.countup(7, 2)
LAM = math.exp(-1 / 8)


@pytest.mark.criterion(1)
def test_closed_form_optimality(criterion):
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst_gap, worst_grid, n_grid = -np.inf, 0.0, 0
    for _ in range(1000):
        n = int(rng.integers(2, 9))
        q = rng.uniform(-1, 1, n)
        prior = rng.uniform(0.05, 1.0, n)
        prior /= prior.sum()
        w = RegWeights(*rng.uniform(0.01, 1.0, 2))
        best = improved_policy(q, prior, w)
        top = objective(best, q, prior, w)
        for _ in range(100):
            scale = rng.choice([1e-4, 1e-2, 0.3])
            other = np.clip(best + rng.normal(0, scale, n), 0, None)
            other = other / other.sum() if other.sum() > 0 else np.eye(n)[rng.integers(n)]
            worst_gap = max(worst_gap, objective(other, q, prior, w) - top)
        if n == 2:
            n_grid += 1
            grid = simplex_grid_argmax(q, prior, w.alpha, w.beta, 1e-3)
            worst_grid = max(worst_grid, np.abs(best - grid).max())
    elapsed = time.perf_counter() - t0
    ok = worst_gap <= 1e-9 and worst_grid <= 1e-3 and n_grid > 0 and elapsed < 10
    criterion.record(
        ok, f"max objective gain by perturbation {worst_gap:.2e}; |A|=2 grid L-inf {worst_grid:.2e} over {n_grid}; {elapsed:.1f}s"
    )
    assert ok


@pytest.mark.criterion(2)
def test_lambda_return_correctness(criterion):
    rng = np.random.default_rng(7)
    t0 = time.perf_counter()
    err_sum = err_ends = 0.0
    for i in range(1000):
        rewards, vhat, movers = random_trajectory(rng, T=int(rng.integers(1, 16)), alternating=bool(i % 4))
        lam, gamma = rng.uniform(), rng.uniform(0.5, 1.0)
        err_sum = max(err_sum, np.abs(lambda_returns_arrays(rewards, vhat, movers, lam, gamma) - lambda_return_double_sum(rewards, vhat, movers, lam, gamma)).max())
        err_ends = max(
            err_ends,
            np.abs(lambda_returns_arrays(rewards, vhat, movers, 0.0, gamma) - one_step_returns(rewards, vhat, movers, gamma)).max(),
            np.abs(lambda_returns_arrays(rewards, vhat, movers, 1.0, gamma) - monte_carlo_returns(rewards, movers, gamma)).max(),
        )
    err_w = max(abs(lambda_weights(h, lam).sum() - 1) for h in range(1, 64) for lam in (0.0, 0.25, LAM, 0.99, 1.0))
    elapsed = time.perf_counter() - t0
    ok = err_sum <= 1e-10 and err_ends <= 1e-12 and err_w <= 1e-12 and elapsed < 5
    criterion.record(ok, f"vs double sum {err_sum:.1e}; endpoints {err_ends:.1e}; weight sums {err_w:.1e}; {elapsed:.2f}s")
    assert ok


@pytest.mark.criterion(3)
def test_countup_optimal_table(criterion):
    expected = [
        (6, "Win with A_t = +1 or +2."),
        (5, "Win with A_t = +2."),
        (4, "Lose anyway."),
        (3, "Win with A_t = +1."),
        (2, "Win with A_t = +2."),
        (1, "Lose anyway."),
        (0, "Win with A_t = +1."),
    ]
    sol = analysis.solve_countup_optimal(7, 2)
    rows = [(s, sol.describe(s)) for s in range(6, -1, -1)]
    runtime = min(timeit.repeat(lambda: analysis.solve_countup_optimal(7, 2), number=20, repeat=5)) / 20
    ok = rows == expected and runtime < 1e-3
    criterion.record(ok, f"{sum(a == b for a, b in zip(rows, expected))}/7 rows match; {runtime * 1e6:.0f} us")
    assert ok


@pytest.mark.criterion(4)
def test_qre_fixed_point(criterion):
    residuals = {a: analysis.solve_countup_qre(7, 2, a).residual() for a in (0.03, 1.0)}
    sol = analysis.solve_countup_optimal(7, 2)
    cold = analysis.solve_countup_qre(7, 2, 0.03)
    dist = 0.0
    for s in range(7):
        if sol.values[s] > 0:
            target = np.zeros(2)
            target[list(sol.optimal[s])] = 1 / len(sol.optimal[s])
            dist = max(dist, np.abs(cold.policy[s] - target).max())
    runtime = min(timeit.repeat(lambda: analysis.solve_countup_qre(7, 2, 1.0), number=10, repeat=5)) / 10
    ok = max(residuals.values()) <= 1e-12 and dist <= 0.01 and runtime < 0.01
    criterion.record(ok, f"residuals {residuals[0.03]:.1e} / {residuals[1.0]:.1e}; alpha=0.03 vs optimal {dist:.1e}; {runtime * 1e3:.2f} ms")
    assert ok


def train_within(cfg):
    """Metrics and parameters of the last iteration whose evaluation count stays within the budget."""
    last = None
    for m, params, _ in iterate_training(cfg):
        if m.sim_evals > cfg.budget:
            break
        last = (m, params)
    return last


def policy_gap_to_qre(params, qre):
    table = analysis.countup_policy_table(COUNTUP, params)
    return max(float(np.abs(p - qre.policy[pos]).max()) for (pos, _), p in table.items())


@pytest.mark.criterion(5)
@pytest.mark.slow
def test_klent_converges_to_qre(criterion):
    t0 = time.perf_counter()
    qre = analysis.solve_countup_qre(7, 2, 1.0)
    cfg = TrainConfig(
        game=COUNTUP, hp=Hyperparameters(1.0, 0.1, LAM), backend="tabular", capacity=1024, lr=1e-2, budget=500_000, seed=0
    )
    m, params = train_within(cfg)
    gap = policy_gap_to_qre(params, qre)
    elapsed = time.perf_counter() - t0
    ok = gap <= 0.05 and elapsed <= 300
    criterion.record(ok, f"max |pi - pi_QRE| = {gap:.4f} after {m.sim_evals} evaluations; {elapsed:.0f}s")
    assert ok


@pytest.mark.criterion(6)
def test_klent_learns_optimal_countup(criterion):
    t0 = time.perf_counter()
    cfg = TrainConfig(game=COUNTUP, hp=PRESETS["klent"], backend="tabular", capacity=1024, lr=1e-2, budget=200_000, seed=0)
    res = train(cfg)
    sol = analysis.solve_countup_optimal(7, 2)
    table = analysis.countup_policy_table(COUNTUP, res.params)
    wrong = [(pos, who) for (pos, who), p in table.items() if pos in (0, 2, 3, 5, 6) and int(np.argmax(p)) not in sol.optimal[pos]]
    checked = sorted({pos for pos, _ in table if pos in (0, 2, 3, 5, 6)})
    elapsed = time.perf_counter() - t0
    ok = not wrong and checked == [0, 2, 3, 5, 6] and elapsed <= 120
    criterion.record(ok, f"greedy choice optimal at states {checked} (misses: {wrong or 'none'}); {elapsed:.0f}s")
    assert ok


@pytest.mark.criterion(7)
@pytest.mark.slow
def test_entropy_ablation(criterion):
    budget, seeds = 500_000, (0, 1, 2, 3)
    final = {}
    for name in ("kl-only", "klent"):
        final[name] = []
        for seed in seeds:
            cfg = TrainConfig(game=COUNTUP, hp=PRESETS[name], backend="tabular", capacity=256, lr=3e-2, budget=budget, seed=seed)
            final[name].append(train_within(cfg)[0].entropy)
    kl, ke = np.mean(final["kl-only"]), np.mean(final["klent"])
    ok = kl < 0.05 and ke > 0.2
    detail = ", ".join(f"{x:.3f}" for x in final["kl-only"]), ", ".join(f"{x:.3f}" for x in final["klent"])
    criterion.record(ok, f"final entropy over seeds {list(seeds)}: kl-only mean {kl:.3f} [{detail[0]}], klent mean {ke:.3f} [{detail[1]}]")
    assert ok


@pytest.mark.criterion(8)
def test_bias_variance_shape(criterion, tmp_path):
    t0 = time.perf_counter()
    cfg = TrainConfig(game=COUNTUP, hp=PRESETS["klent"], backend="tabular", capacity=1024, lr=1e-2, budget=5000, seed=0)
    res = train(cfg, checkpoint_dir=tmp_path)
    frozen = approx.load_checkpoint(tmp_path / "final.ckpt").params
    grid = [0.0, 0.5, LAM, 1.0]
    rep = analysis.bias_variance(COUNTUP, frozen, cfg.hp, grid, rollouts_per_point=200, oracle_rollouts=1000, seed=0)
    var = [r.variance for r in rep.rows]
    bias2 = [r.bias2 for r in rep.rows]
    identity = max(abs(r.mse - r.bias2 - r.variance) / max(r.stderr, 1e-300) for r in rep.rows)
    identity_ok = all(abs(r.mse - r.bias2 - r.variance) <= 3 * r.stderr for r in rep.rows)
    elapsed = time.perf_counter() - t0
    ok = np.all(np.diff(var) >= -1e-12) and np.all(np.diff(bias2) <= 1e-12) and identity_ok and elapsed <= 120
    assert np.array_equal(frozen.theta, res.params.theta)
    criterion.record(
        ok,
        "variance " + " <= ".join(f"{v:.4f}" for v in var) + "; bias^2 " + " >= ".join(f"{b:.4f}" for b in bias2)
        + f"; worst identity gap {identity:.2f} SE; {len(rep.pairs)} pairs; {elapsed:.0f}s",
    )
    assert ok


@pytest.mark.criterion(9)
def test_elo_conversion(criterion):
    even = analysis.elo_from_winrate(0.5, 1000)
    three = analysis.elo_from_winrate(0.75, 1000)
    ok = even == 1000.0 and abs(three - 1190.8485) <= 1e-3
    criterion.record(ok, f"w=0.5 -> {even}; w=0.75 -> {three:.6f}")
    assert ok


@pytest.mark.criterion(10)
def test_mlp_gradient(criterion):
    rng = np.random.default_rng(10)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(20):
        D, A, B = int(rng.integers(3, 28)), int(rng.integers(2, 10)), int(rng.integers(1, 17))
        hidden = tuple(int(h) for h in rng.integers(4, 33, size=rng.integers(1, 3)))
        base = approx.init_mlp(D, A, hidden, seed=int(rng.integers(1 << 30)))
        params = approx.Parameters(base.layout, base.theta + rng.normal(0, 0.05, base.theta.size))
        masks = rng.random((B, A)) < 0.7
        masks[np.arange(B), rng.integers(0, A, B)] = True
        targets = np.where(masks, rng.random((B, A)), 0.0)
        targets /= targets.sum(1, keepdims=True)
        actions = np.array([rng.choice(np.flatnonzero(m)) for m in masks])
        batch = approx.TrainBatch(rng.normal(size=(B, D)), masks, actions, targets, rng.uniform(-1, 1, B))
        grad = approx.gradient(params, batch)
        coords = rng.choice(params.theta.size, size=min(50, params.theta.size), replace=False)
        fd = finite_difference_gradient(lambda th: approx.loss(approx.Parameters(params.layout, th), batch), params.theta, coords, 1e-5)
        worst = max(worst, relative_error(grad[coords], fd).max())
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-4 and elapsed < 30
    criterion.record(ok, f"max relative error {worst:.2e} over 20 pairs x 50 coordinates; {elapsed:.1f}s")
    assert ok


@pytest.mark.criterion(11)
@pytest.mark.slow
def test_hex_small_board_strength(criterion):
    t0 = time.perf_counter()
    spec = GameSpec.hex(3)
    cfg = TrainConfig(game=spec, hp=PRESETS["klent"], backend="mlp", capacity=4096, lr=1e-3, budget=2_000_000, seed=0)
    m, params = train_within(cfg)
    random = analysis.RandomAgent()
    greedy = analysis.play_match(analysis.SearchAgent(params, cfg.hp, 0), random, spec, 1000, seed=1)
    searched = analysis.play_match(analysis.SearchAgent(params, cfg.hp, 64), random, spec, 1000, seed=1)
    elapsed = time.perf_counter() - t0
    ok = greedy.win_rate >= 0.98 and searched.win_rate >= greedy.win_rate
    criterion.record(
        ok,
        f"greedy {greedy.win_rate:.3f} ({greedy.summary()}); 64 simulations {searched.win_rate:.3f}; "
        f"{m.sim_evals} evaluations; {elapsed:.0f}s",
    )
    assert ok


@pytest.mark.criterion(12)
def test_determinism(criterion, tmp_path):
    cfg = TrainConfig(game=GameSpec.hex(3), hp=PRESETS["klent"], backend="mlp", hidden=(32, 32), capacity=512, budget=5000, seed=3)
    train(cfg, tmp_path / "a.jsonl", tmp_path / "a")
    train(cfg, tmp_path / "b.jsonl", tmp_path / "b")
    same_metrics = (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    a = approx.load_checkpoint(tmp_path / "a" / "final.ckpt")
    approx.save_checkpoint(tmp_path / "copy.ckpt", a)
    b = approx.load_checkpoint(tmp_path / "copy.ckpt")
    same_ckpt = (tmp_path / "copy.ckpt").read_bytes() == (tmp_path / "a" / "final.ckpt").read_bytes()
    same_params = a.params.theta.tobytes() == b.params.theta.tobytes() and a.optimizer.v.tobytes() == b.optimizer.v.tobytes()
    ok = same_metrics and same_ckpt and same_params
    criterion.record(ok, f"metrics identical: {same_metrics}; checkpoint bytes identical after round trip: {same_ckpt and same_params}")
    assert ok
