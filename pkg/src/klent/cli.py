"""Command-line entry point: ``klent <subcommand> ...``.

Run configuration lives in flat ``key = value`` files.  Command-line flags
override file values, and a preset expands to its (alpha, beta, lambda) row
before any explicit alpha/beta/lambda is applied.  ``train`` writes the
fully resolved configuration to ``config.txt`` in its output directory, and
``klent train --config <that file>`` repeats the run exactly.
"""

from __future__ import annotations

import argparse
import itertools
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from klent import analysis, approx, games
from klent.games import GameSpec
from klent.selfplay import PRESETS, Hyperparameters, TrainConfig, TrainingDiverged, greedy_evaluation, train

log = logging.getLogger("klent")

OUTPUT_ROOT_ENV = "KLENT_OUTPUT_ROOT"

# key -> parser; the order here is the order of the written config file
CONFIG_KEYS = {
    "game": str,
    "preset": str,
    "alpha": float,
    "beta": float,
    "lambda": float,
    "gamma": float,
    "backend": str,
    "hidden": str,
    "capacity": int,
    "batch_size": int,
    "epochs": int,
    "lr": float,
    "budget": int,
    "max_iterations": int,
    "eval_every": int,
    "eval_games": int,
    "seed": int,
    "max_plies": int,
}


class ConfigError(ValueError):
    pass


def read_config(path: Path) -> dict[str, str]:
    values = {}
    for n, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in CONFIG_KEYS:
            raise ConfigError(f"{path}:{n}: unknown key {key!r}")
        values[key] = value
    return values


def _parse_hidden(text: str) -> tuple[int, ...]:
    sizes = tuple(int(s) for s in text.replace(" ", "").split(",") if s)
    if not sizes or min(sizes) <= 0:
        raise ConfigError(f"hidden must list positive layer widths, got {text!r}")
    return sizes


def resolve(file_values: dict[str, str], flag_values: dict[str, str]) -> dict:
    """Merge file and flags (flags win), expand the preset, apply explicit weights."""
    if "preset" in flag_values:
        # a new preset on the command line discards weights resolved in the file
        file_values = {k: v for k, v in file_values.items() if k not in ("alpha", "beta", "lambda")}
    merged = {**file_values, **flag_values}
    out: dict = {}
    for key, parse in CONFIG_KEYS.items():
        if key in merged:
            try:
                out[key] = parse(merged[key])
            except ValueError:
                raise ConfigError(f"bad value for {key}: {merged[key]!r}") from None
    preset = out.setdefault("preset", "klent")
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {', '.join(PRESETS)}")
    base = PRESETS[preset]
    out.setdefault("alpha", base.alpha)
    out.setdefault("beta", base.beta)
    out.setdefault("lambda", base.lam)
    defaults = TrainConfig()
    out.setdefault("game", str(defaults.game))
    out.setdefault("gamma", base.gamma)
    out.setdefault("backend", defaults.backend)
    out.setdefault("hidden", ",".join(map(str, defaults.hidden)))
    for key in ("capacity", "batch_size", "epochs", "lr", "budget", "max_iterations", "eval_every", "eval_games", "seed", "max_plies"):
        out.setdefault(key, getattr(defaults, key))
    return out


def build_train_config(resolved: dict) -> TrainConfig:
    try:
        hp = Hyperparameters(resolved["alpha"], resolved["beta"], resolved["lambda"], resolved["gamma"])
        return TrainConfig(
            game=GameSpec.parse(resolved["game"]),
            hp=hp,
            backend=resolved["backend"],
            hidden=_parse_hidden(str(resolved["hidden"])),
            capacity=resolved["capacity"],
            batch_size=resolved["batch_size"],
            epochs=resolved["epochs"],
            lr=resolved["lr"],
            budget=resolved["budget"],
            max_iterations=resolved["max_iterations"],
            eval_every=resolved["eval_every"],
            eval_games=resolved["eval_games"],
            seed=resolved["seed"],
            max_plies=resolved["max_plies"],
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def format_config(resolved: dict) -> str:
    lines = ["# resolved klent run configuration"]
    for key in CONFIG_KEYS:
        value = resolved[key]
        lines.append(f"{key} = {value!r}" if isinstance(value, float) else f"{key} = {value}")
    return "\n".join(lines) + "\n"


def config_from_checkpoint(ckpt: approx.Checkpoint) -> TrainConfig:
    cfg = ckpt.extra.get("config")
    if cfg is None:
        raise ConfigError("checkpoint carries no run configuration")
    hp = cfg["hp"]
    return TrainConfig(
        game=GameSpec.parse(cfg["game"]),
        hp=Hyperparameters(hp["alpha"], hp["beta"], hp["lam"], hp["gamma"]),
        backend=cfg["backend"],
        hidden=tuple(cfg["hidden"]),
        seed=cfg["seed"],
    )


def load_model(path: str) -> tuple[approx.Checkpoint, TrainConfig]:
    ckpt = approx.load_checkpoint(path)
    cfg = config_from_checkpoint(ckpt)
    expected = cfg.game.feature_dim
    got = ckpt.params.feature_dim
    if got != expected:
        raise approx.CheckpointError(f"{path}: parameters expect {got} features but {cfg.game} encodes {expected}")
    return ckpt, cfg


def default_output(name: str) -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs")) / name


def _float_list(text: str) -> list[float]:
    return [float(s) for s in text.split(",") if s.strip()]


def _int_list(text: str) -> list[int]:
    return [int(s) for s in text.split(",") if s.strip()]


# ---------------------------------------------------------------------------
# subcommands


def _flag_values(args) -> dict[str, str]:
    out = {}
    for key in CONFIG_KEYS:
        value = getattr(args, key.replace("lambda", "lam"), None)
        if value is not None:
            out[key] = str(value)
    return out


def cmd_train(args) -> int:
    file_values = read_config(args.config) if args.config else {}
    resolved = resolve(file_values, _flag_values(args))
    cfg = build_train_config(resolved)
    cfg.log_wallclock = args.wallclock
    name = f"{str(cfg.game).replace(':', '-')}-{resolved['preset']}-s{cfg.seed}"
    out = Path(args.out) if args.out else default_output(name)
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(format_config(resolved))

    def progress(m):
        log.info("iter %d  sims %d  loss %.4f  entropy %.3f", m.iteration, m.sim_evals, m.loss, m.entropy)

    try:
        result = train(cfg, out / "metrics.jsonl", ckpt_dir, progress)
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    last = next((m.win_rate for m in reversed(result.metrics) if m.win_rate is not None), None)
    if last is None:
        last = greedy_evaluation(result.params, cfg.game, cfg.eval_games, cfg.seed)
    print(f"simulator evaluations: {result.sim_evals} / {cfg.budget}")
    print(f"iterations: {len(result.metrics)}")
    print(f"greedy win-rate vs random: {last:.4f}")
    print(f"output: {out}")
    return 0


def _make_agent(ckpt: approx.Checkpoint, cfg: TrainConfig, simulations: int) -> analysis.Agent:
    return analysis.SearchAgent(ckpt.params, cfg.hp, simulations)


def cmd_eval(args) -> int:
    ckpt, cfg = load_model(args.checkpoint)
    spec = cfg.game
    agent = _make_agent(ckpt, cfg, args.simulations)
    if args.opponent == "random":
        opponent: analysis.Agent = analysis.RandomAgent()
    elif args.opponent == "optimal-countup":
        opponent = analysis.CountUpOptimalAgent(spec)
    else:
        other, other_cfg = load_model(args.opponent)
        if other_cfg.game != spec:
            raise approx.CheckpointError(f"opponent plays {other_cfg.game}, model plays {spec}")
        opponent = _make_agent(other, other_cfg, args.opponent_simulations)
    res = analysis.play_match(agent, opponent, spec, args.games, args.seed)
    print(f"game: {spec}  games: {res.games}  simulations: {args.simulations}")
    print(f"wins {res.wins}  draws {res.draws}  losses {res.losses}")
    print(f"win-rate {res.win_rate:.4f} (draws count 0.5)")
    print(f"elo {analysis.elo_from_winrate(res.win_rate, args.anchor):.2f} (opponent anchored at {args.anchor:g})")
    return 0


def cmd_play(args, stdin=None, stdout=None) -> int:
    stdin = stdin or sys.stdin
    stdout = stdout or sys.stdout

    def say(text=""):
        print(text, file=stdout, flush=True)

    ckpt, cfg = load_model(args.checkpoint)
    spec = cfg.game
    agent = _make_agent(ckpt, cfg, args.simulations)
    human = 0 if args.human_first else 1
    rng = np.random.default_rng(args.seed)
    state = games.reset(spec)
    while not state.terminal:
        say(games.render(state))
        if state.to_move == human:
            legal = [games.action_name(spec, a) for a in np.flatnonzero(state.legal)]
            stdout.write(f"your move ({', '.join(legal)}): ")
            stdout.flush()
            line = stdin.readline()
            if not line:
                say("\nbye")
                return 0
            try:
                action = games.parse_action(spec, line)
            except ValueError as exc:
                say(f"could not read that move: {exc}")
                continue
            if not state.legal[action]:
                say(f"illegal move; legal moves: {', '.join(legal)}")
                continue
        else:
            action = agent.act(state, rng)
            say(f"agent plays {games.action_name(spec, action)}")
        state, _ = games.step(state, action)
    say(games.render(state))
    score = games.outcome_for(state, human)
    say("you win" if score > 0 else "you lose" if score < 0 else "draw")
    return 0


def cmd_solve_countup(args) -> int:
    sol = analysis.solve_countup_optimal(args.target, args.increment)
    print(sol.table())
    if args.alpha is not None:
        qre = analysis.solve_countup_qre(args.target, args.increment, args.alpha)
        print()
        print(f"quantal response equilibrium, alpha = {args.alpha:g}")
        header = "state | " + "  ".join(f"pi(+{a + 1})" for a in range(args.increment))
        header += " | " + "  ".join(f"Q(+{a + 1})" for a in range(args.increment))
        print(header)
        for s in range(args.target - 1, -1, -1):
            probs = "  ".join(f"{p:7.4f}" for p in qre.policy[s])
            qs = "  ".join(f"{q:+7.4f}" for q in qre.q[s])
            print(f"{s:5d} | {probs} | {qs}")
    return 0


def cmd_bias_variance(args) -> int:
    ckpt, cfg = load_model(args.checkpoint)
    report = analysis.bias_variance(
        cfg.game,
        ckpt.params,
        cfg.hp,
        _float_list(args.lambdas),
        rollouts_per_point=args.rollouts,
        oracle_rollouts=args.oracle_rollouts,
        seed=args.seed,
    )
    text = report.to_csv()
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
        print(f"wrote {args.out} ({len(report.rows)} rows, {len(report.pairs)} state-action pairs)")
    else:
        sys.stdout.write(text)
    return 0


def cmd_sweep(args) -> int:
    base = read_config(args.config) if args.config else {}
    flags = _flag_values(args)
    alphas, betas, lams = _float_list(args.alphas), _float_list(args.betas), _float_list(args.lambdas)
    seeds = _int_list(args.seeds)
    if not (alphas and betas and lams and seeds):
        raise ConfigError("sweep grid and seed list must be non-empty")
    root = Path(args.out) if args.out else default_output("sweep")
    root.mkdir(parents=True, exist_ok=True)
    rows = ["alpha,beta,lambda,seeds,mean_win_rate,std_win_rate,status"]
    print(f"{'alpha':>8} {'beta':>8} {'lambda':>8} {'n':>3} {'mean':>8} {'std':>8}  status")
    for alpha, beta, lam in itertools.product(alphas, betas, lams):
        rates, status = [], "ok"
        for seed in seeds:
            cell = {**flags, "alpha": repr(alpha), "beta": repr(beta), "lambda": repr(lam), "seed": str(seed)}
            try:
                resolved = resolve(dict(base), cell)
                cfg = build_train_config(resolved)
                run_dir = root / f"a{alpha:g}-b{beta:g}-l{lam:.4g}-s{seed}"
                run_dir.mkdir(parents=True, exist_ok=True)
                (run_dir / "config.txt").write_text(format_config(resolved))
                result = train(cfg, run_dir / "metrics.jsonl", run_dir)
                rates.append(greedy_evaluation(result.params, cfg.game, cfg.eval_games, seed))
            except (ValueError, FloatingPointError, AssertionError) as exc:
                status = f"failed: {exc}".replace(",", ";")
                break
        mean = float(np.mean(rates)) if rates and status == "ok" else math.nan
        std = float(np.std(rates)) if rates and status == "ok" else math.nan
        rows.append(f"{alpha!r},{beta!r},{lam!r},{len(rates)},{mean!r},{std!r},{status}")
        print(f"{alpha:8.4g} {beta:8.4g} {lam:8.4g} {len(rates):3d} {mean:8.4f} {std:8.4f}  {status}")
    (root / "sweep.csv").write_text("\n".join(rows) + "\n")
    print(f"wrote {root / 'sweep.csv'}")
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_run_flags(p: argparse.ArgumentParser, weights: bool = True) -> None:
    p.add_argument("--config", help="flat key = value file")
    p.add_argument("--game", help="countup:N:k, hex:S or othello:S")
    p.add_argument("--preset", choices=sorted(PRESETS))
    if weights:
        p.add_argument("--alpha", type=float)
        p.add_argument("--beta", type=float)
        p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--backend", choices=["mlp", "tabular"])
    p.add_argument("--hidden", help="comma-separated layer widths")
    p.add_argument("--capacity", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--budget", type=int, help="simulator evaluations")
    p.add_argument("--max-iterations", dest="max_iterations", type=int)
    p.add_argument("--eval-every", dest="eval_every", type=int)
    p.add_argument("--eval-games", dest="eval_games", type=int)
    p.add_argument("--max-plies", dest="max_plies", type=int)
    p.add_argument("--out", help=f"output directory (default under ${OUTPUT_ROOT_ENV} or ./runs)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="klent", description="KL and entropy regularized self-play on small board games")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run self-play training")
    _add_run_flags(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--wallclock", action="store_true", help="include per-iteration seconds in the metrics file")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="play a match against an opponent")
    p.add_argument("checkpoint")
    p.add_argument("--opponent", default="random", help="random, optimal-countup, or a checkpoint path")
    p.add_argument("--games", type=int, default=100)
    p.add_argument("--simulations", type=int, default=0)
    p.add_argument("--opponent-simulations", type=int, default=0)
    p.add_argument("--anchor", type=float, default=1000.0, help="opponent rating")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("play", help="play against a checkpoint in the terminal")
    p.add_argument("checkpoint")
    p.add_argument("--simulations", type=int, default=0)
    p.add_argument("--human-second", dest="human_first", action="store_false")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_play)

    p = sub.add_parser("solve-countup", help="exact count-up solutions")
    p.add_argument("target", type=int)
    p.add_argument("increment", type=int)
    p.add_argument("--alpha", type=float, help="also print the equilibrium at this temperature")
    p.set_defaults(func=cmd_solve_countup)

    p = sub.add_parser("bias-variance", help="lambda-return error decomposition for a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--lambdas", default=f"0,0.5,{math.exp(-1 / 8)!r},1")
    p.add_argument("--rollouts", type=int, default=200)
    p.add_argument("--oracle-rollouts", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="CSV path (default: stdout)")
    p.set_defaults(func=cmd_bias_variance)

    p = sub.add_parser("sweep", help="train and evaluate over an alpha x beta x lambda grid")
    _add_run_flags(p, weights=False)
    p.add_argument("--alphas", required=True)
    p.add_argument("--betas", required=True)
    p.add_argument("--lambdas", required=True)
    p.add_argument("--seeds", default="0")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, approx.CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, AssertionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
