"""Time the numba kernels against their pure-numpy counterparts.

    python3 benchmarks/bench_kernels.py [--number N]

Each kernel is first called once per path so that numba compilation (or a
cache load) is excluded from the timings.  A second section times whole
self-play collection with each path selected through KLENT_DISABLE_NUMBA,
which needs a fresh interpreter per setting.
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from klent import _kernels as K

SELFPLAY_SNIPPET = """
import time
from klent import approx
from klent.games import GameSpec
from klent.selfplay import PRESETS, play_episodes, stream
spec = GameSpec.parse({game!r})
params = approx.init_mlp(spec.feature_dim, spec.num_actions, (64, 64), seed=0)
play_episodes(spec, params, PRESETS["klent"], stream(0), 4)
t = time.perf_counter()
eps = play_episodes(spec, params, PRESETS["klent"], stream(1), {episodes})
dt = time.perf_counter() - t
print(sum(len(e) for e in eps) / dt)
"""


def workloads(rng):
    hex_boards = [rng.choice(np.array([0, 1, 2], np.int8), 49, p=[0.3, 0.35, 0.35]) for _ in range(64)]
    oth = []
    for _ in range(64):
        b = rng.choice(np.array([0, 1, 2], np.int8), 36, p=[0.4, 0.3, 0.3])
        oth.append(b)
    legal_cells = [(b, int(np.flatnonzero(K.othello_legal_np(b, 6, 1))[0])) for b in oth if K.othello_legal_np(b, 6, 1).any()]
    traj = [(rng.normal(size=60), rng.normal(size=60), rng.random(60) < 0.5) for _ in range(64)]
    return {
        "hex_connected (7x7)": (
            lambda f: [f(b, 7, 1) for b in hex_boards],
            K.hex_connected_nb,
            K.hex_connected_np,
            len(hex_boards),
        ),
        "othello_legal (6x6)": (
            lambda f: [f(b, 6, 1) for b in oth],
            K.othello_legal_nb,
            K.othello_legal_np,
            len(oth),
        ),
        "othello_place (6x6)": (
            lambda f: [f(b, 6, 1, c) for b, c in legal_cells],
            K.othello_place_nb,
            K.othello_place_np,
            len(legal_cells),
        ),
        "lambda_return (T=60)": (
            lambda f: [f(r, v, s, 0.88, 1.0) for r, v, s in traj],
            K.lambda_return_nb,
            K.lambda_return_np,
            len(traj),
        ),
    }


def selfplay_rate(game: str, episodes: int, disable: bool) -> float:
    env = dict(os.environ, KLENT_DISABLE_NUMBA="1" if disable else "0")
    code = SELFPLAY_SNIPPET.format(game=game, episodes=episodes)
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    return float(out.stdout.strip())


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--number", type=int, default=50, help="repetitions per timing")
    parser.add_argument("--episodes", type=int, default=200, help="episodes for the self-play section")
    args = parser.parse_args()

    print(f"numba active by default: {K.USE_NUMBA}")
    print(f"{'kernel':<24}{'numba us/call':>15}{'numpy us/call':>15}{'speed-up':>10}")
    for name, (run, nb, npf, calls) in workloads(np.random.default_rng(0)).items():
        run(nb)
        run(npf)
        t_nb = min(timeit.repeat(lambda: run(nb), number=args.number, repeat=3)) / (args.number * calls)
        t_np = min(timeit.repeat(lambda: run(npf), number=args.number, repeat=3)) / (args.number * calls)
        print(f"{name:<24}{t_nb * 1e6:>15.2f}{t_np * 1e6:>15.2f}{t_np / t_nb:>10.1f}")

    print()
    print(f"{'self-play collection':<24}{'numba plies/s':>15}{'numpy plies/s':>15}{'speed-up':>10}")
    for game in ("hex:5", "othello:6"):
        fast = selfplay_rate(game, args.episodes, disable=False)
        slow = selfplay_rate(game, args.episodes, disable=True)
        print(f"{game:<24}{fast:>15.0f}{slow:>15.0f}{fast / slow:>10.2f}")


if __name__ == "__main__":
    main()
