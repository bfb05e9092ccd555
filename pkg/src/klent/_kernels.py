"""Hot inner loops, with numba and pure-numpy implementations.

Set ``KLENT_DISABLE_NUMBA=1`` to route every public kernel through the numpy
path.  Both paths are importable under explicit ``*_nb`` / ``*_np`` names so
they can be cross-checked and benchmarked against each other.
"""

from __future__ import annotations

import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

USE_NUMBA = numba is not None and os.environ.get("KLENT_DISABLE_NUMBA", "0") not in ("1", "true", "yes")

# (dr, dc) neighbour offsets on a rhombic hex board
HEX_DIRS = np.array([(-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0)], dtype=np.int64)
# eight compass directions for othello flips
OTHELLO_DIRS = np.array(
    [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)], dtype=np.int64
)


def _njit(fn):
    if numba is None:
        return fn
    return numba.njit(cache=True, nogil=True)(fn)


# ---------------------------------------------------------------------------
# hex


def _hex_connected_loop(board, side, stone):
    # stone 1 connects row 0 to row side-1; stone 2 connects col 0 to col side-1
    n_cells = side * side
    seen = np.zeros(n_cells, dtype=np.bool_)
    stack = np.empty(n_cells, dtype=np.int64)
    top = 0
    for i in range(side):
        cell = i if stone == 1 else i * side
        if board[cell] == stone:
            seen[cell] = True
            stack[top] = cell
            top += 1
    while top > 0:
        top -= 1
        cell = stack[top]
        r = cell // side
        c = cell % side
        if (stone == 1 and r == side - 1) or (stone == 2 and c == side - 1):
            return True
        for k in range(6):
            rr = r + HEX_DIRS[k, 0]
            cc = c + HEX_DIRS[k, 1]
            if 0 <= rr < side and 0 <= cc < side:
                nxt = rr * side + cc
                if not seen[nxt] and board[nxt] == stone:
                    seen[nxt] = True
                    stack[top] = nxt
                    top += 1
    return False


hex_connected_nb = _njit(_hex_connected_loop)


def hex_connected_np(board, side, stone):
    """Vectorised flood fill by repeated dilation over the hex neighbourhood."""
    own = board.reshape(side, side) == stone
    reach = np.zeros_like(own)
    if stone == 1:
        reach[0, :] = own[0, :]
    else:
        reach[:, 0] = own[:, 0]
    while True:
        grown = reach.copy()
        grown[1:, :] |= reach[:-1, :]
        grown[:-1, :] |= reach[1:, :]
        grown[:, 1:] |= reach[:, :-1]
        grown[:, :-1] |= reach[:, 1:]
        grown[1:, :-1] |= reach[:-1, 1:]
        grown[:-1, 1:] |= reach[1:, :-1]
        grown &= own
        if (grown == reach).all():
            break
        reach = grown
    if stone == 1:
        return bool(reach[-1, :].any())
    return bool(reach[:, -1].any())


# ---------------------------------------------------------------------------
# othello


def _othello_legal_loop(board, side, stone):
    other = 3 - stone
    legal = np.zeros(side * side, dtype=np.bool_)
    for cell in range(side * side):
        if board[cell] != 0:
            continue
        r = cell // side
        c = cell % side
        for k in range(8):
            dr = OTHELLO_DIRS[k, 0]
            dc = OTHELLO_DIRS[k, 1]
            rr = r + dr
            cc = c + dc
            run = 0
            while 0 <= rr < side and 0 <= cc < side and board[rr * side + cc] == other:
                rr += dr
                cc += dc
                run += 1
            if run > 0 and 0 <= rr < side and 0 <= cc < side and board[rr * side + cc] == stone:
                legal[cell] = True
                break
    return legal


def _othello_place_loop(board, side, stone, cell):
    other = 3 - stone
    out = board.copy()
    out[cell] = stone
    r = cell // side
    c = cell % side
    for k in range(8):
        dr = OTHELLO_DIRS[k, 0]
        dc = OTHELLO_DIRS[k, 1]
        rr = r + dr
        cc = c + dc
        run = 0
        while 0 <= rr < side and 0 <= cc < side and board[rr * side + cc] == other:
            rr += dr
            cc += dc
            run += 1
        if run > 0 and 0 <= rr < side and 0 <= cc < side and board[rr * side + cc] == stone:
            for j in range(1, run + 1):
                out[(r + j * dr) * side + (c + j * dc)] = stone
    return out


othello_legal_nb = _njit(_othello_legal_loop)
othello_place_nb = _njit(_othello_place_loop)


def _shift(a, dr, dc):
    # out[r, c] = a[r + dr, c + dc], False off-board
    side = a.shape[0]
    out = np.zeros_like(a)
    r0, r1 = max(0, -dr), min(side, side - dr)
    c0, c1 = max(0, -dc), min(side, side - dc)
    out[r0:r1, c0:c1] = a[r0 + dr : r1 + dr, c0 + dc : c1 + dc]
    return out


def _othello_rays_np(board, side, stone):
    """Per direction, the boolean grid of cells from which a flanking ray starts."""
    grid = board.reshape(side, side)
    own = grid == stone
    opp = grid == 3 - stone
    rays = []
    for dr, dc in OTHELLO_DIRS:
        # run[r, c]: cells (r,c)+d .. are opponent stones terminated by own stone
        hit = np.zeros_like(own)
        chain = _shift(opp, dr, dc)
        for j in range(2, side):
            hit |= chain & _shift(own, j * dr, j * dc)
            chain = chain & _shift(opp, j * dr, j * dc)
        rays.append(hit)
    return rays


def othello_legal_np(board, side, stone):
    empty = board.reshape(side, side) == 0
    legal = np.zeros((side, side), dtype=bool)
    for hit in _othello_rays_np(board, side, stone):
        legal |= hit
    return (legal & empty).reshape(-1)


def othello_place_np(board, side, stone, cell):
    grid = board.reshape(side, side)
    out = grid.copy()
    r, c = divmod(int(cell), side)
    out[r, c] = stone
    for dr, dc in OTHELLO_DIRS:
        rr, cc = r + dr, c + dc
        flips = []
        while 0 <= rr < side and 0 <= cc < side and grid[rr, cc] == 3 - stone:
            flips.append((rr, cc))
            rr += dr
            cc += dc
        if flips and 0 <= rr < side and 0 <= cc < side and grid[rr, cc] == stone:
            for fr, fc in flips:
                out[fr, fc] = stone
    return out.reshape(-1)


# ---------------------------------------------------------------------------
# lambda-return backward recursion


def _lambda_return_loop(rewards, vhat_next, same_mover, lam, gamma):
    # G_t = R_t + gamma * s_t * ((1 - lam) * vhat_{t+1} + lam * G_{t+1}); G_{T-1} = R_{T-1}
    T = rewards.shape[0]
    out = np.empty(T, dtype=np.float64)
    out[T - 1] = rewards[T - 1]
    for t in range(T - 2, -1, -1):
        sign = 1.0 if same_mover[t] else -1.0
        out[t] = rewards[t] + gamma * sign * ((1.0 - lam) * vhat_next[t] + lam * out[t + 1])
    return out


lambda_return_nb = _njit(_lambda_return_loop)


def lambda_return_np(rewards, vhat_next, same_mover, lam, gamma):
    """Same recursion as the compiled kernel with the bootstrap terms precomputed
    as one vector op; only the lam-weighted carry stays sequential."""
    T = rewards.shape[0]
    sign = np.where(same_mover, 1.0, -1.0)
    base = rewards.astype(np.float64).copy()
    base[:-1] += gamma * sign[:-1] * (1.0 - lam) * vhat_next[:-1]
    if lam == 0.0:
        return base
    coef = gamma * sign[:-1] * lam
    out = np.empty(T, dtype=np.float64)
    out[T - 1] = base[T - 1]
    acc = base[T - 1]
    for t in range(T - 2, -1, -1):
        acc = base[t] + coef[t] * acc
        out[t] = acc
    return out


if USE_NUMBA:
    hex_connected = hex_connected_nb
    othello_legal = othello_legal_nb
    othello_place = othello_place_nb
    lambda_return = lambda_return_nb
else:
    hex_connected = hex_connected_np
    othello_legal = othello_legal_np
    othello_place = othello_place_np
    lambda_return = lambda_return_np
