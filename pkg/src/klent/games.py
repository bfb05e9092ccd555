"""Two-player zero-sum perfect-information games.

Every game exposes the same pure interface: ``reset``, ``step``,
``legal_actions``, ``encode``, ``state_key`` and ``render``.  States are
immutable; ``step`` returns a fresh state and the reward for the player who
just moved.  Players alternate strictly on every ply (an Othello player with
no placement plays the explicit pass action).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Union

import numpy as np

from klent import _kernels

GAME_KINDS = ("countup", "hex", "othello")

EMPTY, BLACK, WHITE = 0, 1, 2  # board cell codes; player p owns stone p + 1


class IllegalActionError(ValueError):
    def __init__(self, state: "GameState", action: int, reason: str = "illegal action"):
        self.state = state
        self.action = action
        super().__init__(f"{reason}: action {action} in state {state.spec} key={state_key(state).hex()}")


@dataclass(frozen=True)
class GameSpec:
    """Game kind plus sizes.

    ``size`` is the count-up target N or the board side length;
    ``increment`` is the count-up maximum increment k (ignored otherwise).
    """

    kind: str
    size: int
    increment: int = 0

    def __post_init__(self):
        if self.kind not in GAME_KINDS:
            raise ValueError(f"unknown game kind {self.kind!r}")
        if self.kind == "countup":
            if self.size < 1 or self.increment < 1:
                raise ValueError(f"count-up needs N >= 1 and k >= 1, got N={self.size}, k={self.increment}")
        elif self.kind == "hex":
            if self.size < 2:
                raise ValueError(f"hex side must be >= 2, got {self.size}")
        elif self.size < 4 or self.size % 2:
            raise ValueError(f"othello side must be even and >= 4, got {self.size}")

    @classmethod
    def countup(cls, target: int = 7, increment: int = 2) -> "GameSpec":
        return cls("countup", target, increment)

    @classmethod
    def hex(cls, side: int = 3) -> "GameSpec":
        return cls("hex", side)

    @classmethod
    def othello(cls, side: int = 4) -> "GameSpec":
        return cls("othello", side)

    @classmethod
    def parse(cls, text: str) -> "GameSpec":
        """Parse ``countup:7:2``, ``hex:3`` or ``othello:4``."""
        parts = text.strip().lower().split(":")
        kind = parts[0]
        try:
            nums = [int(p) for p in parts[1:]]
        except ValueError:
            raise ValueError(f"bad game description {text!r}") from None
        if kind == "countup":
            target, increment = (nums + [7, 2][len(nums):])[:2]
            return cls.countup(target, increment)
        if kind in ("hex", "othello"):
            default = 3 if kind == "hex" else 4
            return cls(kind, nums[0] if nums else default)
        raise ValueError(f"unknown game kind {kind!r}")

    def __str__(self) -> str:
        if self.kind == "countup":
            return f"countup:{self.size}:{self.increment}"
        return f"{self.kind}:{self.size}"

    @property
    def num_actions(self) -> int:
        if self.kind == "countup":
            return self.increment
        if self.kind == "hex":
            return self.size * self.size
        return self.size * self.size + 1

    @property
    def feature_dim(self) -> int:
        if self.kind == "countup":
            return self.size + 1
        return 3 * self.size * self.size

    @property
    def max_plies(self) -> int:
        """Upper bound on episode length."""
        if self.kind == "countup":
            return self.size
        if self.kind == "hex":
            return self.size * self.size
        # each pass is followed by a placement, and placements fill the board
        return 2 * (self.size * self.size - 4)

    @property
    def pass_action(self) -> int:
        if self.kind != "othello":
            raise ValueError("only othello has a pass action")
        return self.size * self.size


@dataclass(frozen=True)
class LegalMask:
    bits: np.ndarray
    indices: np.ndarray

    @classmethod
    def from_bits(cls, bits: np.ndarray) -> "LegalMask":
        bits = np.asarray(bits, dtype=bool)
        return cls(bits, np.flatnonzero(bits))

    @classmethod
    def from_indices(cls, indices, num_actions: int) -> "LegalMask":
        bits = np.zeros(num_actions, dtype=bool)
        bits[np.asarray(indices, dtype=np.int64)] = True
        return cls(bits, np.flatnonzero(bits))

    def __len__(self) -> int:
        return len(self.indices)

    def __contains__(self, action) -> bool:
        return 0 <= int(action) < len(self.bits) and bool(self.bits[int(action)])


Position = Union[int, np.ndarray]


@dataclass(frozen=True, eq=False)
class GameState:
    spec: GameSpec
    position: Position  # count-up counter, or flat int8 board
    to_move: int
    terminal: bool = False
    outcome: float | None = None  # for the player who just moved
    ply: int = 0
    legal: np.ndarray = field(default=None, repr=False)

    def __eq__(self, other) -> bool:
        return isinstance(other, GameState) and state_key(self) == state_key(other)

    def __hash__(self) -> int:
        return hash(state_key(self))


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


def _countup_state(spec: GameSpec, position: int, to_move: int, ply: int) -> GameState:
    legal = _frozen(np.ones(spec.increment, dtype=bool))
    return GameState(spec, position, to_move, False, None, ply, legal)


def reset(spec: GameSpec) -> GameState:
    if spec.kind == "countup":
        return _countup_state(spec, 0, 0, 0)
    side = spec.size
    board = np.zeros(side * side, dtype=np.int8)
    if spec.kind == "hex":
        return GameState(spec, _frozen(board), 0, False, None, 0, _frozen(np.ones(side * side, dtype=bool)))
    lo, hi = side // 2 - 1, side // 2
    board[lo * side + lo] = WHITE
    board[hi * side + hi] = WHITE
    board[lo * side + hi] = BLACK
    board[hi * side + lo] = BLACK
    legal = np.zeros(spec.num_actions, dtype=bool)
    legal[:-1] = _kernels.othello_legal(board, side, BLACK)
    return GameState(spec, _frozen(board), 0, False, None, 0, _frozen(legal))


def legal_actions(state: GameState) -> LegalMask:
    if state.terminal:
        raise ValueError("legal_actions called on a terminal state")
    return LegalMask.from_bits(state.legal)


def step(state: GameState, action: int) -> tuple[GameState, float]:
    """Apply ``action``; the reward is for the mover and nonzero only at termination."""
    if state.terminal:
        raise IllegalActionError(state, action, "game is over")
    action = int(action)
    if not (0 <= action < state.spec.num_actions) or not state.legal[action]:
        raise IllegalActionError(state, action)
    spec = state.spec
    mover = state.to_move
    nxt = 1 - mover
    ply = state.ply + 1
    if spec.kind == "countup":
        position = state.position + action + 1
        if position >= spec.size:
            return GameState(spec, position, nxt, True, 1.0, ply, _frozen(np.zeros(spec.increment, dtype=bool))), 1.0
        return _countup_state(spec, position, nxt, ply), 0.0

    side = spec.size
    if spec.kind == "hex":
        board = state.position.copy()
        board[action] = mover + 1
        if _kernels.hex_connected(board, side, mover + 1):
            return GameState(spec, _frozen(board), nxt, True, 1.0, ply, _frozen(np.zeros(side * side, dtype=bool))), 1.0
        return GameState(spec, _frozen(board), nxt, False, None, ply, _frozen(board == EMPTY)), 0.0

    if action == spec.pass_action:
        board = state.position
    else:
        board = _kernels.othello_place(state.position, side, mover + 1, action)
    legal = np.zeros(spec.num_actions, dtype=bool)
    legal[:-1] = _kernels.othello_legal(board, side, nxt + 1)
    if legal.any():
        return GameState(spec, _frozen(board), nxt, False, None, ply, _frozen(legal)), 0.0
    if _kernels.othello_legal(board, side, mover + 1).any():
        legal[-1] = True
        return GameState(spec, _frozen(board), nxt, False, None, ply, _frozen(legal)), 0.0
    mine = int(np.count_nonzero(board == mover + 1))
    theirs = int(np.count_nonzero(board == nxt + 1))
    reward = float(np.sign(mine - theirs))
    return GameState(spec, _frozen(board), nxt, True, reward, ply, _frozen(legal)), reward


def encode(state: GameState) -> np.ndarray:
    """Count-up: one-hot position then to-move bit.  Boards: black plane, white
    plane, plane set to 1 when player 0 is to move."""
    spec = state.spec
    x = np.zeros(spec.feature_dim, dtype=np.float64)
    first_to_move = 1.0 if state.to_move == 0 else 0.0
    if spec.kind == "countup":
        if state.position < spec.size:
            x[state.position] = 1.0
        x[-1] = first_to_move
        return x
    n = spec.size * spec.size
    board = state.position
    x[:n] = board == BLACK
    x[n : 2 * n] = board == WHITE
    x[2 * n :] = first_to_move
    return x


def state_key(state: GameState) -> bytes:
    head = bytes((GAME_KINDS.index(state.spec.kind), state.to_move))
    if state.spec.kind == "countup":
        return head + int(state.position).to_bytes(8, "little")
    return head + state.position.tobytes()


def render(state: GameState) -> str:
    spec = state.spec
    if spec.kind == "countup":
        lines = [f"count = {state.position} (target {spec.size}, add 1..{spec.increment})"]
    else:
        side = spec.size
        glyph = {EMPTY: ".", BLACK: "X", WHITE: "O"}
        board = state.position.reshape(side, side)
        header = "   " + " ".join(chr(ord("a") + c) for c in range(side))
        lines = [header]
        for r in range(side):
            indent = " " * r if spec.kind == "hex" else ""
            lines.append(f"{indent}{r + 1:2d} " + " ".join(glyph[int(v)] for v in board[r]))
        if spec.kind == "hex":
            lines.append("X joins top-bottom, O joins left-right")
    if state.terminal:
        lines.append(f"game over after {state.ply} plies")
    else:
        lines.append(f"player {state.to_move} ({'X' if state.to_move == 0 else 'O'}) to move")
    return "\n".join(lines)


def action_name(spec: GameSpec, action: int) -> str:
    if spec.kind == "countup":
        return f"+{action + 1}"
    if spec.kind == "othello" and action == spec.pass_action:
        return "pass"
    r, c = divmod(action, spec.size)
    return f"{chr(ord('a') + c)}{r + 1}"


def parse_action(spec: GameSpec, text: str) -> int:
    """Inverse of :func:`action_name`; raises ValueError on malformed input."""
    text = text.strip().lower()
    if spec.kind == "countup":
        value = int(text.lstrip("+"))
        if not 1 <= value <= spec.increment:
            raise ValueError(f"increment must be 1..{spec.increment}")
        return value - 1
    if spec.kind == "othello" and text == "pass":
        return spec.pass_action
    if len(text) < 2 or not text[0].isalpha():
        raise ValueError(f"expected a cell like a1, got {text!r}")
    c = ord(text[0]) - ord("a")
    r = int(text[1:]) - 1
    if not (0 <= r < spec.size and 0 <= c < spec.size):
        raise ValueError(f"cell {text!r} is off the board")
    return r * spec.size + c


def outcome_for(state: GameState, player: int) -> float:
    """Terminal outcome from ``player``'s point of view."""
    if not state.terminal:
        raise ValueError("game not finished")
    last_mover = 1 - state.to_move
    return state.outcome if player == last_mover else -state.outcome
