import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from klent import _kernels, games
from klent.games import GameSpec, IllegalActionError, encode, legal_actions, reset, state_key, step


def _play(spec, actions):
    s = reset(spec)
    for a in actions:
        s, r = step(s, a)
    return s, r


def _random_playout(spec, seed):
    rng = np.random.default_rng(seed)
    s = reset(spec)
    actions, rewards = [], []
    while not s.terminal:
        a = int(rng.choice(legal_actions(s).indices))
        actions.append(a)
        s, r = step(s, a)
        rewards.append(r)
    return s, actions, rewards


def _othello_legal_reference(board, side, stone):
    """Straightforward per-cell ray walk, written independently of the kernels."""
    grid = board.reshape(side, side)
    legal = []
    for r in range(side):
        for c in range(side):
            if grid[r, c]:
                continue
            ok = False
            for dr in (-1, 0, 1):
                for dc in (-1, 0, 1):
                    if dr == dc == 0:
                        continue
                    rr, cc, seen = r + dr, c + dc, 0
                    while 0 <= rr < side and 0 <= cc < side and grid[rr, cc] == 3 - stone:
                        rr, cc, seen = rr + dr, cc + dc, seen + 1
                    if seen and 0 <= rr < side and 0 <= cc < side and grid[rr, cc] == stone:
                        ok = True
            if ok:
                legal.append(r * side + c)
    return legal


class TestReset:
    def test_countup(self):
        s = reset(GameSpec.countup(7, 2))
        assert s.position == 0 and s.to_move == 0 and not s.terminal
        assert legal_actions(s).indices.tolist() == [0, 1]  # +1, +2

    def test_hex_empty(self):
        s = reset(GameSpec.hex(3))
        assert np.count_nonzero(s.position) == 0
        assert len(legal_actions(s)) == 9

    def test_othello_center(self):
        s = reset(GameSpec.othello(4))
        assert np.count_nonzero(s.position) == 4
        mask = legal_actions(s)
        assert len(mask) == 4
        assert mask.indices.tolist() == _othello_legal_reference(np.asarray(s.position), 4, 1)

    @pytest.mark.parametrize("kind,size,inc", [("hex", 1, 0), ("othello", 5, 0), ("othello", 2, 0), ("countup", 0, 2), ("countup", 3, 0)])
    def test_invalid_specs(self, kind, size, inc):
        with pytest.raises(ValueError):
            GameSpec(kind, size, inc)

    def test_action_space_sizes(self):
        assert GameSpec.countup(7, 3).num_actions == 3
        assert GameSpec.hex(4).num_actions == 16
        assert GameSpec.othello(6).num_actions == 37


class TestStep:
    def test_countup_win_from_five(self):
        spec = GameSpec.countup(7, 2)
        s, _ = _play(spec, [1, 1])  # 0 -> 2 -> 4
        s, _ = _play(spec, [1, 1, 0])  # 5
        assert s.position == 5
        nxt, r = step(s, 1)
        assert nxt.terminal and r == 1.0 and nxt.outcome == 1.0

    def test_countup_nonterminal(self):
        s, r = step(reset(GameSpec.countup(7, 2)), 0)
        assert s.position == 1 and r == 0.0 and s.to_move == 1 and not s.terminal

    def test_countup_legal_at_six(self):
        s, _ = _play(GameSpec.countup(7, 2), [1, 1, 1])
        assert s.position == 6
        assert legal_actions(s).indices.tolist() == [0, 1]

    def test_hex_top_bottom_chain(self):
        spec = GameSpec.hex(3)
        s = reset(spec)
        # X: a1, a2, a3 (column 0, rows 0..2); O: c1, c2
        for i, a in enumerate([0, 2, 3, 5, 6]):
            s, r = step(s, a)
            assert s.terminal == (i == 4)
        assert r == 1.0

    def test_illegal_rejected(self):
        s, _ = step(reset(GameSpec.hex(3)), 4)
        with pytest.raises(IllegalActionError) as info:
            step(s, 4)
        assert info.value.action == 4 and info.value.state is s

    def test_step_on_terminal_rejected(self):
        s, _ = _play(GameSpec.countup(2, 2), [1])
        assert s.terminal
        with pytest.raises(IllegalActionError):
            step(s, 0)
        with pytest.raises(ValueError):
            legal_actions(s)

    def test_othello_legal_kernel_flanking(self):
        board = np.array([1, 1, 1, 0,
                          1, 1, 2, 0,
                          1, 1, 1, 0,
                          0, 0, 0, 0], dtype=np.int8)
        legal_white = _kernels.othello_legal(board, 4, 2)
        legal_black = _kernels.othello_legal(board, 4, 1)
        assert legal_black.any()
        assert legal_white.any()  # white can still flank along row 1
        board[6] = 1  # now white has nothing on the board
        assert not _kernels.othello_legal(board, 4, 2).any()
        assert not _kernels.othello_legal(board, 4, 1).any()

    def test_othello_pass_sequence_in_playouts(self):
        spec = GameSpec.othello(4)
        passes = 0
        for seed in range(300):
            s = reset(spec)
            rng = np.random.default_rng(seed)
            while not s.terminal:
                mask = legal_actions(s)
                if mask.indices.tolist() == [spec.pass_action]:
                    passes += 1
                else:
                    assert spec.pass_action not in mask
                s, _ = step(s, int(rng.choice(mask.indices)))
        assert passes > 0


class TestEncode:
    def test_countup_one_hot(self):
        s, _ = _play(GameSpec.countup(7, 2), [0, 1])
        x = encode(s)
        assert x.shape == (8,) and x[3] == 1.0 and x[:7].sum() == 1.0
        assert x[-1] == 1.0  # player 0 to move after two plies

    def test_hex_empty(self):
        x = encode(reset(GameSpec.hex(3)))
        assert x[:18].sum() == 0 and np.all(x[18:] == 1.0)

    def test_othello_initial(self):
        x = encode(reset(GameSpec.othello(4)))
        assert np.count_nonzero(x[:32]) == 4

    def test_deterministic(self):
        s, _ = _play(GameSpec.hex(3), [4, 0])
        assert np.array_equal(encode(s), encode(s))


class TestStateKey:
    def test_equal_positions(self):
        a, _ = _play(GameSpec.hex(3), [0, 4])
        b, _ = _play(GameSpec.hex(3), [0, 4])
        assert state_key(a) == state_key(b) and a == b

    def test_to_move_distinguishes(self):
        spec = GameSpec.countup(7, 2)
        a, _ = _play(spec, [1])  # position 2, player 1 to move
        b, _ = _play(spec, [0, 0])  # position 2, player 0 to move
        assert a.position == b.position
        assert state_key(a) != state_key(b)

    def test_countup_keys_distinct(self):
        spec = GameSpec.countup(7, 1)
        s = reset(spec)
        keys = set()
        while not s.terminal:
            keys.add(state_key(s))
            s, _ = step(s, 0)
        assert len(keys) == 7


@pytest.mark.parametrize("spec", [GameSpec.countup(7, 2), GameSpec.countup(10, 3), GameSpec.hex(3), GameSpec.hex(4), GameSpec.othello(4)], ids=str)
class TestPlayoutProperties:
    def test_finite_and_zero_sum(self, spec):
        for seed in range(60):
            s, actions, rewards = _random_playout(spec, seed)
            assert len(actions) <= spec.max_plies
            assert all(r == 0.0 for r in rewards[:-1])
            assert games.outcome_for(s, 0) + games.outcome_for(s, 1) == 0.0

    def test_replay_reproduces(self, spec):
        s, actions, rewards = _random_playout(spec, 123)
        t, r = _play(spec, actions)
        assert state_key(t) == state_key(s) and t.outcome == s.outcome and r == rewards[-1]


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(2, 5))
def test_hex_filled_board_has_one_winner(seed, side):
    rng = np.random.default_rng(seed)
    board = np.zeros(side * side, dtype=np.int8)
    cells = rng.permutation(side * side)
    board[cells[: (side * side + 1) // 2]] = 1
    board[cells[(side * side + 1) // 2 :]] = 2
    black = _kernels.hex_connected(board, side, 1)
    white = _kernels.hex_connected(board, side, 2)
    assert black != white


def test_hex_never_draws():
    for seed in range(200):
        s, actions, _ = _random_playout(GameSpec.hex(3), seed)
        assert s.outcome == 1.0


def test_spec_parse_round_trip():
    for text in ("countup:7:2", "hex:3", "othello:6"):
        assert str(GameSpec.parse(text)) == text


def test_action_names_round_trip():
    for spec in (GameSpec.countup(7, 2), GameSpec.hex(3), GameSpec.othello(4)):
        for a in range(spec.num_actions):
            assert games.parse_action(spec, games.action_name(spec, a)) == a
