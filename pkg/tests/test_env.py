import itertools

import numpy as np
import pytest

from rlmm.env import (
    BoardSpec,
    CapacityError,
    IllegalMoveError,
    UnknownStateError,
    apply_action,
    builtin_boards,
    count_solution_paths,
    enumerate_dfs,
    enumerate_reachable,
    feature_dim,
    features,
    get_board,
    legal_actions,
    load_board,
    shortest_solution_length,
    summary_row,
)

SMALL = ["line-5", "tiny-cross", "big-cross", "big-L", "diamond", "grid-4x4"]


def _line_state(pegs):
    return sum(1 << i for i in pegs)


def _line_move(board, frm, to):
    (a,) = [m.global_id for m in board.actions if m.from_cell == (0, frm) and m.to_cell == (0, to)]
    return a


# hand oracle for the five-cell line: pegs are cell indices 0..4
def _line_successors(pegs):
    out = []
    for f in pegs:
        for d in (1, -1):
            o, t = f + d, f + 2 * d
            if o in pegs and 0 <= t < 5 and t not in pegs:
                out.append(frozenset(pegs - {f, o} | {t}))
    return out


def test_builtin_names():
    names = [b.name for b in builtin_boards()]
    assert names == ["line-5", "tiny-cross", "big-cross", "big-L", "diamond", "grid-4x4", "cross-7x7"]
    assert get_board("big-l").name == "big-L"
    with pytest.raises(KeyError):
        get_board("no-such-board")


def test_line5_layout(line5, line5_task):
    assert line5.mask == ("#####",)
    assert line5.initial_states == (_line_state([0, 1, 3, 4]),)
    first = legal_actions(line5_task, line5.initial_states[0])
    assert sorted(first) == sorted([_line_move(line5, 0, 2), _line_move(line5, 4, 2)])


def test_line5_second_move_by_hand(line5, line5_task):
    s1, r = apply_action(line5_task, line5.initial_states[0], _line_move(line5, 0, 2))
    assert s1 == _line_state([2, 3, 4]) and r == 0.0
    assert legal_actions(line5_task, s1) == [_line_move(line5, 3, 1)]


def test_line5_transitions_match_brute_force(line5, line5_task):
    seen = {frozenset({0, 1, 3, 4})}
    stack = list(seen)
    while stack:
        pegs = stack.pop()
        for nxt in _line_successors(pegs):
            if nxt not in seen:
                seen.add(nxt)
                stack.append(nxt)
    assert {int(s) for s in line5_task.states} == {_line_state(p) for p in seen}
    for pegs in seen:
        s = _line_state(pegs)
        got = sorted(apply_action(line5_task, s, a)[0] for a in legal_actions(line5_task, s))
        assert got == sorted(_line_state(p) for p in _line_successors(pegs))


def test_line5_has_no_solution(line5_task):
    # the centre-hole line dead-ends with two pegs whichever way it is played
    assert len(line5_task) == 5
    assert shortest_solution_length(line5_task) is None
    assert min(int(s).bit_count() for s in line5_task.states) == 2


def test_line5_dead_reward(line5, line5_task):
    s1, _ = apply_action(line5_task, line5.initial_states[0], _line_move(line5, 0, 2))
    s2, r = apply_action(line5_task, s1, _line_move(line5, 3, 1))
    assert r == -1.0 and legal_actions(line5_task, s2) == []


def test_solved_reward_and_no_moves(tiny, tiny_task):
    tab = tiny_task.table()
    solved_edges = np.flatnonzero(tab.solved[tab.next])
    assert len(solved_edges) > 0
    assert np.all(tab.reward[solved_edges] == 1.0)
    for i in np.flatnonzero(tab.solved):
        assert legal_actions(tiny_task, int(tiny_task.states[i])) == []


def test_illegal_move_names_cell(line5, line5_task):
    with pytest.raises(IllegalMoveError, match="over-cell .* is empty; to-cell .* is occupied"):
        apply_action(line5_task, line5.initial_states[0], _line_move(line5, 1, 3))
    with pytest.raises(UnknownStateError):
        legal_actions(line5_task, _line_state([0]) | (1 << 40))


@pytest.mark.parametrize("name", SMALL)
def test_enumeration_invariants(name):
    board = get_board(name)
    task = enumerate_reachable(board)
    tab = task.table()
    pop = np.array([int(s).bit_count() for s in task.states])
    src = tab.source
    assert np.all(pop[tab.next] == pop[src] - 1)
    assert np.all(tab.terminal == (tab.n_legal == 0))
    # every state is reached from a start
    reached = np.zeros(len(task), dtype=bool)
    reached[[task.index(s) for s in board.initial_states]] = True
    for k in sorted(set(pop), reverse=True):
        rows = np.flatnonzero((pop == k) & reached)
        for i in rows:
            reached[tab.next[tab.ptr[i] : tab.ptr[i + 1]]] = True
    assert reached.all()


@pytest.mark.parametrize("name", SMALL)
def test_dual_enumerators_agree(name):
    board = get_board(name)
    assert enumerate_dfs(board) == {int(s) for s in enumerate_reachable(board).states}


@pytest.mark.parametrize(
    "name,states,actions,length",
    [("tiny-cross", 22, 12, 5), ("big-cross", 153, 22, 8), ("big-L", 807, 30, 13), ("diamond", 5923, 70, 11)],
)
def test_reference_boards(name, states, actions, length):
    board = get_board(name)
    task = enumerate_reachable(board)
    extra = board.reference["extra_actions"]
    assert (len(task), task.actions_used + extra, shortest_solution_length(task)) == (states, actions, length)


def test_grid4x4_counts():
    task = enumerate_reachable(get_board("grid-4x4"))
    assert summary_row(task) == {"name": "grid-4x4", "states": 9336, "actions": 32, "solution_length": 14}


def test_capacity_guard():
    with pytest.raises(CapacityError):
        enumerate_reachable(get_board("diamond"), cap=100)


def test_solution_paths_line5_exhaustive(line5, line5_task):
    def paths(pegs):
        if len(pegs) == 1:
            return 1
        return sum(paths(n) for n in _line_successors(pegs))

    assert count_solution_paths(line5_task, line5.initial_states[0]) == paths(frozenset({0, 1, 3, 4})) == 0


@pytest.mark.parametrize("name", ["tiny-cross", "big-cross", "big-L"])
def test_solution_path_recursion(name):
    task = enumerate_reachable(get_board(name))
    tab = task.table()
    n = count_solution_paths(task)
    for i in range(len(task)):
        if tab.solved[i]:
            assert n[i] == 1
        elif tab.terminal[i]:
            assert n[i] == 0
        else:
            assert n[i] == sum(n[tab.next[tab.ptr[i] : tab.ptr[i + 1]]])


def test_tiny_cross_paths_exhaustive(tiny, tiny_task):
    def paths(s):
        if tiny.is_solved(s):
            return 1
        return sum(paths(apply_action(tiny_task, s, a)[0]) for a in tiny.legal_ids(s))

    s0 = tiny.initial_states[0]
    assert count_solution_paths(tiny_task, s0) == paths(s0) > 0


def test_features(line5):
    f = features(line5, _line_state([0, 1, 3, 4]))
    assert f.shape == (feature_dim(line5),)
    np.testing.assert_array_equal(f[:5], [1, 1, 0, 1, 1])
    assert f[5] == pytest.approx(4 / 5) and f[6] == pytest.approx(1 / 5)
    assert features(line5, _line_state([3]))[:5].sum() == 1


def test_features_injective(tiny_task):
    phi = features(tiny_task.board, tiny_task.states)
    assert len({row.tobytes() for row in phi}) == len(tiny_task)
    assert np.all(np.isfinite(phi))


def test_enumeration_deterministic(tiny):
    a, b = enumerate_reachable(tiny), enumerate_reachable(tiny)
    assert a.states.tobytes() == b.states.tobytes()
    assert np.all(np.diff(a.states.astype(np.float64)) > 0)


def test_board_file_roundtrip(tmp_path):
    p = tmp_path / "b.yaml"
    p.write_text("name: t\nmask: ['####']\nempty: [[0, 0]]\n")
    board = load_board(p)
    assert isinstance(board, BoardSpec) and board.n_cells == 4 and board.discount == 0.95
    assert get_board(str(p)).name == "t"


@pytest.mark.parametrize(
    "text,msg",
    [
        ("name: t\nmask: ['#.#', '##']\nempty: [[0, 0]]\n", "ragged"),
        ("name: t\nmask: ['####']\nempty: [[0, 0]]\ndiscount: 1.5\n", "discount"),
        ("name: t\nmask: ['##']\nempty: [[0, 0]]\n", "at least 4"),
    ],
)
def test_board_validation(tmp_path, text, msg):
    p = tmp_path / "b.yaml"
    p.write_text(text)
    with pytest.raises(ValueError, match=msg):
        load_board(p)


def test_symmetric_reduction_matches_orbits():
    board = get_board("big-cross")
    full = enumerate_reachable(board, keep="reachable")
    red = enumerate_reachable(board, keep="symmetry-reduced")
    orbits = {int(board.canonical(np.uint64(s))) for s in full.states}
    assert orbits == {int(s) for s in red.states}
    for s in itertools.islice(full.states, 50):
        assert int(s) in red


@pytest.mark.parametrize("name", ["big-cross", "diamond", "grid-4x4"])
def test_reduced_action_count_matches_full(name):
    board = get_board(name)
    full = enumerate_reachable(board, keep="reachable")
    red = enumerate_reachable(board, keep="symmetry-reduced")
    assert red.actions_used == full.actions_used
