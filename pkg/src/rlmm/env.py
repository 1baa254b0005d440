"""Peg-solitaire tasks as finite deterministic MDPs.

States are occupancy bitmasks over the playable cells of a board, one bit
per playable cell in row-major order. Every legal jump removes one peg, so
the reachable graph is layered by peg count and acyclic.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property
from importlib import resources
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np
import yaml

logger = logging.getLogger(__name__)

Cell = tuple[int, int]

DEFAULT_STATE_CAP = 50_000_000
DEFAULT_TABLE_CAP = 1_000_000

# right, down, left, up
_DIRECTIONS = ((0, 1), (1, 0), (0, -1), (-1, 0))


class CapacityError(RuntimeError):
    """Raised when an operation would exceed a configured size guard."""


class IllegalMoveError(ValueError):
    pass


class UnknownStateError(KeyError):
    pass


class MoveAction(NamedTuple):
    from_cell: Cell
    over_cell: Cell
    to_cell: Cell
    global_id: int


@dataclass(frozen=True)
class RewardSpec:
    """Terminal-goal reward: paid on entering a solved or dead state."""

    solved: float = 1.0
    dead: float = -1.0
    step: float = 0.0


@dataclass(frozen=True)
class BoardSpec:
    name: str
    mask: tuple[str, ...]
    starts: tuple[frozenset[Cell], ...]
    goal_cell: Cell | None = None
    discount: float = 0.95
    reward: RewardSpec = field(default_factory=RewardSpec)
    reference: dict | None = None
    state_space: str = "reachable"
    generator: str = "tabular"

    def __post_init__(self):
        widths = {len(row) for row in self.mask}
        if len(widths) != 1:
            raise ValueError(f"{self.name}: ragged mask rows")
        if any(ch not in "#." for row in self.mask for ch in row):
            raise ValueError(f"{self.name}: mask rows use '#' and '.' only")
        if len(self.cells) < 4:
            raise ValueError(f"{self.name}: need at least 4 playable cells")
        if not self.starts:
            raise ValueError(f"{self.name}: no start configuration")
        playable = set(self.cells)
        for pegs in self.starts:
            if not pegs <= playable:
                raise ValueError(f"{self.name}: peg outside mask: {sorted(pegs - playable)}")
            if len(pegs) == len(playable):
                raise ValueError(f"{self.name}: start has no empty cell")
        if self.goal_cell is not None and self.goal_cell not in playable:
            raise ValueError(f"{self.name}: goal cell {self.goal_cell} not playable")
        if not 0.0 <= self.discount <= 1.0:
            raise ValueError(f"{self.name}: discount must lie in [0, 1]")
        if self.generator not in ("tabular", "score", "probe"):
            raise ValueError(f"{self.name}: unknown generator {self.generator!r}")

    @cached_property
    def cells(self) -> tuple[Cell, ...]:
        return tuple(
            (r, c) for r, row in enumerate(self.mask) for c, ch in enumerate(row) if ch == "#"
        )

    @cached_property
    def cell_index(self) -> dict[Cell, int]:
        return {cell: i for i, cell in enumerate(self.cells)}

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    @cached_property
    def actions(self) -> tuple[MoveAction, ...]:
        """Every geometrically possible orthogonal jump, once each."""
        idx = self.cell_index
        out = []
        for r, c in self.cells:
            for dr, dc in _DIRECTIONS:
                over, to = (r + dr, c + dc), (r + 2 * dr, c + 2 * dc)
                if over in idx and to in idx:
                    out.append(MoveAction((r, c), over, to, len(out)))
        return tuple(out)

    @property
    def n_actions(self) -> int:
        return len(self.actions)

    @cached_property
    def jump_masks(self) -> tuple[np.ndarray, np.ndarray]:
        """(from|over bits, to bit) per global action, as uint64 arrays."""
        if self.n_cells > 64:
            raise CapacityError(f"{self.name}: more than 64 playable cells")
        idx = self.cell_index
        src = np.array(
            [(1 << idx[a.from_cell]) | (1 << idx[a.over_cell]) for a in self.actions],
            dtype=np.uint64,
        )
        dst = np.array([1 << idx[a.to_cell] for a in self.actions], dtype=np.uint64)
        return src, dst

    @cached_property
    def initial_states(self) -> tuple[int, ...]:
        idx = self.cell_index
        return tuple(sum(1 << idx[p] for p in pegs) for pegs in self.starts)

    @property
    def initial_pegs(self) -> frozenset[Cell]:
        return self.starts[0]

    def encode(self, pegs: Iterable[Cell]) -> int:
        idx = self.cell_index
        try:
            return sum(1 << idx[p] for p in set(pegs))
        except KeyError as exc:
            raise ValueError(f"{self.name}: cell {exc.args[0]} is not playable") from None

    def decode(self, state: int) -> frozenset[Cell]:
        return frozenset(cell for i, cell in enumerate(self.cells) if state >> i & 1)

    def is_solved(self, state: int) -> bool:
        if int(state).bit_count() != 1:
            return False
        if self.goal_cell is None:
            return True
        return int(state) == 1 << self.cell_index[self.goal_cell]

    def legal_ids(self, state: int) -> list[int]:
        src, dst = self.jump_masks
        s = np.uint64(state)
        ok = ((s & src) == src) & ((s & dst) == 0)
        return np.flatnonzero(ok).tolist()

    @cached_property
    def symmetries(self) -> tuple[tuple[int, ...], ...]:
        """Cell permutations (dihedral transforms) mapping the mask onto itself."""
        rows, cols = len(self.mask), len(self.mask[0])
        idx = self.cell_index
        perms = []
        for g in range(8):
            if g % 2 and rows != cols:
                continue
            image = []
            for r, c in self.cells:
                for _ in range(g % 4):
                    r, c = c, rows - 1 - r
                if g >= 4:
                    c = cols - 1 - c
                image.append(idx.get((r, c)))
            if None not in image and image not in perms:
                perms.append(image)
        return tuple(tuple(p) for p in perms)

    @cached_property
    def _sym_tables(self) -> list[np.ndarray]:
        n = self.n_cells
        nbytes = (n + 7) // 8
        tables = []
        for perm in self.symmetries:
            tab = np.zeros((nbytes, 256), dtype=np.uint64)
            for byte in range(nbytes):
                for v in range(256):
                    out = 0
                    for j in range(8):
                        i = 8 * byte + j
                        if i < n and v >> j & 1:
                            out |= 1 << perm[i]
                    tab[byte, v] = out
            tables.append(tab)
        return tables

    def canonical(self, states):
        """Smallest bitmask in each state's symmetry orbit."""
        arr = np.asarray(states, dtype=np.uint64)
        chunks = [
            ((arr >> np.uint64(8 * k)) & np.uint64(255)).astype(np.intp)
            for k in range((self.n_cells + 7) // 8)
        ]
        best = None
        for tab in self._sym_tables:
            img = tab[0][chunks[0]]
            for k in range(1, len(chunks)):
                img |= tab[k][chunks[k]]
            best = img if best is None else np.minimum(best, img)
        return best if arr.ndim else np.uint64(best)

    def check_symmetric_start(self) -> None:
        starts = set(self.initial_states)
        idx = self.cell_index
        for perm in self.symmetries:
            for s in starts:
                img = sum(1 << perm[i] for i in range(self.n_cells) if s >> i & 1)
                if img not in starts:
                    raise ValueError(f"{self.name}: start set not closed under board symmetry")
            if self.goal_cell is not None and perm[idx[self.goal_cell]] != idx[self.goal_cell]:
                raise ValueError(f"{self.name}: goal cell not fixed by board symmetry")

    def render(self, state: int) -> str:
        idx = self.cell_index
        lines = []
        for r, row in enumerate(self.mask):
            lines.append(
                "".join(
                    " " if ch == "." else ("o" if state >> idx[(r, c)] & 1 else ".")
                    for c, ch in enumerate(row)
                )
            )
        return "\n".join(lines)


def _cells(raw) -> frozenset[Cell]:
    return frozenset((int(r), int(c)) for r, c in raw)


def board_from_dict(doc: dict) -> BoardSpec:
    """Build a BoardSpec from a parsed board document.

    A start is given by ``pegs`` (occupied cells) or ``empty`` (holes, all
    other playable cells occupied); ``starts`` lists several of these.
    """
    mask = tuple(doc["mask"])
    playable = frozenset(
        (r, c) for r, row in enumerate(mask) for c, ch in enumerate(row) if ch == "#"
    )

    def start(entry: dict) -> frozenset[Cell]:
        if "pegs" in entry:
            return _cells(entry["pegs"])
        return playable - _cells(entry["empty"])

    if "starts" in doc:
        starts = tuple(start(e) for e in doc["starts"])
    else:
        starts = (start(doc),)
    goal = doc.get("goal", "anywhere")
    goal_cell = None
    if isinstance(goal, dict):
        goal_cell = tuple(int(v) for v in goal["cell"])
    elif goal != "anywhere":
        raise ValueError(f"unknown goal {goal!r}")
    reward = RewardSpec(**doc.get("reward", {}))
    return BoardSpec(
        name=doc["name"],
        mask=mask,
        starts=starts,
        goal_cell=goal_cell,
        discount=float(doc.get("discount", 0.95)),
        reward=reward,
        reference=doc.get("reference"),
        state_space=doc.get("state_space", "reachable"),
        generator=doc.get("generator", "tabular"),
    )


def load_board(path: str | Path) -> BoardSpec:
    with open(path) as fh:
        return board_from_dict(yaml.safe_load(fh))


def builtin_boards() -> list[BoardSpec]:
    order = ["line-5", "tiny-cross", "big-cross", "big-l", "diamond", "grid-4x4", "cross-7x7"]
    root = resources.files("rlmm") / "boards"
    return [board_from_dict(yaml.safe_load((root / f"{n}.yaml").read_text())) for n in order]


def get_board(name: str) -> BoardSpec:
    for board in builtin_boards():
        if board.name.lower() == name.lower():
            return board
    if Path(name).is_file():
        return load_board(name)
    raise KeyError(f"unknown board {name!r}")


def successors(board: BoardSpec, states: np.ndarray) -> np.ndarray:
    """All successor bitmasks of ``states`` (duplicates kept)."""
    src, dst = board.jump_masks
    out = []
    for f, t in zip(src, dst):
        sel = ((states & f) == f) & ((states & t) == 0)
        if sel.any():
            out.append(states[sel] ^ (f | t))
    if not out:
        return np.empty(0, dtype=np.uint64)
    return np.concatenate(out)


class EnumeratedTask:
    """Reachable state space of a board.

    Holds only the sorted state array, so memory is O(|S|). The per-edge
    transition table (``table``) is built on demand for boards under the
    table cap.
    """

    def __init__(
        self, board: BoardSpec, states: np.ndarray, level_sizes: list[int], reduced: bool = False
    ):
        self.board = board
        self.states = states
        self.level_sizes = level_sizes
        self.reduced = reduced
        self._table: TransitionTable | None = None

    def __len__(self) -> int:
        return len(self.states)

    def __contains__(self, state: int) -> bool:
        if self.reduced:
            state = int(self.board.canonical(state))
        i = np.searchsorted(self.states, np.uint64(state))
        return i < len(self.states) and int(self.states[i]) == int(state)

    @property
    def gamma(self) -> float:
        return self.board.discount

    @property
    def initial_states(self) -> tuple[int, ...]:
        return self.board.initial_states

    def index(self, state) -> np.ndarray | int:
        """Dense index of one state or an array of states."""
        arr = np.asarray(state, dtype=np.uint64)
        if self.reduced:
            arr = self.board.canonical(arr)
        i = np.searchsorted(self.states, arr)
        i_clip = np.minimum(i, len(self.states) - 1)
        if np.any(self.states[i_clip] != arr):
            raise UnknownStateError(f"state not in {self.board.name} enumeration")
        return int(i_clip) if arr.ndim == 0 else i_clip

    def legal(self, state: int) -> list[int]:
        if state not in self:
            raise UnknownStateError(hex(state))
        return self.board.legal_ids(state)

    def is_solved(self, state: int) -> bool:
        return self.board.is_solved(state)

    def is_terminal(self, state: int) -> bool:
        return self.is_solved(state) or not self.board.legal_ids(state)

    def reward(self, next_state: int) -> float:
        spec = self.board.reward
        if self.board.is_solved(next_state):
            return spec.solved
        if not self.board.legal_ids(next_state):
            return spec.dead
        return spec.step

    @property
    def actions_used(self) -> int:
        """Number of global actions legal in at least one reachable state."""
        src, dst = self.board.jump_masks
        used = np.zeros(len(src), dtype=bool)
        for lo in range(0, len(self.states), 1 << 20):
            chunk = self.states[lo : lo + (1 << 20)]
            for k, (f, t) in enumerate(zip(src, dst)):
                if not used[k]:
                    used[k] = bool((((chunk & f) == f) & ((chunk & t) == 0)).any())
        if self.reduced:
            # stored states are orbit representatives; every image of a used jump is used too
            key = {(int(f), int(t)): k for k, (f, t) in enumerate(zip(src, dst))}
            n = self.board.n_cells
            for perm in self.board.symmetries:
                for k in np.flatnonzero(used):
                    f_img = sum(1 << perm[i] for i in range(n) if int(src[k]) >> i & 1)
                    used[key[(f_img, 1 << perm[int(dst[k]).bit_length() - 1])]] = True
        return int(used.sum())

    def table(self, cap: int = DEFAULT_TABLE_CAP) -> TransitionTable:
        if self._table is None:
            if len(self) > cap:
                raise CapacityError(
                    f"{self.board.name}: {len(self)} states exceeds table cap {cap}"
                )
            self._table = TransitionTable.build(self)
        return self._table


@dataclass(frozen=True)
class TransitionTable:
    """Legal (state, action) pairs in CSR layout over dense state indices.

    Edges of state ``i`` occupy ``ptr[i]:ptr[i+1]``, ordered by action id.
    """

    ptr: np.ndarray
    action: np.ndarray
    next: np.ndarray
    reward: np.ndarray
    solved: np.ndarray
    terminal: np.ndarray

    @property
    def n_states(self) -> int:
        return len(self.ptr) - 1

    @property
    def n_edges(self) -> int:
        return len(self.action)

    @cached_property
    def source(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_states), np.diff(self.ptr))

    @cached_property
    def n_legal(self) -> np.ndarray:
        return np.diff(self.ptr)

    def edge(self, s_idx: int, action: int) -> int:
        lo, hi = self.ptr[s_idx], self.ptr[s_idx + 1]
        k = lo + np.searchsorted(self.action[lo:hi], action)
        if k >= hi or self.action[k] != action:
            raise IllegalMoveError(f"action {action} not legal at state index {s_idx}")
        return int(k)

    @classmethod
    def build(cls, task: EnumeratedTask) -> TransitionTable:
        board = task.board
        states = task.states
        src, dst = board.jump_masks
        legal = ((states[:, None] & src) == src) & ((states[:, None] & dst) == 0)
        solved = np.array([board.is_solved(int(s)) for s in states], dtype=bool)
        legal[solved] = False
        s_idx, a_idx = np.nonzero(legal)
        nxt_bits = states[s_idx] ^ (src[a_idx] | dst[a_idx])
        nxt = task.index(nxt_bits)
        counts = legal.sum(axis=1)
        ptr = np.concatenate([[0], np.cumsum(counts)])
        terminal = counts == 0
        spec = board.reward
        reward = np.where(
            solved[nxt], spec.solved, np.where(terminal[nxt], spec.dead, spec.step)
        )
        return cls(
            ptr=ptr,
            action=a_idx.astype(np.int64),
            next=np.asarray(nxt, dtype=np.int64),
            reward=reward.astype(float),
            solved=solved,
            terminal=terminal,
        )


def enumerate_reachable(
    board: BoardSpec, cap: int = DEFAULT_STATE_CAP, keep: str | None = None
) -> EnumeratedTask:
    """Breadth-first closure from the start states, one peg-count layer at a time.

    Every jump removes one peg, so the BFS frontier at depth d is exactly the
    layer with (start pegs - d) pegs; each layer is deduplicated with a sort.
    With ``keep="symmetry-reduced"`` states are stored as the canonical
    representative of their orbit under the board's symmetry group.
    """
    keep = keep or board.state_space
    if keep not in ("reachable", "symmetry-reduced"):
        raise ValueError(f"unknown state-space rule {keep!r}")
    reduce = keep == "symmetry-reduced"
    if reduce:
        board.check_symmetric_start()

        def step(b, layer):
            return b.canonical(successors(b, layer))
    else:
        step = successors
    starts = np.array(board.initial_states, dtype=np.uint64)
    if reduce:
        starts = board.canonical(starts)
    start_pop = np.array([int(s).bit_count() for s in starts])
    layers = []
    sizes = []
    total = 0
    frontier = np.empty(0, dtype=np.uint64)
    for k in range(int(start_pop.max()), 0, -1):
        layer = np.unique(np.concatenate([frontier, starts[start_pop == k]]))
        frontier = np.empty(0, dtype=np.uint64)
        if not len(layer):
            continue
        total += len(layer)
        if total > cap:
            raise CapacityError(f"{board.name}: more than {cap} reachable states")
        layers.append(layer)
        sizes.append(len(layer))
        logger.debug("%s: %d pegs, %d states", board.name, k, len(layer))
        frontier = _unique_chunked(board, layer, step)
    states = np.sort(np.concatenate(layers))
    return EnumeratedTask(board, states, sizes, reduced=reduce)


def _unique_chunked(board, layer, step, chunk=1 << 21) -> np.ndarray:
    parts = [np.unique(step(board, layer[i : i + chunk])) for i in range(0, len(layer), chunk)]
    if not parts:
        return np.empty(0, dtype=np.uint64)
    return parts[0] if len(parts) == 1 else np.unique(np.concatenate(parts))


def enumerate_dfs(board: BoardSpec) -> set[int]:
    """Depth-first enumeration on peg sets; independent of the bitmask BFS."""
    cells = set(board.cells)
    seen: set[frozenset[Cell]] = set()
    stack = [frozenset(p) for p in board.starts]
    while stack:
        pegs = stack.pop()
        if pegs in seen:
            continue
        seen.add(pegs)
        if len(pegs) == 1:
            continue
        for r, c in pegs:
            for dr, dc in _DIRECTIONS:
                over, to = (r + dr, c + dc), (r + 2 * dr, c + 2 * dc)
                if over in pegs and to in cells and to not in pegs:
                    stack.append((pegs - {(r, c), over}) | {to})
    return {board.encode(p) for p in seen}


def legal_actions(task: EnumeratedTask, state: int) -> list[int]:
    return task.legal(state)


def apply_action(task: EnumeratedTask, state: int, action: int) -> tuple[int, float]:
    board = task.board
    if state not in task:
        raise UnknownStateError(hex(state))
    move = board.actions[action]
    idx = board.cell_index
    problems = []
    if not state >> idx[move.from_cell] & 1:
        problems.append(f"from-cell {move.from_cell} is empty")
    if not state >> idx[move.over_cell] & 1:
        problems.append(f"over-cell {move.over_cell} is empty")
    if state >> idx[move.to_cell] & 1:
        problems.append(f"to-cell {move.to_cell} is occupied")
    if problems:
        raise IllegalMoveError(f"action {action} illegal: " + "; ".join(problems))
    if board.is_solved(state):
        raise IllegalMoveError("state is already solved")
    nxt = state ^ (1 << idx[move.from_cell]) ^ (1 << idx[move.over_cell]) ^ (1 << idx[move.to_cell])
    return nxt, task.reward(nxt)


def count_solution_paths(task: EnumeratedTask, state: int | None = None, cap: int = DEFAULT_TABLE_CAP):
    """Number of legal move sequences reaching a solved state.

    Solved states count the empty path (N = 1); dead ends count 0. Returns the
    count for ``state`` if given, else the full per-state array (object dtype,
    exact integers).
    """
    counts = solution_path_counts(task, cap)
    if state is None:
        return counts
    return int(counts[task.index(state)])


def solution_path_counts(task: EnumeratedTask, cap: int = DEFAULT_TABLE_CAP) -> np.ndarray:
    if len(task) > cap:
        raise CapacityError(f"{task.board.name}: {len(task)} states exceeds counting cap {cap}")
    cached = getattr(task, "_path_counts", None)
    if cached is not None:
        return cached
    tab = task.table(cap)
    pop = np.array([int(s).bit_count() for s in task.states])
    counts = np.zeros(len(task), dtype=object)
    counts[tab.solved] = 1
    for k in np.unique(pop):
        rows = np.flatnonzero((pop == k) & ~tab.terminal)
        for i in rows:
            lo, hi = tab.ptr[i], tab.ptr[i + 1]
            counts[i] = sum(counts[tab.next[lo:hi]])
    task._path_counts = counts
    return counts


def shortest_solution_length(task: EnumeratedTask) -> int | None:
    """Moves from a start to the nearest solved state, or None if unsolvable.

    Uses the enumerated layers: the first peg-count layer holding a solved
    state fixes the length, since each move removes exactly one peg.
    """
    solved_pop = None
    goal = task.board.goal_cell
    if goal is None:
        ones = task.states[(task.states & (task.states - np.uint64(1))) == 0]
        if len(ones):
            solved_pop = 1
    elif (1 << task.board.cell_index[goal]) in task:
        solved_pop = 1
    if solved_pop is None:
        return None
    return max(int(s).bit_count() for s in task.initial_states) - solved_pop


def feature_dim(board: BoardSpec) -> int:
    return board.n_cells + 2


def features(board: BoardSpec, state) -> np.ndarray:
    """Occupancy indicators then peg and hole fractions.

    Accepts a single bitmask or an array of them (rows of the result).
    """
    arr = np.atleast_1d(np.asarray(state, dtype=np.uint64))
    n = board.n_cells
    bits = ((arr[:, None] >> np.arange(n, dtype=np.uint64)) & np.uint64(1)).astype(float)
    pegs = bits.sum(axis=1, keepdims=True) / n
    out = np.hstack([bits, pegs, 1.0 - pegs])
    return out[0] if np.ndim(state) == 0 else out


def summary_row(task: EnumeratedTask) -> dict:
    return {
        "name": task.board.name,
        "states": len(task),
        "actions": task.actions_used,
        "solution_length": shortest_solution_length(task),
    }
