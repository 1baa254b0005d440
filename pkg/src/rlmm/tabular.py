"""Tabular baseline: person-specific softmax value tables and quadrature MML.

Each ability value beta gets its own action-value table, the fixed point of
the Bellman equation under the softmax policy with that beta. Persons are
integrated out over log beta with Gauss-Hermite quadrature.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.special import logsumexp

from .data import Dataset, TrajectoryRecord
from .env import (
    BoardSpec,
    CapacityError,
    EnumeratedTask,
    TransitionTable,
    enumerate_reachable,
    solution_path_counts,
)

logger = logging.getLogger(__name__)

TABLE_GUARD = 1_000_000


class ConvergenceError(RuntimeError):
    def __init__(self, msg, residual=None, trace=None):
        super().__init__(msg)
        self.residual = residual
        self.trace = trace


@dataclass(frozen=True)
class PopulationPrior:
    """log beta ~ N(mu, sigma2)."""

    mu: float = 0.0
    sigma2: float = 0.25

    def __post_init__(self):
        if not self.sigma2 > 0:
            raise ValueError("sigma2 must be positive")

    @property
    def sigma(self) -> float:
        return math.sqrt(self.sigma2)


@dataclass(frozen=True)
class TabularQ:
    """Action values on the legal edges of ``task.table()``."""

    beta: float
    q_edges: np.ndarray
    iterations_used: int
    residual: float
    table: TransitionTable = field(repr=False)

    @property
    def q(self) -> np.ndarray:
        """Dense |S| x |A| view; NaN off the legal pairs."""
        tab = self.table
        n_actions = int(tab.action.max()) + 1 if tab.n_edges else 0
        out = np.full((tab.n_states, n_actions), np.nan)
        out[tab.source, tab.action] = self.q_edges
        return out


def _segment_starts(tab: TransitionTable) -> np.ndarray:
    return tab.ptr[:-1][tab.n_legal > 0]


def edge_log_probs(tab: TransitionTable, scores: np.ndarray) -> np.ndarray:
    """Log softmax of ``scores`` within each state's legal edges."""
    if tab.n_edges == 0:
        return np.empty(0)
    starts = _segment_starts(tab)
    seg = np.repeat(np.arange(len(starts)), tab.n_legal[tab.n_legal > 0])
    m = np.maximum.reduceat(scores, starts)
    z = np.exp(scores - m[seg])
    lse = m + np.log(np.add.reduceat(z, starts))
    return scores - lse[seg]


def solve_q_for_beta(
    task: EnumeratedTask, beta: float, tol: float = 1e-8, max_iter: int = 10_000
) -> TabularQ:
    """Fixed point of Q = R + gamma * E_{softmax(beta Q)}[Q(s', .)].

    Alternates policy evaluation and softmax improvement in synchronous sweeps
    over every legal edge. Terminal successors contribute no continuation.
    On the peg-solitaire DAG the sweep converges exactly after depth + 1
    iterations.
    """
    if beta < 0:
        raise ValueError("beta must be non-negative")
    tab = task.table(TABLE_GUARD)
    gamma = task.gamma
    q = np.zeros(tab.n_edges)
    starts = _segment_starts(tab)
    has_moves = tab.n_legal > 0
    v = np.zeros(tab.n_states)
    residual = np.inf
    for it in range(1, max_iter + 1):
        if tab.n_edges:
            p = np.exp(edge_log_probs(tab, beta * q))
            v[has_moves] = np.add.reduceat(p * q, starts)
        q_new = tab.reward + gamma * v[tab.next]
        residual = float(np.max(np.abs(q_new - q))) if tab.n_edges else 0.0
        q = q_new
        if residual <= tol:
            return TabularQ(float(beta), q, it, residual, tab)
    raise ConvergenceError(
        f"no convergence at beta={beta} after {max_iter} sweeps", residual=residual
    )


def mdpmm_action_probs(q: TabularQ, task: EnumeratedTask, state: int) -> dict[int, float]:
    """Softmax of beta * Q(s, .) over the legal actions of ``state``."""
    tab = q.table
    i = task.index(state)
    lo, hi = tab.ptr[i], tab.ptr[i + 1]
    if lo == hi:
        raise ValueError("terminal state has no action distribution")
    z = q.beta * q.q_edges[lo:hi]
    p = np.exp(z - logsumexp(z))
    return dict(zip(tab.action[lo:hi].tolist(), p.tolist()))


@dataclass(frozen=True)
class QuadratureGrid:
    """Gauss-Hermite rule for a normal variable, in standard units."""

    nodes: np.ndarray
    weights: np.ndarray
    kind: str = "gauss-hermite"

    @classmethod
    def gauss_hermite(cls, n: int = 21) -> QuadratureGrid:
        x, w = np.polynomial.hermite.hermgauss(n)
        return cls(nodes=np.sqrt(2.0) * x, weights=w / w.sum())

    def log_beta_nodes(self, prior: PopulationPrior) -> np.ndarray:
        return prior.mu + prior.sigma * self.nodes


def _seed_sequence(seed) -> np.random.SeedSequence:
    return seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)


def sample_population(prior: PopulationPrior, n_persons: int, seed) -> np.ndarray:
    if n_persons < 1:
        raise ValueError("need at least one person")
    rng = np.random.default_rng(seed)
    return np.exp(rng.normal(prior.mu, prior.sigma, size=n_persons))


def person_ids(n: int) -> list[str]:
    width = max(3, len(str(n - 1)))
    return [f"p{j:0{width}d}" for j in range(n)]


def _episode(task, edge_probs, rng, ep_id: str, pid: str, start_idx: int) -> list[TrajectoryRecord]:
    tab = task.table(TABLE_GUARD)
    recs = []
    i = start_idx
    t = 0
    while tab.n_legal[i] > 0:
        lo, hi = tab.ptr[i], tab.ptr[i + 1]
        cdf = np.cumsum(edge_probs[lo:hi])
        k = lo + min(int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right")), hi - lo - 1)
        j = tab.next[k]
        recs.append(
            TrajectoryRecord(
                person_id=pid,
                episode_id=ep_id,
                t=t,
                state=int(task.states[i]),
                action=int(tab.action[k]),
                reward=float(tab.reward[k]),
                next_state=int(task.states[j]),
                terminal=bool(tab.n_legal[j] == 0),
            )
        )
        i = j
        t += 1
    return recs


def simulate_trajectories(
    task: EnumeratedTask,
    betas,
    games_per_person: int,
    seed,
    generator: str = "tabular",
) -> Dataset:
    """Play ``games_per_person`` games per person under a softmax policy.

    ``generator="tabular"`` uses each person's own value table (the baseline
    model); ``"score"`` uses the beta-independent lookahead score table of
    ``lookahead_scores``. Boards with several start positions draw one
    uniformly per game.
    """
    if len(task) > TABLE_GUARD:
        raise CapacityError(
            f"{task.board.name}: too large for tabular simulation; use simulate_large()"
        )
    if task.reduced:
        raise ValueError("simulation needs an unreduced state space")
    tab = task.table(TABLE_GUARD)
    pids = person_ids(len(betas))
    root = _seed_sequence(seed)
    rngs = [np.random.default_rng(s) for s in root.spawn(len(betas))]
    start_idx = [task.index(s) for s in task.initial_states]
    score = lookahead_scores(task) if generator == "score" else None
    width = max(2, len(str(games_per_person - 1)))
    records = []
    for pid, beta, rng in zip(pids, betas, rngs):
        if generator == "tabular":
            logits = beta * solve_q_for_beta(task, beta).q_edges
        elif generator == "score":
            logits = beta * score
        else:
            raise ValueError(f"unknown generator {generator!r}")
        probs = np.exp(edge_log_probs(tab, logits))
        for g in range(games_per_person):
            s0 = start_idx[int(rng.integers(len(start_idx)))] if len(start_idx) > 1 else start_idx[0]
            records.extend(_episode(task, probs, rng, f"g{g:0{width}d}", pid, s0))
    return Dataset(
        records=tuple(records),
        board=task.board.name,
        true_beta={p: float(b) for p, b in zip(pids, betas)},
        meta={"generator": generator, "games_per_person": games_per_person},
    )


def lookahead_scores(task: EnumeratedTask) -> np.ndarray:
    """Per-edge score: 1 if the move keeps a solution reachable, else 0.

    Scores are then scaled so that their state-centred values have unit root
    mean square over the legal edges of decision states (two or more moves),
    putting beta on the same footing as unit-scale normalised advantages.
    """
    tab = task.table(TABLE_GUARD)
    counts = solution_path_counts(task)
    alive = np.array([c > 0 for c in counts], dtype=bool)
    raw = alive[tab.next].astype(float)
    return raw / _centred_rms(tab, raw)


def _centred_rms(tab: TransitionTable, scores: np.ndarray) -> float:
    starts = _segment_starts(tab)
    n = tab.n_legal[tab.n_legal > 0]
    means = np.add.reduceat(scores, starts) / n
    seg = np.repeat(np.arange(len(starts)), n)
    centred = scores - means[seg]
    decision = np.repeat(n >= 2, n)
    rms = math.sqrt(np.mean(centred[decision] ** 2)) if decision.any() else 0.0
    return rms if rms > 0 else 1.0


class SolvabilityProbe:
    """Bounded depth-first check that a state is not dead within ``depth`` moves.

    A state counts as alive when it is solved, or when some line of play
    survives ``depth`` more moves (or reaches a solution sooner).
    """

    def __init__(self, board: BoardSpec, depth: int):
        if depth < 0:
            raise ValueError("depth must be non-negative")
        self.board = board
        self.depth = depth
        src, dst = board.jump_masks
        self._src = [int(x) for x in src]
        self._dst = [int(x) for x in dst]
        self._memo: dict[tuple[int, int], bool] = {}

    def moves(self, state: int) -> list[tuple[int, int]]:
        """(action id, next state) for each legal jump."""
        out = []
        for k, (f, t) in enumerate(zip(self._src, self._dst)):
            if state & f == f and not state & t:
                out.append((k, state ^ f ^ t))
        return out

    def alive(self, state: int, depth: int | None = None) -> bool:
        depth = self.depth if depth is None else depth
        if self.board.is_solved(state):
            return True
        key = (state, depth)
        hit = self._memo.get(key)
        if hit is not None:
            return hit
        nxt = self.moves(state)
        if not nxt:
            res = False
        elif depth == 0:
            res = True
        else:
            res = any(self.alive(s2, depth - 1) for _, s2 in nxt)
        if len(self._memo) > 2_000_000:
            self._memo.clear()
        self._memo[key] = res
        return res


def _pilot_score_scale(board: BoardSpec, probe: SolvabilityProbe, n_games: int, rng) -> float:
    """Root mean square of state-centred 0/1 probe scores over uniform-play decision states."""
    sq, n = 0.0, 0
    for _ in range(n_games):
        state = board.initial_states[int(rng.integers(len(board.initial_states)))]
        while True:
            moves = probe.moves(state)
            if not moves or board.is_solved(state):
                break
            if len(moves) >= 2:
                sc = np.array([probe.alive(s2) for _, s2 in moves], dtype=float)
                sq += float(((sc - sc.mean()) ** 2).sum())
                n += len(sc)
            state = moves[int(rng.integers(len(moves)))][1]
    rms = math.sqrt(sq / n) if n else 0.0
    return rms if rms > 0 else 1.0


def simulate_large(
    board: BoardSpec,
    betas,
    games_per_person: int,
    seed,
    depth: int = 3,
    pilot_games: int = 200,
) -> Dataset:
    """Softmax play on boards too large to enumerate.

    Each move is scored 1 if the bounded solvability probe finds the
    successor alive, else 0, and the scores are divided by their centred
    root mean square measured on a seeded pilot of uniform-random games.
    Actions are drawn from softmax(beta * score).
    """
    probe = SolvabilityProbe(board, depth)
    root = _seed_sequence(seed)
    pilot_seed, *person_seeds = root.spawn(len(betas) + 1)
    scale = _pilot_score_scale(board, probe, pilot_games, np.random.default_rng(pilot_seed))
    pids = person_ids(len(betas))
    width = max(2, len(str(games_per_person - 1)))
    spec = board.reward
    records = []
    for pid, beta, ss in zip(pids, betas, person_seeds):
        rng = np.random.default_rng(ss)
        for g in range(games_per_person):
            state = board.initial_states[int(rng.integers(len(board.initial_states)))]
            t = 0
            moves = probe.moves(state)
            while moves and not board.is_solved(state):
                sc = np.array([probe.alive(s2) for _, s2 in moves], dtype=float) / scale
                logits = beta * sc
                p = np.exp(logits - logits.max())
                k = min(int(np.searchsorted(np.cumsum(p), rng.random() * p.sum(), side="right")), len(p) - 1)
                action, nxt = moves[k]
                nxt_moves = probe.moves(nxt)
                solved = board.is_solved(nxt)
                reward = spec.solved if solved else (spec.dead if not nxt_moves else spec.step)
                records.append(
                    TrajectoryRecord(pid, f"g{g:0{width}d}", t, state, action, reward, nxt, solved or not nxt_moves)
                )
                state, moves, t = nxt, nxt_moves, t + 1
    return Dataset(
        records=tuple(records),
        board=board.name,
        true_beta={p: float(b) for p, b in zip(pids, betas)},
        meta={"generator": "probe", "games_per_person": games_per_person, "probe_depth": depth, "score_scale": scale},
    )


@dataclass
class MdpmmFit:
    prior: PopulationPrior
    beta_hat: dict[str, float]
    log_marginal: float
    wall_time: float
    evaluations: int
    q_solves: int
    sigma2_floored: bool
    trace: list[tuple[float, float, float]]
    n_nodes: int
    tol: float


class _Likelihood:
    """Quadrature marginal likelihood with per-beta person log-likelihoods cached.

    Only the per-person sums are kept, so the cache grows by one vector of
    length J per distinct beta rather than one value table.
    """

    def __init__(self, data: Dataset, task: EnumeratedTask, grid: QuadratureGrid, tol: float):
        self.task = task
        self.grid = grid
        self.tol = tol
        tab = task.table(TABLE_GUARD)
        arr = data.arrays
        s_idx = task.index(arr["state"])
        edges = np.array(
            [tab.edge(int(i), int(a)) for i, a in zip(s_idx, arr["action"])], dtype=np.int64
        )
        n_persons = len(data.person_ids)
        self.counts = sparse.csr_matrix(
            (np.ones(len(edges)), (arr["person"], edges)), shape=(n_persons, tab.n_edges)
        )
        self.tab = tab
        self.cache: dict[float, np.ndarray] = {}
        self.q_solves = 0
        self.evaluations = 0

    def edge_logp(self, beta: float) -> np.ndarray:
        q = solve_q_for_beta(self.task, beta, tol=self.tol)
        self.q_solves += 1
        return edge_log_probs(self.tab, beta * q.q_edges)

    def person_at(self, beta: float) -> np.ndarray:
        """Log-likelihood of every person at one beta."""
        key = float(beta)
        if key not in self.cache:
            self.cache[key] = self.counts @ self.edge_logp(key)
        return self.cache[key]

    def person_loglik(self, prior: PopulationPrior) -> np.ndarray:
        """(persons x nodes) log-likelihood at the prior's quadrature nodes."""
        lam = self.grid.log_beta_nodes(prior)
        return np.column_stack([self.person_at(math.exp(x)) for x in lam])

    def log_marginal(self, prior: PopulationPrior) -> float:
        self.evaluations += 1
        ll = self.person_loglik(prior)
        return float(logsumexp(ll + np.log(self.grid.weights), axis=1).sum())


def _golden_max(f, lo: float, hi: float, xtol: float) -> tuple[float, float]:
    invphi = (math.sqrt(5) - 1) / 2
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = f(c), f(d)
    while b - a > xtol:
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    x = (a + b) / 2
    return x, f(x)


def fit_mdpmm(
    data: Dataset,
    task: EnumeratedTask,
    grid: QuadratureGrid | None = None,
    init: PopulationPrior | None = None,
    tol: float = 1e-4,
    q_tol: float = 1e-8,
    max_rounds: int = 30,
    sigma2_floor: float = 1e-3,
    mu_halfwidth: float = 3.0,
    log_sigma2_bounds: tuple[float, float] = (math.log(1e-3), math.log(16.0)),
    pattern_reach: float = 4.0,
) -> MdpmmFit:
    """Maximise the quadrature marginal likelihood over (mu, sigma2).

    Coordinate search: golden section on mu, then on log sigma2, then a
    golden-section pattern move along the round's displacement (up to
    ``pattern_reach`` times its length). A step that would lower the marginal
    is rejected, so the marginal never decreases across rounds. Rounds repeat
    until the point moves by no more than ``tol`` or the marginal stops
    changing. Rewards are task structure and stay fixed. Returns EAP
    estimates of beta (on the beta scale) under the fitted prior.
    """
    grid = grid or QuadratureGrid.gauss_hermite()
    prior = init or PopulationPrior()
    t0 = time.perf_counter()
    lik = _Likelihood(data, task, grid, q_tol)
    mu, log_s2 = prior.mu, math.log(prior.sigma2)
    trace = []
    prev_val = -math.inf
    cur = lik.log_marginal(PopulationPrior(mu, math.exp(log_s2)))
    for _ in range(max_rounds):
        # golden section assumes unimodality; never accept a point worse than the current one
        mu_new, val = _golden_max(
            lambda m: lik.log_marginal(PopulationPrior(m, math.exp(log_s2))),
            mu - mu_halfwidth,
            mu + mu_halfwidth,
            tol,
        )
        if val < cur:
            mu_new, val = mu, cur
        s_new, v_s = _golden_max(
            lambda ls: lik.log_marginal(PopulationPrior(mu_new, math.exp(ls))),
            *log_sigma2_bounds,
            tol,
        )
        if v_s >= val:
            val = v_s
        else:
            s_new = log_s2
        # pattern move along this round's displacement follows correlated ridges
        d_mu, d_s = mu_new - mu, s_new - log_s2
        span = max(abs(d_mu), abs(d_s))
        if span > tol:
            lo_s, hi_s = log_sigma2_bounds

            def along(t):
                ls = min(max(s_new + t * d_s, lo_s), hi_s)
                return lik.log_marginal(PopulationPrior(mu_new + t * d_mu, math.exp(ls)))

            t_best, v_best = _golden_max(along, 0.0, pattern_reach, tol / span)
            if v_best > val:
                mu_new = mu_new + t_best * d_mu
                s_new = min(max(s_new + t_best * d_s, lo_s), hi_s)
                val = v_best
        moved = max(abs(mu_new - mu), abs(s_new - log_s2))
        mu, log_s2, cur = mu_new, s_new, val
        trace.append((mu, math.exp(log_s2), val))
        # a flat marginal (uninformative data) settles on the value, not the location
        if moved <= tol or abs(val - prev_val) <= 1e-10 * (1.0 + abs(val)):
            break
        prev_val = val
    else:
        raise ConvergenceError("(mu, sigma2) search did not settle", trace=trace)
    floored = math.exp(log_s2) <= sigma2_floor * (1 + 1e-3)
    sigma2 = max(math.exp(log_s2), sigma2_floor)
    if floored:
        logger.warning("sigma2 at floor %.3g", sigma2_floor)
    fitted = PopulationPrior(mu, sigma2)
    ll = lik.person_loglik(fitted)
    logpost = ll + np.log(grid.weights)
    post = np.exp(logpost - logsumexp(logpost, axis=1, keepdims=True))
    eap = post @ np.exp(grid.log_beta_nodes(fitted))
    return MdpmmFit(
        prior=fitted,
        beta_hat=dict(zip(data.person_ids, eap.tolist())),
        log_marginal=lik.log_marginal(fitted),
        wall_time=time.perf_counter() - t0,
        evaluations=lik.evaluations,
        q_solves=lik.q_solves,
        sigma2_floored=floored,
        trace=trace,
        n_nodes=len(grid.nodes),
        tol=tol,
    )


def simulate_board(board: BoardSpec, betas, games_per_person: int, seed, generator: str | None = None) -> Dataset:
    """Dispatch to the board's default generator (or ``generator`` if given)."""
    generator = generator or board.generator
    if generator == "probe":
        return simulate_large(board, betas, games_per_person, seed)
    task = enumerate_reachable(board, cap=TABLE_GUARD)
    return simulate_trajectories(task, betas, games_per_person, seed, generator=generator)
