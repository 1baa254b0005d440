"""Penalised MAP estimation: person Newton updates alternating with SGD on the value network."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .data import Dataset
from .env import BoardSpec, feature_dim, features
from .tabular import PopulationPrior
from .value import QParams, centered, masked_log_softmax, masked_mean, soft_values

logger = logging.getLogger(__name__)

_Z_STEP_CAP = 10.0
_MAX_HALVINGS = 20


@dataclass
class FitConfig:
    lambda_bell: float = 1.0
    tau: float = 1.0
    eta: float = 1e-2
    batch_size: int = 256
    m_sgd: int = 50
    m_nr: int = 5
    k_outer: int = 20
    seed: int = 0
    eps_scale: float = 1e-8
    sigma2_floor: float = 1e-3
    prior_mu: float = 0.0
    prior_sigma2: float = 0.25
    estimate_prior: bool = True
    model: str = "two-layer"
    hidden: int = 64
    rel_tol: float | None = None
    nll_reduction: str = "sum"

    def __post_init__(self):
        for name in ("tau", "sigma2_floor", "prior_sigma2"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("batch_size", "m_nr", "k_outer"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        if min(self.m_sgd, self.lambda_bell, self.eps_scale, self.eta) < 0:
            raise ValueError("m_sgd, lambda_bell, eps_scale and eta must be non-negative")

    @property
    def prior_init(self) -> PopulationPrior:
        return PopulationPrior(self.prior_mu, self.prior_sigma2)

    @classmethod
    def from_dict(cls, d: dict) -> FitConfig:
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown config keys {sorted(extra)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class PersonEstimate:
    person_id: str
    z_hat: float
    beta_hat: float
    hessian: float
    logpost_at_mode: float

    @property
    def fallback(self) -> bool:
        return not self.hessian < 0


@dataclass
class FitResult:
    theta: QParams
    persons: list[PersonEstimate]
    prior: PopulationPrior
    nll: list[float] = field(default_factory=list)
    bellman: list[float] = field(default_factory=list)
    objective: list[float] = field(default_factory=list)
    time_person: list[float] = field(default_factory=list)
    time_value: list[float] = field(default_factory=list)
    scale: float = 1.0
    wall_time: float = 0.0

    def beta_hat(self) -> dict[str, float]:
        return {p.person_id: p.beta_hat for p in self.persons}

    def z_hat(self) -> np.ndarray:
        return np.array([p.z_hat for p in self.persons])

    def write(self, outdir, timings: bool = True) -> dict[str, Path]:
        """Checkpoint, persons CSV, traces CSV and fit.json under ``outdir``.

        With ``timings=False`` the wall-time columns are left blank so that
        repeated runs give byte-identical files.
        """
        out = Path(outdir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {
            "checkpoint": out / "theta.ckpt",
            "persons": out / "persons.csv",
            "traces": out / "traces.csv",
            "fit": out / "fit.json",
        }
        self.theta.save(paths["checkpoint"])
        with open(paths["persons"], "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["person_id", "z_hat", "beta_hat", "hessian", "fallback_flag"])
            for p in self.persons:
                w.writerow([p.person_id, repr(p.z_hat), repr(p.beta_hat), repr(p.hessian), int(p.fallback)])
        with open(paths["traces"], "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iter", "nll", "bellman", "objective", "wall_time_person_stage", "wall_time_value_stage"])
            for k in range(len(self.objective)):
                tp, tv = (f"{self.time_person[k]:.6f}", f"{self.time_value[k]:.6f}") if timings else ("", "")
                w.writerow([k, repr(self.nll[k]), repr(self.bellman[k]), repr(self.objective[k]), tp, tv])
        meta = {
            "prior": {"mu": self.prior.mu, "sigma2": self.prior.sigma2},
            "scale": self.scale,
            "logpost": {p.person_id: p.logpost_at_mode for p in self.persons},
        }
        paths["fit"].write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n")
        return paths

    @classmethod
    def read(cls, outdir) -> FitResult:
        out = Path(outdir)
        meta = json.loads((out / "fit.json").read_text())
        theta = QParams.load(out / "theta.ckpt")
        persons = []
        with open(out / "persons.csv", newline="") as fh:
            for row in csv.DictReader(fh):
                pid = row["person_id"]
                persons.append(
                    PersonEstimate(pid, float(row["z_hat"]), float(row["beta_hat"]), float(row["hessian"]),
                                   float(meta["logpost"].get(pid, math.nan)))
                )
        res = cls(theta=theta, persons=persons, prior=PopulationPrior(**meta["prior"]), scale=meta["scale"])
        with open(out / "traces.csv", newline="") as fh:
            for row in csv.DictReader(fh):
                res.nll.append(float(row["nll"]))
                res.bellman.append(float(row["bellman"]))
                res.objective.append(float(row["objective"]))
                res.time_person.append(float(row["wall_time_person_stage"] or "nan"))
                res.time_value.append(float(row["wall_time_value_stage"] or "nan"))
        return res


class StepTable:
    """Dataset transitions indexed against the distinct states they touch.

    Features and legal-action masks are computed once per distinct state;
    ``s`` and ``s_next`` index rows of ``phi`` and ``mask``. Columns of
    ``mask`` and the values in ``action`` refer to the value network's heads,
    one per global action legal somewhere in the data (``action_ids``).
    """

    def __init__(self, data: Dataset, board: BoardSpec, gamma: float | None = None):
        if not len(data):
            raise ValueError("empty dataset")
        arr = data.arrays
        self.board = board
        self.gamma = board.discount if gamma is None else gamma
        self.person_ids = data.person_ids
        self.person = arr["person"]
        self.episode = arr["episode"]
        self.t = arr["t"]
        self.action = arr["action"]
        self.reward = arr["reward"]
        self.states, inv = np.unique(np.concatenate([arr["state"], arr["next_state"]]), return_inverse=True)
        n = len(arr["state"])
        self.s, self.s_next = inv[:n], inv[n:]
        self.phi = features(board, self.states)
        src, dst = board.jump_masks
        st = self.states[:, None]
        self.mask = ((st & src) == src) & ((st & dst) == 0)
        solved = np.array([board.is_solved(int(x)) for x in self.states])
        self.mask[solved] = False
        # terminal successors contribute no continuation value
        self.next_live = ~arr["terminal"] & self.mask[self.s_next].any(axis=1)
        if not np.all(self.mask[self.s, self.action]):
            bad = int(np.flatnonzero(~self.mask[self.s, self.action])[0])
            raise ValueError(f"record {bad}: action {self.action[bad]} illegal at its state")
        self.action_ids = np.flatnonzero(self.mask.any(axis=0))
        head = np.full(board.n_actions, -1, dtype=np.int64)
        head[self.action_ids] = np.arange(len(self.action_ids))
        self.mask = np.ascontiguousarray(self.mask[:, self.action_ids])
        self.action = head[self.action]

    def __len__(self) -> int:
        return len(self.s)

    @property
    def n_persons(self) -> int:
        return len(self.person_ids)

    @property
    def n_actions(self) -> int:
        return len(self.action_ids)

    @property
    def feature_dim(self) -> int:
        return feature_dim(self.board)

    def q_all(self, theta: QParams) -> np.ndarray:
        return theta.forward(self.phi)[0]

    def scale(self, theta: QParams, eps: float, q=None) -> float:
        """Global advantage scale over the observed (state, chosen action) pairs."""
        cen = centered(self.q_all(theta) if q is None else q, self.mask)
        return float(np.sqrt(np.mean(cen[self.s, self.action] ** 2) + eps))

    def advantages(self, theta: QParams, scale: float, q=None) -> np.ndarray:
        """Normalised advantages per distinct state (zero off the legal set)."""
        return centered(self.q_all(theta) if q is None else q, self.mask) / scale

    @cached_property
    def stage(self) -> PersonStage:
        return PersonStage(self)


def _step_policy(adv_steps, mask_steps, beta_steps):
    logp = masked_log_softmax(beta_steps[:, None] * adv_steps, mask_steps)
    return logp, np.where(mask_steps, np.exp(logp), 0.0)


def behavioral_nll(theta: QParams, z, table: StepTable, scale: float, q=None) -> float:
    """Negative log-likelihood of all observed actions at the given scale."""
    st = table.stage
    adv = st.gather(table.advantages(theta, scale, q))
    beta = np.exp(np.asarray(z)[st.person])
    logp, _ = _step_policy(adv, st.legal_ok, beta)
    return float(-(st.weights * logp[np.arange(len(st.chosen)), st.chosen]).sum())


def bellman_residuals(theta: QParams, table: StepTable, tau: float, q=None) -> np.ndarray:
    q = table.q_all(theta) if q is None else q
    v = soft_values(q, table.mask, tau)
    v_next = np.where(table.next_live, v[table.s_next], 0.0)
    return q[table.s, table.action] - (table.reward + table.gamma * v_next)


def bellman_loss_value(theta: QParams, table: StepTable, tau: float, q=None) -> float:
    return float(np.mean(bellman_residuals(theta, table, tau, q) ** 2))


def prior_penalty(z, prior: PopulationPrior) -> float:
    z = np.asarray(z, dtype=float)
    return float(np.sum((z - prior.mu) ** 2) / (2 * prior.sigma2))


def penalized_objective(theta, z, table: StepTable, cfg: FitConfig, prior: PopulationPrior, scale=None) -> float:
    """NLL + lambda_bell * mean squared Bellman residual + log-normal prior penalty."""
    scale = table.scale(theta, cfg.eps_scale) if scale is None else scale
    return (
        behavioral_nll(theta, z, table, scale)
        + cfg.lambda_bell * bellman_loss_value(theta, table, cfg.tau)
        + prior_penalty(z, prior)
    )


# person updates


def person_terms(z, adv_steps, mask_steps, chosen, person, n_persons, prior, need_derivs=True, weights=None):
    """Per-person log-posterior, gradient and Hessian in z = log beta.

    ``adv_steps`` holds the normalised advantages of each step's state;
    ``weights`` optionally counts repeated (person, state, action) rows.
    """
    z = np.asarray(z, dtype=float)
    w = np.ones(len(chosen)) if weights is None else weights
    beta = np.exp(z)[person]
    logp, pi = _step_policy(adv_steps, mask_steps, beta)
    rows = np.arange(len(chosen))
    ll = np.bincount(person, weights=w * logp[rows, chosen], minlength=n_persons)
    ll -= (z - prior.mu) ** 2 / (2 * prior.sigma2)
    if not need_derivs:
        return ll, None, None
    mean_a = (pi * adv_steps).sum(axis=1)
    var_a = (pi * adv_steps**2).sum(axis=1) - mean_a**2
    score = beta * (adv_steps[rows, chosen] - mean_a)
    g = np.bincount(person, weights=w * score, minlength=n_persons) - (z - prior.mu) / prior.sigma2
    h = np.bincount(person, weights=w * (score - beta**2 * var_a), minlength=n_persons) - 1.0 / prior.sigma2
    return ll, g, h


def person_logpost(z: float, adv_rows, chosen, prior: PopulationPrior, legal_mask=None):
    """Value, gradient and Hessian of one person's log-posterior at scalar z.

    ``adv_rows`` are the normalised advantages of the person's visited states
    (one row per step, padded entries masked out by ``legal_mask``).
    """
    adv_rows = np.atleast_2d(np.asarray(adv_rows, dtype=float))
    mask = np.ones_like(adv_rows, dtype=bool) if legal_mask is None else np.asarray(legal_mask, dtype=bool)
    person = np.zeros(len(adv_rows), dtype=np.int64)
    ll, g, h = person_terms(np.array([z]), np.where(mask, adv_rows, 0.0), mask, np.asarray(chosen), person, 1, prior)
    return float(ll[0]), float(g[0]), float(h[0])


def newton_persons(z0, adv_steps, mask_steps, chosen, person, n_persons, prior, m_nr, weights=None, step_tol=1e-12):
    """Damped Newton on every person at once; returns (z, logpost, hessian).

    A step is halved (up to 20 times) until the log-posterior does not
    decrease. Where the Hessian is not negative, a gradient-ascent step is
    used instead. Persons whose step falls below ``step_tol`` are left alone.
    """
    z = np.array(z0, dtype=float)
    args = (adv_steps, mask_steps, chosen, person, n_persons, prior)
    for _ in range(m_nr):
        ll, g, h = person_terms(z, *args, weights=weights)
        step = np.where(h < 0, -g / np.where(h < 0, h, -1.0), g)
        step = np.clip(step, -_Z_STEP_CAP, _Z_STEP_CAP)
        pending = np.abs(step) > step_tol
        if not pending.any():
            break
        t = 1.0
        for _ in range(_MAX_HALVINGS + 1):
            trial = np.where(pending, z + t * step, z)
            ll_new, _, _ = person_terms(trial, *args, need_derivs=False, weights=weights)
            # rounding slack so that converged persons are not stuck halving
            ok = pending & (ll_new >= ll - 1e-12 * np.abs(ll))
            z = np.where(ok, trial, z)
            pending &= ~ok
            if not pending.any():
                break
            t *= 0.5
    ll, _, h = person_terms(z, *args, weights=weights)
    return z, ll, h


def newton_update_person(z0: float, adv_rows, chosen, prior: PopulationPrior, m_nr: int, legal_mask=None):
    """Single-person wrapper around ``newton_persons``; returns (z, logpost, hessian)."""
    adv_rows = np.atleast_2d(np.asarray(adv_rows, dtype=float))
    mask = np.ones_like(adv_rows, dtype=bool) if legal_mask is None else np.asarray(legal_mask, dtype=bool)
    person = np.zeros(len(adv_rows), dtype=np.int64)
    z, ll, h = newton_persons(
        np.array([z0]), np.where(mask, adv_rows, 0.0), mask, np.asarray(chosen), person, 1, prior, m_nr
    )
    return float(z[0]), float(ll[0]), float(h[0])


def update_population(z, sigma2_floor: float, current: PopulationPrior | None = None) -> PopulationPrior:
    """Moment update: mean of z and population variance (ddof=0), floored."""
    z = np.asarray(z, dtype=float)
    if len(z) < 2:
        logger.warning("fewer than two persons; prior left unchanged")
        return current or PopulationPrior()
    return PopulationPrior(float(z.mean()), max(float(z.var()), sigma2_floor))


class PersonStage:
    """Person-update machinery bound to a StepTable.

    Repeated (person, state, action) steps are collapsed into weighted rows,
    forced moves are dropped, and each row keeps only its state's legal
    actions (padded to the widest).
    """

    def __init__(self, table: StepTable):
        self.table = table
        # steps with a single legal action carry no information about beta
        informative = table.mask[table.s].sum(axis=1) >= 2
        keys = np.stack([table.person, table.s, table.action], axis=1)[informative]
        uniq, counts = np.unique(keys.reshape(-1, 3), axis=0, return_counts=True)
        self.person, self.s, action = uniq.T.astype(np.int64)
        self.weights = counts.astype(float)
        width = max(int(table.mask.sum(axis=1).max()), 2)
        order = np.argsort(~table.mask, axis=1, kind="stable")[:, :width]
        self.legal = order[self.s]
        self.legal_ok = np.take_along_axis(table.mask[self.s], self.legal, axis=1)
        self.chosen = np.argmax(self.legal == action[:, None], axis=1)

    def gather(self, adv_u: np.ndarray) -> np.ndarray:
        return np.take_along_axis(adv_u[self.s], self.legal, axis=1)

    def run(self, theta, scale, z0, prior, m_nr):
        tb = self.table
        adv = self.gather(tb.advantages(theta, scale))
        return newton_persons(
            z0, adv, self.legal_ok, self.chosen, self.person, tb.n_persons, prior, m_nr, weights=self.weights
        )


# value-function updates


def batch_gradient(theta: QParams, z, table: StepTable, idx, scale: float, lambda_bell: float, tau: float,
                   nll_reduction: str = "sum"):
    """Gradient of the batch NLL plus lambda_bell * mean squared residual over batch ``idx``.

    The NLL is summed over the batch, or averaged with ``nll_reduction="mean"``.

    The advantage scale is held fixed.
    """
    n = len(idx)
    s, s2, a = table.s[idx], table.s_next[idx], table.action[idx]
    phi = np.vstack([table.phi[s], table.phi[s2]])
    q_all, cache = theta.forward(phi)
    q, q2 = q_all[:n], q_all[n:]
    m, m2 = table.mask[s], table.mask[s2]
    beta = np.exp(np.asarray(z)[table.person[idx]])
    adv = centered(q, m) / scale
    logp, pi = _step_policy(adv, m, beta)
    rows = np.arange(n)
    onehot = np.zeros_like(q)
    onehot[rows, a] = 1.0
    nll_w = 1.0 / n if nll_reduction == "mean" else 1.0
    d_adv = -(beta[:, None] * (onehot - pi)) * m * nll_w
    dq = (d_adv - masked_mean(d_adv, m)[:, None]) * m / scale
    dq2 = np.zeros_like(q2)
    live = table.next_live[idx]
    v2 = np.where(live, soft_values(q2, m2, tau), 0.0)
    delta = q[rows, a] - (table.reward[idx] + table.gamma * v2)
    d_delta = 2.0 * lambda_bell * delta / n
    dq[rows, a] += d_delta
    soft_pi = np.exp(masked_log_softmax(q2 / tau, m2))
    soft_pi = np.where(m2 & live[:, None], soft_pi, 0.0)
    dq2 -= (d_delta * table.gamma)[:, None] * soft_pi
    grad = theta.backward(cache, np.vstack([dq, dq2]))
    loss = float(-logp[rows, a].sum() * nll_w + lambda_bell * np.mean(delta**2))
    return grad, loss


class NonFiniteGradient(FloatingPointError):
    pass


class BatchSampler:
    """Mini-batches without replacement within an epoch, from a seeded shuffle."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        if batch_size > n:
            raise ValueError(f"batch size {batch_size} exceeds dataset size {n}")
        self.n, self.b, self.rng = n, batch_size, rng
        self.perm = rng.permutation(n)
        self.pos = 0

    def next(self) -> np.ndarray:
        if self.pos + self.b > self.n:
            self.perm = self.rng.permutation(self.n)
            self.pos = 0
        idx = self.perm[self.pos : self.pos + self.b]
        self.pos += self.b
        return idx


def sgd_value_update(theta: QParams, z, table: StepTable, cfg: FitConfig, scale: float, sampler: BatchSampler) -> QParams:
    """``cfg.m_sgd`` plain gradient steps on the value parameters."""
    flat = theta.flat.copy()
    current = theta
    for step in range(cfg.m_sgd):
        idx = sampler.next()
        grad, _ = batch_gradient(current, z, table, idx, scale, cfg.lambda_bell, cfg.tau, cfg.nll_reduction)
        if not np.all(np.isfinite(grad)):
            raise NonFiniteGradient(f"non-finite gradient at SGD step {step}, batch rows {idx[:8].tolist()}...")
        flat = flat - cfg.eta * grad
        current = theta.with_flat(flat)
    return current


def fit(data: Dataset, board: BoardSpec, cfg: FitConfig | None = None, theta0: QParams | None = None) -> FitResult:
    """Block-coordinate MAP estimation.

    Each outer iteration recomputes the advantage scale, runs Newton updates
    for every person, refreshes the population prior (when
    ``cfg.estimate_prior``), then takes ``cfg.m_sgd`` SGD steps on the value
    network. A closing person pass at the final parameters makes the returned
    estimates modes of the returned model. The batch size is clipped to the
    number of transitions.
    """
    cfg = cfg or FitConfig()
    t_start = time.perf_counter()
    table = StepTable(data, board)
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(2)[1])
    heads = tuple(int(a) for a in table.action_ids)
    if theta0 is not None and theta0.action_ids is not None and tuple(theta0.action_ids) != heads:
        raise ValueError("initial parameters were built for a different action set")
    theta = theta0 or QParams.init(
        cfg.model, table.feature_dim, table.n_actions, cfg.hidden, seed=cfg.seed, action_ids=heads
    )
    prior = cfg.prior_init
    z = np.full(table.n_persons, prior.mu)
    stage = table.stage
    sampler = BatchSampler(len(table), min(cfg.batch_size, len(table)), rng)
    result = FitResult(theta=theta, persons=[], prior=prior)
    for k in range(cfg.k_outer):
        t0 = time.perf_counter()
        scale = table.scale(theta, cfg.eps_scale)
        z, _, _ = stage.run(theta, scale, z, prior, cfg.m_nr)
        if cfg.estimate_prior:
            prior = update_population(z, cfg.sigma2_floor, prior)
        t1 = time.perf_counter()
        theta = sgd_value_update(theta, z, table, cfg, scale, sampler)
        t2 = time.perf_counter()
        q = table.q_all(theta)
        nll = behavioral_nll(theta, z, table, table.scale(theta, cfg.eps_scale, q), q)
        bell = bellman_loss_value(theta, table, cfg.tau, q)
        obj = nll + cfg.lambda_bell * bell + prior_penalty(z, prior)
        if not math.isfinite(obj):
            raise FloatingPointError(f"objective not finite at outer iteration {k}")
        result.nll.append(nll)
        result.bellman.append(bell)
        result.objective.append(obj)
        result.time_person.append(t1 - t0)
        result.time_value.append(t2 - t1)
        logger.info("iter %d: nll=%.4f bell=%.5f J=%.4f", k, nll, bell, obj)
        if cfg.rel_tol is not None and k > 0:
            prev = result.objective[-2]
            if abs(prev - obj) <= cfg.rel_tol * abs(prev):
                break
    scale = table.scale(theta, cfg.eps_scale)
    z, ll, h = stage.run(theta, scale, z, prior, max(cfg.m_nr, 50))
    result.theta = theta
    result.prior = prior
    result.scale = scale
    result.persons = [
        PersonEstimate(pid, float(z[j]), float(math.exp(z[j])), float(h[j]), float(ll[j]))
        for j, pid in enumerate(table.person_ids)
    ]
    result.wall_time = time.perf_counter() - t_start
    return result
