"""Influence of individual steps on person estimates, and step-index summaries."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .env import BoardSpec, EnumeratedTask, solution_path_counts
from .estimator import FitResult, StepTable, _step_policy, newton_persons
from .value import AdvantageView

logger = logging.getLogger(__name__)

DEFAULT_BANDS = (0.0, 20.0, 40.0, 60.0, 80.0, 100.0)
INFLUENCE_COLUMNS = ["person_id", "episode_id", "t", "state_bitmask_hex", "action_id", "score", "influence", "chose_optimal"]


class FallbackHessian(ValueError):
    """The person's curvature is not negative, so no influence is defined."""


def _adv_and_pos(adv, chosen):
    if isinstance(adv, AdvantageView):
        return adv.normalized, adv.legal.index(chosen)
    return np.asarray(adv, dtype=float), int(chosen)


def step_score(adv, chosen, beta: float) -> float:
    """beta * (A(chosen) - E_pi[A]).

    ``adv`` is an AdvantageView (``chosen`` a global action id) or an array of
    normalised legal-action advantages (``chosen`` a position in it).
    """
    if not beta > 0:
        raise ValueError("beta must be positive")
    a, k = _adv_and_pos(adv, chosen)
    p = np.exp(beta * (a - a.max()))
    p /= p.sum()
    return float(beta * (a[k] - p @ a))


def step_score_gap(adv, chosen, beta: float) -> float:
    """Same score written with action gaps: beta * (mean policy gap - chosen gap)."""
    a, k = _adv_and_pos(adv, chosen)
    gaps = a.max() - a
    p = np.exp(-beta * gaps)
    p /= p.sum()
    return float(beta * (p @ gaps - gaps[k]))


def step_score_binary(delta: float, beta: float, chose_optimal: bool) -> float:
    """Two-action score with gap ``delta`` between the better and worse action."""
    p_opt = 1.0 / (1.0 + np.exp(-beta * delta))
    return float(beta * (1 - p_opt) * delta) if chose_optimal else float(-beta * p_opt * delta)


def influence(score: float, hessian: float) -> float:
    if not hessian < 0:
        raise FallbackHessian(f"hessian {hessian} is not negative")
    return -score / hessian


@dataclass(frozen=True)
class InfluenceRecord:
    person_id: str
    episode_id: str
    t: int
    state: int
    action: int
    score: float
    influence: float
    chose_optimal: bool

    def row(self) -> list:
        return [self.person_id, self.episode_id, self.t, hex(self.state), self.action,
                repr(self.score), repr(self.influence), int(self.chose_optimal)]


@dataclass
class InfluenceReport:
    records: list[InfluenceRecord]
    excluded_persons: list[str]

    def write(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(INFLUENCE_COLUMNS)
            for r in self.records:
                w.writerow(r.row())


def step_scores(fit: FitResult, table: StepTable) -> tuple[np.ndarray, np.ndarray]:
    """Per-transition scores at the fitted estimates and argmax-choice flags."""
    adv = table.advantages(fit.theta, fit.scale)[table.s]
    mask = table.mask[table.s]
    z = fit.z_hat()
    beta = np.exp(z)[table.person]
    _, pi = _step_policy(adv, mask, beta)
    rows = np.arange(len(table))
    score = beta * (adv[rows, table.action] - (pi * adv).sum(axis=1))
    best = np.where(mask, adv, -np.inf).max(axis=1)
    chose_opt = adv[rows, table.action] >= best
    return score, chose_opt


def compute_influence(fit: FitResult, data: Dataset, board: BoardSpec) -> InfluenceReport:
    """Influence of each observed step on its person's log-beta estimate.

    Persons whose Hessian at the estimate is not negative are excluded and
    listed in ``excluded_persons``.
    """
    table = StepTable(data, board)
    if [p.person_id for p in fit.persons] != table.person_ids:
        raise ValueError("fit and dataset persons differ")
    score, chose_opt = step_scores(fit, table)
    hess = np.array([p.hessian for p in fit.persons])
    excluded = [p.person_id for p in fit.persons if p.fallback]
    recs = []
    for i, r in enumerate(data.records):
        h = hess[table.person[i]]
        if not h < 0:
            continue
        recs.append(InfluenceRecord(r.person_id, r.episode_id, r.t, r.state, r.action,
                                    float(score[i]), float(-score[i] / h), bool(chose_opt[i])))
    if excluded:
        logger.warning("%d persons excluded from influence (non-negative hessian)", len(excluded))
    return InfluenceReport(recs, excluded)


def rank_critical_steps(records, k: int | None = None, percentile: float | None = None) -> list[InfluenceRecord]:
    """Records by descending |influence|; keep the top ``k`` or the top ``percentile`` percent."""
    if not records:
        raise ValueError("no records")
    if (k is None) == (percentile is None):
        raise ValueError("give exactly one of k or percentile")
    ordered = sorted(records, key=lambda r: (-abs(r.influence), r.person_id, r.episode_id, r.t))
    if k is not None:
        return ordered[:k]
    if not 0 < percentile <= 100:
        raise ValueError("percentile must lie in (0, 100]")
    n = int(np.ceil(len(ordered) * percentile / 100.0))
    return ordered[:n]


@dataclass(frozen=True)
class StepAggregate:
    band: str
    step: int
    mean_abs_influence: float
    n: int


def assign_bands(beta_hat: dict[str, float], edges=DEFAULT_BANDS) -> dict[str, int]:
    """Band index per person from beta-hat percentiles; the top band is closed."""
    edges = np.asarray(edges, dtype=float)
    if edges[0] != 0 or edges[-1] != 100 or np.any(np.diff(edges) <= 0):
        raise ValueError("band edges must increase from 0 to 100")
    ids = sorted(beta_hat)
    vals = np.array([beta_hat[p] for p in ids])
    cuts = np.percentile(vals, edges[1:-1])
    band = np.searchsorted(cuts, vals, side="right")
    return dict(zip(ids, band.tolist()))


def _labelled_groups(beta_hat, edges):
    groups: dict[str, set] = {}
    quint = assign_bands(beta_hat, edges)
    for p, b in quint.items():
        groups.setdefault(f"p{edges[b]:g}-{edges[b + 1]:g}", set()).add(p)
    ext = assign_bands(beta_hat, (0.0, 10.0, 90.0, 100.0))
    for p, b in ext.items():
        groups.setdefault(("lowest10", "rest", "highest10")[b], set()).add(p)
    groups["all"] = set(beta_hat)
    labels = [f"p{edges[i]:g}-{edges[i + 1]:g}" for i in range(len(edges) - 1)]
    labels += ["lowest10", "rest", "highest10", "all"]
    return [(lab, groups.get(lab, set())) for lab in labels]


def aggregate_by_step(records, beta_hat: dict[str, float], edges=DEFAULT_BANDS) -> list[StepAggregate]:
    """Mean |influence| per (band, step index).

    Bands are the percentile bands given by ``edges`` plus lowest 10%,
    middle 80% ("rest"), highest 10% and "all". Empty cells give zero-count rows.
    """
    max_t = max((r.t for r in records), default=-1)
    out = []
    for label, members in _labelled_groups(beta_hat, edges):
        sums = np.zeros(max_t + 1)
        counts = np.zeros(max_t + 1, dtype=int)
        for r in records:
            if r.person_id in members:
                sums[r.t] += abs(r.influence)
                counts[r.t] += 1
        for t in range(max_t + 1):
            mean = sums[t] / counts[t] if counts[t] else 0.0
            out.append(StepAggregate(label, t, float(mean), int(counts[t])))
    return out


def write_aggregates(aggs, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["band", "step", "mean_abs_influence", "n"])
        for a in aggs:
            w.writerow([a.band, a.step, repr(a.mean_abs_influence), a.n])


def solution_collapse_profile(task: EnumeratedTask, data: Dataset) -> list[tuple[int, float, int]]:
    """(t, mean N(s_t), n) over trajectories, N the number of solution paths from s_t."""
    counts = solution_path_counts(task)
    by_t: dict[int, list[int]] = {}
    for r in data.records:
        by_t.setdefault(r.t, []).append(int(counts[task.index(r.state)]))
    return [(t, float(np.mean([float(v) for v in vals])), len(vals)) for t, vals in sorted(by_t.items())]


def write_collapse_profile(profile, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "mean_solution_paths", "n"])
        for t, m, n in profile:
            w.writerow([t, repr(m), n])


def epsilon_refit(fit: FitResult, data: Dataset, board: BoardSpec, person_id: str, eps: float = 1e-3,
                  table: StepTable | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Finite-difference influence by re-maximising with one step up-weighted by ``eps``.

    Returns (analytic influence, (z(eps) - z)/eps) for every step of the person,
    holding the value network and prior fixed.
    """
    table = table or StepTable(data, board)
    j = table.person_ids.index(person_id)
    est = fit.persons[j]
    if est.fallback:
        raise FallbackHessian(f"person {person_id} has non-negative hessian")
    rows = np.flatnonzero(table.person == j)
    adv = table.advantages(fit.theta, fit.scale)[table.s[rows]]
    mask = table.mask[table.s[rows]]
    chosen = table.action[rows]
    person = np.zeros(len(rows), dtype=np.int64)
    score, _ = step_scores(fit, table)
    analytic = -score[rows] / est.hessian
    z0 = np.array([est.z_hat])
    base, _, _ = newton_persons(z0, adv, mask, chosen, person, 1, fit.prior, 100, step_tol=1e-15)
    fd = np.empty(len(rows))
    for i in range(len(rows)):
        w = np.ones(len(rows))
        w[i] += eps
        zi, _, _ = newton_persons(base, adv, mask, chosen, person, 1, fit.prior, 100, weights=w, step_tol=1e-15)
        fd[i] = (zi[0] - base[0]) / eps
    return analytic, fd


__all__ = [
    "FallbackHessian", "InfluenceRecord", "InfluenceReport", "StepAggregate",
    "step_score", "step_score_gap", "step_score_binary", "influence", "compute_influence",
    "rank_critical_steps", "assign_bands", "aggregate_by_step", "write_aggregates",
    "solution_collapse_profile", "write_collapse_profile", "epsilon_refit", "step_scores",
]
