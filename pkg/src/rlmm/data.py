"""Trajectory datasets: line-delimited JSON storage, filters and recovery metrics."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from functools import cached_property
from itertools import groupby
from pathlib import Path

import numpy as np
from scipy import stats

logger = logging.getLogger(__name__)

SCHEMA = "rlmm-trajectories/1"
DEFAULT_TAIL_CAP = 200


class SchemaError(ValueError):
    pass


@dataclass(frozen=True)
class TrajectoryRecord:
    person_id: str
    episode_id: str
    t: int
    state: int
    action: int
    reward: float
    next_state: int
    terminal: bool

    def to_json(self) -> str:
        d = asdict(self)
        d["state"] = hex(self.state)
        d["next_state"] = hex(self.next_state)
        return json.dumps(d, separators=(",", ":"))

    @property
    def key(self) -> tuple[str, str, int]:
        return (self.person_id, self.episode_id, self.t)


_FIELDS = {
    "person_id": str,
    "episode_id": str,
    "t": int,
    "state": str,
    "action": int,
    "reward": (int, float),
    "next_state": str,
    "terminal": bool,
}


def _parse_record(obj) -> TrajectoryRecord:
    if not isinstance(obj, dict):
        raise SchemaError("record is not an object")
    missing = [k for k in _FIELDS if k not in obj]
    if missing:
        raise SchemaError(f"missing fields {missing}")
    for k, typ in _FIELDS.items():
        v = obj[k]
        if isinstance(v, bool) and typ is not bool:
            raise SchemaError(f"field {k!r} has wrong type")
        if not isinstance(v, typ):
            raise SchemaError(f"field {k!r} has wrong type")
    try:
        state = int(obj["state"], 16)
        next_state = int(obj["next_state"], 16)
    except ValueError:
        raise SchemaError("state fields must be hex strings") from None
    return TrajectoryRecord(
        person_id=obj["person_id"],
        episode_id=obj["episode_id"],
        t=obj["t"],
        state=state,
        action=obj["action"],
        reward=float(obj["reward"]),
        next_state=next_state,
        terminal=obj["terminal"],
    )


@dataclass(frozen=True)
class Dataset:
    """Person-grouped transitions, kept in canonical (person, episode, t) order."""

    records: tuple[TrajectoryRecord, ...] = ()
    board: str | None = None
    true_beta: dict[str, float] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        recs = tuple(sorted(self.records, key=lambda r: r.key))
        object.__setattr__(self, "records", recs)
        _validate(recs)

    def __len__(self) -> int:
        return len(self.records)

    @cached_property
    def person_ids(self) -> list[str]:
        return sorted({r.person_id for r in self.records})

    @cached_property
    def episodes(self) -> list[list[TrajectoryRecord]]:
        return [list(g) for _, g in groupby(self.records, key=lambda r: (r.person_id, r.episode_id))]

    def by_person(self) -> dict[str, list[TrajectoryRecord]]:
        return {p: list(g) for p, g in groupby(self.records, key=lambda r: r.person_id)}

    @cached_property
    def arrays(self) -> dict[str, np.ndarray]:
        """Column view used by the estimators; ``person`` indexes ``person_ids``."""
        pidx = {p: i for i, p in enumerate(self.person_ids)}
        recs = self.records
        ep = np.zeros(len(recs), dtype=np.int64)
        for i in range(1, len(recs)):
            same = (recs[i].person_id, recs[i].episode_id) == (recs[i - 1].person_id, recs[i - 1].episode_id)
            ep[i] = ep[i - 1] + (0 if same else 1)
        return {
            "person": np.array([pidx[r.person_id] for r in recs], dtype=np.int64),
            "episode": ep,
            "t": np.array([r.t for r in recs], dtype=np.int64),
            "state": np.array([r.state for r in recs], dtype=np.uint64),
            "action": np.array([r.action for r in recs], dtype=np.int64),
            "reward": np.array([r.reward for r in recs], dtype=float),
            "next_state": np.array([r.next_state for r in recs], dtype=np.uint64),
            "terminal": np.array([r.terminal for r in recs], dtype=bool),
        }

    def header(self) -> dict:
        head = {"schema": SCHEMA, "board": self.board}
        if self.true_beta:
            head["true_beta"] = {k: self.true_beta[k] for k in sorted(self.true_beta)}
        if self.meta:
            head["meta"] = self.meta
        return head

    def canonical_text(self) -> str:
        lines = [json.dumps(self.header(), sort_keys=True, separators=(",", ":"))]
        lines += [r.to_json() for r in self.records]
        return "\n".join(lines) + "\n"

    def fingerprint(self) -> str:
        return hashlib.sha256(self.canonical_text().encode()).hexdigest()[:16]

    def with_records(self, records, **meta) -> Dataset:
        return replace(self, records=tuple(records), meta={**self.meta, **meta})

    def episode_returns(self) -> dict[tuple[str, str], float]:
        return {(ep[0].person_id, ep[0].episode_id): sum(r.reward for r in ep) for ep in self.episodes}

    def person_returns(self) -> dict[str, float]:
        """Mean episode return per person."""
        out: dict[str, list[float]] = {}
        for (p, _), v in self.episode_returns().items():
            out.setdefault(p, []).append(v)
        return {p: float(np.mean(v)) for p, v in out.items()}


def _validate(recs) -> None:
    seen = set()
    for ep_key, grp in groupby(recs, key=lambda r: (r.person_id, r.episode_id)):
        grp = list(grp)
        for i, r in enumerate(grp):
            if r.key in seen:
                raise SchemaError(f"duplicate record {r.key}")
            seen.add(r.key)
            if r.t != i:
                raise SchemaError(f"episode {ep_key}: step indices not contiguous from 0")
            if r.terminal and i != len(grp) - 1:
                raise SchemaError(f"episode {ep_key}: terminal flag before the last step")


def save(data: Dataset, path: str | Path) -> None:
    Path(path).write_text(data.canonical_text())


def load(path: str | Path) -> Dataset:
    """Read a dataset file; reports up to 10 offending lines on schema errors."""
    text = Path(path).read_text()
    lines = text.splitlines()
    if not lines or not any(ln.strip() for ln in lines):
        return Dataset()
    errors = []
    try:
        head = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise SchemaError(f"line 1: bad header: {exc}") from None
    if not isinstance(head, dict) or head.get("schema") != SCHEMA:
        raise SchemaError(f"line 1: expected header with schema {SCHEMA!r}")
    records = []
    for n, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            records.append(_parse_record(json.loads(line)))
        except (json.JSONDecodeError, SchemaError) as exc:
            errors.append(f"line {n}: {exc}")
    if errors:
        raise SchemaError("malformed records:\n" + "\n".join(errors[:10]))
    return Dataset(
        records=tuple(records),
        board=head.get("board"),
        true_beta={k: float(v) for k, v in head.get("true_beta", {}).items()},
        meta=head.get("meta", {}),
    )


def _reindex(episode: list[TrajectoryRecord]) -> list[TrajectoryRecord]:
    last = len(episode) - 1
    return [replace(r, t=i, terminal=episode[-1].terminal and i == last) for i, r in enumerate(episode)]


def filter_steps(data: Dataset, delta_min: float) -> Dataset:
    """Keep steps whose cumulative-reward change is at least ``delta_min`` in size.

    The first and last step of each episode always survive. The change at
    step t is the reward recorded at t, computed from the record stream.
    """
    kept = []
    dropped = 0
    for ep in data.episodes:
        last = len(ep) - 1
        cum = np.cumsum([r.reward for r in ep])
        prev = np.concatenate([[0.0], cum[:-1]])
        keep = [i for i in range(len(ep)) if i in (0, last) or abs(cum[i] - prev[i]) >= delta_min]
        dropped += len(ep) - len(keep)
        kept.extend(_reindex([ep[i] for i in keep]))
    return data.with_records(kept, filter_steps={"delta_min": delta_min, "kept": len(kept), "dropped": dropped})


def filter_episodes(
    data: Dataset, min_len: int = 0, tail_fraction: float = 1.0, long_cap: int = DEFAULT_TAIL_CAP
) -> Dataset:
    """Drop episodes shorter than ``min_len``; trim long episodes to their tail.

    Episodes longer than ``long_cap`` keep their last ceil(tail_fraction * n)
    steps.
    """
    if not 0.0 < tail_fraction <= 1.0:
        raise ValueError("tail_fraction must lie in (0, 1]")
    kept = []
    n_dropped = 0
    for ep in data.episodes:
        if len(ep) < min_len:
            n_dropped += 1
            continue
        if len(ep) > long_cap and tail_fraction < 1.0:
            ep = ep[len(ep) - math.ceil(tail_fraction * len(ep)) :]
        kept.extend(_reindex(ep))
    return data.with_records(
        kept, filter_episodes={"min_len": min_len, "tail_fraction": tail_fraction, "episodes_dropped": n_dropped}
    )


def rmse_log_beta(estimates: dict[str, float], truths: dict[str, float]) -> float:
    """RMSE of log beta over the persons in ``estimates``."""
    missing = [p for p in estimates if p not in truths]
    if missing:
        raise KeyError(f"no true beta for {missing[:5]}")
    keys = sorted(estimates)
    err = np.log([estimates[k] for k in keys]) - np.log([truths[k] for k in keys])
    return float(np.sqrt(np.mean(err**2)))


class UndefinedCorrelation(ValueError):
    pass


def correlations(x, y) -> tuple[float, float]:
    """Pearson and Spearman (average ranks for ties) correlation."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("x and y must be 1-D and the same length")
    if len(x) < 3:
        raise ValueError("need at least 3 pairs")
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        raise UndefinedCorrelation("zero variance input")
    pearson = float(stats.pearsonr(x, y)[0])
    spearman = float(stats.spearmanr(x, y)[0])
    return pearson, spearman
