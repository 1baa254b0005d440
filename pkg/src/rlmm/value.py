"""Shared action-value network, normalised advantages and soft Bellman terms.

All sums over actions run over the legal set of each state; illegal heads are
masked out. Gradients are hand-derived for the two architectures.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass

import numpy as np

CHECKPOINT_VERSION = 1


class DimensionError(ValueError):
    pass


class TieError(ValueError):
    """Raised when the highest normalised advantage is not unique."""


_SHAPES = {
    "linear": lambda d, h, a: [("W", (d, a)), ("b", (a,))],
    "two-layer": lambda d, h, a: [("W1", (d, h)), ("b1", (h,)), ("W2", (h, a)), ("b2", (a,))],
}


@dataclass
class QParams:
    """Parameters of Q(s, .) = head(features(s)), one output per action head.

    ``action_ids`` optionally records which global action each head stands for.
    """

    kind: str
    feature_dim: int
    n_actions: int
    hidden: int
    flat: np.ndarray
    seed: int | None = None
    action_ids: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.kind not in _SHAPES:
            raise ValueError(f"unknown model kind {self.kind!r}")
        self.flat = np.asarray(self.flat, dtype=float)
        if self.flat.shape != (self.param_count,):
            raise DimensionError(f"expected {self.param_count} parameters, got {self.flat.shape}")
        if not np.all(np.isfinite(self.flat)):
            raise ValueError("non-finite parameters")
        if self.action_ids is not None:
            self.action_ids = tuple(int(a) for a in self.action_ids)
            if len(self.action_ids) != self.n_actions:
                raise DimensionError("action_ids length differs from n_actions")

    @property
    def shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        return _SHAPES[self.kind](self.feature_dim, self.hidden, self.n_actions)

    @property
    def param_count(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.shapes)

    @property
    def views(self) -> dict[str, np.ndarray]:
        out, k = {}, 0
        for name, shape in self.shapes:
            n = int(np.prod(shape))
            out[name] = self.flat[k : k + n].reshape(shape)
            k += n
        return out

    @classmethod
    def zeros(cls, kind, feature_dim, n_actions, hidden=64, action_ids=None) -> QParams:
        hidden = hidden if kind == "two-layer" else 0
        n = sum(int(np.prod(s)) for _, s in _SHAPES[kind](feature_dim, hidden, n_actions))
        return cls(kind, feature_dim, n_actions, hidden, np.zeros(n), action_ids=action_ids)

    @classmethod
    def init(cls, kind, feature_dim, n_actions, hidden=64, seed=0, action_ids=None) -> QParams:
        """Zeros for ``linear``; He-scaled normal weights, zero biases for ``two-layer``."""
        theta = cls.zeros(kind, feature_dim, n_actions, hidden, action_ids)
        theta.seed = seed
        if kind == "two-layer":
            rng = np.random.default_rng(seed)
            v = theta.views
            v["W1"][:] = rng.normal(0.0, np.sqrt(2.0 / feature_dim), size=v["W1"].shape)
            v["W2"][:] = rng.normal(0.0, np.sqrt(2.0 / hidden), size=v["W2"].shape)
        return theta

    def with_flat(self, flat) -> QParams:
        return QParams(
            self.kind, self.feature_dim, self.n_actions, self.hidden, np.array(flat), self.seed, self.action_ids
        )

    def scaled(self, c: float) -> QParams:
        """Parameters whose output is c * Q (exact for ``linear``)."""
        if self.kind != "linear":
            v = dict(self.views)
            flat = np.concatenate([v["W1"].ravel(), v["b1"], c * v["W2"].ravel(), c * v["b2"]])
            return self.with_flat(flat)
        return self.with_flat(c * self.flat)

    # forward / backward

    def forward(self, phi: np.ndarray):
        """Q for each row of ``phi``; returns (Q, cache for ``backward``)."""
        phi = np.atleast_2d(phi)
        if phi.shape[1] != self.feature_dim:
            raise DimensionError(f"feature dim {phi.shape[1]} != {self.feature_dim}")
        v = self.views
        if self.kind == "linear":
            return phi @ v["W"] + v["b"], (phi,)
        h = np.tanh(phi @ v["W1"] + v["b1"])
        return h @ v["W2"] + v["b2"], (phi, h)

    def backward(self, cache, dq: np.ndarray) -> np.ndarray:
        """Flat gradient of sum(dq * Q) with respect to the parameters."""
        v = self.views
        if self.kind == "linear":
            (phi,) = cache
            return np.concatenate([(phi.T @ dq).ravel(), dq.sum(axis=0)])
        phi, h = cache
        dh = (dq @ v["W2"].T) * (1.0 - h * h)
        return np.concatenate(
            [(phi.T @ dh).ravel(), dh.sum(axis=0), (h.T @ dq).ravel(), dq.sum(axis=0)]
        )

    # serialisation

    def to_bytes(self) -> bytes:
        head = {
            "version": CHECKPOINT_VERSION,
            "kind": self.kind,
            "feature_dim": self.feature_dim,
            "n_actions": self.n_actions,
            "hidden": self.hidden,
            "seed": self.seed,
            "action_ids": list(self.action_ids) if self.action_ids is not None else None,
        }
        buf = io.BytesIO()
        np.save(buf, self.flat.astype("<f8"), allow_pickle=False)
        return json.dumps(head, sort_keys=True).encode() + b"\n" + buf.getvalue()

    @classmethod
    def from_bytes(cls, blob: bytes) -> QParams:
        head_raw, body = blob.split(b"\n", 1)
        head = json.loads(head_raw)
        if head.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {head.get('version')}")
        flat = np.load(io.BytesIO(body), allow_pickle=False)
        return cls(
            head["kind"], head["feature_dim"], head["n_actions"], head["hidden"], flat, head["seed"],
            head.get("action_ids"),
        )

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> QParams:
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def q_values(theta: QParams, phi: np.ndarray, legal) -> np.ndarray:
    q, _ = theta.forward(phi)
    return q[0, list(legal)]


# masked action-set helpers; ``mask`` is a boolean (N, A) legal-action matrix


def masked_mean(x: np.ndarray, mask: np.ndarray) -> np.ndarray:
    n = mask.sum(axis=1)
    return np.where(n > 0, (x * mask).sum(axis=1) / np.maximum(n, 1), 0.0)


def centered(q: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Q minus its legal-set mean, zero off the legal set."""
    return (q - masked_mean(q, mask)[:, None]) * mask


def masked_log_softmax(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Log softmax over legal entries; -inf elsewhere and on rows with no legal entry."""
    z = np.where(mask, logits, -np.inf)
    m = z.max(axis=1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        lse = m + np.log(np.exp(z - m).sum(axis=1, keepdims=True))
        return np.where(mask, z - lse, -np.inf)


def masked_logsumexp(x: np.ndarray, mask: np.ndarray) -> np.ndarray:
    z = np.where(mask, x, -np.inf)
    m = z.max(axis=1)
    m = np.where(np.isfinite(m), m, 0.0)
    s = np.exp(z - m[:, None]).sum(axis=1)
    with np.errstate(divide="ignore"):
        return np.where(s > 0, m + np.log(np.where(s > 0, s, 1.0)), 0.0)


def center_advantages(qvals) -> np.ndarray:
    q = np.asarray(qvals, dtype=float)
    if q.size == 0:
        raise ValueError("empty action set")
    return q - q.mean()


def global_scale(chosen_centered: np.ndarray, eps: float = 1e-8) -> float:
    """Root mean square of the chosen actions' centred advantages, eps inside the root."""
    chosen_centered = np.asarray(chosen_centered, dtype=float)
    if chosen_centered.size == 0:
        raise ValueError("no observations")
    return float(np.sqrt(np.mean(chosen_centered**2) + eps))


@dataclass(frozen=True)
class AdvantageView:
    state: int
    legal: tuple[int, ...]
    centered: np.ndarray
    scale: float
    normalized: np.ndarray


def normalized_advantages(theta: QParams, phi, state: int, legal, scale: float) -> AdvantageView:
    if not scale > 0:
        raise ValueError("scale must be positive")
    cen = center_advantages(q_values(theta, phi, legal))
    return AdvantageView(state, tuple(legal), cen, float(scale), cen / scale)


def policy_probs(adv, beta: float) -> np.ndarray:
    """Softmax of beta * A over the legal actions, max-subtracted."""
    if beta < 0:
        raise ValueError("beta must be non-negative")
    a = adv.normalized if isinstance(adv, AdvantageView) else np.asarray(adv, dtype=float)
    z = beta * a
    z = z - z.max()
    p = np.exp(z)
    return p / p.sum()


def optimal_action_prob(adv, beta: float, tie_tol: float = 0.0) -> float:
    """Probability of the unique highest-advantage action, via the gap form."""
    a = adv.normalized if isinstance(adv, AdvantageView) else np.asarray(adv, dtype=float)
    best = int(np.argmax(a))
    gaps = a[best] - np.delete(a, best)
    if np.any(gaps <= tie_tol):
        raise TieError("highest normalised advantage is tied")
    return float(1.0 / (1.0 + np.exp(-beta * gaps).sum()))


@dataclass(frozen=True)
class SoftValueConfig:
    tau: float = 1.0

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")


def soft_value(qvals, cfg: SoftValueConfig = SoftValueConfig()) -> float:
    """tau * log sum exp(Q / tau); 0 for an empty (terminal) action set."""
    q = np.asarray(qvals, dtype=float)
    if q.size == 0:
        return 0.0
    m = q.max()
    return float(m + cfg.tau * np.log(np.exp((q - m) / cfg.tau).sum()))


def soft_values(q: np.ndarray, mask: np.ndarray, tau: float) -> np.ndarray:
    """Row-wise soft value over legal entries; rows without legal actions give 0."""
    return tau * masked_logsumexp(q / tau, mask)


def bellman_residual(q_sa: float, reward: float, gamma: float, q_next, cfg=SoftValueConfig()) -> float:
    """Q(s,a) - (R + gamma V(s')), with ``q_next`` the legal Q-values at s' (empty if terminal)."""
    return float(q_sa - (reward + gamma * soft_value(q_next, cfg)))


def bellman_loss(residuals) -> float:
    r = np.asarray(residuals, dtype=float)
    if r.size == 0:
        raise ValueError("empty batch")
    return float(np.mean(r**2))
