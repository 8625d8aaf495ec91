"""Single-node adaptive-gradient SGD.

One pass visits the shard in order and, for each example, takes a step
``w -= s * G^{-1/2} g`` and then accumulates ``G_jj += g_j^2``; G starts at
the identity. The scalar ``s`` is either the base rate (plain updates) or
the importance-aware rate: the step that equals integrating infinitely
many infinitesimal gradient steps on the same example, measured in the
adaptive metric.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .data import Dataset
from .model import LossKind

NEWTON_TOL = 1e-10
NEWTON_MAX_ITER = 50


class Invariance(enum.Enum):
    PLAIN = "plain"
    IMPORTANCE_AWARE = "importance"


@dataclass
class OnlineConfig:
    eta: float = 0.5
    invariance: Invariance = Invariance.IMPORTANCE_AWARE
    passes: int = 1

    def __post_init__(self):
        if not self.eta > 0:
            raise ValueError(f"eta must be positive, got {self.eta}")
        if self.passes < 1:
            raise ValueError("passes must be >= 1")


@dataclass
class ModelState:
    w: np.ndarray
    g2: np.ndarray
    passes: int = 0
    phase: str = "init"

    @classmethod
    def zeros(cls, dim: int) -> "ModelState":
        return cls(np.zeros(dim), np.ones(dim))

    def copy(self) -> "ModelState":
        return ModelState(self.w.copy(), self.g2.copy(), self.passes, self.phase)

    @property
    def dim(self) -> int:
        return self.w.size


@dataclass
class OnlineStats:
    examples: int = 0
    fallbacks: int = 0  # importance-aware solves that did not converge
    newton_iterations: int = 0


def _logistic_step(u0: float, delta: float, stats: Optional[OnlineStats]) -> Optional[float]:
    """Solve v + e^u0 * expm1(v) = delta for v in [0, delta].

    Returns ``v * (1 + e^u0) / delta``, i.e. the step relative to the plain
    rate, or None if Newton's method did not converge.
    """
    if u0 > 35.0 + math.log(max(delta, 1.0)):
        return 1.0
    if u0 > 0:
        # divide through by e^u0 so nothing overflows
        a, b, rhs = math.exp(-u0), 1.0, delta * math.exp(-u0)
    else:
        a, b, rhs = 1.0, math.exp(u0), delta

    def resid(v):
        return a * v + b * math.expm1(v) - rhs

    # Both terms are non-negative for v >= 0, so each alone bounds the root.
    # The residual is convex and increasing: Newton started right of the
    # root decreases monotonically onto it and never overflows.
    v = min(rhs / (a + b), rhs / a, math.log1p(rhs / b))
    scale = max(rhs, 1e-300)
    for _ in range(NEWTON_MAX_ITER):
        r = resid(v)
        if stats is not None:
            stats.newton_iterations += 1
        if abs(r) <= NEWTON_TOL * scale:
            break
        nxt = v - r / (a + b * math.exp(v))
        if not 0.0 <= nxt < v:
            # rounding put us left of the root or stalled
            if abs(r) <= 1e-14 * scale + 1e-300:
                break
            nxt = max(nxt, 0.0)
            if nxt == v:
                break
        v = nxt
    else:
        return None
    return v * (1.0 + math.exp(u0)) / delta


def invariance_step(
    margin: float,
    label: float,
    eta: float,
    xnorm2: float,
    importance: float = 1.0,
    loss: LossKind = LossKind.LOGISTIC,
    mode: Invariance = Invariance.IMPORTANCE_AWARE,
    stats: Optional[OnlineStats] = None,
) -> float:
    """Scalar rate ``s`` for one example.

    ``xnorm2`` is the squared norm of x in the adaptive metric,
    sum_j x_j^2 / sqrt(G_jj). With ``s`` the update is
    ``w_j -= s * g_j / sqrt(G_jj)`` where ``g`` already includes the
    importance weight.
    """
    if not eta > 0:
        raise ValueError("eta must be positive")
    if mode is Invariance.PLAIN:
        return eta
    h = xnorm2 * importance
    delta = eta * h
    if delta == 0:
        return eta
    if loss is LossKind.SQUARED:
        return -math.expm1(-delta) / h
    ys = 1.0 if label > 0 else -1.0
    rel = _logistic_step(ys * margin, delta, stats)
    if rel is None:
        if stats is not None:
            stats.fallbacks += 1
        return eta
    return eta * rel


def _slope(z: float, y: float, loss: LossKind) -> float:
    if loss is LossKind.LOGISTIC:
        ys = 1.0 if y > 0 else -1.0
        t = ys * z
        # -ys / (1 + e^t), evaluated without overflow
        if t >= 0:
            e = math.exp(-t)
            return -ys * e / (1.0 + e)
        return -ys / (1.0 + math.exp(t))
    return z - y


def sgd_pass(
    shard: Dataset,
    model: ModelState,
    config: OnlineConfig,
    loss: LossKind = LossKind.LOGISTIC,
    stats: Optional[OnlineStats] = None,
    throttle=None,
) -> ModelState:
    """One adaptive-gradient pass over ``shard`` in order; returns a new state."""
    if model.dim != shard.dim:
        raise ValueError(f"model dimension {model.dim} != shard dimension {shard.dim}")
    if loss is LossKind.LOGISTIC and shard.n and not np.all((shard.labels == 0) | (shard.labels == 1)):
        raise ValueError("logistic loss expects labels in {0, 1}")
    out = model.copy()
    w, G = out.w, out.g2
    indptr, indices, values = shard.indptr, shard.indices, shard.values
    labels, imps = shard.labels.tolist(), shard.importance.tolist()
    eta, mode = config.eta, config.invariance
    for i in range(shard.n):
        a, b = indptr[i], indptr[i + 1]
        idx = indices[a:b]
        x = values[a:b]
        z = float(np.dot(w[idx], x))
        c = _slope(z, labels[i], loss) * imps[i]
        if c != 0.0:
            g = c * x
            rate = 1.0 / np.sqrt(G[idx])
            if mode is Invariance.PLAIN:
                s = eta
            else:
                s = invariance_step(z, labels[i], eta, float(np.dot(x * x, rate)), imps[i], loss, mode, stats)
            w[idx] -= s * (rate * g)
            G[idx] += g * g
        if throttle is not None and (i & 255) == 255:
            throttle.tick()
    if throttle is not None:
        throttle.tick()
    if stats is not None:
        stats.examples += shard.n
    out.passes += 1
    out.phase = "online"
    return out


def decayed_rate(t: int, L: float, gamma: float, m: int = 1) -> float:
    """``1 / (L + gamma * sqrt(t / m))``."""
    denom = L + gamma * math.sqrt(t / m)
    if not denom > 0:
        raise ValueError("learning-rate denominator must be positive")
    return 1.0 / denom


def sgd_decay_pass(shard: Dataset, w: np.ndarray, L: float, gamma: float, t0: int = 0,
                   loss: LossKind = LossKind.LOGISTIC, throttle=None) -> tuple:
    """Plain SGD with rate 1/(L + gamma sqrt(t)); t counts from ``t0 + 1``.

    Returns ``(w, t)`` with t the last step index used.
    """
    w = w.copy()
    indptr, indices, values = shard.indptr, shard.indices, shard.values
    labels, imps = shard.labels.tolist(), shard.importance.tolist()
    t = t0
    for i in range(shard.n):
        t += 1
        a, b = indptr[i], indptr[i + 1]
        idx = indices[a:b]
        x = values[a:b]
        c = _slope(float(np.dot(w[idx], x)), labels[i], loss) * imps[i]
        if c != 0.0:
            w[idx] -= decayed_rate(t, L, gamma) * c * x
        if throttle is not None and (i & 255) == 255:
            throttle.tick()
    if throttle is not None:
        throttle.tick()
    return w, t
