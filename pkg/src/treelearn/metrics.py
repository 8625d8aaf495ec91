"""Ranking metrics, log loss, and the per-node communication cost model."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

NLL_CLAMP = 1e-15


class MetricUndefined(ValueError):
    pass


def _prepare(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels, dtype=np.float64).ravel()
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    if s.size == 0:
        raise MetricUndefined("empty scored set")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")
    return s, y


def _sweep(s, y):
    """Cumulative (true positive, false positive) counts at each distinct
    threshold, highest score first."""
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    tp = np.cumsum(y)[last]
    fp = (last + 1) - tp
    return tp, fp


def auroc(scores, labels) -> float:
    """Trapezoidal area under the ROC curve; tied scores form one step."""
    s, y = _prepare(scores, labels)
    pos = y.sum()
    neg = y.size - pos
    if pos == 0 or neg == 0:
        raise MetricUndefined("auROC needs at least one positive and one negative")
    tp, fp = _sweep(s, y)
    tpr = np.r_[0.0, tp / pos]
    fpr = np.r_[0.0, fp / neg]
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))


def auprc(scores, labels) -> float:
    """Uninterpolated area under the precision/recall curve.

    Sweeps thresholds from the highest score down and sums
    precision * (increase in recall); tied scores form one threshold.
    """
    s, y = _prepare(scores, labels)
    pos = y.sum()
    if pos == 0:
        raise MetricUndefined("auPRC needs at least one positive")
    tp, fp = _sweep(s, y)
    precision = tp / (tp + fp)
    recall_step = np.diff(np.r_[0.0, tp]) / pos
    return float(np.sum(precision * recall_step))


def nll(probabilities, labels) -> float:
    """Mean negative log-likelihood with probabilities clamped to [1e-15, 1-1e-15]."""
    p, y = _prepare(probabilities, labels)
    p = np.clip(p, NLL_CLAMP, 1.0 - NLL_CLAMP)
    terms = -np.where(y == 1, np.log(p), np.log1p(-p))
    # shifted mean: exact when every term is equal, e.g. constant 0.5 predictions give ln 2
    return float(terms[0] + math.fsum(terms - terms[0]) / terms.size)


METRICS = {"auroc": auroc, "auprc": auprc, "nll": nll}


# ---------------------------------------------------------------------------
# communication cost


@dataclass
class CostInputs:
    m: int
    n: int
    s: float
    d: int
    T: float
    b: Optional[int] = None
    rep: Optional[float] = None

    def __post_init__(self):
        for name in ("m", "n", "s", "d", "T"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.b is not None and not 0 < self.b <= self.n:
            raise ValueError("minibatch size must be in (0, n]")
        if self.rep is not None and not self.rep > 0:
            raise ValueError("replication must be positive")


@dataclass
class Cost:
    algorithm: str
    formula: str
    value: float


def _need(inputs, name, algo):
    v = getattr(inputs, name)
    if v is None:
        raise ValueError(f"{algo} needs {name}")
    return v


def comm_cost(algorithm: str, inputs: CostInputs) -> Cost:
    """Per-node communication (in vector entries) with unit constants."""
    i = inputs
    a = algorithm.lower().replace("_", "-")
    if a in ("hybrid", "online", "online-averaging", "bundle"):
        return Cost(a, "d*T", float(i.d) * i.T)
    if a == "overcomplete":
        return Cost(a, "n*s + d", float(i.n) * i.s + i.d)
    if a in ("minibatch", "minibatch-dense"):
        b = _need(i, "b", a)
        return Cost(a, "d*T*n/b", float(i.d) * i.T * i.n / b)
    if a == "minibatch-sparse":
        b = _need(i, "b", a)
        return Cost(a, "b*s*T*n/b", float(b) * i.s * i.T * i.n / b)
    if a == "parallel-online":
        return Cost(a, "n*s/m + n*T", float(i.n) * i.s / i.m + float(i.n) * i.T)
    raise ValueError(f"unknown algorithm family {algorithm!r}")


def sqrt_minibatch(n: int, m: int) -> int:
    """sqrt(n) rounded up to a multiple of m (and at least m)."""
    b = max(m, int(round(math.sqrt(n))))
    return int(math.ceil(b / m) * m)
