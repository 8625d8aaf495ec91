"""Loss, gradient and curvature for L2-regularized linear models.

The objective is ``sum_i importance_i * loss(w.x_i; y_i) + lam/2 * ||w||^2``.
Logistic labels are 0/1 and are mapped to -1/+1 internally.

Batch sums over a shard are accumulated in fixed point: every per-example
term is rounded to a multiple of ``2**-FIXED_BITS`` and the sum is carried
as an integer-valued double. Such sums are exact whatever the order, so
adding shard totals through the AllReduce tree gives bitwise the same
result as summing the unsharded data on one machine.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .data import Dataset, SparseExample

FIXED_BITS = 30
UNIT = 2.0 ** -FIXED_BITS
# Integer-valued doubles are exact below 2**53; leave room for up to 8
# partial sums before anything can round.
UNIT_LIMIT = 2.0 ** 50


class LossKind(enum.Enum):
    LOGISTIC = "logistic"
    SQUARED = "squared"


class DimensionError(IndexError):
    pass


class RangeError(OverflowError):
    """A fixed-point sum left the exactly representable range."""


@dataclass(frozen=True)
class Objective:
    loss: LossKind = LossKind.LOGISTIC
    lam: float = 0.0
    dim: int = 1 << 18

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"L2 coefficient must be >= 0, got {self.lam}")


def _signed_labels(y):
    y = np.asarray(y, dtype=np.float64)
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("logistic loss expects labels in {0, 1}")
    return 2.0 * y - 1.0


def pointwise(margins, labels, loss: LossKind):
    """Per-example loss, d loss / d margin and d^2 loss / d margin^2."""
    z = np.asarray(margins, dtype=np.float64)
    if loss is LossKind.LOGISTIC:
        ys = _signed_labels(labels)
        t = -ys * z
        # log(1 + exp(t)) without overflow
        value = np.maximum(t, 0.0) + np.log1p(np.exp(-np.abs(t)))
        p = expit(z)
        slope = -ys * expit(t)
        curv = p * (1.0 - p)
        return value, slope, curv
    if loss is LossKind.SQUARED:
        r = z - np.asarray(labels, dtype=np.float64)
        return 0.5 * r * r, r, np.ones_like(r)
    raise ValueError(f"unknown loss {loss!r}")


def _check_dim(w, indices):
    if len(indices) and max(indices) >= len(w):
        raise DimensionError(f"feature index {max(indices)} >= dimension {len(w)}")


def predict(w: np.ndarray, x: SparseExample, loss: LossKind = LossKind.LOGISTIC) -> tuple:
    """Return ``(margin, probability)``; probability is None for squared loss."""
    idx = [j for j, _ in x.features]
    _check_dim(w, idx)
    margin = 0.0
    for j, v in x.features:
        margin += w[j] * v
    if loss is LossKind.LOGISTIC:
        return margin, float(expit(margin))
    return margin, None


def example_gradient(w: np.ndarray, x: SparseExample, loss: LossKind = LossKind.LOGISTIC) -> tuple:
    """Gradient of one weighted example over its support.

    Returns ``(indices, gradient_values, loss_value)``.
    """
    margin, _ = predict(w, x, loss)
    value, slope, _ = pointwise(np.array([margin]), np.array([x.label]), loss)
    c = float(slope[0]) * x.importance
    idx = np.array([j for j, _ in x.features], dtype=np.int64)
    vals = np.array([v for _, v in x.features], dtype=np.float64)
    return idx, c * vals, float(value[0]) * x.importance


def margins(w: np.ndarray, shard: Dataset) -> np.ndarray:
    if len(w) != shard.dim:
        raise DimensionError(f"weights have {len(w)} entries, shard dimension is {shard.dim}")
    return shard.matrix @ w


# ---------------------------------------------------------------------------
# fixed-point accumulation


def to_units(x):
    return np.rint(np.asarray(x, dtype=np.float64) * 2.0 ** FIXED_BITS)


def from_units(u):
    return np.asarray(u, dtype=np.float64) * UNIT


def _objective_units(values, importance) -> float:
    total = float(np.sum(to_units(values * importance)))
    if not total <= UNIT_LIMIT:  # nan included
        return math.inf
    return total


def _scatter_units(shard: Dataset, per_nnz) -> np.ndarray:
    units = np.bincount(shard.indices, weights=to_units(per_nnz), minlength=shard.dim)
    if units.size and np.max(np.abs(units)) > UNIT_LIMIT:
        raise RangeError("gradient sum exceeds the fixed-point range")
    return units


def objective_units(w, shard: Dataset, loss: LossKind) -> float:
    """Unregularized loss sum in fixed-point units (inf on overflow)."""
    if shard.n == 0:
        return 0.0
    value, _, _ = pointwise(margins(w, shard), shard.labels, loss)
    return _objective_units(value, shard.importance)


def gradient_units(w, shard: Dataset, loss: LossKind) -> tuple:
    """``(loss_units, gradient_units)`` for the shard, unregularized."""
    if shard.n == 0:
        return 0.0, np.zeros(shard.dim)
    value, slope, _ = pointwise(margins(w, shard), shard.labels, loss)
    coef = slope * shard.importance
    g = _scatter_units(shard, np.repeat(coef, np.diff(shard.indptr)) * shard.values)
    return _objective_units(value, shard.importance), g


def hessian_units(w, shard: Dataset, loss: LossKind) -> np.ndarray:
    if shard.n == 0:
        return np.zeros(shard.dim)
    _, _, curv = pointwise(margins(w, shard), shard.labels, loss)
    coef = curv * shard.importance
    return _scatter_units(shard, np.repeat(coef, np.diff(shard.indptr)) * shard.values ** 2)


def batch_objective_and_gradient(w, shard: Dataset, objective: Objective) -> tuple:
    """Local loss sum and gradient sum; regularization is left out."""
    f, g = gradient_units(w, shard, objective.loss)
    return float(from_units(f)), from_units(g)


def hessian_diagonal(w, shard: Dataset, objective: Objective) -> np.ndarray:
    """Local sum of x_ij^2 * loss''(margin_i) * importance_i, without lam."""
    return from_units(hessian_units(w, shard, objective.loss))


def regularize(f: float, g: np.ndarray, w: np.ndarray, lam: float) -> tuple:
    if lam == 0:
        return f, g
    return f + 0.5 * lam * float(np.dot(w, w)), g + lam * w


def plain_objective(w, shard: Dataset, objective: Objective) -> float:
    """Regularized objective in ordinary floating point (for reporting and checks)."""
    value, _, _ = pointwise(margins(w, shard), shard.labels, objective.loss)
    return float(np.dot(value, shard.importance)) + 0.5 * objective.lam * float(np.dot(w, w))
