"""Distributed, Jacobi-preconditioned L-BFGS.

Only sums over examples cross the network: the local loss and gradient
(one vector AllReduce per iteration) and the loss at each line-search
trial (one scalar AllReduce per trial). Everything else is replicated
arithmetic on identical inputs, so every node holds byte-identical
iterates.
"""
from __future__ import annotations

import enum
import logging
import math
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .comm import Collective, LocalCollective
from .data import Dataset
from .model import (UNIT_LIMIT, Objective, RangeError, from_units, gradient_units, hessian_units,
                    objective_units, regularize)

log = logging.getLogger(__name__)


class Status(enum.Enum):
    CONVERGED = "converged"
    MAX_ITER = "max_iter"
    STALLED = "stalled"


@dataclass
class LineSearchConfig:
    c1: float = 1e-4
    factor: float = 0.5
    max_trials: int = 30

    def __post_init__(self):
        if not 0 < self.c1 < 1:
            raise ValueError("c1 must be in (0, 1)")
        if not 0 < self.factor < 1:
            raise ValueError("backtracking factor must be in (0, 1)")
        if self.max_trials < 1:
            raise ValueError("max_trials must be >= 1")


@dataclass
class Pair:
    s: np.ndarray
    y: np.ndarray
    rho: float


@dataclass
class LbfgsState:
    w: np.ndarray
    precond: np.ndarray
    memory: int = 10
    history: deque = field(default_factory=deque)
    iteration: int = 0
    objective: float = math.nan

    def push(self, s: np.ndarray, y: np.ndarray) -> bool:
        """Store a correction pair if it passes the curvature screen."""
        sy = float(np.dot(s, y))
        if not sy > 1e-12 * float(np.linalg.norm(s)) * float(np.linalg.norm(y)):
            return False
        self.history.append(Pair(s, y, 1.0 / sy))
        while len(self.history) > self.memory:
            self.history.popleft()
        return True

    def reset(self):
        self.history.clear()


@dataclass
class TraceRow:
    iteration: int
    objective: float  # scaled: total / n
    total: float  # unscaled objective
    grad_norm: float  # preconditioned
    seconds: float
    trials: int = 0
    allreduce_seconds: float = 0.0


@dataclass
class LbfgsResult:
    w: np.ndarray
    status: Status
    trace: list
    n: int
    precond: np.ndarray

    @property
    def iterations(self) -> int:
        return self.trace[-1].iteration if self.trace else 0

    @property
    def objective(self) -> float:
        return self.trace[-1].objective

    def trace_csv(self) -> str:
        lines = ["iter,objective,grad_norm,seconds"]
        for r in self.trace:
            lines.append(f"{r.iteration},{r.objective!r},{r.grad_norm!r},{r.seconds!r}")
        return "\n".join(lines) + "\n"


def global_gradient(w, shard: Dataset, objective: Objective, collective: Collective) -> tuple:
    """Global ``(objective, gradient, example_count)``, regularized.

    Loss, gradient and count travel in a single vector AllReduce.
    """
    f_u, g_u = gradient_units(w, shard, objective.loss)
    total = collective.allreduce(np.concatenate([g_u, [f_u, float(shard.n)]]))
    g_tot, f_tot, n = total[:-2], total[-2], int(total[-1])
    if np.max(np.abs(g_tot), initial=0.0) > UNIT_LIMIT:
        raise RangeError("global gradient exceeds the fixed-point range")
    f = math.inf if not f_tot <= UNIT_LIMIT else float(from_units(f_tot))
    f, g = regularize(f, from_units(g_tot), w, objective.lam)
    return f, g, n


def global_objective(w, shard: Dataset, objective: Objective, collective: Collective) -> float:
    total = collective.allreduce_scalar(objective_units(w, shard, objective.loss))
    if not total <= UNIT_LIMIT:
        return math.inf
    return float(from_units(total)) + 0.5 * objective.lam * float(np.dot(w, w))


def jacobi_preconditioner(w, shard: Dataset, objective: Objective, collective: Collective) -> np.ndarray:
    """Global Hessian diagonal plus lam; coordinates with no curvature get 1."""
    h = from_units(collective.allreduce(hessian_units(w, shard, objective.loss))) + objective.lam
    h[h <= 0] = 1.0
    return h


def two_loop_direction(state: LbfgsState, grad: np.ndarray) -> np.ndarray:
    """-H grad, with H seeded by the inverse preconditioner."""
    q = grad.copy()
    alphas = []
    for p in reversed(state.history):
        a = p.rho * float(np.dot(p.s, q))
        q -= a * p.y
        alphas.append(a)
    d_inv = 1.0 / state.precond
    r = d_inv * q
    if state.history:
        last = state.history[-1]
        r *= float(np.dot(last.s, last.y)) / float(np.dot(last.y, d_inv * last.y))
    for p, a in zip(state.history, reversed(alphas)):
        b = p.rho * float(np.dot(p.y, r))
        r += (a - b) * p.s
    return -r


def _precond_norm(g, precond) -> float:
    return math.sqrt(float(np.dot(g, g / precond)))


def lbfgs_optimize(
    w0: np.ndarray,
    shard: Dataset,
    objective: Objective,
    collective: Optional[Collective] = None,
    *,
    max_iter: int = 20,
    tol: float = 1e-6,
    memory: int = 10,
    precond: str = "hessian",
    g2: Optional[np.ndarray] = None,
    line_search: LineSearchConfig = LineSearchConfig(),
    throttle=None,
    callback: Optional[Callable[[TraceRow, np.ndarray], None]] = None,
) -> LbfgsResult:
    """Minimize the regularized objective starting from ``w0``.

    ``precond`` is ``"hessian"`` (Hessian diagonal at ``w0``, one extra
    vector AllReduce), ``"scaling"`` (the online scaling diagonal ``g2``
    plus lam, no communication) or ``"none"``.
    """
    collective = collective or LocalCollective()
    t_start = time.perf_counter()
    comm0 = collective.stats.seconds
    w = np.array(w0, dtype=np.float64, copy=True)

    def tick():
        if throttle is not None:
            throttle.tick()

    if precond == "hessian":
        p = jacobi_preconditioner(w, shard, objective, collective)
    elif precond == "scaling":
        if g2 is None:
            raise ValueError("precond='scaling' needs the scaling diagonal g2")
        p = np.asarray(g2, dtype=np.float64) + objective.lam
    elif precond == "none":
        p = np.ones_like(w)
    else:
        raise ValueError(f"unknown preconditioner {precond!r}")
    tick()
    state = LbfgsState(w, p, memory)

    f, g, n = global_gradient(w, shard, objective, collective)
    tick()
    scale = 1.0 / max(n, 1)
    trace = [TraceRow(0, f * scale, f, _precond_norm(g, p), time.perf_counter() - t_start, 0,
                      collective.stats.seconds - comm0)]
    if callback:
        callback(trace[-1], w)
    status = Status.MAX_ITER
    reset_used = False
    it = 0
    while it < max_iter:
        if trace[-1].grad_norm <= tol:
            status = Status.CONVERGED
            break
        d = two_loop_direction(state, g)
        slope = float(np.dot(g, d))
        if not slope < 0:
            log.debug("non-descent direction at iteration %d; resetting history", it)
            state.reset()
            d = -g / p
            slope = float(np.dot(g, d))
        alpha, trials, w_new = 1.0, 0, None
        while trials < line_search.max_trials:
            trials += 1
            cand = w + alpha * d
            f_cand = global_objective(cand, shard, objective, collective)
            tick()
            if f_cand <= f + line_search.c1 * alpha * slope:
                w_new = cand
                break
            alpha *= line_search.factor
        if w_new is None:
            if state.history and not reset_used:
                reset_used = True
                state.reset()
                continue
            status = Status.STALLED
            break
        f_next, g_new, _ = global_gradient(w_new, shard, objective, collective)
        tick()
        state.push(w_new - w, g_new - g)
        w, f, g = w_new, f_next, g_new
        it += 1
        state.w, state.iteration, state.objective = w, it, f
        trace.append(TraceRow(it, f * scale, f, _precond_norm(g, p), time.perf_counter() - t_start, trials,
                              collective.stats.seconds - comm0))
        if callback:
            callback(trace[-1], w)
    else:
        if trace[-1].grad_norm <= tol:
            status = Status.CONVERGED
    return LbfgsResult(w, status, trace, n, p)
