"""Learning strategies built from the online pass, averaging and L-BFGS.

Every strategy runs the same code on every node; only the shard differs.
Collectives issued purely to report progress (the per-pass objective) are
flagged as monitoring traffic so the algorithm's own budget stays exact.
"""
from __future__ import annotations

import csv
import enum
import io
import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .averaging import average_state, uniform_average
from .comm import Collective, LocalCollective
from .data import Dataset
from .lbfgs import LineSearchConfig, lbfgs_optimize
from .metrics import METRICS, MetricUndefined
from .model import LossKind, Objective, pointwise
from .online import (Invariance, ModelState, OnlineConfig, OnlineStats, decayed_rate, sgd_decay_pass,
                     sgd_pass)


class Kind(enum.Enum):
    HYBRID = "hybrid"
    ONLINE = "online"
    BATCH = "batch"
    MINIBATCH = "minibatch"
    OVERCOMPLETE = "overcomplete"


class ConfigError(ValueError):
    pass


class PhaseError(RuntimeError):
    def __init__(self, phase: str, cause: BaseException):
        super().__init__(f"phase {phase!r} failed: {cause}")
        self.phase = phase
        self.cause = cause


@dataclass
class Strategy:
    """Which algorithm to run and its knobs.

    ``online_passes`` is the number of online passes for HYBRID and ONLINE;
    ``lbfgs_iters`` caps L-BFGS for HYBRID and BATCH; ``passes`` is the
    number of data passes for MINIBATCH and OVERCOMPLETE.
    """

    kind: Kind = Kind.HYBRID
    online_passes: int = 1
    lbfgs_iters: int = 20
    lbfgs_memory: int = 10
    tol: float = 1e-6
    eta: float = 0.5
    invariance: Invariance = Invariance.IMPORTANCE_AWARE
    average_g: bool = True
    minibatch: Optional[int] = None
    lr_L: float = 1.0
    lr_gamma: float = 1.0
    passes: int = 1
    replication: int = 1

    def validate(self, m: int = 1) -> "Strategy":
        k = self.kind
        if k is Kind.HYBRID and self.online_passes < 1:
            raise ConfigError("hybrid needs at least one online pass; use the batch strategy for none")
        if k is Kind.ONLINE and self.online_passes < 1:
            raise ConfigError("online needs at least one pass")
        if k in (Kind.HYBRID, Kind.BATCH) and self.lbfgs_iters < 0:
            raise ConfigError("lbfgs_iters must be >= 0")
        if self.lbfgs_memory < 1:
            raise ConfigError("lbfgs_memory must be >= 1")
        if not self.eta > 0:
            raise ConfigError("eta must be positive")
        if k is Kind.MINIBATCH:
            if self.minibatch is not None and self.minibatch < m:
                raise ConfigError(f"minibatch size {self.minibatch} is smaller than the node count {m}")
        if k in (Kind.MINIBATCH, Kind.OVERCOMPLETE):
            if self.passes < 1:
                raise ConfigError("passes must be >= 1")
            if not self.lr_gamma >= 0 or not self.lr_L >= 0 or self.lr_L + self.lr_gamma == 0:
                raise ConfigError("learning-rate constants must be >= 0 and not both zero")
        if k is Kind.OVERCOMPLETE and not 1 <= self.replication <= m:
            raise ConfigError(f"replication must be in [1, {m}], got {self.replication}")
        return self


# ---------------------------------------------------------------------------
# reporting


@dataclass
class ReportRow:
    rank: int
    phase: str
    pass_: int
    objective: float  # regularized objective / n
    test_metric: float
    seconds: float  # wall time since the run started
    compute_seconds: float
    allreduce_seconds: float
    vector_calls: int
    scalar_calls: int
    bytes_sent: int
    monitor_calls: int


REPORT_COLUMNS = ["rank", "phase", "pass", "objective", "test_metric", "seconds", "compute_seconds",
                  "allreduce_seconds", "vector_calls", "scalar_calls", "bytes_sent", "monitor_calls"]


@dataclass
class RunReport:
    strategy: str
    rank: int = 0
    rows: list = field(default_factory=list)
    phase_seconds: dict = field(default_factory=dict)
    test_metric_name: str = ""
    online: OnlineStats = field(default_factory=OnlineStats)
    status: str = ""

    def objectives(self, phase: Optional[str] = None) -> list:
        return [r.objective for r in self.rows if phase is None or r.phase == phase]

    def by_pass(self) -> dict:
        """Objective after each total data pass (last row per pass wins)."""
        return {r.pass_: r.objective for r in self.rows}

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(REPORT_COLUMNS)
        for r in self.rows:
            wr.writerow([r.rank, r.phase, r.pass_, repr(r.objective), repr(r.test_metric), f"{r.seconds:.6f}",
                         f"{r.compute_seconds:.6f}", f"{r.allreduce_seconds:.6f}", r.vector_calls,
                         r.scalar_calls, r.bytes_sent, r.monitor_calls])
        return buf.getvalue()

    def write(self, path):
        Path(path).write_text(self.to_csv(), encoding="utf-8")


def read_report(path) -> list:
    """Rows of a report CSV as dicts with numeric fields converted."""
    with open(path, newline="", encoding="utf-8") as fh:
        rd = csv.DictReader(fh)
        if rd.fieldnames is None or rd.fieldnames[:len(REPORT_COLUMNS)] != REPORT_COLUMNS:
            raise ValueError(f"{path}: unexpected header {rd.fieldnames}")
        out = []
        for row in rd:
            conv = {}
            for k, v in row.items():
                if k == "phase":
                    conv[k] = v
                elif k in ("objective", "test_metric") or k.endswith("seconds"):
                    conv[k] = float(v)
                else:
                    conv[k] = int(v)
            out.append(conv)
        return out


class Throttle:
    """Emulates a slow node: after each chunk of work, sleep (factor - 1)
    times the compute time spent since the previous tick. Time inside
    collectives is not compute and is not stretched."""

    def __init__(self, factor: float, collective: Optional[Collective] = None):
        if not factor >= 1:
            raise ConfigError(f"delay factor must be >= 1, got {factor}")
        self.factor = factor
        self.collective = collective
        self.slept = 0.0
        self._mark = None

    def _comm(self) -> float:
        if self.collective is None:
            return 0.0
        st = self.collective.stats
        return st.seconds + st.monitor_seconds + getattr(self.collective, "connect_seconds", 0.0)

    def tick(self):
        now, comm = time.perf_counter(), self._comm()
        if self._mark is not None and self.factor > 1:
            work = (now - self._mark[0]) - (comm - self._mark[1])
            if work > 0:
                pause = (self.factor - 1.0) * work
                time.sleep(pause)
                self.slept += pause
                now = time.perf_counter()
        self._mark = (now, comm)


class _Recorder:
    def __init__(self, report: RunReport, collective: Collective, objective: Objective, test: Optional[Dataset],
                 metric: str, monitor: bool):
        self.report = report
        self.coll = collective
        self.obj = objective
        self.test = test
        self.metric = metric
        self.monitor = monitor
        self.t0 = time.perf_counter()
        self.n_global: Optional[int] = None

    def elapsed(self) -> float:
        return time.perf_counter() - self.t0

    def global_objective(self, w, shard: Dataset, weight: float = 1.0) -> float:
        """Scaled objective via one monitoring collective; ``weight`` divides
        replicated data back to its original size."""
        value, _, _ = pointwise(shard.matrix @ w, shard.labels, self.obj.loss) if shard.n else (np.zeros(0),) * 3
        tot = self.coll.allreduce([float(np.dot(value, shard.importance)), float(shard.n)], monitor=True)
        n = tot[1] / weight
        return (tot[0] / weight + 0.5 * self.obj.lam * float(np.dot(w, w))) / max(n, 1.0)

    def test_value(self, w) -> float:
        if self.test is None or self.report.rank != 0:
            return math.nan
        z = self.test.matrix @ w
        scores = 1.0 / (1.0 + np.exp(-z)) if self.obj.loss is LossKind.LOGISTIC else z
        try:
            return METRICS[self.metric](scores, self.test.labels)
        except (MetricUndefined, ValueError):
            return math.nan

    def row(self, phase, pass_, objective, w):
        st = self.coll.stats
        el = self.elapsed()
        comm = st.seconds + st.monitor_seconds
        self.report.rows.append(ReportRow(self.report.rank, phase, pass_, float(objective), self.test_value(w), el,
                                          max(el - comm, 0.0), st.seconds, st.vector_calls, st.scalar_calls,
                                          st.bytes_sent, st.monitor_calls))


def _mark_pass_done(collective: Collective):
    if hasattr(collective, "pass_done"):
        collective.pass_done = True


def _phase(name, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except PhaseError:
        raise
    except Exception as exc:
        raise PhaseError(name, exc) from exc


def _rank(collective) -> int:
    # a lazy session only learns its rank when it joins the tree
    if getattr(collective, "connected", True):
        return int(getattr(collective, "rank", 0))
    return -1


def _fix_rank(report, collective):
    r = _rank(collective)
    report.rank = max(r, 0)
    for row in report.rows:
        row.rank = report.rank


# ---------------------------------------------------------------------------
# strategies


def _online_passes(shard, state, strategy, objective, collective, rec, throttle, passes, pass0=0):
    cfg = OnlineConfig(eta=strategy.eta, invariance=strategy.invariance)
    for p in range(passes):
        t = time.perf_counter()
        state = _phase("online", sgd_pass, shard, state, cfg, objective.loss, rec.report.online, throttle)
        _mark_pass_done(collective)
        state = _phase("averaging", average_state, state, collective, with_g=strategy.average_g)
        _fix_rank(rec.report, collective)
        if throttle is not None:
            throttle.tick()
        rec.report.phase_seconds["online"] = rec.report.phase_seconds.get("online", 0.0) + time.perf_counter() - t
        f = rec.global_objective(state.w, shard) if rec.monitor else math.nan
        rec.row("online", pass0 + p + 1, f, state.w)
    return state


def _lbfgs_phase(shard, w0, strategy, objective, collective, rec, throttle, pass0, g2=None):
    t = time.perf_counter()

    def cb(row, w):
        if row.iteration == 0 and pass0 > 0:
            return  # same point as the last online row
        rec.row("lbfgs", pass0 + row.iteration, row.objective, w)

    res = _phase("lbfgs", lbfgs_optimize, w0, shard, objective, collective, max_iter=strategy.lbfgs_iters,
                 tol=strategy.tol, memory=strategy.lbfgs_memory, g2=g2, line_search=LineSearchConfig(),
                 throttle=throttle, callback=cb)
    rec.report.phase_seconds["lbfgs"] = time.perf_counter() - t
    rec.report.status = res.status.value
    return res


def run_online_repeated(shard: Dataset, strategy: Strategy, objective: Objective,
                        collective: Optional[Collective] = None, *, test: Optional[Dataset] = None,
                        metric: str = "auprc", monitor: bool = True, throttle=None) -> tuple:
    """Repeated online passes, each followed by weighted averaging of w and G."""
    collective = collective or LocalCollective()
    report = RunReport(Kind.ONLINE.value, test_metric_name=metric)
    rec = _Recorder(report, collective, objective, test, metric, monitor)
    state = ModelState.zeros(shard.dim)
    state = _online_passes(shard, state, strategy, objective, collective, rec, throttle, strategy.online_passes)
    state.phase = "online"
    return state, report


def run_hybrid(shard: Dataset, strategy: Strategy, objective: Objective, collective: Optional[Collective] = None,
               *, test: Optional[Dataset] = None, metric: str = "auprc", monitor: bool = True,
               throttle=None, lbfgs_result: Optional[list] = None) -> tuple:
    """Online passes with averaging, then L-BFGS started from the averaged weights."""
    strategy.validate()
    collective = collective or LocalCollective()
    report = RunReport(Kind.HYBRID.value, test_metric_name=metric)
    rec = _Recorder(report, collective, objective, test, metric, monitor)
    state = ModelState.zeros(shard.dim)
    state = _online_passes(shard, state, strategy, objective, collective, rec, throttle, strategy.online_passes)
    res = _lbfgs_phase(shard, state.w, strategy, objective, collective, rec, throttle, strategy.online_passes)
    if lbfgs_result is not None:
        lbfgs_result.append(res)
    return ModelState(res.w, state.g2, state.passes + res.iterations, "lbfgs"), report


def run_batch(shard: Dataset, strategy: Strategy, objective: Objective, collective: Optional[Collective] = None,
              *, test: Optional[Dataset] = None, metric: str = "auprc", monitor: bool = True,
              throttle=None, lbfgs_result: Optional[list] = None) -> tuple:
    """L-BFGS from zero."""
    collective = collective or LocalCollective()
    _mark_pass_done(collective)
    report = RunReport(Kind.BATCH.value, test_metric_name=metric)
    rec = _Recorder(report, collective, objective, test, metric, monitor)
    res = _lbfgs_phase(shard, np.zeros(shard.dim), strategy, objective, collective, rec, throttle, 0)
    _fix_rank(report, collective)
    if lbfgs_result is not None:
        lbfgs_result.append(res)
    return ModelState(res.w, np.ones(shard.dim), res.iterations, "lbfgs"), report


def minibatch_size(n: int, m: int, b: Optional[int] = None) -> int:
    """Global minibatch size rounded up to a multiple of m; default sqrt(n)."""
    if b is None:
        b = max(1, int(round(math.sqrt(n))))
    if b < m:
        raise ConfigError(f"minibatch size {b} is smaller than the node count {m}")
    return int(math.ceil(b / m) * m)


def run_minibatch(shard: Dataset, strategy: Strategy, objective: Objective,
                  collective: Optional[Collective] = None, *, test: Optional[Dataset] = None,
                  metric: str = "auprc", monitor: bool = True, throttle=None) -> tuple:
    """Synchronous minibatch gradient descent.

    Each update, every node sums the gradient over its next b/m examples and
    one vector AllReduce (gradient plus example count) forms the global
    minibatch gradient. The step is 1 / (L + gamma sqrt(t/m)).
    """
    collective = collective or LocalCollective()
    _mark_pass_done(collective)
    m = getattr(collective, "m", 1)
    report = RunReport(Kind.MINIBATCH.value, test_metric_name=metric)
    rec = _Recorder(report, collective, objective, test, metric, monitor)
    # setup: global example count
    n = int(_phase("minibatch", collective.allreduce_scalar, float(shard.n)))
    _fix_rank(report, collective)
    strategy.validate(m)
    b = minibatch_size(n, m, strategy.minibatch)
    per_node = b // m
    updates = -(-n // b)
    w = np.zeros(shard.dim)
    t = 0
    X = shard.matrix
    lam_n = objective.lam / max(n, 1)
    t_start = time.perf_counter()
    for p in range(strategy.passes):
        for u in range(updates):
            lo, hi = min(u * per_node, shard.n), min((u + 1) * per_node, shard.n)
            Xb = X[lo:hi]
            if hi > lo:
                _, slope, _ = pointwise(Xb @ w, shard.labels[lo:hi], objective.loss)
                g_local = Xb.T @ (slope * shard.importance[lo:hi])
            else:
                g_local = np.zeros(shard.dim)
            tot = _phase("minibatch", collective.allreduce, np.concatenate([g_local, [float(hi - lo)]]))
            count = tot[-1]
            t += 1
            if count > 0:
                g = tot[:-1] / count + lam_n * w
                w = w - decayed_rate(t, strategy.lr_L, strategy.lr_gamma, m) * g
            if throttle is not None:
                throttle.tick()
        f = rec.global_objective(w, shard) if monitor else math.nan
        rec.row("minibatch", p + 1, f, w)
    report.phase_seconds["minibatch"] = time.perf_counter() - t_start
    return ModelState(w, np.ones(shard.dim), strategy.passes, "minibatch"), report


def run_overcomplete(shard: Dataset, strategy: Strategy, objective: Objective,
                     collective: Optional[Collective] = None, *, test: Optional[Dataset] = None,
                     metric: str = "auprc", monitor: bool = True, throttle=None) -> tuple:
    """Independent plain SGD on each (replicated) shard, then one uniform average.

    The online phase optimizes the unregularized loss, like the adaptive pass.
    """
    collective = collective or LocalCollective()
    report = RunReport(Kind.OVERCOMPLETE.value, test_metric_name=metric)
    rec = _Recorder(report, collective, objective, test, metric, monitor)
    t_start = time.perf_counter()
    w, t = np.zeros(shard.dim), 0
    for _ in range(strategy.passes):
        w, t = _phase("overcomplete", sgd_decay_pass, shard, w, strategy.lr_L, strategy.lr_gamma, t,
                      objective.loss, throttle)
    _mark_pass_done(collective)
    w = _phase("averaging", uniform_average, w, collective)
    _fix_rank(report, collective)
    report.phase_seconds["overcomplete"] = time.perf_counter() - t_start
    f = rec.global_objective(w, shard, weight=strategy.replication) if monitor else math.nan
    rec.row("overcomplete", strategy.passes * strategy.replication, f, w)
    return ModelState(w, np.ones(shard.dim), strategy.passes, "overcomplete"), report


RUNNERS = {
    Kind.HYBRID: run_hybrid,
    Kind.ONLINE: run_online_repeated,
    Kind.BATCH: run_batch,
    Kind.MINIBATCH: run_minibatch,
    Kind.OVERCOMPLETE: run_overcomplete,
}


def run_strategy(shard: Dataset, strategy: Strategy, objective: Objective, collective: Optional[Collective] = None,
                 **kw) -> tuple:
    return RUNNERS[strategy.kind](shard, strategy, objective, collective, **kw)


# ---------------------------------------------------------------------------
# model files

MODEL_MAGIC = b"TLMODEL1"
_MODEL_HEAD = struct.Struct("<8sBBxxIId")
_LOSS_CODES = {LossKind.LOGISTIC: 0, LossKind.SQUARED: 1}


@dataclass
class SavedModel:
    w: np.ndarray
    bits: int
    loss: LossKind
    lam: float

    @property
    def dim(self) -> int:
        return self.w.size


def save_model(path, w: np.ndarray, bits: int, loss: LossKind, lam: float):
    """Header (magic, bits, loss, dimension, lambda) then little-endian doubles."""
    w = np.ascontiguousarray(w, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(_MODEL_HEAD.pack(MODEL_MAGIC, bits, _LOSS_CODES[loss], 0, w.size, lam))
        fh.write(w.tobytes())


def load_model(path) -> SavedModel:
    raw = Path(path).read_bytes()
    if len(raw) < _MODEL_HEAD.size:
        raise ValueError(f"{path}: truncated model header")
    magic, bits, loss, _, dim, lam = _MODEL_HEAD.unpack_from(raw)
    if magic != MODEL_MAGIC:
        raise ValueError(f"{path}: not a model file")
    body = raw[_MODEL_HEAD.size:]
    if len(body) != 8 * dim:
        raise ValueError(f"{path}: expected {dim} weights, found {len(body) // 8}")
    codes = {v: k for k, v in _LOSS_CODES.items()}
    if loss not in codes:
        raise ValueError(f"{path}: unknown loss code {loss}")
    return SavedModel(np.frombuffer(body, dtype="<f8").astype(np.float64), bits, codes[loss], lam)
