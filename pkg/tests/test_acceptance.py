"""Acceptance suite. Every test prints one ``[PASS]`` or ``[FAIL]`` line with
the measured numbers, then asserts; the lines are repeated in an
"acceptance criteria" section at the end of the pytest run.

    python3 -m pytest tests/test_acceptance.py -v -s
    python3 tests/test_acceptance.py          # same, summary lines only
"""
import hashlib
import math
import statistics
import sys
import time
from pathlib import Path

import numpy as np
import pytest
from scipy.optimize import minimize

sys.path.insert(0, str(Path(__file__).resolve().parent))

from test_averaging import _avg, jensen_gap, oracle  # noqa: E402
from test_metrics import pair_oracle, random_set, threshold_oracle  # noqa: E402
from test_model import fd_gradient_errors, fd_hessian_errors  # noqa: E402

from treelearn.cli import main as cli_main  # noqa: E402
from treelearn.comm import tree_reduce_serial  # noqa: E402
from treelearn.data import make_logistic, write_named  # noqa: E402
from treelearn.harness import HarnessPlan, launch  # noqa: E402
from treelearn.local import run_processes, run_threads  # noqa: E402
from treelearn.metrics import CostInputs, auprc, auroc, comm_cost, nll, sqrt_minibatch  # noqa: E402
from treelearn.strategies import (REPORT_COLUMNS, Kind, Strategy, load_model, read_report,  # noqa: E402
                                  run_batch, run_hybrid, run_strategy, save_model)

pytestmark = pytest.mark.slow


def verdict(record, n, title, ok, detail):
    """Print the criterion line, keep it for the end-of-run summary, then assert."""
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {n:2d} {title}: {detail}"
    print(line, flush=True)
    record("acceptance", line)
    assert ok, line


def _shard(ds, sess):
    return ds.subset(np.arange(sess.rank, ds.n, sess.m))


@pytest.fixture(scope="module")
def f_star(synthetic):
    """Long-run optimum of the scaled objective from scipy's L-BFGS-B on plain floats."""
    ds, obj = synthetic
    X, y, n = ds.matrix, 2 * ds.labels - 1, ds.n

    def fg(w):
        z = X @ w
        f = np.logaddexp(0, -y * z).sum() + 0.5 * obj.lam * (w @ w)
        g = X.T @ (-y / (1 + np.exp(y * z))) + obj.lam * w
        return f / n, g / n

    r = minimize(fg, np.zeros(ds.dim), jac=True, method="L-BFGS-B",
                 options=dict(maxiter=20000, gtol=1e-12, ftol=1e-16, maxcor=30))
    return float(r.fun)


def _lbfgs(sess, ds, obj, strategy, kind):
    shard = _shard(ds, sess) if sess is not None else ds
    out = []
    run = {Kind.BATCH: run_batch, Kind.HYBRID: run_hybrid}[kind]
    run(shard, strategy, obj, sess, lbfgs_result=out, monitor=False)
    return out[0]


@pytest.fixture(scope="module")
def batch_runs(synthetic):
    ds, obj = synthetic
    s = Strategy(Kind.BATCH, lbfgs_iters=200, tol=0)
    single = _lbfgs(None, ds, obj, s, Kind.BATCH)
    four = run_threads(4, _lbfgs, ds, obj, s, Kind.BATCH, timeout=300)
    return single, four


# ---------------------------------------------------------------------------
# 1, 2: AllReduce


def _digests(sess, m, lengths):
    out = []
    for n in lengths:
        x = np.random.default_rng([m, sess.rank, n]).normal(size=n)
        out.append(hashlib.sha256(sess.allreduce(x).tobytes()).hexdigest())
    return out


def test_criterion_01_allreduce_correctness(record_property):
    lengths = [1, 10**3, 10**6]
    t0 = time.perf_counter()
    bad = []
    for m in (2, 3, 4, 8, 16):
        got = run_processes(m, _digests, m, lengths, timeout=120)
        for i, n in enumerate(lengths):
            want = hashlib.sha256(tree_reduce_serial(
                [np.random.default_rng([m, r, n]).normal(size=n) for r in range(m)]).tobytes()).hexdigest()
            if any(g[i] != want for g in got):
                bad.append((m, n))
    secs = time.perf_counter() - t0
    verdict(record_property, 1, "AllReduce bitwise vs serial oracle", not bad and secs < 60,
            f"mismatches={bad}, {secs:.1f}s for m in 2,3,4,8,16 x len 1,1e3,1e6 (limit 60s)")


def _timed(sess, sizes, reps):
    out = {}
    for n in sizes:
        x = np.random.default_rng(sess.rank).random(n)
        ts = []
        for _ in range(reps):
            sess.allreduce_scalar(0.0)  # start together
            t = time.perf_counter()
            y = sess.allreduce(x)
            ts.append(time.perf_counter() - t)
            del y
        out[n] = ts
        del x
    return out


def test_criterion_02_pipelining(record_property):
    small, big = 10**7, 2 * 10**7
    res = run_processes(8, _timed, [small, big], 3, timeout=600)
    med = {n: statistics.median(max(r[n][i] for r in res) for i in range(3)) for n in (small, big)}
    ratio = med[big] / med[small]
    verdict(record_property, 2, "pipelined AllReduce scaling", ratio <= 2.5,
            f"8 processes, median 1e7={med[small]:.3f}s 2e7={med[big]:.3f}s ratio={ratio:.2f} (limit 2.5)")


# ---------------------------------------------------------------------------
# 3, 4: averaging and gradients


def test_criterion_03_averaging(record_property):
    worst = 0.0
    for case in range(50):
        rng = np.random.default_rng(case)
        m, d = int(rng.integers(1, 9)), int(rng.integers(1, 1001))
        ws = [rng.normal(size=d) * 10 for _ in range(m)]
        gs = [1 + rng.exponential(5, size=d) * (rng.random(d) < 0.7) for _ in range(m)]
        w_want, g_want = oracle(ws, gs)
        for w, g, _ in run_threads(m, _avg, ws, gs):
            worst = max(worst, float(np.max(np.abs(w - w_want) / np.maximum(np.abs(w_want), 1e-300))),
                        float(np.max(np.abs(g - g_want) / g_want)))
    rng = np.random.default_rng(2024)
    violations = 0
    for _ in range(10_000):
        lhs, rhs = jensen_gap(rng)
        violations += lhs > rhs + 1e-12
    verdict(record_property, 3, "weighted averaging oracle and Jensen", worst <= 1e-15 and violations == 0,
            f"max relative error {worst:.2e} over 50 cases (limit 1e-15); Jensen violations {violations}/10000")


def test_criterion_04_gradient_fidelity(record_property):
    g = max(fd_gradient_errors(s) for s in range(100))
    h = max(fd_hessian_errors(s) for s in range(100))
    verdict(record_property, 4, "gradient and Hessian diagonal vs finite differences", g <= 1e-6 and h <= 1e-6,
            f"worst relative error gradient {g:.2e}, Hessian diagonal {h:.2e} over 100 instances (limit 1e-6)")


# ---------------------------------------------------------------------------
# 5-7: optimizer behaviour on the synthetic set


def test_criterion_05_distributed_equals_serial(batch_runs, f_star, record_property):
    single, four = batch_runs
    trace1 = [(r.objective, r.grad_norm) for r in single.trace]
    same = all([(r.objective, r.grad_norm) for r in res.trace] == trace1 and res.w.tobytes() == single.w.tobytes()
               for res in four)
    gap = abs(single.objective - f_star)
    verdict(record_property, 5, "m=4 L-BFGS trace equals m=1", same and gap <= 1e-8,
            f"{len(trace1)} iterates bitwise equal on all 4 nodes: {same}; final objective {single.objective:.12f}, "
            f"reference {f_star:.12f}, gap {gap:.1e} (limit 1e-8)")


def _iters_to(result, f_star, eps=1e-6):
    for r in result.trace:
        if r.objective - f_star <= eps:
            return r.iteration
    return None


def test_criterion_06_warmstart(batch_runs, synthetic, f_star, record_property):
    ds, obj = synthetic
    t0 = time.perf_counter()
    hybrid = run_threads(4, _lbfgs, ds, obj, Strategy(Kind.HYBRID, online_passes=1, lbfgs_iters=60, tol=0),
                         Kind.HYBRID, timeout=300)[0]
    cold = _iters_to(batch_runs[1][0], f_star)
    warm = _iters_to(hybrid, f_star)
    secs = time.perf_counter() - t0
    ok = cold is not None and warm is not None and cold - warm >= 3 and secs < 300
    verdict(record_property, 6, "warmstart saves L-BFGS iterations", ok,
            f"iterations to 1e-6 suboptimality: BATCH {cold}, HYBRID(1 pass) {warm}, "
            f"saving {None if cold is None or warm is None else cold - warm} (need >= 3)")


def _passes(sess, ds, obj, strategy):
    return run_strategy(_shard(ds, sess), strategy, obj, sess)[1].by_pass()


def test_criterion_07_strategy_ordering(batch_runs, synthetic, record_property):
    ds, obj = synthetic
    online = run_threads(4, _passes, ds, obj, Strategy(Kind.ONLINE, online_passes=20), timeout=300)[0]
    hybrid = run_threads(4, _passes, ds, obj, Strategy(Kind.HYBRID, online_passes=1, lbfgs_iters=19, tol=0),
                         timeout=300)[0]
    batch = {r.iteration: r.objective for r in batch_runs[1][0].trace}
    late = hybrid[20] <= online[20]
    early = online[1] < batch[1] and online[2] < batch[2]
    tie = online[1] == hybrid[1]
    verdict(record_property, 7, "strategy ordering", late and early and tie,
            f"pass 20: HYBRID {hybrid[20]:.6f} <= ONLINE {online[20]:.6f}: {late}; "
            f"pass 1-2: ONLINE {online[1]:.4f},{online[2]:.4f} < BATCH {batch[1]:.4f},{batch[2]:.4f}: {early}; "
            f"pass 1 ONLINE == HYBRID: {tie}; pass-2 HYBRID minus ONLINE {hybrid[2] - online[2]:+.4f}")


# ---------------------------------------------------------------------------
# 8, 9: speculation and communication


def test_criterion_08_speculative_execution(synthetic, tmp_path, record_property):
    # m=2: with one CPU, every extra process competes for the same core (see the notes in the README)
    ds, _ = synthetic
    data = tmp_path / "train.txt"
    write_named(ds, data)
    args = ["--bits", "12", "--l2", "1e-4", "--strategy", "hybrid", "--lbfgs-iters", "60", "--tol", "0"]
    t0 = time.perf_counter()
    walls = {1: [], 2: []}
    winners = []
    for rep in range(3):
        for k in (1, 2):
            res = launch(HarnessPlan(2, k, {0: 10.0}, args, tmp_path / f"run{k}.{rep}", timeout=300), data)
            assert res.status == 0
            walls[k].append(res.wall_seconds)
            if k == 2:
                winners.append(res.survivors[0])
    ratio = statistics.median(walls[2]) / statistics.median(walls[1])
    fast_won = all(w == "shard=0;dup=1" for w in winners)
    secs = time.perf_counter() - t0
    verdict(record_property, 8, "speculative execution", ratio <= 0.5 and fast_won and secs < 300,
            f"m=2, rank 0 delayed 10x: median wall k=1 {statistics.median(walls[1]):.2f}s, "
            f"k=2 {statistics.median(walls[2]):.2f}s, ratio {ratio:.2f} (limit 0.5); shard 0 survivors {winners}")


def _comm(sess, ds, obj, strategy):
    run_strategy(_shard(ds, sess), strategy, obj, sess)
    return sess.stats.vector_calls, sess.stats.bytes_sent


def test_criterion_09_minibatch_burden(synthetic, record_property):
    ds, obj = synthetic
    m, T = 4, 10
    b = sqrt_minibatch(ds.n, m)
    mb = run_threads(m, _comm, ds, obj, Strategy(Kind.MINIBATCH, minibatch=b, passes=T), timeout=600)
    hy = run_threads(m, _comm, ds, obj, Strategy(Kind.HYBRID, online_passes=1, lbfgs_iters=T - 1, tol=0),
                     timeout=300)
    calls = mb[0][0] / hy[0][0]
    measured = sum(x[1] for x in mb) / sum(x[1] for x in hy)
    s = ds.nnz / ds.n
    cost = dict(m=m, n=ds.n, s=s, d=ds.dim, T=T)
    predicted = comm_cost("minibatch", CostInputs(b=b, **cost)).value / comm_cost("hybrid", CostInputs(**cost)).value
    within = 0.5 <= predicted / measured <= 2
    verdict(record_property, 9, "minibatch communication burden", calls >= 10 and within,
            f"b={b}, {T} passes: vector collectives MINIBATCH {mb[0][0]} vs HYBRID {hy[0][0]} ({calls:.1f}x, need >= 10); "
            f"byte ratio measured {measured:.1f}, predicted {predicted:.1f} (within 2x: {within})")


# ---------------------------------------------------------------------------
# 10, 11


def test_criterion_10_metrics(record_property):
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        scores, labels = random_set(rng, int(rng.integers(2, 60)), ties=bool(seed % 2))
        worst = max(worst, abs(auroc(scores, labels) - pair_oracle(scores, labels)),
                    abs(auprc(scores, labels) - threshold_oracle(scores, labels)))
    half = nll(np.full(101, 0.5), np.arange(101) % 2)
    verdict(record_property, 10, "metrics vs oracles", worst <= 1e-12 and half == math.log(2),
            f"max deviation {worst:.1e} over 100 sets (limit 1e-12); NLL(0.5) == ln 2: {half == math.log(2)}")


def test_criterion_11_cli_end_to_end(tmp_path, capsys, record_property):
    ds, _ = make_logistic(20_000, 4096, nnz=10, seed=8)
    data, test = tmp_path / "train.txt", tmp_path / "test.txt"
    write_named(ds.subset(np.arange(16_000)), data)
    write_named(ds.subset(np.arange(16_000, 20_000)), test)
    out = tmp_path / "run"
    rc = cli_main(["launch", "--nodes", "4", "--dataset", str(data), "--out", str(out), "--",
                   "--bits", "12", "--l2", "1e-4", "--strategy", "hybrid", "--online-passes", "1",
                   "--lbfgs-iters", "10", "--test", str(test), "--model", str(tmp_path / "model.bin")])
    problems = []
    if rc != 0:
        problems.append(f"launch exit {rc}")
    else:
        from treelearn.data import load_dataset
        model = load_model(tmp_path / "model.bin")
        td = load_dataset(test, model.bits)
        z = td.matrix @ model.w
        for k in range(4):
            if (td.matrix @ load_model(out / f"model.{k}.0.bin").w).tobytes() != z.tobytes():
                problems.append(f"rank {k} model differs")
        save_model(tmp_path / "again.bin", model.w, model.bits, model.loss, model.lam)
        if (td.matrix @ load_model(tmp_path / "again.bin").w).tobytes() != z.tobytes():
            problems.append("save/load round trip changed predictions")
        for p in [out / "report.csv"] + [out / f"report.{k}.0.csv" for k in range(4)]:
            rows = read_report(p)
            if not rows or list(rows[0])[:len(REPORT_COLUMNS)] != REPORT_COLUMNS:
                problems.append(f"{p.name}: bad header")
            passes = [r["pass"] for r in rows if r["rank"] == rows[0]["rank"]]
            if passes != sorted(passes) or not all(math.isfinite(r["objective"]) for r in rows):
                problems.append(f"{p.name}: malformed rows")
        if {r["rank"] for r in read_report(out / "report.csv")} != {0, 1, 2, 3}:
            problems.append("merged report misses a rank")
        capsys.readouterr()
        cli_main(["eval", "--model", str(tmp_path / "model.bin"), "--test", str(test)])
        head, vals = capsys.readouterr().out.strip().splitlines()
        if head != "auroc,auprc,nll" or not 0.5 < float(vals.split(",")[0]) <= 1:
            problems.append(f"eval output {head!r} {vals!r}")
    verdict(record_property, 11, "CLI launch, model reload, reports", not problems,
            "4-node HYBRID launch, reloaded predictions bitwise identical, reports well formed"
            if not problems else "; ".join(problems))


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
