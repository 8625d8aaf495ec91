"""One online pass before L-BFGS, versus L-BFGS from zero.

Four nodes each hold a quarter of a synthetic logistic problem. The hybrid
run does an adaptive-gradient pass per node, averages the nodes weighted by
their accumulated squared gradients, then hands that point to L-BFGS.
"""
import numpy as np

from treelearn import Kind, LossKind, Objective, Strategy, make_logistic
from treelearn.local import run_threads
from treelearn.strategies import run_batch, run_hybrid

ds, _ = make_logistic(100_000, 4096, nnz=10, seed=3)
obj = Objective(LossKind.LOGISTIC, 1e-4, 4096)


def train(sess, runner, strategy):
    shard = ds.subset(np.arange(sess.rank, ds.n, sess.m))
    out = []
    runner(shard, strategy, obj, sess, lbfgs_result=out, monitor=False)
    return out[0]


batch = run_threads(4, train, run_batch, Strategy(Kind.BATCH, lbfgs_iters=120, tol=0))[0]
hybrid = run_threads(4, train, run_hybrid, Strategy(Kind.HYBRID, online_passes=1, lbfgs_iters=120, tol=0))[0]
best = min(batch.objective, hybrid.objective)

print("iter   batch gap     hybrid gap")
for i in range(0, 31, 3):
    b = batch.trace[i].objective - best if i < len(batch.trace) else float("nan")
    h = hybrid.trace[i].objective - best if i < len(hybrid.trace) else float("nan")
    print(f"{i:4d}   {b:.3e}     {h:.3e}")


def first_below(res, eps):
    return next((r.iteration for r in res.trace if r.objective - best <= eps), None)


for eps in (1e-3, 1e-4, 1e-5, 1e-6):
    print(f"iterations to within {eps:g}: batch {first_below(batch, eps)}, hybrid {first_below(hybrid, eps)}")
