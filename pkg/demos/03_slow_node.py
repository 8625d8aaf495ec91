"""A local cluster with one slow node, with and without a spare copy.

Rank 0 is made ten times slower. With two copies per shard the coordinator
takes whichever copy of shard 0 finishes its first pass first and the
harness kills the other, so the slow copy never holds the tree back.
"""
import tempfile
from pathlib import Path

from treelearn.data import make_logistic, write_named
from treelearn.harness import HarnessPlan, launch
from treelearn.strategies import read_report

work = Path(tempfile.mkdtemp(prefix="treelearn-demo-"))
ds, _ = make_logistic(40_000, 4096, nnz=10, seed=5)
data = work / "train.txt"
write_named(ds, data)
args = ["--bits", "12", "--l2", "1e-4", "--strategy", "hybrid", "--lbfgs-iters", "30", "--tol", "0"]

for k in (1, 2):
    res = launch(HarnessPlan(2, duplicates=k, slow={0: 10.0}, worker_args=args, out_dir=work / f"k{k}"), data)
    print(f"copies per shard {k}: {res.wall_seconds:.1f}s, survivors {res.survivors}")
    rows = read_report(res.report)
    worst = max(rows, key=lambda r: r["stall_seconds"])
    print(f"  largest stall: rank {worst['rank']} waited {worst['stall_seconds']:.2f}s by pass {worst['pass']}")

print("outputs in", work)
