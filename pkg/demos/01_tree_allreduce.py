"""Sum vectors across a handful of local nodes and check the answer.

Each node is a thread holding a real TCP session; the coordinator hands out
parents and children in heap order, so rank r talks to (r-1)//2 above and
2r+1, 2r+2 below.
"""
import numpy as np

from treelearn.comm import ReduceOp, tree_reduce_serial
from treelearn.local import run_threads

M, N = 7, 100_000


def contribute(sess):
    x = np.random.default_rng(sess.rank).normal(size=N)
    total = sess.allreduce(x)
    peak = sess.allreduce(x, ReduceOp.MAX)
    return total, peak, sess.stats


results = run_threads(M, contribute)
inputs = [np.random.default_rng(r).normal(size=N) for r in range(M)]
want = tree_reduce_serial(inputs)

# every node gets the same bits, and they match the serial replay of the tree order
print("nodes agree:", all(r[0].tobytes() == results[0][0].tobytes() for r in results))
print("matches serial replay:", results[0][0].tobytes() == want.tobytes())
print("max matches np.max:", np.array_equal(results[0][1], np.max(inputs, axis=0)))

# a plain left-to-right sum usually differs in the last bits
naive = np.sum(inputs, axis=0)
print("coordinates differing from a naive sum:", int(np.count_nonzero(naive != want)))

for rank, (_, _, st) in enumerate(results):
    print(f"rank {rank}: {st.vector_calls} collectives, {st.bytes_sent / 1e6:.1f} MB sent")
