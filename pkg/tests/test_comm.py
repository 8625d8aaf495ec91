import socket
import threading
import uuid

import numpy as np
import pytest
from hypothesis import given, strategies as st

from treelearn.comm import (ABORT, REJECT, CollectiveError, Coordinator, Handshake, LocalCollective, ProtocolError,
                            ReduceOp, Rejected, SessionAborted, TreeSession, build_topology, decode_reply,
                            encode_refusal, encode_reply, parse_tag, recv_frame, send_frame, tree_depth,
                            tree_reduce_serial)
from treelearn.local import run_threads


# -- topology ---------------------------------------------------------------

def test_single_node_topology():
    t = build_topology(1, 0)
    assert t.parent_rank is None and t.child_ranks == ()


def test_root_of_three():
    t = build_topology(3, 0)
    assert t.parent_rank is None and set(t.child_ranks) == {1, 2}


def test_parent_formula():
    t = build_topology(6, 5)
    assert t.parent_rank == 2 and t.child_ranks == ()


@pytest.mark.parametrize("rank", [-1, 4])
def test_rank_out_of_range(rank):
    with pytest.raises(ValueError):
        build_topology(4, rank)


@given(st.integers(1, 300))
def test_topology_is_a_tree(m):
    parents = {}
    for r in range(m):
        t = build_topology(m, r)
        assert t == build_topology(m, r)
        if r == 0:
            assert t.parent_rank is None
        else:
            assert t.parent_rank == (r - 1) // 2
            parents[r] = t.parent_rank
        assert set(t.child_ranks) == {c for c in (2 * r + 1, 2 * r + 2) if c < m}
    # every node reaches the root
    for r in range(m):
        hops = 0
        while r:
            r = parents[r]
            hops += 1
        assert hops + 1 <= tree_depth(m)
    assert tree_depth(m) <= int(np.ceil(np.log2(m + 1)))


# -- wire format ---------------------------------------------------------------

def test_frame_round_trip():
    a, b = socket.socketpair()
    with a, b:
        payload = np.arange(5, dtype="<f8").tobytes()
        send_frame(a, payload)
        assert recv_frame(b) == payload


def test_frame_length_prefix_is_u32_le():
    a, b = socket.socketpair()
    with a, b:
        send_frame(a, b"abc")
        raw = b.recv(7)
        assert raw == b"\x03\x00\x00\x00abc"


def test_oversized_frame_rejected():
    a, b = socket.socketpair()
    with a, b:
        send_frame(a, b"x" * 100)
        with pytest.raises(ProtocolError):
            recv_frame(b, max_len=10)


@given(st.text(max_size=30), st.integers(1, 2**31), st.integers(0, 65535), st.booleans())
def test_handshake_round_trip(job, m, port, done):
    hs = Handshake(job, m, port, done, "shard=1;dup=0")
    assert Handshake.decode(hs.encode()) == hs


def test_reply_round_trip():
    eps = [("127.0.0.1", 1000 + r) for r in range(5)]
    for r in range(5):
        topo = build_topology(5, r, eps)
        assert decode_reply(encode_reply(topo), 5) == topo


def test_refusals_raise():
    with pytest.raises(SessionAborted, match="slow"):
        decode_reply(encode_refusal(ABORT, "too slow"), 3)
    with pytest.raises(Rejected, match="full"):
        decode_reply(encode_refusal(REJECT, "job full"), 3)


def test_parse_tag():
    assert parse_tag("shard=3;dup=1") == {"shard": "3", "dup": "1"}
    assert parse_tag("") == {}


# -- reduce ops and the oracle ------------------------------------------------

def test_reduce_ops():
    a = np.array([1.0, 5.0, -2.0])
    for op, want in [(ReduceOp.SUM, [3, 5, 1]), (ReduceOp.MAX, [2, 5, 3]), (ReduceOp.MIN, [1, 0, -2])]:
        acc = a.copy()
        op.combine(acc, np.array([2.0, 0.0, 3.0]))
        assert acc.tolist() == want


def test_serial_oracle_order():
    # m=3: root computes (v1 + v2) + v0
    vs = [np.array([1e16]), np.array([1.0]), np.array([-1e16])]
    assert tree_reduce_serial(vs)[0] == (1.0 + -1e16) + 1e16


# -- live sessions (threads) -----------------------------------------------------

def _collect(sess, vectors, op):
    return sess.allreduce(vectors[sess.rank], op)


@pytest.mark.parametrize("m", [1, 2, 3, 5, 8])
def test_threads_match_serial_oracle(m):
    rng = np.random.default_rng(m)
    vectors = [rng.normal(size=10_001) * 10.0 ** rng.integers(-5, 5, size=10_001) for _ in range(m)]
    out = run_threads(m, _collect, vectors, ReduceOp.SUM, chunk_bytes=4096)
    want = tree_reduce_serial(vectors)
    for o in out:
        assert o.tobytes() == want.tobytes()


def test_examples_sum_and_max():
    assert [o.tolist() for o in run_threads(3, _collect, [np.array([1.0]), np.array([2.0]), np.array([3.0])],
                                            ReduceOp.SUM)] == [[6.0]] * 3
    two = run_threads(2, _collect, [np.array([1.0, 2.0]), np.array([3.0, 4.0])], ReduceOp.SUM)
    assert [o.tolist() for o in two] == [[4.0, 6.0]] * 2
    mx = run_threads(3, lambda s: s.allreduce_scalar([-1.0, 0.0, 5.0][s.rank], ReduceOp.MAX))
    assert mx == [5.0] * 3
    ones = run_threads(4, lambda s: s.allreduce_scalar(1.0))
    assert ones == [4.0] * 4


def test_consecutive_collectives_and_stats():
    def body(s):
        a = s.allreduce(np.full(3, s.rank + 1.0))
        b = s.allreduce_scalar(float(s.rank), ReduceOp.MIN)
        return a.tolist(), b, s.stats.vector_calls, s.stats.scalar_calls

    for a, b, v, c in run_threads(4, body):
        assert a == [10.0] * 3 and b == 0.0 and (v, c) == (1, 1)


def test_length_mismatch_fails_everywhere():
    def body(s):
        try:
            s.allreduce(np.zeros(3 if s.rank else 4))
        except ProtocolError as exc:
            return str(exc)
        return None

    out = run_threads(3, body)
    assert all(o is not None for o in out)


def test_peer_disconnect_surfaces_error():
    job = uuid.uuid4().hex
    coord = Coordinator(2, job, timeout=10).start()
    errs = []

    def node(i):
        s = TreeSession.connect(coord.address, job, 2, tag=f"shard={i}")
        if i == 1:
            s.close()
            return
        try:
            s.allreduce(np.ones(1000))
        except CollectiveError as exc:
            errs.append(exc)

    ts = [threading.Thread(target=node, args=(i,)) for i in range(2)]
    [t.start() for t in ts]
    [t.join(20) for t in ts]
    assert len(errs) == 1


def test_local_collective_is_identity_copy():
    c = LocalCollective()
    x = np.arange(4.0)
    y = c.allreduce(x)
    assert y.tolist() == x.tolist() and y is not x


# -- coordinator ------------------------------------------------------------------

def test_coordinator_single_worker():
    job = uuid.uuid4().hex
    coord = Coordinator(1, job, timeout=5).start()
    with TreeSession.connect(coord.address, job, 1) as s:
        assert s.rank == 0 and s.topology.parent is None and s.topology.children == ()
    assert len(coord.join(5).assignments) == 1


def test_coordinator_three_workers_parent_endpoint():
    job = uuid.uuid4().hex
    coord = Coordinator(3, job, timeout=10).start()
    topos = run_threads_with(coord, job, 3)
    ranks = sorted(t.rank for t in topos)
    assert ranks == [0, 1, 2]
    root_port = coord.join(5).assignments[0].data_port
    for t in topos:
        if t.rank:
            assert t.parent[1] == root_port


def run_threads_with(coord, job, m, tags=None):
    out = [None] * m
    errs = []

    def body(i):
        try:
            with TreeSession.connect(coord.address, job, m, tag=(tags or [""] * m)[i], timeout=10) as s:
                out[i] = s.topology
        except Exception as exc:  # noqa: BLE001
            errs.append(exc)

    ts = [threading.Thread(target=body, args=(i,)) for i in range(m)]
    [t.start() for t in ts]
    [t.join(30) for t in ts]
    if errs:
        raise errs[0]
    return out


def test_missing_worker_aborts_all():
    job = uuid.uuid4().hex
    coord = Coordinator(4, job, timeout=1.0).start()
    got = []

    def body():
        try:
            TreeSession.connect(coord.address, job, 4, timeout=10)
        except SessionAborted as exc:
            got.append(exc)

    ts = [threading.Thread(target=body) for _ in range(3)]
    [t.start() for t in ts]
    [t.join(10) for t in ts]
    assert len(got) == 3
    assert coord.join(5).aborted


def test_wrong_job_and_surplus_rejected():
    job = uuid.uuid4().hex
    coord = Coordinator(1, job, timeout=5, linger=2.0).start()
    with pytest.raises(Rejected):
        TreeSession.connect(coord.address, "other", 1, timeout=5)
    with TreeSession.connect(coord.address, job, 1, timeout=5):
        pass
    with pytest.raises(Rejected, match="already has"):
        TreeSession.connect(coord.address, job, 1, timeout=5)


def test_first_reporter_per_shard_wins():
    job = uuid.uuid4().hex
    admitted = []
    coord = Coordinator(2, job, timeout=10, linger=0.5, on_admit=lambda k, tag: admitted.append(tag)).start()
    errs = []

    def dup_late():
        try:
            TreeSession.connect(coord.address, job, 2, tag="shard=0;dup=1", timeout=5)
        except Rejected as exc:
            errs.append(exc)

    def body(tag):
        with TreeSession.connect(coord.address, job, 2, tag=tag, timeout=10) as s:
            return s.rank

    t0 = threading.Thread(target=body, args=("shard=0;dup=0",))
    t0.start()
    while not admitted:
        pass
    late = threading.Thread(target=dup_late)
    late.start()
    late.join(10)
    t1 = threading.Thread(target=body, args=("shard=1;dup=0",))
    t1.start()
    t0.join(10), t1.join(10)
    assert admitted == ["shard=0;dup=0", "shard=1;dup=0"]
    assert len(errs) == 1 and "superseded" in str(errs[0])
    rec = coord.join(5)
    assert rec.survivors == ["shard=0;dup=0", "shard=1;dup=0"]
