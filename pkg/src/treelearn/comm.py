"""Tree-structured AllReduce over TCP.

A coordinator (the spanning-tree server) collects one handshake per worker,
lays the workers out as a binary heap and tells each one the endpoints of
its parent and children. Workers then connect to each other directly and
run collectives: values are summed up the tree chunk by chunk and the
result is streamed back down, so the depth of the tree only costs a few
chunk latencies instead of full vector transfers.

Wire format (all integers little-endian)::

    frame      := u32 length, payload
    handshake  := u16 len, job_id utf-8, u32 m, u16 data_port, u8 pass_done,
                  [u16 len, tag utf-8]
    reply      := u32 rank, endpoint parent, u8 n_children, endpoint*
    endpoint   := u16 len, host utf-8, u16 port      (len 0 = absent)
    header     := u64 seq, u64 length, u8 op         (per collective)

A reply whose rank is ``ABORT`` or ``REJECT`` carries a utf-8 reason instead
of endpoints.
"""
from __future__ import annotations

import enum
import logging
import socket
import struct
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

log = logging.getLogger(__name__)

DEFAULT_CHUNK_BYTES = 65536
DEFAULT_HANDSHAKE_TIMEOUT = 60.0

ABORT = 0xFFFFFFFF
REJECT = 0xFFFFFFFE

_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")
_HEADER = struct.Struct("<QQB")
_DOUBLE = np.dtype("<f8")

_STATUS_OK = b"\x01"
_STATUS_BAD = b"\x00"


class CollectiveError(RuntimeError):
    """Base class for failures of the communication layer."""


class ProtocolError(CollectiveError):
    """A peer sent something that violates the protocol."""


class CommunicationError(CollectiveError):
    """A socket failed or a peer went away."""


class SessionAborted(CollectiveError):
    """The coordinator gave up on the session before the tree was formed."""


class Rejected(ProtocolError):
    """The coordinator refused this worker (wrong job, surplus, superseded)."""


class ReduceOp(enum.IntEnum):
    SUM = 0
    MAX = 1
    MIN = 2

    def combine(self, acc: np.ndarray, other: np.ndarray) -> None:
        """acc <- acc (op) other, in place."""
        if self is ReduceOp.SUM:
            np.add(acc, other, out=acc)
        elif self is ReduceOp.MAX:
            np.maximum(acc, other, out=acc)
        else:
            np.minimum(acc, other, out=acc)


# ---------------------------------------------------------------------------
# topology


Endpoint = tuple  # (host, port)


@dataclass(frozen=True)
class TreeTopology:
    rank: int
    m: int
    parent: Optional[Endpoint] = None
    children: tuple = ()

    @property
    def parent_rank(self) -> Optional[int]:
        return parent_rank(self.rank)

    @property
    def child_ranks(self) -> tuple:
        return child_ranks(self.rank, self.m)


def parent_rank(rank: int) -> Optional[int]:
    return None if rank == 0 else (rank - 1) // 2


def child_ranks(rank: int, m: int) -> tuple:
    return tuple(c for c in (2 * rank + 1, 2 * rank + 2) if c < m)


def tree_depth(m: int) -> int:
    """Number of levels of the heap-ordered tree on m nodes."""
    return m.bit_length()


def build_topology(m: int, rank: int, endpoints: Optional[Sequence[Endpoint]] = None) -> TreeTopology:
    """Heap layout: parent of r is (r-1)//2, children are 2r+1 and 2r+2.

    ``endpoints`` maps rank -> (host, port); without it the topology only
    carries ranks (useful for oracles and tests).
    """
    if m < 1:
        raise ValueError(f"node count must be >= 1, got {m}")
    if not 0 <= rank < m:
        raise ValueError(f"rank {rank} out of range for m={m}")
    p = parent_rank(rank)
    kids = child_ranks(rank, m)
    if endpoints is None:
        return TreeTopology(rank, m, None if p is None else ("", p), tuple(("", c) for c in kids))
    return TreeTopology(
        rank,
        m,
        None if p is None else tuple(endpoints[p]),
        tuple(tuple(endpoints[c]) for c in kids),
    )


def tree_reduce_serial(vectors: Sequence[np.ndarray], op: ReduceOp = ReduceOp.SUM) -> np.ndarray:
    """Replay the tree's reduction order in one process.

    Node r contributes ``(left + right) + own``; this is the order the
    distributed implementation uses, so the results agree bitwise.
    """
    m = len(vectors)

    def value(r):
        kids = child_ranks(r, m)
        own = np.asarray(vectors[r], dtype=np.float64)
        if not kids:
            return own.copy()
        acc = value(kids[0])
        if len(kids) == 2:
            op.combine(acc, value(kids[1]))
        op.combine(acc, own)
        return acc

    return value(0)


# ---------------------------------------------------------------------------
# framing


def _recv_exact_into(sock: socket.socket, view: memoryview) -> None:
    got = 0
    n = len(view)
    while got < n:
        try:
            k = sock.recv_into(view[got:], n - got)
        except socket.timeout as exc:
            raise CommunicationError("timed out waiting for peer") from exc
        except OSError as exc:
            raise CommunicationError(f"receive failed: {exc}") from exc
        if k == 0:
            raise CommunicationError("peer closed the connection")
        got += k


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray(n)
    _recv_exact_into(sock, memoryview(buf))
    return bytes(buf)


def send_frame(sock: socket.socket, payload) -> int:
    """Send one length-prefixed frame; returns bytes written."""
    view = memoryview(payload).cast("B")
    try:
        sock.sendall(_U32.pack(len(view)))
        sock.sendall(view)
    except OSError as exc:
        raise CommunicationError(f"send failed: {exc}") from exc
    return len(view) + 4


def recv_frame(sock: socket.socket, max_len: int = 1 << 20) -> bytes:
    (n,) = _U32.unpack(_recv_exact(sock, 4))
    if n > max_len:
        raise ProtocolError(f"frame of {n} bytes exceeds limit {max_len}")
    return _recv_exact(sock, n)


def recv_frame_into(sock: socket.socket, out: np.ndarray) -> int:
    """Receive one frame straight into ``out``; its length must match."""
    (n,) = _U32.unpack(_recv_exact(sock, 4))
    if n != out.nbytes:
        raise ProtocolError(f"expected a {out.nbytes}-byte chunk, got {n}")
    _recv_exact_into(sock, memoryview(out).cast("B"))
    return n + 4


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return _U16.pack(len(raw)) + raw


def _unpack_str(buf: bytes, pos: int) -> tuple:
    (n,) = _U16.unpack_from(buf, pos)
    pos += 2
    return buf[pos : pos + n].decode("utf-8"), pos + n


@dataclass
class Handshake:
    job_id: str
    m: int
    data_port: int
    pass_done: bool = False
    tag: str = ""

    def encode(self) -> bytes:
        out = _pack_str(self.job_id) + _U32.pack(self.m) + _U16.pack(self.data_port)
        out += b"\x01" if self.pass_done else b"\x00"
        if self.tag:
            out += _pack_str(self.tag)
        return out

    @classmethod
    def decode(cls, buf: bytes) -> "Handshake":
        try:
            job_id, pos = _unpack_str(buf, 0)
            (m,) = _U32.unpack_from(buf, pos)
            (port,) = _U16.unpack_from(buf, pos + 4)
            done = buf[pos + 6] != 0
            pos += 7
            tag = ""
            if pos < len(buf):
                tag, pos = _unpack_str(buf, pos)
        except (struct.error, IndexError, UnicodeDecodeError) as exc:
            raise ProtocolError(f"malformed handshake: {exc}") from exc
        if pos != len(buf):
            raise ProtocolError("trailing bytes in handshake")
        return cls(job_id, m, port, done, tag)


def _pack_endpoint(ep: Optional[Endpoint]) -> bytes:
    if ep is None:
        return _U16.pack(0) + _U16.pack(0)
    return _pack_str(ep[0]) + _U16.pack(ep[1])


def encode_reply(topo: TreeTopology) -> bytes:
    out = _U32.pack(topo.rank) + _pack_endpoint(topo.parent)
    out += bytes([len(topo.children)])
    for ep in topo.children:
        out += _pack_endpoint(ep)
    return out


def encode_refusal(code: int, reason: str) -> bytes:
    return _U32.pack(code) + _pack_str(reason)


def decode_reply(buf: bytes, m: int) -> TreeTopology:
    """Parse a coordinator reply; raises on abort/reject markers."""
    try:
        (rank,) = _U32.unpack_from(buf, 0)
        if rank in (ABORT, REJECT):
            reason, _ = _unpack_str(buf, 4)
            exc = SessionAborted if rank == ABORT else Rejected
            raise exc(reason)
        host, pos = _unpack_str(buf, 4)
        (port,) = _U16.unpack_from(buf, pos)
        pos += 2
        parent = (host, port) if host else None
        n_kids = buf[pos]
        pos += 1
        kids = []
        for _ in range(n_kids):
            h, pos = _unpack_str(buf, pos)
            (p,) = _U16.unpack_from(buf, pos)
            pos += 2
            kids.append((h, p))
    except (struct.error, IndexError, UnicodeDecodeError) as exc:
        raise ProtocolError(f"malformed reply: {exc}") from exc
    if not 0 <= rank < m:
        raise ProtocolError(f"coordinator assigned rank {rank} outside [0, {m})")
    return TreeTopology(rank, m, parent, tuple(kids))


# ---------------------------------------------------------------------------
# coordinator


def parse_tag(tag: str) -> dict:
    """``"shard=3;dup=1"`` -> ``{"shard": "3", "dup": "1"}``."""
    out = {}
    for part in filter(None, tag.split(";")):
        k, _, v = part.partition("=")
        out[k.strip()] = v.strip()
    return out


@dataclass
class Registration:
    rank: int
    host: str
    data_port: int
    pass_done: bool
    tag: str
    arrived: float


@dataclass
class SessionRecord:
    job_id: str
    m: int
    assignments: list = field(default_factory=list)  # Registration, sorted by rank
    rejected: list = field(default_factory=list)  # (tag or peer, reason)
    aborted: bool = False
    reason: str = ""

    @property
    def survivors(self) -> list:
        return [r.tag for r in self.assignments]


class Coordinator:
    """Spanning-tree server for one job.

    Ranks follow arrival order, except that workers whose tag names a shard
    (``shard=k``) get rank k; in that mode only the first worker to report
    for each shard is admitted and later duplicates are rejected.
    ``on_admit(shard, tag)`` is called as soon as a shard's survivor is known.
    """

    def __init__(
        self,
        m: int,
        job_id: str,
        port: int = 0,
        host: str = "127.0.0.1",
        timeout: float = DEFAULT_HANDSHAKE_TIMEOUT,
        on_admit: Optional[Callable[[int, str], None]] = None,
        linger: float = 0.0,
    ):
        if m < 1:
            raise ValueError("node count must be >= 1")
        self.m = m
        self.job_id = job_id
        self.timeout = timeout
        self.on_admit = on_admit
        self.linger = linger
        self._server = socket.create_server((host, port), backlog=max(16, 4 * m))
        self.host, self.port = self._server.getsockname()[:2]
        self.record = SessionRecord(job_id, m)
        self._thread: Optional[threading.Thread] = None
        self._stop = threading.Event()

    @property
    def address(self) -> str:
        return f"{self.host}:{self.port}"

    def start(self) -> "Coordinator":
        self._thread = threading.Thread(target=self._run_quietly, name="coordinator", daemon=True)
        self._thread.start()
        return self

    def _run_quietly(self):
        try:
            self.serve()
        except Exception:  # recorded in self.record; the thread must not die noisily
            log.exception("coordinator failed")

    def join(self, timeout: Optional[float] = None) -> SessionRecord:
        if self._thread is not None:
            self._thread.join(timeout)
        return self.record

    def stop(self):
        self._stop.set()

    def serve(self) -> SessionRecord:
        """Accept handshakes until m workers are admitted or the timeout hits."""
        deadline = time.monotonic() + self.timeout
        pending: dict = {}  # rank -> (sock, Registration)
        next_rank = 0
        try:
            while len(pending) < self.m:
                remaining = deadline - time.monotonic()
                if remaining <= 0 or self._stop.is_set():
                    reason = "handshake timeout" if remaining <= 0 else "coordinator stopped"
                    self._abort(pending, reason)
                    return self.record
                self._server.settimeout(min(remaining, 0.2))
                try:
                    conn, peer = self._server.accept()
                except socket.timeout:
                    continue
                conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                conn.settimeout(max(1.0, min(remaining, 10.0)))
                try:
                    hs = Handshake.decode(recv_frame(conn, max_len=4096))
                except CollectiveError as exc:
                    self.record.rejected.append((f"{peer[0]}:{peer[1]}", str(exc)))
                    conn.close()
                    continue
                refusal = self._check(hs)
                shard = None
                if refusal is None and "shard" in parse_tag(hs.tag):
                    try:
                        shard = int(parse_tag(hs.tag)["shard"])
                    except ValueError:
                        refusal = f"bad shard tag {hs.tag!r}"
                    else:
                        if not 0 <= shard < self.m:
                            refusal = f"shard {shard} outside [0, {self.m})"
                        elif shard in pending:
                            refusal = f"superseded: shard {shard} already admitted"
                if refusal is not None:
                    self.record.rejected.append((hs.tag or f"{peer[0]}:{peer[1]}", refusal))
                    self._reply(conn, encode_refusal(REJECT, refusal))
                    continue
                if shard is None:
                    while next_rank in pending:
                        next_rank += 1
                    rank = next_rank
                else:
                    rank = shard
                reg = Registration(rank, peer[0], hs.data_port, hs.pass_done, hs.tag, time.monotonic())
                pending[rank] = (conn, reg)
                log.debug("admitted %s as rank %d", hs.tag or peer, rank)
                if shard is not None and self.on_admit is not None:
                    self.on_admit(shard, hs.tag)
            endpoints = [(pending[r][1].host, pending[r][1].data_port) for r in range(self.m)]
            for r in range(self.m):
                conn, reg = pending[r]
                self._reply(conn, encode_reply(build_topology(self.m, r, endpoints)))
                self.record.assignments.append(reg)
            self._refuse_surplus()
            return self.record
        finally:
            self._server.close()

    def _refuse_surplus(self):
        """For ``linger`` seconds after the tree forms, tell late workers the job is full."""
        end = time.monotonic() + self.linger
        while not self._stop.is_set() and (remaining := end - time.monotonic()) > 0:
            self._server.settimeout(min(remaining, 0.2))
            try:
                conn, peer = self._server.accept()
            except socket.timeout:
                continue
            conn.settimeout(2.0)
            try:
                hs = Handshake.decode(recv_frame(conn, max_len=4096))
                who = hs.tag or f"{peer[0]}:{peer[1]}"
            except CollectiveError:
                who = f"{peer[0]}:{peer[1]}"
            reason = f"job {self.job_id!r} already has {self.m} nodes"
            self.record.rejected.append((who, reason))
            self._reply(conn, encode_refusal(REJECT, reason))

    def _check(self, hs: Handshake) -> Optional[str]:
        if hs.job_id != self.job_id:
            return f"unknown job {hs.job_id!r}"
        if hs.m != self.m:
            return f"job {self.job_id!r} has {self.m} nodes, worker expected {hs.m}"
        return None

    def _reply(self, conn, payload):
        try:
            send_frame(conn, payload)
        except CollectiveError:
            pass
        finally:
            conn.close()

    def _abort(self, pending, reason):
        self.record.aborted = True
        self.record.reason = reason
        for conn, _ in pending.values():
            self._reply(conn, encode_refusal(ABORT, reason))


def coordinator_serve(port: int, m: int, job_id: str, timeout: float = DEFAULT_HANDSHAKE_TIMEOUT,
                      host: str = "0.0.0.0") -> SessionRecord:
    return Coordinator(m, job_id, port=port, host=host, timeout=timeout).serve()


# ---------------------------------------------------------------------------
# collectives


@dataclass
class CommStats:
    """Collective counters. Monitoring traffic (objective reporting that the
    algorithm itself does not need) is kept apart from the algorithm's own."""

    vector_calls: int = 0
    scalar_calls: int = 0
    bytes_sent: int = 0
    bytes_received: int = 0
    seconds: float = 0.0
    monitor_calls: int = 0
    monitor_bytes: int = 0
    monitor_seconds: float = 0.0

    @property
    def calls(self) -> int:
        return self.vector_calls + self.scalar_calls

    def snapshot(self) -> "CommStats":
        return CommStats(**vars(self))


class Collective:
    """What the learning code needs from a communication session."""

    rank: int = 0
    m: int = 1

    def __init__(self):
        self.stats = CommStats()

    def allreduce(self, local, op: ReduceOp = ReduceOp.SUM, *, scalar: bool = False,
                  monitor: bool = False) -> np.ndarray:
        st = self.stats
        t0 = time.perf_counter()
        b0 = (st.bytes_sent, st.bytes_received)
        # not copied: implementations never write into their input
        x = np.ascontiguousarray(np.asarray(local, dtype=_DOUBLE).ravel())
        out = self._allreduce(x, ReduceOp(op))
        dt = time.perf_counter() - t0
        if monitor:
            st.monitor_calls += 1
            st.monitor_seconds += dt
            st.monitor_bytes += st.bytes_sent - b0[0]
            st.bytes_sent, st.bytes_received = b0
        else:
            st.seconds += dt
            if scalar:
                st.scalar_calls += 1
            else:
                st.vector_calls += 1
        return out

    def allreduce_scalar(self, x: float, op: ReduceOp = ReduceOp.SUM) -> float:
        return float(self.allreduce(np.array([x]), op, scalar=True)[0])

    def _allreduce(self, x: np.ndarray, op: ReduceOp) -> np.ndarray:
        raise NotImplementedError

    def close(self):
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class LocalCollective(Collective):
    """Single-node session: every reduction is the identity."""

    def _allreduce(self, x, op):
        return x.copy()


class LazySession(Collective):
    """A tree session that only joins the tree at its first collective.

    Workers run their first pass before any communication; joining late lets
    the coordinator build the tree from whichever duplicates finish first.
    """

    def __init__(self, coordinator: str, job_id: str, m: int, *, tag: str = "",
                 chunk_bytes: int = DEFAULT_CHUNK_BYTES, timeout: float = DEFAULT_HANDSHAKE_TIMEOUT):
        super().__init__()
        self.m = m
        self._args = dict(coordinator=coordinator, job_id=job_id, m=m, tag=tag,
                          chunk_bytes=chunk_bytes, timeout=timeout)
        self.pass_done = False
        self.inner: Optional[TreeSession] = None
        self.connect_seconds = 0.0

    @property
    def rank(self) -> int:
        return self.ensure().rank

    @property
    def connected(self) -> bool:
        return self.inner is not None

    def ensure(self) -> "TreeSession":
        if self.inner is None:
            t0 = time.perf_counter()
            self.inner = TreeSession.connect(pass_done=self.pass_done, **self._args)
            self.inner.stats = self.stats
            self.connect_seconds = time.perf_counter() - t0
        return self.inner

    def _allreduce(self, x, op):
        return self.ensure()._allreduce(x, op)

    def close(self):
        if self.inner is not None:
            self.inner.close()


class TreeSession(Collective):
    """One node's endpoint in the AllReduce tree.

    Not thread-safe; one collective at a time, and every node must issue
    the same sequence of collectives.
    """

    def __init__(self, topology: TreeTopology, parent_sock, child_socks, chunk_bytes=DEFAULT_CHUNK_BYTES):
        super().__init__()
        if chunk_bytes < 8:
            raise ValueError("chunk_bytes must hold at least one double")
        self.topology = topology
        self.rank = topology.rank
        self.m = topology.m
        self.chunk = chunk_bytes // 8
        self._parent = parent_sock
        self._children = list(child_socks)
        self._seq = 0
        self._broken: Optional[str] = None

    # -- setup -------------------------------------------------------------

    @classmethod
    def connect(
        cls,
        coordinator: str,
        job_id: str,
        m: int,
        *,
        pass_done: bool = False,
        tag: str = "",
        chunk_bytes: int = DEFAULT_CHUNK_BYTES,
        timeout: float = DEFAULT_HANDSHAKE_TIMEOUT,
        bind_host: str = "",
    ) -> "TreeSession":
        host, port = split_address(coordinator)
        listener = socket.create_server((bind_host, 0), backlog=4)
        try:
            data_port = listener.getsockname()[1]
            hs = Handshake(job_id, m, data_port, pass_done, tag)
            try:
                with socket.create_connection((host, port), timeout=timeout) as ctl:
                    ctl.settimeout(timeout)
                    send_frame(ctl, hs.encode())
                    topo = decode_reply(recv_frame(ctl), m)
            except OSError as exc:
                raise CommunicationError(f"cannot reach coordinator {coordinator}: {exc}") from exc
            return cls._link(topo, listener, chunk_bytes, timeout)
        finally:
            listener.close()

    @classmethod
    def _link(cls, topo: TreeTopology, listener, chunk_bytes, timeout) -> "TreeSession":
        parent = None
        kids = {}
        try:
            if topo.parent is not None:
                parent = _dial(topo.parent, timeout)
                send_frame(parent, _U32.pack(topo.rank))
            expected = set(topo.child_ranks)
            listener.settimeout(timeout)
            while len(kids) < len(expected):
                try:
                    conn, _ = listener.accept()
                except socket.timeout as exc:
                    raise CommunicationError("children did not connect in time") from exc
                _tune(conn)
                conn.settimeout(timeout)
                (r,) = _U32.unpack(recv_frame(conn, max_len=4))
                if r not in expected or r in kids:
                    conn.close()
                    raise ProtocolError(f"unexpected child rank {r} at rank {topo.rank}")
                kids[r] = conn
        except BaseException:
            if parent is not None:
                parent.close()
            for c in kids.values():
                c.close()
            raise
        for s in [parent, *kids.values()]:
            if s is not None:
                s.settimeout(None)
        return cls(topo, parent, [kids[r] for r in sorted(kids)], chunk_bytes)

    def close(self):
        for s in [self._parent, *self._children]:
            if s is not None:
                try:
                    s.close()
                except OSError:
                    pass
        self._parent = None
        self._children = []
        if self._broken is None:
            self._broken = "session closed"

    # -- the collective ----------------------------------------------------

    def _allreduce(self, x, op):
        if self._broken is not None:
            raise CommunicationError(f"session unusable: {self._broken}")
        try:
            self._agree(x.size, op)
            out = np.empty_like(x)
            self._reduce(x, out, op)
            self._broadcast(out)
            return out
        except CollectiveError as exc:
            self._broken = str(exc)
            self.close()
            raise

    def _send(self, sock, payload):
        self.stats.bytes_sent += send_frame(sock, payload)

    def _agree(self, n, op):
        """Check that every node is running the same collective.

        Headers travel up with a status byte, the root's verdict travels
        down; a mismatch anywhere fails the call on every node.
        """
        self._seq += 1
        mine = _HEADER.pack(self._seq, n, int(op))
        ok = True
        why = ""
        for c in self._children:
            msg = recv_frame(c, max_len=64)
            self.stats.bytes_received += len(msg) + 4
            if msg[:-1] != mine or msg[-1:] != _STATUS_OK:
                ok = False
                if msg[-1:] == _STATUS_OK:
                    seq, length, code = _HEADER.unpack(msg[:-1])
                    why = f"peer called collective #{seq} with length {length}, op {code}; " \
                          f"rank {self.rank} has #{self._seq}, length {n}, op {int(op)}"
        if self._parent is not None:
            self._send(self._parent, mine + (_STATUS_OK if ok else _STATUS_BAD))
            verdict = recv_frame(self._parent, max_len=1)
            self.stats.bytes_received += 5
        else:
            verdict = _STATUS_OK if ok else _STATUS_BAD
        for c in self._children:
            self._send(c, verdict)
        if verdict != _STATUS_OK:
            raise ProtocolError(why or "collective arguments differ across nodes")

    def _reduce(self, x, out, op):
        kids = self._children
        bufs = [np.empty(min(self.chunk, x.size), dtype=_DOUBLE) for _ in kids]
        for a in range(0, x.size, self.chunk):
            b = min(a + self.chunk, x.size)
            seg = out[a:b]
            if not kids:
                seg[:] = x[a:b]
            else:
                for c, buf in zip(kids, bufs):
                    self.stats.bytes_received += recv_frame_into(c, buf[: b - a])
                seg[:] = bufs[0][: b - a]
                if len(kids) == 2:
                    op.combine(seg, bufs[1][: b - a])
                op.combine(seg, x[a:b])
            if self._parent is not None:
                self._send(self._parent, seg)

    def _broadcast(self, out):
        for a in range(0, out.size, self.chunk):
            seg = out[a : a + self.chunk]
            if self._parent is not None:
                self.stats.bytes_received += recv_frame_into(self._parent, seg)
            for c in self._children:
                self._send(c, seg)


def split_address(addr: str) -> tuple:
    host, sep, port = addr.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"expected HOST:PORT, got {addr!r}")
    return host or "127.0.0.1", int(port)


def _tune(sock):
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)


def _dial(ep, timeout, attempts=50):
    last = None
    for _ in range(attempts):
        try:
            s = socket.create_connection(ep, timeout=timeout)
            _tune(s)
            return s
        except OSError as exc:
            last = exc
            time.sleep(0.05)
    raise CommunicationError(f"cannot connect to parent {ep[0]}:{ep[1]}: {last}")
