"""Run m tree nodes on this machine, as threads or as processes."""
from __future__ import annotations

import multiprocessing as mp
import threading
import uuid
from concurrent.futures import ProcessPoolExecutor

from .comm import DEFAULT_CHUNK_BYTES, Coordinator, TreeSession


def run_threads(m, fn, *args, chunk_bytes=DEFAULT_CHUNK_BYTES, timeout=60.0):
    """Call ``fn(session, *args)`` on m connected nodes; rank i runs in thread i.

    Returns the per-rank results; re-raises the first failure.
    """
    job = uuid.uuid4().hex
    coord = Coordinator(m, job, timeout=timeout).start()
    results = [None] * m
    errors = []

    def body(i):
        try:
            with TreeSession.connect(coord.address, job, m, tag=f"shard={i}",
                                     chunk_bytes=chunk_bytes, timeout=timeout) as s:
                results[i] = fn(s, *args)
        except BaseException as exc:  # surfaced in the caller's thread
            errors.append((i, exc))

    threads = [threading.Thread(target=body, args=(i,), daemon=True) for i in range(m)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    coord.stop()
    coord.join(5)
    if errors:
        i, exc = min(errors, key=lambda e: e[0])
        raise RuntimeError(f"node {i} failed: {exc!r}") from exc
    return results


def _process_entry(address, job, m, i, chunk_bytes, timeout, fn, args):
    with TreeSession.connect(address, job, m, tag=f"shard={i}", chunk_bytes=chunk_bytes, timeout=timeout) as s:
        return fn(s, *args)


def run_processes(m, fn, *args, chunk_bytes=DEFAULT_CHUNK_BYTES, timeout=120.0, per_rank_args=None):
    """Like :func:`run_threads` but each node is a separate (spawned) process.

    ``fn`` must be importable at module level. ``per_rank_args[i]``, when
    given, replaces ``args`` for rank i.
    """
    job = uuid.uuid4().hex
    coord = Coordinator(m, job, timeout=timeout).start()
    ctx = mp.get_context("spawn")
    try:
        with ProcessPoolExecutor(max_workers=m, mp_context=ctx) as pool:
            futs = [
                pool.submit(_process_entry, coord.address, job, m, i, chunk_bytes, timeout, fn,
                            per_rank_args[i] if per_rank_args is not None else args)
                for i in range(m)
            ]
            return [f.result() for f in futs]
    finally:
        coord.stop()
        coord.join(5)
