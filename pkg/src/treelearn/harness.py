"""A local multi-process cluster: shards the data, runs the coordinator in
this process and one worker subprocess per (shard, duplicate).

Duplicates of a shard race through their first pass; the coordinator
admits whichever reports first and the harness kills the others.
"""
from __future__ import annotations

import csv
import logging
import os
import shutil
import subprocess
import sys
import threading
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .comm import Coordinator, parse_tag
from .data import overcomplete_shards, shard_dataset
from .strategies import REPORT_COLUMNS, ConfigError

log = logging.getLogger(__name__)

PORT_RETRIES = 3


class LaunchError(RuntimeError):
    pass


@dataclass
class HarnessPlan:
    m: int
    duplicates: int = 1
    slow: dict = field(default_factory=dict)  # shard -> delay factor, applied to duplicate 0
    worker_args: list = field(default_factory=list)
    out_dir: Optional[Path] = None
    port: int = 0
    timeout: float = 300.0
    replication: int = 1

    def __post_init__(self):
        if self.m < 1:
            raise ConfigError("node count must be >= 1")
        if self.duplicates < 1:
            raise ConfigError("duplicates per shard must be >= 1")
        for r, f in self.slow.items():
            if not 0 <= r < self.m:
                raise ConfigError(f"slow rank {r} is not in [0, {self.m})")
            if not f >= 1:
                raise ConfigError(f"delay factor for rank {r} must be >= 1, got {f}")


def inject_delay(plan: HarnessPlan, rank: int, factor: float) -> HarnessPlan:
    """Mark ``rank`` (its first duplicate) as ``factor`` times slower."""
    if not 0 <= rank < plan.m:
        raise ConfigError(f"unknown rank {rank} for a {plan.m}-node plan")
    if not factor >= 1:
        raise ConfigError(f"delay factor must be >= 1, got {factor}")
    if factor == 1:
        plan.slow.pop(rank, None)
    else:
        plan.slow[rank] = float(factor)
    return plan


def parse_slow(text: str) -> dict:
    """``"0:10,3:2.5"`` -> {0: 10.0, 3: 2.5}."""
    out = {}
    for part in filter(None, (p.strip() for p in (text or "").split(","))):
        rank, sep, factor = part.partition(":")
        if not sep:
            raise ConfigError(f"expected RANK:FACTOR, got {part!r}")
        try:
            out[int(rank)] = float(factor)
        except ValueError:
            raise ConfigError(f"expected RANK:FACTOR, got {part!r}") from None
    return out


@dataclass
class LaunchResult:
    status: int
    wall_seconds: float
    survivors: list  # tags in rank order
    out_dir: Path
    model: Optional[Path]
    report: Optional[Path]
    rejected: list = field(default_factory=list)


def _strip_flag(args: list, flag: str) -> tuple:
    """Remove ``flag VALUE`` (or ``flag=VALUE``) from args; return (args, value)."""
    out, value, i = [], None, 0
    while i < len(args):
        a = args[i]
        if a == flag and i + 1 < len(args):
            value = args[i + 1]
            i += 2
            continue
        if a.startswith(flag + "="):
            value = a.split("=", 1)[1]
            i += 1
            continue
        out.append(a)
        i += 1
    return out, value


def _coordinator(plan: HarnessPlan, job: str, on_admit) -> Coordinator:
    last = None
    for attempt in range(PORT_RETRIES):
        try:
            return Coordinator(plan.m, job, port=plan.port, timeout=plan.timeout, on_admit=on_admit).start()
        except OSError as exc:
            last = exc
            log.warning("coordinator port %d busy (attempt %d): %s", plan.port, attempt + 1, exc)
            time.sleep(0.2 * (attempt + 1))
    raise LaunchError(f"could not bind the coordinator after {PORT_RETRIES} attempts: {last}")


def _kill(proc: subprocess.Popen):
    if proc.poll() is None:
        proc.kill()
    try:
        proc.wait(5)
    except subprocess.TimeoutExpired:
        pass


def merge_reports(paths: list, out_path) -> list:
    """Concatenate per-node reports and add a ``stall_seconds`` column.

    Stall for a node at a given row is its cumulative AllReduce time minus
    the smallest such time across nodes at the same row: the extra time it
    spent waiting for slower peers rather than moving bytes.
    """
    tables = []
    for p in paths:
        with open(p, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        tables.append(rows)
    depth = min((len(t) for t in tables), default=0)
    floor = [min(float(t[i]["allreduce_seconds"]) for t in tables) for i in range(depth)]
    merged = []
    for t in tables:
        for i, row in enumerate(t):
            stall = float(row["allreduce_seconds"]) - floor[i] if i < depth else float("nan")
            merged.append({**row, "stall_seconds": f"{stall:.6f}"})
    with open(out_path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS + ["stall_seconds"], lineterminator="\n")
        wr.writeheader()
        wr.writerows(merged)
    return merged


def launch(plan: HarnessPlan, dataset, *, python: str = sys.executable, quiet: bool = True) -> LaunchResult:
    dataset = Path(dataset)
    if not dataset.is_file():
        raise LaunchError(f"dataset {dataset} does not exist")
    out = Path(plan.out_dir or dataset.parent / f"run-{uuid.uuid4().hex[:8]}")
    out.mkdir(parents=True, exist_ok=True)
    args, model_dst = _strip_flag(list(plan.worker_args), "--model")
    args, report_dst = _strip_flag(args, "--report")
    args, _ = _strip_flag(args, "--data")
    _, strategy = _strip_flag(args, "--strategy")
    shard_dir = out / "shards"
    if strategy == "overcomplete" and plan.replication > 1:
        manifest = overcomplete_shards(dataset, plan.m, plan.replication, shard_dir)
    else:
        manifest = shard_dataset(dataset, plan.m, shard_dir)

    job = uuid.uuid4().hex[:12]
    procs: dict = {}  # (shard, dup) -> Popen
    lock = threading.Lock()
    admitted: dict = {}

    def on_admit(shard, tag):
        dup = int(parse_tag(tag).get("dup", 0))
        with lock:
            admitted[shard] = dup
            for (s, d), p in procs.items():
                if s == shard and d != dup:
                    _kill(p)

    t0 = time.perf_counter()
    coord = _coordinator(plan, job, on_admit)
    env = dict(os.environ)
    src = str(Path(__file__).resolve().parents[1])
    env["PYTHONPATH"] = src + (os.pathsep + env["PYTHONPATH"] if env.get("PYTHONPATH") else "")
    logs = []
    try:
        with lock:
            for k in range(plan.m):
                for j in range(plan.duplicates):
                    cmd = [python, "-m", "treelearn", "worker", "--coordinator", coord.address, "--job-id", job,
                           "--nodes", str(plan.m), "--data", str(manifest.paths[k]), "--tag", f"shard={k};dup={j}",
                           "--model", str(out / f"model.{k}.{j}.bin"), "--report", str(out / f"report.{k}.{j}.csv")]
                    if j == 0 and k in plan.slow:
                        cmd += ["--slow", repr(plan.slow[k])]
                    cmd += args
                    fh = open(out / f"worker.{k}.{j}.log", "wb")
                    logs.append(fh)
                    if k in admitted and admitted[k] != j:
                        continue
                    procs[(k, j)] = subprocess.Popen(cmd, stdout=fh, stderr=subprocess.STDOUT, env=env)
        failure = _supervise(plan, procs, admitted, lock, coord)
        record = coord.join(5)
        if failure is None and record.aborted:
            failure = f"coordinator aborted: {record.reason}"
    finally:
        coord.stop()
        for p in list(procs.values()):
            _kill(p)
        for fh in logs:
            fh.close()
    wall = time.perf_counter() - t0
    survivors = [r.tag for r in record.assignments] if not record.aborted else []
    (out / "survivors.txt").write_text("".join(f"{s}\n" for s in survivors), encoding="utf-8")
    if failure is not None:
        log.error("launch failed: %s", failure)
        return LaunchResult(1, wall, survivors, out, None, None, record.rejected)
    reports = []
    for tag in survivors:
        t = parse_tag(tag)
        reports.append(out / f"report.{t['shard']}.{t.get('dup', '0')}.csv")
    report = Path(report_dst) if report_dst else out / "report.csv"
    merge_reports(reports, report)
    if report != out / "report.csv":
        shutil.copyfile(report, out / "report.csv")
    t0_tag = parse_tag(survivors[0])
    model = out / f"model.{t0_tag['shard']}.{t0_tag.get('dup', '0')}.bin"
    if model_dst:
        shutil.copyfile(model, model_dst)
        model = Path(model_dst)
    return LaunchResult(0, wall, survivors, out, model, report, record.rejected)


def _supervise(plan, procs, admitted, lock, coord) -> Optional[str]:
    """Wait for the survivors; returns a failure description or None."""
    deadline = time.monotonic() + plan.timeout
    while True:
        with lock:
            items = list(procs.items())
            adm = dict(admitted)
        for k in range(plan.m):
            mine = [(j, p) for (s, j), p in items if s == k]
            if k in adm:
                p = procs.get((k, adm[k]))
                rc = p.poll() if p is not None else None
                if rc not in (None, 0):
                    return f"shard {k} (duplicate {adm[k]}) exited with status {rc}"
            elif mine and all(p.poll() not in (None,) and p.returncode != 0 for _, p in mine):
                return f"all {len(mine)} duplicates of shard {k} failed before joining the tree"
        if len(adm) == plan.m:
            survivors = [procs[(k, adm[k])] for k in range(plan.m)]
            if all(p.poll() == 0 for p in survivors):
                return None
        if coord.record.aborted:
            return f"coordinator aborted: {coord.record.reason}"
        if time.monotonic() > deadline:
            return "timed out waiting for workers"
        time.sleep(0.02)
