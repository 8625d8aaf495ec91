"""Command-line entry point: ``treelearn {coordinator,worker,launch,eval,commcost}``.

Exit status is 0 on success, 1 on a runtime failure and 2 on bad usage.
"""
from __future__ import annotations

import argparse
import logging
import math
import sys
from pathlib import Path

import numpy as np

from .comm import DEFAULT_HANDSHAKE_TIMEOUT, CollectiveError, LazySession, coordinator_serve, split_address
from .data import DEFAULT_BITS, ParseError, load_dataset
from .metrics import METRICS, CostInputs, MetricUndefined, comm_cost
from .model import LossKind, Objective
from .online import Invariance
from .strategies import ConfigError, Kind, PhaseError, Strategy, Throttle, load_model, run_strategy, save_model

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2

log = logging.getLogger("treelearn")


class UsageError(Exception):
    pass


def _address(text):
    try:
        split_address(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None
    return text


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _bits(text):
    v = int(text)
    if not 1 <= v <= 31:
        raise argparse.ArgumentTypeError("bits must be in [1, 31]")
    return v


def add_worker_flags(p: argparse.ArgumentParser, *, harness: bool = False):
    if not harness:
        p.add_argument("--coordinator", required=True, type=_address, metavar="HOST:PORT")
        p.add_argument("--job-id", required=True)
        p.add_argument("--nodes", type=_positive_int, required=True, help="number of tree nodes")
        p.add_argument("--data", required=True, help="this node's shard")
        p.add_argument("--tag", default="", help="identity sent to the coordinator, e.g. shard=0;dup=1")
        p.add_argument("--slow", type=float, default=1.0, help="emulate a node this many times slower")
    p.add_argument("--bits", type=_bits, default=DEFAULT_BITS)
    p.add_argument("--loss", choices=[k.value for k in LossKind], default="logistic")
    p.add_argument("--l2", type=float, default=0.0)
    p.add_argument("--strategy", choices=[k.value for k in Kind], default="hybrid")
    p.add_argument("--online-passes", type=int, default=1)
    p.add_argument("--lbfgs-iters", type=int, default=20)
    p.add_argument("--lbfgs-memory", type=int, default=10)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--eta", type=float, default=0.5)
    p.add_argument("--plain-updates", action="store_true", help="disable importance-aware steps")
    p.add_argument("--minibatch", type=int, default=None)
    p.add_argument("--lr-L", type=float, default=1.0)
    p.add_argument("--lr-gamma", type=float, default=1.0)
    p.add_argument("--passes", type=int, default=1, help="passes for minibatch and overcomplete")
    p.add_argument("--replication", type=int, default=1)
    p.add_argument("--model", default=None)
    p.add_argument("--report", default=None)
    p.add_argument("--test", default=None)
    p.add_argument("--test-metric", choices=sorted(METRICS), default="auprc")
    p.add_argument("--timeout", type=float, default=DEFAULT_HANDSHAKE_TIMEOUT)


def strategy_from_args(a, m: int = 1) -> Strategy:
    return Strategy(
        kind=Kind(a.strategy),
        online_passes=a.online_passes,
        lbfgs_iters=a.lbfgs_iters,
        lbfgs_memory=a.lbfgs_memory,
        tol=a.tol,
        eta=a.eta,
        invariance=Invariance.PLAIN if a.plain_updates else Invariance.IMPORTANCE_AWARE,
        minibatch=a.minibatch,
        lr_L=a.lr_L,
        lr_gamma=a.lr_gamma,
        passes=a.passes,
        replication=a.replication,
    ).validate(m)


def worker_main(a) -> int:
    try:
        strategy = strategy_from_args(a, a.nodes)
        objective = Objective(LossKind(a.loss), a.l2, 1 << a.bits)
    except (ConfigError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    phase = "load"
    try:
        shard = load_dataset(a.data, a.bits)
        test = load_dataset(a.test, a.bits) if a.test else None
        phase = "train"
        with LazySession(a.coordinator, a.job_id, a.nodes, tag=a.tag, timeout=a.timeout) as coll:
            throttle = Throttle(a.slow, coll) if a.slow > 1 else None
            if throttle is not None:
                throttle.tick()
            state, report = run_strategy(shard, strategy, objective, coll, test=test, metric=a.test_metric,
                                         throttle=throttle)
            phase = "write"
            if a.model:
                save_model(a.model, state.w, a.bits, objective.loss, objective.lam)
            if a.report:
                report.write(a.report)
            st = coll.stats
            log.info("rank %d done: %d vector + %d scalar collectives, %d bytes sent, %.3fs in allreduce",
                     report.rank, st.vector_calls, st.scalar_calls, st.bytes_sent, st.seconds)
    except PhaseError as exc:
        print(f"worker {a.tag or ''}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (CollectiveError, ParseError, OSError, ValueError) as exc:
        print(f"worker {a.tag or ''}: phase {phase!r} failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def coordinator_main(a) -> int:
    print(f"coordinator: job {a.job_id}, {a.nodes} nodes, port {a.port}", flush=True)
    try:
        record = coordinator_serve(a.port, a.nodes, a.job_id, a.timeout, a.host)
    except OSError as exc:
        print(f"coordinator: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    for tag, reason in record.rejected:
        print(f"rejected {tag}: {reason}", flush=True)
    if record.aborted:
        print(f"coordinator: aborted: {record.reason}", file=sys.stderr)
        return EXIT_RUNTIME
    for reg in record.assignments:
        print(f"rank {reg.rank}: {reg.host}:{reg.data_port} {reg.tag}", flush=True)
    return EXIT_OK


def launch_main(a) -> int:
    from .harness import HarnessPlan, LaunchError, launch, parse_slow

    wargs = list(a.worker_args)
    if wargs and wargs[0] == "--":
        wargs = wargs[1:]
    # check the passthrough flags here so typos are usage errors, not worker crashes
    wp = argparse.ArgumentParser(prog="treelearn launch ... --", add_help=False)
    add_worker_flags(wp, harness=True)
    try:
        wa = wp.parse_args(wargs)
        strategy_from_args(wa, a.nodes)
        plan = HarnessPlan(a.nodes, a.duplicates, parse_slow(a.slow), wargs, a.out, a.port, a.timeout,
                           wa.replication)
    except SystemExit:
        return EXIT_USAGE
    except ConfigError as exc:
        raise UsageError(str(exc)) from None
    try:
        res = launch(plan, a.dataset)
    except LaunchError as exc:
        print(f"launch: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"survivors: {' '.join(res.survivors)}")
    print(f"output: {res.out_dir}")
    print(f"wall seconds: {res.wall_seconds:.3f}")
    if res.status != 0:
        print("launch: run failed; see worker logs in the output directory", file=sys.stderr)
    return res.status


def eval_main(a) -> int:
    names = [s.strip() for s in a.metrics.split(",") if s.strip()]
    bad = [n for n in names if n not in METRICS]
    if bad or not names:
        raise UsageError(f"unknown metrics {bad}; choose from {sorted(METRICS)}")
    try:
        model = load_model(a.model)
        test = load_dataset(a.test, model.bits)
    except (OSError, ValueError) as exc:
        print(f"eval: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    if test.dim != model.dim:
        print(f"eval: model dimension {model.dim} does not match 2**{model.bits}", file=sys.stderr)
        return EXIT_RUNTIME
    z = test.matrix @ model.w
    values = []
    for n in names:
        scores = 1.0 / (1.0 + np.exp(-z)) if (n == "nll" or model.loss is LossKind.LOGISTIC) else z
        try:
            values.append(METRICS[n](scores, test.labels))
        except MetricUndefined:
            values.append(math.nan)
    print(",".join(names))
    print(",".join(repr(v) for v in values))
    return EXIT_OK


def commcost_main(a) -> int:
    try:
        cost = comm_cost(a.algo, CostInputs(a.m, a.n, a.s, a.d, a.T, a.b, a.rep))
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    value = int(cost.value) if cost.value.is_integer() else cost.value
    print(f"{cost.algorithm}: {cost.formula} = {value}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="treelearn", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("coordinator", help="serve the spanning tree for one job")
    c.add_argument("--port", type=int, required=True)
    c.add_argument("--nodes", type=_positive_int, required=True)
    c.add_argument("--job-id", required=True)
    c.add_argument("--timeout", type=float, default=DEFAULT_HANDSHAKE_TIMEOUT)
    c.add_argument("--host", default="0.0.0.0")
    c.set_defaults(func=coordinator_main)

    w = sub.add_parser("worker", help="train on one shard as a tree node")
    add_worker_flags(w)
    w.set_defaults(func=worker_main)

    la = sub.add_parser("launch", help="run a local cluster of workers",
                        usage="treelearn launch --nodes M --dataset FILE [options] -- <worker flags>")
    la.add_argument("--nodes", type=_positive_int, required=True)
    la.add_argument("--duplicates", type=_positive_int, default=1)
    la.add_argument("--slow", default="", metavar="RANK:FACTOR[,..]")
    la.add_argument("--dataset", required=True)
    la.add_argument("--out", type=Path, default=None, help="output directory")
    la.add_argument("--port", type=int, default=0)
    la.add_argument("--timeout", type=float, default=300.0)
    la.add_argument("worker_args", nargs=argparse.REMAINDER)
    la.set_defaults(func=launch_main)

    e = sub.add_parser("eval", help="score a saved model on a labelled file")
    e.add_argument("--model", required=True)
    e.add_argument("--test", required=True)
    e.add_argument("--metrics", default="auroc,auprc,nll")
    e.set_defaults(func=eval_main)

    cc = sub.add_parser("commcost", help="per-node communication cost of an algorithm family")
    cc.add_argument("--algo", required=True)
    cc.add_argument("--n", type=int, required=True)
    cc.add_argument("--d", type=int, required=True)
    cc.add_argument("--s", type=float, required=True)
    cc.add_argument("--m", type=int, required=True)
    cc.add_argument("--T", type=float, required=True)
    cc.add_argument("--b", type=int, default=None)
    cc.add_argument("--rep", type=float, default=None)
    cc.set_defaults(func=commcost_main)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        a = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if a.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return a.func(a)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"treelearn {a.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
