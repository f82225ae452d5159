"""Command line interface.

Subcommands: ``gen`` synthesizes paired object/query traces, ``partition``
builds and serializes a tree, ``run`` replays a trace pair through the
simulated cluster, ``migrate-bench`` compares the cell-selection
algorithms, and ``verify`` diffs a run against the brute-force matcher.
"""

from __future__ import annotations

import argparse
import random
import sys
import time

from . import traces, workload
from .adjust import select_cells_dp, select_cells_gr, select_cells_ra, select_cells_si
from .model import CostModel, Rect, TermDict, TermStats
from .partition import build_partition, parse_tree, serialize_tree
from .runtime import RunConfig, centralized_matches, run
from .worker import CellStat


def _rect(text: str) -> Rect:
    vals = [float(v) for v in text.split(",")]
    if len(vals) != 4:
        raise argparse.ArgumentTypeError("expected minx,miny,maxx,maxy")
    return Rect.of(*vals)


def _costs(text: str) -> CostModel:
    vals = [float(v) for v in text.split(",")]
    if len(vals) != 4:
        raise argparse.ArgumentTypeError("expected c1,c2,c3,c4")
    return CostModel(*vals)


def _add_common_run_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--objects", required=True, help="object trace path")
    p.add_argument("--queries", required=True, help="query op trace path")
    p.add_argument("--m", type=int, default=8, help="worker count")
    p.add_argument("--sigma", type=float, default=1.3)
    p.add_argument("--delta", type=float, default=0.7)
    p.add_argument("--theta", type=int, default=None)
    p.add_argument("--costs", type=_costs, default=CostModel())
    p.add_argument("--space", type=_rect, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument(
        "--strategy",
        choices=["hybrid", "space-grid", "space-kdtree", "text-frequency"],
        default="hybrid",
    )


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="geopubsub")
    sub = ap.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("gen", help="synthesize paired object and query traces")
    g.add_argument("--count", type=int, default=1000, help="number of queries")
    g.add_argument("--profile", choices=["q1", "q2", "q3"], default="q1")
    g.add_argument("--ratio", type=float, default=5.0)
    g.add_argument("--mu", type=float, default=200.0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--vocab", type=int, default=2000)
    g.add_argument("--space", type=_rect, default=Rect.of(0, 0, 512, 512))
    g.add_argument("--objects-out", required=True)
    g.add_argument("--queries-out", required=True)

    p = sub.add_parser("partition", help="build and serialize a partition tree")
    _add_common_run_args(p)
    p.add_argument("--out", default=None, help="tree file (default: stdout)")

    r = sub.add_parser("run", help="replay a trace pair through the cluster")
    _add_common_run_args(r)
    r.add_argument("--d", type=int, default=1, help="dispatcher count")
    r.add_argument(
        "--migration", choices=["dp", "gr", "si", "ra", "off"], default="gr"
    )
    r.add_argument("--window", type=int, default=10_000)
    r.add_argument("--warmup", type=int, default=50_000)
    r.add_argument("--global-period", type=int, default=None)
    r.add_argument("--metrics", default=None, help="per-window CSV output path")
    r.add_argument("--miglog", default=None, help="migration log output path")
    r.add_argument("--verify", action="store_true", help="diff against the oracle")

    b = sub.add_parser("migrate-bench", help="compare DP/GR/SI/RA selectors")
    b.add_argument("--cells", type=int, default=100)
    b.add_argument("--instances", type=int, default=100)
    b.add_argument("--tau-frac", type=float, default=0.3)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--dp-quantum", type=int, default=1024)

    v = sub.add_parser("verify", help="run with the oracle and diff outputs")
    _add_common_run_args(v)
    v.add_argument("--d", type=int, default=1)
    v.add_argument(
        "--migration", choices=["dp", "gr", "si", "ra", "off"], default="gr"
    )
    v.add_argument("--window", type=int, default=10_000)
    v.add_argument("--warmup", type=int, default=50_000)
    return ap


def _cmd_gen(args) -> int:
    n_objects = round(args.ratio * 2 * args.count)
    objects, terms = workload.synthesize_objects(
        n_objects, args.space, args.seed, vocab_size=args.vocab
    )
    stats = TermStats.from_objects(objects)
    if args.profile == "q3":
        profile = workload.QueryProfile.q3(workload.half_and_half_kind_map(args.seed))
    elif args.profile == "q2":
        profile = workload.QueryProfile.q2()
    else:
        profile = workload.QueryProfile.q1()
    queries = workload.synthesize_queries(
        stats,
        [o.loc for o in objects],
        profile,
        args.count,
        args.seed,
        args.space,
    )
    ops = workload.schedule_query_ops(
        queries, workload.StreamSchedule(ratio=args.ratio, mu=args.mu, seed=args.seed)
    )
    traces.write_objects(args.objects_out, objects, terms)
    traces.write_query_ops(args.queries_out, ops, terms)
    print(
        f"wrote {len(objects)} objects to {args.objects_out}, "
        f"{len(ops)} query ops to {args.queries_out}"
    )
    return 0


def _load_pair(args, terms: TermDict):
    objects, bad_o = traces.read_objects(args.objects, terms)
    ops, bad_q = traces.read_query_ops(args.queries, terms)
    return objects, ops, bad_o + bad_q


def _cmd_partition(args) -> int:
    terms = TermDict()
    objects, ops, _bad = _load_pair(args, terms)
    inserts = [q for kind, q in ops if kind == traces.INS]
    stats = TermStats.from_objects(objects)
    cfg = RunConfig(
        m=args.m, strategy=args.strategy, sigma=args.sigma, delta=args.delta,
        theta=args.theta, costs=args.costs, seed=args.seed, space=args.space,
    )
    rng = random.Random(args.seed)
    objs = objects
    if len(objs) > cfg.partition_sample_objects:
        objs = rng.sample(objs, cfg.partition_sample_objects)
    qrys = inserts
    if len(qrys) > cfg.partition_sample_queries:
        qrys = rng.sample(qrys, cfg.partition_sample_queries)
    assignment = build_partition(
        args.strategy, objs, qrys, cfg.partition_params(), args.costs, stats,
        args.space,
    )
    text = serialize_tree(assignment.tree, terms)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    for w, load in enumerate(assignment.worker_loads, start=1):
        print(f"worker {w} estimated load {load:.3f}")
    print(
        f"total {assignment.total_load:.3f} balance {assignment.balance_factor:.3f} "
        f"units {len(assignment.units)}"
    )
    return 0


def _run_config(args) -> RunConfig:
    return RunConfig(
        m=args.m,
        d=getattr(args, "d", 1),
        strategy=args.strategy,
        migration=getattr(args, "migration", "gr"),
        window=getattr(args, "window", 10_000),
        warmup=getattr(args, "warmup", 50_000),
        sigma=args.sigma,
        delta=args.delta,
        theta=args.theta,
        costs=args.costs,
        seed=args.seed,
        space=args.space,
        global_period=getattr(args, "global_period", None),
    )


def _cmd_run(args, verify_only: bool = False) -> int:
    terms = TermDict()
    objects, ops, malformed = _load_pair(args, terms)
    events = traces.interleave(objects, ops)
    report = run(_run_config(args), events=events, malformed=malformed)
    print(
        f"processed {report.processed} tuples in {report.wall_seconds:.2f}s "
        f"({report.throughput:.0f} tuples/s), {len(report.results)} matches, "
        f"{report.discarded} discarded, {report.malformed} malformed"
    )
    metrics_path = getattr(args, "metrics", None)
    if metrics_path:
        with open(metrics_path, "w", encoding="utf-8") as fh:
            m = args.m
            heads = ",".join(f"load_w{w}" for w in range(1, m + 1))
            fh.write(f"window,throughput,p50_latency,p99_latency,{heads}\n")
            for row in report.windows:
                fh.write(row.csv_line() + "\n")
    miglog_path = getattr(args, "miglog", None)
    if miglog_path:
        with open(miglog_path, "w", encoding="utf-8") as fh:
            fh.write("window,src,dst,n_cells,sum_L,sum_S,algo,plan_ms\n")
            for ev in report.migrations:
                fh.write(ev.log_line() + "\n")
    if verify_only or getattr(args, "verify", False):
        expected = centralized_matches(events)
        diffs = len(report.results ^ expected)
        print(f"{diffs} diffs against the centralized matcher")
        return 0 if diffs == 0 else 1
    return 0


def _cmd_migrate_bench(args) -> int:
    rng = random.Random(args.seed)
    rows = []
    for i in range(args.instances):
        cells = [
            CellStat((j, 0), float(rng.randint(1, 100)), rng.randint(100, 10_000), False)
            for j in range(args.cells)
        ]
        tau = args.tau_frac * sum(c.load for c in cells)
        for name, fn in (
            ("dp", lambda c, t: select_cells_dp(c, t, quantum=args.dp_quantum)),
            ("gr", select_cells_gr),
            ("si", select_cells_si),
            ("ra", lambda c, t: select_cells_ra(c, t, seed=args.seed + i)),
        ):
            t0 = time.perf_counter()
            plan = fn(cells, tau)
            ms = (time.perf_counter() - t0) * 1000.0
            rows.append((name, plan.cost_bytes, len(plan.cells), ms))
    print("algo,mean_cost_bytes,mean_cells,mean_ms")
    for name in ("dp", "gr", "si", "ra"):
        sel = [r for r in rows if r[0] == name]
        n = len(sel)
        print(
            f"{name},{sum(r[1] for r in sel) / n:.1f},"
            f"{sum(r[2] for r in sel) / n:.2f},{sum(r[3] for r in sel) / n:.3f}"
        )
    return 0


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.cmd == "gen":
        return _cmd_gen(args)
    if args.cmd == "partition":
        return _cmd_partition(args)
    if args.cmd == "run":
        return _cmd_run(args)
    if args.cmd == "migrate-bench":
        return _cmd_migrate_bench(args)
    if args.cmd == "verify":
        return _cmd_run(args, verify_only=True)
    raise AssertionError(args.cmd)


if __name__ == "__main__":
    sys.exit(main())
