"""Deterministic in-process cluster simulation.

Dispatchers, workers, and the merger exchange messages over FIFO channels
driven by a single-context scheduler, so identical configs and seeds replay
identically.  Cell handoffs run as two-phase migrations: tuples aimed at a
moving cell are buffered at prepare time and flushed after commit (or back
to the source on rollback), which keeps the final output set identical to a
run without any migration.
"""

from __future__ import annotations

import time
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from . import traces
from .adjust import (
    SELECTORS,
    CellGroupMerge,
    CellTextSplit,
    MigrationPlan,
    compute_tau,
    global_check_and_repartition,
    phase1_adjust,
)
from .dispatch import Cell, GridTIndex, detect_imbalance
from .model import (
    CostModel,
    MatchResult,
    Rect,
    SpatioTextualObject,
    StsQuery,
    TermStats,
    WorkerLoadSample,
    index_terms,
    worker_load,
)
from .partition import (
    KdtSpaceLeaf,
    KdtTree,
    PartitionParams,
    bounding_rect,
    build_partition,
)
from .worker import CellStat, MigrationError, WorkerEngine, query_size_bytes

import random


# --------------------------------------------------------------------------
# Messages and channels
# --------------------------------------------------------------------------


@dataclass
class ObjectMsg:
    obj: SpatioTextualObject
    tick: int
    control: bool = False


@dataclass
class QueryInsertMsg:
    query: StsQuery
    cells: tuple[Cell, ...]
    tick: int
    control: bool = False


@dataclass
class QueryDeleteMsg:
    qid: int
    tick: int
    control: bool = False


@dataclass
class ScrubMsg:
    """Hard-remove one query's postings from specific cells (repartition
    drain); unlike deletion the query stays live elsewhere."""

    qid: int
    cells: tuple[Cell, ...]


@dataclass
class MatchMsg:
    results: tuple[MatchResult, ...]


class Channel:
    """FIFO link; sequence numbers assert exactly-once in-order delivery."""

    def __init__(self, name: str):
        self.name = name
        self._q: deque = deque()
        self._sent = 0
        self._delivered = 0

    def send(self, msg) -> None:
        self._q.append((self._sent, msg))
        self._sent += 1

    def pop(self):
        seq, msg = self._q.popleft()
        if seq != self._delivered:
            raise RuntimeError(f"channel {self.name} broke FIFO order")
        self._delivered += 1
        return msg

    def __len__(self) -> int:
        return len(self._q)


# --------------------------------------------------------------------------
# Config and metrics
# --------------------------------------------------------------------------


@dataclass
class RunConfig:
    m: int = 4
    d: int = 1
    strategy: str = "hybrid"  # hybrid | space-grid | space-kdtree | text-frequency
    migration: str = "gr"  # dp | gr | si | ra | off
    window: int = 10_000
    warmup: int = 50_000
    sigma: float = 1.3
    delta: float = 0.7
    theta: int | None = None
    epsilon_sim: float = 0.01
    phase1_p: int = 8
    costs: CostModel = field(default_factory=CostModel)
    seed: int = 0
    space: Rect | None = None
    partition_sample_objects: int = 4096
    partition_sample_queries: int = 2048
    bandwidth_bytes_per_tick: int = 4096
    global_period: int | None = None
    global_trigger: float = 0.8
    drain_threshold: float = 0.05
    dp_quantum: int = 1
    fail_migration_index: int | None = None

    def __post_init__(self) -> None:
        if self.m < 1 or self.d < 1:
            raise ValueError("need at least one worker and one dispatcher")

    def partition_params(self) -> PartitionParams:
        return PartitionParams(
            m=self.m,
            sigma=self.sigma,
            delta=self.delta,
            theta=self.theta,
            epsilon_sim=self.epsilon_sim,
        )


@dataclass
class MigrationEvent:
    window: int
    source: int
    target: int
    n_cells: int
    moved_load: float
    cost_bytes: int
    algo: str
    plan_ms: float
    duration_ticks: int
    rolled_back: bool = False

    def log_line(self) -> str:
        return (
            f"{self.window},{self.source},{self.target},{self.n_cells},"
            f"{self.moved_load:.3f},{self.cost_bytes},{self.algo},"
            f"{self.plan_ms:.3f}"
        )

    def identity(self) -> tuple:
        """Everything except wall-clock timing, for determinism checks."""
        return (
            self.window,
            self.source,
            self.target,
            self.n_cells,
            round(self.moved_load, 9),
            self.cost_bytes,
            self.algo,
            self.duration_ticks,
            self.rolled_back,
        )


@dataclass
class WindowRow:
    window: int
    throughput: float
    p50_latency: float
    p99_latency: float
    worker_loads: tuple[float, ...]

    def csv_line(self) -> str:
        loads = ",".join(f"{l:.3f}" for l in self.worker_loads)
        return (
            f"{self.window},{self.throughput:.1f},{self.p50_latency:.1f},"
            f"{self.p99_latency:.1f},{loads}"
        )


@dataclass
class MetricsReport:
    processed: int
    wall_seconds: float
    latency_ticks: list[int]
    latency_wall_ms: list[float]
    worker_load_series: list[tuple[float, ...]]
    migrations: list[MigrationEvent]
    discarded: int
    malformed: int
    results: set[MatchResult]
    windows: list[WindowRow]
    repartitions: int = 0

    @property
    def throughput(self) -> float:
        return self.processed / self.wall_seconds if self.wall_seconds > 0 else 0.0

    def latency_percentile(self, pct: float) -> float:
        if not self.latency_ticks:
            return 0.0
        data = sorted(self.latency_ticks)
        idx = min(len(data) - 1, int(pct / 100.0 * len(data)))
        return float(data[idx])


def merge_dedup(results: Iterable[MatchResult]) -> list[MatchResult]:
    """Emit each (query, object) pair at most once, first arrival wins."""
    seen: set[MatchResult] = set()
    out: list[MatchResult] = []
    for r in results:
        if r not in seen:
            seen.add(r)
            out.append(r)
    return out


class Merger:
    def __init__(self) -> None:
        self.results: set[MatchResult] = set()

    def add(self, results: Iterable[MatchResult]) -> None:
        self.results.update(results)


def centralized_matches(events: Sequence[traces.StreamEvent]) -> set[MatchResult]:
    """Brute-force oracle: replay the stream against a flat live-query set."""
    live: dict[int, StsQuery] = {}
    out: set[MatchResult] = set()
    for kind, payload in events:
        if kind == traces.OBJ:
            o = payload
            x, y = o.loc.x, o.loc.y
            for q in live.values():
                r = q.region
                if not (r.min.x <= x <= r.max.x and r.min.y <= y <= r.max.y):
                    continue
                if all(not c.isdisjoint(o.terms) for c in q.expr.clauses):
                    out.add(MatchResult(q.id, o.id))
        elif kind == traces.INS:
            live[payload.id] = payload
        else:
            live.pop(payload.id, None)
    return out


# --------------------------------------------------------------------------
# Migration execution
# --------------------------------------------------------------------------


@dataclass
class _PlannedMove:
    source: int
    target: int
    cells: list[Cell]
    algo: str
    moved_load: float
    cost_bytes: int
    plan_ms: float
    # For a cell split the source keeps one term group; commit installs the
    # two-group partitioning instead of reassigning the whole cell.
    keep_terms: dict[Cell, frozenset] | None = None
    move_terms: dict[Cell, frozenset] | None = None


@dataclass
class _Flight:
    move: _PlannedMove
    payload: bytes
    start_tick: int
    commit_tick: int
    window: int
    buffered: list = field(default_factory=list)
    fail_import: bool = False


class Cluster:
    """All roles of one simulated deployment plus the scheduler state."""

    def __init__(
        self,
        config: RunConfig,
        tree: KdtTree,
        stats: TermStats,
    ):
        self.config = config
        self.stats = stats
        self.grids = [GridTIndex(tree, stats) for _ in range(config.d)]
        self.old_grids: list[GridTIndex] | None = None
        self.workers = {
            w: WorkerEngine(w, self.grids[0]) for w in range(1, config.m + 1)
        }
        self.merger = Merger()
        self.worker_channels = {
            w: Channel(f"worker-{w}") for w in range(1, config.m + 1)
        }
        self.merger_channel = Channel("merger")
        self.tick = 0
        self.window_index = 0
        self.window_counts = {
            w: [0, 0, 0] for w in range(1, config.m + 1)
        }  # objects, inserts, deletes
        # qid -> (query, epoch, per-cell destinations)
        self.live: dict[int, tuple[StsQuery, str, dict[Cell, frozenset[int]]]] = {}
        self.in_flight: _Flight | None = None
        self.pending_moves: deque[_PlannedMove] = deque()
        self.migration_count = 0
        self.recent_objects: deque[SpatioTextualObject] = deque(
            maxlen=config.partition_sample_objects
        )
        # metrics
        self.latency_ticks: list[int] = []
        self.latency_wall_ms: list[float] = []
        self.window_latencies: list[int] = []
        self.discarded = 0
        self.migrations: list[MigrationEvent] = []
        self.worker_load_series: list[tuple[float, ...]] = []
        self.windows: list[WindowRow] = []
        self.repartitions = 0
        self._window_started_at = time.perf_counter()

    # -- plumbing -----------------------------------------------------------

    def _dispatcher_for(self, element_id: int) -> int:
        return element_id % self.config.d

    def _broadcast_deltas(self, origin: int, deltas, grids: list[GridTIndex]) -> None:
        # Replicas apply the same deltas in arrival order, before any object
        # that depends on them is routed.
        for i, g in enumerate(grids):
            if i != origin:
                g.apply_deltas(deltas)

    def _moving_cells(self) -> set[Cell]:
        return set(self.in_flight.move.cells) if self.in_flight else set()

    def _drain_channels(self) -> None:
        for w in sorted(self.worker_channels):
            chan = self.worker_channels[w]
            while len(chan):
                self._handle_worker_msg(w, chan.pop())
        while len(self.merger_channel):
            msg = self.merger_channel.pop()
            self.merger.add(msg.results)

    def _handle_worker_msg(self, wid: int, msg) -> None:
        worker = self.workers[wid]
        if isinstance(msg, ObjectMsg):
            results = worker.match_object(msg.obj)
            if not msg.control:
                self.window_counts[wid][0] += 1
            if results:
                self.merger_channel.send(MatchMsg(tuple(results)))
        elif isinstance(msg, QueryInsertMsg):
            worker.insert_query(msg.query, cells=list(msg.cells))
            if not msg.control:
                self.window_counts[wid][1] += 1
        elif isinstance(msg, QueryDeleteMsg):
            worker.delete_query(msg.qid)
            if not msg.control:
                self.window_counts[wid][2] += 1
        elif isinstance(msg, ScrubMsg):
            self._scrub(worker, msg.qid, msg.cells)
        else:  # pragma: no cover - defensive
            raise TypeError(type(msg))

    @staticmethod
    def _scrub(worker: WorkerEngine, qid: int, cells: Iterable[Cell]) -> None:
        for cell in cells:
            wc = worker.cells.get(cell)
            if wc is None:
                continue
            held = wc.queries.get(qid)
            if held is None:
                continue
            worker._drop_query_from_cell(
                wc, cell, qid, index_terms(held[0], worker.grid.stats)
            )

    # -- event processing ---------------------------------------------------

    def process_event(self, kind: str, payload, arrival_tick: int) -> None:
        start = time.perf_counter()
        moving = self._moving_cells()
        if kind == traces.OBJ:
            self._process_object(payload, arrival_tick, moving)
        elif kind == traces.INS:
            self._process_insert(payload, arrival_tick, moving)
        else:
            self._process_delete(payload, arrival_tick, moving)
        self._drain_channels()
        self.latency_wall_ms.append((time.perf_counter() - start) * 1000.0)

    def _complete(self, arrival_tick: int) -> None:
        lat = self.tick - arrival_tick
        self.latency_ticks.append(lat)
        self.window_latencies.append(lat)

    def _process_object(self, o: SpatioTextualObject, arrival: int, moving) -> None:
        self.recent_objects.append(o)
        cell = self.grids[0].cell_of(o.loc)
        if cell in moving:
            self.in_flight.buffered.append((traces.OBJ, o, None, arrival))
            return
        self._deliver_object(o, arrival)

    def _deliver_object(self, o: SpatioTextualObject, arrival: int) -> None:
        disp = self._dispatcher_for(o.id)
        decision = self.grids[disp].route_object(o)
        dests = set(decision.destinations)
        if self.old_grids is not None:
            # Dual routing: subscriptions placed before the repartition are
            # still stored per the old strategy until they drain.
            old = self.old_grids[disp].route_object(o)
            dests |= old.destinations
        if not dests:
            self.discarded += 1
            self._complete(arrival)
            return
        for w in sorted(dests):
            self.worker_channels[w].send(ObjectMsg(o, self.tick))
        self._complete(arrival)

    def _process_insert(self, q: StsQuery, arrival: int, moving) -> None:
        disp = self._dispatcher_for(q.id)
        decision, deltas = self.grids[disp].route_query_insert(q)
        self._broadcast_deltas(disp, deltas, self.grids)
        epoch = "new" if self.old_grids is not None else "base"
        per_cell = dict(decision.per_cell)
        self.live[q.id] = (q, epoch, per_cell)
        stable: dict[int, list[Cell]] = {}
        deferred: list[Cell] = []
        for cell, ws in sorted(decision.per_cell.items()):
            if cell in moving:
                deferred.append(cell)
                continue
            for w in sorted(ws):
                stable.setdefault(w, []).append(cell)
        for w in sorted(stable):
            self.worker_channels[w].send(
                QueryInsertMsg(q, tuple(stable[w]), self.tick)
            )
        if deferred:
            self.in_flight.buffered.append((traces.INS, q, tuple(deferred), arrival))
        else:
            self._complete(arrival)

    def _process_delete(self, q: StsQuery, arrival: int, moving) -> None:
        entry = self.live.pop(q.id, None)
        epoch = entry[1] if entry else "base"
        grids = self.grids
        if self.old_grids is not None and epoch != "new":
            grids = self.old_grids  # deletions of old queries use the old index
        disp = self._dispatcher_for(q.id)
        decision, deltas = grids[disp].route_query_delete(q)
        self._broadcast_deltas(disp, deltas, grids)
        stable_workers: set[int] = set()
        deferred: list[Cell] = []
        for cell, ws in sorted(decision.per_cell.items()):
            if cell in moving:
                deferred.append(cell)
                continue
            stable_workers |= ws
        for w in sorted(stable_workers):
            self.worker_channels[w].send(QueryDeleteMsg(q.id, self.tick))
        if deferred:
            self.in_flight.buffered.append((traces.DEL, q, tuple(deferred), arrival))
        else:
            self._complete(arrival)

    # -- migration lifecycle --------------------------------------------------

    def plan_window_adjustment(self, loads: Sequence[float]) -> None:
        cfg = self.config
        if cfg.migration == "off" or self.old_grids is not None:
            return
        if self.in_flight is not None or self.pending_moves:
            return
        pair = detect_imbalance(loads, cfg.sigma)
        if pair is None:
            return
        wo, wl = pair
        snap_o = self.workers[wo].snapshot()
        snap_o.window_objects = self.window_counts[wo][0]
        snap_o.window_inserts = self.window_counts[wo][1]
        snap_l = self.workers[wl].snapshot()
        snap_l.window_objects = self.window_counts[wl][0]
        snap_l.window_inserts = self.window_counts[wl][1]
        t0 = time.perf_counter()
        directives = phase1_adjust(snap_o, snap_l, cfg.phase1_p, cfg.costs)
        phase1_ms = (time.perf_counter() - t0) * 1000.0
        # The transfer budget is expressed in cell-load units so it stays
        # commensurate with what migration actually moves.
        est_hi = sum(s.load for s in snap_o.cells.values())
        est_lo = sum(s.load for s in snap_l.cells.values())
        claimed: set[Cell] = set()
        for d in directives:
            snap = snap_o.cells[d.cell]
            if isinstance(d, CellTextSplit):
                share = snap.load / 2.0
                self.pending_moves.append(
                    _PlannedMove(
                        wo, wl, [d.cell], "phase1-split", share, d.moved_size,
                        phase1_ms, keep_terms={d.cell: d.keep_terms},
                        move_terms={d.cell: d.move_terms},
                    )
                )
            else:
                share = snap.load
                self.pending_moves.append(
                    _PlannedMove(
                        wo, wl, [d.cell], "phase1-merge", share, d.moved_size,
                        phase1_ms,
                    )
                )
            claimed.add(d.cell)
            est_hi -= share
            est_lo += share
        if est_hi <= 0:
            return
        if est_lo > 0 and est_hi / est_lo <= cfg.sigma:
            return
        cells = [
            CellStat(s.cell, s.load, s.size_bytes, s.owned_terms is not None)
            for s in snap_o.cells.values()
            if s.cell not in claimed
        ]
        if not cells:
            return
        tau = compute_tau(est_hi, est_lo, cfg.sigma)
        selector = SELECTORS[cfg.migration]
        seed = cfg.seed * 1000003 + self.window_index
        t0 = time.perf_counter()
        plan = selector(cells, tau, seed)
        if not plan.feasible:
            plan = selector(cells, tau / 2.0, seed)  # halve the budget once
        plan_ms = (time.perf_counter() - t0) * 1000.0
        if not plan.feasible or not plan.cells:
            return
        self.pending_moves.append(
            _PlannedMove(
                wo, wl, list(plan.cells), plan.algo, plan.moved_load,
                plan.cost_bytes, plan_ms,
            )
        )

    def maybe_start_migration(self) -> None:
        if self.in_flight is not None or not self.pending_moves:
            return
        move = self.pending_moves.popleft()
        source = self.workers[move.source]
        owned = [c for c in move.cells if c in source.cells]
        if not owned:
            return
        move.cells = owned
        payload = source.export_cells(owned, keep_terms=move.keep_terms)
        ticks = max(1, -(-len(payload) // self.config.bandwidth_bytes_per_tick))
        self.migration_count += 1
        fail = self.config.fail_migration_index == self.migration_count
        self.in_flight = _Flight(
            move, payload, self.tick, self.tick + ticks, self.window_index,
            fail_import=fail,
        )

    def maybe_commit_migration(self) -> None:
        flight = self.in_flight
        if flight is None or self.tick < flight.commit_tick:
            return
        move = flight.move
        rolled_back = False
        try:
            if flight.fail_import:
                raise MigrationError("injected import failure")
            self.workers[move.target].import_cells(flight.payload)
        except MigrationError:
            self.workers[move.source].import_cells(flight.payload)
            rolled_back = True
        if not rolled_back:
            moved_cells = set(move.cells)
            for cell in move.cells:
                for grid in self.grids:
                    if move.keep_terms is not None:
                        grid.set_cell_partitions(
                            cell,
                            [
                                (move.keep_terms[cell], move.source),
                                (move.move_terms[cell], move.target),
                            ],
                        )
                    else:
                        grid.reassign_cell_worker(cell, move.source, move.target)
            # Keep live placement records honest for a later drain scrub;
            # over-approximating with the target is safe (scrubs no-op).
            for _qid, (_q, _e, pc) in self.live.items():
                for cell in moved_cells:
                    ws = pc.get(cell)
                    if ws is not None and move.source in ws:
                        pc[cell] = ws | {move.target}
        self.migrations.append(
            MigrationEvent(
                window=flight.window,
                source=move.source,
                target=move.target,
                n_cells=len(move.cells),
                moved_load=move.moved_load,
                cost_bytes=len(flight.payload),
                algo=move.algo,
                plan_ms=move.plan_ms,
                duration_ticks=self.tick - flight.start_tick,
                rolled_back=rolled_back,
            )
        )
        buffered = flight.buffered
        self.in_flight = None
        for kind, payload, cells, arrival in buffered:
            if kind == traces.OBJ:
                self._deliver_object(payload, arrival)
            elif kind == traces.INS:
                disp = self._dispatcher_for(payload.id)
                dests = self.grids[disp].query_dests_for_cells(payload, cells)
                entry = self.live.get(payload.id)
                by_worker: dict[int, list[Cell]] = {}
                for cell, ws in sorted(dests.items()):
                    if entry is not None:
                        entry[2][cell] = ws
                    for w in sorted(ws):
                        by_worker.setdefault(w, []).append(cell)
                for w in sorted(by_worker):
                    self.worker_channels[w].send(
                        QueryInsertMsg(payload, tuple(by_worker[w]), self.tick)
                    )
                self._complete(arrival)
            else:
                disp = self._dispatcher_for(payload.id)
                dests = self.grids[disp].query_dests_for_cells(payload, cells)
                ws_all: set[int] = set()
                for ws in dests.values():
                    ws_all |= ws
                for w in sorted(ws_all):
                    self.worker_channels[w].send(QueryDeleteMsg(payload.id, self.tick))
                self._complete(arrival)
        self._drain_channels()

    # -- global adjustment ----------------------------------------------------

    def maybe_global_repartition(self) -> None:
        cfg = self.config
        if self.old_grids is not None or self.in_flight or self.pending_moves:
            return
        sample_objs = list(self.recent_objects)
        rng = random.Random(cfg.seed + self.tick)
        live_qs = [self.live[qid][0] for qid in sorted(self.live)]
        if len(live_qs) > cfg.partition_sample_queries:
            live_qs = rng.sample(live_qs, cfg.partition_sample_queries)
        if not sample_objs or not live_qs:
            return
        new_tree = global_check_and_repartition(
            sample_objs,
            live_qs,
            self.grids[0].tree,
            cfg.partition_params(),
            cfg.costs,
            self.stats,
            space=self.grids[0].tree.root.rect,
            trigger_ratio=cfg.global_trigger,
        )
        if new_tree is None:
            return
        granularity = self.grids[0].granularity
        self.old_grids = self.grids
        self.grids = [
            GridTIndex(new_tree, self.stats, granularity=granularity)
            for _ in range(cfg.d)
        ]
        self.repartitions += 1
        self.live = {
            qid: (q, "old" if epoch in ("base", "new") else epoch, pc)
            for qid, (q, epoch, pc) in self.live.items()
        }

    def maybe_drain_old_queries(self) -> None:
        if self.old_grids is None:
            return
        old = [qid for qid, (_, epoch, _) in self.live.items() if epoch == "old"]
        total = len(self.live)
        if total and len(old) / total >= self.config.drain_threshold:
            return
        moved_bytes = 0
        for qid in sorted(old):
            q, _, old_pc = self.live[qid]
            disp = self._dispatcher_for(qid)
            decision, deltas = self.grids[disp].route_query_insert(q)
            self._broadcast_deltas(disp, deltas, self.grids)
            moved_bytes += query_size_bytes(q)
            by_worker: dict[int, list[Cell]] = {}
            for cell, ws in sorted(decision.per_cell.items()):
                for w in sorted(ws):
                    by_worker.setdefault(w, []).append(cell)
            for w in sorted(by_worker):
                self.worker_channels[w].send(
                    QueryInsertMsg(q, tuple(by_worker[w]), self.tick, control=True)
                )
            # Remove placements the new routing no longer covers.
            scrub: dict[int, list[Cell]] = {}
            for cell, ws in sorted(old_pc.items()):
                new_ws = decision.per_cell.get(cell, frozenset())
                for w in sorted(ws - new_ws):
                    scrub.setdefault(w, []).append(cell)
            for w in sorted(scrub):
                self.worker_channels[w].send(ScrubMsg(qid, tuple(scrub[w])))
            self.live[qid] = (q, "new", dict(decision.per_cell))
        self._drain_channels()
        for w in self.workers.values():
            w.grid = self.grids[0]
        if old:
            self.migrations.append(
                MigrationEvent(
                    window=self.window_index,
                    source=0,
                    target=0,
                    n_cells=len(old),
                    moved_load=0.0,
                    cost_bytes=moved_bytes,
                    algo="global",
                    plan_ms=0.0,
                    duration_ticks=0,
                )
            )
        self.old_grids = None

    # -- windows --------------------------------------------------------------

    def close_window(self) -> None:
        cfg = self.config
        loads = tuple(
            worker_load(WorkerLoadSample(*self.window_counts[w]), cfg.costs)
            for w in range(1, cfg.m + 1)
        )
        self.worker_load_series.append(loads)
        now = time.perf_counter()
        dt = now - self._window_started_at
        self._window_started_at = now
        lat = sorted(self.window_latencies)
        p50 = float(lat[len(lat) // 2]) if lat else 0.0
        p99 = float(lat[min(len(lat) - 1, int(0.99 * len(lat)))]) if lat else 0.0
        self.windows.append(
            WindowRow(
                self.window_index,
                cfg.window / dt if dt > 0 else 0.0,
                p50,
                p99,
                loads,
            )
        )
        self.window_latencies = []
        self.maybe_drain_old_queries()
        self.plan_window_adjustment(loads)
        for w in self.workers.values():
            w.start_window()
        for w in self.window_counts.values():
            w[0] = w[1] = w[2] = 0
        self.window_index += 1

    # -- top level --------------------------------------------------------------

    def run_events(self, events: Sequence[traces.StreamEvent]) -> None:
        cfg = self.config
        for i, (kind, payload) in enumerate(events):
            self.tick = i
            self.maybe_commit_migration()
            self.maybe_start_migration()
            self.process_event(kind, payload, i)
            if (i + 1) % cfg.window == 0:
                self.close_window()
            if cfg.global_period and (i + 1) % cfg.global_period == 0:
                self.maybe_global_repartition()
        # Liveness: flush any handoff still in the air at end of stream.
        while self.in_flight is not None or self.pending_moves:
            self.tick += 1
            self.maybe_commit_migration()
            self.maybe_start_migration()
        self._drain_channels()


# --------------------------------------------------------------------------
# Entry points
# --------------------------------------------------------------------------


def build_tree_for_run(
    config: RunConfig,
    events: Sequence[traces.StreamEvent],
) -> tuple[KdtTree, TermStats, Rect]:
    """Peek the warm-up prefix, derive term stats and the space box, and
    build the configured partition tree."""
    warm = events[: config.warmup]
    objs = [p for k, p in warm if k == traces.OBJ]
    qrys = [p for k, p in warm if k == traces.INS]
    all_objs = [p for k, p in events if k == traces.OBJ]
    space = config.space or (bounding_rect(all_objs) if all_objs else Rect.of(0, 0, 1, 1))
    stats = TermStats.from_objects(objs)
    rng = random.Random(config.seed)
    if len(objs) > config.partition_sample_objects:
        objs = rng.sample(objs, config.partition_sample_objects)
    if len(qrys) > config.partition_sample_queries:
        qrys = rng.sample(qrys, config.partition_sample_queries)
    if not objs or not qrys:
        # Degenerate stream; fall back to a trivial single-leaf tree.
        return KdtTree(KdtSpaceLeaf(space, 1), config.m), stats, space
    strategy = config.strategy
    assignment = build_partition(
        strategy, objs, qrys, config.partition_params(), config.costs, stats, space
    )
    return assignment.tree, stats, space


def run(
    config: RunConfig,
    events: Sequence[traces.StreamEvent] | None = None,
    objects: Sequence[SpatioTextualObject] | None = None,
    query_ops: Sequence[traces.StreamEvent] | None = None,
    tree: KdtTree | None = None,
    malformed: int = 0,
) -> MetricsReport:
    """Replay the interleaved stream through the simulated cluster."""
    if events is None:
        events = traces.interleave(objects or [], query_ops or [])
    if tree is None:
        tree, stats, _space = build_tree_for_run(config, events)
    else:
        warm_objs = [p for k, p in events[: config.warmup] if k == traces.OBJ]
        stats = TermStats.from_objects(warm_objs)
    cluster = Cluster(config, tree, stats)
    started = time.perf_counter()
    cluster.run_events(events)
    wall = time.perf_counter() - started
    return MetricsReport(
        processed=len(events),
        wall_seconds=wall,
        latency_ticks=cluster.latency_ticks,
        latency_wall_ms=cluster.latency_wall_ms,
        worker_load_series=cluster.worker_load_series,
        migrations=cluster.migrations,
        discarded=cluster.discarded,
        malformed=malformed,
        results=cluster.merger.results,
        windows=cluster.windows,
        repartitions=cluster.repartitions,
    )
