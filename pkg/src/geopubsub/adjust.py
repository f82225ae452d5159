"""Load adjustment planning.

Local adjustment runs in two phases: first split or merge individual cells
when that lowers the combined load of the overloaded/underloaded pair, then
pick a set of cells to migrate whose load covers the transfer budget at
minimum byte cost (exact knapsack-style DP, a relative-cost greedy, and the
size-descending / random baselines).  Global adjustment rebuilds the whole
tree from a fresh sample when it would shave enough total load.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .dispatch import Cell
from .model import CostModel, Rect, SpatioTextualObject, StsQuery, TermId, TermStats
from .partition import (
    KdtTree,
    PartitionParams,
    assignment_for,
    partition_workload,
    text_partition,
)
from .worker import CellSnapshot, CellStat, WorkerSnapshot


@dataclass(frozen=True)
class MigrationBudget:
    tau: float

    def __post_init__(self) -> None:
        if self.tau < 0:
            raise ValueError("budget must be nonnegative")


@dataclass
class MigrationPlan:
    cells: list[Cell]
    moved_load: float
    cost_bytes: int
    algo: str
    feasible: bool = True
    source: int | None = None
    target: int | None = None
    phase1_actions: list = field(default_factory=list)


def compute_tau(load_hi: float, load_lo: float, sigma: float) -> float:
    """Equalizing transfer: move half the gap so both sides meet in the
    middle (in expectation)."""
    return (load_hi - load_lo) / 2.0


def _infeasible(cells: Sequence[CellStat], algo: str) -> MigrationPlan:
    return MigrationPlan(
        cells=[c.cell for c in cells],
        moved_load=sum(c.load for c in cells),
        cost_bytes=sum(c.size_bytes for c in cells),
        algo=algo,
        feasible=False,
    )


def _plan(chosen: Sequence[CellStat], algo: str) -> MigrationPlan:
    return MigrationPlan(
        cells=[c.cell for c in chosen],
        moved_load=sum(c.load for c in chosen),
        cost_bytes=sum(c.size_bytes for c in chosen),
        algo=algo,
    )


def select_cells_si(cells: Sequence[CellStat], tau: float) -> MigrationPlan:
    """Size-descending baseline: biggest cells first until the load budget
    is covered."""
    if tau <= 0:
        return _plan([], "si")
    if sum(c.load for c in cells) < tau:
        return _infeasible(cells, "si")
    chosen: list[CellStat] = []
    moved = 0.0
    for c in sorted(cells, key=lambda c: (-c.size_bytes, c.cell)):
        chosen.append(c)
        moved += c.load
        if moved >= tau:
            break
    return _plan(chosen, "si")


def select_cells_ra(cells: Sequence[CellStat], tau: float, seed: int) -> MigrationPlan:
    """Random baseline: seeded shuffle, take a prefix covering the budget."""
    if tau <= 0:
        return _plan([], "ra")
    if sum(c.load for c in cells) < tau:
        return _infeasible(cells, "ra")
    order = sorted(cells, key=lambda c: c.cell)
    random.Random(seed).shuffle(order)
    chosen: list[CellStat] = []
    moved = 0.0
    for c in order:
        chosen.append(c)
        moved += c.load
        if moved >= tau:
            break
    return _plan(chosen, "ra")


def select_cells_gr(cells: Sequence[CellStat], tau: float) -> MigrationPlan:
    """Relative-cost greedy scan.

    Cells are visited by size-per-load ascending (zero-load cells last).  A
    cell joins the running set while the accumulated load stays below the
    budget; otherwise it completes a candidate (running set plus itself).
    The cheapest candidate seen over the whole scan wins.
    """
    if tau <= 0:
        return _plan([], "gr")
    order = sorted(
        cells,
        key=lambda c: (
            c.size_bytes / c.load if c.load > 0 else math.inf,
            c.cell,
        ),
    )
    running: list[CellStat] = []
    run_load = 0.0
    run_cost = 0
    best: tuple[int, list[CellStat]] | None = None
    for c in order:
        if run_load + c.load < tau:
            running.append(c)
            run_load += c.load
            run_cost += c.size_bytes
        else:
            cand_cost = run_cost + c.size_bytes
            if best is None or cand_cost < best[0]:
                best = (cand_cost, running + [c])
    if best is None:
        return _infeasible(cells, "gr")
    return _plan(best[1], "gr")


def select_cells_dp(
    cells: Sequence[CellStat],
    tau: float,
    cost_cap: int | None = None,
    quantum: int = 1,
) -> MigrationPlan:
    """Exact minimum-cost selection via the max-load-per-budget table.

    A(i, j) is the best load among the first i cells within byte budget j.
    Cell i only enters when j strictly exceeds its size, so the budget axis
    runs one quantum past the cap; the returned witness set is still an
    exact optimum (the optimal set always fits at its cost plus one).
    ``quantum`` coarsens the byte axis for large inputs.
    """
    if tau <= 0:
        return _plan([], "dp")
    if sum(c.load for c in cells) < tau:
        return _infeasible(cells, "dp")
    if quantum < 1:
        raise ValueError("quantum must be positive")
    if cost_cap is None:
        cost_cap = select_cells_si(cells, tau).cost_bytes
    sizes = [max(1, math.ceil(c.size_bytes / quantum)) for c in cells]
    loads = np.array([c.load for c in cells], dtype=np.float64)
    cap = math.ceil(cost_cap / quantum) + 1
    n = len(cells)
    rows = np.zeros((n + 1, cap + 1), dtype=np.float64)
    for i in range(1, n + 1):
        s = sizes[i - 1]
        prev = rows[i - 1]
        cur = prev.copy()
        if s < cap:
            cand = prev[1 : cap - s + 1] + loads[i - 1]
            np.maximum(prev[s + 1 :], cand, out=cur[s + 1 :])
        rows[i] = cur
    feasible = np.nonzero(rows[n] >= tau)[0]
    if feasible.size == 0:
        return _infeasible(cells, "dp")
    j = int(feasible[0])
    chosen: list[CellStat] = []
    for i in range(n, 0, -1):
        if rows[i][j] != rows[i - 1][j]:
            chosen.append(cells[i - 1])
            j -= sizes[i - 1]
    chosen.reverse()
    return _plan(chosen, "dp")


SELECTORS = {
    "dp": lambda cells, tau, seed: select_cells_dp(cells, tau),
    "gr": lambda cells, tau, seed: select_cells_gr(cells, tau),
    "si": lambda cells, tau, seed: select_cells_si(cells, tau),
    "ra": select_cells_ra,
}


# --------------------------------------------------------------------------
# Phase I: cell split / merge directives
# --------------------------------------------------------------------------


@dataclass
class CellTextSplit:
    """Split a whole cell's term universe in two and hand the smaller group
    to the underloaded worker."""

    cell: Cell
    keep_terms: frozenset[TermId]
    move_terms: frozenset[TermId]
    moved_size: int
    gain: float


@dataclass
class CellGroupMerge:
    """Move this worker's term group of the cell to the underloaded worker,
    folding it into the group already there."""

    cell: Cell
    moved_size: int
    gain: float


Phase1Directive = CellTextSplit | CellGroupMerge


def _hit_fraction(samples: Sequence[frozenset[TermId]], terms: frozenset[TermId]) -> float:
    if not samples:
        return 0.0
    return sum(1 for s in samples if not terms.isdisjoint(s)) / len(samples)


def _split_gain(
    snap: CellSnapshot,
    totals_o: tuple[float, float],
    totals_l: tuple[float, float],
    costs: CostModel,
):
    """Evaluate a two-way term split of a whole cell against the combined
    worker-level load of the pair; None unless it strictly decreases."""
    qit = snap.query_index_terms
    universe: set[TermId] = set()
    for its in qit.values():
        universe |= its
    if len(universe) < 2 or not snap.sample_terms or snap.n_objects == 0:
        return None
    obj_hits = {
        t: _hit_fraction(snap.sample_terms, frozenset((t,))) for t in universe
    }
    qcount = {t: sum(1 for its in qit.values() if t in its) for t in universe}
    weights = {
        t: costs.c1 * obj_hits[t] * snap.n_objects * qcount[t]
        + costs.c2 * obj_hits[t] * snap.n_objects
        + costs.c3 * qcount[t]
        for t in universe
    }
    g1, g2 = text_partition(weights, 2)
    n_q = len(qit)
    sides = []
    for g in (g1, g2):
        frac = _hit_fraction(snap.sample_terms, g)
        qs = [qid for qid, its in qit.items() if not its.isdisjoint(g)]
        sides.append((g, frac, qs))
    # The smaller (by stored bytes) side is the one that migrates.
    sizes = [sum(snap.query_sizes[qid] for qid in qs) for _, _, qs in sides]
    mover = 0 if sizes[0] <= sizes[1] else 1
    keeper = 1 - mover
    kf, mf = sides[keeper][1], sides[mover][1]
    ks = len(sides[keeper][2]) / n_q if n_q else 0.0
    ms = len(sides[mover][2]) / n_q if n_q else 0.0
    o_c, i_c = snap.n_objects, snap.n_inserts
    (oo, io), (ol, il) = totals_o, totals_l
    before = _pair_load(oo, io, ol, il, costs)
    after = _pair_load(
        oo - o_c + kf * o_c,
        io - i_c + ks * i_c,
        ol + mf * o_c,
        il + ms * i_c,
        costs,
    )
    # The handoff itself re-inserts the moved queries at the target and
    # retires them at the source; a split only pays off past that overhead.
    overhead = (costs.c3 + costs.c4) * len(sides[mover][2])
    if after + overhead >= before:
        return None
    deltas = (
        (-(1 - kf) * o_c, -(1 - ks) * i_c),
        (mf * o_c, ms * i_c),
    )
    return CellTextSplit(
        cell=snap.cell,
        keep_terms=sides[keeper][0],
        move_terms=sides[mover][0],
        moved_size=sizes[mover],
        gain=before - after,
    ), deltas


def _pair_load(o1: float, i1: float, o2: float, i2: float, costs: CostModel) -> float:
    return (
        costs.c1 * (o1 * i1 + o2 * i2)
        + costs.c2 * (o1 + o2)
        + costs.c3 * (i1 + i2)
    )


def _merge_gain(
    snap_o_cell: CellSnapshot,
    snap_l_cell: CellSnapshot,
    totals_o: tuple[float, float],
    totals_l: tuple[float, float],
    costs: CostModel,
):
    """Evaluate folding the overloaded worker's term group into the
    underloaded worker's group of the same cell (Def. 1 over the pair)."""
    if snap_o_cell.owned_terms is None or snap_l_cell.owned_terms is None:
        return None
    dup_o = _hit_fraction(snap_o_cell.sample_terms, snap_l_cell.owned_terms)
    dup_l = _hit_fraction(snap_l_cell.sample_terms, snap_o_cell.owned_terms)
    dup_objects = (
        dup_o * snap_o_cell.n_objects + dup_l * snap_l_cell.n_objects
    ) / 2.0
    shared = set(snap_o_cell.query_index_terms) & set(snap_l_cell.query_index_terms)
    n_q_o = max(1, len(snap_o_cell.query_index_terms))
    dup_inserts = len(shared) / n_q_o * snap_o_cell.n_inserts
    o_c, i_c = snap_o_cell.n_objects, snap_o_cell.n_inserts
    (oo, io), (ol, il) = totals_o, totals_l
    before = _pair_load(oo, io, ol, il, costs)
    after = _pair_load(
        oo - o_c,
        io - i_c,
        ol + o_c - dup_objects,
        il + i_c - dup_inserts,
        costs,
    )
    overhead = (costs.c3 + costs.c4) * len(snap_o_cell.query_index_terms)
    if after + overhead >= before:
        return None
    deltas = ((-o_c, -i_c), (o_c - dup_objects, i_c - dup_inserts))
    return CellGroupMerge(
        cell=snap_o_cell.cell, moved_size=snap_o_cell.size_bytes, gain=before - after
    ), deltas


def phase1_adjust(
    snap_o: WorkerSnapshot,
    snap_l: WorkerSnapshot,
    p: int,
    costs: CostModel,
) -> list[Phase1Directive]:
    """Inspect the p most loaded cells of the overloaded worker and emit
    every split/merge that strictly lowers the pair's combined load."""
    ranked = sorted(
        snap_o.cells.values(), key=lambda s: (-s.load, s.cell)
    )[:p]
    directives: list[Phase1Directive] = []
    # Each accepted directive shifts the running pair totals, so later cells
    # are judged against the state they would actually land in.
    totals_o = (float(snap_o.window_objects), float(snap_o.window_inserts))
    totals_l = (float(snap_l.window_objects), float(snap_l.window_inserts))
    for snap in ranked:
        if snap.owned_terms is None:
            hit = _split_gain(snap, totals_o, totals_l, costs)
        else:
            other = snap_l.cells.get(snap.cell)
            if other is None or other.owned_terms is None:
                continue
            hit = _merge_gain(snap, other, totals_o, totals_l, costs)
        if hit is None:
            continue
        d, ((do, di), (dlo, dli)) = hit
        directives.append(d)
        totals_o = (totals_o[0] + do, totals_o[1] + di)
        totals_l = (totals_l[0] + dlo, totals_l[1] + dli)
    return directives


# --------------------------------------------------------------------------
# Global adjustment
# --------------------------------------------------------------------------


def global_check_and_repartition(
    objects: Sequence[SpatioTextualObject],
    queries: Sequence[StsQuery],
    current: KdtTree,
    params: PartitionParams,
    costs: CostModel,
    stats: TermStats,
    space: Rect | None = None,
    trigger_ratio: float = 0.8,
) -> KdtTree | None:
    """Rebuild the tree on a recent sample; worth switching only when the
    candidate's total estimated load undercuts the current tree's by the
    trigger ratio."""
    if not objects or not queries:
        return None
    candidate = partition_workload(
        objects, queries, params, costs, stats, space or current.root.rect
    )
    cand_total = assignment_for(candidate, objects, queries, costs, stats).total_load
    cur_total = assignment_for(current, objects, queries, costs, stats).total_load
    if cur_total > 0 and cand_total < trigger_ratio * cur_total:
        return candidate
    return None
