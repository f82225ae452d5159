"""Dispatcher-side routing over a uniform grid derived from the tree.

Each cell resolves terms to destination workers.  Query placement walks the
full lexicon mapping (H1, derived per covering leaf); object routing only
follows terms of currently live queries (H2, a per-cell refcounted term
set).  Load adjustments rewrite a cell's routing wholesale, so cells double
as the unit of state migration.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

from .model import (
    GeoPoint,
    Rect,
    SpatioTextualObject,
    StsQuery,
    TermId,
    TermStats,
    index_terms,
)
from .partition import KdtNode, KdtSpaceLeaf, KdtTextLeaf, KdtTree

Cell = tuple[int, int]

GRANULARITY_CAP = 1 << 10
GRANULARITY_FLOOR = 1 << 6


def derive_granularity(
    tree: KdtTree, cap: int = GRANULARITY_CAP, floor: int = GRANULARITY_FLOOR
) -> int:
    """Smallest power-of-two grid aligning every leaf boundary, capped.

    Alignment is monotone in g, so the first aligning power works; the
    floor keeps cells fine enough to act as migration units.  If nothing
    under the cap aligns, the cap is used and misaligned leaves are covered
    by whole cells (over-coverage only ever adds destinations).
    """
    xs, ys = tree.split_coords()
    r = tree.root.rect
    spans = [(sorted(xs), r.min.x, r.width), (sorted(ys), r.min.y, r.height)]
    g = 1
    while g <= cap:
        ok = True
        for coords, lo, width in spans:
            if width == 0:
                continue
            for c in coords:
                frac = (c - lo) / width * g
                if abs(frac - round(frac)) > 1e-6:
                    ok = False
                    break
            if not ok:
                break
        if ok:
            return max(g, floor)
        g *= 2
    return cap


@dataclass
class RoutingDecision:
    destinations: frozenset[int]
    discarded: bool = False
    per_cell: dict[Cell, frozenset[int]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.discarded and self.destinations:
            raise ValueError("a discarded element cannot have destinations")


class _CellState:
    __slots__ = ("leaves", "override", "h2")

    def __init__(self, leaves: tuple[KdtNode, ...]):
        self.leaves = leaves
        # None, or an int worker owning the whole cell, or explicit term
        # partitions ((terms, worker), ...) installed by load adjustment.
        self.override: int | tuple[tuple[frozenset[TermId], int], ...] | None = None
        self.h2: dict[TermId, int] = {}


# An H2 delta is (cell, term, +1/-1); replicas apply them in arrival order.
H2Delta = tuple[Cell, TermId, int]


class GridTIndex:
    """Routing grid for one dispatcher; replicas stay identical by applying
    the same override calls and H2 deltas in the same order."""

    def __init__(
        self,
        tree: KdtTree,
        stats: TermStats,
        granularity: int | None = None,
    ):
        self.tree = tree
        self.stats = stats
        self.space = tree.root.rect
        self.granularity = granularity or derive_granularity(tree)
        self._cw = self.space.width / self.granularity
        self._ch = self.space.height / self.granularity
        self._cells: dict[Cell, _CellState] = {}
        self._owner_maps: dict[int, dict[TermId, int]] = {}

    # -- geometry ---------------------------------------------------------

    def cell_of(self, p: GeoPoint) -> Cell:
        g = self.granularity
        ix = int((p.x - self.space.min.x) / self._cw) if self._cw else 0
        iy = int((p.y - self.space.min.y) / self._ch) if self._ch else 0
        return (min(max(ix, 0), g - 1), min(max(iy, 0), g - 1))

    def cell_rect(self, cell: Cell) -> Rect:
        ix, iy = cell
        return Rect.of(
            self.space.min.x + ix * self._cw,
            self.space.min.y + iy * self._ch,
            self.space.min.x + (ix + 1) * self._cw,
            self.space.min.y + (iy + 1) * self._ch,
        )

    def cells_overlapping(self, rect: Rect) -> Iterator[Cell]:
        g = self.granularity
        x0 = int((rect.min.x - self.space.min.x) / self._cw) if self._cw else 0
        x1 = int((rect.max.x - self.space.min.x) / self._cw) if self._cw else 0
        y0 = int((rect.min.y - self.space.min.y) / self._ch) if self._ch else 0
        y1 = int((rect.max.y - self.space.min.y) / self._ch) if self._ch else 0
        for ix in range(max(x0, 0), min(x1, g - 1) + 1):
            for iy in range(max(y0, 0), min(y1, g - 1) + 1):
                yield (ix, iy)

    # -- cell state -------------------------------------------------------

    def _leaf_owner_map(self, leaf: KdtTextLeaf) -> dict[TermId, int]:
        omap = self._owner_maps.get(id(leaf))
        if omap is None:
            omap = {t: w for terms, w in leaf.partitions for t in terms}
            self._owner_maps[id(leaf)] = omap
        return omap

    def _state(self, cell: Cell) -> _CellState:
        st = self._cells.get(cell)
        if st is None:
            rect = self.cell_rect(cell)
            eps_x = rect.width * 1e-9
            eps_y = rect.height * 1e-9
            inner = Rect.of(
                rect.min.x + eps_x,
                rect.min.y + eps_y,
                rect.max.x - eps_x,
                rect.max.y - eps_y,
            )
            leaves = tuple(self.tree.leaves_overlapping(inner))
            st = _CellState(leaves)
            self._cells[cell] = st
        return st

    def _insert_owners(self, st: _CellState, t: TermId) -> set[int]:
        """Full-lexicon owners of a term in this cell (the H1 view)."""
        if isinstance(st.override, int):
            return {st.override}
        if st.override is not None:
            for terms, w in st.override:
                if t in terms:
                    return {w}
            return {st.override[t % len(st.override)][1]}
        out: set[int] = set()
        for leaf in st.leaves:
            if isinstance(leaf, KdtSpaceLeaf):
                out.add(leaf.worker)
            elif isinstance(leaf, KdtTextLeaf):
                out.add(self._leaf_owner_map(leaf).get(t, leaf.owner(t)))
        return out

    def space_only(self, cell: Cell) -> bool:
        st = self._state(cell)
        if isinstance(st.override, int):
            # Migration moved the cell wholesale; its matching semantics
            # (term-gated or not) follow the original leaf kind.
            return all(isinstance(l, KdtSpaceLeaf) for l in st.leaves)
        if st.override is not None:
            return False
        return all(isinstance(l, KdtSpaceLeaf) for l in st.leaves)

    def text_partitioned(self, cell: Cell) -> bool:
        return not self.space_only(cell)

    # -- routing ----------------------------------------------------------

    def route_object(self, o: SpatioTextualObject) -> RoutingDecision:
        cell = self.cell_of(o.loc)
        st = self._state(cell)
        dests: set[int] = set()
        if self.space_only(cell):
            if isinstance(st.override, int):
                dests.add(st.override)
            else:
                dests.update(l.worker for l in st.leaves)
        else:
            for t in o.terms:
                if st.h2.get(t, 0) > 0:
                    dests.update(self._insert_owners(st, t))
        if not dests:
            return RoutingDecision(frozenset(), discarded=True)
        return RoutingDecision(frozenset(dests), per_cell={cell: frozenset(dests)})

    def query_dests_for_cells(
        self, q: StsQuery, cells: Iterable[Cell]
    ) -> dict[Cell, frozenset[int]]:
        """Destination workers per cell, without touching H2 (used when a
        buffered operation is flushed after a cell handoff)."""
        its = index_terms(q, self.stats)
        out: dict[Cell, frozenset[int]] = {}
        for cell in cells:
            st = self._state(cell)
            ws: set[int] = set()
            for t in its:
                ws |= self._insert_owners(st, t)
            out[cell] = frozenset(ws)
        return out

    def route_query_insert(
        self, q: StsQuery
    ) -> tuple[RoutingDecision, list[H2Delta]]:
        its = index_terms(q, self.stats)
        per_cell: dict[Cell, frozenset[int]] = {}
        dests: set[int] = set()
        deltas: list[H2Delta] = []
        for cell in self.cells_overlapping(q.region):
            st = self._state(cell)
            ws: set[int] = set()
            for t in its:
                ws |= self._insert_owners(st, t)
                st.h2[t] = st.h2.get(t, 0) + 1
                deltas.append((cell, t, 1))
            per_cell[cell] = frozenset(ws)
            dests |= ws
        return RoutingDecision(frozenset(dests), per_cell=per_cell), deltas

    def route_query_delete(
        self, q: StsQuery
    ) -> tuple[RoutingDecision, list[H2Delta]]:
        """Same destination computation as insert; H2 refcounts drop so
        terms with no remaining live query stop attracting objects."""
        its = index_terms(q, self.stats)
        per_cell: dict[Cell, frozenset[int]] = {}
        dests: set[int] = set()
        deltas: list[H2Delta] = []
        for cell in self.cells_overlapping(q.region):
            st = self._state(cell)
            ws: set[int] = set()
            for t in its:
                ws |= self._insert_owners(st, t)
                deltas.append((cell, t, -1))
            self._apply_h2(st, its)
            per_cell[cell] = frozenset(ws)
            dests |= ws
        return RoutingDecision(frozenset(dests), per_cell=per_cell), deltas

    @staticmethod
    def _apply_h2(st: _CellState, terms: Iterable[TermId], sign: int = -1) -> None:
        for t in terms:
            n = st.h2.get(t, 0) + sign
            if n > 0:
                st.h2[t] = n
            else:
                st.h2.pop(t, None)

    def apply_deltas(self, deltas: Iterable[H2Delta]) -> None:
        for cell, t, sign in deltas:
            st = self._state(cell)
            if sign > 0:
                st.h2[t] = st.h2.get(t, 0) + 1
            else:
                self._apply_h2(st, (t,))

    # -- adjustment hooks --------------------------------------------------

    def cell_workers(self, cell: Cell) -> frozenset[int]:
        """Every worker that currently routes from this cell."""
        st = self._state(cell)
        if isinstance(st.override, int):
            return frozenset((st.override,))
        if st.override is not None:
            return frozenset(w for _, w in st.override)
        out: set[int] = set()
        for leaf in st.leaves:
            if isinstance(leaf, KdtSpaceLeaf):
                out.add(leaf.worker)
            else:
                out.update(w for _, w in leaf.partitions)
        return frozenset(out)

    def cell_partitions(
        self, cell: Cell
    ) -> tuple[tuple[frozenset[TermId], int], ...] | None:
        """Current term partitioning of a cell, None for whole-cell routing."""
        st = self._state(cell)
        if isinstance(st.override, int):
            return None
        if st.override is not None:
            return st.override
        parts: list[tuple[frozenset[TermId], int]] = []
        space_workers = []
        for leaf in st.leaves:
            if isinstance(leaf, KdtTextLeaf):
                parts.extend(leaf.partitions)
            else:
                space_workers.append(leaf.worker)
        if parts and not space_workers:
            return tuple(parts)
        return None

    def owned_terms(self, cell: Cell, worker: int) -> frozenset[TermId] | None:
        parts = self.cell_partitions(cell)
        if parts is None:
            return None
        owned: set[TermId] = set()
        for terms, w in parts:
            if w == worker:
                owned |= terms
        return frozenset(owned)

    def set_cell_owner(self, cell: Cell, worker: int) -> None:
        self._state(cell).override = worker

    def set_cell_partitions(
        self, cell: Cell, parts: Sequence[tuple[frozenset[TermId], int]]
    ) -> None:
        self._state(cell).override = tuple(parts)

    def reassign_cell_worker(self, cell: Cell, old: int, new: int) -> None:
        """Move one worker's share of a cell to another worker, merging
        adjacent term groups that end up under the same owner."""
        parts = self.cell_partitions(cell)
        if parts is None:
            self.set_cell_owner(cell, new)
            return
        moved: list[tuple[frozenset[TermId], int]] = [
            (terms, new if w == old else w) for terms, w in parts
        ]
        merged: dict[int, set[TermId]] = {}
        order: list[int] = []
        for terms, w in moved:
            if w not in merged:
                merged[w] = set()
                order.append(w)
            merged[w] |= terms
        if len(order) == 1:
            self.set_cell_owner(cell, order[0])
        else:
            self.set_cell_partitions(
                cell, [(frozenset(merged[w]), w) for w in order]
            )


def detect_imbalance(
    loads: Sequence[float], sigma: float
) -> tuple[int, int] | None:
    """(overloaded, underloaded) 1-based worker ids when the balance factor
    exceeds sigma, else None; ties break toward the lowest id.  A zero
    minimum with positive maximum always counts as a violation."""
    if not loads:
        return None
    lmax = max(loads)
    lmin = min(loads)
    if lmax <= 0:
        return None
    if lmin > 0 and lmax / lmin <= sigma:
        return None
    hi = loads.index(lmax) + 1
    lo = loads.index(lmin) + 1
    return (hi, lo)
