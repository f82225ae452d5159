"""Worker-side matching engine: a grid of cells, each holding inverted
lists of live queries keyed by their posting terms.

Deletion is lazy: ids are only marked, and postings are physically removed
as matching traverses the lists.  Cells are the unit of state export and
import, so load migration moves whole cells (or one term group of a cell)
between workers.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Iterator, Sequence

from .dispatch import Cell, GridTIndex
from .model import (
    BooleanExpr,
    MatchResult,
    Rect,
    SpatioTextualObject,
    StsQuery,
    TermId,
    index_terms,
    matches,
)


class MigrationError(RuntimeError):
    pass


# -- query wire format -------------------------------------------------------
# <Q id> <4d rect> <H clause count> then per clause <H term count> + <I term>*


def encode_query(q: StsQuery) -> bytes:
    out = [struct.pack("<Q4dH", q.id, q.region.min.x, q.region.min.y,
                       q.region.max.x, q.region.max.y, len(q.expr.clauses))]
    for clause in q.expr.clauses:
        out.append(struct.pack("<H", len(clause)))
        out.append(struct.pack(f"<{len(clause)}I", *sorted(clause)))
    return b"".join(out)


def decode_query(buf: bytes, off: int = 0) -> tuple[StsQuery, int]:
    qid, x0, y0, x1, y1, nclauses = struct.unpack_from("<Q4dH", buf, off)
    off += struct.calcsize("<Q4dH")
    clauses = []
    for _ in range(nclauses):
        (n,) = struct.unpack_from("<H", buf, off)
        off += 2
        clauses.append(frozenset(struct.unpack_from(f"<{n}I", buf, off)))
        off += 4 * n
    return StsQuery(qid, BooleanExpr(tuple(clauses)), Rect.of(x0, y0, x1, y1)), off


def query_size_bytes(q: StsQuery) -> int:
    return 8 + 32 + 2 + sum(2 + 4 * len(c) for c in q.expr.clauses)


@dataclass(frozen=True)
class CellStat:
    cell: Cell
    load: float  # objects landed this window x avg live queries at arrival
    size_bytes: int  # serialized size of every query stored in the cell
    text_partitioned: bool


@dataclass
class CellSnapshot:
    """Everything the load adjuster needs to reason about one cell."""

    cell: Cell
    n_objects: int
    n_inserts: int
    load: float
    size_bytes: int
    owned_terms: frozenset[TermId] | None  # None: worker owns the whole cell
    query_index_terms: dict[int, frozenset[TermId]]
    query_sizes: dict[int, int]
    sample_terms: list[frozenset[TermId]]  # term sets of recent objects


@dataclass
class WorkerSnapshot:
    worker: int
    cells: dict[Cell, CellSnapshot]
    # Whole-worker traffic over the window (inserts counted once per worker).
    window_objects: int = 0
    window_inserts: int = 0


_SAMPLE_CAP = 64


class _WCell:
    __slots__ = (
        "lists", "queries", "posted", "n_objects", "n_inserts", "live_sum", "samples"
    )

    def __init__(self) -> None:
        self.lists: dict[TermId, list[StsQuery]] = {}
        # qid -> (query, posting count within this cell)
        self.queries: dict[int, tuple[StsQuery, int]] = {}
        self.posted: set[tuple[TermId, int]] = set()
        self.n_objects = 0
        self.n_inserts = 0
        self.live_sum = 0.0
        self.samples: list[frozenset[TermId]] = []


class WorkerEngine:
    """One worker's in-memory index plus its accounting window."""

    def __init__(self, worker_id: int, grid: GridTIndex):
        self.worker_id = worker_id
        self.grid = grid
        self.cells: dict[Cell, _WCell] = {}
        # Deleted ids pending purge, mapped to their remaining posting count.
        self.pending_delete: dict[int, int] = {}
        self._postings: dict[int, int] = {}

    # -- maintenance --------------------------------------------------------

    def _destination_cells(self, q: StsQuery) -> list[Cell]:
        its = index_terms(q, self.grid.stats)
        out = []
        for cell in self.grid.cells_overlapping(q.region):
            owners: set[int] = set()
            for t in its:
                owners |= self.grid._insert_owners(self.grid._state(cell), t)
            if self.worker_id in owners:
                out.append(cell)
        return out

    def insert_query(self, q: StsQuery, cells: Sequence[Cell] | None = None) -> None:
        """Post the query in every overlapped cell this worker serves,
        under each of its posting terms; idempotent per (cell, term, id)."""
        if cells is None:
            cells = self._destination_cells(q)
        its = index_terms(q, self.grid.stats)
        for cell in cells:
            wc = self.cells.get(cell)
            if wc is None:
                wc = self.cells[cell] = _WCell()
            wc.n_inserts += 1
            for t in sorted(its):
                key = (t, q.id)
                if key in wc.posted:
                    continue
                wc.posted.add(key)
                wc.lists.setdefault(t, []).append(q)
                self._postings[q.id] = self._postings.get(q.id, 0) + 1
                held = wc.queries.get(q.id)
                wc.queries[q.id] = (q, held[1] + 1 if held else 1)
                if q.id in self.pending_delete:
                    self.pending_delete[q.id] += 1

    def delete_query(self, qid: int) -> None:
        """Mark only; postings fall out as matching traverses their lists."""
        count = self._postings.get(qid, 0)
        if count > 0:
            self.pending_delete[qid] = count

    def _purge(self, cell: _WCell, t: TermId, qid: int) -> None:
        cell.posted.discard((t, qid))
        q, n = cell.queries[qid]
        if n <= 1:
            del cell.queries[qid]
        else:
            cell.queries[qid] = (q, n - 1)
        left = self._postings[qid] - 1
        if left:
            self._postings[qid] = left
        else:
            del self._postings[qid]
        pending = self.pending_delete.get(qid)
        if pending is not None:
            if pending <= 1:
                del self.pending_delete[qid]
            else:
                self.pending_delete[qid] = pending - 1

    # -- matching -----------------------------------------------------------

    def match_object(self, o: SpatioTextualObject) -> list[MatchResult]:
        cell_id = self.grid.cell_of(o.loc)
        wc = self.cells.get(cell_id)
        if wc is None:
            wc = self.cells[cell_id] = _WCell()
        wc.n_objects += 1
        wc.live_sum += len(wc.queries)
        if len(wc.samples) < _SAMPLE_CAP:
            wc.samples.append(o.terms)
        results: list[MatchResult] = []
        seen: set[int] = set()
        for t in sorted(o.terms):
            lst = wc.lists.get(t)
            if not lst:
                continue
            survivors: list[StsQuery] = []
            for q in lst:
                if q.id in self.pending_delete:
                    self._purge(wc, t, q.id)
                    continue
                survivors.append(q)
                if q.id not in seen and matches(o, q):
                    seen.add(q.id)
                    results.append(MatchResult(q.id, o.id))
            if survivors:
                wc.lists[t] = survivors
            else:
                del wc.lists[t]
        return results

    # -- accounting ---------------------------------------------------------

    def start_window(self) -> None:
        for wc in self.cells.values():
            wc.n_objects = 0
            wc.n_inserts = 0
            wc.live_sum = 0.0
            wc.samples = []

    def cell_stats(self) -> list[CellStat]:
        out = []
        for cell in sorted(self.cells):
            wc = self.cells[cell]
            size = sum(query_size_bytes(q) for q, _ in wc.queries.values())
            out.append(
                CellStat(
                    cell,
                    load=wc.live_sum,
                    size_bytes=size,
                    text_partitioned=self.grid.text_partitioned(cell),
                )
            )
        return out

    def snapshot(self) -> WorkerSnapshot:
        cells = {}
        for cell in sorted(self.cells):
            wc = self.cells[cell]
            qit = {
                qid: index_terms(q, self.grid.stats)
                for qid, (q, _) in wc.queries.items()
                if qid not in self.pending_delete
            }
            sizes = {
                qid: query_size_bytes(q)
                for qid, (q, _) in wc.queries.items()
                if qid not in self.pending_delete
            }
            cells[cell] = CellSnapshot(
                cell,
                n_objects=wc.n_objects,
                n_inserts=wc.n_inserts,
                load=wc.live_sum,
                size_bytes=sum(query_size_bytes(q) for q, _ in wc.queries.values()),
                owned_terms=self.grid.owned_terms(cell, self.worker_id),
                query_index_terms=qit,
                query_sizes=sizes,
                sample_terms=list(wc.samples),
            )
        return WorkerSnapshot(self.worker_id, cells)

    def live_queries(self) -> Iterator[StsQuery]:
        seen: set[int] = set()
        for cell in sorted(self.cells):
            for qid, (q, _) in self.cells[cell].queries.items():
                if qid not in seen and qid not in self.pending_delete:
                    seen.add(qid)
                    yield q

    def pending_postings(self, qid: int) -> int:
        return self.pending_delete.get(qid, 0)

    # -- migration ----------------------------------------------------------

    def export_cells(
        self,
        cell_ids: Sequence[Cell],
        keep_terms: dict[Cell, frozenset[TermId]] | None = None,
    ) -> bytes:
        """Serialize the given cells and drop them locally.

        ``keep_terms`` marks a term-group split: queries whose posting terms
        intersect the kept group stay behind (they remain reachable here),
        everything else moves.  Exported queries carry their pending-delete
        marks with them.
        """
        records: list[bytes] = []
        for cell in cell_ids:
            wc = self.cells.get(cell)
            if wc is None:
                raise MigrationError(f"worker {self.worker_id} does not own {cell}")
            keep = keep_terms.get(cell) if keep_terms else None
            moved: list[StsQuery] = []
            deleted: list[int] = []
            moved_its: set[TermId] = set()
            for qid in sorted(wc.queries):
                q, _ = wc.queries[qid]
                its = index_terms(q, self.grid.stats)
                if keep is not None and not its.isdisjoint(keep):
                    # Shared queries are copied: they still serve the kept
                    # term group on this worker.
                    if its - keep:
                        moved.append(q)
                        moved_its |= its - keep
                        if qid in self.pending_delete:
                            deleted.append(qid)
                    continue
                moved.append(q)
                moved_its |= its
                if qid in self.pending_delete:
                    deleted.append(qid)
                self._drop_query_from_cell(wc, cell, qid, its)
            if keep is not None:
                tag = frozenset(moved_its - keep)
            else:
                tag = self.grid.owned_terms(cell, self.worker_id)
                del self.cells[cell]
            records.append(_encode_cell(cell, tag, moved, deleted))
        return struct.pack("<I", len(records)) + b"".join(records)

    def _drop_query_from_cell(
        self, wc: _WCell, cell: Cell, qid: int, its: frozenset[TermId]
    ) -> None:
        for t in its:
            if (t, qid) in wc.posted:
                lst = wc.lists.get(t, [])
                wc.lists[t] = [q for q in lst if q.id != qid]
                if not wc.lists[t]:
                    del wc.lists[t]
                self._purge(wc, t, qid)

    def import_cells(self, payload: bytes) -> None:
        """Install exported cells; idempotent, unions with complementary
        content, and refuses a same-id query whose content differs."""
        (n,) = struct.unpack_from("<I", payload, 0)
        off = 4
        for _ in range(n):
            cell, _tag, queries, deleted, off = _decode_cell(payload, off)
            wc = self.cells.get(cell)
            if wc is not None:
                for q in queries:
                    held = wc.queries.get(q.id)
                    if held is not None and held[0] != q:
                        raise MigrationError(
                            f"conflicting content for query {q.id} in cell {cell}"
                        )
            for q in queries:
                self.insert_query(q, cells=[cell])
            for qid in deleted:
                if self._postings.get(qid, 0) > 0:
                    self.pending_delete[qid] = self._postings[qid]


def _encode_cell(
    cell: Cell,
    tag: frozenset[TermId] | None,
    queries: Sequence[StsQuery],
    deleted: Sequence[int],
) -> bytes:
    out = [struct.pack("<ii", *cell)]
    if tag is None:
        out.append(struct.pack("<BI", 0, 0))
    else:
        out.append(struct.pack("<BI", 1, len(tag)))
        if tag:
            out.append(struct.pack(f"<{len(tag)}I", *sorted(tag)))
    out.append(struct.pack("<I", len(queries)))
    for q in queries:
        enc = encode_query(q)
        out.append(struct.pack("<I", len(enc)))
        out.append(enc)
    out.append(struct.pack("<I", len(deleted)))
    for qid in deleted:
        out.append(struct.pack("<Q", qid))
    return b"".join(out)


def _decode_cell(buf: bytes, off: int):
    ix, iy, has_tag, ntag = struct.unpack_from("<iiBI", buf, off)
    off += struct.calcsize("<iiBI")
    tag = None
    if has_tag:
        tag = frozenset(struct.unpack_from(f"<{ntag}I", buf, off))
        off += 4 * ntag
    (nq,) = struct.unpack_from("<I", buf, off)
    off += 4
    queries = []
    for _ in range(nq):
        (ln,) = struct.unpack_from("<I", buf, off)
        off += 4
        q, _end = decode_query(buf, off)
        off += ln
        queries.append(q)
    (nd,) = struct.unpack_from("<I", buf, off)
    off += 4
    deleted = list(struct.unpack_from(f"<{nd}Q", buf, off))
    off += 8 * nd
    return (ix, iy), tag, queries, deleted, off
