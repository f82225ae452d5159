"""Hybrid workload partitioning.

Builds a kd-style tree over a workload sample whose leaves are assigned to
workers; leaves where the object and query term distributions diverge are
divided into disjoint term groups instead of being cut further in space.
The pure-space (uniform grid / kd-tree) and pure-text (term frequency)
baseline partitioners live here too so comparison runs share one code path.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Iterator, Mapping, Sequence

from .model import (
    CostModel,
    GeoPoint,
    Rect,
    SpatioTextualObject,
    StsQuery,
    TermDict,
    TermId,
    TermStats,
    WorkerLoadSample,
    index_terms,
    worker_load,
)


# --------------------------------------------------------------------------
# Frozen tree produced by partitioning
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class KdtNode:
    rect: Rect


@dataclass(frozen=True)
class KdtInternal(KdtNode):
    axis: int  # 0 cuts x, 1 cuts y
    coord: float
    left: "KdtNode"
    right: "KdtNode"


@dataclass(frozen=True)
class KdtSpaceLeaf(KdtNode):
    worker: int


@dataclass(frozen=True)
class KdtTextLeaf(KdtNode):
    # Disjoint term groups covering every term of the in-scope sample
    # queries; terms never seen at build time fall back deterministically.
    partitions: tuple[tuple[frozenset[TermId], int], ...]

    def owner(self, t: TermId) -> int:
        for terms, w in self.partitions:
            if t in terms:
                return w
        return self.partitions[t % len(self.partitions)][1]


@dataclass(frozen=True)
class PartitionParams:
    m: int
    sigma: float = 1.3
    delta: float = 0.7
    theta: int | None = None  # defaults to 4*m
    epsilon_sim: float = 0.01
    min_split_objects: int = 32

    def __post_init__(self) -> None:
        if self.m < 1:
            raise ValueError("need at least one worker")
        if self.sigma <= 1:
            raise ValueError("balance threshold must exceed 1")
        if not (0 < self.delta <= 1):
            raise ValueError("similarity threshold must lie in (0, 1]")
        if self.theta is not None and self.theta < self.m:
            raise ValueError("leaf budget must be at least the worker count")

    @property
    def max_leaves(self) -> int:
        return self.theta if self.theta is not None else 4 * self.m


@dataclass(frozen=True)
class KdtTree:
    root: KdtNode
    worker_count: int
    params: PartitionParams | None = None

    def leaves(self) -> Iterator[KdtNode]:
        stack = [self.root]
        while stack:
            node = stack.pop()
            if isinstance(node, KdtInternal):
                stack.append(node.right)
                stack.append(node.left)
            else:
                yield node

    def leaf_for_point(self, p: GeoPoint) -> KdtNode:
        """Leaf containing the point; points outside the root are clamped."""
        r = self.root.rect
        x = min(max(p.x, r.min.x), r.max.x)
        y = min(max(p.y, r.min.y), r.max.y)
        node = self.root
        while isinstance(node, KdtInternal):
            v = x if node.axis == 0 else y
            node = node.right if v >= node.coord else node.left
        return node

    def leaves_overlapping(self, rect: Rect) -> Iterator[KdtNode]:
        stack = [self.root]
        while stack:
            node = stack.pop()
            if not node.rect.overlaps(rect):
                continue
            if isinstance(node, KdtInternal):
                stack.append(node.right)
                stack.append(node.left)
            else:
                yield node

    def split_coords(self) -> tuple[set[float], set[float]]:
        xs: set[float] = set()
        ys: set[float] = set()
        stack = [self.root]
        while stack:
            node = stack.pop()
            if isinstance(node, KdtInternal):
                (xs if node.axis == 0 else ys).add(node.coord)
                stack.append(node.right)
                stack.append(node.left)
        return xs, ys

    def workers(self) -> set[int]:
        out: set[int] = set()
        for leaf in self.leaves():
            if isinstance(leaf, KdtSpaceLeaf):
                out.add(leaf.worker)
            elif isinstance(leaf, KdtTextLeaf):
                out.update(w for _, w in leaf.partitions)
        return out


# --------------------------------------------------------------------------
# Load estimation over sample workloads
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class PartUnit:
    """One assignable unit: a rect, optionally restricted to a term group,
    with the sample counts routed to it under the membership rules."""

    rect: Rect
    terms: frozenset[TermId] | None  # None: whole lexicon (pure space unit)
    n_objects: int = 0
    n_inserts: int = 0
    n_deletes: int = 0


def estimate_partition_load(unit: PartUnit, costs: CostModel) -> float:
    sample = WorkerLoadSample(unit.n_objects, unit.n_inserts, unit.n_deletes)
    return worker_load(sample, costs)


def text_similarity(
    objects: Iterable[SpatioTextualObject], queries: Iterable[StsQuery]
) -> float:
    """Cosine similarity of the object vs. query term-frequency vectors.

    Every query term counts, not only posting terms.  Returns 1.0 when
    either side is empty: no evidence the distributions diverge.
    """
    of: Counter[TermId] = Counter()
    for o in objects:
        of.update(o.terms)
    qf: Counter[TermId] = Counter()
    for q in queries:
        qf.update(q.expr.terms())
    if not of or not qf:
        return 1.0
    if len(qf) < len(of):
        dot = sum(c * of.get(t, 0) for t, c in qf.items())
    else:
        dot = sum(c * qf.get(t, 0) for t, c in of.items())
    n1 = math.sqrt(sum(c * c for c in of.values()))
    n2 = math.sqrt(sum(c * c for c in qf.values()))
    return dot / (n1 * n2)


def text_partition(term_loads: Mapping[TermId, float], p: int) -> list[frozenset[TermId]]:
    """Split terms into ``p`` disjoint groups by longest-processing-time:
    heaviest first, each to the currently lightest group; ties fill groups
    round-robin so zero-load terms still spread evenly."""
    if p < 1:
        raise ValueError("need at least one group")
    groups: list[set[TermId]] = [set() for _ in range(p)]
    loads = [0.0] * p
    for t in sorted(term_loads, key=lambda t: (-term_loads[t], t)):
        i = min(range(p), key=lambda i: (loads[i], len(groups[i]), i))
        groups[i].add(t)
        loads[i] += term_loads[t]
    return [frozenset(g) for g in groups]


# --------------------------------------------------------------------------
# Mutable build-side structures
# --------------------------------------------------------------------------


class _BNode:
    """Spatial node under construction: a leaf until space-split (kids set)
    or text-split (frags set)."""

    __slots__ = ("rect", "objs", "qrys", "axis", "coord", "kids", "frags", "textish")

    def __init__(self, rect: Rect, objs: list, qrys: list, textish: bool = False):
        self.rect = rect
        self.objs = objs
        self.qrys = qrys
        self.axis: int | None = None
        self.coord: float | None = None
        self.kids: tuple["_BNode", "_BNode"] | None = None
        self.frags: list["_Frag"] | None = None
        self.textish = textish


class _Frag:
    """Term group of a text-split leaf; only splittable by text again."""

    __slots__ = ("rect", "terms", "objs", "qrys")

    def __init__(self, rect: Rect, terms: frozenset[TermId], objs: list, qrys: list):
        self.rect = rect
        self.terms = terms
        self.objs = objs
        self.qrys = qrys


class _Ctx:
    """Shared build context: costs plus a per-query posting-term cache."""

    def __init__(self, costs: CostModel, stats: TermStats, queries: Iterable[StsQuery]):
        self.costs = costs
        self.stats = stats
        self.its: dict[int, frozenset[TermId]] = {
            q.id: index_terms(q, stats) for q in queries
        }

    def iterms(self, q: StsQuery) -> frozenset[TermId]:
        cached = self.its.get(q.id)
        if cached is None:
            cached = index_terms(q, self.stats)
            self.its[q.id] = cached
        return cached

    def unit_load(self, objs: Sequence, qrys: Sequence) -> float:
        c = self.costs
        return c.c1 * len(objs) * len(qrys) + c.c2 * len(objs) + c.c3 * len(qrys)


def _frag_members(ctx: _Ctx, terms: frozenset[TermId], objs, qrys):
    fo = [o for o in objs if not terms.isdisjoint(o.terms)]
    fq = [q for q in qrys if not terms.isdisjoint(ctx.iterms(q))]
    return fo, fq


def _pick_split_value(values: list[float]) -> float | None:
    """Median-ish cut with both sides non-empty; None when degenerate."""
    vs = sorted(values)
    if vs[0] == vs[-1]:
        return None
    v = vs[len(vs) // 2]
    if v == vs[0]:
        for w in vs:
            if w > v:
                return w
    return v


def _split_samples(objs, qrys, rect: Rect, axis: int, coord: float):
    lo = [o for o in objs if o.loc.coord(axis) < coord]
    hi = [o for o in objs if o.loc.coord(axis) >= coord]
    lrect, rrect = rect.split(axis, coord)
    # Queries overlapping both halves are duplicated into both.
    lq = [q for q in qrys if q.region.overlaps(lrect)]
    rq = [q for q in qrys if q.region.overlaps(rrect)]
    return (lrect, lo, lq), (rrect, hi, rq)


def split_node_space(
    objects: Sequence[SpatioTextualObject],
    queries: Sequence[StsQuery],
    rect: Rect,
) -> tuple[int, float, tuple, tuple, float] | None:
    """Median split along the axis whose halves diverge most in text.

    Returns (axis, coord, (rect, objs, qrys) low, same high, alpha) where
    alpha = min of the halves' text similarities; None when every candidate
    axis is degenerate (all sample points share the coordinate).
    """
    if len(objects) < 2:
        return None
    best = None
    for axis in (0, 1):
        coord = _pick_split_value([o.loc.coord(axis) for o in objects])
        if coord is None:
            continue
        lo, hi = _split_samples(objects, queries, rect, axis, coord)
        alpha = min(
            text_similarity(lo[1], lo[2]),
            text_similarity(hi[1], hi[2]),
        )
        if best is None or alpha < best[4]:
            best = (axis, coord, lo, hi, alpha)
    return best


# --------------------------------------------------------------------------
# Node partitioning plans (dry-run friendly)
# --------------------------------------------------------------------------


def _term_loads(ctx: _Ctx, objs, qrys, universe: Iterable[TermId]) -> dict[TermId, float]:
    obj_hits: Counter[TermId] = Counter()
    for o in objs:
        obj_hits.update(o.terms)
    qry_hits: Counter[TermId] = Counter()
    for q in qrys:
        qry_hits.update(ctx.iterms(q))
    c = ctx.costs
    return {
        t: c.c1 * obj_hits[t] * qry_hits[t] + c.c2 * obj_hits[t] + c.c3 * qry_hits[t]
        for t in universe
    }


def _query_terms_universe(qrys) -> frozenset[TermId]:
    out: set[TermId] = set()
    for q in qrys:
        out |= q.expr.terms()
    return frozenset(out)


def _plan_text(ctx: _Ctx, objs, qrys, universe: frozenset[TermId], p: int):
    """p-way text split plan over the given term universe."""
    if not universe:
        return None
    groups = text_partition(_term_loads(ctx, objs, qrys, universe), p)
    total = 0.0
    members = []
    for g in groups:
        fo, fq = _frag_members(ctx, g, objs, qrys)
        members.append((g, fo, fq))
        total += ctx.unit_load(fo, fq)
    return total, ("text", members)


def _plan_space(ctx: _Ctx, rect: Rect, objs, qrys, p: int):
    """p-way space split plan: repeatedly halve the heaviest piece at the
    median, choosing the axis that minimizes summed child load."""
    pieces = [(rect, list(objs), list(qrys))]
    splits: list = []  # (piece index, axis, coord) in application order
    tree: dict[int, tuple] = {}
    while len(pieces) < p:
        order = sorted(
            range(len(pieces)),
            key=lambda i: -ctx.unit_load(pieces[i][1], pieces[i][2]),
        )
        done = False
        for idx in order:
            prect, pobjs, pqrys = pieces[idx]
            if len(pobjs) < 2:
                continue
            best = None
            for axis in (0, 1):
                coord = _pick_split_value([o.loc.coord(axis) for o in pobjs])
                if coord is None:
                    continue
                lo, hi = _split_samples(pobjs, pqrys, prect, axis, coord)
                cost = ctx.unit_load(lo[1], lo[2]) + ctx.unit_load(hi[1], hi[2])
                if best is None or cost < best[0]:
                    best = (cost, axis, coord, lo, hi)
            if best is None:
                continue
            _, axis, coord, lo, hi = best
            pieces[idx] = lo
            pieces.append(hi)
            splits.append((idx, axis, coord))
            done = True
            break
        if not done:
            return None  # not enough distinct locations
    total = sum(ctx.unit_load(o, q) for _, o, q in pieces)
    return total, ("space", pieces, splits)


def _plan_node(ctx: _Ctx, rect: Rect, objs, qrys, p: int, prefer_text: bool):
    """Choose the p-way split for a node: text-only when it sits in the
    low-similarity set, otherwise whichever of space/text costs less."""
    universe = _query_terms_universe(qrys)
    text = _plan_text(ctx, objs, qrys, universe, p)
    if prefer_text:
        if text is not None:
            return text
        space = _plan_space(ctx, rect, objs, qrys, p)
        if space is not None:
            return space
        raise ValueError("node is unsplittable: one location and one term")
    space = _plan_space(ctx, rect, objs, qrys, p)
    if space is not None and text is not None:
        return space if space[0] <= text[0] else text
    if space is not None:
        return space
    if text is not None:
        return text
    raise ValueError("node is unsplittable: one location and one term")


def partition_node(
    objects: Sequence[SpatioTextualObject],
    queries: Sequence[StsQuery],
    rect: Rect,
    p: int,
    in_text_set: bool,
    costs: CostModel,
    stats: TermStats,
) -> list[PartUnit]:
    """Split one node into ``p`` units and report their sample counts."""
    if p < 2:
        raise ValueError("p must be at least 2")
    ctx = _Ctx(costs, stats, queries)
    _, plan = _plan_node(ctx, rect, objects, queries, p, prefer_text=in_text_set)
    units: list[PartUnit] = []
    if plan[0] == "text":
        for terms, fo, fq in plan[1]:
            units.append(PartUnit(rect, terms, len(fo), len(fq)))
    else:
        for prect, pobjs, pqrys in plan[1]:
            units.append(PartUnit(prect, None, len(pobjs), len(pqrys)))
    return units


def _apply_plan(node: _BNode, plan) -> None:
    if plan[0] == "text":
        node.frags = [_Frag(node.rect, g, fo, fq) for g, fo, fq in plan[1]]
        return
    # Replay the recorded splits to graft an internal subtree onto the node.
    _, pieces, splits = plan
    bnodes = [node]
    for idx, axis, coord in splits:
        target = bnodes[idx]
        lo, hi = _split_samples(target.objs, target.qrys, target.rect, axis, coord)
        left = _BNode(lo[0], lo[1], lo[2], textish=target.textish)
        right = _BNode(hi[0], hi[1], hi[2], textish=target.textish)
        target.axis, target.coord, target.kids = axis, coord, (left, right)
        bnodes[idx] = left
        bnodes.append(right)


# --------------------------------------------------------------------------
# Allocation DP and the merge greedy
# --------------------------------------------------------------------------


def compute_number_partitions(
    cost_table: Sequence[Sequence[float]], m: int
) -> list[int]:
    """Hand out exactly ``m`` partitions over the nodes, minimizing summed
    post-split load; ``cost_table[i][k-1]`` is node i's load split k ways.

    Classic DP: best[i][j] = min over k of best[i-1][j-k] + C[i][k], with
    k bounded so every remaining node still gets at least one partition.
    """
    n = len(cost_table)
    if n == 0:
        raise ValueError("no nodes to allocate")
    if m < n:
        raise ValueError("fewer partitions than nodes")
    inf = math.inf
    best = [[inf] * (m + 1) for _ in range(n + 1)]
    choice = [[0] * (m + 1) for _ in range(n + 1)]
    best[0][0] = 0.0
    for i in range(1, n + 1):
        row = cost_table[i - 1]
        for j in range(i, m - (n - i) + 1):
            kmax = min(j - i + 1, len(row))
            for k in range(1, kmax + 1):
                cand = best[i - 1][j - k] + row[k - 1]
                if cand < best[i][j]:
                    best[i][j] = cand
                    choice[i][j] = k
    if not math.isfinite(best[n][m]):
        raise ValueError("cost table too narrow for the requested allocation")
    counts = [0] * n
    j = m
    for i in range(n, 0, -1):
        k = choice[i][j]
        counts[i - 1] = k
        j -= k
    return counts


def merge_nodes_into_partitions(loads: Sequence[float], m: int) -> list[int]:
    """Greedy unit-to-worker assignment; returns a 1-based worker per unit.

    Units are taken in descending load order.  Each goes to the partition
    with the minimum load increase unless that would worsen the balance
    factor, in which case it goes to the currently lightest partition;
    empty partitions are always filled first.
    """
    if m < 1:
        raise ValueError("need at least one partition")
    if len(loads) < m:
        raise ValueError("fewer units than partitions")
    part_loads = [0.0] * m
    filled = [False] * m
    assign = [0] * len(loads)
    order = sorted(range(len(loads)), key=lambda i: (-loads[i], i))
    for idx in order:
        empty = next((i for i in range(m) if not filled[i]), None)
        if empty is not None:
            target = empty
        else:
            # Unit loads are additive, so the minimum-increase partition is
            # the currently lightest; keep the balance-factor check anyway.
            cand = min(range(m), key=lambda i: (part_loads[i], i))
            lmax, lmin = max(part_loads), min(part_loads)
            before = lmax / lmin if lmin > 0 else math.inf
            new_loads = part_loads.copy()
            new_loads[cand] += loads[idx]
            nmax, nmin = max(new_loads), min(new_loads)
            after = nmax / nmin if nmin > 0 else math.inf
            lightest = min(range(m), key=lambda i: (part_loads[i], i))
            target = cand if after <= before else lightest
        part_loads[target] += loads[idx]
        filled[target] = True
        assign[idx] = target + 1
    return assign


@dataclass
class PartitionAssignment:
    units: tuple[PartUnit, ...]
    workers: tuple[int, ...]  # 1-based worker per unit
    worker_loads: tuple[float, ...]
    tree: KdtTree | None = None
    pre_merge_units: int | None = None

    @property
    def total_load(self) -> float:
        return sum(self.worker_loads)

    @property
    def balance_factor(self) -> float:
        lmax, lmin = max(self.worker_loads), min(self.worker_loads)
        if lmin == 0:
            return math.inf if lmax > 0 else 1.0
        return lmax / lmin


# --------------------------------------------------------------------------
# The hybrid partitioner
# --------------------------------------------------------------------------


def _collect_units(root: _BNode) -> list[tuple[_BNode, _Frag | None]]:
    """Leaf units in preorder: (node, None) for plain leaves, (node, frag)
    per term group of text-split leaves."""
    out: list[tuple[_BNode, _Frag | None]] = []
    stack = [root]
    while stack:
        node = stack.pop()
        if node.kids is not None:
            stack.append(node.kids[1])
            stack.append(node.kids[0])
        elif node.frags is not None:
            out.extend((node, f) for f in node.frags)
        else:
            out.append((node, None))
    return out


def _unit_sample(unit: tuple[_BNode, _Frag | None]):
    node, frag = unit
    if frag is None:
        return node.objs, node.qrys
    return frag.objs, frag.qrys


def _split_unit(ctx: _Ctx, unit: tuple[_BNode, _Frag | None]) -> bool:
    """Two-way split of one unit in place; False when unsplittable."""
    node, frag = unit
    if frag is not None:
        universe = frag.terms
        if len(universe) < 2:
            return False
        plan = _plan_text(ctx, frag.objs, frag.qrys, universe, 2)
        if plan is None:
            return False
        assert node.frags is not None
        i = node.frags.index(frag)
        node.frags[i : i + 1] = [
            _Frag(node.rect, g, fo, fq) for g, fo, fq in plan[1][1]
        ]
        return True
    try:
        _, plan = _plan_node(
            ctx, node.rect, node.objs, node.qrys, 2, prefer_text=node.textish
        )
    except ValueError:
        return False
    _apply_plan(node, plan)
    return True


def _freeze(node: _BNode, worker_of: dict[int, int]) -> KdtNode:
    if node.kids is not None:
        return KdtInternal(
            node.rect,
            node.axis,
            node.coord,
            _freeze(node.kids[0], worker_of),
            _freeze(node.kids[1], worker_of),
        )
    if node.frags is not None:
        parts = tuple((f.terms, worker_of[id(f)]) for f in node.frags)
        return KdtTextLeaf(node.rect, parts)
    return KdtSpaceLeaf(node.rect, worker_of[id(node)])


def bounding_rect(objects: Sequence[SpatioTextualObject]) -> Rect:
    xs = [o.loc.x for o in objects]
    ys = [o.loc.y for o in objects]
    return Rect.of(min(xs), min(ys), max(xs), max(ys))


def partition_workload(
    objects: Sequence[SpatioTextualObject],
    queries: Sequence[StsQuery],
    params: PartitionParams,
    costs: CostModel,
    stats: TermStats | None = None,
    space: Rect | None = None,
) -> KdtTree:
    """Build the hybrid tree from a workload sample.

    Phase one grows the kd structure, steering each region into the
    space-friendly or text-friendly set by the cosine similarity of its
    object and query term distributions.  Phase two expands to at least one
    unit per worker via the allocation DP, assigns units greedily, then
    keeps splitting the heaviest unit until the balance constraint holds or
    the leaf budget is spent.
    """
    if not objects or not queries:
        raise ValueError("need non-empty object and query samples")
    if stats is None:
        stats = TermStats.from_objects(objects)
    if space is None:
        space = bounding_rect(objects)
    ctx = _Ctx(costs, stats, queries)
    theta = params.max_leaves

    root = _BNode(space, list(objects), list(queries))
    undecided = [root]
    n_text: list[_BNode] = []
    n_space: list[_BNode] = []
    while undecided:
        node = undecided.pop()
        decided = len(n_text) + len(n_space) + len(undecided)
        # Tiny samples give noisy similarity estimates; treat as spatial.
        if len(node.objs) < params.min_split_objects or decided + 2 > theta:
            n_space.append(node)
            continue
        sim = text_similarity(node.objs, node.qrys)
        if sim >= params.delta:
            n_space.append(node)
            continue
        best = split_node_space(node.objs, node.qrys, node.rect)
        if best is None:
            n_text.append(node)  # cannot separate in space, low similarity
            continue
        axis, coord, lo, hi, alpha = best
        if abs(alpha - sim) <= params.epsilon_sim:
            n_text.append(node)
            continue
        left = _BNode(lo[0], lo[1], lo[2])
        right = _BNode(hi[0], hi[1], hi[2])
        node.axis, node.coord, node.kids = axis, coord, (left, right)
        undecided.extend((left, right))
    for node in n_text:
        node.textish = True

    nodes = n_text + n_space
    if len(nodes) < params.m:
        plans: dict[int, tuple] = {}
        table: list[list[float]] = []
        kmax = params.m - len(nodes) + 1
        for node in nodes:
            row = [ctx.unit_load(node.objs, node.qrys)]
            for k in range(2, kmax + 1):
                try:
                    total, plan = _plan_node(
                        ctx, node.rect, node.objs, node.qrys, k,
                        prefer_text=node.textish,
                    )
                except ValueError:
                    total, plan = row[0], None  # unsplittable; stays whole
                plans[(id(node), k)] = plan
                row.append(total)
            table.append(row)
        counts = compute_number_partitions(table, params.m)
        for node, k in zip(nodes, counts):
            plan = plans.get((id(node), k))
            if k > 1 and plan is not None:
                _apply_plan(node, plan)

    while True:
        units = _collect_units(root)
        while len(units) < params.m:
            # Degenerate allocation (unsplittable node); force more units.
            loads = [ctx.unit_load(*_unit_sample(u)) for u in units]
            order = sorted(range(len(units)), key=lambda i: (-loads[i], i))
            if not any(_split_unit(ctx, units[i]) for i in order):
                raise ValueError("workload cannot be divided among the workers")
            units = _collect_units(root)
        loads = [ctx.unit_load(*_unit_sample(u)) for u in units]
        assign = merge_nodes_into_partitions(loads, params.m)
        per_worker = [0.0] * params.m
        for load, w in zip(loads, assign):
            per_worker[w - 1] += load
        lmax, lmin = max(per_worker), min(per_worker)
        balanced = lmax == 0 or (lmin > 0 and lmax / lmin <= params.sigma)
        if balanced or len(units) >= theta:
            break
        order = sorted(range(len(units)), key=lambda i: (-loads[i], i))
        if not any(_split_unit(ctx, units[i]) for i in order):
            break  # nothing left to split; keep the best assignment we have

    worker_of = {
        id(unit[1] if unit[1] is not None else unit[0]): w
        for unit, w in zip(units, assign)
    }
    return KdtTree(_freeze(root, worker_of), params.m, params)


# --------------------------------------------------------------------------
# Evaluating a finished tree against a workload
# --------------------------------------------------------------------------


def _leaf_units(tree: KdtTree) -> list[tuple[KdtNode, int | None]]:
    """(leaf, partition index or None) per assignable unit, preorder."""
    out: list[tuple[KdtNode, int | None]] = []
    for leaf in tree.leaves():
        if isinstance(leaf, KdtTextLeaf):
            out.extend((leaf, i) for i in range(len(leaf.partitions)))
        else:
            out.append((leaf, None))
    return out


def assignment_for(
    tree: KdtTree,
    objects: Sequence[SpatioTextualObject],
    queries: Sequence[StsQuery],
    costs: CostModel,
    stats: TermStats,
    deletes: Sequence[StsQuery] = (),
) -> PartitionAssignment:
    """Route a workload through the tree's units and tally per-worker loads.

    An object lands in the leaf containing its location and, for text
    leaves, in every term group it shares a term with.  A query lands in
    every overlapping leaf and, for text leaves, in every group holding one
    of its posting terms.  Unit loads are additive per worker.
    """
    refs = _leaf_units(tree)
    slot: dict[tuple[int, int], int] = {
        (id(leaf), -1 if pi is None else pi): i for i, (leaf, pi) in enumerate(refs)
    }
    n_obj = [0] * len(refs)
    n_ins = [0] * len(refs)
    n_del = [0] * len(refs)
    its = {q.id: index_terms(q, stats) for q in list(queries) + list(deletes)}

    owner_maps: dict[int, dict[TermId, int]] = {}
    for leaf, pi in refs:
        if isinstance(leaf, KdtTextLeaf) and id(leaf) not in owner_maps:
            owner_maps[id(leaf)] = {
                t: i for i, (terms, _) in enumerate(leaf.partitions) for t in terms
            }

    for o in objects:
        leaf = tree.leaf_for_point(o.loc)
        if isinstance(leaf, KdtTextLeaf):
            omap = owner_maps[id(leaf)]
            hit = {omap[t] for t in o.terms if t in omap}
            for pi in hit:
                n_obj[slot[(id(leaf), pi)]] += 1
        else:
            n_obj[slot[(id(leaf), -1)]] += 1

    def _route_query(q: StsQuery, bucket: list[int]) -> None:
        for leaf in tree.leaves_overlapping(q.region):
            if isinstance(leaf, KdtTextLeaf):
                omap = owner_maps[id(leaf)]
                nparts = len(leaf.partitions)
                # Terms unseen at build time fall back like KdtTextLeaf.owner.
                for pi in {omap.get(t, t % nparts) for t in its[q.id]}:
                    bucket[slot[(id(leaf), pi)]] += 1
            else:
                bucket[slot[(id(leaf), -1)]] += 1

    for q in queries:
        _route_query(q, n_ins)
    for q in deletes:
        _route_query(q, n_del)

    units = []
    workers = []
    for (leaf, pi), no, ni, nd in zip(refs, n_obj, n_ins, n_del):
        if isinstance(leaf, KdtTextLeaf):
            terms, w = leaf.partitions[pi]
            units.append(PartUnit(leaf.rect, terms, no, ni, nd))
        else:
            units.append(PartUnit(leaf.rect, None, no, ni, nd))
            w = leaf.worker
        workers.append(w)
    per_worker = [0.0] * tree.worker_count
    for u, w in zip(units, workers):
        per_worker[w - 1] += estimate_partition_load(u, costs)
    return PartitionAssignment(
        tuple(units), tuple(workers), tuple(per_worker), tree=tree
    )


# --------------------------------------------------------------------------
# Baseline partitioners
# --------------------------------------------------------------------------


def _grid_tree(space: Rect, g: int, worker_of_cell) -> KdtNode:
    """Perfect binary subdivision of a g x g uniform grid (g a power of 2),
    so every leaf is exactly one grid cell."""
    cw = space.width / g
    ch = space.height / g

    def build(ix0: int, ix1: int, iy0: int, iy1: int) -> KdtNode:
        rect = Rect.of(
            space.min.x + ix0 * cw,
            space.min.y + iy0 * ch,
            space.min.x + ix1 * cw,
            space.min.y + iy1 * ch,
        )
        if ix1 - ix0 == 1 and iy1 - iy0 == 1:
            return KdtSpaceLeaf(rect, worker_of_cell(ix0, iy0))
        if ix1 - ix0 >= iy1 - iy0:
            mid = (ix0 + ix1) // 2
            coord = space.min.x + mid * cw
            return KdtInternal(
                rect, 0, coord, build(ix0, mid, iy0, iy1), build(mid, ix1, iy0, iy1)
            )
        mid = (iy0 + iy1) // 2
        coord = space.min.y + mid * ch
        return KdtInternal(
            rect, 1, coord, build(ix0, ix1, iy0, mid), build(ix0, ix1, mid, iy1)
        )

    return build(0, g, 0, g)


def baseline_space_partition(
    objects: Sequence[SpatioTextualObject],
    queries: Sequence[StsQuery],
    m: int,
    kind: str,
    costs: CostModel,
    stats: TermStats | None = None,
    space: Rect | None = None,
    grid_pow: int = 6,
) -> PartitionAssignment:
    """Pure-space baselines: ``grid`` merges a 2^grid_pow-per-axis uniform
    grid into m partitions; ``kdtree`` median-splits to m leaves."""
    if m < 1:
        raise ValueError("need at least one worker")
    if not objects:
        raise ValueError("need a non-empty object sample")
    if stats is None:
        stats = TermStats.from_objects(objects)
    if space is None:
        space = bounding_rect(objects)
    ctx = _Ctx(costs, stats, queries)

    if kind == "grid":
        g = 2**grid_pow
        cw = space.width / g
        ch = space.height / g
        cell_objs: dict[tuple[int, int], int] = {}
        cell_qrys: dict[tuple[int, int], int] = {}
        for o in objects:
            ix = min(g - 1, max(0, int((o.loc.x - space.min.x) / cw)))
            iy = min(g - 1, max(0, int((o.loc.y - space.min.y) / ch)))
            cell_objs[(ix, iy)] = cell_objs.get((ix, iy), 0) + 1
        for q in queries:
            x0 = max(0, min(g - 1, int((q.region.min.x - space.min.x) / cw)))
            x1 = max(0, min(g - 1, int((q.region.max.x - space.min.x) / cw)))
            y0 = max(0, min(g - 1, int((q.region.min.y - space.min.y) / ch)))
            y1 = max(0, min(g - 1, int((q.region.max.y - space.min.y) / ch)))
            for ix in range(x0, x1 + 1):
                for iy in range(y0, y1 + 1):
                    cell_qrys[(ix, iy)] = cell_qrys.get((ix, iy), 0) + 1
        cells = [(ix, iy) for iy in range(g) for ix in range(g)]
        units = [
            PartUnit(
                Rect.of(
                    space.min.x + ix * cw,
                    space.min.y + iy * ch,
                    space.min.x + (ix + 1) * cw,
                    space.min.y + (iy + 1) * ch,
                ),
                None,
                cell_objs.get((ix, iy), 0),
                cell_qrys.get((ix, iy), 0),
            )
            for ix, iy in cells
        ]
        loads = [estimate_partition_load(u, costs) for u in units]
        assign = merge_nodes_into_partitions(loads, m) if len(units) >= m else None
        if assign is None:
            raise ValueError("grid coarser than the worker count")
        worker_by_cell = {c: w for c, w in zip(cells, assign)}
        tree = KdtTree(
            _grid_tree(space, g, lambda ix, iy: worker_by_cell[(ix, iy)]), m
        )
        per_worker = [0.0] * m
        for load, w in zip(loads, assign):
            per_worker[w - 1] += load
        return PartitionAssignment(
            tuple(units), tuple(assign), tuple(per_worker), tree, len(units)
        )

    if kind != "kdtree":
        raise ValueError(f"unknown space baseline {kind!r}")

    root = _BNode(space, list(objects), list(queries))
    while True:
        units_b = _collect_units(root)
        if len(units_b) >= m:
            break
        order = sorted(
            range(len(units_b)),
            key=lambda i: -ctx.unit_load(*_unit_sample(units_b[i])),
        )
        split_done = False
        for i in order:
            node, _ = units_b[i]
            plan = _plan_space(ctx, node.rect, node.objs, node.qrys, 2)
            if plan is not None:
                _apply_plan(node, plan[1])
                split_done = True
                break
        if not split_done:
            raise ValueError("not enough distinct locations for the worker count")
    units_b = _collect_units(root)
    loads = [ctx.unit_load(*_unit_sample(u)) for u in units_b]
    assign = merge_nodes_into_partitions(loads, m)
    worker_of = {id(n): w for (n, _), w in zip(units_b, assign)}
    tree = KdtTree(_freeze(root, worker_of), m)
    units = [
        PartUnit(n.rect, None, len(n.objs), len(n.qrys)) for n, _ in units_b
    ]
    per_worker = [0.0] * m
    for load, w in zip(loads, assign):
        per_worker[w - 1] += load
    return PartitionAssignment(
        tuple(units), tuple(assign), tuple(per_worker), tree, len(units)
    )


def baseline_text_partition(
    objects: Sequence[SpatioTextualObject],
    queries: Sequence[StsQuery],
    m: int,
    costs: CostModel,
    stats: TermStats | None = None,
    space: Rect | None = None,
) -> PartitionAssignment:
    """Frequency-driven pure-text baseline: the lexicon is split into m
    groups by per-term load, space stays whole."""
    if m < 1:
        raise ValueError("need at least one worker")
    if not objects:
        raise ValueError("need a non-empty object sample")
    if stats is None:
        stats = TermStats.from_objects(objects)
    if space is None:
        space = bounding_rect(objects)
    ctx = _Ctx(costs, stats, queries)
    universe = set(_query_terms_universe(queries))
    for o in objects:
        universe |= o.terms
    groups = text_partition(_term_loads(ctx, objects, queries, universe), m)
    units = []
    for g in groups:
        fo, fq = _frag_members(ctx, g, objects, queries)
        units.append(PartUnit(space, g, len(fo), len(fq)))
    loads = [estimate_partition_load(u, costs) for u in units]
    assign = list(range(1, m + 1))
    tree = KdtTree(
        KdtTextLeaf(space, tuple((g, w) for g, w in zip(groups, assign))), m
    )
    return PartitionAssignment(
        tuple(units), tuple(assign), tuple(loads), tree, len(units)
    )


def build_partition(
    strategy: str,
    objects: Sequence[SpatioTextualObject],
    queries: Sequence[StsQuery],
    params: PartitionParams,
    costs: CostModel,
    stats: TermStats | None = None,
    space: Rect | None = None,
) -> PartitionAssignment:
    """One entry point for every partitioning strategy, tree attached."""
    if stats is None:
        stats = TermStats.from_objects(objects)
    if strategy == "hybrid":
        tree = partition_workload(objects, queries, params, costs, stats, space)
        return assignment_for(tree, objects, queries, costs, stats)
    if strategy == "space-grid":
        return baseline_space_partition(
            objects, queries, params.m, "grid", costs, stats, space
        )
    if strategy == "space-kdtree":
        return baseline_space_partition(
            objects, queries, params.m, "kdtree", costs, stats, space
        )
    if strategy == "text-frequency":
        return baseline_text_partition(objects, queries, params.m, costs, stats, space)
    raise ValueError(f"unknown strategy {strategy!r}")


# --------------------------------------------------------------------------
# Line-oriented tree serialization (preorder, one node per line)
# --------------------------------------------------------------------------


def serialize_tree(tree: KdtTree, terms: TermDict) -> str:
    from urllib.parse import quote

    r = tree.root.rect
    lines = [
        f"kdt 1 {tree.worker_count} {r.min.x:.17g} {r.min.y:.17g} "
        f"{r.max.x:.17g} {r.max.y:.17g}"
    ]

    def emit(node: KdtNode) -> None:
        if isinstance(node, KdtInternal):
            lines.append(f"I {node.axis} {node.coord:.17g}")
            emit(node.left)
            emit(node.right)
        elif isinstance(node, KdtSpaceLeaf):
            lines.append(f"S {node.worker}")
        elif isinstance(node, KdtTextLeaf):
            parts = " ".join(
                f"{w}:" + ",".join(sorted(quote(terms.token(t), safe="") for t in ts))
                for ts, w in node.partitions
            )
            lines.append(f"T {len(node.partitions)} {parts}")
        else:  # pragma: no cover - defensive
            raise TypeError(type(node))

    emit(tree.root)
    return "\n".join(lines) + "\n"


def parse_tree(text: str, terms: TermDict) -> KdtTree:
    from urllib.parse import unquote

    lines = [ln for ln in text.splitlines() if ln.strip()]
    head = lines[0].split()
    if head[0] != "kdt" or head[1] != "1":
        raise ValueError("unrecognized tree header")
    m = int(head[2])
    rect = Rect.of(*(float(v) for v in head[3:7]))
    pos = 1

    def read(rect: Rect) -> KdtNode:
        nonlocal pos
        fields = lines[pos].split(maxsplit=2)
        pos += 1
        if fields[0] == "I":
            axis, coord = int(fields[1]), float(fields[2])
            lrect, rrect = rect.split(axis, coord)
            left = read(lrect)
            right = read(rrect)
            return KdtInternal(rect, axis, coord, left, right)
        if fields[0] == "S":
            return KdtSpaceLeaf(rect, int(fields[1]))
        if fields[0] == "T":
            k = int(fields[1])
            parts = []
            for chunk in fields[2].split():
                w, toklist = chunk.split(":", 1)
                ts = frozenset(
                    terms.intern(unquote(t)) for t in toklist.split(",") if t
                )
                parts.append((ts, int(w)))
            if len(parts) != k:
                raise ValueError("partition count mismatch")
            return KdtTextLeaf(rect, tuple(parts))
        raise ValueError(f"bad node line {lines[pos - 1]!r}")

    root = read(rect)
    if pos != len(lines):
        raise ValueError("trailing tree data")
    return KdtTree(root, m)
