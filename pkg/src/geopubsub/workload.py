"""Workload synthesis: object streams, subscription streams, scheduling.

Query streams follow three profiles: Q1 draws keywords from the corpus
distribution with small square regions, Q2 forces at least one keyword from
outside the most frequent percentile and uses larger regions, and Q3 tiles
the space into a 10x10 grid of regions each tagged Q1- or Q2-like.  Insert
and delete rates are equal: every inserted query is deleted after a
Gaussian-distributed number of later insertions, so the live population
settles around the lifetime mean.
"""

from __future__ import annotations

import heapq
import random
from dataclasses import dataclass
from typing import Sequence

from . import traces
from .model import (
    BooleanExpr,
    GeoPoint,
    Rect,
    SpatioTextualObject,
    StsQuery,
    TermDict,
    TermId,
    TermStats,
)

Q1_SIDE_RANGE = (1.0, 50.0)
Q2_SIDE_RANGE = (1.0, 100.0)
TOP_FREQUENT_FRACTION = 0.01
REGION_GRID = 10  # Q3 cuts the space into 10 x 10 equal regions

QUERY_ID_BASE = 10_000_000


@dataclass(frozen=True)
class QueryProfile:
    kind: str  # "q1", "q2", or "q3"
    kind_map: tuple[str, ...] = ()  # per-region tags, row-major, Q3 only

    def __post_init__(self) -> None:
        if self.kind not in ("q1", "q2", "q3"):
            raise ValueError(f"unknown profile {self.kind!r}")
        if self.kind == "q3" and len(self.kind_map) != REGION_GRID * REGION_GRID:
            raise ValueError("q3 needs one tag per region")

    @classmethod
    def q1(cls) -> "QueryProfile":
        return cls("q1")

    @classmethod
    def q2(cls) -> "QueryProfile":
        return cls("q2")

    @classmethod
    def q3(cls, kind_map: Sequence[str]) -> "QueryProfile":
        return cls("q3", tuple(kind_map))


def half_and_half_kind_map(seed: int) -> tuple[str, ...]:
    """Q3 tag map with exactly half the regions Q1-like, half Q2-like."""
    n = REGION_GRID * REGION_GRID
    tags = ["q1"] * (n // 2) + ["q2"] * (n - n // 2)
    random.Random(seed).shuffle(tags)
    return tuple(tags)


def flip_kind_map(kind_map: Sequence[str], fraction: float, seed: int) -> tuple[str, ...]:
    """Swap Q1<->Q2 tags in a random ``fraction`` of the regions."""
    tags = list(kind_map)
    k = max(1, round(fraction * len(tags)))
    idx = random.Random(seed).sample(range(len(tags)), k)
    for i in idx:
        tags[i] = "q2" if tags[i] == "q1" else "q1"
    return tuple(tags)


@dataclass(frozen=True)
class StreamSchedule:
    ratio: float = 5.0  # objects per query operation
    mu: float = 200.0  # mean lifetime, in later query insertions
    sigma_frac: float = 0.2
    seed: int = 0

    def __post_init__(self) -> None:
        if self.ratio <= 0 or self.mu <= 0:
            raise ValueError("ratio and lifetime mean must be positive")


# --------------------------------------------------------------------------
# Object synthesis
# --------------------------------------------------------------------------


def synthesize_objects(
    count: int,
    space: Rect,
    seed: int,
    vocab_size: int = 2000,
    terms_per_object: tuple[int, int] = (3, 8),
    lattice: int = 64,
    cluster_fraction: float = 0.5,
    n_clusters: int = 12,
    term_dict: TermDict | None = None,
) -> tuple[list[SpatioTextualObject], TermDict]:
    """Synthetic geo-tagged stream: power-law term usage, locations drawn
    from a cluster/uniform mixture and snapped to a lattice so partition
    boundaries stay grid-aligned."""
    if count < 1:
        raise ValueError("need a positive object count")
    rng = random.Random(seed)
    terms = term_dict if term_dict is not None else TermDict()
    width = max(1, len(str(vocab_size - 1)))
    vocab = [terms.intern(f"t{str(i).zfill(width)}") for i in range(vocab_size)]
    weights = [1.0 / (r + 1) for r in range(vocab_size)]
    cum: list[float] = []
    acc = 0.0
    for w in weights:
        acc += w
        cum.append(acc)
    total = cum[-1]

    def draw_term() -> TermId:
        x = rng.random() * total
        lo, hi = 0, vocab_size - 1
        while lo < hi:
            mid = (lo + hi) // 2
            if cum[mid] < x:
                lo = mid + 1
            else:
                hi = mid
        return vocab[lo]

    centers = [
        (rng.random(), rng.random(), rng.uniform(0.02, 0.1)) for _ in range(n_clusters)
    ]
    cw = space.width / lattice
    ch = space.height / lattice
    objects: list[SpatioTextualObject] = []
    lo_t, hi_t = terms_per_object
    for i in range(count):
        if rng.random() < cluster_fraction:
            cx, cy, spread = centers[rng.randrange(n_clusters)]
            fx = min(max(rng.gauss(cx, spread), 0.0), 0.999999)
            fy = min(max(rng.gauss(cy, spread), 0.0), 0.999999)
        else:
            fx, fy = rng.random(), rng.random()
        ix = min(lattice - 1, int(fx * lattice))
        iy = min(lattice - 1, int(fy * lattice))
        loc = GeoPoint(space.min.x + ix * cw, space.min.y + iy * ch)
        k = rng.randint(lo_t, hi_t)
        toks: set[TermId] = set()
        while len(toks) < k:
            toks.add(draw_term())
        objects.append(SpatioTextualObject(i, loc, frozenset(toks), timestamp=i))
    return objects, terms


# --------------------------------------------------------------------------
# Query synthesis
# --------------------------------------------------------------------------


def _cnf_shapes(k: int) -> list[str]:
    # Distinct CNF shapes expressible with AND/OR over k keywords.
    if k == 1:
        return ["single"]
    if k == 2:
        return ["and2", "or2"]
    return ["and3", "or3", "or2-and1", "and2-or1"]


def _build_expr(shape: str, ts: list[TermId]) -> BooleanExpr:
    if shape == "single":
        return BooleanExpr.conjunction(ts[:1])
    if shape == "and2":
        return BooleanExpr.conjunction(ts[:2])
    if shape == "or2":
        return BooleanExpr.disjunction(ts[:2])
    if shape == "and3":
        return BooleanExpr.conjunction(ts[:3])
    if shape == "or3":
        return BooleanExpr.disjunction(ts[:3])
    if shape == "or2-and1":  # (a OR b) AND c
        return BooleanExpr((frozenset(ts[:2]), frozenset((ts[2],))))
    if shape == "and2-or1":  # (a AND b) OR c, normalized
        return BooleanExpr(
            (frozenset((ts[0], ts[2])), frozenset((ts[1], ts[2])))
        )
    raise ValueError(shape)


class _TermSampler:
    """Frequency-weighted term draws, with a pool restricted to terms below
    the top percentile for the rare-keyword rule."""

    def __init__(self, stats: TermStats, rng: random.Random):
        self.rng = rng
        ranked = sorted(stats.freq, key=lambda t: (-stats.freq[t], t))
        self.terms = ranked
        self.cum: list[float] = []
        acc = 0.0
        for t in ranked:
            acc += stats.freq[t]
            self.cum.append(acc)
        top = max(1, round(TOP_FREQUENT_FRACTION * len(ranked)))
        self.rare_terms = ranked[top:]
        self.rare_set = frozenset(self.rare_terms)

    def _draw(self, terms: list[TermId], cum: list[float]) -> TermId:
        x = self.rng.random() * cum[-1]
        lo, hi = 0, len(cum) - 1
        while lo < hi:
            mid = (lo + hi) // 2
            if cum[mid] < x:
                lo = mid + 1
            else:
                hi = mid
        return terms[lo]

    def corpus(self) -> TermId:
        return self._draw(self.terms, self.cum)

    def rare(self) -> TermId:
        # Uniform over the long tail: rare-interest subscriptions are not
        # frequency-aligned with the object stream.
        if not self.rare_terms:
            raise ValueError("corpus too small: no terms below the top percentile")
        return self.rare_terms[self.rng.randrange(len(self.rare_terms))]


def _region_kind(profile: QueryProfile, space: Rect, center: GeoPoint) -> str:
    if profile.kind != "q3":
        return profile.kind
    gx = min(REGION_GRID - 1, int((center.x - space.min.x) / space.width * REGION_GRID))
    gy = min(REGION_GRID - 1, int((center.y - space.min.y) / space.height * REGION_GRID))
    return profile.kind_map[gy * REGION_GRID + gx]


def synthesize_queries(
    stats: TermStats,
    locations: Sequence[GeoPoint],
    profile: QueryProfile,
    count: int,
    seed: int,
    space: Rect,
    scale: float = 1.0,
    id_base: int = QUERY_ID_BASE,
) -> list[StsQuery]:
    """Square-region subscriptions centered on sampled object locations;
    keyword count is uniform in one to three, connective shape uniform over
    the distinct CNF forms."""
    if not stats.freq:
        raise ValueError("empty corpus statistics")
    if not locations:
        raise ValueError("need object locations to center queries on")
    rng = random.Random(seed)
    sampler = _TermSampler(stats, rng)
    queries: list[StsQuery] = []
    for i in range(count):
        center = locations[rng.randrange(len(locations))]
        kind = _region_kind(profile, space, center)
        lo, hi = Q1_SIDE_RANGE if kind == "q1" else Q2_SIDE_RANGE
        side = rng.uniform(lo * scale, hi * scale)
        k = rng.randint(1, 3)
        toks: list[TermId] = []
        seen: set[TermId] = set()
        draw = sampler.rare if kind == "q2" else sampler.corpus
        while len(toks) < k:
            t = draw()
            if t not in seen:
                seen.add(t)
                toks.append(t)
        shape = rng.choice(_cnf_shapes(k))
        half = side / 2.0
        region = Rect.of(center.x - half, center.y - half, center.x + half, center.y + half)
        queries.append(StsQuery(id_base + i, _build_expr(shape, toks), region))
    return queries


# --------------------------------------------------------------------------
# Scheduling
# --------------------------------------------------------------------------


def schedule_query_ops(
    queries: Sequence[StsQuery], schedule: StreamSchedule
) -> list[traces.StreamEvent]:
    """Inserts in order; each query's delete lands after a Gaussian count of
    later insertions (truncated at one), flushed at end of stream so every
    insert pairs with exactly one delete."""
    rng = random.Random(schedule.seed)
    ops: list[traces.StreamEvent] = []
    due: list[tuple[int, int, StsQuery]] = []  # (due insert index, qid, query)
    for i, q in enumerate(queries):
        ops.append((traces.INS, q))
        life = max(1, round(rng.gauss(schedule.mu, schedule.sigma_frac * schedule.mu)))
        heapq.heappush(due, (i + life, q.id, q))
        while due and due[0][0] <= i:
            _, _, dq = heapq.heappop(due)
            ops.append((traces.DEL, dq))
    while due:
        _, _, dq = heapq.heappop(due)
        ops.append((traces.DEL, dq))
    return ops


def schedule_stream(
    objects: Sequence[SpatioTextualObject],
    queries: Sequence[StsQuery],
    schedule: StreamSchedule,
) -> list[traces.StreamEvent]:
    """Full interleaved trace honoring the object : query-op ratio."""
    ops = schedule_query_ops(queries, schedule)
    want = round(schedule.ratio * len(ops))
    objs = list(objects[:want]) if want < len(objects) else list(objects)
    return traces.interleave(objs, ops)


def live_count_series(ops: Sequence[traces.StreamEvent]) -> list[int]:
    """Live query count after each operation; handy for stability checks."""
    live = 0
    out = []
    for kind, _ in ops:
        live += 1 if kind == traces.INS else -1
        out.append(live)
    return out
