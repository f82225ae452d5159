"""Core domain types for spatio-textual publish/subscribe.

A stream object is a point location plus a set of terms; a subscription
pairs a boolean keyword expression in CNF with a rectangular region.  This
module also holds the two formulas everything else leans on: the boolean
match predicate and the per-worker load model.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Mapping, NamedTuple

TermId = int


@dataclass(frozen=True)
class GeoPoint:
    x: float
    y: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError(f"non-finite coordinate ({self.x!r}, {self.y!r})")

    def coord(self, axis: int) -> float:
        return self.x if axis == 0 else self.y


@dataclass(frozen=True)
class Rect:
    min: GeoPoint
    max: GeoPoint

    def __post_init__(self) -> None:
        if self.min.x > self.max.x or self.min.y > self.max.y:
            raise ValueError("rect min corner must not exceed max corner")

    @classmethod
    def of(cls, minx: float, miny: float, maxx: float, maxy: float) -> "Rect":
        return cls(GeoPoint(minx, miny), GeoPoint(maxx, maxy))

    @property
    def width(self) -> float:
        return self.max.x - self.min.x

    @property
    def height(self) -> float:
        return self.max.y - self.min.y

    @property
    def area(self) -> float:
        return self.width * self.height

    def contains(self, p: GeoPoint) -> bool:
        # Boundary-inclusive; keeps matches from dropping at cell borders.
        return self.min.x <= p.x <= self.max.x and self.min.y <= p.y <= self.max.y

    def overlaps(self, other: "Rect") -> bool:
        return (
            self.min.x <= other.max.x
            and other.min.x <= self.max.x
            and self.min.y <= other.max.y
            and other.min.y <= self.max.y
        )

    def split(self, axis: int, coord: float) -> tuple["Rect", "Rect"]:
        """Cut into two rects sharing the boundary at ``coord`` on ``axis``."""
        if axis == 0:
            if not (self.min.x < coord < self.max.x):
                raise ValueError("split coordinate outside rect interior")
            return (
                Rect(self.min, GeoPoint(coord, self.max.y)),
                Rect(GeoPoint(coord, self.min.y), self.max),
            )
        if not (self.min.y < coord < self.max.y):
            raise ValueError("split coordinate outside rect interior")
        return (
            Rect(self.min, GeoPoint(self.max.x, coord)),
            Rect(GeoPoint(self.min.x, coord), self.max),
        )


@dataclass(frozen=True)
class SpatioTextualObject:
    id: int
    loc: GeoPoint
    terms: frozenset[TermId]
    timestamp: int = 0

    def __post_init__(self) -> None:
        if not self.terms:
            raise ValueError(f"object {self.id} has no terms")


@dataclass(frozen=True)
class BooleanExpr:
    """Keyword expression in CNF: every clause must be satisfied, a clause is
    satisfied when the object carries at least one of its terms."""

    clauses: tuple[frozenset[TermId], ...]

    def __post_init__(self) -> None:
        if not self.clauses:
            raise ValueError("expression needs at least one clause")
        if any(not c for c in self.clauses):
            raise ValueError("clauses must be non-empty")

    @classmethod
    def conjunction(cls, terms: Iterable[TermId]) -> "BooleanExpr":
        """Pure-AND expression: one singleton clause per term."""
        return cls(tuple(frozenset((t,)) for t in terms))

    @classmethod
    def disjunction(cls, terms: Iterable[TermId]) -> "BooleanExpr":
        """Pure-OR expression: a single clause with every term."""
        return cls((frozenset(terms),))

    def terms(self) -> frozenset[TermId]:
        out: set[TermId] = set()
        for c in self.clauses:
            out |= c
        return frozenset(out)


@dataclass(frozen=True)
class StsQuery:
    id: int
    expr: BooleanExpr
    region: Rect


class MatchResult(NamedTuple):
    query_id: int
    object_id: int


@dataclass
class TermStats:
    """Term occurrence counts over a reference corpus; unseen terms count 0."""

    freq: dict[TermId, int] = field(default_factory=dict)

    def freq_of(self, t: TermId) -> int:
        return self.freq.get(t, 0)

    @classmethod
    def from_objects(cls, objects: Iterable[SpatioTextualObject]) -> "TermStats":
        counts: Counter[TermId] = Counter()
        for o in objects:
            counts.update(o.terms)
        return cls(dict(counts))

    def top_terms(self, fraction: float) -> frozenset[TermId]:
        """The most frequent ``fraction`` of the lexicon (at least one term)."""
        if not self.freq:
            return frozenset()
        k = max(1, round(fraction * len(self.freq)))
        ranked = sorted(self.freq, key=lambda t: (-self.freq[t], t))
        return frozenset(ranked[:k])


@dataclass(frozen=True)
class CostModel:
    """Abstract work units: c1 per (object, query) match check, c2 per object
    handled, c3 per query insertion, c4 per query deletion."""

    c1: float = 1.0
    c2: float = 1.0
    c3: float = 1.0
    c4: float = 1.0

    def __post_init__(self) -> None:
        cs = (self.c1, self.c2, self.c3, self.c4)
        if any(c < 0 for c in cs):
            raise ValueError("costs must be nonnegative")
        if all(c == 0 for c in cs):
            raise ValueError("at least one cost must be positive")


@dataclass(frozen=True)
class WorkerLoadSample:
    n_objects: int = 0
    n_inserts: int = 0
    n_deletes: int = 0

    def __post_init__(self) -> None:
        if min(self.n_objects, self.n_inserts, self.n_deletes) < 0:
            raise ValueError("counts must be nonnegative")


def matches(o: SpatioTextualObject, q: StsQuery) -> bool:
    """True iff the object lies in the query region (boundaries inclusive)
    and satisfies every clause of the keyword expression."""
    if not q.region.contains(o.loc):
        return False
    return all(not clause.isdisjoint(o.terms) for clause in q.expr.clauses)


def worker_load(sample: WorkerLoadSample, costs: CostModel) -> float:
    return (
        costs.c1 * sample.n_objects * sample.n_inserts
        + costs.c2 * sample.n_objects
        + costs.c3 * sample.n_inserts
        + costs.c4 * sample.n_deletes
    )


def index_terms(q: StsQuery, stats: TermStats) -> frozenset[TermId]:
    """Terms a query is posted under in inverted indexes.

    Picks the clause with the lowest total term frequency and returns all of
    its terms.  Every matching object carries at least one term of every
    clause, so one whole clause is the cheapest complete posting set; for a
    pure-AND query this degenerates to the single least frequent keyword.
    Ties go to the earliest clause, which keeps the choice stable between
    the insert and delete paths.
    """
    best = min(q.expr.clauses, key=lambda cl: sum(stats.freq_of(t) for t in cl))
    return best


class TermDict:
    """Interns term tokens to dense integer ids, shared across a run."""

    def __init__(self) -> None:
        self._ids: dict[str, int] = {}
        self._tokens: list[str] = []

    def __len__(self) -> int:
        return len(self._tokens)

    def intern(self, token: str) -> TermId:
        tid = self._ids.get(token)
        if tid is None:
            tid = len(self._tokens)
            self._ids[token] = tid
            self._tokens.append(token)
        return tid

    def intern_all(self, tokens: Iterable[str]) -> frozenset[TermId]:
        return frozenset(self.intern(t) for t in tokens)

    def token(self, tid: TermId) -> str:
        return self._tokens[tid]

    def get(self, token: str) -> TermId | None:
        return self._ids.get(token)
