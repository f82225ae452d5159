"""Trace file formats and stream interleaving.

Object trace, one record per line::

    id <TAB> x <TAB> y <TAB> space-separated-terms

Query trace, one operation per line (``I`` insert, ``D`` delete; delete
lines repeat the full query)::

    id <TAB> I|D <TAB> minx,miny,maxx,maxy <TAB> a|b&c

where clauses are joined by ``&`` and terms inside a clause by ``|``.
Tokens are percent-encoded so the separators stay unambiguous.
"""

from __future__ import annotations

from typing import Iterable, Sequence
from urllib.parse import quote, unquote

from .model import (
    BooleanExpr,
    GeoPoint,
    Rect,
    SpatioTextualObject,
    StsQuery,
    TermDict,
)

OBJ = "obj"
INS = "ins"
DEL = "del"

# A stream event is (kind, payload): ("obj", SpatioTextualObject) or
# ("ins"|"del", StsQuery).
StreamEvent = tuple[str, object]

_TOKEN_SAFE = ""  # quote() keeps alphanumerics and '_.-~' by default


def _encode_token(token: str) -> str:
    return quote(token, safe=_TOKEN_SAFE)


def read_objects(path: str, terms: TermDict) -> tuple[list[SpatioTextualObject], int]:
    """Load an object trace; returns (objects, malformed line count)."""
    objects: list[SpatioTextualObject] = []
    malformed = 0
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh):
            line = line.rstrip("\n")
            if not line:
                continue
            try:
                oid, xs, ys, toks = line.split("\t")
                tokset = frozenset(terms.intern(unquote(t)) for t in toks.split())
                objects.append(
                    SpatioTextualObject(
                        id=int(oid),
                        loc=GeoPoint(float(xs), float(ys)),
                        terms=tokset,
                        timestamp=lineno,
                    )
                )
            except (ValueError, IndexError):
                malformed += 1
    return objects, malformed


def write_objects(path: str, objects: Iterable[SpatioTextualObject], terms: TermDict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for o in objects:
            toks = " ".join(sorted(_encode_token(terms.token(t)) for t in o.terms))
            fh.write(f"{o.id}\t{o.loc.x:g}\t{o.loc.y:g}\t{toks}\n")


def format_expr(expr: BooleanExpr, terms: TermDict) -> str:
    return "&".join(
        "|".join(sorted(_encode_token(terms.token(t)) for t in clause))
        for clause in expr.clauses
    )


def parse_expr(text: str, terms: TermDict) -> BooleanExpr:
    clauses = []
    for part in text.split("&"):
        toks = [t for t in part.split("|") if t]
        if not toks:
            raise ValueError(f"empty clause in {text!r}")
        clauses.append(frozenset(terms.intern(unquote(t)) for t in toks))
    return BooleanExpr(tuple(clauses))


def read_query_ops(path: str, terms: TermDict) -> tuple[list[StreamEvent], int]:
    """Load a query-op trace; returns (ops, malformed line count)."""
    ops: list[StreamEvent] = []
    malformed = 0
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            try:
                qid, op, rect, cnf = line.split("\t")
                if op not in ("I", "D"):
                    raise ValueError(op)
                minx, miny, maxx, maxy = (float(v) for v in rect.split(","))
                q = StsQuery(
                    id=int(qid),
                    expr=parse_expr(cnf, terms),
                    region=Rect.of(minx, miny, maxx, maxy),
                )
                ops.append((INS if op == "I" else DEL, q))
            except (ValueError, IndexError):
                malformed += 1
    return ops, malformed


def write_query_ops(path: str, ops: Iterable[StreamEvent], terms: TermDict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for kind, q in ops:
            op = "I" if kind == INS else "D"
            r = q.region
            rect = f"{r.min.x:g},{r.min.y:g},{r.max.x:g},{r.max.y:g}"
            fh.write(f"{q.id}\t{op}\t{rect}\t{format_expr(q.expr, terms)}\n")


def interleave(
    objects: Sequence[SpatioTextualObject], ops: Sequence[StreamEvent]
) -> list[StreamEvent]:
    """Merge the two streams so their relative rates stay uniform end to end.

    Deterministic: at each step the stream lagging most in completed
    fraction advances, objects first on ties.  Re-running on the same inputs
    reproduces the same order, so a written trace pair replays identically.
    """
    merged: list[StreamEvent] = []
    io = iq = 0
    no, nq = len(objects), len(ops)
    while io < no or iq < nq:
        if iq >= nq:
            merged.append((OBJ, objects[io]))
            io += 1
        elif io >= no:
            merged.append(ops[iq])
            iq += 1
        elif (io + 1) * nq <= (iq + 1) * no:
            merged.append((OBJ, objects[io]))
            io += 1
        else:
            merged.append(ops[iq])
            iq += 1
    return merged
