"""Ranking metrics per (user, chunk) query and their aggregation.

A query is one user's deduplicated ground-truth item set for one chunk;
candidates are scored with Recall@M, MRR@M (reciprocal rank of the first
relevant item, 0 when none lands in the top M), and binary-gain NDCG@M with
a log2(rank+1) discount. Chunk-level numbers are unweighted means over that
chunk's queries; overall numbers are means over all queries, which equals
the query-count-weighted mean of the chunk means.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .graph import ChunkSlice

__all__ = [
    "Query",
    "QuerySet",
    "MetricBlock",
    "MetricsReport",
    "build_queries",
    "recall_at_m",
    "mrr_at_m",
    "ndcg_at_m",
    "score_query",
    "aggregate",
]


@dataclass(frozen=True)
class Query:
    user: int
    chunk: int
    truth: frozenset


@dataclass
class QuerySet:
    queries: list[Query]

    def __len__(self) -> int:
        return len(self.queries)

    def chunks(self) -> list[int]:
        return sorted({q.chunk for q in self.queries})


def build_queries(test: list[ChunkSlice]) -> QuerySet:
    """One query per (user, chunk) with at least one engagement; ground
    truth is the deduplicated item set of that user's chunk engagements."""
    queries: list[Query] = []
    for slc in test:
        for u, items in slc.iter_users():
            queries.append(Query(user=u, chunk=slc.chunk, truth=frozenset(items.tolist())))
    return QuerySet(queries)


def _ids(cands) -> list[int]:
    if hasattr(cands, "item_ids"):
        return cands.item_ids()
    return list(cands)


def recall_at_m(cands, truth) -> float:
    """|retrieved intersect truth| / |truth|."""
    if not truth:
        raise ValueError("ground-truth set must be nonempty")
    ids = _ids(cands)
    return len(set(ids) & set(truth)) / len(set(truth))


def mrr_at_m(cands, truth) -> float:
    """1/rank of the first relevant candidate (1-indexed); 0 if none."""
    if not truth:
        raise ValueError("ground-truth set must be nonempty")
    truth = set(truth)
    for pos, item in enumerate(_ids(cands)):
        if item in truth:
            return 1.0 / (pos + 1)
    return 0.0


def ndcg_at_m(cands, truth, m: int | None = None) -> float:
    """Binary-gain NDCG: DCG over relevant hits / ideal DCG of the
    min(|truth|, M)-length perfect prefix. ``m`` defaults to the candidate
    list's length; pass the retrieval cutoff when lists may run short."""
    if not truth:
        raise ValueError("ground-truth set must be nonempty")
    truth = set(truth)
    ids = _ids(cands)
    if m is None:
        m = len(ids)
    ids = ids[:m]
    dcg = 0.0
    for pos, item in enumerate(ids):
        if item in truth:
            dcg += 1.0 / math.log2(pos + 2)
    idcg = sum(1.0 / math.log2(r + 2) for r in range(min(len(truth), m)))
    if idcg == 0.0:
        return 0.0
    return dcg / idcg


def score_query(cands, truth, m: int | None = None) -> tuple[float, float, float]:
    return recall_at_m(cands, truth), mrr_at_m(cands, truth), ndcg_at_m(cands, truth, m=m)


@dataclass
class MetricBlock:
    n_queries: int = 0
    recall: float = 0.0
    mrr: float = 0.0
    ndcg: float = 0.0


@dataclass
class MetricsReport:
    """Per-chunk and overall means for one (method, M) pair."""

    method: str
    m: int
    per_chunk: dict[int, MetricBlock] = field(default_factory=dict)
    overall: MetricBlock = field(default_factory=MetricBlock)

    def check_consistency(self, tol: float = 1e-12) -> None:
        n = sum(b.n_queries for b in self.per_chunk.values())
        if n != self.overall.n_queries:
            raise ValueError("per-chunk query counts disagree with overall")
        if n == 0:
            return
        for name in ("recall", "mrr", "ndcg"):
            weighted = (
                sum(getattr(b, name) * b.n_queries for b in self.per_chunk.values()) / n
            )
            if abs(weighted - getattr(self.overall, name)) > tol:
                raise ValueError(f"overall {name} is not the weighted chunk mean")


def aggregate(
    per_query: list[tuple[float, float, float]],
    queries: QuerySet,
    method: str = "",
    m: int = 0,
) -> MetricsReport:
    """Unweighted mean within each chunk; overall mean over all queries."""
    if len(per_query) != len(queries):
        raise ValueError("every query must be scored exactly once")
    sums: dict[int, np.ndarray] = {}
    counts: dict[int, int] = {}
    total = np.zeros(3)
    for (r, rr, nd), q in zip(per_query, queries.queries):
        v = np.asarray([r, rr, nd])
        sums[q.chunk] = sums.get(q.chunk, np.zeros(3)) + v
        counts[q.chunk] = counts.get(q.chunk, 0) + 1
        total += v
    report = MetricsReport(method=method, m=m)
    for chunk in sorted(sums):
        c = counts[chunk]
        s = sums[chunk] / c
        report.per_chunk[chunk] = MetricBlock(
            n_queries=c, recall=float(s[0]), mrr=float(s[1]), ndcg=float(s[2])
        )
    n = len(queries)
    if n:
        t = total / n
        report.overall = MetricBlock(
            n_queries=n, recall=float(t[0]), mrr=float(t[1]), ndcg=float(t[2])
        )
    return report
