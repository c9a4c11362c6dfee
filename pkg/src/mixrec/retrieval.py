"""Top-M candidate generation from fitted chunk tables, plus baselines.

The model-based retriever scores items by the interest mixture: per query
user, the smoothed interest weights multiply the per-interest smoothed item
probabilities from the previous chunk's count tables, evaluated only over
truncated per-interest top lists. Baselines: static train-time mixture,
cosine similarity against engagement-averaged item vectors, and global
popularity. All retrievers share the tie-break (score descending, item id
ascending) and seen-item exclusion rules, and all are pure reads, so batch
scoring fans out across a thread pool.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .embeddings import EmbeddingTable
from .graph import ChunkSlice
from .initialization import InitArtifact, MleMixture
from .sampler import ChunkModel

__all__ = [
    "RetrievalConfig",
    "CandidateList",
    "ScoredInterestIndex",
    "build_index",
    "retrieve_micro",
    "MleIndex",
    "build_mle_index",
    "retrieve_mle",
    "ann_encode_items",
    "ann_retrieve",
    "popularity_ranking",
    "popularity_retrieve",
    "batch_retrieve",
]

logger = logging.getLogger(__name__)

COLD_POLICIES = ("popularity-fallback", "empty")


@dataclass
class RetrievalConfig:
    M: int = 100
    L: int | None = None  # per-interest truncation; defaults to 5*M
    exclude_seen: bool = True
    cold_user_policy: str = "popularity-fallback"
    workers: int = 1

    def __post_init__(self):
        if self.M < 1:
            raise ValueError("M must be >= 1")
        if self.L is not None and self.L < self.M:
            raise ValueError("L must be >= M")
        if self.cold_user_policy not in COLD_POLICIES:
            raise ValueError(f"cold_user_policy must be one of {COLD_POLICIES}")

    @property
    def truncation(self) -> int:
        return self.L if self.L is not None else 5 * self.M


@dataclass
class CandidateList:
    """Ranked candidates for one (user, target chunk) query."""

    user: int
    chunk: int
    items: list[tuple[int, float]] = field(default_factory=list)

    def item_ids(self) -> list[int]:
        return [i for i, _ in self.items]

    def __len__(self) -> int:
        return len(self.items)


@dataclass
class ScoredInterestIndex:
    """Per-interest truncated top lists of smoothed item probabilities.

    Interest k's candidates are stored as positions into the sorted chunk
    pool (``positions[ptr[k]:ptr[k+1]]`` with aligned smoothed
    probabilities), sorted by probability descending, ties by ascending item
    id, length <= L. Only items engaged in the source chunk appear. Also
    carries the chunk's popularity ranking for cold-user fallback.
    """

    chunk: int
    ptr: np.ndarray
    positions: np.ndarray
    phis: np.ndarray
    pool_items: np.ndarray
    pop_order: np.ndarray  # pool items sorted by (count desc, id asc)
    pop_counts: np.ndarray  # aligned with pop_order

    def interest_list(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = self.ptr[k], self.ptr[k + 1]
        return self.pool_items[self.positions[lo:hi]], self.phis[lo:hi]

    def interest_positions(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = self.ptr[k], self.ptr[k + 1]
        return self.positions[lo:hi], self.phis[lo:hi]


def build_index(m: ChunkModel, cfg: RetrievalConfig) -> ScoredInterestIndex:
    """Build per-interest top-L lists of (beta + count) / (I*beta + total).

    Pool items without a count under an interest share the smoothed floor
    value and fill the tail of that interest's list (ascending id) up to L.
    Items with no engagements in the chunk are excluded everywhere.
    """
    K = m.K
    beta, Ibeta = m.beta, m.Ibeta
    L = cfg.truncation
    pool = m.item_pool
    nk = m.n_kt.astype(np.float64)

    members: list[list[tuple[int, int]]] = [[] for _ in range(K)]
    for i, k, c in m.iter_item_counts():
        members[k].append((i, c))

    ptr = np.zeros(K + 1, dtype=np.int64)
    pos_out: list[np.ndarray] = []
    phis_out: list[np.ndarray] = []
    for k in range(K):
        total = Ibeta + nk[k]
        if nk[k] == 0:
            ptr[k + 1] = ptr[k]
            continue
        mem = members[k]
        mi = np.asarray([e[0] for e in mem], dtype=np.int64)
        mc = np.asarray([e[1] for e in mem], dtype=np.int64)
        order = np.lexsort((mi, -mc))
        mi, mc = mi[order], mc[order]
        if len(mi) > L:
            mi, mc = mi[:L], mc[:L]
        phi = (beta + mc.astype(np.float64)) / total
        if len(mi) < L:
            extra = np.setdiff1d(pool, mi, assume_unique=False)[: L - len(mi)]
            if len(extra):
                mi = np.concatenate([mi, extra])
                phi = np.concatenate([phi, np.full(len(extra), beta / total)])
        pos_out.append(np.searchsorted(pool, mi))
        phis_out.append(phi)
        ptr[k + 1] = ptr[k] + len(mi)

    pool_counts = np.bincount(
        np.searchsorted(pool, m.slice.items), minlength=len(pool)
    )
    pop = np.lexsort((pool, -pool_counts))
    return ScoredInterestIndex(
        chunk=m.chunk,
        ptr=ptr,
        positions=np.concatenate(pos_out) if pos_out else np.empty(0, np.int64),
        phis=np.concatenate(phis_out) if phis_out else np.empty(0, np.float64),
        pool_items=pool,
        pop_order=pool[pop],
        pop_counts=pool_counts[pop],
    )


def _select_top(
    items: np.ndarray,
    scores: np.ndarray,
    M: int,
    seen=None,
    chunk: int = -1,
    user: int = -1,
) -> CandidateList:
    """Order by (score desc, item asc), drop seen items, keep the first M."""
    order = np.lexsort((items, -scores))
    out: list[tuple[int, float]] = []
    for idx in order:
        item = int(items[idx])
        if seen is not None and item in seen:
            continue
        out.append((item, float(scores[idx])))
        if len(out) == M:
            break
    return CandidateList(user=user, chunk=chunk, items=out)


def _fallback(idx_or_ranking, cfg: RetrievalConfig, user: int, chunk: int, seen):
    if cfg.cold_user_policy == "empty" or idx_or_ranking is None:
        return CandidateList(user=user, chunk=chunk, items=[])
    items, counts = idx_or_ranking
    out: list[tuple[int, float]] = []
    for item, c in zip(items.tolist(), counts.tolist()):
        if seen is not None and item in seen:
            continue
        out.append((item, float(c)))
        if len(out) == cfg.M:
            break
    return CandidateList(user=user, chunk=chunk, items=out)


def retrieve_micro(
    u: int,
    m: ChunkModel,
    idx: ScoredInterestIndex,
    init: InitArtifact,
    cfg: RetrievalConfig,
    seen=None,
    target_chunk: int | None = None,
) -> CandidateList:
    """Mixture-scored top M over the union of the support's truncated lists.

    Interest weights are the alpha-smoothed combined user counts normalized
    over the support. Users with no t=0 history fall back per policy.
    """
    chunk = m.chunk + 1 if target_chunk is None else target_chunk
    sup = init.support(u)
    if len(sup) == 0:
        return _fallback((idx.pop_order, idx.pop_counts), cfg, u, chunk, seen if cfg.exclude_seen else None)
    ks, counts = m.user_counts_any(u)
    masses = init.alpha + counts.astype(np.float64)
    theta = masses / masses.sum()

    # dense accumulation over the chunk pool, support interests ascending
    acc = np.zeros(len(idx.pool_items))
    touched = np.zeros(len(idx.pool_items), dtype=bool)
    hit = False
    for k, w in zip(ks.tolist(), theta.tolist()):
        pos, lp = idx.interest_positions(k)
        if len(pos):
            acc[pos] += w * lp
            touched[pos] = True
            hit = True
    if not hit:
        return CandidateList(user=u, chunk=chunk, items=[])
    cand = np.flatnonzero(touched)
    return _select_top(
        idx.pool_items[cand],
        acc[cand],
        cfg.M,
        seen=seen if cfg.exclude_seen else None,
        chunk=chunk,
        user=u,
    )


@dataclass
class MleIndex:
    """Truncated per-interest lists for the static mixture retriever."""

    ptr: np.ndarray
    items: np.ndarray
    probs: np.ndarray

    def interest_list(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = self.ptr[k], self.ptr[k + 1]
        return self.items[lo:hi], self.probs[lo:hi]


def build_mle_index(mix: MleMixture, cfg: RetrievalConfig) -> MleIndex:
    K = len(mix.interest_ptr) - 1
    L = cfg.truncation
    ptr = np.zeros(K + 1, dtype=np.int64)
    items_out, probs_out = [], []
    for k in range(K):
        items, probs = mix.interest_items(k)
        order = np.lexsort((items, -probs))[:L]
        items_out.append(items[order])
        probs_out.append(probs[order])
        ptr[k + 1] = ptr[k] + len(order)
    return MleIndex(
        ptr=ptr,
        items=np.concatenate(items_out) if items_out else np.empty(0, np.int64),
        probs=np.concatenate(probs_out) if probs_out else np.empty(0, np.float64),
    )


def retrieve_mle(
    u: int,
    mix: MleMixture,
    cfg: RetrievalConfig,
    seen=None,
    allowed: np.ndarray | None = None,
    index: MleIndex | None = None,
    fallback: tuple[np.ndarray, np.ndarray] | None = None,
    chunk: int = -1,
) -> CandidateList:
    """Static mixture ranking over train items; optionally restricted to an
    allowed item pool so backtests compare methods over identical pools."""
    if index is None:
        index = build_mle_index(mix, cfg)
    ks, pks = mix.user_mixture(u)
    if len(ks) == 0:
        return _fallback(fallback, cfg, u, chunk, seen if cfg.exclude_seen else None)
    parts_i, parts_s = [], []
    for k, w in zip(ks.tolist(), pks.tolist()):
        li, lp = index.interest_list(k)
        if len(li):
            parts_i.append(li)
            parts_s.append(w * lp)
    if not parts_i:
        return CandidateList(user=u, chunk=chunk, items=[])
    all_items = np.concatenate(parts_i)
    all_scores = np.concatenate(parts_s)
    if allowed is not None:
        keep = np.isin(all_items, allowed)
        all_items, all_scores = all_items[keep], all_scores[keep]
        if not len(all_items):
            return CandidateList(user=u, chunk=chunk, items=[])
    uniq, inv = np.unique(all_items, return_inverse=True)
    acc = np.zeros(len(uniq))
    np.add.at(acc, inv, all_scores)
    return _select_top(
        uniq, acc, cfg.M, seen=seen if cfg.exclude_seen else None, chunk=chunk, user=u
    )


def ann_encode_items(slice_: ChunkSlice, emb: EmbeddingTable) -> tuple[np.ndarray, np.ndarray]:
    """Chunk item vectors as per-engagement means of engaging users' vectors."""
    pool, inv = np.unique(slice_.items, return_inverse=True)
    acc = np.zeros((len(pool), emb.dim))
    np.add.at(acc, inv, emb.user_vectors[slice_.users])
    counts = np.bincount(inv, minlength=len(pool))
    return pool, acc / counts[:, None]


def ann_retrieve(
    u: int,
    pool_items: np.ndarray,
    item_vecs: np.ndarray,
    emb: EmbeddingTable,
    cfg: RetrievalConfig,
    seen=None,
    chunk: int = -1,
) -> CandidateList:
    """Exact top-M by cosine between the user vector and chunk item vectors.

    Zero-norm item vectors rank last (cosine undefined, scored -inf); a
    zero-norm user vector yields an empty list with a warning.
    """
    uv = emb.user_vectors[u]
    un = float(np.linalg.norm(uv))
    if un == 0.0:
        logger.warning("user %d has a zero embedding; returning no candidates", u)
        return CandidateList(user=u, chunk=chunk, items=[])
    norms = np.linalg.norm(item_vecs, axis=1)
    dots = item_vecs @ uv
    with np.errstate(divide="ignore", invalid="ignore"):
        cos = np.where(norms > 0.0, dots / (norms * un), -np.inf)
    return _select_top(
        pool_items, cos, cfg.M, seen=seen if cfg.exclude_seen else None, chunk=chunk, user=u
    )


def popularity_ranking(slice_: ChunkSlice) -> tuple[np.ndarray, np.ndarray]:
    """Chunk items by engagement count desc, ties by ascending item id."""
    items, counts = np.unique(slice_.items, return_counts=True)
    order = np.lexsort((items, -counts))
    return items[order], counts[order]


def popularity_retrieve(
    slice_: ChunkSlice,
    cfg: RetrievalConfig,
    user: int = -1,
    seen=None,
    chunk: int = -1,
    ranking: tuple[np.ndarray, np.ndarray] | None = None,
) -> CandidateList:
    """Global top-M of the chunk; identical for all users up to exclusion."""
    if ranking is None:
        ranking = popularity_ranking(slice_)
    items, counts = ranking
    out: list[tuple[int, float]] = []
    for item, c in zip(items.tolist(), counts.tolist()):
        if cfg.exclude_seen and seen is not None and item in seen:
            continue
        out.append((int(item), float(c)))
        if len(out) == cfg.M:
            break
    return CandidateList(user=user, chunk=chunk, items=out)


def batch_retrieve(fn, users, cfg: RetrievalConfig):
    """Map a retrieval closure over users, fanning out across threads.

    ``fn(user)`` must be a pure read returning a CandidateList; results come
    back in input order regardless of worker count. Users are sharded into
    coarse blocks so per-task overhead stays negligible.
    """
    users = list(users)
    if cfg.workers <= 1 or len(users) < 2 * cfg.workers:
        return [fn(u) for u in users]
    shard_size = max(1, (len(users) + cfg.workers - 1) // cfg.workers)
    shards = [users[i:i + shard_size] for i in range(0, len(users), shard_size)]
    with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
        results = pool.map(lambda shard: [fn(u) for u in shard], shards)
        return [c for block in results for c in block]
