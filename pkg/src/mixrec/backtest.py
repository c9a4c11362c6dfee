"""Rolling backtest: fit on chunk t, retrieve and score against chunk t+1.

One config drives the whole pipeline. Artifacts (graph, embeddings,
clusters, t=0 counts, per-chunk fitted models) persist under the output
directory and are reused on rerun, so a run can resume per chunk. All file
writes are atomic (temp file + rename) and all outputs are deterministic
given the config, including float formatting.

The first held-out chunk is only fitted (it has no fitted predecessor to
retrieve from); every later chunk is the query target for the previous
chunk's representations. The candidate pool for every method is the set of
items engaged in the source chunk, so comparisons stay fair; the static
mixture baseline ranks train items restricted to that pool.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .clustering import cluster_items, export_cluster_map, load_clusters, save_clusters
from .embeddings import load_embeddings, save_embeddings, train_embeddings
from .graph import EngagementGraph, SplitSpec, format_stats, graph_stats, load_edge_list, load_graph, regroup_chunks, save_graph, split
from .initialization import build_init, load_init, mle_mixture, save_init
from .metrics import MetricsReport, QuerySet, aggregate, build_queries, score_query
from .retrieval import (
    RetrievalConfig,
    ann_encode_items,
    ann_retrieve,
    batch_retrieve,
    build_index,
    build_mle_index,
    popularity_ranking,
    popularity_retrieve,
    retrieve_micro,
    retrieve_mle,
)
from .sampler import SamplerConfig, UserCounts, fit_chunk, load_chunk_model, save_chunk_model, sweep_diagnostics_text

__all__ = ["RunConfig", "backtest", "write_reports", "report", "METHODS"]

logger = logging.getLogger(__name__)

METHODS = ("micro", "mle", "ann", "popularity")


@dataclass
class EmbedParams:
    dim: int = 64
    epochs: int = 10
    negatives: int = 10
    lr: float = 0.05
    batch_size: int = 1024
    score_mode: str = "dot"


@dataclass
class RunConfig:
    data_path: str = ""
    out_dir: str = "runs/default"
    delimiter: str = "\t"
    regroup_factor: int = 1
    test_chunks: int = 3
    num_interests: int = 100
    kmeans_iters: int = 25
    alpha: float = 0.1
    beta: float = 0.01
    embed: EmbedParams = field(default_factory=EmbedParams)
    max_sweeps: int = 20
    convergence_tol: float = 1e-4
    user_count_mode: str = "reset"
    m_values: list[int] = field(default_factory=lambda: [100])
    truncation: int | None = None
    exclude_seen: bool = True
    cold_user_policy: str = "popularity-fallback"
    workers: int = 1
    methods: list[str] = field(default_factory=lambda: list(METHODS))
    dump_candidates: bool = False
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.embed, dict):
            self.embed = EmbedParams(**self.embed)
        if not self.m_values:
            raise ValueError("m_values must be nonempty")
        unknown = set(self.methods) - set(METHODS)
        if unknown:
            raise ValueError(f"unknown methods {sorted(unknown)}; valid: {METHODS}")

    @staticmethod
    def from_json(path) -> "RunConfig":
        with open(path) as fh:
            return RunConfig(**json.load(fh))

    def to_json(self, path) -> None:
        _atomic_write(path, json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")

    def sampler_config(self, chunk_ordinal: int) -> SamplerConfig:
        return SamplerConfig(
            max_sweeps=self.max_sweeps,
            convergence_tol=self.convergence_tol,
            seed=self.seed + 100_003 * (chunk_ordinal + 1),
            user_count_mode=self.user_count_mode,
        )

    def retrieval_config(self, m: int) -> RetrievalConfig:
        return RetrievalConfig(
            M=m,
            L=self.truncation,
            exclude_seen=self.exclude_seen,
            cold_user_policy=self.cold_user_policy,
            workers=self.workers,
        )


def _atomic_write(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _atomic_npz(path, save_fn) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp.npz")
    save_fn(tmp)
    os.replace(tmp, path)


# -- artifact stages ----------------------------------------------------------


def ensure_graph(cfg: RunConfig) -> EngagementGraph:
    out = Path(cfg.out_dir)
    cache = out / "graph.npz"
    if cache.exists():
        logger.info("stage=ingest action=reuse path=%s", cache)
        return load_graph(cache)
    g = load_edge_list(cfg.data_path, delimiter=cfg.delimiter)
    _atomic_npz(cache, lambda p: save_graph(g, p))
    stats = format_stats(graph_stats(g))
    _atomic_write(out / "graph_stats.txt", stats + "\n")
    for line in stats.splitlines():
        logger.info("stage=ingest %s", line)
    return g


def ensure_embeddings(cfg: RunConfig, train: EngagementGraph):
    cache = Path(cfg.out_dir) / "embeddings.npz"
    if cache.exists():
        logger.info("stage=embed action=reuse path=%s", cache)
        return load_embeddings(cache)
    e = cfg.embed
    emb = train_embeddings(
        train,
        dim=e.dim,
        epochs=e.epochs,
        negatives=e.negatives,
        lr=e.lr,
        seed=cfg.seed,
        score_mode=e.score_mode,
        batch_size=e.batch_size,
    )
    _atomic_npz(cache, lambda p: save_embeddings(emb, p))
    logger.info("stage=embed dim=%d epochs=%d final_loss=%.6f", e.dim, e.epochs, emb.epoch_losses[-1])
    return emb


def ensure_clusters(cfg: RunConfig, emb):
    out = Path(cfg.out_dir)
    cache = out / "clusters.npz"
    if cache.exists():
        logger.info("stage=cluster action=reuse path=%s", cache)
        return load_clusters(cache)
    clusters = cluster_items(emb.item_vectors, K=cfg.num_interests, iters=cfg.kmeans_iters, seed=cfg.seed)
    _atomic_npz(cache, lambda p: save_clusters(clusters, p))
    export_cluster_map(clusters, out / "cluster_map.tsv", delimiter=cfg.delimiter)
    logger.info(
        "stage=cluster K=%d iters=%d objective=%.4f",
        cfg.num_interests,
        len(clusters.objective_history),
        clusters.objective_history[-1] if clusters.objective_history else float("nan"),
    )
    return clusters


def ensure_init(cfg: RunConfig, train: EngagementGraph, clusters):
    cache = Path(cfg.out_dir) / "init.npz"
    if cache.exists():
        logger.info("stage=init action=reuse path=%s", cache)
        return load_init(cache)
    init = build_init(
        train, clusters.item_to_interest, cfg.num_interests, alpha=cfg.alpha, beta=cfg.beta
    )
    _atomic_npz(cache, lambda p: save_init(init, p))
    logger.info(
        "stage=init users=%d cold_users=%d mean_support=%.2f",
        init.num_users,
        int((np.diff(init.support_ptr) == 0).sum()),
        float(np.diff(init.support_ptr).mean()),
    )
    return init


class _SeenTracker:
    """Per-user seen-item sets: train items as sorted arrays, test items
    accumulated incrementally."""

    class _View:
        __slots__ = ("train_items", "extra")

        def __init__(self, train_items, extra):
            self.train_items = train_items
            self.extra = extra

        def __contains__(self, item: int) -> bool:
            if item in self.extra:
                return True
            a = self.train_items
            pos = int(np.searchsorted(a, item))
            return pos < len(a) and a[pos] == item

    def __init__(self, train: EngagementGraph):
        order = np.lexsort((train.items, train.users))
        us = train.users[order]
        its = train.items[order]
        uniq, starts = np.unique(us, return_index=True)
        bounds = np.concatenate([starts, [len(us)]])
        self._train: dict[int, np.ndarray] = {
            int(u): np.unique(its[bounds[i]:bounds[i + 1]]) for i, u in enumerate(uniq)
        }
        self._extra: dict[int, set] = {}
        self._empty = np.empty(0, dtype=np.int64)

    def view(self, user: int):
        return self._View(self._train.get(user, self._empty), self._extra.get(user, ()))

    def add_chunk(self, slice_) -> None:
        for u, items in slice_.iter_users():
            self._extra.setdefault(u, set()).update(items.tolist())


def _fit_or_load(cfg, slc, init, ordinal, base):
    path = Path(cfg.out_dir) / "chunks" / f"chunk_{slc.chunk:05d}.npz"
    scfg = cfg.sampler_config(ordinal)
    if path.exists():
        logger.info("stage=fit chunk=%d action=reuse", slc.chunk)
        return load_chunk_model(path, slc, init, scfg, base=base)
    m = fit_chunk(slc, init, scfg, base=base)
    _atomic_npz(path, lambda p: save_chunk_model(m, p))
    _atomic_write(
        Path(cfg.out_dir) / "chunks" / f"chunk_{slc.chunk:05d}_sweeps.tsv",
        sweep_diagnostics_text(m),
    )
    logger.info(
        "stage=fit chunk=%d engagements=%d sweeps=%d converged=%s log_joint=%r",
        slc.chunk,
        m.n,
        m.sweeps_run,
        m.converged,
        m.current_log_joint,
    )
    return m


def backtest(cfg: RunConfig) -> dict[tuple[str, int], MetricsReport]:
    """Run the rolling protocol and return reports keyed by (method, M)."""
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.to_json(out / "config.json")

    g = ensure_graph(cfg)
    if cfg.regroup_factor > 1:
        g = regroup_chunks(g, cfg.regroup_factor)
    t_split = g.num_chunks - cfg.test_chunks
    if t_split < 1:
        raise ValueError(
            f"test_chunks={cfg.test_chunks} leaves no train chunks (total {g.num_chunks})"
        )
    train, test = split(g, SplitSpec(t_split=t_split))
    logger.info(
        "stage=split train_edges=%d test_chunks=%d", train.num_edges, len(test)
    )
    if len(test) < 2:
        logger.warning("fewer than 2 test chunks: nothing can be evaluated")

    methods = list(cfg.methods)
    need_emb = bool({"micro", "mle", "ann"} & set(methods))
    need_init = bool({"micro", "mle"} & set(methods))
    emb = ensure_embeddings(cfg, train) if need_emb else None
    init = None
    mix = None
    if need_init:
        clusters = ensure_clusters(cfg, emb)
        init = ensure_init(cfg, train, clusters)
        if "mle" in methods:
            mix = mle_mixture(init)

    seen = _SeenTracker(train) if cfg.exclude_seen else None
    ledger = (
        UserCounts.from_init(init)
        if (init is not None and cfg.user_count_mode == "accumulate")
        else None
    )

    rcfgs = {m: cfg.retrieval_config(m) for m in cfg.m_values}
    mle_indexes = {m: build_mle_index(mix, rcfgs[m]) for m in cfg.m_values} if mix else {}

    per_query: dict[tuple[str, int], list[tuple[float, float, float]]] = {
        (meth, m): [] for meth in methods for m in cfg.m_values
    }
    eval_queries: list = []
    cand_dump: dict[int, list[str]] = {m: [] for m in cfg.m_values}

    prev_model = None
    prev_slice = None
    for j, slc in enumerate(test):
        model = _fit_or_load(cfg, slc, init, j, ledger) if "micro" in methods else None

        if j >= 1:
            queries = build_queries([slc]).queries
            eval_queries.extend(queries)
            pool = prev_slice.item_pool
            pop_rank = popularity_ranking(prev_slice)
            ann_pool, ann_vecs = ann_encode_items(prev_slice, emb) if "ann" in methods else (None, None)
            for m in cfg.m_values:
                rcfg = rcfgs[m]
                idx = build_index(prev_model, rcfg) if "micro" in methods else None
                closures = {}
                if "micro" in methods:
                    closures["micro"] = lambda q, idx=idx, rcfg=rcfg: retrieve_micro(
                        q.user, prev_model, idx, init, rcfg,
                        seen=seen.view(q.user) if seen else None,
                        target_chunk=slc.chunk,
                    )
                if "mle" in methods:
                    closures["mle"] = lambda q, rcfg=rcfg, m=m: retrieve_mle(
                        q.user, mix, rcfg,
                        seen=seen.view(q.user) if seen else None,
                        allowed=pool, index=mle_indexes[m],
                        fallback=pop_rank, chunk=slc.chunk,
                    )
                if "ann" in methods:
                    closures["ann"] = lambda q, rcfg=rcfg: ann_retrieve(
                        q.user, ann_pool, ann_vecs, emb, rcfg,
                        seen=seen.view(q.user) if seen else None, chunk=slc.chunk,
                    )
                if "popularity" in methods:
                    closures["popularity"] = lambda q, rcfg=rcfg: popularity_retrieve(
                        prev_slice, rcfg, user=q.user,
                        seen=seen.view(q.user) if seen else None,
                        chunk=slc.chunk, ranking=pop_rank,
                    )
                for meth in methods:
                    fn = closures[meth]
                    cands = batch_retrieve(fn, queries, rcfg)
                    per_query[(meth, m)].extend(
                        score_query(c, q.truth, m=m) for c, q in zip(cands, queries)
                    )
                    if cfg.dump_candidates:
                        for c in cands:
                            for rank, (item, score) in enumerate(c.items, start=1):
                                cand_dump[m].append(
                                    f"{c.user}\t{c.chunk}\t{rank}\t{item}\t{score!r}\t{meth}"
                                )
            logger.info("stage=eval chunk=%d queries=%d", slc.chunk, len(queries))

        if seen is not None:
            seen.add_chunk(slc)
        if ledger is not None and model is not None:
            model.fold_into(ledger)
        prev_model, prev_slice = model, slc

    # aggregate; queries were extended chunk by chunk, matching score order
    qs = QuerySet(eval_queries)
    reports: dict[tuple[str, int], MetricsReport] = {}
    for meth in methods:
        for m in cfg.m_values:
            rep = aggregate(per_query[(meth, m)], qs, method=meth, m=m)
            rep.check_consistency()
            reports[(meth, m)] = rep
    write_reports(reports, out / "metrics")
    if cfg.dump_candidates:
        for m in cfg.m_values:
            _atomic_write(
                out / "metrics" / f"candidates_M{m}.tsv",
                "user\tchunk\trank\titem\tscore\tmethod\n" + "\n".join(cand_dump[m]) + "\n",
            )
    return reports


# -- report files -------------------------------------------------------------


def write_reports(reports: dict[tuple[str, int], MetricsReport], metrics_dir) -> None:
    metrics_dir = Path(metrics_dir)
    series = ["method\tM\tchunk\tn_queries\trecall\tmrr\tndcg"]
    overall = ["method\tM\tn_queries\trecall\tmrr\tndcg"]
    for (meth, m) in sorted(reports):
        rep = reports[(meth, m)]
        for chunk in sorted(rep.per_chunk):
            b = rep.per_chunk[chunk]
            series.append(
                f"{meth}\t{m}\t{chunk}\t{b.n_queries}\t{b.recall!r}\t{b.mrr!r}\t{b.ndcg!r}"
            )
        o = rep.overall
        overall.append(f"{meth}\t{m}\t{o.n_queries}\t{o.recall!r}\t{o.mrr!r}\t{o.ndcg!r}")
    _atomic_write(metrics_dir / "series.tsv", "\n".join(series) + "\n")
    _atomic_write(metrics_dir / "overall.tsv", "\n".join(overall) + "\n")


def read_reports(metrics_dir) -> dict[tuple[str, int], MetricsReport]:
    from .metrics import MetricBlock

    metrics_dir = Path(metrics_dir)
    reports: dict[tuple[str, int], MetricsReport] = {}
    with open(metrics_dir / "series.tsv") as fh:
        next(fh)
        for line in fh:
            meth, m, chunk, n, r, rr, nd = line.rstrip("\n").split("\t")
            key = (meth, int(m))
            rep = reports.setdefault(key, MetricsReport(method=meth, m=int(m)))
            rep.per_chunk[int(chunk)] = MetricBlock(
                n_queries=int(n), recall=float(r), mrr=float(rr), ndcg=float(nd)
            )
    with open(metrics_dir / "overall.tsv") as fh:
        next(fh)
        for line in fh:
            meth, m, n, r, rr, nd = line.rstrip("\n").split("\t")
            key = (meth, int(m))
            if key in reports:
                reports[key].overall = MetricBlock(
                    n_queries=int(n), recall=float(r), mrr=float(rr), ndcg=float(nd)
                )
    return reports


def report(cfg: RunConfig) -> None:
    """Side-by-side method tables per M plus per-metric time-series files."""
    out = Path(cfg.out_dir)
    if not (out / "metrics" / "series.tsv").exists():
        raise FileNotFoundError(
            f"no metrics under {out / 'metrics'}; run the `backtest` subcommand first"
        )
    reports = read_reports(out / "metrics")
    report_dir = out / "report"
    ms = sorted({m for _, m in reports})
    for m in ms:
        methods = [meth for meth in METHODS if (meth, m) in reports]
        missing = [meth for meth in cfg.methods if (meth, m) not in reports]
        for meth in missing:
            logger.warning("report M=%d: no output for method %s; omitted", m, meth)
        lines = [f"M={m}", f"{'method':<12}{'recall':>12}{'mrr':>12}{'ndcg':>12}{'queries':>10}"]
        for meth in methods:
            o = reports[(meth, m)].overall
            lines.append(
                f"{meth:<12}{o.recall:>12.6f}{o.mrr:>12.6f}{o.ndcg:>12.6f}{o.n_queries:>10d}"
            )
        _atomic_write(report_dir / f"table_M{m}.txt", "\n".join(lines) + "\n")
        chunks = sorted({c for meth in methods for c in reports[(meth, m)].per_chunk})
        for metric in ("recall", "mrr", "ndcg"):
            rows = ["chunk\t" + "\t".join(methods)]
            for c in chunks:
                vals = []
                for meth in methods:
                    b = reports[(meth, m)].per_chunk.get(c)
                    vals.append(repr(getattr(b, metric)) if b else "")
                rows.append(f"{c}\t" + "\t".join(vals))
            _atomic_write(report_dir / f"{metric}_M{m}.tsv", "\n".join(rows) + "\n")
