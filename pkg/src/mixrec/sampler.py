"""Per-chunk collapsed Gibbs inference over latent engagement interests.

Each time chunk is fitted independently: latent interests are initialized
uniformly over each user's prior support, then resampled in fixed scan order
until the collapsed log-joint stabilizes. Item-side count tables start empty
every chunk; user-side counts start from the t=0 artifact (or accumulate
across chunks when configured). The final sample's count tables are the
point estimate consumed by retrieval.

The resampling weight for engagement (u, i) and candidate interest k, with
the engagement removed from all tables, is

    (alpha_u(k) + N_uk) * (beta + N_ikt) / (I*beta + N_kt)

where alpha_u(k) is alpha on the user's support (or on every interest for
users with no t=0 history) and zero elsewhere. The log-joint is the matching
collapsed objective, normalized so an empty chunk scores exactly 0.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

from .graph import ChunkSlice
from .initialization import InitArtifact

__all__ = [
    "SamplerConfig",
    "UserCounts",
    "ChunkModel",
    "SweepStats",
    "gibbs_weight",
    "init_chunk",
    "sweep",
    "log_joint",
    "fit_chunk",
    "save_chunk_model",
    "load_chunk_model",
]

logger = logging.getLogger(__name__)

USER_COUNT_MODES = ("reset", "accumulate")


@dataclass
class SamplerConfig:
    max_sweeps: int = 20
    convergence_tol: float = 1e-4
    seed: int = 0
    user_count_mode: str = "reset"

    def __post_init__(self):
        if self.max_sweeps < 1:
            raise ValueError("max_sweeps must be >= 1")
        if self.convergence_tol < 0:
            raise ValueError("convergence_tol must be >= 0")
        if self.user_count_mode not in USER_COUNT_MODES:
            raise ValueError(f"user_count_mode must be one of {USER_COUNT_MODES}")


class UserCounts:
    """Running user-interest counts threaded across chunks.

    Warm users (nonempty support) keep counts in a flat array aligned with
    the init artifact's support CSR; users without t=0 history keep sparse
    dict rows. ``from_init`` gives the t=0 state; ``accumulate`` mode folds
    each fitted chunk back in.
    """

    def __init__(self, warm: np.ndarray, cold: dict[int, dict[int, int]]):
        self.warm = warm
        self.cold = cold

    @staticmethod
    def from_init(init: InitArtifact) -> "UserCounts":
        return UserCounts(init.support_n0.astype(np.int64).copy(), {})

    def cold_row(self, user: int) -> dict[int, int]:
        return self.cold.get(user, {})


@dataclass
class SweepStats:
    sweep: int
    log_joint: float
    changed: int


class ChunkModel:
    """Sampler state for one chunk: assignments plus sufficient statistics.

    Engagements follow the slice's canonical order (grouped by user). Count
    tables: per-active-user combined user-interest counts (base + this
    chunk), per-chunk item-interest counts (dict of dicts, zero entries
    pruned), and per-chunk interest totals.
    """

    def __init__(
        self,
        slice_: ChunkSlice,
        init: InitArtifact,
        cfg: SamplerConfig,
        base: UserCounts | None = None,
        rng: np.random.Generator | None = None,
    ):
        self.chunk = slice_.chunk
        self.slice = slice_
        self.init = init
        self.cfg = cfg
        self.K = init.num_interests
        self.I = init.num_items
        self.alpha = init.alpha
        self.beta = init.beta
        self.Ibeta = init.num_items * init.beta
        self.underflow_events = 0
        self.history: list[SweepStats] = []
        self.sweeps_run = 0
        self.converged = False

        if base is None:
            base = UserCounts.from_init(init)
        self._base = base

        n = len(slice_)
        self.n = n
        self._items = slice_.items.tolist()
        self._active = slice_.unique_users.tolist()
        self._ptr = slice_.user_ptr.tolist()

        # per-active-user candidate lists and count rows, packed flat
        cand_flat: list[int] = []
        uk_flat: list[int] = []
        offs: list[int] = []
        lens: list[int] = []
        cold_flags: list[bool] = []
        cold_rows: dict[int, dict[int, int]] = {}
        cold_base: dict[int, dict[int, int]] = {}
        for r, u in enumerate(self._active):
            lo, hi = init.support_ptr[u], init.support_ptr[u + 1]
            if hi > lo:
                offs.append(len(cand_flat))
                lens.append(int(hi - lo))
                cand_flat.extend(init.support_k[lo:hi].tolist())
                uk_flat.extend(base.warm[lo:hi].tolist())
                cold_flags.append(False)
            else:
                offs.append(-1)
                lens.append(self.K)
                cold_flags.append(True)
                row = dict(base.cold_row(u))
                cold_rows[r] = row
                cold_base[r] = dict(row)
        self._cand = cand_flat
        self._uk = uk_flat
        self._uk_base = list(uk_flat)
        self._offs = offs
        self._lens = lens
        self._cold = cold_flags
        self._cold_rows = cold_rows
        self._cold_base = cold_base
        warm_max = max((l for l, c in zip(lens, cold_flags) if not c), default=1)
        self._wbuf = [0.0] * warm_max

        # chunk-local item/interest tables
        self.nik: dict[int, dict[int, int]] = {i: {} for i in set(self._items)}
        self._nk = [0] * self.K
        self.nk_np = np.zeros(self.K, dtype=np.float64)

        # initial assignments: uniform over the candidate set
        if rng is None:
            rng = np.random.default_rng(cfg.seed)
        highs = np.repeat(np.asarray(lens, dtype=np.int64), np.diff(slice_.user_ptr)) if n else np.empty(0, np.int64)
        zpos = rng.integers(0, np.maximum(highs, 1)).tolist() if n else []
        self._zpos = zpos
        for r in range(len(self._active)):
            lo, hi = self._ptr[r], self._ptr[r + 1]
            if self._cold[r]:
                row = self._cold_rows[r]
                for j in range(lo, hi):
                    k = zpos[j]
                    row[k] = row.get(k, 0) + 1
                    self._bump_item(self._items[j], k, 1)
            else:
                off = self._offs[r]
                for j in range(lo, hi):
                    p = zpos[j]
                    self._uk[off + p] += 1
                    self._bump_item(self._items[j], self._cand[off + p], 1)
        self._lj = self.log_joint()

    # -- table surgery ----------------------------------------------------

    def _bump_item(self, i: int, k: int, delta: int) -> None:
        di = self.nik[i]
        c = di.get(k, 0) + delta
        if c:
            di[k] = c
        else:
            di.pop(k, None)
        self._nk[k] += delta
        self.nk_np[k] += float(delta)

    def _row_index(self, user: int) -> int:
        r = int(np.searchsorted(self.slice.unique_users, user))
        if r >= len(self._active) or self._active[r] != user:
            raise KeyError(f"user {user} has no engagements in chunk {self.chunk}")
        return r

    def remove(self, j: int) -> int:
        """Decrement engagement j from all tables; returns its interest."""
        r = int(np.searchsorted(self.slice.user_ptr, j, side="right")) - 1
        if self._cold[r]:
            k = self._zpos[j]
            row = self._cold_rows[r]
            c = row[k] - 1
            if c:
                row[k] = c
            else:
                del row[k]
        else:
            off = self._offs[r]
            k = self._cand[off + self._zpos[j]]
            self._uk[off + self._zpos[j]] -= 1
        self._bump_item(self._items[j], k, -1)
        return k

    def assign(self, j: int, k: int) -> None:
        """Increment engagement j into all tables under interest k."""
        r = int(np.searchsorted(self.slice.user_ptr, j, side="right")) - 1
        if self._cold[r]:
            row = self._cold_rows[r]
            row[k] = row.get(k, 0) + 1
            self._zpos[j] = k
        else:
            off, L = self._offs[r], self._lens[r]
            cand = self._cand
            p = -1
            for q in range(L):
                if cand[off + q] == k:
                    p = q
                    break
            if p < 0:
                raise ValueError(f"interest {k} outside user support")
            self._uk[off + p] += 1
            self._zpos[j] = p
        self._bump_item(self._items[j], k, 1)

    # -- read-only views ---------------------------------------------------

    @property
    def z(self) -> np.ndarray:
        """Absolute interest per engagement, canonical slice order."""
        out = np.empty(self.n, dtype=np.int64)
        for r in range(len(self._active)):
            lo, hi = self._ptr[r], self._ptr[r + 1]
            if self._cold[r]:
                out[lo:hi] = self._zpos[lo:hi]
            else:
                off = self._offs[r]
                out[lo:hi] = [self._cand[off + p] for p in self._zpos[lo:hi]]
        return out

    @property
    def n_kt(self) -> np.ndarray:
        """Per-interest engagement totals for this chunk."""
        return self.nk_np.astype(np.int64)

    @property
    def item_pool(self) -> np.ndarray:
        return self.slice.item_pool

    def engagement_user(self, j: int) -> int:
        return int(self.slice.users[j])

    def user_counts(self, user: int) -> tuple[np.ndarray, np.ndarray]:
        """(interests, combined counts) for a user active in this chunk."""
        r = self._row_index(user)
        if self._cold[r]:
            row = self._cold_rows[r]
            ks = np.asarray(sorted(row), dtype=np.int64)
            return ks, np.asarray([row[int(k)] for k in ks], dtype=np.int64)
        off, L = self._offs[r], self._lens[r]
        return (
            np.asarray(self._cand[off:off + L], dtype=np.int64),
            np.asarray(self._uk[off:off + L], dtype=np.int64),
        )

    def user_counts_any(self, user: int) -> tuple[np.ndarray, np.ndarray]:
        """Like user_counts, but users absent from this chunk read their
        base counts (t=0 artifact or the accumulate-mode ledger)."""
        try:
            return self.user_counts(user)
        except KeyError:
            lo, hi = self.init.support_ptr[user], self.init.support_ptr[user + 1]
            if hi > lo:
                return self.init.support_k[lo:hi], self._base.warm[lo:hi]
            row = self._base.cold_row(user)
            ks = np.asarray(sorted(row), dtype=np.int64)
            return ks, np.asarray([row[int(k)] for k in ks], dtype=np.int64)

    def user_theta(self, user: int) -> tuple[np.ndarray, np.ndarray]:
        """Smoothed interest mixture (alpha mass on every candidate)."""
        ks, counts = self.user_counts(user)
        masses = self.alpha + counts.astype(np.float64)
        return ks, masses / masses.sum()

    def iter_item_counts(self):
        """Yield (item, interest, count) triples for this chunk's table."""
        for i in sorted(self.nik):
            di = self.nik[i]
            for k in sorted(di):
                yield i, k, di[k]

    def chunk_user_total(self, user: int) -> int:
        r = self._row_index(user)
        return self._ptr[r + 1] - self._ptr[r]

    # -- collapsed objective ------------------------------------------------

    def log_joint(self) -> float:
        """Exact collapsed log-joint, up to assignment-independent constant.

        Normalized against base counts and empty chunk tables so the empty
        chunk scores 0. Matches the resampling weights: for any single
        reassignment the difference equals the log weight ratio.
        """
        a, b = self.alpha, self.beta
        total = 0.0
        if self._uk:
            uk = np.asarray(self._uk, dtype=np.float64)
            base = np.asarray(self._uk_base, dtype=np.float64)
            total += float((gammaln(a + uk) - gammaln(a + base)).sum())
        for r, row in self._cold_rows.items():
            base_row = self._cold_base[r]
            for k, c in row.items():
                total += math.lgamma(a + c) - math.lgamma(a + base_row.get(k, 0))
            for k, c in base_row.items():
                if k not in row:
                    total -= math.lgamma(a + c) - math.lgamma(a)
        counts = [c for di in self.nik.values() for c in di.values()]
        if counts:
            cs = np.asarray(counts, dtype=np.float64)
            total += float((gammaln(b + cs) - gammaln(b)).sum())
        nz = self.nk_np[self.nk_np > 0]
        if len(nz):
            total -= float((gammaln(self.Ibeta + nz) - gammaln(self.Ibeta)).sum())
        return total

    @property
    def current_log_joint(self) -> float:
        return self._lj

    # -- the sweep ----------------------------------------------------------

    def run_sweep(self, unif: np.ndarray) -> int:
        """Resample every engagement once in scan order; returns change count.

        ``unif`` supplies one uniform draw per engagement. Updates the
        tracked log-joint incrementally (recomputed exactly if any weight
        vector underflowed to zero).
        """
        alpha, beta, Ibeta = self.alpha, self.beta, self.Ibeta
        nik, nk = self.nik, self._nk
        nk_np = self.nk_np
        items, zpos = self._items, self._zpos
        cand, uk = self._cand, self._uk
        wbuf = self._wbuf
        log = math.log
        u01 = unif.tolist()
        changed = 0
        dlj = 0.0
        underflow_before = self.underflow_events
        K = self.K

        for r in range(len(self._active)):
            lo, hi = self._ptr[r], self._ptr[r + 1]
            if not self._cold[r]:
                off, L = self._offs[r], self._lens[r]
                for j in range(lo, hi):
                    i = items[j]
                    di = nik[i]
                    dget = di.get
                    p_old = zpos[j]
                    sl_old = off + p_old
                    k_old = cand[sl_old]
                    # remove engagement j
                    uk[sl_old] -= 1
                    c = di[k_old] - 1
                    if c:
                        di[k_old] = c
                    else:
                        del di[k_old]
                    nk[k_old] -= 1
                    nk_np[k_old] -= 1.0
                    # cumulative weights over the support
                    tot = 0.0
                    for p in range(L):
                        k = cand[off + p]
                        tot += (alpha + uk[off + p]) * (beta + dget(k, 0)) / (Ibeta + nk[k])
                        wbuf[p] = tot
                    if tot > 0.0:
                        rv = u01[j] * tot
                        p_new = 0
                        while wbuf[p_new] < rv:
                            p_new += 1
                    else:
                        p_new = min(int(u01[j] * L), L - 1)
                        self.underflow_events += 1
                    if p_new != p_old:
                        changed += 1
                        k_new = cand[off + p_new]
                        w_old = (alpha + uk[sl_old]) * (beta + dget(k_old, 0)) / (Ibeta + nk[k_old])
                        w_new = (alpha + uk[off + p_new]) * (beta + dget(k_new, 0)) / (Ibeta + nk[k_new])
                        dlj += log(w_new) - log(w_old)
                        zpos[j] = p_new
                    else:
                        k_new = k_old
                    # put it back
                    uk[off + p_new] += 1
                    di[k_new] = dget(k_new, 0) + 1
                    nk[k_new] += 1
                    nk_np[k_new] += 1.0
            else:
                row = self._cold_rows[r]
                for j in range(lo, hi):
                    i = items[j]
                    di = nik[i]
                    k_old = zpos[j]
                    c = row[k_old] - 1
                    if c:
                        row[k_old] = c
                    else:
                        del row[k_old]
                    c = di[k_old] - 1
                    if c:
                        di[k_old] = c
                    else:
                        del di[k_old]
                    nk[k_old] -= 1
                    nk_np[k_old] -= 1.0
                    # dense weight vector: (alpha + n_uk) * (beta + n_ikt) / (Ibeta + n_kt)
                    w = np.full(K, beta)
                    if di:
                        ks = list(di.keys())
                        w[ks] += np.fromiter(di.values(), dtype=np.float64, count=len(di))
                    w /= Ibeta + nk_np
                    fac = np.full(K, alpha)
                    if row:
                        ks = list(row.keys())
                        fac[ks] += np.fromiter(row.values(), dtype=np.float64, count=len(row))
                    w *= fac
                    cum = np.cumsum(w)
                    tot = float(cum[-1])
                    if tot > 0.0 and math.isfinite(tot):
                        k_new = int(np.searchsorted(cum, u01[j] * tot, side="left"))
                        if k_new >= K:
                            k_new = K - 1
                    else:
                        k_new = min(int(u01[j] * K), K - 1)
                        self.underflow_events += 1
                    if k_new != k_old:
                        changed += 1
                        w_old = (alpha + row.get(k_old, 0)) * (beta + di.get(k_old, 0)) / (Ibeta + nk[k_old])
                        w_new = (alpha + row.get(k_new, 0)) * (beta + di.get(k_new, 0)) / (Ibeta + nk[k_new])
                        dlj += log(w_new) - log(w_old)
                        zpos[j] = k_new
                    row[k_new] = row.get(k_new, 0) + 1
                    di[k_new] = di.get(k_new, 0) + 1
                    nk[k_new] += 1
                    nk_np[k_new] += 1.0

        if self.underflow_events > underflow_before:
            logger.warning(
                "chunk %d: %d zero-weight resamples fell back to uniform",
                self.chunk,
                self.underflow_events - underflow_before,
            )
            self._lj = self.log_joint()
        else:
            self._lj += dlj
        return changed

    def fold_into(self, counts: UserCounts) -> None:
        """Write this chunk's final combined user counts back into a ledger."""
        for r, u in enumerate(self._active):
            if self._cold[r]:
                counts.cold[u] = dict(self._cold_rows[r])
            else:
                lo = self.init.support_ptr[u]
                off, L = self._offs[r], self._lens[r]
                counts.warm[lo:lo + L] = self._uk[off:off + L]


def gibbs_weight(u: int, i: int, k: int, m: ChunkModel, init: InitArtifact) -> float:
    """Unnormalized conditional weight for assigning interest k to an
    engagement of user u on item i, with that engagement already removed
    from the tables. Users with t=0 history have prior mass only on their
    support; users without history have mass alpha on every interest.
    """
    sup = init.support(u)
    if len(sup):
        pos = int(np.searchsorted(sup, k))
        in_support = pos < len(sup) and sup[pos] == k
        alpha_mass = init.alpha if in_support else 0.0
    else:
        alpha_mass = init.alpha
    try:
        ks, counts = m.user_counts(u)
    except KeyError:
        ks, counts = np.empty(0, np.int64), np.empty(0, np.int64)
    pos = int(np.searchsorted(ks, k))
    n_uk = int(counts[pos]) if pos < len(ks) and ks[pos] == k else 0
    n_ikt = m.nik.get(i, {}).get(k, 0)
    n_kt = m._nk[k]
    return (alpha_mass + n_uk) * (init.beta + n_ikt) / (m.Ibeta + n_kt)


def init_chunk(
    slice_: ChunkSlice,
    init: InitArtifact,
    cfg: SamplerConfig,
    base: UserCounts | None = None,
) -> ChunkModel:
    """Build a chunk model with assignments drawn uniformly over supports."""
    return ChunkModel(slice_, init, cfg, base=base)


def sweep(m: ChunkModel, init: InitArtifact, rng: np.random.Generator) -> tuple[ChunkModel, int]:
    changed = m.run_sweep(rng.random(m.n))
    return m, changed


def log_joint(m: ChunkModel, init: InitArtifact) -> float:
    return m.log_joint()


def fit_chunk(
    slice_: ChunkSlice,
    init: InitArtifact,
    cfg: SamplerConfig,
    base: UserCounts | None = None,
) -> ChunkModel:
    """Initialize and sweep until the log-joint stabilizes or sweeps run out.

    Convergence: relative change in the collapsed log-joint between
    consecutive sweeps below ``cfg.convergence_tol``. Non-convergence is a
    logged warning, not an error; the final sample is the point estimate.
    """
    rng = np.random.default_rng(cfg.seed)
    m = ChunkModel(slice_, init, cfg, base=base, rng=rng)
    lj_prev = m.current_log_joint
    for s in range(1, cfg.max_sweeps + 1):
        changed = m.run_sweep(rng.random(m.n))
        lj = m.current_log_joint
        m.history.append(SweepStats(sweep=s, log_joint=lj, changed=changed))
        m.sweeps_run = s
        rel = abs(lj - lj_prev) / max(abs(lj_prev), 1e-12)
        lj_prev = lj
        if rel < cfg.convergence_tol:
            m.converged = True
            break
    if not m.converged:
        logger.warning(
            "chunk %d: log-joint still moving after %d sweeps", m.chunk, cfg.max_sweeps
        )
    return m


def sweep_diagnostics_text(m: ChunkModel) -> str:
    """Per-sweep (sweep, log_joint, changed) as tab-separated lines."""
    lines = ["sweep\tlog_joint\tchanged"]
    for s in m.history:
        lines.append(f"{s.sweep}\t{s.log_joint!r}\t{s.changed}")
    return "\n".join(lines) + "\n"


def export_tables_text(m: ChunkModel, path) -> None:
    """Sparse-triple dump: user/interest, item/interest, interest totals,
    and the assignment vector, as tab-separated sections."""
    with open(path, "w") as fh:
        fh.write("# section=user_interest u k count\n")
        for r, u in enumerate(m._active):
            ks, counts = m.user_counts(u)
            for k, c in zip(ks.tolist(), counts.tolist()):
                if c:
                    fh.write(f"{u}\t{k}\t{c}\n")
        fh.write("# section=item_interest i k count\n")
        for i, k, c in m.iter_item_counts():
            fh.write(f"{i}\t{k}\t{c}\n")
        fh.write("# section=interest k count\n")
        for k, c in enumerate(m._nk):
            if c:
                fh.write(f"{k}\t{c}\n")
        fh.write("# section=assignments j z\n")
        for j, k in enumerate(m.z.tolist()):
            fh.write(f"{j}\t{k}\n")


def save_chunk_model(m: ChunkModel, path) -> None:
    """Persist the minimal resumable state (assignments; tables rebuild)."""
    np.savez_compressed(
        path,
        chunk=np.asarray([m.chunk]),
        z=m.z,
        sweeps=np.asarray([m.sweeps_run, int(m.converged), m.underflow_events]),
        log_joint=np.asarray([m.current_log_joint]),
    )


def load_chunk_model(
    path,
    slice_: ChunkSlice,
    init: InitArtifact,
    cfg: SamplerConfig,
    base: UserCounts | None = None,
) -> ChunkModel:
    """Rebuild a fitted model from persisted assignments."""
    with np.load(path) as zf:
        if int(zf["chunk"][0]) != slice_.chunk:
            raise ValueError(
                f"persisted model is for chunk {int(zf['chunk'][0])}, slice is chunk {slice_.chunk}"
            )
        z = zf["z"]
        sweeps = zf["sweeps"]
        lj = float(zf["log_joint"][0])
    m = ChunkModel(slice_, init, cfg, base=base)
    for j in range(m.n):
        m.remove(j)
        m.assign(j, int(z[j]))
    m._lj = m.log_joint()
    m.sweeps_run = int(sweeps[0])
    m.converged = bool(sweeps[1])
    m.underflow_events = int(sweeps[2])
    if not math.isclose(m._lj, lj, rel_tol=1e-9, abs_tol=1e-6):
        logger.warning("chunk %d: reloaded log-joint differs from persisted value", m.chunk)
    return m
