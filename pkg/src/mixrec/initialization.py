"""t=0 initialization artifact: interest-anchored count tables and priors.

Every train engagement inherits the interest of its item's cluster, which
yields counting estimators for the user/interest/item tables and the sparse
per-user prior support (the interests a user touched at t=0). The artifact is
the handoff between the embedding/clustering stage and the per-chunk sampler,
and also feeds the static mixture retriever.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graph import EngagementGraph

__all__ = ["InitArtifact", "MleMixture", "build_init", "mle_mixture", "save_init", "load_init"]


@dataclass
class InitArtifact:
    """Sparse t=0 count tables, prior supports, and prior masses.

    User-interest counts are CSR-like: user u's support interests are
    ``support_k[support_ptr[u]:support_ptr[u+1]]`` (sorted ascending) with
    aligned counts in ``support_n0``. Item-interest counts at t=0 are
    degenerate by construction (each item's engagements all carry its own
    cluster's interest), so they are stored as ``item_n0`` plus
    ``item_interest``.
    """

    num_users: int
    num_items: int
    num_interests: int
    alpha: float
    beta: float
    support_ptr: np.ndarray
    support_k: np.ndarray
    support_n0: np.ndarray
    n_u0: np.ndarray
    n_k0: np.ndarray
    item_interest: np.ndarray
    item_n0: np.ndarray

    def support(self, user: int) -> np.ndarray:
        """Interests with positive t=0 count for ``user`` (sorted). Empty for cold users."""
        return self.support_k[self.support_ptr[user]:self.support_ptr[user + 1]]

    def support_counts(self, user: int) -> np.ndarray:
        return self.support_n0[self.support_ptr[user]:self.support_ptr[user + 1]]

    def is_cold(self, user: int) -> bool:
        return self.support_ptr[user] == self.support_ptr[user + 1]

    def validate(self) -> None:
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError("prior masses must be positive")
        if np.any(self.support_n0 <= 0):
            raise ValueError("support counts must be positive (support = interests with N>0)")
        csum = np.concatenate([[0], np.cumsum(self.support_n0)])
        per_user = csum[self.support_ptr[1:]] - csum[self.support_ptr[:-1]]
        if not np.array_equal(per_user, self.n_u0):
            raise ValueError("per-user support counts do not sum to n_u0")
        if self.support_n0.sum() != self.n_k0.sum():
            raise ValueError("user-side and interest-side totals disagree")
        if len(self.support_k) > 1:
            d = np.diff(self.support_k)
            within = np.ones(len(d), dtype=bool)
            starts = self.support_ptr[1:-1]
            starts = starts[(starts >= 1) & (starts < len(self.support_k))]
            within[starts - 1] = False
            if np.any(d[within] <= 0):
                raise ValueError("per-user supports must be strictly ascending")


class InconsistentClusterError(ValueError):
    """A train item is missing from the cluster map."""


def build_init(
    train: EngagementGraph,
    item_interest: np.ndarray,
    num_interests: int,
    alpha: float = 0.1,
    beta: float = 0.01,
) -> InitArtifact:
    """Assign every train engagement its item's interest and count everything.

    ``item_interest`` maps dense item id -> interest id and must cover every
    item appearing in ``train``.
    """
    if alpha <= 0 or beta <= 0:
        raise ValueError("alpha and beta must be positive")
    item_interest = np.asarray(item_interest, dtype=np.int64)
    if len(item_interest) < train.num_items:
        raise InconsistentClusterError(
            f"cluster map covers {len(item_interest)} items, graph has {train.num_items}"
        )
    if train.num_edges:
        z0 = item_interest[train.items]
        if z0.min() < 0 or z0.max() >= num_interests:
            raise InconsistentClusterError("train item maps to an out-of-range interest")
    else:
        z0 = np.empty(0, dtype=np.int64)

    U, K = train.num_users, num_interests
    n_u0 = np.bincount(train.users, minlength=U).astype(np.int64)
    n_k0 = np.bincount(z0, minlength=K).astype(np.int64)
    item_n0 = np.bincount(train.items, minlength=train.num_items).astype(np.int64)

    # sparse user x interest counts via unique (user, interest) keys
    keys = train.users * K + z0
    uniq, counts = np.unique(keys, return_counts=True)
    pair_users = (uniq // K).astype(np.int64)
    pair_ks = (uniq % K).astype(np.int64)
    support_ptr = np.concatenate(
        [[0], np.cumsum(np.bincount(pair_users, minlength=U))]
    ).astype(np.int64)

    art = InitArtifact(
        num_users=U,
        num_items=train.num_items,
        num_interests=K,
        alpha=float(alpha),
        beta=float(beta),
        support_ptr=support_ptr,
        support_k=pair_ks,
        support_n0=counts.astype(np.int64),
        n_u0=n_u0,
        n_k0=n_k0,
        item_interest=item_interest[: train.num_items].copy(),
        item_n0=item_n0,
    )
    art.validate()
    return art


@dataclass
class MleMixture:
    """Counting MLE mixtures from the t=0 tables.

    ``p_k_given_u`` shares the artifact's support CSR layout. The item side
    groups items by interest: interest k's items are
    ``items[interest_ptr[k]:interest_ptr[k+1]]`` with aligned probabilities.
    Zero-count users/interests get empty distributions.
    """

    support_ptr: np.ndarray
    support_k: np.ndarray
    p_k_given_u: np.ndarray
    interest_ptr: np.ndarray
    items: np.ndarray
    p_i_given_k: np.ndarray

    def user_mixture(self, user: int) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = self.support_ptr[user], self.support_ptr[user + 1]
        return self.support_k[lo:hi], self.p_k_given_u[lo:hi]

    def interest_items(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = self.interest_ptr[k], self.interest_ptr[k + 1]
        return self.items[lo:hi], self.p_i_given_k[lo:hi]


def mle_mixture(init: InitArtifact) -> MleMixture:
    """p(k|u) = N_uk0/N_u0 and p(i|k) = N_ik0/N_k0, rows normalized."""
    denom = np.maximum(init.n_u0[np.repeat(np.arange(init.num_users), np.diff(init.support_ptr))], 1)
    p_ku = init.support_n0 / denom

    engaged = np.flatnonzero(init.item_n0 > 0)
    ks = init.item_interest[engaged]
    order = np.lexsort((engaged, ks))
    items_sorted = engaged[order]
    ks_sorted = ks[order]
    interest_ptr = np.concatenate(
        [[0], np.cumsum(np.bincount(ks_sorted, minlength=init.num_interests))]
    ).astype(np.int64)
    p_ik = init.item_n0[items_sorted] / np.maximum(init.n_k0[ks_sorted], 1)

    return MleMixture(
        support_ptr=init.support_ptr,
        support_k=init.support_k,
        p_k_given_u=p_ku,
        interest_ptr=interest_ptr,
        items=items_sorted,
        p_i_given_k=p_ik,
    )


_INIT_VERSION = 1


def save_init(init: InitArtifact, path) -> None:
    np.savez_compressed(
        path,
        version=np.asarray([_INIT_VERSION]),
        dims=np.asarray([init.num_users, init.num_items, init.num_interests]),
        priors=np.asarray([init.alpha, init.beta]),
        support_ptr=init.support_ptr,
        support_k=init.support_k,
        support_n0=init.support_n0,
        n_u0=init.n_u0,
        n_k0=init.n_k0,
        item_interest=init.item_interest,
        item_n0=init.item_n0,
    )


def load_init(path) -> InitArtifact:
    with np.load(path) as z:
        if int(z["version"][0]) != _INIT_VERSION:
            raise ValueError(f"unsupported init artifact version {z['version'][0]}")
        dims = z["dims"]
        art = InitArtifact(
            num_users=int(dims[0]),
            num_items=int(dims[1]),
            num_interests=int(dims[2]),
            alpha=float(z["priors"][0]),
            beta=float(z["priors"][1]),
            support_ptr=z["support_ptr"],
            support_k=z["support_k"],
            support_n0=z["support_n0"],
            n_u0=z["n_u0"],
            n_k0=z["n_k0"],
            item_interest=z["item_interest"],
            item_n0=z["item_n0"],
        )
    art.validate()
    return art
