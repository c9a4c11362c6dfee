"""Independent brute-force reference implementations.

Everything here recomputes results from scratch (plain loops, math.lgamma,
full enumeration) and never calls into the package's inference code paths,
so these can pin expected values for the fast implementations.
"""

import itertools
import math

import numpy as np


def candidate_interests(user, init):
    """Interests an engagement of ``user`` may take: the prior support, or
    every interest for users with no t=0 history."""
    sup = init.support(user).tolist()
    return sup if sup else list(range(init.num_interests))


def collapsed_log_joint(users, items, z, init):
    """Full Gamma-product collapsed objective, recomputed from scratch.

    User counts = t=0 base + this chunk's assignments; item/interest tables
    are chunk-only. Includes every assignment-independent constant it likes;
    only differences/ratios are ever compared.
    """
    a, b = init.alpha, init.beta
    K, I = init.num_interests, init.num_items
    nik = {}
    nk = [0] * K
    uk = {}
    for u, i, k in zip(users, items, z):
        nik[(i, k)] = nik.get((i, k), 0) + 1
        nk[k] += 1
        uk[(u, k)] = uk.get((u, k), 0) + 1

    lj = 0.0
    for u in sorted(set(users)):
        base = dict(zip(init.support(u).tolist(), init.support_counts(u).tolist()))
        for k in candidate_interests(u, init):
            lj += math.lgamma(a + base.get(k, 0) + uk.get((u, k), 0))
    for k in range(K):
        for i in range(I):
            lj += math.lgamma(b + nik.get((i, k), 0))
        lj -= math.lgamma(I * b + nk[k])
    return lj


def enumerate_posterior(users, items, init):
    """Exact posterior over full assignment vectors by enumeration.

    Returns (assignment tuples, probabilities, marginals) where
    marginals[j][k] = P(z_j = k | data).
    """
    cands = [candidate_interests(u, init) for u in users]
    vectors = list(itertools.product(*cands))
    logps = np.array(
        [collapsed_log_joint(users, items, list(v), init) for v in vectors]
    )
    logps -= logps.max()
    probs = np.exp(logps)
    probs /= probs.sum()
    marginals = [dict.fromkeys(c, 0.0) for c in cands]
    for v, p in zip(vectors, probs):
        for j, k in enumerate(v):
            marginals[j][k] += p
    return vectors, probs, marginals


def conditional_from_enumeration(users, items, z, j, init):
    """p(z_j = k | all other assignments) via ratios of full joints."""
    cands = candidate_interests(users[j], init)
    logs = []
    for k in cands:
        z2 = list(z)
        z2[j] = k
        logs.append(collapsed_log_joint(users, items, z2, init))
    logs = np.array(logs)
    logs -= logs.max()
    p = np.exp(logs)
    return dict(zip(cands, p / p.sum()))


def dcg_reference(ranked, truth):
    """Binary-gain DCG with log2(rank+1) discount, 1-indexed ranks."""
    total = 0.0
    for idx, item in enumerate(ranked):
        if item in truth:
            total += 1.0 / math.log2(idx + 2)
    return total


def ndcg_reference(ranked, truth, m):
    ranked = list(ranked)[:m]
    ideal = sum(1.0 / math.log2(r + 2) for r in range(min(len(truth), m)))
    if ideal == 0:
        return 0.0
    return dcg_reference(ranked, truth) / ideal


def recall_reference(ranked, truth, m):
    hit = sum(1 for item in list(ranked)[:m] if item in truth)
    return hit / len(truth)


def mrr_reference(ranked, truth, m):
    for idx, item in enumerate(list(ranked)[:m]):
        if item in truth:
            return 1.0 / (idx + 1)
    return 0.0
