#!/usr/bin/env python3
"""Cut a desk-scale subsample from the full open follow-graph edge list.

The full dataset is hundreds of millions of `source target ordinal` rows.
This keeps every edge whose source user hashes into a configurable share of
the user space, preserving each kept user's complete timeline (per-user
completeness matters: supports and seen-sets need the user's full history),
then drops items with fewer than a minimum number of engagements.

Usage:
  python scripts/make_follow_subsample.py FULL_EDGES OUT_TSV \
      [--max-edges 5000000] [--user-share 0.02] [--min-item-degree 5]
"""

import argparse
import sys

import numpy as np


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("full_edges", help="full edge list: user<TAB>item<TAB>chunk")
    ap.add_argument("out", help="output subsample path")
    ap.add_argument("--max-edges", type=int, default=5_000_000)
    ap.add_argument("--user-share", type=float, default=0.02,
                    help="initial fraction of users to keep (halved/doubled to fit)")
    ap.add_argument("--min-item-degree", type=int, default=5)
    ap.add_argument("--delimiter", default="\t")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    print("loading full edge list (this can take a while)...", file=sys.stderr)
    arr = np.loadtxt(args.full_edges, dtype=np.int64, delimiter=args.delimiter or None, ndmin=2)
    users, items, chunks = arr[:, 0], arr[:, 1], arr[:, 2]
    print(f"full: edges={len(arr)}", file=sys.stderr)

    share = args.user_share
    rng_salt = np.int64(args.seed * 2654435761 % (1 << 31))
    for _ in range(20):
        threshold = int(share * (1 << 31))
        keep = ((users * 2654435761 + rng_salt) % (1 << 31)) < threshold
        n = int(keep.sum())
        if n <= args.max_edges:
            break
        share *= 0.6
    su, si, sc = users[keep], items[keep], chunks[keep]

    # prune rare items so the item space is not dominated by singletons
    uniq, counts = np.unique(si, return_counts=True)
    good = set(uniq[counts >= args.min_item_degree].tolist())
    mask = np.fromiter((i in good for i in si.tolist()), dtype=bool, count=len(si))
    su, si, sc = su[mask], si[mask], sc[mask]
    print(f"subsample: edges={len(su)} users={len(np.unique(su))} items={len(np.unique(si))}",
          file=sys.stderr)

    with open(args.out, "w") as fh:
        for u, i, t in zip(su.tolist(), si.tolist(), sc.tolist()):
            fh.write(f"{u}\t{i}\t{t}\n")
    print(f"wrote {args.out}", file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())
