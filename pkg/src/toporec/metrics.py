"""Top-N ranking metrics computed over the full item catalog.

Ranking is by score descending with ties broken toward the lower item
index; masked items never appear in a ranked list. Recall@N is the hit
fraction of the relevant set; NDCG@N uses 1/log2(position + 1) gains
against the ideal prefix.
"""

from __future__ import annotations

import json

import numpy as np

from .data import ROLE_TEST, ROLE_TRAIN, ROLE_VAL

__all__ = [
    "ranked_list",
    "recall_at",
    "ndcg_at",
    "evaluate",
    "write_metrics_csv",
    "write_metrics_json",
]


def ranked_list(scores, masked, n):
    """Top-n item indices for one score row.

    masked is an index array of items to exclude. The list is truncated
    to the number of unmasked items when that is smaller than n.
    """
    scores = np.asarray(scores, dtype=np.float64).copy()
    masked = np.asarray(masked, dtype=np.int64)
    if len(masked):
        scores[masked] = -np.inf
    available = len(scores) - len(np.unique(masked))
    order = np.argsort(-scores, kind="stable")
    return order[: min(n, available)]


def recall_at(ranked, relevant, n):
    """Fraction of the relevant set present in the top n."""
    relevant = set(int(r) for r in relevant)
    if not relevant:
        raise ValueError("relevant set is empty")
    hits = sum(1 for i in ranked[:n] if int(i) in relevant)
    return hits / len(relevant)


def ndcg_at(ranked, relevant, n):
    """DCG over hit positions, normalized by the ideal prefix."""
    relevant = set(int(r) for r in relevant)
    if not relevant:
        raise ValueError("relevant set is empty")
    dcg = 0.0
    for pos, item in enumerate(ranked[:n], start=1):
        if int(item) in relevant:
            dcg += 1.0 / np.log2(pos + 1)
    ideal = sum(1.0 / np.log2(p + 1) for p in range(1, min(n, len(relevant)) + 1))
    return dcg / ideal


def evaluate(z_users, z_items, table, split, ns=(10, 20), block_size=512):
    """All-ranking metrics for one split, averaged over its users.

    Train items are always masked; at test time validation items are
    masked as well. Users with no interactions in the split are
    excluded from the average.
    """
    role = {"val": ROLE_VAL, "test": ROLE_TEST}.get(split)
    if role is None:
        raise ValueError(f"split must be 'val' or 'test', got {split!r}")
    z_users = np.asarray(z_users)
    z_items = np.asarray(z_items)
    ns = tuple(int(n) for n in ns)
    top = max(ns)
    mask_roles = [ROLE_TRAIN] if role == ROLE_VAL else [ROLE_TRAIN, ROLE_VAL]

    users = []
    relevant = []
    for u in range(table.num_users):
        rel = table.items_of(u, role)
        if len(rel):
            users.append(u)
            relevant.append(set(int(i) for i in rel))
    if not users:
        raise ValueError(f"split {split!r} has no interactions to evaluate")

    sums = {("recall", n): 0.0 for n in ns}
    sums.update({("ndcg", n): 0.0 for n in ns})
    for start in range(0, len(users), block_size):
        chunk = users[start:start + block_size]
        scores = z_users[chunk] @ z_items.T
        for r, u in enumerate(chunk):
            row = scores[r]
            for mrole in mask_roles:
                hidden = table.items_of(u, mrole)
                if len(hidden):
                    row[hidden] = -np.inf
            available = int(np.isfinite(row).sum())
            order = np.argsort(-row, kind="stable")[: min(top, available)]
            rel = relevant[start + r]
            for n in ns:
                sums[("recall", n)] += recall_at(order, rel, n)
                sums[("ndcg", n)] += ndcg_at(order, rel, n)
    out = {"split": split, "num_users": len(users)}
    for (metric, n), total in sums.items():
        out[f"{metric}@{n}"] = float(total / len(users))
    return out


def write_metrics_csv(path, metrics):
    split = metrics.get("split", "")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("split,metric,N,value\n")
        for key, value in sorted(metrics.items()):
            if "@" not in str(key):
                continue
            metric, n = key.split("@")
            fh.write(f"{split},{metric},{n},{value!r}\n")


def write_metrics_json(path, metrics):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(metrics, fh, indent=2, sort_keys=True)
        fh.write("\n")
