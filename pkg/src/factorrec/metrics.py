"""Mean-mode ranking and top-K metrics (Recall@K, NDCG@K)."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .decoder import decoder_tables, decoder_terms
from .encoder import encode_items, encode_users
from .numerics import logsumexp


class EvalError(ValueError):
    pass


def recall_at_k(ranked, truth, k):
    """|top-k ∩ truth| / |truth|."""
    if k < 1:
        raise EvalError("k must be >= 1")
    if not truth:
        raise EvalError("truth set is empty")
    truth = set(truth)
    hits = sum(1 for t in list(ranked)[:k] if t in truth)
    return hits / len(truth)


def ndcg_at_k(ranked, truth, k):
    """Binary-relevance NDCG@k; the ideal ranking places min(k, |truth|) hits first."""
    if k < 1:
        raise EvalError("k must be >= 1")
    if not truth:
        raise EvalError("truth set is empty")
    truth = set(truth)
    dcg = sum(1.0 / math.log2(i + 2) for i, t in enumerate(list(ranked)[:k]) if t in truth)
    idcg = sum(1.0 / math.log2(i + 2) for i in range(min(k, len(truth))))
    return dcg / idcg


def user_csr(graph, users, neighbors=None):
    """CSR over the given users' training items (or explicit neighbor lists)."""
    ptr, idx = [0], []
    for i, u in enumerate(users):
        hist = graph.items_of(int(u)) if neighbors is None else neighbors[i]
        idx.extend(np.asarray(hist).tolist())
        ptr.append(len(idx))
    return np.asarray(ptr, dtype=np.int64), np.asarray(idx, dtype=np.int64)


def log_scores(params, config, graph, users, neighbors=None, items=None):
    """Mean-mode log S(u, t) for every item; shape (len(users), n_items)."""
    if items is None:
        items = encode_items(params, config, graph.ie_indptr, graph.ie_indices)
    ptr, idx = user_csr(graph, users, neighbors)
    batch = encode_users(params, config, ptr, idx, items)
    d_base, d_ent = decoder_tables(params, config, items)
    terms, _, _ = decoder_terms(batch.itm_mu, batch.ent_mu, d_base, d_ent, batch.item_aff.logp)
    return logsumexp(terms, axis=2)


def rank_from_scores(scores, exclude):
    """Descending score order with ties broken by ascending item index."""
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    if len(exclude):
        mask = np.ones(len(scores), dtype=bool)
        mask[np.asarray(list(exclude), dtype=np.int64)] = False
        order = order[mask[order]]
    return order


def rank_items(u, params, config, graph):
    hist = graph.items_of(int(u))
    if len(hist) == 0:
        raise EvalError(f"user {u} has no training interactions (cold user)")
    scores = log_scores(params, config, graph, [u])[0]
    return rank_from_scores(scores, hist)


def top_k_batch(params, config, graph, users, k, chunk=256):
    """Top-k ranked items (training items excluded) for each user, as a list of arrays."""
    items = encode_items(params, config, graph.ie_indptr, graph.ie_indices)
    out = []
    for start in range(0, len(users), chunk):
        part = users[start : start + chunk]
        for u in part:
            if len(graph.items_of(int(u))) == 0:
                raise EvalError(f"user {u} has no training interactions (cold user)")
        scores = log_scores(params, config, graph, part, items=items)
        for row, u in zip(scores, part):
            out.append(rank_from_scores(row, graph.items_of(int(u)))[:k])
    return out


@dataclass
class MetricsReport:
    split_label: str
    k_list: tuple
    users: list
    recall: dict  # k -> per-user list
    ndcg: dict
    skipped: int = 0
    mean_recall: dict = field(default_factory=dict)
    mean_ndcg: dict = field(default_factory=dict)

    def __post_init__(self):
        self.mean_recall = {k: float(np.mean(v)) if v else 0.0 for k, v in self.recall.items()}
        self.mean_ndcg = {k: float(np.mean(v)) if v else 0.0 for k, v in self.ndcg.items()}

    @property
    def user_count(self):
        return len(self.users)

    def to_text(self):
        lines = [f"split={self.split_label}", f"users={self.user_count}", f"skipped={self.skipped}"]
        lines += [f"recall@{k}={self.mean_recall[k]:.6f}" for k in self.k_list]
        lines += [f"ndcg@{k}={self.mean_ndcg[k]:.6f}" for k in self.k_list]
        return "\n".join(lines) + "\n"

    def to_tsv(self):
        head = "user\t" + "\t".join([f"recall@{k}" for k in self.k_list] + [f"ndcg@{k}" for k in self.k_list])
        rows = [head]
        for i, u in enumerate(self.users):
            vals = [self.recall[k][i] for k in self.k_list] + [self.ndcg[k][i] for k in self.k_list]
            rows.append(f"{u}\t" + "\t".join(f"{v:.6f}" for v in vals))
        vals = [self.mean_recall[k] for k in self.k_list] + [self.mean_ndcg[k] for k in self.k_list]
        rows.append("mean\t" + "\t".join(f"{v:.6f}" for v in vals))
        return "\n".join(rows) + "\n"

    @staticmethod
    def parse_text(text):
        out = {}
        for line in text.splitlines():
            key, val = line.split("=", 1)
            out[key] = float(val) if key not in ("split",) else val
        return out


def evaluate(params, config, split, user_group="test", k_list=(2, 10, 50, 100)):
    users, truth = split.truth(user_group)
    if len(users) == 0:
        raise EvalError(f"user group {user_group!r} is empty")
    kept = [int(u) for u in users if truth.get(int(u))]
    skipped = len(users) - len(kept)
    k_list = tuple(int(k) for k in k_list)
    kmax = max(k_list)
    ranked = top_k_batch(params, config, split.train_graph, np.asarray(kept, dtype=np.int64), kmax)
    recall = {k: [] for k in k_list}
    ndcg = {k: [] for k in k_list}
    for u, r in zip(kept, ranked):
        r = r.tolist()
        for k in k_list:
            recall[k].append(recall_at_k(r, truth[u], k))
            ndcg[k].append(ndcg_at_k(r, truth[u], k))
    return MetricsReport(user_group, k_list, kept, recall, ndcg, skipped)
