"""Per-prediction importance of historical items and entities, and the removal-based faithfulness test."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .decoder import EXP_CLAMP, decoder_tables
from .encoder import ItemBatch, encode_items, encode_users
from .metrics import rank_from_scores, recall_at_k
from .numerics import SeededRng, logsumexp
from .decoder import decoder_terms

FACTOR_COLORS = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2",
                 "#7f7f7f", "#bcbd22", "#17becf")


class _UserView:
    """Mean-mode state for one user, optionally with a perturbed neighborhood."""

    def __init__(self, params, config, graph, u, neighbors=None, items=None):
        self.params = params
        self.config = config
        self.graph = graph
        self.u = int(u)
        self.neighbors = np.asarray(graph.items_of(u) if neighbors is None else neighbors, dtype=np.int64)
        if items is None:
            items = encode_items(params, config, graph.ie_indptr, graph.ie_indices)
        self.items = items
        ptr = np.array([0, len(self.neighbors)], dtype=np.int64)
        batch = encode_users(params, config, ptr, self.neighbors, items)
        self.itm = batch.itm_mu[0]
        self.ent = batch.ent_mu[0]
        self.item_p = batch.item_aff.p
        self.item_logp = batch.item_aff.logp
        self.entity_p = items.ent_aff.p
        self.d_base, self.d_ent = decoder_tables(params, config, items)

    def item_terms(self, targets):
        """Decoder item terms p(t,c) exp(<itm_c, d_t>) for each target, shape (len, C2)."""
        x = np.minimum(self.d_base[targets].astype(np.float64) @ self.itm.astype(np.float64).T, EXP_CLAMP)
        return self.item_p[targets].astype(np.float64) * np.exp(x)

    def entity_terms(self, targets):
        y = np.einsum("kcd,cd->kc", self.d_ent[targets].astype(np.float64), self.ent.astype(np.float64))
        return np.exp(np.minimum(y, EXP_CLAMP))

    def scores(self):
        terms, _, _ = decoder_terms(self.itm[None], self.ent[None], self.d_base, self.d_ent, self.item_logp)
        return logsumexp(terms, axis=2)[0]

    def entity_path_weights(self):
        """Map entity -> sum over historical items m linked to it of 1/(|N_u| |N_m|)."""
        weights = {}
        n_u = len(self.neighbors)
        for m in self.neighbors:
            ents = self.graph.entities_of(int(m))
            for e in ents:
                weights[int(e)] = weights.get(int(e), 0.0) + 1.0 / (n_u * len(ents))
        return weights


def item_importance(j, u, t, params, config, graph, view=None):
    """Per-factor importance s(j, c; u, t) of historical item ``j`` and their total."""
    view = view or _UserView(params, config, graph, u)
    if int(j) not in set(view.neighbors.tolist()):
        return np.zeros(config.C2), 0.0
    per = view.item_terms([t])[0] * view.item_p[j].astype(np.float64) / len(view.neighbors)
    return per, float(per.sum())


def entity_importance(j, u, t, params, config, graph, view=None):
    """Per-factor importance of entity ``j``, traced through u's historical items."""
    view = view or _UserView(params, config, graph, u)
    w = view.entity_path_weights().get(int(j), 0.0)
    if w == 0.0:
        return np.zeros(config.C1), 0.0
    per = view.entity_terms([t])[0] * w * view.entity_p[j].astype(np.float64)
    return per, float(per.sum())


@dataclass
class Contribution:
    node: int
    kind: str
    per_factor: np.ndarray
    total: float

    @property
    def factor(self):
        return int(np.argmax(self.per_factor))


@dataclass
class Explanation:
    user: int
    target: int
    target_factor: int
    item_contributions: list
    entity_contributions: list

    def to_dict(self, ids=None):
        def name(kind, idx):
            if ids is None:
                return idx
            return {"item": ids.items, "entity": ids.entities, "user": ids.users}[kind][idx]

        def rows(cs):
            return [{"node": name(c.kind, c.node), "kind": c.kind, "factor": c.factor + 1, "score": c.total,
                     "per_factor_scores": [float(x) for x in c.per_factor]} for c in cs]

        return {"user": name("user", self.user), "target": name("item", self.target),
                "target_factor": self.target_factor + 1,
                "items": rows(self.item_contributions), "entities": rows(self.entity_contributions)}

    def to_json(self, ids=None):
        return json.dumps(self.to_dict(ids), indent=2)

    def to_dot(self, ids=None):
        d = self.to_dict(ids)

        def color(f):
            return FACTOR_COLORS[(f - 1) % len(FACTOR_COLORS)]

        lines = ["digraph explanation {", "  rankdir=LR;",
                 f'  "u:{d["user"]}" [shape=box, label="user {d["user"]}"];',
                 f'  "t:{d["target"]}" [shape=box, style=filled, fillcolor="{color(d["target_factor"])}", '
                 f'label="target {d["target"]}\\nfactor {d["target_factor"]}"];',
                 f'  "u:{d["user"]}" -> "t:{d["target"]}" [style=bold];']
        for key, prefix, shape in (("items", "i", "ellipse"), ("entities", "e", "diamond")):
            for r in d[key]:
                nid = f'{prefix}:{r["node"]}'
                lines.append(f'  "{nid}" [shape={shape}, style=filled, fillcolor="{color(r["factor"])}", '
                             f'label="{r["kind"]} {r["node"]}\\nfactor {r["factor"]}"];')
                lines.append(f'  "{nid}" -> "u:{d["user"]}" [label="{r["score"]:.4g}"];')
        lines.append("}")
        return "\n".join(lines) + "\n"


def _sorted_contributions(nodes, per_factor, kind, top_m):
    totals = per_factor.sum(axis=1)
    order = np.lexsort((np.asarray(nodes), -totals))
    return [Contribution(int(nodes[i]), kind, per_factor[i], float(totals[i])) for i in order[:top_m]]


def explain(u, t, params, config, graph, top_m=5, view=None) -> Explanation:
    view = view or _UserView(params, config, graph, u)
    hist = view.neighbors
    item_pf = view.item_terms([t])[0][None, :] * view.item_p[hist].astype(np.float64) / max(len(hist), 1)
    weights = view.entity_path_weights()
    ents = np.array(sorted(weights), dtype=np.int64)
    w = np.array([weights[e] for e in ents])
    ent_pf = view.entity_terms([t])[0][None, :] * w[:, None] * view.entity_p[ents].astype(np.float64)
    return Explanation(
        int(u), int(t), int(np.argmax(view.item_p[t])),
        _sorted_contributions(hist, item_pf.reshape(len(hist), -1), "item", top_m),
        _sorted_contributions(ents, ent_pf.reshape(len(ents), -1), "entity", top_m),
    )


# --- faithfulness ---------------------------------------------------------------


@dataclass
class ShiftReport:
    strategy: str
    removal: str
    budgets: list
    runs: int
    rows: list = field(default_factory=list)  # (n, run, recall, recall_prime, shift, users, excluded)

    def mean_shift(self, n):
        vals = [r[4] for r in self.rows if r[0] == n]
        return float(np.mean(vals))

    def mean_recall(self, n):
        return float(np.mean([r[2] for r in self.rows if r[0] == n]))

    def mean_recall_prime(self, n):
        return float(np.mean([r[3] for r in self.rows if r[0] == n]))

    def to_tsv(self, header=True):
        out = ["strategy\tremoval\tn\trun\trecall\trecall_prime\tshift\tusers\texcluded"] if header else []
        for n, run, rec, recp, shift, users, excl in self.rows:
            out.append(f"{self.strategy}\t{self.removal}\t{n}\t{run}\t{rec:.6f}\t{recp:.6f}\t{shift:.6f}\t{users}\t{excl}")
        return "\n".join(out) + "\n"


def relative_shift(recall, recall_prime):
    """(recall - recall') / recall; undefined for a zero baseline."""
    if recall == 0:
        raise ZeroDivisionError("shift is undefined when the baseline recall is 0")
    return (recall - recall_prime) / recall


def _aggregate_importance(view, targets):
    hist = view.neighbors
    item_scores = (view.item_terms(targets).sum(axis=0)[None, :] * view.item_p[hist].astype(np.float64)
                   ).sum(axis=1) / len(hist)
    weights = view.entity_path_weights()
    ents = np.array(sorted(weights), dtype=np.int64)
    w = np.array([weights[e] for e in ents])
    ent_scores = (view.entity_terms(targets).sum(axis=0)[None, :] * view.entity_p[ents].astype(np.float64)
                  ).sum(axis=1) * w
    return hist, item_scores, ents, ent_scores


def _top(nodes, scores, n, rng):
    if n <= 0 or len(nodes) == 0:
        return np.zeros(0, dtype=np.int64)
    tiebreak = rng.permutation(len(nodes))
    order = np.lexsort((tiebreak, -scores))
    return np.asarray(nodes)[order[:n]]


def _mask_items(params, config, graph, items: ItemBatch, affected, removed_entities):
    """Copy of ``items`` with the given entities' edges cut from the ``affected`` items."""
    removed = set(int(e) for e in removed_entities)
    ptr, idx = [0], []
    for m in affected:
        idx.extend(e for e in graph.entities_of(int(m)).tolist() if e not in removed)
        ptr.append(len(idx))
    sub = encode_items(params, config, np.asarray(ptr, dtype=np.int64), np.asarray(idx, dtype=np.int64),
                       ent_aff=items.ent_aff)
    mu = items.mu.copy()
    sigma = items.sigma.copy()
    mu[affected] = sub.mu
    sigma[affected] = sub.sigma
    return ItemBatch(mu, sigma, items.ent_aff, items.indptr, items.indices, items.head_cache)


def faithfulness_shift(params, config, split, n_remove=(1, 2, 3, 4, 5), strategy="model", runs=5, seed=0,
                       removal="items", k=10, users=None):
    """Relative Recall@k drop after removing each test user's most important inputs.

    ``strategy`` is ``"model"`` (importance-ranked) or ``"random"``;
    ``removal`` is ``"items"``, ``"entities"`` or ``"combined"``.
    """
    if strategy not in ("model", "random"):
        raise ValueError(f"unknown strategy {strategy!r}")
    if removal not in ("items", "entities", "combined"):
        raise ValueError(f"unknown removal mode {removal!r}")
    graph = split.train_graph
    test_users = split.test_users if users is None else np.asarray(users)
    truth = split.test_truth
    items = encode_items(params, config, graph.ie_indptr, graph.ie_indices)
    report = ShiftReport(strategy, removal, list(n_remove), runs)

    base = {}
    for u in test_users:
        u = int(u)
        if not truth.get(u) or len(graph.items_of(u)) == 0:
            continue
        view = _UserView(params, config, graph, u, items=items)
        ranked = rank_from_scores(view.scores(), view.neighbors)
        rec = recall_at_k(ranked, truth[u], k)
        base[u] = (view, rec, _aggregate_importance(view, ranked[:k]))

    for run in range(runs):
        rng = SeededRng(seed, (run,))
        for n in n_remove:
            recs, recps, shifts, excluded = [], [], [], 0
            for u, (view, rec, (hist, item_s, ents, ent_s)) in base.items():
                if rec == 0:
                    excluded += 1
                    continue
                urng = rng.spawn(u).spawn(n)
                n_items = n if removal in ("items", "combined") else 0
                n_ents = n if removal in ("entities", "combined") else 0
                if strategy == "model":
                    drop_items = _top(hist, item_s, n_items, urng)
                    drop_ents = _top(ents, ent_s, n_ents, urng)
                else:
                    drop_items = hist[np.sort(urng.choice(len(hist), min(n_items, len(hist))))] \
                        if n_items else np.zeros(0, dtype=np.int64)
                    drop_ents = ents[np.sort(urng.choice(len(ents), min(n_ents, len(ents))))] \
                        if n_ents else np.zeros(0, dtype=np.int64)
                kept = hist[~np.isin(hist, drop_items)]
                pitems = _mask_items(params, config, graph, items, kept, drop_ents) if len(drop_ents) else items
                pview = _UserView(params, config, graph, u, neighbors=kept, items=pitems)
                ranked = rank_from_scores(pview.scores(), hist)
                recp = recall_at_k(ranked, truth[u], k)
                recs.append(rec)
                recps.append(recp)
                shifts.append(relative_shift(rec, recp))
            report.rows.append((n, run, float(np.mean(recs)) if recs else 0.0,
                                float(np.mean(recps)) if recps else 0.0,
                                float(np.mean(shifts)) if shifts else 0.0, len(recs), excluded))
    return report
