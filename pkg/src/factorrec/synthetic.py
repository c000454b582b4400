"""Planted-factor synthetic data: disjoint item clusters with cluster-specific entities."""

import numpy as np


def planted_factor_data(seed=0, n_users=100, n_clusters=2, items_per_cluster=10, entities_per_cluster=6,
                        entities_per_item=3, interactions_per_user=10, preferred_share=0.9):
    """Return ``(interactions, item_entity, item_cluster)`` with string ids.

    Each user prefers one cluster (users alternate clusters) and draws
    ``preferred_share`` of its interactions from it, the rest from the others.
    """
    rng = np.random.default_rng(seed)
    items = [[f"t{c}_{i}" for i in range(items_per_cluster)] for c in range(n_clusters)]
    item_cluster = {t: c for c in range(n_clusters) for t in items[c]}
    item_entity = []
    for c in range(n_clusters):
        ents = [f"e{c}_{j}" for j in range(entities_per_cluster)]
        for t in items[c]:
            for j in rng.choice(entities_per_cluster, entities_per_item, replace=False):
                item_entity.append((t, ents[j]))
    n_pref = int(round(preferred_share * interactions_per_user))
    n_other = interactions_per_user - n_pref
    interactions = []
    for u in range(n_users):
        c = u % n_clusters
        others = [t for k in range(n_clusters) if k != c for t in items[k]]
        chosen = [items[c][i] for i in rng.choice(items_per_cluster, min(n_pref, items_per_cluster), replace=False)]
        chosen += [others[i] for i in rng.choice(len(others), n_other, replace=False)]
        for t in chosen:
            interactions.append((f"u{u}", t))
    return interactions, item_entity, item_cluster


def factor_purity(item_factor, item_label):
    """Fraction of items whose factor equals the most common factor of their label group."""
    item_factor = np.asarray(item_factor)
    item_label = np.asarray(item_label)
    hits = 0
    for lab in np.unique(item_label):
        f = item_factor[item_label == lab]
        hits += int(np.sum(f == np.bincount(f).argmax()))
    return hits / len(item_factor)
