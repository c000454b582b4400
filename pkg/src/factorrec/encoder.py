"""Factor affiliations and the segment-factorized variational graph encoder.

Items carry a deterministic base embedding plus ``C1`` entity segments built
from their knowledge entities.  Users carry ``C2`` item segments built from
their history and ``C1`` entity segments averaged from those items.  Every
segment is a diagonal Gaussian.  The batched functions here return caches so
the loss can run the hand-written backward pass.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .kernels import segment_mean, segment_mean_transpose
from .numerics import SIGMA_LOG_CLIP, cosine_rows, cosine_rows_backward, log_softmax, reparam_sample

ENCODER_PARAMS = (
    "entity_base",
    "item_base",
    "entity_prototypes",
    "item_prototypes",
    "ent_map_mu",
    "ent_map_logsigma",
    "itm_map_mu",
    "itm_map_logsigma",
)


class EncodeError(ValueError):
    pass


class RealizeMode(enum.Enum):
    sampled = "sampled"
    mean = "mean"


@dataclass
class SegmentDistribution:
    mu: np.ndarray
    sigma: np.ndarray


@dataclass
class ItemEncoding:
    base: np.ndarray
    ent_segments: list


@dataclass
class UserEncoding:
    itm_segments: list
    ent_segments: list


@dataclass
class UserRepresentation:
    itm: np.ndarray  # (C2, D)
    ent: np.ndarray  # (C1, D)
    mode: RealizeMode

    def vector(self):
        return np.concatenate([self.itm.reshape(-1), self.ent.reshape(-1)])


# --- affiliations -----------------------------------------------------------


@dataclass
class Affiliation:
    p: np.ndarray
    logp: np.ndarray
    cache: tuple


def affiliations(base, prototypes, gamma) -> Affiliation:
    """Temperature softmax over factors of cosine(base row, prototype)."""
    cos, cache = cosine_rows(base, prototypes)
    logp = log_softmax(cos / gamma, axis=1)
    return Affiliation(np.exp(logp), logp, (cache, gamma))


def affiliations_backward(aff: Affiliation, dp=None, dlogp=None):
    cos_cache, gamma = aff.cache
    p = aff.p
    dlogits = np.zeros_like(p)
    if dp is not None:
        dlogits += p * (dp - np.sum(dp * p, axis=1, keepdims=True))
    if dlogp is not None:
        dlogits += dlogp - p * np.sum(dlogp, axis=1, keepdims=True)
    return cosine_rows_backward(dlogits / gamma, cos_cache)


def entity_affiliation(e: int, params, config):
    return affiliations(params["entity_base"][e : e + 1], params["entity_prototypes"], config.gamma).p[0]


def item_affiliation(t: int, params, config):
    return affiliations(params["item_base"][t : t + 1], params["item_prototypes"], config.gamma).p[0]


# --- g(z) = W tanh(z) with a log-sigma head ---------------------------------


def _gaussian_head(agg, w_mu, w_logsigma):
    h = np.tanh(agg)
    mu = h @ w_mu.T
    logsigma = h @ w_logsigma.T
    clipped = np.clip(logsigma, -SIGMA_LOG_CLIP, SIGMA_LOG_CLIP)
    sigma = np.exp(clipped)
    inside = (np.abs(logsigma) < SIGMA_LOG_CLIP).astype(agg.dtype)
    return mu, sigma, (h, inside)


def _gaussian_head_backward(dmu, dsigma, sigma, cache, w_mu, w_logsigma):
    h, inside = cache
    dlog = dsigma * sigma * inside
    dh = dmu @ w_mu + dlog @ w_logsigma
    d = h.shape[-1]
    hf = h.reshape(-1, d)
    dw_mu = dmu.reshape(-1, d).T @ hf
    dw_ls = dlog.reshape(-1, d).T @ hf
    return dh * (1 - h * h), dw_mu, dw_ls


# --- batched item side --------------------------------------------------------


@dataclass
class ItemBatch:
    mu: np.ndarray  # (R, C1, D)
    sigma: np.ndarray
    ent_aff: Affiliation
    indptr: np.ndarray
    indices: np.ndarray
    head_cache: tuple


def encode_items(params, config, ie_indptr, ie_indices, ent_aff=None) -> ItemBatch:
    """Entity segments for every CSR row (one row per item).

    Items without entities come out as the standard-normal prior because
    ``g(0) = 0`` for both heads.
    """
    base = params["entity_base"]
    if ent_aff is None:
        ent_aff = affiliations(base, params["entity_prototypes"], config.gamma)
    n_e, d = base.shape
    c1 = config.C1
    weighted = (ent_aff.p[:, :, None] * base[:, None, :]).reshape(n_e, c1 * d)
    agg = segment_mean(ie_indptr, ie_indices, weighted).reshape(-1, c1, d)
    mu, sigma, cache = _gaussian_head(agg, params["ent_map_mu"], params["ent_map_logsigma"])
    return ItemBatch(mu, sigma, ent_aff, ie_indptr, ie_indices, cache)


def encode_items_backward(items: ItemBatch, dmu, dsigma, params, config, grads):
    dagg, dw_mu, dw_ls = _gaussian_head_backward(
        dmu, dsigma, items.sigma, items.head_cache, params["ent_map_mu"], params["ent_map_logsigma"])
    grads["ent_map_mu"] += dw_mu
    grads["ent_map_logsigma"] += dw_ls
    base = params["entity_base"]
    n_e, d = base.shape
    dweighted = segment_mean_transpose(
        items.indptr, items.indices, dagg.reshape(len(dagg), -1), n_e).reshape(n_e, config.C1, d)
    p = items.ent_aff.p
    grads["entity_base"] += np.einsum("ec,ecd->ed", p, dweighted)
    dp = np.einsum("ed,ecd->ec", base, dweighted)
    dbase, dprot = affiliations_backward(items.ent_aff, dp=dp)
    grads["entity_base"] += dbase
    grads["entity_prototypes"] += dprot


# --- batched user side --------------------------------------------------------


@dataclass
class UserBatch:
    itm_mu: np.ndarray  # (R, C2, D)
    itm_sigma: np.ndarray
    ent_mu: np.ndarray  # (R, C1, D)
    ent_sigma: np.ndarray
    empty: np.ndarray  # rows without neighbors
    item_aff: Affiliation
    indptr: np.ndarray
    indices: np.ndarray
    head_cache: tuple


def encode_users(params, config, indptr, indices, items: ItemBatch, item_aff=None) -> UserBatch:
    """User segments for each CSR row of historical items.

    ``items`` holds the entity segments for all items (row = item index).
    Rows with no neighbors fall back to the prior.
    """
    base = params["item_base"]
    if item_aff is None:
        item_aff = affiliations(base, params["item_prototypes"], config.gamma)
    n_t, d = base.shape
    weighted = (item_aff.p[:, :, None] * base[:, None, :]).reshape(n_t, config.C2 * d)
    agg = segment_mean(indptr, indices, weighted).reshape(-1, config.C2, d)
    itm_mu, itm_sigma, cache = _gaussian_head(agg, params["itm_map_mu"], params["itm_map_logsigma"])
    flat = (len(items.mu), config.C1 * d)
    ent_mu = segment_mean(indptr, indices, items.mu.reshape(flat)).reshape(-1, config.C1, d)
    ent_sigma = segment_mean(indptr, indices, items.sigma.reshape(flat)).reshape(-1, config.C1, d)
    empty = np.diff(indptr) == 0
    if np.any(empty):
        ent_sigma[empty] = 1.0
    return UserBatch(itm_mu, itm_sigma, ent_mu, ent_sigma, empty, item_aff, indptr, indices, cache)


def encode_users_backward(users: UserBatch, d_itm_mu, d_itm_sigma, d_ent_mu, d_ent_sigma, params, config, grads):
    """Accumulate parameter grads; returns (d item ent-mu, d item ent-sigma) for the item side."""
    dagg, dw_mu, dw_ls = _gaussian_head_backward(
        d_itm_mu, d_itm_sigma, users.itm_sigma, users.head_cache, params["itm_map_mu"], params["itm_map_logsigma"])
    grads["itm_map_mu"] += dw_mu
    grads["itm_map_logsigma"] += dw_ls
    base = params["item_base"]
    n_t, d = base.shape
    dweighted = segment_mean_transpose(
        users.indptr, users.indices, dagg.reshape(len(dagg), -1), n_t).reshape(n_t, config.C2, d)
    grads["item_base"] += np.einsum("tc,tcd->td", users.item_aff.p, dweighted)
    dp = np.einsum("td,tcd->tc", base, dweighted)

    d_ent_sigma = d_ent_sigma.copy()
    d_ent_sigma[users.empty] = 0.0
    width = config.C1 * d
    d_items_mu = segment_mean_transpose(
        users.indptr, users.indices, d_ent_mu.reshape(len(d_ent_mu), width), n_t).reshape(n_t, config.C1, d)
    d_items_sigma = segment_mean_transpose(
        users.indptr, users.indices, d_ent_sigma.reshape(len(d_ent_sigma), width), n_t).reshape(n_t, config.C1, d)
    return dp, d_items_mu, d_items_sigma


# --- single-node API ----------------------------------------------------------


def _item_csr(graph, items):
    ptr = [0]
    idx = []
    for t in items:
        ents = graph.entities_of(int(t))
        idx.extend(ents.tolist())
        ptr.append(len(idx))
    return np.asarray(ptr, dtype=np.int64), np.asarray(idx, dtype=np.int64)


def encode_item(t: int, graph, params, config) -> ItemEncoding:
    ptr, idx = _item_csr(graph, [t])
    batch = encode_items(params, config, ptr, idx)
    segs = [SegmentDistribution(batch.mu[0, c].copy(), batch.sigma[0, c].copy()) for c in range(config.C1)]
    return ItemEncoding(params["item_base"][t].copy(), segs)


def encode_user(u: int, graph, params, config, neighbors=None) -> UserEncoding:
    """Encode one user from its training neighborhood (or an explicit item list)."""
    hist = graph.items_of(u) if neighbors is None else np.asarray(neighbors, dtype=np.int64)
    if len(hist) == 0:
        raise EncodeError(f"user {u} has no training interactions")
    items = encode_items(params, config, graph.ie_indptr, graph.ie_indices)
    batch = encode_users(params, config, np.array([0, len(hist)], dtype=np.int64), hist, items)
    return UserEncoding(
        [SegmentDistribution(batch.itm_mu[0, c], batch.itm_sigma[0, c]) for c in range(config.C2)],
        [SegmentDistribution(batch.ent_mu[0, c], batch.ent_sigma[0, c]) for c in range(config.C1)],
    )


def realize(enc, mode=RealizeMode.mean, rng=None):
    """Turn an encoding into concrete vectors, each segment drawn independently."""
    mode = RealizeMode(mode)

    def draw(segs):
        if not segs:
            return np.zeros((0, 0))
        if mode is RealizeMode.mean:
            return np.stack([s.mu for s in segs])
        return np.stack([reparam_sample(s.mu, s.sigma, rng) for s in segs])

    if isinstance(enc, UserEncoding):
        return UserRepresentation(draw(enc.itm_segments), draw(enc.ent_segments), mode)
    ent = draw(enc.ent_segments)
    return np.concatenate([enc.base, ent.reshape(-1)])
