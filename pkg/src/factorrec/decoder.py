"""Factor-wise decoder, multinomial likelihood over items, and the ELBO with its gradient."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoder import (
    ENCODER_PARAMS,
    affiliations,
    affiliations_backward,
    encode_items,
    encode_items_backward,
    encode_users,
    encode_users_backward,
)
from .numerics import logsumexp

DECODER_PARAMS = ("dict_base", "dict_ent")
EXP_CLAMP = 50.0


@dataclass
class LossBreakdown:
    negative_log_likelihood: float
    kl: float
    l2: float
    total: float


def param_names(config):
    return ENCODER_PARAMS if config.decoder_tied else ENCODER_PARAMS + DECODER_PARAMS


def decoder_tables(params, config, items):
    """Item-side vectors used by the decoder: (base (T, D), entity segments (T, C1, D))."""
    if config.decoder_tied:
        return params["item_base"], items.mu
    return params["dict_base"], params["dict_ent"]


def decoder_terms(itm, ent, d_base, d_ent, logp_items):
    """Per-factor log terms ``log p(t,c) + <itm_c, d_t>`` and ``<ent_c, d_ent_tc>``.

    ``itm`` is (R, C2, D), ``ent`` is (R, C1, D); tables are indexed by the
    candidate axis K.  Returns (R, K, C2 + C1) log-terms plus the raw inner
    products for clamping masks.
    """
    x = np.einsum("rcd,kd->rkc", itm, d_base)
    y = np.einsum("rcd,kcd->rkc", ent, d_ent)
    terms = np.concatenate(
        [logp_items[None, :, :] + np.minimum(x, EXP_CLAMP), np.minimum(y, EXP_CLAMP)], axis=2)
    return terms, x, y


def score_pair(u_rep, t, params, affiliations_t, config=None, items=None):
    """S(u, t): affiliation-weighted item terms plus entity terms, all exponentiated."""
    if config is not None and config.decoder_tied:
        d_base, d_ent = params["item_base"][t], items.mu[t]
    else:
        d_base, d_ent = params["dict_base"][t], params["dict_ent"][t]
    x = np.minimum(u_rep.itm.astype(np.float64) @ d_base.astype(np.float64), EXP_CLAMP)
    y = np.minimum(np.einsum("cd,cd->c", u_rep.ent.astype(np.float64), d_ent.astype(np.float64)), EXP_CLAMP)
    return float(np.sum(np.asarray(affiliations_t, dtype=np.float64) * np.exp(x)) + np.sum(np.exp(y)))


def log_likelihood(scores, positives, candidates):
    """Multinomial log-likelihood of ``positives`` given scores S over ``candidates``.

    ``scores`` maps item -> S(u, t) (or is an array indexed by item).
    """
    candidates = list(candidates)
    if not candidates:
        raise ValueError("candidate set is empty")
    cand = set(candidates)
    if not set(positives) <= cand:
        raise ValueError("positives must be a subset of candidates")
    log_s = np.log(np.array([scores[t] for t in candidates], dtype=np.float64))
    norm = logsumexp(log_s)
    lookup = dict(zip(candidates, log_s))
    return float(sum(lookup[t] - norm for t in positives))


def _rows(batch_users, graph, exclude_target):
    """Build per-row neighbor CSR and positive lists for a batch of users."""
    ptr, idx, pos, owner = [0], [], [], []
    for b, u in enumerate(batch_users):
        hist = graph.items_of(int(u))
        if len(hist) == 0:
            raise ValueError(f"batch user {u} has no training interactions")
        if exclude_target:
            for t in hist:
                nb = hist[hist != t]
                idx.extend(nb.tolist())
                ptr.append(len(idx))
                pos.append(np.array([t]))
                owner.append(b)
        else:
            idx.extend(hist.tolist())
            ptr.append(len(idx))
            pos.append(np.asarray(hist))
            owner.append(b)
    return np.asarray(ptr, dtype=np.int64), np.asarray(idx, dtype=np.int64), pos, np.asarray(owner)


def draw_noise(rng, n_rows, config):
    s = config.mc_samples
    return {
        "itm": rng.normal((s, n_rows, config.C2, config.D)),
        "ent": rng.normal((s, n_rows, config.C1, config.D)),
    }


def elbo_loss(batch_users, graph, params, config, rng=None, noise=None, with_grads=False, candidates=None):
    """Negative ELBO averaged over ``batch_users``.

    Returns a :class:`LossBreakdown`, or ``(LossBreakdown, grads)`` when
    ``with_grads`` is set.  ``noise`` freezes the reparameterization draws
    (shape per :func:`draw_noise`); otherwise they come from ``rng``.
    """
    dtype = params["item_base"].dtype
    n_users = len(batch_users)
    n_items = graph.n_items
    ptr, idx, pos, _ = _rows(batch_users, graph, config.exclude_target_from_neighborhood)
    n_rows = len(pos)

    if candidates is None:
        n_neg = config.n_negatives
        if n_neg is None:
            candidates = np.arange(n_items)
        else:
            negs = rng.choice(n_items, size=min(n_neg, n_items), replace=False)
            candidates = np.union1d(np.concatenate(pos), negs)
    candidates = np.asarray(candidates, dtype=np.int64)
    slot = np.full(n_items, -1, dtype=np.int64)
    slot[candidates] = np.arange(len(candidates))
    y = np.zeros((n_rows, len(candidates)), dtype=dtype)
    for r, p in enumerate(pos):
        if np.any(slot[p] < 0):
            raise ValueError("positives must be included in candidates")
        y[r, slot[p]] = 1.0
    n_pos = y.sum(axis=1)

    if noise is None:
        noise = draw_noise(rng, n_rows, config)

    items = encode_items(params, config, graph.ie_indptr, graph.ie_indices)
    users = encode_users(params, config, ptr, idx, items)
    item_aff = users.item_aff
    d_base_all, d_ent_all = decoder_tables(params, config, items)
    d_base = d_base_all[candidates]
    d_ent = d_ent_all[candidates]
    logp_c = item_aff.logp[candidates]

    c2 = config.C2
    s_count = noise["itm"].shape[0]
    nll = 0.0
    g_itm_mu = np.zeros_like(users.itm_mu)
    g_itm_sigma = np.zeros_like(users.itm_sigma)
    g_ent_mu = np.zeros_like(users.ent_mu)
    g_ent_sigma = np.zeros_like(users.ent_sigma)
    g_logp_c = np.zeros_like(logp_c)
    g_dbase = np.zeros_like(d_base)
    g_dent = np.zeros_like(d_ent)
    for s in range(s_count):
        z_itm = users.itm_mu + users.itm_sigma * noise["itm"][s].astype(dtype)
        z_ent = users.ent_mu + users.ent_sigma * noise["ent"][s].astype(dtype)
        terms, x, yy = decoder_terms(z_itm, z_ent, d_base, d_ent, logp_c)
        log_s = logsumexp(terms, axis=2)
        log_s64 = log_s.astype(np.float64)
        norm = logsumexp(log_s64, axis=1)
        nll += float(np.sum(n_pos * norm - np.sum(y * log_s64, axis=1))) / s_count
        if not with_grads:
            continue
        soft = np.exp(log_s64 - norm[:, None])
        g_log_s = ((n_pos[:, None] * soft - y) / (n_users * s_count)).astype(dtype)
        resp = np.exp(terms - log_s[:, :, None])
        g_terms = g_log_s[:, :, None] * resp
        g_x = g_terms[:, :, :c2] * (x < EXP_CLAMP)
        g_y = g_terms[:, :, c2:] * (yy < EXP_CLAMP)
        g_logp_c += g_terms[:, :, :c2].sum(axis=0)
        g_z_itm = np.einsum("rkc,kd->rcd", g_x, d_base)
        g_z_ent = np.einsum("rkc,kcd->rcd", g_y, d_ent)
        g_dbase += np.einsum("rkc,rcd->kd", g_x, z_itm)
        g_dent += np.einsum("rkc,rcd->kcd", g_y, z_ent)
        g_itm_mu += g_z_itm
        g_itm_sigma += g_z_itm * noise["itm"][s]
        g_ent_mu += g_z_ent
        g_ent_sigma += g_z_ent * noise["ent"][s]

    def kl_parts(mu, sigma):
        m = mu.astype(np.float64)
        sg = sigma.astype(np.float64)
        return 0.5 * (m * m + sg * sg - 1.0 - 2.0 * np.log(sg))

    kl = float(np.sum(kl_parts(users.itm_mu, users.itm_sigma)) + np.sum(kl_parts(users.ent_mu, users.ent_sigma)))
    item_kl_counts = None
    if config.decoder_tied:
        item_kl_counts = np.bincount(np.concatenate(pos), minlength=n_items).astype(dtype)
        per_item = kl_parts(items.mu, items.sigma).sum(axis=(1, 2))
        kl += float(np.sum(item_kl_counts * per_item))

    names = param_names(config)
    l2 = float(sum(np.sum(params[k].astype(np.float64) ** 2) for k in names))
    nll /= n_users
    kl /= n_users
    total = nll + kl + config.l2_weight * l2
    loss = LossBreakdown(nll, kl, l2, total)
    if not with_grads:
        return loss

    inv = np.asarray(1.0 / n_users, dtype=dtype)
    g_itm_mu += users.itm_mu * inv
    g_itm_sigma += (users.itm_sigma - 1.0 / users.itm_sigma) * inv
    g_ent_mu += users.ent_mu * inv
    g_ent_sigma += (users.ent_sigma - 1.0 / users.ent_sigma) * inv

    grads = {k: np.zeros_like(params[k]) for k in names}
    dp_items, d_items_mu, d_items_sigma = encode_users_backward(
        users, g_itm_mu, g_itm_sigma, g_ent_mu, g_ent_sigma, params, config, grads)
    dlogp_items = np.zeros_like(item_aff.logp)
    dlogp_items[candidates] += g_logp_c
    if config.decoder_tied:
        grads["item_base"][candidates] += g_dbase
        d_items_mu[candidates] += g_dent
        w = (item_kl_counts * inv)[:, None, None]
        d_items_mu += items.mu * w
        d_items_sigma += (items.sigma - 1.0 / items.sigma) * w
    else:
        grads["dict_base"][candidates] += g_dbase
        grads["dict_ent"][candidates] += g_dent
    dbase, dprot = affiliations_backward(item_aff, dp=dp_items, dlogp=dlogp_items)
    grads["item_base"] += dbase
    grads["item_prototypes"] += dprot
    encode_items_backward(items, d_items_mu, d_items_sigma, params, config, grads)
    for k in names:
        grads[k] = (grads[k] + 2.0 * config.l2_weight * params[k]).astype(dtype)
    return loss, grads
