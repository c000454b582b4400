"""Framework-free numerical core: softmax, cosine, Gaussian helpers, Adam, gradient checking."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DTYPE = np.float32
SIGMA_LOG_CLIP = 5.0
NORM_EPS = 1e-12


class DomainError(ValueError):
    pass


class ShapeError(ValueError):
    pass


class SeededRng:
    """Seeded normal/uniform stream (PCG64), splittable by stream id."""

    def __init__(self, seed: int, stream: tuple = ()):
        self.seed = int(seed)
        self.stream = tuple(int(s) for s in stream)
        seq = np.random.SeedSequence(self.seed, spawn_key=self.stream)
        self._gen = np.random.Generator(np.random.PCG64(seq))

    def spawn(self, stream_id: int) -> "SeededRng":
        return SeededRng(self.seed, self.stream + (stream_id,))

    def normal(self, shape, dtype=DTYPE):
        return self._gen.standard_normal(shape).astype(dtype, copy=False)

    def permutation(self, n):
        return self._gen.permutation(n)

    def choice(self, n, size, replace=False):
        return self._gen.choice(n, size=size, replace=replace)

    def integers(self, low, high, size=None):
        return self._gen.integers(low, high, size=size)


def softmax_temp(logits, gamma, axis=-1):
    """Softmax of ``logits / gamma`` along ``axis``."""
    if not gamma > 0:
        raise DomainError(f"temperature must be positive, got {gamma}")
    x = np.asarray(logits) / gamma
    x = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(x)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(x, axis=-1):
    m = np.max(x, axis=axis, keepdims=True)
    shifted = x - m
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def logsumexp(x, axis=-1):
    m = np.max(x, axis=axis, keepdims=True)
    out = m + np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis)


def cosine(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"length mismatch: {a.shape} vs {b.shape}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na < NORM_EPS or nb < NORM_EPS:
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def cosine_rows(x, protos):
    """Cosine between every row of ``x`` (N, D) and every prototype (C, D).

    Returns the (N, C) matrix and a cache for :func:`cosine_rows_backward`.
    Rows with norm below 1e-12 get cosine 0 and zero gradient.
    """
    nx = np.linalg.norm(x, axis=1)
    npr = np.linalg.norm(protos, axis=1)
    okx = nx >= NORM_EPS
    okp = npr >= NORM_EPS
    xn = np.where(okx[:, None], x / np.where(okx, nx, 1)[:, None], 0).astype(x.dtype)
    pn = np.where(okp[:, None], protos / np.where(okp, npr, 1)[:, None], 0).astype(x.dtype)
    cos = xn @ pn.T
    return cos, (xn, pn, nx, npr, okx, okp, cos)


def cosine_rows_backward(dcos, cache):
    xn, pn, nx, npr, okx, okp, cos = cache
    dx = dcos @ pn - np.sum(dcos * cos, axis=1, keepdims=True) * xn
    dx = np.where(okx[:, None], dx / np.where(okx, nx, 1)[:, None], 0)
    dp = dcos.T @ xn - np.sum(dcos * cos, axis=0)[:, None] * pn
    dp = np.where(okp[:, None], dp / np.where(okp, npr, 1)[:, None], 0)
    return dx.astype(xn.dtype), dp.astype(xn.dtype)


def gaussian_kl(mu, sigma):
    """KL(N(mu, diag sigma^2) || N(0, I)), summed over all entries."""
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma <= 0):
        raise DomainError("sigma must be strictly positive")
    return float(np.sum(0.5 * (mu**2 + sigma**2 - 1.0 - 2.0 * np.log(sigma))))


def reparam_sample(mu, sigma, rng=None, eps=None):
    """``mu + sigma * eps`` with ``eps`` drawn from ``rng`` unless supplied."""
    mu = np.asarray(mu)
    sigma = np.asarray(sigma)
    if np.any(sigma <= 0):
        raise DomainError("sigma must be strictly positive")
    if eps is None:
        eps = rng.normal(mu.shape, dtype=mu.dtype)
    return mu + sigma * eps


@dataclass
class AdamState:
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, params, **kw):
        return cls(
            {k: np.zeros_like(v) for k, v in params.items()},
            {k: np.zeros_like(v) for k, v in params.items()},
            0,
            **kw,
        )

    def copy(self):
        return AdamState(
            {k: v.copy() for k, v in self.first_moment.items()},
            {k: v.copy() for k, v in self.second_moment.items()},
            self.step_count,
            self.beta1,
            self.beta2,
            self.eps,
        )


def adam_step(params, grads, state, lr):
    """One bias-corrected Adam update. Returns new (params, state); inputs are untouched."""
    if not lr > 0:
        raise DomainError("learning rate must be positive")
    t = state.step_count + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    new_params, m_out, v_out = {}, {}, {}
    for name, theta in params.items():
        g = grads[name]
        if g.shape != theta.shape:
            raise ShapeError(f"{name}: grad shape {g.shape} != param shape {theta.shape}")
        m = b1 * state.first_moment[name] + (1 - b1) * g
        v = b2 * state.second_moment[name] + (1 - b2) * g * g
        step = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        new_params[name] = (theta - step).astype(theta.dtype)
        m_out[name] = m.astype(theta.dtype)
        v_out[name] = v.astype(theta.dtype)
    return new_params, AdamState(m_out, v_out, t, b1, b2, state.eps)


def grad_check(loss_fn, params, analytic_grads, h=1e-5, max_coords=None, rng=None):
    """Max relative error between analytic gradients and central differences.

    ``params`` maps names to arrays; ``loss_fn`` takes such a mapping.  When
    ``max_coords`` is set, at most that many coordinates per tensor are probed
    (chosen by ``rng``).  Relative error is ``|a - fd| / max(|a|, |fd|, 1e-8)``.
    """
    if not 1e-7 <= h <= 1e-3:
        raise DomainError("finite-difference step out of range")
    work = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    worst = 0.0
    for name, arr in work.items():
        flat = arr.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            rng = rng or SeededRng(0)
            coords = np.sort(rng.choice(flat.size, max_coords))
        a_flat = np.asarray(analytic_grads[name], dtype=np.float64).reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn(work)
            flat[i] = orig - h
            down = loss_fn(work)
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise FloatingPointError(f"non-finite loss while probing {name}[{i}]")
            fd = (up - down) / (2 * h)
            a = a_flat[i]
            err = abs(a - fd) / max(abs(a), abs(fd), 1e-8)
            worst = max(worst, err)
    return worst
