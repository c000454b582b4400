"""Sparse neighborhood kernels.

Both graph convolutions reduce to a row-normalized gather over a CSR
neighborhood (``segment_mean``) and its adjoint scatter
(``segment_mean_transpose``).  These dominate the runtime of a training step,
so they are compiled with numba when available.  Set
``FACTORREC_DISABLE_NUMBA=1`` to force the pure-numpy path.
"""

import os

import numpy as np

_DISABLED = os.environ.get("FACTORREC_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes")

try:
    if _DISABLED:
        raise ImportError("numba disabled by environment")
    import numba

    HAS_NUMBA = True
except ImportError:
    numba = None
    HAS_NUMBA = False


def _segment_mean_numpy(indptr, indices, values):
    n_rows = len(indptr) - 1
    counts = np.diff(indptr)
    out = np.zeros((n_rows, values.shape[1]), dtype=values.dtype)
    if len(indices) == 0:
        return out
    nonempty = counts > 0
    gathered = values[indices]
    sums = np.add.reduceat(gathered, indptr[:-1][nonempty], axis=0)
    out[nonempty] = sums / counts[nonempty, None].astype(values.dtype)
    return out


def _segment_mean_transpose_numpy(indptr, indices, grad, n_targets):
    counts = np.diff(indptr)
    out = np.zeros((n_targets, grad.shape[1]), dtype=grad.dtype)
    if len(indices) == 0:
        return out
    rows = np.repeat(np.arange(len(counts)), counts)
    scaled = grad[rows] / counts[rows, None].astype(grad.dtype)
    np.add.at(out, indices, scaled)
    return out


if HAS_NUMBA:

    @numba.njit(cache=True)
    def _segment_mean_numba(indptr, indices, values):
        n_rows = indptr.shape[0] - 1
        width = values.shape[1]
        out = np.zeros((n_rows, width), dtype=values.dtype)
        for r in range(n_rows):
            start = indptr[r]
            stop = indptr[r + 1]
            if stop == start:
                continue
            for j in range(start, stop):
                src = indices[j]
                for f in range(width):
                    out[r, f] += values[src, f]
            inv = 1.0 / (stop - start)
            for f in range(width):
                out[r, f] *= inv
        return out

    @numba.njit(cache=True)
    def _segment_mean_transpose_numba(indptr, indices, grad, n_targets):
        n_rows = indptr.shape[0] - 1
        width = grad.shape[1]
        out = np.zeros((n_targets, width), dtype=grad.dtype)
        for r in range(n_rows):
            start = indptr[r]
            stop = indptr[r + 1]
            if stop == start:
                continue
            inv = 1.0 / (stop - start)
            for j in range(start, stop):
                dst = indices[j]
                for f in range(width):
                    out[dst, f] += grad[r, f] * inv
        return out


def segment_mean(indptr, indices, values, use_numba=None):
    """Mean of ``values`` rows over each CSR neighborhood; empty rows give 0.

    ``values`` is 2-D (n_sources, width); the result is (n_rows, width).
    """
    values = np.ascontiguousarray(values)
    if _pick(use_numba):
        return _segment_mean_numba(indptr, indices, values)
    return _segment_mean_numpy(indptr, indices, values)


def segment_mean_transpose(indptr, indices, grad, n_targets, use_numba=None):
    """Adjoint of :func:`segment_mean` with respect to ``values``."""
    grad = np.ascontiguousarray(grad)
    if _pick(use_numba):
        return _segment_mean_transpose_numba(indptr, indices, grad, n_targets)
    return _segment_mean_transpose_numpy(indptr, indices, grad, n_targets)


def _pick(use_numba):
    if use_numba is None:
        return HAS_NUMBA
    if use_numba and not HAS_NUMBA:
        raise RuntimeError("numba backend requested but unavailable")
    return bool(use_numba)


def backend_name():
    return "numba" if HAS_NUMBA else "numpy"
