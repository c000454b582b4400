import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from factorrec import kernels


def random_csr(rng, n_rows, n_src, max_deg):
    deg = rng.integers(0, max_deg + 1, size=n_rows)
    ptr = np.concatenate([[0], np.cumsum(deg)]).astype(np.int64)
    idx = rng.integers(0, n_src, size=ptr[-1]).astype(np.int64)
    return ptr, idx


def brute_mean(ptr, idx, values):
    out = np.zeros((len(ptr) - 1, values.shape[1]))
    for r in range(len(ptr) - 1):
        nb = idx[ptr[r] : ptr[r + 1]]
        if len(nb):
            out[r] = sum(values[j] for j in nb) / len(nb)
    return out


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 12), st.integers(1, 9), st.integers(0, 6))
def test_backends_agree_with_brute_force(seed, n_rows, n_src, max_deg):
    rng = np.random.default_rng(seed)
    ptr, idx = random_csr(rng, n_rows, n_src, max_deg)
    vals = rng.normal(size=(n_src, 3))
    ref = brute_mean(ptr, idx, vals)
    np.testing.assert_allclose(kernels.segment_mean(ptr, idx, vals, use_numba=False), ref, atol=1e-12)
    if kernels.HAS_NUMBA:
        np.testing.assert_allclose(kernels.segment_mean(ptr, idx, vals, use_numba=True), ref, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 12), st.integers(1, 9), st.integers(0, 6))
def test_transpose_is_adjoint(seed, n_rows, n_src, max_deg):
    rng = np.random.default_rng(seed)
    ptr, idx = random_csr(rng, n_rows, n_src, max_deg)
    vals = rng.normal(size=(n_src, 2))
    grad = rng.normal(size=(n_rows, 2))
    backends = [False] + ([True] if kernels.HAS_NUMBA else [])
    for b in backends:
        fwd = kernels.segment_mean(ptr, idx, vals, use_numba=b)
        back = kernels.segment_mean_transpose(ptr, idx, grad, n_src, use_numba=b)
        # <A v, g> == <v, A^T g>
        assert np.sum(fwd * grad) == pytest.approx(np.sum(vals * back), abs=1e-10)


def test_float32_preserved():
    ptr = np.array([0, 2, 2], dtype=np.int64)
    idx = np.array([0, 1], dtype=np.int64)
    vals = np.ones((2, 4), dtype=np.float32)
    for b in [False] + ([True] if kernels.HAS_NUMBA else []):
        out = kernels.segment_mean(ptr, idx, vals, use_numba=b)
        assert out.dtype == np.float32
        np.testing.assert_array_equal(out, [[1] * 4, [0] * 4])


def test_env_flag_forces_numpy():
    code = "from factorrec import kernels; print(kernels.HAS_NUMBA, kernels.backend_name())"
    env = dict(os.environ, FACTORREC_DISABLE_NUMBA="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.split() == ["False", "numpy"]
