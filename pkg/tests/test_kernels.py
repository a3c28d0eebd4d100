import importlib
import os

import numpy as np
import pytest

from mdil import _kernels_py, kernels

CASES = [(2, 3, 7, 6, 3, 1, 1), (1, 2, 8, 8, 3, 2, 1), (2, 4, 5, 5, 1, 1, 0),
         (1, 3, 9, 7, 4, 2, 1), (3, 1, 6, 6, 2, 2, 0), (1, 2, 4, 4, 3, 3, 2)]


def naive_im2col(x, kh, kw, stride, pad):
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    cols = np.zeros((c * kh * kw, n * ho * wo), x.dtype)
    for ci in range(c):
        for i in range(kh):
            for j in range(kw):
                row = (ci * kh + i) * kw + j
                col = 0
                for b in range(n):
                    for y in range(ho):
                        for xx in range(wo):
                            cols[row, col] = xp[b, ci, y * stride + i, xx * stride + j]
                            col += 1
    return cols


def compiled():
    try:
        return importlib.import_module("mdil._kernels")
    except ImportError:
        return None


@pytest.mark.parametrize("case", CASES)
def test_im2col_matches_naive_loops(case):
    n, c, h, w, k, s, p = case
    x = np.random.default_rng(0).standard_normal((n, c, h, w)).astype(np.float32)
    np.testing.assert_array_equal(_kernels_py.im2col(x, k, k, s, p), naive_im2col(x, k, k, s, p))


@pytest.mark.parametrize("case", CASES)
def test_col2im_is_adjoint_of_im2col(case):
    n, c, h, w, k, s, p = case
    rng = np.random.default_rng(1)
    x = rng.standard_normal((n, c, h, w))
    cols = _kernels_py.im2col(x, k, k, s, p)
    r = rng.standard_normal(cols.shape)
    lhs = (cols * r).sum()
    rhs = (x * _kernels_py.col2im(r, x.shape, k, k, s, p)).sum()
    assert lhs == pytest.approx(rhs, rel=1e-12)


@pytest.mark.skipif(compiled() is None, reason="compiled backend not built")
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
@pytest.mark.parametrize("case", CASES)
def test_backends_agree_bitwise(case, dtype):
    mod = compiled()
    n, c, h, w, k, s, p = case
    x = np.random.default_rng(2).standard_normal((n, c, h, w)).astype(dtype)
    a = _kernels_py.im2col(x, k, k, s, p)
    b = mod.im2col(x, k, k, s, p)
    assert a.dtype == b.dtype and np.array_equal(a, b)
    r = np.random.default_rng(3).standard_normal(a.shape).astype(dtype)
    assert np.array_equal(_kernels_py.col2im(r, x.shape, k, k, s, p), mod.col2im(r, x.shape, k, k, s, p))


def test_backend_is_reported():
    assert kernels.BACKEND in ("compiled", "python")
    if compiled() is not None:
        assert kernels.BACKEND == "compiled"


def test_env_var_forces_fallback():
    import subprocess
    import sys
    out = subprocess.run([sys.executable, "-c", "from mdil import kernels; print(kernels.BACKEND)"],
                         env={**os.environ, "MDIL_PURE_PYTHON": "1"}, capture_output=True, text=True)
    assert out.stdout.strip() == "python"
