"""Agreement between the numba and pure-numpy kernel paths."""

import subprocess
import sys

import numpy as np
import pytest

from diffprobe import backend

RNG = np.random.default_rng(7)

HAS_NUMBA = True
try:
    from diffprobe.backend import _numba_kernels  # noqa: F401
except Exception:  # pragma: no cover
    HAS_NUMBA = False

needs_numba = pytest.mark.skipif(not HAS_NUMBA, reason="numba unavailable")


@pytest.fixture
def both_backends():
    original = backend.active_backend()
    yield
    backend.set_backend(original)


def _run_both(fn, both):
    backend.set_backend("numpy")
    a = fn().copy()
    backend.set_backend("numba")
    b = fn().copy()
    return a, b


@needs_numba
@pytest.mark.parametrize("k,stride,pad", [(3, 1, 1), (1, 1, 0), (3, 2, 1), (5, 1, 2)])
def test_im2col_parity(both_backends, k, stride, pad):
    x = RNG.standard_normal((2, 3, 9, 7)).astype(np.float32)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = (9 + 2 * pad - k) // stride + 1
    ow = (7 + 2 * pad - k) // stride + 1
    a, b = _run_both(lambda: backend.im2col(xp, k, k, stride, oh, ow), both_backends)
    np.testing.assert_array_equal(a, b)


@needs_numba
@pytest.mark.parametrize("k,stride,pad", [(3, 1, 1), (3, 2, 1)])
def test_col2im_parity(both_backends, k, stride, pad):
    oh = (9 + 2 * pad - k) // stride + 1
    ow = (7 + 2 * pad - k) // stride + 1
    g = RNG.standard_normal((2, 3 * k * k, oh * ow)).astype(np.float64)
    a, b = _run_both(
        lambda: backend.col2im(g, 3, 9 + 2 * pad, 7 + 2 * pad, k, k, stride, oh, ow),
        both_backends)
    np.testing.assert_allclose(a, b, rtol=0, atol=0)


@needs_numba
@pytest.mark.parametrize("size,out", [((8, 8), (4, 4)), ((4, 6), (9, 5)), ((1, 5), (3, 3))])
def test_bilinear_parity(both_backends, size, out):
    x = RNG.standard_normal((2, 2, *size)).astype(np.float64)
    a, b = _run_both(lambda: backend.bilinear_resize(x, *out), both_backends)
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)
    g = RNG.standard_normal((2, 2, *out)).astype(np.float64)
    a, b = _run_both(lambda: backend.bilinear_resize_grad(g, *size), both_backends)
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)


def test_bilinear_identity_when_same_size():
    x = RNG.standard_normal((1, 2, 5, 5))
    y = backend.bilinear_resize(x, 5, 5)
    np.testing.assert_allclose(y, x, rtol=1e-12, atol=1e-14)


def test_im2col_matches_naive_loops():
    x = RNG.standard_normal((2, 2, 5, 5)).astype(np.float64)
    k, pad, stride = 3, 1, 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = ow = 5
    got = backend.im2col(xp, k, k, stride, oh, ow).copy()
    want = np.zeros_like(got)
    for b in range(2):
        r = 0
        for c in range(2):
            for i in range(k):
                for j in range(k):
                    p = 0
                    for y in range(oh):
                        for xcol in range(ow):
                            want[b, r, p] = xp[b, c, y + i, xcol + j]
                            p += 1
                    r += 1
    np.testing.assert_array_equal(got, want)


def test_scratch_reuses_buffer():
    a = backend.scratch((4, 4), np.float32, "t")
    b = backend.scratch((4, 4), np.float32, "t")
    assert a is b
    c = backend.scratch((4, 4), np.float64, "t")
    assert c is not a
    backend.clear_scratch()
    d = backend.scratch((4, 4), np.float32, "t")
    assert d is not a


def test_set_backend_rejects_unknown():
    with pytest.raises(ValueError):
        backend.set_backend("cuda")


def test_env_flag_selects_numpy_path():
    code = ("import os; os.environ['DIFFPROBE_NO_NUMBA']='1'; "
            "from diffprobe import backend; print(backend.active_backend())")
    out = subprocess.run([sys.executable, "-c", code], capture_output=True, text=True)
    assert out.stdout.strip() == "numpy"
