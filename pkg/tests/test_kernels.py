import os
import subprocess
import sys

import numpy as np
import pytest

from gmparse import _pykernels as P
from gmparse import kernels
from gmparse import tensor as T

needs_cython = pytest.mark.skipif("cython" not in kernels.available_backends(),
                                  reason="compiled kernels not built")


@pytest.fixture
def restore_backend():
    before = kernels.BACKEND
    yield
    kernels.use_backend(before)


def C():
    from gmparse import _ckernels
    return _ckernels


def dense_im2col(x, kh, kw, stride, pad):
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    n, c, hp, wp = xp.shape
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1
    out = np.zeros((n, c, kh, kw, ho, wo), x.dtype)
    for i in range(ho):
        for j in range(wo):
            out[..., i, j] = xp[:, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
    return out.reshape(n, c * kh * kw, ho * wo)


@pytest.mark.parametrize("kh,kw,stride,pad", [(3, 3, 1, 1), (4, 4, 2, 1), (1, 1, 1, 0), (3, 2, 2, 0)])
def test_im2col_matches_loops(kh, kw, stride, pad):
    x = np.random.default_rng(0).standard_normal((2, 3, 7, 6))
    np.testing.assert_array_equal(P.im2col(x, kh, kw, stride, pad), dense_im2col(x, kh, kw, stride, pad))


@pytest.mark.parametrize("kh,stride,pad", [(3, 1, 1), (4, 2, 1), (3, 2, 0)])
def test_col2im_is_adjoint(kh, stride, pad):
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 2, 8, 8))
    cols = P.im2col(x, kh, kh, stride, pad)
    y = rng.standard_normal(cols.shape)
    lhs = np.sum(cols * y)
    rhs = np.sum(x * P.col2im(y, x.shape, kh, kh, stride, pad))
    assert abs(lhs - rhs) < 1e-10 * max(1.0, abs(lhs))


def test_maxpool_first_max_wins_ties():
    x = np.ones((1, 1, 2, 2))
    out, idx = P.maxpool2d(x, 2)
    assert out.item() == 1.0 and idx.item() == 0
    g = P.maxpool2d_backward(np.full((1, 1, 1, 1), 5.0), idx, x.shape, 2)
    assert g.reshape(-1).tolist() == [5.0, 0.0, 0.0, 0.0]


def test_fft_last_matches_numpy_fft():
    x = np.random.default_rng(2).standard_normal((3, 16)) + 1j * np.random.default_rng(3).standard_normal((3, 16))
    np.testing.assert_allclose(P.fft_last(x), np.fft.fft(x), atol=1e-12)
    np.testing.assert_allclose(P.fft_last(x, inverse=True), np.fft.ifft(x) * 16, atol=1e-12)


@needs_cython
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_backends_agree_on_im2col_col2im(dtype):
    rng = np.random.default_rng(4)
    x = rng.standard_normal((2, 3, 9, 8)).astype(dtype)
    for kh, stride, pad in [(3, 1, 1), (4, 2, 1), (2, 2, 0)]:
        a, b = P.im2col(x, kh, kh, stride, pad), C().im2col(x, kh, kh, stride, pad)
        assert a.dtype == b.dtype
        np.testing.assert_array_equal(a, b)
        cols = rng.standard_normal(a.shape).astype(dtype)
        np.testing.assert_allclose(P.col2im(cols, x.shape, kh, kh, stride, pad),
                                   C().col2im(cols, x.shape, kh, kh, stride, pad), rtol=1e-6, atol=1e-6)


@needs_cython
def test_backends_agree_on_maxpool():
    x = np.random.default_rng(5).standard_normal((2, 3, 8, 8)).astype(np.float32)
    x[0, 0, :2, :2] = 1.0  # a tie
    (oa, ia), (ob, ib) = P.maxpool2d(x, 2), C().maxpool2d(x, 2)
    np.testing.assert_array_equal(oa, ob)
    np.testing.assert_array_equal(ia, ib)
    g = np.random.default_rng(6).standard_normal(oa.shape).astype(np.float32)
    np.testing.assert_array_equal(P.maxpool2d_backward(g, ia, x.shape, 2), C().maxpool2d_backward(g, ib, x.shape, 2))


@needs_cython
@pytest.mark.parametrize("n", [1, 2, 8, 64])
def test_backends_agree_on_fft(n):
    rng = np.random.default_rng(n)
    x = rng.standard_normal((4, n)) + 1j * rng.standard_normal((4, n))
    for inverse in (False, True):
        np.testing.assert_allclose(P.fft_last(x, inverse), C().fft_last(x, inverse), rtol=0, atol=1e-10)


@needs_cython
def test_use_backend_switches_tensor_ops(restore_backend):
    rng = np.random.default_rng(7)
    x = T.Tensor(rng.standard_normal((1, 2, 6, 6)), requires_grad=True)
    w = T.Tensor(rng.standard_normal((3, 2, 3, 3)), requires_grad=True)
    outs = {}
    for name in ("python", "cython"):
        kernels.use_backend(name)
        assert kernels.BACKEND == name
        y = T.conv2d(x, w, padding=1)
        outs[name] = (y.data, *T.grad(T.tsum(T.square(y)), [x, w]))
    for a, b in zip(outs["python"], outs["cython"]):
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)


def test_unknown_backend_rejected():
    with pytest.raises(ValueError):
        kernels.use_backend("fortran")


def test_pure_environment_forces_fallback():
    env = dict(os.environ, GMPARSE_PURE="1")
    proc = subprocess.run([sys.executable, "-c", "from gmparse import kernels; print(kernels.BACKEND)"],
                          capture_output=True, text=True, env=env)
    assert proc.stdout.strip() == "python"
