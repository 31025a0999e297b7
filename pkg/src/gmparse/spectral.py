"""Centered 2-D Fourier transforms and the center-window frequency masks.

Conventions: the forward transform is unnormalized and the DC bin is moved
to ``(H // 2, W // 2)``. Transforms act on the trailing two axes, so a
batch ``(N, C, H, W)`` is transformed per image and channel.
"""
from __future__ import annotations

import numpy as np

from . import kernels
from . import tensor as T
from .tensor import Tensor


def _is_pow2(n):
    return n >= 1 and n & (n - 1) == 0


def dft_matrix(n, inverse=False):
    sign = 1.0 if inverse else -1.0
    k = np.arange(n)
    return np.exp(sign * 2j * np.pi * np.outer(k, k) / n)


def _transform_axis(x, axis, inverse):
    x = np.moveaxis(np.asarray(x, dtype=np.complex128), axis, -1)
    n = x.shape[-1]
    if _is_pow2(n):
        out = kernels.fft_last(x, inverse=inverse)
    else:
        out = x @ dft_matrix(n, inverse).T
    return np.moveaxis(out, -1, axis)


def fft2(x):
    """Unnormalized, unshifted 2-D DFT over the last two axes."""
    return _transform_axis(_transform_axis(x, -1, False), -2, False)


def ifft2(x):
    """Inverse of :func:`fft2` (includes the 1/(H*W) factor)."""
    h, w = np.shape(x)[-2:]
    return _transform_axis(_transform_axis(x, -1, True), -2, True) / (h * w)


def center(x):
    """Move the DC bin from index 0 to (H//2, W//2)."""
    h, w = np.shape(x)[-2:]
    return np.roll(x, (h // 2, w // 2), axis=(-2, -1))


def uncenter(x):
    h, w = np.shape(x)[-2:]
    return np.roll(x, (-(h // 2), -(w // 2)), axis=(-2, -1))


def _complex_dtype(dtype):
    return np.complex64 if np.dtype(dtype) == np.float32 else np.complex128


def dft2(image):
    """Centered spectrum of a real tensor (differentiable).

    The backward pass applies the adjoint: un-center, conjugate-transpose
    DFT, keep the real part.
    """
    image = T.as_tensor(image)
    if image.ndim < 2 or image.size == 0:
        raise T.ShapeError("dft2", f"need a non-empty array with >= 2 dims, got {image.shape}")
    h, w = image.shape[-2:]
    if h < 2 or w < 2:
        raise T.ShapeError("dft2", f"spatial size must be >= 2, got {h}x{w}")
    if np.iscomplexobj(image.data):
        raise T.TensorError("dft2 expects a real input")
    cdt = _complex_dtype(image.dtype)
    out = center(fft2(image.data)).astype(cdt)

    def bw(g):
        g = uncenter(np.asarray(g, dtype=np.complex128))
        adj = np.conj(fft2(np.conj(g)))
        return (adj.real.astype(image.dtype),)

    return T._make(out, (image,), bw, "dft2")


def idft2(spectrum, tol=1e-4):
    """Real image from a centered spectrum (numpy in, numpy out)."""
    spec = spectrum.data if isinstance(spectrum, Tensor) else np.asarray(spectrum)
    if spec.size == 0:
        raise ValueError("empty spectrum")
    img = ifft2(uncenter(spec))
    scale = max(float(np.abs(img).max()), 1e-12)
    residue = float(np.abs(img.imag).max()) / scale
    if residue > tol:
        raise ValueError(f"spectrum is not Hermitian: imaginary residue {residue:.2e}")
    return img.real.copy()


def window_bounds(n, k):
    """Inclusive-exclusive index range of the centered length-k window."""
    lo = n // 2 - k // 2
    hi = n // 2 + (k + 1) // 2
    return lo, hi


def low_pass_mask(h, w, k):
    if not 1 <= k <= min(h, w):
        raise ValueError(f"k={k} outside [1, {min(h, w)}]")
    mask = np.zeros((h, w), dtype=bool)
    r0, r1 = window_bounds(h, k)
    c0, c1 = window_bounds(w, k)
    mask[r0:r1, c0:c1] = True
    return mask


def high_pass_mask(h, w, k):
    return ~low_pass_mask(h, w, k)


def _apply_mask(spectrum, mask):
    if isinstance(spectrum, Tensor):
        return spectrum * mask.astype(T._real_dtype(spectrum.dtype))
    spectrum = np.asarray(spectrum)
    return np.where(mask, spectrum, np.zeros((), dtype=spectrum.dtype))


def low_pass(spectrum, k):
    """Keep the centered k x k window, zero the rest."""
    h, w = np.shape(spectrum.data if isinstance(spectrum, Tensor) else spectrum)[-2:]
    return _apply_mask(spectrum, low_pass_mask(h, w, k))


def high_pass(spectrum, k):
    """Zero the centered k x k window."""
    h, w = np.shape(spectrum.data if isinstance(spectrum, Tensor) else spectrum)[-2:]
    return _apply_mask(spectrum, high_pass_mask(h, w, k))


def spectrum_magnitude_image(spectrum, log_scale=True, normalize=True):
    """Per-bin modulus (optionally ``log1p``), rescaled to [0, 1] if asked."""
    spec = spectrum.data if isinstance(spectrum, Tensor) else np.asarray(spectrum)
    mag = np.abs(spec).astype(np.float64)
    if log_scale:
        mag = np.log1p(mag)
    if normalize:
        top = mag.max() if mag.size else 0.0
        mag = mag / top if top > 0 else np.zeros_like(mag)
    return mag
