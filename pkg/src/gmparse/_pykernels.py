"""Pure numpy implementations of the hot kernels.

These are the reference versions; ``gmparse._ckernels`` mirrors every
function here with the same signature and is preferred when it imports.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided


def im2col(x, kh, kw, stride, pad):
    """Unfold ``(N, C, H, W)`` into ``(N, C*kh*kw, Ho*Wo)`` patch columns."""
    n, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    hp, wp = h + 2 * pad, w + 2 * pad
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    x = np.ascontiguousarray(x)
    sn, sc, sh, sw = x.strides
    win = as_strided(
        x,
        shape=(n, c, kh, kw, ho, wo),
        strides=(sn, sc, sh, sw, sh * stride, sw * stride),
        writeable=False,
    )
    return win.reshape(n, c * kh * kw, ho * wo)


def col2im(cols, shape, kh, kw, stride, pad):
    """Adjoint of :func:`im2col`: scatter-add columns back into an image."""
    n, c, h, w = shape
    hp, wp = h + 2 * pad, w + 2 * pad
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    cols = cols.reshape(n, c, kh, kw, ho, wo)
    out = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    for i in range(kh):
        i_end = i + stride * ho
        for j in range(kw):
            j_end = j + stride * wo
            out[:, :, i:i_end:stride, j:j_end:stride] += cols[:, :, i, j]
    if pad:
        out = out[:, :, pad:pad + h, pad:pad + w]
    return np.ascontiguousarray(out)


def maxpool2d(x, k):
    """Non-overlapping ``k x k`` max pool; returns (out, argmax-in-window)."""
    n, c, h, w = x.shape
    ho, wo = h // k, w // k
    win = x[:, :, :ho * k, :wo * k].reshape(n, c, ho, k, wo, k)
    win = win.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, k * k)
    # argmax returns the first maximal entry, which fixes the tie rule
    idx = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), idx.astype(np.int64)


def maxpool2d_backward(grad, idx, shape, k):
    n, c, h, w = shape
    ho, wo = grad.shape[2], grad.shape[3]
    win = np.zeros((n, c, ho, wo, k * k), dtype=grad.dtype)
    np.put_along_axis(win, idx[..., None], grad[..., None], axis=-1)
    win = win.reshape(n, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5)
    out = np.zeros(shape, dtype=grad.dtype)
    out[:, :, :ho * k, :wo * k] = win.reshape(n, c, ho * k, wo * k)
    return out


def _bitrev(n):
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


def fft_last(x, inverse=False):
    """Unnormalized radix-2 FFT along the last axis (length must be 2**p).

    ``inverse=True`` flips the twiddle sign but does not divide by n.
    """
    n = x.shape[-1]
    lead = x.shape[:-1]
    out = np.asarray(x, dtype=np.complex128)[..., _bitrev(n)]
    sign = 1.0 if inverse else -1.0
    m = 1
    while m < n:
        tw = np.exp(sign * 2j * np.pi * np.arange(m) / (2 * m))
        blk = out.reshape(*lead, n // (2 * m), 2, m)
        even = blk[..., 0, :]
        odd = blk[..., 1, :] * tw
        out = np.concatenate([even + odd, even - odd], axis=-1).reshape(*lead, n)
        m *= 2
    return out
