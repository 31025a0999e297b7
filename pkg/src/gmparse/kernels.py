"""Kernel backend selection.

The compiled extension is used when it imports; otherwise the numpy
versions in ``_pykernels`` are used. Set ``GMPARSE_PURE=1`` to force the
fallback.
"""
from __future__ import annotations

import os

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("GMPARSE_PURE", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:  # pragma: no cover - depends on build
        _impl = _pykernels

im2col = _impl.im2col
col2im = _impl.col2im
maxpool2d = _impl.maxpool2d
maxpool2d_backward = _impl.maxpool2d_backward
fft_last = _impl.fft_last


def use_backend(name):
    """Switch kernels at runtime (``"python"`` or ``"cython"``); for tests and benchmarks."""
    global im2col, col2im, maxpool2d, maxpool2d_backward, fft_last, BACKEND, _impl
    if name == "python":
        impl = _pykernels
    elif name == "cython":
        from . import _ckernels as impl
    else:
        raise ValueError(f"unknown backend {name!r}")
    _impl = impl
    im2col = impl.im2col
    col2im = impl.col2im
    maxpool2d = impl.maxpool2d
    maxpool2d_backward = impl.maxpool2d_backward
    fft_last = impl.fft_last
    BACKEND = name


def available_backends():
    names = ["python"]
    try:
        from . import _ckernels  # noqa: F401

        names.append("cython")
    except ImportError:  # pragma: no cover
        pass
    return names
