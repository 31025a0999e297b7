"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable operation returns a new :class:`Tensor` that remembers
its parents and a closure mapping the output gradient to parent gradients.
:func:`backward` walks that record in reverse topological order.

Complex tensors are supported for the spectral losses. For a real-valued
loss ``L`` the gradient stored for a complex tensor ``z`` is
``dL/dRe(z) + 1j * dL/dIm(z)``; under this convention the gradient of a
linear map is obtained with its conjugate transpose.
"""
from __future__ import annotations

import contextlib
import warnings

import numpy as np

from . import kernels


class TensorError(Exception):
    """Base class for errors raised by the autodiff engine."""


class ShapeError(TensorError, ValueError):
    def __init__(self, node, message):
        self.node = node
        super().__init__(f"[{node}] {message}")


class NonFiniteError(TensorError, FloatingPointError):
    def __init__(self, node, message="non-finite value in output"):
        self.node = node
        super().__init__(f"[{node}] {message}")


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled():
    return _GRAD_ENABLED


def _real_dtype(dtype):
    dtype = np.dtype(dtype)
    if dtype in (np.float32, np.complex64):
        return np.dtype(np.float32)
    return np.dtype(np.float64)


class Tensor:
    """N-d float (or complex) array participating in the autodiff graph."""

    __array_priority__ = 100
    __slots__ = ("data", "grad", "requires_grad", "name", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind not in "fc":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self.op = "leaf"
        self._parents = ()
        self._backward = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return self._backward is None

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self):
        label = self.name or self.op
        return f"Tensor({label}, shape={self.shape}, dtype={self.dtype})"

    def __len__(self):
        return self.shape[0]

    # -- operator sugar ------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def mT(self):
        return swap_last(self)

    def backward(self):
        return backward(self)


def as_tensor(value, like=None):
    if isinstance(value, Tensor):
        return value
    arr = np.asarray(value)
    if like is not None and arr.dtype.kind in "biuf":
        arr = arr.astype(_real_dtype(like.dtype))
    return Tensor(arr)


def _make(data, parents, backward_fn, op):
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(op)
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    out.op = op
    return out


def _unbroadcast(grad, shape):
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _fit(grad, parent):
    """Reduce a broadcast gradient to ``parent``'s shape and real-ness."""
    grad = _unbroadcast(grad, parent.shape)
    if parent.dtype.kind == "f" and np.iscomplexobj(grad):
        grad = grad.real
    return grad.astype(parent.dtype, copy=False)


def _binary(a, b, op):
    if not isinstance(a, Tensor):
        a = as_tensor(a, like=b)
    if not isinstance(b, Tensor):
        b = as_tensor(b, like=a)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, f"cannot broadcast {a.shape} with {b.shape}") from None
    return a, b


# -- elementwise arithmetic -------------------------------------------
def add(a, b):
    a, b = _binary(a, b, "add")

    def bw(g):
        return _fit(g, a), _fit(g, b)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b):
    a, b = _binary(a, b, "sub")

    def bw(g):
        return _fit(g, a), _fit(-g, b)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b):
    a, b = _binary(a, b, "mul")

    def bw(g):
        return _fit(g * np.conj(b.data), a), _fit(g * np.conj(a.data), b)

    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b):
    a, b = _binary(a, b, "div")
    if np.any(b.data == 0):
        raise NonFiniteError("div", "division by zero")
    out = a.data / b.data

    def bw(g):
        ga = g / np.conj(b.data)
        gb = -g * np.conj(out / b.data)
        return _fit(ga, a), _fit(gb, b)

    return _make(out, (a, b), bw, "div")


def neg(x):
    return _make(-x.data, (x,), lambda g: (-g,), "neg")


def scale(x, c):
    """Multiply by a Python scalar."""
    return _make(x.data * c, (x,), lambda g: (g * np.conj(c),), "scale")


def square(x):
    if np.iscomplexobj(x.data):
        raise TensorError("square of a complex tensor; use abs2")
    return _make(x.data * x.data, (x,), lambda g: (2.0 * x.data * g,), "square")


def exp(x):
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x):
    if np.any(x.data <= 0):
        raise NonFiniteError("log", "log of non-positive value")
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def sqrt(x):
    if np.any(x.data < 0):
        raise NonFiniteError("sqrt", "sqrt of negative value")
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (g / (2.0 * out),), "sqrt")


def clamp_min(x, lo):
    mask = x.data >= lo
    out = np.where(mask, x.data, np.asarray(lo, dtype=x.dtype))
    return _make(out, (x,), lambda g: (g * mask,), "clamp_min")


def clip(x, lo, hi):
    mask = (x.data >= lo) & (x.data <= hi)
    out = np.clip(x.data, lo, hi)
    return _make(out, (x,), lambda g: (g * mask,), "clip")


def abs(x):  # noqa: A001 - mirrors numpy naming
    mag = np.abs(x.data)
    if np.iscomplexobj(x.data):
        safe = np.where(mag > 0, mag, 1.0)
        unit = np.where(mag > 0, x.data / safe, 0.0)
    else:
        unit = np.sign(x.data)

    def bw(g):
        return (g * unit,)

    return _make(mag, (x,), bw, "abs")


def abs2(x):
    """Elementwise squared modulus ``|x|**2`` (real output)."""
    out = (x.data * np.conj(x.data)).real.astype(_real_dtype(x.dtype))
    return _make(out, (x,), lambda g: (2.0 * g * x.data,), "abs2")


def real(x):
    return _make(x.data.real.copy(), (x,), lambda g: (g.astype(x.dtype),), "real")


def imag(x):
    return _make(x.data.imag.copy(), (x,), lambda g: (1j * g,), "imag")


# -- activations ---------------------------------------------------------
def relu(x):
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def leaky_relu(x, slope=0.2):
    factor = np.where(x.data > 0, 1.0, slope).astype(x.dtype)
    return _make(x.data * factor, (x,), lambda g: (g * factor,), "leaky_relu")


def tanh(x):
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def _sigmoid_np(v):
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def sigmoid(x):
    out = _sigmoid_np(x.data)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def log_sigmoid(x):
    v = x.data
    out = np.minimum(v, 0) - np.log1p(np.exp(-np.abs(v)))
    sig_neg = _sigmoid_np(-v)
    return _make(out, (x,), lambda g: (g * sig_neg,), "log_sigmoid")


def log_softmax(x, axis=-1):
    v = x.data
    shifted = v - v.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def bw(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), bw, "log_softmax")


def softmax(x, axis=-1):
    return exp(log_softmax(x, axis))


# -- reductions -------------------------------------------------------
def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x, axis=None, keepdims=False):
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(out), (x,), bw, "sum")


def mean(x, axis=None, keepdims=False):
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    out = x.data.mean(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return _make(np.asarray(out), (x,), bw, "mean")


def tmax(x, axis=None, keepdims=False):
    """Max reduction; the gradient goes to the first maximal entry (row-major)."""
    if np.iscomplexobj(x.data):
        raise TensorError("max of a complex tensor is undefined")
    if axis is None:
        flat = x.data.reshape(-1)
        idx = int(np.argmax(flat))
        out = flat[idx]
        if keepdims:
            out = np.reshape(out, (1,) * x.ndim)

        def bw(g):
            gx = np.zeros(flat.shape, dtype=x.dtype)
            gx[idx] = np.sum(g)
            return (gx.reshape(x.shape),)

        return _make(np.asarray(out), (x,), bw, "max")
    ax = axis % x.ndim
    idx = np.expand_dims(np.argmax(x.data, axis=ax), ax)
    out = np.take_along_axis(x.data, idx, axis=ax)

    def bw_axis(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        gx = np.zeros(x.shape, dtype=x.dtype)
        np.put_along_axis(gx, idx, g, axis=ax)
        return (gx,)

    return _make(out if keepdims else np.squeeze(out, ax), (x,), bw_axis, "max")


# -- shape manipulation -------------------------------------------------
def reshape(x, shape):
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", f"cannot reshape {x.shape} to {shape}") from None
    return _make(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def flatten(x):
    """Collapse all but the leading (batch) axis."""
    return reshape(x, (x.shape[0], -1))


def transpose(x, axes=None):
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def swap_last(x):
    """Transpose of the trailing two axes (matrix transpose, batched)."""
    return _make(np.swapaxes(x.data, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),), "swap_last")


def getitem(x, index):
    out = x.data[index]

    def bw(g):
        gx = np.zeros(x.shape, dtype=np.result_type(x.dtype, g.dtype))
        np.add.at(gx, index, g)
        return (gx,)

    return _make(np.array(out), (x,), bw, "getitem")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError("concat", str(exc)) from None
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, tuple(tensors), bw, "concat")


# -- linear algebra and layers ----------------------------------------
def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul", "operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", f"inner dimensions differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = np.matmul(g, np.conj(np.swapaxes(b.data, -1, -2)))
        gb = np.matmul(np.conj(np.swapaxes(a.data, -1, -2)), g)
        return _fit(ga, a), _fit(gb, b)

    return _make(out, (a, b), bw, "matmul")


def linear(x, weight, bias=None):
    """``x @ weight.T + bias`` with weight shaped (out, in)."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError("linear", f"input features {x.shape[-1]} != weight in-features {weight.shape[1]}")
    out = matmul(x, swap_last(weight))
    return out if bias is None else add(out, bias)


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """2-D cross-correlation. x: (N, C, H, W); weight: (O, C, kh, kw)."""
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError("conv2d", f"input {x.shape} incompatible with weight {weight.shape}")
    n, c, h, w = x.shape
    o, _, kh, kw = weight.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError("conv2d", f"kernel {kh}x{kw} larger than padded input {h}x{w}")
    cols = kernels.im2col(x.data, kh, kw, stride, padding)
    wmat = weight.data.reshape(o, -1)
    out = np.matmul(wmat, cols).reshape(n, o, ho, wo)
    if bias is not None:
        out = out + bias.data.reshape(1, o, 1, 1)

    def bw(g):
        gm = g.reshape(n, o, ho * wo)
        gw = np.tensordot(gm, cols, axes=([0, 2], [0, 2])).reshape(weight.shape)
        gx = None
        if x.requires_grad:
            dcols = np.matmul(wmat.T, gm)
            gx = kernels.col2im(dcols, x.shape, kh, kw, stride, padding)
        grads = (gx, gw)
        if bias is not None:
            grads += (g.sum(axis=(0, 2, 3)),)
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, bw, "conv2d")


def conv_transpose2d(x, weight, bias=None, stride=2, padding=0):
    """Transposed convolution. x: (N, Cin, H, W); weight: (Cin, Cout, k, k)."""
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[0]:
        raise ShapeError("conv_transpose2d", f"input {x.shape} incompatible with weight {weight.shape}")
    n, cin, h, w = x.shape
    _, cout, kh, kw = weight.shape
    ho = (h - 1) * stride - 2 * padding + kh
    wo = (w - 1) * stride - 2 * padding + kw
    wmat = weight.data.reshape(cin, -1)
    xm = x.data.reshape(n, cin, h * w)
    cols = np.matmul(wmat.T, xm)
    out = kernels.col2im(cols, (n, cout, ho, wo), kh, kw, stride, padding)
    if bias is not None:
        out = out + bias.data.reshape(1, cout, 1, 1)

    def bw(g):
        dcols = kernels.im2col(np.ascontiguousarray(g), kh, kw, stride, padding)
        gx = np.matmul(wmat, dcols).reshape(x.shape)
        gw = np.tensordot(xm, dcols, axes=([0, 2], [0, 2])).reshape(weight.shape)
        grads = (gx, gw)
        if bias is not None:
            grads += (g.sum(axis=(0, 2, 3)),)
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, bw, "conv_transpose2d")


def upsample_nearest(x, factor=2):
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def bw(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return _make(out, (x,), bw, "upsample_nearest")


def _check_pool(x, k, op):
    if x.ndim != 4 or x.shape[2] % k or x.shape[3] % k:
        raise ShapeError(op, f"spatial size {x.shape[2:]} not divisible by {k}")


def max_pool2d(x, k=2):
    _check_pool(x, k, "max_pool2d")
    out, idx = kernels.maxpool2d(x.data, k)

    def bw(g):
        return (kernels.maxpool2d_backward(np.ascontiguousarray(g), idx, x.shape, k),)

    return _make(out, (x,), bw, "max_pool2d")


def avg_pool2d(x, k=2):
    _check_pool(x, k, "avg_pool2d")
    n, c, h, w = x.shape
    out = x.data.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))

    def bw(g):
        return (np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k),)

    return _make(out, (x,), bw, "avg_pool2d")


# -- reverse pass -------------------------------------------------------
class GradientMap(dict):
    """Mapping parameter tensor -> gradient array.

    ``disconnected`` lists queried parameters the loss does not depend on;
    their gradient is reported as zeros.
    """

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.disconnected = []


def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss, params=None, accumulate=True):
    """Reverse-mode sweep from a scalar ``loss``.

    Returns a :class:`GradientMap` over ``params`` (default: every leaf with
    ``requires_grad`` reachable from the loss). With ``accumulate`` the
    gradients are also added into each leaf's ``.grad``.
    """
    if loss.size != 1:
        raise ShapeError(loss.op, f"loss must be scalar, got shape {loss.shape}")
    grads = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    leaves = {}
    if loss.requires_grad:
        for node in reversed(_topo_order(loss)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                leaves[id(node)] = (node, g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                pg = _fit(pg, parent)
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg
    result = GradientMap()
    if params is None:
        params = [n for n, _ in leaves.values()]
    for p in params:
        hit = leaves.get(id(p))
        if hit is None:
            g = np.zeros(p.shape, dtype=p.dtype)
            result.disconnected.append(p)
        else:
            g = hit[1]
        result[p] = g
        if accumulate and p.requires_grad:
            p.grad = g.copy() if p.grad is None else p.grad + g
    if result.disconnected:
        warnings.warn(f"{len(result.disconnected)} parameter(s) not connected to the loss", stacklevel=2)
    return result


def grad(loss, params):
    """Gradients of ``loss`` w.r.t. ``params`` as a list, without touching ``.grad``."""
    gm = backward(loss, params, accumulate=False)
    return [gm[p] for p in params]
