"""Layers and a small module system on top of :mod:`gmparse.tensor`."""
from __future__ import annotations

from collections import OrderedDict

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Init:
    """Deterministic per-layer RNG streams derived from one master seed."""

    def __init__(self, seed, dtype=np.float32):
        self.seed = int(seed)
        self.dtype = np.dtype(dtype)
        self._count = 0

    def rng(self):
        seq = np.random.SeedSequence(self.seed, spawn_key=(self._count,))
        self._count += 1
        return np.random.default_rng(seq)

    def kaiming_uniform(self, shape, fan_in):
        bound = np.sqrt(6.0 / fan_in)
        return Tensor(self.rng().uniform(-bound, bound, size=shape).astype(self.dtype), requires_grad=True)

    def zeros(self, shape):
        return Tensor(np.zeros(shape, dtype=self.dtype), requires_grad=True)

    def ones(self, shape):
        return Tensor(np.ones(shape, dtype=self.dtype), requires_grad=True)


class Module:
    training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):  # pragma: no cover - abstract
        raise NotImplementedError

    def _children(self):
        for key, value in vars(self).items():
            if isinstance(value, (Module, Tensor)):
                yield key, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, (Module, Tensor)):
                        yield f"{key}.{i}", item

    def named_parameters(self, prefix=""):
        out = OrderedDict()
        for key, value in self._children():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    out[name] = value
            else:
                out.update(value.named_parameters(name + "."))
        return out

    def parameters(self):
        return list(self.named_parameters().values())

    def named_buffers(self, prefix=""):
        out = OrderedDict()
        for key, value in self._children():
            if isinstance(value, Module):
                out.update(value.named_buffers(f"{prefix}{key}."))
        for key, value in getattr(self, "_buffers", {}).items():
            out[f"{prefix}{key}"] = value
        return out

    def modules(self):
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def train(self, mode=True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def state_dict(self):
        state = OrderedDict((k, v.data) for k, v in self.named_parameters().items())
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state):
        params = self.named_parameters()
        for name, p in params.items():
            if name not in state:
                raise KeyError(f"missing parameter {name!r}")
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise T.ShapeError(name, f"checkpoint shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype).copy()
        for m_name, module in self._named_modules():
            for key in getattr(module, "_buffers", {}):
                full = f"{m_name}{key}"
                if full in state:
                    module._buffers[key] = np.asarray(state[full]).copy()

    def _named_modules(self, prefix=""):
        yield prefix, self
        for key, value in self._children():
            if isinstance(value, Module):
                yield from value._named_modules(f"{prefix}{key}.")

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def to(self, dtype):
        dtype = np.dtype(dtype)
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        for m in self.modules():
            for key, buf in getattr(m, "_buffers", {}).items():
                m._buffers[key] = buf.astype(dtype)
        return self

    def num_parameters(self):
        return int(sum(p.size for p in self.parameters()))


class Sequential(Module):
    def __init__(self, *layers):
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x

    def __iter__(self):
        return iter(self.layers)

    def __len__(self):
        return len(self.layers)


class Conv2d(Module):
    def __init__(self, cin, cout, k=3, stride=1, padding=None, init=None, bias=True):
        init = init or Init(0)
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        self.weight = init.kaiming_uniform((cout, cin, k, k), cin * k * k)
        self.bias = init.zeros((cout,)) if bias else None

    @property
    def out_channels(self):
        return self.weight.shape[0]

    def forward(self, x):
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose2d(Module):
    def __init__(self, cin, cout, k=4, stride=2, padding=1, init=None, bias=True):
        init = init or Init(0)
        self.stride = stride
        self.padding = padding
        self.weight = init.kaiming_uniform((cin, cout, k, k), cin * k * k // (stride * stride))
        self.bias = init.zeros((cout,)) if bias else None

    @property
    def out_channels(self):
        return self.weight.shape[1]

    def forward(self, x):
        return T.conv_transpose2d(x, self.weight, self.bias, self.stride, self.padding)


class Linear(Module):
    def __init__(self, fin, fout, init=None, bias=True):
        init = init or Init(0)
        self.weight = init.kaiming_uniform((fout, fin), fin)
        self.bias = init.zeros((fout,)) if bias else None

    def forward(self, x):
        return T.linear(x, self.weight, self.bias)


class BatchNorm2d(Module):
    """Batch norm with running statistics (momentum 0.1) for eval mode."""

    def __init__(self, channels, init=None, momentum=0.1, eps=1e-5):
        init = init or Init(0)
        self.momentum = momentum
        self.eps = eps
        self.gamma = init.ones((1, channels, 1, 1))
        self.beta = init.zeros((1, channels, 1, 1))
        self._buffers = {
            "running_mean": np.zeros((1, channels, 1, 1), dtype=init.dtype),
            "running_var": np.ones((1, channels, 1, 1), dtype=init.dtype),
        }

    def forward(self, x):
        if self.training:
            mu = T.mean(x, axis=(0, 2, 3), keepdims=True)
            centered = x - mu
            var = T.mean(T.square(centered), axis=(0, 2, 3), keepdims=True)
            m = self.momentum
            count = x.shape[0] * x.shape[2] * x.shape[3]
            unbiased = var.data * count / max(count - 1, 1)
            self._buffers["running_mean"] = ((1 - m) * self._buffers["running_mean"] + m * mu.data).astype(x.dtype)
            self._buffers["running_var"] = ((1 - m) * self._buffers["running_var"] + m * unbiased).astype(x.dtype)
            xhat = centered / T.sqrt(var + self.eps)
        else:
            rm = self._buffers["running_mean"].astype(x.dtype)
            rv = self._buffers["running_var"].astype(x.dtype)
            xhat = (x - rm) * (1.0 / np.sqrt(rv + self.eps)).astype(x.dtype)
        return xhat * self.gamma + self.beta


class InstanceNorm2d(Module):
    def __init__(self, channels, init=None, eps=1e-5):
        init = init or Init(0)
        self.eps = eps
        self.gamma = init.ones((1, channels, 1, 1))
        self.beta = init.zeros((1, channels, 1, 1))

    def forward(self, x):
        mu = T.mean(x, axis=(2, 3), keepdims=True)
        centered = x - mu
        var = T.mean(T.square(centered), axis=(2, 3), keepdims=True)
        return centered / T.sqrt(var + self.eps) * self.gamma + self.beta


class LayerNorm2d(Module):
    """Normalizes over (C, H, W) per sample, per-channel affine."""

    def __init__(self, channels, init=None, eps=1e-5):
        init = init or Init(0)
        self.eps = eps
        self.gamma = init.ones((1, channels, 1, 1))
        self.beta = init.zeros((1, channels, 1, 1))

    def forward(self, x):
        mu = T.mean(x, axis=(1, 2, 3), keepdims=True)
        centered = x - mu
        var = T.mean(T.square(centered), axis=(1, 2, 3), keepdims=True)
        return centered / T.sqrt(var + self.eps) * self.gamma + self.beta


class Activation(Module):
    def __init__(self, kind):
        self.kind = kind

    def forward(self, x):
        if self.kind == "relu":
            return T.relu(x)
        if self.kind == "leaky_relu":
            return T.leaky_relu(x, 0.2)
        if self.kind == "tanh":
            return T.tanh(x)
        if self.kind == "sigmoid":
            return T.sigmoid(x)
        if self.kind == "scaled_sigmoid":
            return T.sigmoid(x) * 2.0 - 1.0
        if self.kind == "clip":
            return T.clip(x, -1.0, 1.0)
        if self.kind == "identity":
            return x
        raise ValueError(f"unknown activation {self.kind!r}")


class MaxPool2d(Module):
    def __init__(self, k=2):
        self.k = k

    def forward(self, x):
        return T.max_pool2d(x, self.k)


class AvgPool2d(Module):
    def __init__(self, k=2):
        self.k = k

    def forward(self, x):
        return T.avg_pool2d(x, self.k)


class Upsample(Module):
    def __init__(self, factor=2):
        self.factor = factor

    def forward(self, x):
        return T.upsample_nearest(x, self.factor)


class Flatten(Module):
    def forward(self, x):
        return T.flatten(x)


def mlp(sizes, init, final_activation=None):
    """Fully connected stack with ReLU between layers."""
    layers = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        layers.append(Linear(a, b, init=init))
        if i < len(sizes) - 2:
            layers.append(Activation("relu"))
    if final_activation:
        layers.append(Activation(final_activation))
    return Sequential(*layers)
