"""Central finite-difference gradient checks."""
from __future__ import annotations

import numpy as np

from . import tensor as T


def check_gradients(loss_fn, params, eps=1e-6):
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn()`` must rebuild the graph from ``params`` on every call and
    return a scalar tensor. All params must be 64-bit. The denominator of
    each elementwise relative error is floored at 1e-3 of the parameter's
    largest analytic gradient entry, so entries whose true gradient is
    exactly zero are judged against the scale of that parameter rather than
    against cancellation noise.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps={eps} outside [1e-7, 1e-3]")
    for p in params:
        if p.dtype != np.float64:
            raise TypeError("gradient checks require float64 parameters")
    analytic = T.grad(loss_fn(), params)
    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        a = a.reshape(-1)
        floor = max(1e-3 * float(np.max(np.abs(a))) if a.size else 0.0, 1e-8)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            with T.no_grad():
                up = float(loss_fn().data)
            flat[i] = orig - eps
            with T.no_grad():
                down = float(loss_fn().data)
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise FloatingPointError(f"non-finite loss while perturbing element {i}")
            num = (up - down) / (2 * eps)
            err = abs(a[i] - num) / max(abs(a[i]), abs(num), floor)
            worst = max(worst, err)
    return worst


def _leaf(rng, shape, low=None):
    data = rng.standard_normal(shape)
    if low is not None:
        data = low + np.abs(data)
    return T.Tensor(data, requires_grad=True)


def _probe(out, rng):
    """Scalar ``sum(out * R)`` with a fixed random R, so every output entry matters."""
    w = rng.standard_normal(out.shape)
    if np.iscomplexobj(out.data):
        out = T.abs2(out)
    return T.tsum(out * w)


def _cases(rng):
    from . import nn, spectral
    from .fingerprint import FingerprintLossWeights, energy_loss, fingerprint_loss, magnitude_loss
    from .fingerprint import repetitive_loss, spectrum_loss

    a, b = _leaf(rng, (3, 4)), _leaf(rng, (3, 4))
    pos = _leaf(rng, (3, 4), low=0.5)
    m1, m2 = _leaf(rng, (2, 3, 4)), _leaf(rng, (4, 5))
    img = _leaf(rng, (2, 3, 6, 6))
    sq = _leaf(rng, (2, 1, 8, 8))
    cw, cb = _leaf(rng, (4, 3, 3, 3)), _leaf(rng, (4,))
    tw, tb = _leaf(rng, (3, 2, 4, 4)), _leaf(rng, (2,))
    lw, lb = _leaf(rng, (5, 4)), _leaf(rng, (5,))
    g = np.random.default_rng(rng.integers(1 << 31))

    def op(fn, *params):
        probe_rng = np.random.default_rng(g.integers(1 << 31))
        state = probe_rng.bit_generator.state

        def loss():
            probe_rng.bit_generator.state = state
            return _probe(fn(), probe_rng)
        return loss, list(params)

    def layer(module, x):
        module.to(np.float64)
        return op(lambda: module(x), x, *module.parameters())

    init = nn.Init(int(g.integers(1 << 31)), np.float64)
    weights = FingerprintLossWeights()
    return {
        "add": op(lambda: a + b, a, b),
        "sub": op(lambda: a - b, a, b),
        "mul": op(lambda: a * b, a, b),
        "div": op(lambda: a / pos, a, pos),
        "neg": op(lambda: T.neg(a), a),
        "scale": op(lambda: T.scale(a, 2.5), a),
        "square": op(lambda: T.square(a), a),
        "exp": op(lambda: T.exp(a), a),
        "log": op(lambda: T.log(pos), pos),
        "sqrt": op(lambda: T.sqrt(pos), pos),
        "clamp_min": op(lambda: T.clamp_min(a, 0.1), a),
        "clip": op(lambda: T.clip(a, -0.5, 0.5), a),
        "abs": op(lambda: T.abs(a), a),
        "relu": op(lambda: T.relu(a), a),
        "leaky_relu": op(lambda: T.leaky_relu(a), a),
        "tanh": op(lambda: T.tanh(a), a),
        "sigmoid": op(lambda: T.sigmoid(a), a),
        "log_sigmoid": op(lambda: T.log_sigmoid(a), a),
        "log_softmax": op(lambda: T.log_softmax(a, axis=-1), a),
        "softmax": op(lambda: T.softmax(a, axis=0), a),
        "sum": op(lambda: T.tsum(m1, axis=(0, 2), keepdims=True), m1),
        "mean": op(lambda: T.mean(m1, axis=1), m1),
        "max": op(lambda: T.tmax(m1, axis=2), m1),
        "max_all": op(lambda: T.tmax(m1), m1),
        "reshape": op(lambda: T.reshape(m1, (4, 6)), m1),
        "transpose": op(lambda: T.transpose(m1, (2, 0, 1)), m1),
        "getitem": op(lambda: T.getitem(m1, (slice(None), 1)), m1),
        "concat": op(lambda: T.concat([a, b], axis=1), a, b),
        "matmul": op(lambda: T.matmul(m1, m2), m1, m2),
        "linear": op(lambda: T.linear(a, lw, lb), a, lw, lb),
        "conv2d": op(lambda: T.conv2d(img, cw, cb, 1, 1), img, cw, cb),
        "conv2d_strided": op(lambda: T.conv2d(img, cw, cb, 2, 1), img, cw, cb),
        "conv_transpose2d": op(lambda: T.conv_transpose2d(img, tw, tb, 2, 1), img, tw, tb),
        "upsample_nearest": op(lambda: T.upsample_nearest(img), img),
        "max_pool2d": op(lambda: T.max_pool2d(img, 2), img),
        "avg_pool2d": op(lambda: T.avg_pool2d(img, 2), img),
        "batch_norm": layer(nn.BatchNorm2d(3, init), img),
        "instance_norm": layer(nn.InstanceNorm2d(3, init), img),
        "layer_norm": layer(nn.LayerNorm2d(3, init), img),
        "dft2": op(lambda: spectral.dft2(img), img),
        "dft2_real_imag": op(lambda: T.real(spectral.dft2(img)) + T.imag(spectral.dft2(img)), img),
        "low_pass": op(lambda: spectral.low_pass(spectral.dft2(img), 3), img),
        "high_pass": op(lambda: spectral.high_pass(spectral.dft2(img), 3), img),
        "magnitude_loss": op(lambda: magnitude_loss(sq), sq),
        "spectrum_loss": op(lambda: spectrum_loss(sq, 3), sq),
        "repetitive_loss": op(lambda: repetitive_loss(sq, 3), sq),
        "energy_loss": op(lambda: energy_loss(sq), sq),
        "fingerprint_loss": op(lambda: fingerprint_loss(sq, weights), sq),
    }


def gradient_suite(seed=0, eps=1e-6, names=None):
    """Max relative error per differentiable op, all in 64-bit."""
    cases = _cases(np.random.default_rng(seed))
    if names is not None:
        unknown = set(names) - set(cases)
        if unknown:
            raise KeyError(f"unknown ops {sorted(unknown)}")
        cases = {k: v for k, v in cases.items() if k in names}
    return {name: check_gradients(fn, params, eps) for name, (fn, params) in cases.items()}
