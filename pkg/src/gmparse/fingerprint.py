"""Fingerprint estimation network and the four fingerprint constraints.

The network maps an image batch ``(N, C, H, W)`` to a fingerprint of the
same shape. The constraints are evaluated per image and channel, averaged
over channels and then over the batch.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import nn
from . import spectral
from . import tensor as T


@dataclass
class FenConfig:
    height: int = 16
    width: int = 16
    channels: int = 1
    stem_convs: int = 2
    blocks: int = 8
    features: int = 64

    def to_dict(self):
        return asdict(self)


def default_k(height, width):
    """Window size scaled from k=50 at 128 px, keeping the same ratio."""
    return max(1, int(round(50 / 128 * min(height, width))))


@dataclass
class FingerprintLossWeights:
    lambda1: float = 0.05
    lambda2: float = 0.001
    lambda3: float = 0.1
    lambda4: float = 1.0
    k: int | None = None

    def window(self, height, width):
        return default_k(height, width) if self.k is None else self.k

    def validate(self):
        for name in ("lambda1", "lambda2", "lambda3", "lambda4"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")


class FingerprintNet(nn.Module):
    """DnCNN-style estimator: conv+ReLU stem, conv+BN+ReLU blocks, conv out."""

    def __init__(self, config=None, seed=0, dtype=np.float32):
        self.config = config or FenConfig()
        cfg = self.config
        init = nn.Init(seed, dtype)
        layers = [nn.Conv2d(cfg.channels, cfg.features, 3, init=init), nn.Activation("relu")]
        for _ in range(cfg.stem_convs - 1):
            layers += [nn.Conv2d(cfg.features, cfg.features, 3, init=init), nn.Activation("relu")]
        for _ in range(cfg.blocks):
            layers += [
                nn.Conv2d(cfg.features, cfg.features, 3, init=init),
                nn.BatchNorm2d(cfg.features, init=init),
                nn.Activation("relu"),
            ]
        self.body = nn.Sequential(*layers)
        self.out = nn.Conv2d(cfg.features, cfg.channels, 3, init=init)

    def forward(self, image):
        image = T.as_tensor(image)
        cfg = self.config
        expected = (cfg.channels, cfg.height, cfg.width)
        if image.ndim != 4 or tuple(image.shape[1:]) != expected:
            raise T.ShapeError("fen", f"expected (N, {cfg.channels}, {cfg.height}, {cfg.width}), got {image.shape}")
        return self.out(self.body(image))


def fen_forward(image, config, weights):
    """Functional form: build a network from ``config``, load ``weights``, run it."""
    net = FingerprintNet(config)
    net.load_state_dict(weights)
    net.eval()
    return net(image)


def _as_batch(F):
    F = T.as_tensor(F)
    if F.ndim == 2:
        F = T.reshape(F, (1, 1) + F.shape)
    elif F.ndim == 3:
        F = T.reshape(F, (1,) + F.shape)
    return F


def _reduce(per_image_channel, reduce):
    per_image = T.mean(per_image_channel, axis=1)
    return T.mean(per_image) if reduce else per_image


def magnitude_loss(F, reduce=True):
    """Sum of squared fingerprint entries."""
    F = _as_batch(F)
    return _reduce(T.tsum(T.square(F), axis=(2, 3)), reduce)


def spectrum_loss(F, k, reduce=True):
    """Energy of the centered k x k low-frequency window."""
    F = _as_batch(F)
    low = spectral.low_pass(spectral.dft2(F), k)
    return _reduce(T.tsum(T.abs2(low), axis=(2, 3)), reduce)


def repetitive_loss(F, k, reduce=True):
    """Negative peak magnitude outside the low-frequency window.

    Ties at the max resolve to the first bin in row-major order.
    """
    F = _as_batch(F)
    n, c, h, w = F.shape
    if not 1 <= k < min(h, w):
        raise ValueError(f"k={k} outside [1, {min(h, w) - 1}]")
    mag = T.abs(spectral.high_pass(spectral.dft2(F), k))
    peak = T.tmax(T.reshape(mag, (n, c, h * w)), axis=2)
    return _reduce(T.neg(peak), reduce)


def energy_loss(F, reduce=True):
    """Squared norm of spectrum minus its transpose (square inputs only)."""
    F = _as_batch(F)
    if F.shape[-1] != F.shape[-2]:
        raise T.ShapeError("energy_loss", f"square spectrum required, got {F.shape[-2:]}")
    S = spectral.dft2(F)
    return _reduce(T.tsum(T.abs2(S - S.mT), axis=(2, 3)), reduce)


def fingerprint_loss_terms(F, weights=None, reduce=True):
    weights = weights or FingerprintLossWeights()
    weights.validate()
    F = _as_batch(F)
    k = weights.window(*F.shape[-2:])
    return {
        "magnitude": magnitude_loss(F, reduce),
        "spectrum": spectrum_loss(F, k, reduce),
        "repetitive": repetitive_loss(F, k, reduce),
        "energy": energy_loss(F, reduce),
    }


def combine_terms(terms, weights):
    return (
        terms["magnitude"] * weights.lambda1
        + terms["spectrum"] * weights.lambda2
        + terms["repetitive"] * weights.lambda3
        + terms["energy"] * weights.lambda4
    )


def fingerprint_loss(F, weights=None, reduce=True):
    """Weighted sum of magnitude, spectrum, repetitive and energy losses."""
    weights = weights or FingerprintLossWeights()
    return combine_terms(fingerprint_loss_terms(F, weights, reduce), weights)


def checkerboard(h, w, amplitude=1.0):
    """(-1)^(i+j) pattern; all energy sits in the Nyquist bin."""
    i, j = np.indices((h, w))
    return amplitude * np.where((i + j) % 2 == 0, 1.0, -1.0)


def peak_high_frequency(F, k):
    """Largest high-pass bin magnitude of a single 2-D fingerprint (numpy)."""
    spec = spectral.center(spectral.fft2(np.asarray(F, dtype=np.float64)))
    h, w = spec.shape[-2:]
    return float(np.abs(spec * spectral.high_pass_mask(h, w, k)).max())

