"""Deepfake detection and closed-set attribution heads on top of the FEN.

Both heads read only the fingerprint produced by the FEN, never the image.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .fingerprint import FenConfig, FingerprintLossWeights, FingerprintNet, fingerprint_loss
from .metrics import binomial_acceptance
from .optim import Adam


class HeadError(ValueError):
    pass


class _ConvHead(nn.Module):
    """Convolutions (pooling after every second one) followed by two FC layers."""

    def __init__(self, convs, classes, height, width, channels, hidden, init):
        layers = []
        cin, h, w = channels, height, width
        for i, cout in enumerate(convs):
            layers += [nn.Conv2d(cin, cout, 3, init=init), nn.Activation("relu")]
            if i % 2 == 1 and h % 2 == 0 and w % 2 == 0 and h > 2:
                layers.append(nn.MaxPool2d(2))
                h, w = h // 2, w // 2
            cin = cout
        self.body = nn.Sequential(*layers)
        self.fc1 = nn.Linear(cin * h * w, hidden, init=init)
        self.fc2 = nn.Linear(hidden, classes, init=init)
        self.input_shape = (channels, height, width)
        self.classes = classes

    def forward(self, fingerprint):
        fingerprint = T.as_tensor(fingerprint)
        if tuple(fingerprint.shape[1:]) != self.input_shape:
            raise T.ShapeError("head", f"expected fingerprint shape {self.input_shape}, got {fingerprint.shape[1:]}")
        return self.fc2(T.relu(self.fc1(T.flatten(self.body(fingerprint)))))


class DetectorHead(_ConvHead):
    """Five convolutions and two fully connected layers to 2 logits (genuine, fake)."""

    def __init__(self, fen_config, init, widths=(8, 8, 16, 16, 16), hidden=32):
        if len(widths) != 5:
            raise HeadError("detector head has exactly five convolutions")
        super().__init__(widths, 2, fen_config.height, fen_config.width, fen_config.channels, hidden, init)
        self.widths, self.hidden = tuple(widths), hidden


class AttributionHead(_ConvHead):
    """Two convolutions and two fully connected layers to one logit per class."""

    def __init__(self, fen_config, classes, init, widths=(8, 16), hidden=32):
        if len(widths) != 2:
            raise HeadError("attribution head has exactly two convolutions")
        if classes < 2:
            raise HeadError("need at least two classes")
        super().__init__(widths, classes, fen_config.height, fen_config.width, fen_config.channels, hidden, init)
        self.widths, self.hidden = tuple(widths), hidden


@dataclass
class AppTrainConfig:
    epochs: int = 5
    batch_size: int = 32
    fen_lr: float = 1e-4
    head_lr: float = 1e-3
    use_fingerprint: bool = True
    loss_weights: FingerprintLossWeights = field(default_factory=FingerprintLossWeights)


def _ce(logits, labels):
    logp = T.log_softmax(logits, axis=-1)
    onehot = np.eye(logits.shape[-1], dtype=logits.dtype)[labels]
    return T.mean(T.neg(T.tsum(logp * onehot, axis=-1)))


class FingerprintClassifier:
    """FEN followed by a classification head; the head sees only the fingerprint."""

    def __init__(self, fen, head, config=None, freeze_fen=False):
        self.fen = fen
        self.head = head
        self.config = config or AppTrainConfig()
        self.freeze_fen = freeze_fen
        self.fen_opt = Adam(fen.parameters(), lr=self.config.fen_lr)
        self.head_opt = Adam(head.parameters(), lr=self.config.head_lr)
        self.history = []

    @property
    def classes(self):
        return self.head.classes

    def logits(self, images):
        return self.head(self.fen(images))

    def losses(self, images, labels, fp_mask):
        """CE over all samples plus J_f averaged over samples where ``fp_mask`` is 1."""
        F = self.fen(images)
        ce = _ce(self.head(F), labels)
        comps = {"ce": ce}
        total = ce
        fp_mask = np.asarray(fp_mask, dtype=F.dtype)
        if self.config.use_fingerprint and fp_mask.sum() > 0:
            per = fingerprint_loss(F, self.config.loss_weights, reduce=False)
            comps["per_sample_jf"] = per
            jf = T.tsum(per * fp_mask) * (1.0 / float(fp_mask.sum()))
            comps["J_f"] = jf
            total = total + jf
        comps["total"] = total
        return comps

    def train_step(self, images, labels, fp_mask):
        self.fen.train(not self.freeze_fen)
        self.head.train()
        if self.freeze_fen:
            with T.no_grad():
                fingerprint = T.Tensor(self.fen(T.Tensor(images)).data)
            comps = {"ce": _ce(self.head(fingerprint), np.asarray(labels, dtype=int))}
            comps["total"] = comps["ce"]
        else:
            comps = self.losses(T.Tensor(images), np.asarray(labels, dtype=int), fp_mask)
        if not np.isfinite(comps["total"].data):
            raise FloatingPointError("non-finite loss in head training")
        params = self.head.parameters() if self.freeze_fen else self.fen.parameters() + self.head.parameters()
        self.fen_opt.zero_grad()
        self.head_opt.zero_grad()
        T.backward(comps["total"], params)
        if not self.freeze_fen:
            self.fen_opt.step()
        self.head_opt.step()
        out = {k: float(v.data) for k, v in comps.items() if k != "per_sample_jf"}
        if "per_sample_jf" in comps:
            out["jf_weight"] = np.asarray(fp_mask, dtype=float).tolist()
        return out

    def probabilities(self, images, batch_size=256):
        self.fen.eval()
        self.head.eval()
        out = []
        with T.no_grad():
            for i in range(0, len(images), batch_size):
                out.append(T.softmax(self.logits(T.Tensor(images[i:i + batch_size])), axis=-1).data)
        if not out:
            return np.zeros((0, self.classes))
        return np.concatenate(out).astype(np.float64)


def _fit(model, images, labels, fp_mask, seed, require_both=False):
    rng = np.random.default_rng(seed)
    cfg = model.config
    n = len(images)
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            tries = 0
            while require_both and len(np.unique(labels[idx])) < 2 and tries < 100:
                idx = rng.choice(n, size=len(idx), replace=False)
                tries += 1
            model.history.append(model.train_step(images[idx], labels[idx], fp_mask[idx]))
    return model


def train_detector(genuine, fake, fen_config=None, config=None, seed=0):
    """End-to-end FEN + detector training; the fingerprint losses apply to fake images only."""
    genuine = np.asarray(genuine, dtype=np.float32)
    fake = np.asarray(fake, dtype=np.float32)
    if len(genuine) == 0 or len(fake) == 0:
        raise HeadError("both genuine and fake images are required")
    fen_config = fen_config or FenConfig(blocks=2, features=16)
    init = nn.Init(seed + 500)
    model = FingerprintClassifier(FingerprintNet(fen_config, seed=seed), DetectorHead(fen_config, init), config)
    images = np.concatenate([genuine, fake])
    labels = np.concatenate([np.zeros(len(genuine), int), np.ones(len(fake), int)])
    return _fit(model, images, labels, labels.astype(np.float64), seed, require_both=True)


def detect(model, images):
    """Probability that each image is fake."""
    images = np.asarray(images, dtype=np.float32)
    if images.ndim != 4:
        raise T.ShapeError("detect", f"expected (N, C, H, W), got {images.shape}")
    return model.probabilities(images)[:, 1]


def train_attribution(images_by_class, fen_config=None, config=None, seed=0, fen=None, train_fen=True):
    """Closed-set classifier; class i is ``images_by_class[i]`` (class 0 = genuine by convention)."""
    if len(images_by_class) < 2 or any(len(x) == 0 for x in images_by_class):
        raise HeadError("every class needs at least one image")
    fen_config = fen_config or FenConfig(blocks=2, features=16)
    init = nn.Init(seed + 700)
    fen = fen or FingerprintNet(fen_config, seed=seed)
    model = FingerprintClassifier(fen, AttributionHead(fen_config, len(images_by_class), init), config,
                                  freeze_fen=not train_fen)
    images = np.concatenate(images_by_class).astype(np.float32)
    labels = np.concatenate([np.full(len(x), i) for i, x in enumerate(images_by_class)])
    return _fit(model, images, labels, np.zeros(len(labels)), seed)


def attribute(model, images):
    """(labels, probabilities) for each image."""
    probs = model.probabilities(np.asarray(images, dtype=np.float32))
    return probs.argmax(axis=1), probs


def attribution_accuracy(model, images, labels):
    labels = np.asarray(labels, dtype=int)
    if labels.size and (labels.min() < 0 or labels.max() >= model.classes):
        raise HeadError(f"unknown class at evaluation; closed set has {model.classes} classes")
    pred, _ = attribute(model, images)
    return float(np.mean(pred == labels))


def save_classifier(model, path, extra=None):
    kind = "detector" if isinstance(model.head, DetectorHead) else "attribution"
    state = {f"fen.{k}": v for k, v in model.fen.state_dict().items()}
    state.update({f"head.{k}": v for k, v in model.head.state_dict().items()})
    meta = {"kind": kind, "fen": asdict(model.fen.config), "classes": model.classes,
            "widths": list(model.head.widths), "hidden": model.head.hidden}
    meta.update(extra or {})
    return save_checkpoint(path, state, "float32", optimizer={"fen_lr": model.config.fen_lr,
                                                              "head_lr": model.config.head_lr}, extra=meta)


def load_classifier(path):
    """Rebuild a detector or attribution model; returns ``(model, extra)``."""
    header, state = load_checkpoint(path)
    meta = header.get("extra", {})
    fen_config = FenConfig(**meta.get("fen", {}))
    init = nn.Init(0)
    if meta.get("kind") == "detector":
        head = DetectorHead(fen_config, init, tuple(meta["widths"]), meta["hidden"])
    elif meta.get("kind") == "attribution":
        head = AttributionHead(fen_config, meta["classes"], init, tuple(meta["widths"]), meta["hidden"])
    else:
        raise HeadError(f"{path}: not a detector or attribution checkpoint")
    fen = FingerprintNet(fen_config)
    fen.load_state_dict({k[4:]: v for k, v in state.items() if k.startswith("fen.")})
    head.load_state_dict({k[5:]: v for k, v in state.items() if k.startswith("head.")})
    return FingerprintClassifier(fen, head), meta


@dataclass
class ProbeResult:
    accuracy: float
    correct: int
    n: int
    chance: float
    interval: tuple

    @property
    def within_chance(self):
        return self.interval[0] <= self.correct <= self.interval[1]

    def to_dict(self):
        return {"accuracy": self.accuracy, "correct": self.correct, "n": self.n, "chance": self.chance,
                "interval": list(self.interval), "within_chance": self.within_chance}


def content_probe(fen, train_by_family, test_by_family, config=None, seed=0):
    """Classify content family from frozen FEN fingerprints with a shallow head.

    Returns held-out accuracy and whether it lies in the 95% binomial
    interval of chance.
    """
    config = config or AppTrainConfig()
    model = train_attribution(train_by_family, fen.config, config, seed=seed, fen=fen, train_fen=False)
    images = np.concatenate(test_by_family)
    labels = np.concatenate([np.full(len(x), i) for i, x in enumerate(test_by_family)])
    pred, _ = attribute(model, images)
    correct = int(np.sum(pred == labels))
    chance = 1.0 / len(test_by_family)
    return ProbeResult(correct / len(labels), correct, len(labels), chance, binomial_acceptance(len(labels), chance))
