"""Parsing network: fingerprint -> architecture hyperparameters and loss types.

A shared convolutional encoder produces a 512-D feature. Separate heads
regress the 9 continuous parameters, classify the 6 discrete ones, and
predict loss types hierarchically: 3 coarse groups gate 8 fine types.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .fingerprint import FenConfig, FingerprintLossWeights, FingerprintNet, combine_terms, fingerprint_loss_terms
from .optim import Adam

CONTINUOUS_NAMES = (
    "num_layers",
    "num_conv_layers",
    "num_fc_layers",
    "num_pool_layers",
    "num_norm_layers",
    "num_filters",
    "num_parameters",
    "num_blocks",
    "layers_per_block",
)
DISCRETE_NAMES = (
    "norm_type",
    "block_nonlinearity",
    "last_nonlinearity",
    "upsampling",
    "skip_connection",
    "downsampling",
)
DISCRETE_CARDINALITY = (4, 4, 4, 2, 2, 2)
FINE_NAMES = ("L1", "L2", "MSE", "MMD", "WGAN", "KL", "Adversarial", "CE")
COARSE_NAMES = ("pixel", "discriminator", "classification")
# fine loss index -> coarse group index
FINE_GROUP = (0, 0, 0, 0, 1, 1, 1, 2)
LOG_EPS = 1e-12


def coarse_from_fine(fine):
    fine = np.asarray(fine, dtype=int)
    coarse = np.zeros(fine.shape[:-1] + (3,), dtype=int)
    for m, g in enumerate(FINE_GROUP):
        coarse[..., g] |= fine[..., m]
    return coarse


@dataclass
class ArchitectureTargets:
    continuous_raw: np.ndarray
    discrete: np.ndarray
    continuous_norm: np.ndarray | None = None

    def __post_init__(self):
        self.continuous_raw = np.asarray(self.continuous_raw, dtype=np.float64)
        self.discrete = np.asarray(self.discrete, dtype=int)
        if self.continuous_raw.shape[-1] != 9 or self.discrete.shape[-1] != 6:
            raise ValueError("architecture targets need 9 continuous and 6 discrete values")
        if np.any(self.discrete < 0) or np.any(self.discrete >= np.array(DISCRETE_CARDINALITY)):
            raise ValueError(f"discrete labels {self.discrete} outside cardinalities {DISCRETE_CARDINALITY}")
        if self.continuous_norm is not None:
            self.continuous_norm = np.asarray(self.continuous_norm, dtype=np.float64)
            if np.any(self.continuous_norm < 0) or np.any(self.continuous_norm > 1):
                raise ValueError("normalized continuous targets must lie in [0, 1]")


@dataclass
class LossTargets:
    fine: np.ndarray
    coarse: np.ndarray = None

    def __post_init__(self):
        self.fine = np.asarray(self.fine, dtype=int)
        if self.fine.shape[-1] != 8 or not np.all(np.isin(self.fine, (0, 1))):
            raise ValueError("fine loss targets must be 8 binary flags")
        if not np.all(self.fine.sum(axis=-1) >= 1):
            raise ValueError("every model needs at least one loss flag")
        derived = coarse_from_fine(self.fine)
        if self.coarse is None:
            self.coarse = derived
        else:
            self.coarse = np.asarray(self.coarse, dtype=int)
            if not np.array_equal(self.coarse, derived):
                raise ValueError("coarse flags must equal the group-OR of the fine flags")


@dataclass
class PnConfig:
    height: int = 16
    width: int = 16
    channels: int = 1
    conv_channels: tuple = (16, 32, 64, 128, 128)
    feature_dim: int = 512
    head_hidden: int = 64

    def to_dict(self):
        d = asdict(self)
        d["conv_channels"] = list(self.conv_channels)
        return d


@dataclass
class ClassWeights:
    """Per classifier name, an array with one weight per class."""

    weights: dict = field(default_factory=dict)

    def __getitem__(self, name):
        return self.weights[name]

    @classmethod
    def uniform(cls, cardinalities):
        return cls({name: np.ones(m) for name, m in cardinalities.items()})

    def to_dict(self):
        return {k: [float(x) for x in v] for k, v in self.weights.items()}


def compute_class_weights(labels, cardinalities):
    """``w[c] = N / N_c`` per classifier from training-split labels.

    ``labels`` maps classifier name -> integer label array.
    """
    out = {}
    for name, values in labels.items():
        values = np.asarray(values, dtype=int)
        m = cardinalities[name]
        if values.size == 0:
            raise ValueError(f"classifier {name!r} has no training labels")
        counts = np.bincount(values, minlength=m)
        if counts.size > m:
            raise ValueError(f"classifier {name!r} has labels outside 0..{m - 1}")
        missing = [c for c in range(m) if counts[c] == 0]
        if missing:
            raise ValueError(
                f"classifier {name!r}: classes {missing} absent from the training split; "
                "redesign the split so every class is represented"
            )
        out[name] = values.size / counts.astype(np.float64)
    return ClassWeights(out)


def parser_cardinalities():
    cards = dict(zip(DISCRETE_NAMES, DISCRETE_CARDINALITY))
    cards.update({f"coarse:{n}": 2 for n in COARSE_NAMES})
    cards.update({f"fine:{n}": 2 for n in FINE_NAMES})
    return cards


def parser_class_weights(discrete, fine, weighted=True):
    """Class weights for all 17 classifiers from per-image training labels."""
    discrete = np.asarray(discrete, dtype=int)
    fine = np.asarray(fine, dtype=int)
    coarse = coarse_from_fine(fine)
    labels = {name: discrete[:, i] for i, name in enumerate(DISCRETE_NAMES)}
    labels.update({f"coarse:{n}": coarse[:, i] for i, n in enumerate(COARSE_NAMES)})
    labels.update({f"fine:{n}": fine[:, i] for i, n in enumerate(FINE_NAMES)})
    cards = parser_cardinalities()
    if not weighted:
        return ClassWeights.uniform(cards)
    return compute_class_weights(labels, cards)


# -- losses -------------------------------------------------------------
def continuous_loss(pred, target):
    """Squared L2 distance, summed over the 9 parameters, mean over the batch."""
    pred, target = T.as_tensor(pred), T.as_tensor(target, like=T.as_tensor(pred))
    if pred.shape[-1] != target.shape[-1]:
        raise ValueError(f"length mismatch: {pred.shape[-1]} vs {target.shape[-1]}")
    sq = T.tsum(T.square(pred - target), axis=-1)
    return T.mean(sq) if sq.ndim else sq


def _log_prob_sigmoid(logits):
    return T.clamp_min(T.log_sigmoid(logits), math.log(LOG_EPS))


def discrete_loss(logits, targets, weights, mode="sigmoid"):
    """Weighted cross-entropy over the 6 architecture classifiers.

    ``logits``: list of (N, M_k) tensors; ``targets``: (N, 6) int labels.
    ``mode="sigmoid"`` scores the true class with log(sigmoid(logit));
    ``mode="softmax"`` uses log-softmax instead.
    """
    targets = np.atleast_2d(np.asarray(targets, dtype=int))
    if len(logits) != len(DISCRETE_NAMES):
        raise ValueError(f"expected {len(DISCRETE_NAMES)} classifiers, got {len(logits)}")
    total = None
    for k, (name, card) in enumerate(zip(DISCRETE_NAMES, DISCRETE_CARDINALITY)):
        lg = T.as_tensor(logits[k])
        if lg.ndim == 1:
            lg = T.reshape(lg, (1, -1))
        if lg.shape[-1] != card:
            raise ValueError(f"classifier {name!r}: {lg.shape[-1]} logits, cardinality {card}")
        onehot = np.eye(card)[targets[:, k]]
        w = np.asarray(weights[name], dtype=np.float64)
        coef = (onehot * w).astype(lg.dtype)
        logp = _log_prob_sigmoid(lg) if mode == "sigmoid" else T.log_softmax(lg, axis=-1)
        term = T.neg(T.tsum(logp * coef, axis=-1))
        total = term if total is None else total + term
    return T.mean(total)


def _binary_ce_logits(logits, targets, weights):
    """-(w1*y*log s(x) + w0*(1-y)*log s(-x)) per element, summed over the last axis."""
    pos = np.stack([np.asarray(w, dtype=np.float64)[1] for w in weights]) * targets
    neg = np.stack([np.asarray(w, dtype=np.float64)[0] for w in weights]) * (1 - targets)
    lp = _log_prob_sigmoid(logits)
    ln = _log_prob_sigmoid(T.neg(logits))
    return T.neg(T.tsum(lp * pos.astype(logits.dtype) + ln * neg.astype(logits.dtype), axis=-1))


def coarse_loss(logits, targets, weights):
    """Weighted sigmoid cross-entropy over the 3 coarse loss groups."""
    logits = T.as_tensor(logits)
    if logits.ndim == 1:
        logits = T.reshape(logits, (1, -1))
    targets = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    if logits.shape[-1] != 3 or targets.shape[-1] != 3:
        raise ValueError("coarse loss needs 3 logits and 3 targets")
    w = weights if isinstance(weights, (list, tuple)) else [weights[f"coarse:{n}"] for n in COARSE_NAMES]
    return T.mean(_binary_ce_logits(logits, targets, w))


def hierarchical_compose(coarse_logits, fine_logits):
    """Fine probability times the probability of its coarse group."""
    coarse_logits = T.as_tensor(coarse_logits)
    fine_logits = T.as_tensor(fine_logits)
    gate = T.getitem(T.sigmoid(coarse_logits), (Ellipsis, list(FINE_GROUP)))
    return gate * T.sigmoid(fine_logits)


def fine_loss(composed, targets, weights):
    """Weighted cross-entropy on composed probabilities, logs clamped at 1e-12."""
    composed = T.as_tensor(composed)
    if composed.ndim == 1:
        composed = T.reshape(composed, (1, -1))
    targets = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    w = weights if isinstance(weights, (list, tuple)) else [weights[f"fine:{n}"] for n in FINE_NAMES]
    pos = (np.stack([np.asarray(x, dtype=np.float64)[1] for x in w]) * targets).astype(composed.dtype)
    neg = (np.stack([np.asarray(x, dtype=np.float64)[0] for x in w]) * (1 - targets)).astype(composed.dtype)
    lp = T.log(T.clamp_min(composed, LOG_EPS))
    ln = T.log(T.clamp_min(1.0 - composed, LOG_EPS))
    return T.mean(T.neg(T.tsum(lp * pos + ln * neg, axis=-1)))


def architecture_loss(j_continuous, j_discrete):
    return j_continuous + j_discrete


def parsing_loss(j_arch, j_coarse, j_fine, gammas=(5.0, 5.0, 5.0)):
    g1, g2, g3 = gammas
    return j_arch * g1 + j_coarse * g2 + j_fine * g3


# -- network ------------------------------------------------------------
class Encoder(nn.Module):
    """Five conv+pool+ReLU blocks, then two FC layers to the feature vector.

    Pooling is skipped once the map is 1 pixel wide so any input size
    down to 1x1 works.
    """

    def __init__(self, config, init):
        self.config = config
        blocks = []
        cin, h, w = config.channels, config.height, config.width
        for cout in config.conv_channels:
            pool = h % 2 == 0 and w % 2 == 0 and h >= 2 and w >= 2
            blocks.append(nn.Conv2d(cin, cout, 3, init=init))
            blocks.append(nn.MaxPool2d(2) if pool else nn.Sequential())
            blocks.append(nn.Activation("relu"))
            if pool:
                h, w = h // 2, w // 2
            cin = cout
        self.conv = nn.Sequential(*blocks)
        self.flat_dim = cin * h * w
        self.fc1 = nn.Linear(self.flat_dim, config.feature_dim, init=init)
        self.fc2 = nn.Linear(config.feature_dim, config.feature_dim, init=init)

    def forward(self, x):
        h = T.flatten(self.conv(x))
        return T.relu(self.fc2(T.relu(self.fc1(h))))


class ParsingNetwork(nn.Module):
    def __init__(self, config=None, seed=1, dtype=np.float32):
        self.config = config or PnConfig()
        cfg = self.config
        init = nn.Init(seed, dtype)
        hid = cfg.head_hidden
        self.encoder = Encoder(cfg, init)
        self.continuous = nn.mlp([cfg.feature_dim, hid, 9], init)
        self.discrete = [nn.mlp([cfg.feature_dim, hid, hid, m], init) for m in DISCRETE_CARDINALITY]
        self.coarse = nn.mlp([cfg.feature_dim, hid, hid, 3], init)
        self.fine = nn.mlp([cfg.feature_dim, hid, hid, 8], init)

    def forward(self, fingerprint):
        fingerprint = T.as_tensor(fingerprint)
        cfg = self.config
        if fingerprint.ndim != 4 or tuple(fingerprint.shape[1:]) != (cfg.channels, cfg.height, cfg.width):
            raise T.ShapeError("parser", f"fingerprint shape {fingerprint.shape} does not match config")
        feat = self.encoder(fingerprint)
        return {
            "feature": feat,
            "continuous": self.continuous(feat),
            "discrete": [head(feat) for head in self.discrete],
            "coarse": self.coarse(feat),
            "fine": self.fine(feat),
        }


def encoder_forward(fingerprint, config, weights):
    net = ParsingNetwork(config)
    net.load_state_dict(weights)
    return net.encoder(T.as_tensor(fingerprint))


@dataclass
class Prediction:
    continuous: np.ndarray  # (N, 9) normalized
    discrete: np.ndarray  # (N, 6) labels
    discrete_probs: list  # per classifier (N, M_k) scores in [0, 1]
    coarse: np.ndarray  # (N, 3) probabilities
    fine: np.ndarray  # (N, 8) composed probabilities

    @property
    def fine_flags(self):
        return (self.fine > 0.5).astype(int)

    @property
    def coarse_flags(self):
        return (self.coarse > 0.5).astype(int)

    def __len__(self):
        return len(self.continuous)

    def subset(self, idx):
        return Prediction(
            self.continuous[idx],
            self.discrete[idx],
            [p[idx] for p in self.discrete_probs],
            self.coarse[idx],
            self.fine[idx],
        )


@dataclass
class ParserTrainConfig:
    fen_lr: float = 1e-4
    pn_lr: float = 1e-3
    gammas: tuple = (5.0, 5.0, 5.0)
    use_fingerprint: bool = True
    discrete_mode: str = "sigmoid"
    loss_weights: FingerprintLossWeights = field(default_factory=FingerprintLossWeights)


class ModelParser:
    """FEN + PN trained end-to-end on fingerprint and parsing objectives."""

    def __init__(self, fen, pn, class_weights, config=None):
        self.fen = fen
        self.pn = pn
        self.class_weights = class_weights
        self.config = config or ParserTrainConfig()
        self.fen_opt = Adam(fen.parameters(), lr=self.config.fen_lr)
        self.pn_opt = Adam(pn.parameters(), lr=self.config.pn_lr)

    def losses(self, images, cont_norm, discrete, fine):
        """All loss components for one batch (graph attached)."""
        cfg = self.config
        F = self.fen(images)
        out = self.pn(F)
        j_nc = continuous_loss(out["continuous"], cont_norm)
        j_nd = discrete_loss(out["discrete"], discrete, self.class_weights, cfg.discrete_mode)
        j_n = architecture_loss(j_nc, j_nd)
        j_lg = coarse_loss(out["coarse"], coarse_from_fine(fine), self.class_weights)
        composed = hierarchical_compose(out["coarse"], out["fine"])
        j_l = fine_loss(composed, fine, self.class_weights)
        j_p = parsing_loss(j_n, j_lg, j_l, cfg.gammas)
        comps = {"J_nc": j_nc, "J_nd": j_nd, "J_n": j_n, "J_lg": j_lg, "J_l": j_l, "J_p": j_p}
        total = j_p
        if cfg.use_fingerprint:
            terms = fingerprint_loss_terms(F, cfg.loss_weights)
            j_f = combine_terms(terms, cfg.loss_weights)
            comps.update({"J_m": terms["magnitude"], "J_s": terms["spectrum"], "J_r": terms["repetitive"],
                          "J_e": terms["energy"], "J_f": j_f})
            total = total + j_f
        comps["total"] = total
        return comps

    def train_step(self, images, cont_norm, discrete, fine):
        """One Adam step on both networks; returns float loss components."""
        self.fen.train()
        self.pn.train()
        comps = self.losses(images, cont_norm, discrete, fine)
        for name, value in comps.items():
            if not np.isfinite(value.data).all():
                raise FloatingPointError(f"non-finite loss component {name}")
        self.fen_opt.zero_grad()
        self.pn_opt.zero_grad()
        T.backward(comps["total"], self.fen.parameters() + self.pn.parameters())
        self.fen_opt.step()
        self.pn_opt.step()
        return {k: float(v.data) for k, v in comps.items()}

    def fingerprints(self, images, batch_size=256):
        self.fen.eval()
        outs = []
        with T.no_grad():
            for i in range(0, len(images), batch_size):
                outs.append(self.fen(T.Tensor(images[i:i + batch_size], dtype=self._dtype)).data)
        return np.concatenate(outs) if outs else np.zeros((0,) + tuple(images.shape[1:]))

    @property
    def _dtype(self):
        return self.fen.parameters()[0].dtype

    def predict(self, images, batch_size=256):
        """Predictions for a batch of images (N, C, H, W)."""
        self.fen.eval()
        self.pn.eval()
        cont, disc, dprobs, coarse, fine = [], [], [[] for _ in DISCRETE_NAMES], [], []
        with T.no_grad():
            for i in range(0, len(images), batch_size):
                x = T.Tensor(images[i:i + batch_size], dtype=self._dtype)
                out = self.pn(self.fen(x))
                cont.append(out["continuous"].data)
                labels = []
                for k, lg in enumerate(out["discrete"]):
                    labels.append(np.argmax(lg.data, axis=-1))
                    if self.config.discrete_mode == "softmax":
                        dprobs[k].append(T.softmax(lg).data)
                    else:
                        dprobs[k].append(T.sigmoid(lg).data)
                disc.append(np.stack(labels, axis=-1))
                coarse.append(T.sigmoid(out["coarse"]).data)
                fine.append(hierarchical_compose(out["coarse"], out["fine"]).data)
        return Prediction(
            np.concatenate(cont).astype(np.float64),
            np.concatenate(disc),
            [np.concatenate(p).astype(np.float64) for p in dprobs],
            np.concatenate(coarse).astype(np.float64),
            np.concatenate(fine).astype(np.float64),
        )


def build_parser(fen_config, pn_config, class_weights, train_config=None, seed=0, dtype=np.float32):
    fen = FingerprintNet(fen_config, seed=seed * 2 + 11, dtype=dtype)
    pn = ParsingNetwork(pn_config, seed=seed * 2 + 12, dtype=dtype)
    return ModelParser(fen, pn, class_weights, train_config)


def save_parser(parser, path, extra=None):
    """FEN (``fen.*``) and PN (``pn.*``) weights plus everything needed to rebuild them."""
    state = {f"fen.{k}": v for k, v in parser.fen.state_dict().items()}
    state.update({f"pn.{k}": v for k, v in parser.pn.state_dict().items()})
    cfg = parser.config
    meta = {
        "kind": "parser",
        "fen": asdict(parser.fen.config),
        "pn": parser.pn.config.to_dict(),
        "class_weights": parser.class_weights.to_dict(),
        "train_config": {"fen_lr": cfg.fen_lr, "pn_lr": cfg.pn_lr, "gammas": list(cfg.gammas),
                  "use_fingerprint": cfg.use_fingerprint, "discrete_mode": cfg.discrete_mode,
                  "loss_weights": asdict(cfg.loss_weights)},
    }
    meta.update(extra or {})
    return save_checkpoint(path, state, "float32", optimizer={"fen_lr": cfg.fen_lr, "pn_lr": cfg.pn_lr},
                           extra=meta)


def load_parser(path):
    """Inverse of :func:`save_parser`; returns ``(parser, extra)``."""
    header, state = load_checkpoint(path)
    meta = header.get("extra", {})
    if meta.get("kind") != "parser":
        raise ValueError(f"{path}: not a parser checkpoint")
    pn = dict(meta["pn"])
    pn["conv_channels"] = tuple(pn["conv_channels"])
    train = dict(meta["train_config"])
    train["gammas"] = tuple(train["gammas"])
    train["loss_weights"] = FingerprintLossWeights(**train["loss_weights"])
    weights = ClassWeights({k: np.asarray(v) for k, v in meta["class_weights"].items()})
    parser = build_parser(FenConfig(**meta["fen"]), PnConfig(**pn), weights, ParserTrainConfig(**train))
    parser.fen.load_state_dict({k[4:]: v for k, v in state.items() if k.startswith("fen.")})
    parser.pn.load_state_dict({k[3:]: v for k, v in state.items() if k.startswith("pn.")})
    return parser, meta
