"""A zoo of tiny generative models with exactly known hyperparameters.

Each :class:`GmSpec` fully determines a generator architecture, the set of
losses it is trained with and its seeds, so ground-truth parsing targets
follow by instantiating the network and counting.

Label dictionaries used by the zoo::

    norm_type           0 none, 1 batch, 2 instance, 3 layer
    block_nonlinearity  0 relu, 1 leaky relu, 2 tanh, 3 sigmoid
    last_nonlinearity   0 tanh, 1 sigmoid rescaled to [-1, 1], 2 identity, 3 clip
    upsampling          0 nearest + conv, 1 transposed conv
    skip_connection     0 no, 1 yes
    downsampling        0 no, 1 average-pool after the latent projection
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .optim import Adam
from .parser import (
    COARSE_NAMES,
    CONTINUOUS_NAMES,
    DISCRETE_CARDINALITY,
    DISCRETE_NAMES,
    FINE_NAMES,
    ArchitectureTargets,
    LossTargets,
    coarse_from_fine,
)

FAMILIES = ("blobs", "checker", "stripes")
NORM_KINDS = ("none", "batch", "instance", "layer")
BLOCK_ACTS = ("relu", "leaky_relu", "tanh", "sigmoid")
LAST_ACTS = ("tanh", "scaled_sigmoid", "identity", "clip")
LATENT_DIM = 8
TARGET_AMPLITUDE = 0.75


class ZooError(ValueError):
    pass


class DivergenceError(FloatingPointError):
    pass


@dataclass
class GmSpec:
    id: str
    family: str
    blocks: int
    layers_per_block: int
    norm_type: int
    block_nonlinearity: int
    last_nonlinearity: int
    upsampling: int
    skip_connection: int
    downsampling: int
    base_filters: int
    fc_layers: int
    losses: tuple
    steps: int = 200
    lr: float = 2e-3
    seed: int = 0
    image_size: int = 16

    def __post_init__(self):
        unknown = set(self.losses) - set(FINE_NAMES)
        if unknown:
            raise ZooError(f"{self.id}: unknown losses {sorted(unknown)}")
        self.losses = tuple(sorted(set(self.losses), key=FINE_NAMES.index))
        self.validate()

    def validate(self):
        if self.family not in FAMILIES:
            raise ZooError(f"{self.id}: unknown family {self.family!r}")
        for name, card in zip(DISCRETE_NAMES, DISCRETE_CARDINALITY):
            v = getattr(self, name)
            if not 0 <= v < card:
                raise ZooError(f"{self.id}: {name}={v} outside 0..{card - 1}")
        if self.blocks < 1 or self.image_size % (2 ** self.blocks):
            raise ZooError(f"{self.id}: {self.blocks} upsampling blocks do not fit image size {self.image_size}")
        if self.layers_per_block < 1 or self.base_filters < 1 or self.fc_layers not in (1, 2):
            raise ZooError(f"{self.id}: invalid layer counts")
        if not self.losses:
            raise ZooError(f"{self.id}: at least one loss required")
        unknown = set(self.losses) - set(FINE_NAMES)
        if unknown:
            raise ZooError(f"{self.id}: unknown losses {sorted(unknown)}")
        if not 0 < self.steps <= 5000:
            raise ZooError(f"{self.id}: training budget must be in 1..5000 steps")

    @property
    def discrete(self):
        return np.array([getattr(self, n) for n in DISCRETE_NAMES], dtype=int)

    @property
    def fine(self):
        return np.array([int(n in self.losses) for n in FINE_NAMES], dtype=int)

    def to_dict(self):
        d = asdict(self)
        d["losses"] = list(self.losses)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**{**d, "losses": tuple(d["losses"])})


# -- architecture --------------------------------------------------------
def _norm(kind, channels, init):
    if kind == 1:
        return nn.BatchNorm2d(channels, init=init)
    if kind == 2:
        return nn.InstanceNorm2d(channels, init=init)
    if kind == 3:
        return nn.LayerNorm2d(channels, init=init)
    return None


class GenBlock(nn.Module):
    def __init__(self, spec, init):
        c = spec.base_filters
        self.skip = bool(spec.skip_connection)
        self.upsample = None
        if spec.upsampling == 1:
            first = nn.ConvTranspose2d(c, c, 4, 2, 1, init=init)
        else:
            self.upsample = nn.Upsample(2)
            first = nn.Conv2d(c, c, 3, init=init)
        self.convs = [first] + [nn.Conv2d(c, c, 3, init=init) for _ in range(spec.layers_per_block - 1)]
        self.norms = [_norm(spec.norm_type, c, init) for _ in self.convs]
        self.norms = [n for n in self.norms if n is not None]
        self.act = nn.Activation(BLOCK_ACTS[spec.block_nonlinearity])

    def forward(self, x):
        h = self.upsample(x) if self.upsample is not None else x
        for i, conv in enumerate(self.convs):
            h = conv(h)
            if self.norms:
                h = self.norms[i](h)
            h = self.act(h)
        if self.skip:
            h = h + T.upsample_nearest(x, 2)
        return h


class Generator(nn.Module):
    def __init__(self, spec, dtype=np.float32):
        self.spec = spec
        init = nn.Init(spec.seed, dtype)
        c = spec.base_filters
        self.start = spec.image_size // (2 ** spec.blocks) * (2 if spec.downsampling else 1)
        flat = c * self.start * self.start
        if spec.fc_layers == 2:
            self.fc = [nn.Linear(LATENT_DIM, 64, init=init), nn.Linear(64, flat, init=init)]
        else:
            self.fc = [nn.Linear(LATENT_DIM, flat, init=init)]
        self.pool = nn.AvgPool2d(2) if spec.downsampling else None
        self.act = nn.Activation(BLOCK_ACTS[spec.block_nonlinearity])
        self.blocks = [GenBlock(spec, init) for _ in range(spec.blocks)]
        self.out = nn.Conv2d(c, 1, 3, init=init)
        self.last = nn.Activation(LAST_ACTS[spec.last_nonlinearity])

    def forward(self, z):
        h = T.as_tensor(z)
        for i, fc in enumerate(self.fc):
            h = fc(h)
            if i < len(self.fc) - 1:
                h = T.relu(h)
        h = T.reshape(h, (h.shape[0], self.spec.base_filters, self.start, self.start))
        if self.pool is not None:
            h = self.pool(h)
        h = self.act(h)
        for block in self.blocks:
            h = block(h)
        return self.last(self.out(h))


def layer_walk(module):
    """Count layers by type over an instantiated generator."""
    counts = dict.fromkeys(("fc", "conv", "norm", "pool", "filters"), 0)
    for m in module.modules():
        if isinstance(m, nn.Linear):
            counts["fc"] += 1
        elif isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            counts["conv"] += 1
            counts["filters"] += m.out_channels
        elif isinstance(m, (nn.BatchNorm2d, nn.InstanceNorm2d, nn.LayerNorm2d)):
            counts["norm"] += 1
        elif isinstance(m, (nn.AvgPool2d, nn.MaxPool2d)):
            counts["pool"] += 1
    return counts


def ground_truth_vector(spec):
    """``(ArchitectureTargets, LossTargets)`` for a spec, counted from the built network."""
    gen = Generator(spec)
    c = layer_walk(gen)
    raw = {
        "num_layers": c["fc"] + c["conv"],
        "num_conv_layers": c["conv"],
        "num_fc_layers": c["fc"],
        "num_pool_layers": c["pool"],
        "num_norm_layers": c["norm"],
        "num_filters": c["filters"],
        "num_parameters": gen.num_parameters(),
        "num_blocks": len(gen.blocks),
        "layers_per_block": spec.layers_per_block,
    }
    arch = ArchitectureTargets(np.array([raw[n] for n in CONTINUOUS_NAMES], dtype=np.float64), spec.discrete)
    return arch, LossTargets(spec.fine)


# -- procedural content --------------------------------------------------
def _sig(v):
    return 1.0 / (1.0 + np.exp(-v))


def render_targets(family, z, size=16):
    """Deterministic target images in [-0.75, 0.75] driven by latent codes ``z`` (N, 8)."""
    z = np.asarray(z, dtype=np.float64)
    n = z.shape[0]
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    yy, xx = yy[None], xx[None]
    s = _sig(z)
    if family == "blobs":
        cx = size * (0.2 + 0.6 * s[:, 0])[:, None, None]
        cy = size * (0.2 + 0.6 * s[:, 1])[:, None, None]
        sig = (1.5 + 2.5 * s[:, 2])[:, None, None]
        img = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * sig ** 2))
        cx2 = size * (0.2 + 0.6 * s[:, 3])[:, None, None]
        cy2 = size * (0.2 + 0.6 * s[:, 4])[:, None, None]
        amp2 = s[:, 5][:, None, None]
        img = img + amp2 * np.exp(-((xx - cx2) ** 2 + (yy - cy2) ** 2) / (2 * (sig * 0.7) ** 2))
        img = 2.0 * np.clip(img, 0.0, 1.0) - 1.0
    elif family == "stripes":
        theta = (np.pi * s[:, 0])[:, None, None]
        freq = (1.5 + 3.0 * s[:, 1])[:, None, None]
        phase = (2 * np.pi * s[:, 2])[:, None, None]
        proj = xx * np.cos(theta) + yy * np.sin(theta)
        img = np.sin(2 * np.pi * freq * proj / size + phase)
    elif family == "checker":
        cell = (2.0 + 4.0 * s[:, 0])[:, None, None]
        ox = (size * s[:, 1])[:, None, None]
        oy = (size * s[:, 2])[:, None, None]
        img = np.tanh(3.0 * np.sin(np.pi * (xx + ox) / cell) * np.sin(np.pi * (yy + oy) / cell))
    else:
        raise ZooError(f"unknown family {family!r}")
    # keep targets off the clip boundary so generator residuals survive sampling
    return TARGET_AMPLITUDE * img.reshape(n, 1, size, size)


# -- zoo construction ----------------------------------------------------
# Four architectures, two per content family, each trained three times with
# different widths, seeds and loss sets. Family-balanced folds hold out one
# GM per family, so a held-out GM is unseen while two siblings sharing its
# architecture remain in training.
# columns: blocks, lpb, fc, norm, block act, last act, up, skip, down
_ARCHITECTURES = (
    (2, 1, 1, 1, 0, 0, 1, 0, 0),
    (3, 2, 2, 0, 1, 1, 0, 1, 0),
    (1, 2, 1, 2, 2, 2, 1, 0, 1),
    (2, 2, 2, 3, 3, 3, 0, 0, 0),
)
# family, architecture index, base filters, loss set
_DEFAULT_GMS = (
    ("blobs", 0, 16, ("L1", "Adversarial")),
    ("blobs", 0, 12, ("L2", "Adversarial", "CE")),
    ("blobs", 0, 8, ("MSE", "WGAN")),
    ("blobs", 1, 8, ("L2", "MSE")),
    ("blobs", 1, 12, ("MSE", "KL")),
    ("blobs", 1, 16, ("L1", "MMD")),
    ("stripes", 2, 16, ("MMD", "WGAN")),
    ("stripes", 2, 8, ("L1", "KL", "CE")),
    ("stripes", 2, 12, ("Adversarial", "CE")),
    ("stripes", 3, 12, ("KL", "Adversarial")),
    ("stripes", 3, 16, ("L2", "WGAN", "CE")),
    ("stripes", 3, 8, ("L1", "MMD")),
)
_DEFAULT_TABLE = tuple(
    (family,) + _ARCHITECTURES[a][:2] + (base,) + _ARCHITECTURES[a][2:] + (losses,)
    for family, a, base, losses in _DEFAULT_GMS
)


@dataclass
class ZooConfig:
    image_size: int = 16
    steps: int = 200
    lr: float = 2e-3
    master_seed: int = 0
    specs: list = field(default_factory=list)

    @classmethod
    def default(cls, **overrides):
        cfg = cls(**overrides)
        if not cfg.specs:
            cfg.specs = [
                {
                    "family": row[0], "blocks": row[1], "layers_per_block": row[2], "base_filters": row[3],
                    "fc_layers": row[4], "norm_type": row[5], "block_nonlinearity": row[6],
                    "last_nonlinearity": row[7], "upsampling": row[8], "skip_connection": row[9],
                    "downsampling": row[10], "losses": list(row[11]),
                }
                for row in _DEFAULT_TABLE
            ]
        return cfg

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def build_zoo(config=None):
    """Validated list of :class:`GmSpec` from a zoo config."""
    config = config or ZooConfig.default()
    if len(config.specs) < 8:
        raise ZooError(f"zoo needs at least 8 specs, got {len(config.specs)}")
    specs = []
    for i, row in enumerate(config.specs):
        row = dict(row)
        row.setdefault("id", f"gm{i:02d}")
        row.setdefault("steps", config.steps)
        row.setdefault("lr", config.lr)
        row.setdefault("seed", config.master_seed * 1000 + i)
        row.setdefault("image_size", config.image_size)
        specs.append(GmSpec.from_dict(row))
    check_coverage(specs)
    return specs


def check_coverage(specs):
    """Every discrete class and both states of every fine and coarse flag in >= 2 specs."""
    missing = []
    for k, (name, card) in enumerate(zip(DISCRETE_NAMES, DISCRETE_CARDINALITY)):
        counts = np.bincount([s.discrete[k] for s in specs], minlength=card)
        missing += [f"{name}={c}" for c in range(card) if counts[c] < 2]
    fine = np.array([s.fine for s in specs])
    flags = np.concatenate([fine, coarse_from_fine(fine)], axis=1)
    for m, name in enumerate(FINE_NAMES + COARSE_NAMES):
        on = int(flags[:, m].sum())
        if on < 2:
            missing.append(f"{name}=1")
        if len(specs) - on < 2:
            missing.append(f"{name}=0")
    if missing:
        raise ZooError("coverage violation, classes with fewer than 2 specs: " + ", ".join(missing))


# -- training ------------------------------------------------------------
class Critic(nn.Module):
    """Three-layer discriminator: two strided convs and a linear read-out."""

    def __init__(self, size, init):
        self.c1 = nn.Conv2d(1, 8, 4, stride=2, padding=1, init=init)
        self.c2 = nn.Conv2d(8, 16, 4, stride=2, padding=1, init=init)
        self.fc = nn.Linear(16 * (size // 4) ** 2, 1, init=init)

    def forward(self, x):
        h = T.leaky_relu(self.c1(x), 0.2)
        h = T.leaky_relu(self.c2(h), 0.2)
        return T.reshape(self.fc(T.flatten(h)), (-1,))


LOSS_SCALE = {"L1": 1.0, "L2": 0.1, "MSE": 1.0, "MMD": 1.0, "WGAN": 0.1, "KL": 0.01, "Adversarial": 0.1, "CE": 0.1}


def _mmd(a, b):
    a = T.flatten(a)
    b = T.flatten(b)
    dim = a.shape[1]

    def kern(x, y):
        xx = T.tsum(T.square(x), axis=1, keepdims=True)
        yy = T.reshape(T.tsum(T.square(y), axis=1), (1, -1))
        d2 = xx + yy - T.matmul(x, y.mT) * 2.0
        return T.exp(T.clamp_min(d2, 0.0) * (-1.0 / dim))

    return T.mean(kern(a, a)) + T.mean(kern(b, b)) - T.mean(kern(a, b)) * 2.0


@dataclass
class ToyGenerator:
    spec: GmSpec
    net: Generator
    checkpoint: str | None = None
    history: list = field(default_factory=list)
    active_losses: tuple = ()

    def save(self, path):
        params = self.net.named_parameters()
        state = {k: v.data for k, v in params.items()}
        buffers = self.net.named_buffers()
        state.update(buffers)
        save_checkpoint(path, state, "float32", optimizer={"lr": self.spec.lr}, seed=self.spec.seed,
                        extra={"spec": self.spec.to_dict(), "buffers": list(buffers)})
        self.checkpoint = str(path)
        return path

    @classmethod
    def load(cls, path):
        header, state = load_checkpoint(path)
        spec = GmSpec.from_dict(header["extra"]["spec"])
        net = Generator(spec)
        net.load_state_dict(state)
        return cls(spec, net, str(path), active_losses=spec.losses)


def train_toy_gm(spec, batch_size=16, log_every=0):
    """Train the generator with exactly the losses listed in ``spec.losses``."""
    spec.validate()
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed, spawn_key=(7,)))
    gen = Generator(spec)
    init = nn.Init(spec.seed + 100_000)
    size = spec.image_size
    active = tuple(spec.losses)
    encoder = nn.Linear(size * size, 2 * LATENT_DIM, init=init) if "KL" in active else None
    disc = Critic(size, init) if "Adversarial" in active else None
    critic = Critic(size, init) if "WGAN" in active else None
    g_params = gen.parameters() + (encoder.parameters() if encoder else [])
    g_opt = Adam(g_params, lr=spec.lr, betas=(0.5, 0.999))
    d_opts = [Adam(m.parameters(), lr=spec.lr, betas=(0.5, 0.999)) for m in (disc, critic) if m is not None]
    history = []
    for step in range(spec.steps):
        z = rng.standard_normal((batch_size, LATENT_DIM))
        target_np = render_targets(spec.family, z, size).astype(np.float32)
        target = T.Tensor(target_np)
        z_in = T.Tensor(z.astype(np.float32))
        terms = {}
        if encoder is not None:
            stats = encoder(T.flatten(target))
            mu = stats[:, :LATENT_DIM]
            logvar = T.clip(stats[:, LATENT_DIM:], -6.0, 6.0)
            eps = rng.standard_normal((batch_size, LATENT_DIM)).astype(np.float32)
            z_in = mu + T.exp(logvar * 0.5) * eps
            kl = (T.square(mu) + T.exp(logvar) - logvar - 1.0) * 0.5
            terms["KL"] = T.mean(T.tsum(kl, axis=1))
        fake = gen(z_in)

        # discriminator updates on detached samples
        if disc is not None or critic is not None:
            fake_d = T.Tensor(fake.data)
            d_loss = None
            if disc is not None:
                d_loss = T.mean(T.neg(T.log_sigmoid(disc(target)))) + T.mean(T.neg(T.log_sigmoid(T.neg(disc(fake_d)))))
            if critic is not None:
                w_loss = T.mean(critic(fake_d)) - T.mean(critic(target))
                d_loss = w_loss if d_loss is None else d_loss + w_loss
            for opt in d_opts:
                opt.zero_grad()
            T.backward(d_loss, [p for opt in d_opts for p in opt.params])
            for opt in d_opts:
                opt.step()
            if critic is not None:
                for p in critic.parameters():
                    np.clip(p.data, -0.05, 0.05, out=p.data)

        diff = fake - target
        if "L1" in active:
            terms["L1"] = T.mean(T.abs(diff))
        if "L2" in active:
            terms["L2"] = T.mean(T.sqrt(T.tsum(T.square(T.flatten(diff)), axis=1) + 1e-8))
        if "MSE" in active:
            terms["MSE"] = T.mean(T.square(diff))
        if "MMD" in active:
            terms["MMD"] = _mmd(fake, target)
        if "Adversarial" in active:
            terms["Adversarial"] = T.mean(T.neg(T.log_sigmoid(disc(fake))))
        if "WGAN" in active:
            terms["WGAN"] = T.neg(T.mean(critic(fake)))
        if "CE" in active:
            # frozen attribute classifier: bright (z0 > 0) vs dark images
            logit = T.mean(T.flatten(fake), axis=1) * 4.0
            y = (z[:, 0] > 0).astype(np.float32)
            terms["CE"] = T.mean(T.neg(T.log_sigmoid(logit) * y + T.log_sigmoid(T.neg(logit)) * (1.0 - y)))
        if set(terms) != set(active):
            raise RuntimeError(f"{spec.id}: active terms {sorted(terms)} != declared {sorted(active)}")
        loss = None
        for name, value in terms.items():
            scaled = value * LOSS_SCALE[name]
            loss = scaled if loss is None else loss + scaled
        if not np.isfinite(loss.data):
            raise DivergenceError(f"{spec.id}: loss diverged at step {step} (seed {spec.seed})")
        g_opt.zero_grad()
        T.backward(loss, g_params)
        g_opt.step()
        history.append({k: float(v.data) for k, v in terms.items()})
        if log_every and step % log_every == 0:  # pragma: no cover - logging only
            print(spec.id, step, history[-1])
    gen.eval()
    return ToyGenerator(spec, gen, history=history, active_losses=active)


def sample_images(gen, n, seed=0):
    """``n`` images (n, 1, H, W) in [-1, 1] from latent draws seeded by ``seed``."""
    size = gen.spec.image_size
    if n == 0:
        return np.zeros((0, 1, size, size), dtype=np.float32)
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(gen.spec.seed,)))
    z = rng.standard_normal((n, LATENT_DIM)).astype(np.float32)
    gen.net.eval()
    with T.no_grad():
        out = gen.net(T.Tensor(z)).data
    return np.clip(out, -1.0, 1.0).astype(np.float32)


def reconstruction_mse(gen, n=64, seed=0):
    """MSE between generator outputs and the procedural targets of the same latents."""
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((n, LATENT_DIM)).astype(np.float32)
    gen.net.eval()
    with T.no_grad():
        out = gen.net(T.Tensor(z)).data
    tgt = render_targets(gen.spec.family, z, gen.spec.image_size)
    return float(np.mean((out - tgt) ** 2))


