"""Manifests, PGM/PPM image I/O, min-max statistics and leave-GMs-out splits."""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .parser import CONTINUOUS_NAMES, DISCRETE_CARDINALITY, DISCRETE_NAMES, FINE_NAMES, coarse_from_fine

MANIFEST_VERSION = 1


class DatasetError(ValueError):
    pass


# -- Netpbm --------------------------------------------------------------
def write_pnm(path, pixels):
    """Write uint8 pixels: (H, W) as binary PGM, (H, W, 3) as binary PPM."""
    pixels = np.asarray(pixels)
    if pixels.dtype != np.uint8:
        raise DatasetError(f"PNM payload must be uint8, got {pixels.dtype}")
    if pixels.ndim == 2:
        magic = b"P5"
    elif pixels.ndim == 3 and pixels.shape[2] == 3:
        magic = b"P6"
    else:
        raise DatasetError(f"unsupported PNM shape {pixels.shape}")
    h, w = pixels.shape[:2]
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(pixels).tobytes())


def _tokens(data, count, pos):
    out = []
    while len(out) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DatasetError("truncated PNM header")
        out.append(data[start:pos])
    return out, pos + 1


def read_pnm(path):
    data = Path(path).read_bytes()
    (magic, w, h, maxval), pos = _tokens(data, 4, 0)
    if magic not in (b"P5", b"P6") or int(maxval) != 255:
        raise DatasetError(f"{path}: only 8-bit binary P5/P6 supported")
    w, h = int(w), int(h)
    depth = 1 if magic == b"P5" else 3
    payload = np.frombuffer(data, dtype=np.uint8, count=w * h * depth, offset=pos)
    return payload.reshape((h, w) if depth == 1 else (h, w, 3)).copy()


def to_uint8(images):
    """[-1, 1] floats to 8-bit codes."""
    return np.clip(np.round((np.asarray(images, dtype=np.float64) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def from_uint8(codes):
    return (np.asarray(codes, dtype=np.float32) / np.float32(127.5) - np.float32(1.0)).astype(np.float32)


def quantize(images):
    """Round-trip through 8-bit codes, matching what is stored on disk."""
    return from_uint8(to_uint8(images))


# -- manifest ------------------------------------------------------------
@dataclass
class GmEntry:
    id: str
    family: str
    continuous_raw: list
    discrete: list
    fine: list
    image_paths: list = field(default_factory=list)

    @property
    def coarse(self):
        return coarse_from_fine(np.asarray(self.fine)).tolist()

    def to_dict(self):
        return {
            "id": self.id,
            "family": self.family,
            "continuous_raw": [float(v) for v in self.continuous_raw],
            "discrete": [int(v) for v in self.discrete],
            "fine": [int(v) for v in self.fine],
            "image_paths": list(self.image_paths),
        }


@dataclass
class Manifest:
    gms: list
    image_shape: tuple = (16, 16, 1)
    seed: int = 0
    version: int = MANIFEST_VERSION

    def __post_init__(self):
        self.image_shape = tuple(int(v) for v in self.image_shape)
        if not self.gms:
            raise DatasetError("manifest has an empty GM list")
        ids = [g.id for g in self.gms]
        if len(set(ids)) != len(ids):
            raise DatasetError("duplicate GM ids in manifest")

    def to_dict(self):
        return {
            "version": self.version,
            "image_shape": list(self.image_shape),
            "seed": self.seed,
            "gms": [g.to_dict() for g in self.gms],
        }

    def __eq__(self, other):
        return isinstance(other, Manifest) and self.to_dict() == other.to_dict()

    def entry(self, gm_id):
        for g in self.gms:
            if g.id == gm_id:
                return g
        raise KeyError(gm_id)

    @property
    def ids(self):
        return [g.id for g in self.gms]


def write_manifest(manifest, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest.to_dict(), indent=1, sort_keys=True) + "\n")
    return path


def read_manifest(path, check_images=True):
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}: malformed manifest JSON ({exc})") from exc
    if raw.get("version") != MANIFEST_VERSION:
        raise DatasetError(f"{path}: manifest version {raw.get('version')!r} != {MANIFEST_VERSION}")
    gms = [GmEntry(**g) for g in raw.get("gms", [])]
    manifest = Manifest(gms, tuple(raw["image_shape"]), raw.get("seed", 0), raw["version"])
    _validate_entries(manifest)
    if check_images:
        for g in manifest.gms:
            for p in g.image_paths:
                _resolve(path.parent, p, manifest.image_shape)
    return manifest


def _validate_entries(manifest):
    for g in manifest.gms:
        if len(g.continuous_raw) != len(CONTINUOUS_NAMES) or len(g.discrete) != len(DISCRETE_NAMES):
            raise DatasetError(f"{g.id}: wrong target vector lengths")
        if len(g.fine) != len(FINE_NAMES):
            raise DatasetError(f"{g.id}: expected {len(FINE_NAMES)} loss flags")
        for v, card in zip(g.discrete, DISCRETE_CARDINALITY):
            if not 0 <= v < card:
                raise DatasetError(f"{g.id}: discrete label {v} out of range")


def _resolve(root, rel, shape):
    full = Path(root) / rel
    if not full.exists():
        raise DatasetError(f"missing image {full}")
    px = read_pnm(full)
    h, w, c = shape
    expected = (h, w) if c == 1 else (h, w, c)
    if px.shape != expected:
        raise DatasetError(f"{full}: shape {px.shape} != declared {expected}")
    return px


def load_images(manifest, root, gm_id):
    """Images of one GM as float32 (N, C, H, W) in [-1, 1]."""
    entry = manifest.entry(gm_id)
    pix = [_resolve(root, p, manifest.image_shape) for p in entry.image_paths]
    h, w, c = manifest.image_shape
    if not pix:
        return np.zeros((0, c, h, w), dtype=np.float32)
    arr = np.stack(pix).reshape(len(pix), h, w, c).transpose(0, 3, 1, 2)
    return from_uint8(arr)


def write_gm_images(root, gm_id, images):
    """Store (N, 1, H, W) or (N, 3, H, W) images as PNM; returns relative paths."""
    root = Path(root)
    sub = Path("images") / gm_id
    (root / sub).mkdir(parents=True, exist_ok=True)
    codes = to_uint8(images)
    paths = []
    for i, img in enumerate(codes):
        ext = "pgm" if img.shape[0] == 1 else "ppm"
        rel = sub / f"{i:05d}.{ext}"
        write_pnm(root / rel, img[0] if img.shape[0] == 1 else img.transpose(1, 2, 0))
        paths.append(rel.as_posix())
    return paths


# -- normalization -------------------------------------------------------
@dataclass
class NormalizationStats:
    minimum: np.ndarray
    maximum: np.ndarray

    def __post_init__(self):
        self.minimum = np.asarray(self.minimum, dtype=np.float64)
        self.maximum = np.asarray(self.maximum, dtype=np.float64)
        bad = [CONTINUOUS_NAMES[j] if self.minimum.size == len(CONTINUOUS_NAMES) else str(j)
               for j in np.flatnonzero(~(self.maximum > self.minimum))]
        if bad:
            raise DatasetError(f"degenerate range (max == min) for {bad}")

    @classmethod
    def from_raw(cls, raw):
        raw = np.asarray(raw, dtype=np.float64)
        if raw.ndim != 2 or len(raw) == 0:
            raise DatasetError("need a non-empty (G, P) array of raw values")
        return cls(raw.min(axis=0), raw.max(axis=0))

    @classmethod
    def from_manifest(cls, manifest, train_ids):
        return cls.from_raw([manifest.entry(i).continuous_raw for i in train_ids])

    def to_dict(self):
        return {"min": self.minimum.tolist(), "max": self.maximum.tolist()}


def normalize_continuous(raw, stats):
    x = (np.asarray(raw, dtype=np.float64) - stats.minimum) / (stats.maximum - stats.minimum)
    return np.clip(x, 0.0, 1.0)


def denormalize_continuous(norm, stats):
    return np.asarray(norm, dtype=np.float64) * (stats.maximum - stats.minimum) + stats.minimum


# -- splits --------------------------------------------------------------
@dataclass
class SplitPlan:
    folds: list  # list of {"test": [...], "train": [...]}
    seed: int = 0
    balance: str = "one test GM per content family"

    def to_dict(self):
        return {"seed": self.seed, "balance": self.balance, "folds": self.folds}


def _covers_all_classes(entries):
    cont = np.array([e.continuous_raw for e in entries], dtype=np.float64)
    if np.any(cont.max(axis=0) <= cont.min(axis=0)):
        return False
    disc = np.array([e.discrete for e in entries])
    for k, card in enumerate(DISCRETE_CARDINALITY):
        if len(np.unique(disc[:, k])) < card:
            return False
    fine = np.array([e.fine for e in entries])
    flags = np.concatenate([fine, coarse_from_fine(fine)], axis=1)
    return bool(np.all(flags.max(axis=0) == 1) and np.all(flags.min(axis=0) == 0))


def make_splits(manifest, folds=6, test_size=2, seed=0, max_tries=20000):
    """Disjoint leave-GMs-out folds, balanced across content families.

    Every training split must still contain every discrete class and both
    states of every fine and coarse loss flag so that class weights exist, and a nonzero
    range for every continuous parameter so min-max statistics exist. A seeded random
    search over family-balanced matchings finds such a plan.
    """
    if test_size < 2:
        raise DatasetError("test size per fold must be >= 2")
    if folds * test_size > len(manifest.gms):
        raise DatasetError(f"{folds} folds x {test_size} exceed {len(manifest.gms)} GMs")
    by_family = {}
    for g in manifest.gms:
        by_family.setdefault(g.family, []).append(g.id)
    families = sorted(by_family)
    if test_size % len(families):
        raise DatasetError(f"test size {test_size} cannot be balanced over families {families}")
    per_family = test_size // len(families)
    if any(len(by_family[f]) < folds * per_family for f in families):
        raise DatasetError("infeasible balance constraint: a family has too few GMs for the requested folds")
    rng = np.random.default_rng(seed)
    all_ids = manifest.ids
    for _ in range(max_tries):
        picks = {f: list(rng.permutation(by_family[f]))[: folds * per_family] for f in families}
        plan = []
        ok = True
        for i in range(folds):
            test = sorted(itertools.chain.from_iterable(
                picks[f][i * per_family:(i + 1) * per_family] for f in families))
            train = [g for g in all_ids if g not in test]
            if not _covers_all_classes([manifest.entry(g) for g in train]):
                ok = False
                break
            plan.append({"test": [str(t) for t in test], "train": train})
        if ok:
            return SplitPlan(plan, seed)
    raise DatasetError("infeasible balance constraint: no fold plan keeps every class in training")

