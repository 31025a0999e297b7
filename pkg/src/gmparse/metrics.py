"""Evaluation metrics: L1, macro-F1, baselines, confusion, similarity, aggregation, occlusion, AUC."""
from __future__ import annotations

import io
import math
import warnings
from dataclasses import dataclass

import numpy as np

from .parser import CONTINUOUS_NAMES, DISCRETE_CARDINALITY, DISCRETE_NAMES, FINE_NAMES, Prediction


class MetricError(ValueError):
    pass


def l1_error(pred, target):
    """Per-parameter mean absolute error over images and its mean across parameters."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise MetricError(f"length mismatch {pred.shape} vs {target.shape}")
    if pred.size == 0:
        raise MetricError("empty prediction set")
    per = np.abs(pred - target).reshape(-1, pred.shape[-1]).mean(axis=0)
    return per, float(per.mean())


def per_class_f1(pred, target, cardinality):
    """F1 per class; NaN for classes absent from both predictions and targets."""
    pred = np.asarray(pred, dtype=int).ravel()
    target = np.asarray(target, dtype=int).ravel()
    if pred.size == 0:
        raise MetricError("empty prediction set")
    if pred.shape != target.shape:
        raise MetricError("length mismatch")
    for arr in (pred, target):
        if arr.min() < 0 or arr.max() >= cardinality:
            raise MetricError(f"labels outside 0..{cardinality - 1}")
    out = np.full(cardinality, np.nan)
    for c in range(cardinality):
        tp = np.sum((pred == c) & (target == c))
        fp = np.sum((pred == c) & (target != c))
        fn = np.sum((pred != c) & (target == c))
        if tp + fp + fn:
            out[c] = 2 * tp / (2 * tp + fp + fn)
    return out


def f1_score(pred, target, cardinality):
    """Macro-F1 over classes that occur in predictions or targets."""
    return float(np.nanmean(per_class_f1(pred, target, cardinality)))


# -- baselines -----------------------------------------------------------
def random_guess_level(cont_targets, disc_targets, draws=1_000_000, seed=0):
    """Monte Carlo metrics of a guesser drawing uniformly in [0, 1] and uniformly over classes.

    Targets are sampled from the given per-image target pools, so the level
    reflects the evaluated target distribution.
    """
    rng = np.random.default_rng(seed)
    cont_targets = np.asarray(cont_targets, dtype=np.float64)
    disc_targets = np.asarray(disc_targets, dtype=int)
    idx = rng.integers(0, len(cont_targets), draws)
    guess = rng.random((draws, cont_targets.shape[1]))
    per, mean = l1_error(guess, cont_targets[idx])
    f1 = []
    idx = rng.integers(0, len(disc_targets), draws)
    for k, card in enumerate(DISCRETE_CARDINALITY):
        f1.append(f1_score(rng.integers(0, card, draws), disc_targets[idx, k], card))
    return {"l1_per_param": per.tolist(), "l1": mean, "f1_per_param": f1, "f1": float(np.mean(f1))}


def shuffle_columns(values, rng):
    """Permute each column independently across rows; never the identity overall."""
    values = np.asarray(values)
    if len(values) < 2:
        raise MetricError("need at least two rows to shuffle")
    while True:
        out = np.stack([values[rng.permutation(len(values)), j] for j in range(values.shape[1])], axis=1)
        if not np.array_equal(out, values):
            return out


def shuffle_rows(values, rng):
    """Permute whole rows across GMs; never the identity arrangement."""
    values = np.asarray(values)
    if len(np.unique(values, axis=0)) < 2:
        raise MetricError("all rows equal; a shuffle cannot change anything")
    while True:
        out = values[rng.permutation(len(values))]
        if not np.array_equal(out, values):
            return out


# -- confusion -----------------------------------------------------------
@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # [predicted, ground truth]
    name: str = ""

    @property
    def collapsed(self):
        """True when every prediction falls into a single class row."""
        return int(np.count_nonzero(self.counts.sum(axis=1))) <= 1

    def to_csv(self):
        buf = io.StringIO()
        m = self.counts.shape[0]
        buf.write("predicted\\truth," + ",".join(str(c) for c in range(m)) + "\n")
        for r in range(m):
            buf.write(f"{r}," + ",".join(str(int(v)) for v in self.counts[r]) + "\n")
        return buf.getvalue()


def confusion(pred, target, cardinality, name=""):
    pred = np.asarray(pred, dtype=int).ravel()
    target = np.asarray(target, dtype=int).ravel()
    if pred.shape != target.shape:
        raise MetricError("length mismatch")
    if pred.size and (min(pred.min(), target.min()) < 0 or max(pred.max(), target.max()) >= cardinality):
        raise MetricError(f"label out of range 0..{cardinality - 1}")
    counts = np.zeros((cardinality, cardinality), dtype=np.int64)
    np.add.at(counts, (pred, target), 1)
    return ConfusionMatrix(counts, name)


# -- similarity ----------------------------------------------------------
def cosine_similarity(a, b):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise MetricError("zero-norm fingerprint")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def similarity_matrix(fingerprints, pairs_per_cell=50, seed=0):
    """Mean cosine similarity over random fingerprint pairs per GM pair.

    ``fingerprints`` is a list with one (N_g, ...) array per GM. Diagonal
    cells use pairs of distinct images of the same GM.
    """
    rng = np.random.default_rng(seed)
    g = len(fingerprints)
    flat = [np.asarray(f, dtype=np.float64).reshape(len(f), -1) for f in fingerprints]
    norms = [np.linalg.norm(f, axis=1) for f in flat]
    out = np.full((g, g), np.nan)
    for i in range(g):
        for j in range(g):
            ni, nj = len(flat[i]), len(flat[j])
            available = ni * (ni - 1) if i == j else ni * nj
            if available < pairs_per_cell:
                raise MetricError(f"cell ({i}, {j}) has only {available} distinct pairs")
            a = rng.integers(0, ni, pairs_per_cell)
            if i == j:
                b = (a + rng.integers(1, ni, pairs_per_cell)) % ni
            else:
                b = rng.integers(0, nj, pairs_per_cell)
            denom = norms[i][a] * norms[j][b]
            if np.any(denom == 0):
                warnings.warn(f"zero-norm fingerprint in cell ({i}, {j}); cell skipped", RuntimeWarning)
                continue
            cos = np.sum(flat[i][a] * flat[j][b], axis=1) / denom
            out[i, j] = float(np.clip(cos, -1, 1).mean())
    return out


def diagonal_contrast(sim):
    """Mean diagonal minus mean off-diagonal, ignoring skipped cells."""
    sim = np.asarray(sim)
    off = ~np.eye(len(sim), dtype=bool)
    return float(np.nanmean(np.diag(sim)) - np.nanmean(sim[off]))


# -- aggregation ---------------------------------------------------------
def majority_vote(labels, cardinality):
    """Column-wise mode of (n, k) labels; ties go to the lower class index."""
    labels = np.asarray(labels, dtype=int)
    return np.array([np.bincount(labels[:, k], minlength=cardinality[k]).argmax() for k in range(labels.shape[1])])


def aggregate_predictions(pred, n=None):
    """Collapse the first ``n`` per-image predictions of one GM into one.

    Continuous outputs are averaged; discrete labels and loss flags are
    majority votes. Aggregated coarse and fine entries are 0/1 flags.
    """
    total = len(pred)
    n = total if n is None else n
    if n <= 0:
        raise MetricError("n must be >= 1")
    if n > total:
        raise MetricError(f"n={n} exceeds the {total} available images")
    sub = pred.subset(slice(0, n))
    if n == 1:
        return sub
    disc = majority_vote(sub.discrete, DISCRETE_CARDINALITY)
    fine = majority_vote(sub.fine_flags, (2,) * len(FINE_NAMES))
    coarse = majority_vote(sub.coarse_flags, (2,) * sub.coarse.shape[1])
    return Prediction(
        sub.continuous.mean(axis=0, keepdims=True),
        disc[None],
        [p.mean(axis=0, keepdims=True) for p in sub.discrete_probs],
        coarse[None].astype(np.float64),
        fine[None].astype(np.float64),
    )


# -- occlusion -----------------------------------------------------------
def _target_score(pred, parameter, target):
    """Per-image score: L1 for continuous, 1 - p(truth) otherwise."""
    if parameter in CONTINUOUS_NAMES:
        j = CONTINUOUS_NAMES.index(parameter)
        return np.abs(pred.continuous[:, j] - target)
    if parameter in DISCRETE_NAMES:
        k = DISCRETE_NAMES.index(parameter)
        probs = pred.discrete_probs[k]
        return 1.0 - probs[np.arange(len(probs)), np.asarray(target, dtype=int)]
    if parameter in FINE_NAMES:
        m = FINE_NAMES.index(parameter)
        p = pred.fine[:, m]
        return 1.0 - np.where(np.asarray(target) == 1, p, 1.0 - p)
    raise MetricError(f"unknown parameter {parameter!r}")


@dataclass
class OcclusionResult:
    heatmap: np.ndarray  # (H, W) mean score with the covering patch occluded
    baseline: float  # mean score without occlusion
    grid: np.ndarray  # (ceil(H/p), ceil(W/p))

    @property
    def delta(self):
        return self.heatmap - self.baseline


def occlusion_heatmap(predict, images, targets, parameter, patch=5, count=100, seed=0, fill=None):
    """Importance of each patch for one parameter, averaged over sampled images.

    ``predict`` maps (N, C, H, W) images to a :class:`Prediction`;
    ``targets`` holds the per-image ground truth for ``parameter``.
    ``fill`` defaults to the dataset mean pixel; an array of the same shape
    as ``images`` fills from that array instead.
    """
    images = np.asarray(images)
    n, c, h, w = images.shape
    if not 1 <= patch < min(h, w):
        raise MetricError(f"patch {patch} outside [1, {min(h, w) - 1}]")
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(n, size=min(count, n), replace=False))
    x = images[idx]
    tgt = np.asarray(targets)[idx]
    if fill is None:
        source = np.full_like(x, images.mean())
    elif np.ndim(fill) == 0:
        source = np.full_like(x, fill)
    else:
        source = np.asarray(fill, dtype=x.dtype)[idx]
    baseline = float(_target_score(predict(x), parameter, tgt).mean())
    gh, gw = math.ceil(h / patch), math.ceil(w / patch)
    grid = np.zeros((gh, gw))
    for gi in range(gh):
        for gj in range(gw):
            occ = x.copy()
            rs = slice(gi * patch, min(h, (gi + 1) * patch))
            cs = slice(gj * patch, min(w, (gj + 1) * patch))
            occ[:, :, rs, cs] = source[:, :, rs, cs]
            grid[gi, gj] = _target_score(predict(occ), parameter, tgt).mean()
    heat = np.repeat(np.repeat(grid, patch, axis=0), patch, axis=1)[:h, :w]
    return OcclusionResult(heat, baseline, grid)


# -- detection -----------------------------------------------------------
def auc(scores, labels):
    """Mann-Whitney AUC; tied scores count one half."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(int)
    if scores.shape != labels.shape:
        raise MetricError("length mismatch")
    pos = labels == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC needs both classes")
    _, inverse, counts = np.unique(scores, return_inverse=True, return_counts=True)
    upper = np.cumsum(counts)
    avg_rank = upper - (counts - 1) / 2.0  # 1-based average rank of each distinct value
    ranks = avg_rank[inverse]
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def binomial_acceptance(n, p, level=0.95):
    """Central interval [lo, hi] of success counts holding ``level`` mass under Binomial(n, p)."""
    logs = [math.lgamma(n + 1) - math.lgamma(k + 1) - math.lgamma(n - k + 1)
            + (k * math.log(p) if k else 0.0) + ((n - k) * math.log1p(-p) if n - k else 0.0)
            for k in range(n + 1)]
    pmf = np.exp(np.array(logs))
    cdf = np.cumsum(pmf)
    tail = (1.0 - level) / 2.0
    lo = int(np.searchsorted(cdf, tail, side="left"))
    hi = int(np.searchsorted(cdf, 1.0 - tail, side="left"))
    return lo, hi
