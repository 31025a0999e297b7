"""Cross-validation harness for parsing experiments on the toy zoo.

One run trains the zoo, samples images, then for each leave-GMs-out fold
trains the parser variants (full, no fingerprint, shuffled ground truth,
unweighted CE) and evaluates them on the held-out GMs. Everything is
seeded; ``report.json`` is byte-identical for identical configs.
"""
from __future__ import annotations

import hashlib
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import apps
from . import dataset as D
from . import metrics as M
from . import zoo
from .fingerprint import FenConfig, FingerprintLossWeights
from .parser import (
    COARSE_NAMES,
    CONTINUOUS_NAMES,
    DISCRETE_CARDINALITY,
    DISCRETE_NAMES,
    FINE_NAMES,
    ParserTrainConfig,
    PnConfig,
    Prediction,
    build_parser,
    coarse_from_fine,
    parser_class_weights,
)

VARIANTS = ("full", "no_fingerprint", "random_gt", "unweighted")
_VARIANT_CODE = {v: i for i, v in enumerate(VARIANTS)}


@dataclass
class ExperimentConfig:
    zoo: dict = field(default_factory=lambda: zoo.ZooConfig.default().to_dict())
    images_per_gm: int = 200
    folds: int = 6
    test_size: int = 2
    split_seed: int = 0
    seed: int = 0
    fen: dict = field(default_factory=lambda: asdict(FenConfig(blocks=2, features=16)))
    pn: dict = field(default_factory=lambda: PnConfig(conv_channels=(8, 16, 16, 32, 32), feature_dim=128,
                                                      head_hidden=32).to_dict())
    epochs: int = 10
    batch_size: int = 32
    fen_lr: float = 1e-4
    pn_lr: float = 1e-3
    gammas: tuple = (5.0, 5.0, 5.0)
    discrete_mode: str = "softmax"
    loss_weights: dict = field(default_factory=lambda: asdict(FingerprintLossWeights()))
    random_gt_repeats: int = 3
    aggregate_n: int = 10
    aggregate_repeats: int = 10
    mc_draws: int = 1_000_000
    variants: tuple = ("full", "random_gt")

    def __post_init__(self):
        self.gammas = tuple(self.gammas)
        self.variants = tuple(self.variants)
        unknown = set(self.variants) - set(VARIANTS)
        if unknown:
            raise ValueError(f"unknown variants {sorted(unknown)}")

    def to_dict(self):
        d = asdict(self)
        d["gammas"] = list(self.gammas)
        d["variants"] = list(self.variants)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def digest(self):
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def fen_config(self):
        return FenConfig(**self.fen)

    def pn_config(self):
        d = dict(self.pn)
        d["conv_channels"] = tuple(d["conv_channels"])
        return PnConfig(**d)

    def train_config(self, use_fingerprint=True):
        return ParserTrainConfig(self.fen_lr, self.pn_lr, self.gammas, use_fingerprint, self.discrete_mode,
                                 FingerprintLossWeights(**self.loss_weights))


def derive_seed(*parts):
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


# -- data ----------------------------------------------------------------
@dataclass
class ZooData:
    manifest: D.Manifest
    images: dict  # gm id -> (N, 1, H, W) float32, 8-bit quantized
    specs: list

    def stack(self, gm_ids):
        return np.concatenate([self.images[g] for g in gm_ids])


def _train_and_sample(args):
    spec, n, seed = args
    gen = zoo.train_toy_gm(spec)
    return gen, D.quantize(zoo.sample_images(gen, n, seed))


def build_zoo_data(config, root=None, jobs=1):
    """Train every zoo GM and sample its images; optionally write PGMs + manifest under ``root``."""
    specs = zoo.build_zoo(zoo.ZooConfig.from_dict(config.zoo))
    tasks = [(s, config.images_per_gm, derive_seed(config.seed, 1, i)) for i, s in enumerate(specs)]
    results = _map(_train_and_sample, tasks, jobs)
    images, entries = {}, []
    for spec, (gen, imgs) in zip(specs, results):
        arch, losses = zoo.ground_truth_vector(spec)
        paths = []
        if root is not None:
            gen.save(Path(root) / "checkpoints" / f"{spec.id}.ckpt")
            paths = D.write_gm_images(root, spec.id, imgs)
        entries.append(D.GmEntry(spec.id, spec.family, arch.continuous_raw.tolist(), arch.discrete.tolist(),
                                 losses.fine.tolist(), paths))
        images[spec.id] = imgs
    size = specs[0].image_size
    manifest = D.Manifest(entries, (size, size, 1), config.seed)
    if root is not None:
        D.write_manifest(manifest, Path(root) / "manifest.json")
    return ZooData(manifest, images, specs)


def load_zoo_data(root):
    """Read a zoo directory written by :func:`build_zoo_data`."""
    root = Path(root)
    manifest = D.read_manifest(root / "manifest.json")
    images = {g: D.load_images(manifest, root, g) for g in manifest.ids}
    specs = []
    for g in manifest.ids:
        ckpt = root / "checkpoints" / f"{g}.ckpt"
        specs.append(zoo.ToyGenerator.load(ckpt).spec if ckpt.exists() else None)
    return ZooData(manifest, images, specs)


def _map(fn, tasks, jobs):
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, tasks))
    return [fn(t) for t in tasks]


# -- fold training -------------------------------------------------------
def gm_targets(manifest, gm_ids):
    cont = np.array([manifest.entry(g).continuous_raw for g in gm_ids], dtype=np.float64)
    disc = np.array([manifest.entry(g).discrete for g in gm_ids], dtype=int)
    fine = np.array([manifest.entry(g).fine for g in gm_ids], dtype=int)
    return cont, disc, fine


def shuffled_targets(cont, disc, fine, rng):
    """Random ground truth: each parameter permuted across GMs, loss vectors permuted as rows."""
    return M.shuffle_columns(cont, rng), M.shuffle_columns(disc, rng), M.shuffle_rows(fine, rng)


def train_parser(images, cont_norm, disc, fine, config, variant, seed, class_weights=None):
    weighted = variant != "unweighted"
    if class_weights is None:
        class_weights = parser_class_weights(disc, fine, weighted=weighted)
    parser = build_parser(config.fen_config(), config.pn_config(), class_weights,
                          config.train_config(use_fingerprint=variant != "no_fingerprint"), seed=seed)
    rng = np.random.default_rng(seed)
    n = len(images)
    history = []
    for _ in range(config.epochs):
        order = rng.permutation(n)
        sums = {}
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            comps = parser.train_step(images[idx], cont_norm[idx].astype(np.float32), disc[idx], fine[idx])
            for k, v in comps.items():
                sums[k] = sums.get(k, 0.0) + v * len(idx)
        history.append({k: v / n for k, v in sums.items()})
    return parser, history


def _expand(per_gm, counts):
    return np.repeat(per_gm, counts, axis=0)


def evaluate_predictions(pred, cont_norm, disc, fine):
    """Metric block for per-image predictions against per-image targets."""
    per, l1 = M.l1_error(pred.continuous, cont_norm)
    f1 = [M.f1_score(pred.discrete[:, k], disc[:, k], c) for k, c in enumerate(DISCRETE_CARDINALITY)]
    coarse = coarse_from_fine(fine)
    coarse_f1 = [M.f1_score(pred.coarse_flags[:, i], coarse[:, i], 2) for i in range(len(COARSE_NAMES))]
    fine_f1 = [M.f1_score(pred.fine_flags[:, i], fine[:, i], 2) for i in range(len(FINE_NAMES))]
    return {
        "l1": l1,
        "l1_per_param": dict(zip(CONTINUOUS_NAMES, per.tolist())),
        "f1": float(np.mean(f1)),
        "f1_per_param": dict(zip(DISCRETE_NAMES, f1)),
        "coarse_f1": float(np.mean(coarse_f1)),
        "fine_f1": float(np.mean(fine_f1)),
        "n": int(len(pred)),
    }


def confusion_block(pred, disc):
    out = {}
    for k, (name, card) in enumerate(zip(DISCRETE_NAMES, DISCRETE_CARDINALITY)):
        cm = M.confusion(pred.discrete[:, k], disc[:, k], card, name)
        truth_classes = int(np.count_nonzero(cm.counts.sum(axis=0)))
        out[name] = {
            "counts": cm.counts.tolist(),
            "collapsed": bool(cm.collapsed and truth_classes >= 2),
            "truth_classes": truth_classes,
        }
    return out


def aggregated_metrics(pred, per_gm_counts, cont_norm_gm, disc_gm, fine_gm, n, repeats, seed):
    """Metrics of ``n``-image aggregates per test GM.

    Each repeat shuffles a GM's images and cuts them into disjoint groups of
    ``n``, so every image contributes once per repeat.
    """
    rng = np.random.default_rng(seed)
    offsets = np.concatenate([[0], np.cumsum(per_gm_counts)])
    agg = []
    cont_t, disc_t, fine_t = [], [], []
    for g in range(len(per_gm_counts)):
        groups = per_gm_counts[g] // n
        if groups == 0:
            raise M.MetricError(f"aggregation size {n} exceeds {per_gm_counts[g]} available images")
        for _ in range(repeats):
            order = offsets[g] + rng.permutation(per_gm_counts[g])[: groups * n]
            for idx in order.reshape(groups, n):
                agg.append(M.aggregate_predictions(pred.subset(idx), n))
                cont_t.append(cont_norm_gm[g])
                disc_t.append(disc_gm[g])
                fine_t.append(fine_gm[g])
    stacked = Prediction(
        np.concatenate([a.continuous for a in agg]),
        np.concatenate([a.discrete for a in agg]),
        [np.concatenate([a.discrete_probs[k] for a in agg]) for k in range(len(DISCRETE_NAMES))],
        np.concatenate([a.coarse for a in agg]),
        np.concatenate([a.fine for a in agg]),
    )
    return evaluate_predictions(stacked, np.array(cont_t), np.array(disc_t), np.array(fine_t))


def run_fold_variant(task):
    """Train and evaluate one (fold, variant, repeat); returns a JSON-ready dict."""
    data, config, fold_index, fold, variant, repeat = task
    manifest = data.manifest
    train_ids, test_ids = fold["train"], fold["test"]
    cont, disc, fine = gm_targets(manifest, train_ids)
    seed = derive_seed(config.seed, 2, fold_index, _VARIANT_CODE[variant], repeat)
    if variant == "random_gt":
        cont, disc, fine = shuffled_targets(cont, disc, fine, np.random.default_rng(seed))
    stats = D.NormalizationStats.from_raw(cont)
    counts = [len(data.images[g]) for g in train_ids]
    x = data.stack(train_ids)
    c_img = _expand(D.normalize_continuous(cont, stats), counts)
    parser, history = train_parser(x, c_img, _expand(disc, counts), _expand(fine, counts), config, variant, seed)

    t_cont, t_disc, t_fine = gm_targets(manifest, test_ids)
    t_counts = [len(data.images[g]) for g in test_ids]
    t_norm = D.normalize_continuous(t_cont, stats)
    xt = data.stack(test_ids)
    pred = parser.predict(xt)
    # targets live in [0, 1] after min-max scaling, so predictions are clipped to that box
    pred.continuous = np.clip(pred.continuous, 0.0, 1.0)
    ci, di, fi = _expand(t_norm, t_counts), _expand(t_disc, t_counts), _expand(t_fine, t_counts)
    result = {
        "fold": fold_index,
        "variant": variant,
        "repeat": repeat,
        "seed": seed,
        "test": list(test_ids),
        "stats": stats.to_dict(),
        "history": history,
        "single": evaluate_predictions(pred, ci, di, fi),
        "confusion": confusion_block(pred, di),
    }
    if variant == "full":
        result["aggregated"] = aggregated_metrics(pred, t_counts, t_norm, t_disc, t_fine, config.aggregate_n,
                                                  config.aggregate_repeats, derive_seed(seed, 3))
        result["random_guess"] = M.random_guess_level(ci, di, config.mc_draws, derive_seed(seed, 4))
    return result, parser


def fold_tasks(data, config, plan, only=None):
    tasks = []
    for i, fold in enumerate(plan.folds):
        if only is not None and i not in only:
            continue
        for variant in config.variants:
            repeats = config.random_gt_repeats if variant == "random_gt" else 1
            for r in range(repeats):
                tasks.append((data, config, i, fold, variant, r))
    return tasks


def summarize(results, folds):
    """Fold-level means per variant; random-GT repeats are averaged within each fold.

    ``folds`` is a fold count or an explicit list of fold indices.
    """
    folds = range(folds) if isinstance(folds, int) else sorted(folds)
    summary = {}
    by_variant = {}
    for r in results:
        by_variant.setdefault(r["variant"], []).append(r)
    for variant, rows in by_variant.items():
        per_fold = []
        for f in folds:
            fr = [r for r in rows if r["fold"] == f]
            block = {key: float(np.mean([r["single"][key] for r in fr]))
                     for key in ("l1", "f1", "coarse_f1", "fine_f1")}
            if variant == "full":
                block["agg_l1"] = fr[0]["aggregated"]["l1"]
                block["agg_f1"] = fr[0]["aggregated"]["f1"]
                block["random_guess_l1"] = fr[0]["random_guess"]["l1"]
                block["random_guess_f1"] = fr[0]["random_guess"]["f1"]
            block["collapsed"] = sorted({name for r in fr for name, c in r["confusion"].items() if c["collapsed"]})
            per_fold.append(block)
        keys = [k for k in per_fold[0] if k != "collapsed"]
        summary[variant] = {
            "per_fold": per_fold,
            "mean": {k: float(np.mean([b[k] for b in per_fold])) for k in keys},
            "std": {k: float(np.std([b[k] for b in per_fold])) for k in keys},
        }
    return summary


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    plan: D.SplitPlan
    results: list
    summary: dict
    parsers: dict  # fold -> trained full-variant parser

    def report(self):
        return {
            "config": self.config.to_dict(),
            "config_digest": self.config.digest(),
            "splits": self.plan.to_dict(),
            "summary": self.summary,
            "runs": self.results,
        }

    def report_bytes(self):
        return (json.dumps(self.report(), indent=1, sort_keys=True) + "\n").encode()


def run_experiment(config, data=None, jobs=1, out=None, only=None):
    """Cross-validated parsing experiment over all folds (or the indices in ``only``).

    Writes ``config.json`` and ``report.json`` under ``out`` if given.
    """
    data = data or build_zoo_data(config, jobs=jobs)
    plan = D.make_splits(data.manifest, config.folds, config.test_size, config.split_seed)
    only = None if only is None else sorted(set(only))
    if only is not None and not set(only) <= set(range(config.folds)):
        raise ValueError(f"fold indices {only} outside 0..{config.folds - 1}")
    outputs = _map(run_fold_variant, fold_tasks(data, config, plan, only), jobs)
    results = [r for r, _ in outputs]
    parsers = {r["fold"]: p for r, p in outputs if r["variant"] == "full"}
    res = ExperimentResult(config, plan, results, summarize(results, only or config.folds), parsers)
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(config.to_dict(), indent=1, sort_keys=True) + "\n")
        (out / "report.json").write_bytes(res.report_bytes())
    return res


# -- fingerprint studies and applications --------------------------------
def genuine_images(families, n, seed, size=16):
    """Procedural target samples, split evenly over ``families`` (the analog of real photos)."""
    rng = np.random.default_rng(seed)
    counts = [n // len(families) + (i < n % len(families)) for i in range(len(families))]
    imgs = [zoo.render_targets(f, rng.standard_normal((k, zoo.LATENT_DIM)), size) for f, k in zip(families, counts)]
    return D.quantize(np.concatenate(imgs)).astype(np.float32)


def families(data):
    return sorted({g.family for g in data.manifest.gms})


def similarity_study(parser, data, per_gm=60, pairs=50, seed=0):
    """GM x GM cosine-similarity matrix of FEN fingerprints."""
    fps = [parser.fingerprints(data.images[g][:per_gm]) for g in data.manifest.ids]
    sim = M.similarity_matrix(fps, pairs, seed)
    return sim, M.diagonal_contrast(sim)


DETECTOR_TRAIN = {"epochs": 3, "head_lr": 3e-3}


def detection_sets(data, fold, seed=0, per_gm=None):
    """(genuine_train, fake_train, genuine_test, fake_test) for one fold.

    Fakes come from the fold's training GMs for training and from its
    held-out GMs for testing; genuine images are fresh procedural samples.
    """
    fams = families(data)
    size = data.manifest.image_shape[0]
    fake = np.concatenate([data.images[g][:per_gm] for g in fold["train"]])
    test_fake = data.stack(fold["test"])
    genuine = genuine_images(fams, len(fake), derive_seed(seed, 5), size)
    test_real = genuine_images(fams, len(test_fake), derive_seed(seed, 6), size)
    return genuine, fake, test_real, test_fake


def detection_study(data, fold, app_config=None, seed=0, per_gm=None, fen_config=None):
    """Detector trained on the fold's training GMs, scored on its held-out GMs plus fresh genuine images."""
    app_config = app_config or apps.AppTrainConfig(**DETECTOR_TRAIN)
    genuine, fake, test_real, test_fake = detection_sets(data, fold, seed, per_gm)
    model = apps.train_detector(genuine, fake, fen_config, app_config, seed)
    scores = apps.detect(model, np.concatenate([test_real, test_fake]))
    labels = np.concatenate([np.zeros(len(test_real), int), np.ones(len(test_fake), int)])
    return model, scores, labels, M.auc(scores, labels)


def attribution_sets(data, gm_ids, seed=0, train_fraction=0.75):
    """Per-class training arrays plus pooled held-out images and labels; class 0 is genuine."""
    size = data.manifest.image_shape[0]
    per = len(data.images[gm_ids[0]])
    genuine = genuine_images(families(data), per, derive_seed(seed, 7), size)
    classes = [genuine] + [data.images[g] for g in gm_ids]
    cut = [int(round(len(c) * train_fraction)) for c in classes]
    if any(k == 0 or k == len(c) for k, c in zip(cut, classes)):
        raise ValueError("train fraction leaves a class without train or test images")
    test = np.concatenate([c[k:] for c, k in zip(classes, cut)])
    labels = np.concatenate([np.full(len(c) - k, i) for i, (c, k) in enumerate(zip(classes, cut))])
    return [c[:k] for c, k in zip(classes, cut)], test, labels


def attribution_study(data, gm_ids, app_config=None, seed=0, train_fraction=0.75, fen_config=None):
    """Closed-set attribution over genuine + ``gm_ids``; accuracy on held-out images of each class."""
    train, test, labels = attribution_sets(data, gm_ids, seed, train_fraction)
    model = apps.train_attribution(train, fen_config, app_config, seed)
    return model, test, labels, apps.attribution_accuracy(model, test, labels)


def content_probe_study(parser, data, fold, app_config=None, seed=0, per_gm=100):
    """Content-family probe on a parsing-trained FEN (frozen)."""
    fams = families(data)
    fam_of = {g.id: g.family for g in data.manifest.gms}
    train = [np.concatenate([data.images[g][:per_gm] for g in fold["train"] if fam_of[g] == f]) for f in fams]
    test = [np.concatenate([data.images[g] for g in fold["test"] if fam_of[g] == f]) for f in fams]
    return apps.content_probe(parser.fen, train, test, app_config, seed)


def imbalance_control_study(data, config, fold, parameter="skip_connection", weighted=False, seed=0):
    """Train on a deliberately imbalanced binary parameter and report the held-out confusion.

    Only the first training GM keeps class 1; the two held-out GMs are
    relabelled 0 and 1. Unweighted CE is expected to predict the majority
    class for everything, which is the collapse the weighting guards against.
    """
    k = DISCRETE_NAMES.index(parameter)
    if DISCRETE_CARDINALITY[k] != 2:
        raise ValueError(f"{parameter} is not binary")
    train_ids, test_ids = fold["train"], fold["test"]
    if len(test_ids) != 2:
        raise ValueError("the control needs exactly two held-out GMs")
    cont, disc, fine = gm_targets(data.manifest, train_ids)
    disc[:, k] = 0
    disc[0, k] = 1
    stats = D.NormalizationStats.from_raw(cont)
    counts = [len(data.images[g]) for g in train_ids]
    variant = "full" if weighted else "unweighted"
    parser, _ = train_parser(data.stack(train_ids), _expand(D.normalize_continuous(cont, stats), counts),
                             _expand(disc, counts), _expand(fine, counts), config, variant, seed)
    truth = np.repeat([0, 1], [len(data.images[g]) for g in test_ids])
    pred = parser.predict(data.stack(test_ids)).discrete[:, k]
    cm = M.confusion(pred, truth, 2, parameter)
    return {"parameter": parameter, "weighted": weighted, "counts": cm.counts.tolist(),
            "collapsed": bool(cm.collapsed), "train_minority_fraction": counts[0] / sum(counts)}
