"""Command-line entry point.

    gmparse zoo build --out runs/zoo
    gmparse parse train --data runs/zoo --out runs/parse
    gmparse parse eval --data runs/zoo --model runs/parse --images-per-gm 10 --out runs/eval
    gmparse fingerprint extract --model runs/parse/checkpoints/fold0.ckpt --image img.pgm --out runs/fp
    gmparse baseline random-gt --data runs/zoo --out runs/rgt
    gmparse similarity --data runs/zoo --model runs/parse/checkpoints/fold0.ckpt --out runs/sim
    gmparse deepfake train|eval ...
    gmparse attribute train|eval ...
    gmparse heatmap --data runs/zoo --model runs/parse/checkpoints/fold0.ckpt --parameter num_blocks --out runs/hm
    gmparse gradcheck

Every command that takes ``--out`` writes ``config.json`` there first.
The master seed is ``--seed`` if given, else ``$GMPARSE_SEED``, else 0.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from . import apps
from . import dataset as D
from . import experiments as E
from . import metrics as M
from . import spectral
from . import zoo
from .checkpoint import load_checkpoint
from .fingerprint import FenConfig, FingerprintNet
from .gradcheck import gradient_suite
from .parser import CONTINUOUS_NAMES, DISCRETE_NAMES, FINE_NAMES, load_parser, save_parser

GRAD_TOLERANCE = 1e-4


class CliError(RuntimeError):
    pass


# -- helpers -------------------------------------------------------------
def master_seed(args):
    if getattr(args, "seed", None) is not None:
        return args.seed
    env = os.environ.get("GMPARSE_SEED")
    if env is None or env == "":
        return 0
    try:
        return int(env)
    except ValueError:
        raise CliError(f"GMPARSE_SEED must be an integer, got {env!r}") from None


def _jsonable(value):
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


def write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")
    return path


def snapshot(args, seed, **extra):
    """Write the run's config.json before doing any work."""
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    params = {k: _jsonable(v) for k, v in vars(args).items() if k not in ("func", "seed")}
    write_json(out / "config.json", {"version": __version__, "command": args.command_path, "seed": seed,
                                      "args": params, **extra})
    return out


def write_pgm_scaled(path, values, lo=None, hi=None, zoom=1):
    """Linear map of ``values`` onto 0..255 and write as binary PGM."""
    values = np.asarray(values, dtype=np.float64)
    lo = np.nanmin(values) if lo is None else lo
    hi = np.nanmax(values) if hi is None else hi
    span = hi - lo if hi > lo else 1.0
    codes = np.round(255 * np.clip((np.nan_to_num(values, nan=lo) - lo) / span, 0, 1)).astype(np.uint8)
    if zoom > 1:
        codes = np.repeat(np.repeat(codes, zoom, axis=0), zoom, axis=1)
    D.write_pnm(path, codes)


def read_image(path):
    """A PGM/PPM file as float32 (C, H, W) in [-1, 1]."""
    px = D.read_pnm(path)
    arr = px[None] if px.ndim == 2 else px.transpose(2, 0, 1)
    return D.from_uint8(arr)


def load_fen(path):
    """The FEN from any checkpoint that stores one (parser, detector, attribution)."""
    header, state = load_checkpoint(path)
    meta = header.get("extra", {})
    if "fen" not in meta:
        raise CliError(f"{path}: checkpoint has no FEN")
    fen = FingerprintNet(FenConfig(**meta["fen"]))
    fen.load_state_dict({k[4:]: v for k, v in state.items() if k.startswith("fen.")})
    return fen.eval(), meta


def fingerprints_of(fen, images, batch_size=256):
    from . import tensor as T

    fen.eval()
    out = []
    with T.no_grad():
        for i in range(0, len(images), batch_size):
            out.append(fen(T.Tensor(images[i:i + batch_size])).data)
    return np.concatenate(out)


def load_data(path):
    path = Path(path)
    if not (path / "manifest.json").exists():
        raise CliError(f"{path}: no manifest.json (run `gmparse zoo build` first)")
    return E.load_zoo_data(path)


def zoo_config_of(data_dir):
    """Experiment config recorded by ``zoo build``, if any."""
    cfg = Path(data_dir) / "config.json"
    if cfg.exists():
        return json.loads(cfg.read_text()).get("experiment")
    return None


def parser_checkpoints(model):
    model = Path(model)
    if model.is_file():
        return [model]
    found = sorted((model / "checkpoints").glob("fold*.ckpt"))
    if not found:
        raise CliError(f"{model}: no parser checkpoints under checkpoints/")
    return found


def split_csv(value):
    return [v for v in value.split(",") if v]


def int_list(value):
    try:
        return [int(v) for v in split_csv(value)]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {value!r}") from None


def experiment_config(args, seed, data_dir, **overrides):
    base = zoo_config_of(data_dir) or {}
    cfg = E.ExperimentConfig(
        zoo=base.get("zoo", zoo.ZooConfig.default().to_dict()),
        images_per_gm=base.get("images_per_gm", 200),
        seed=seed,
        split_seed=args.split_seed,
        epochs=args.epochs,
        batch_size=args.batch_size,
        fen_lr=args.fen_lr,
        pn_lr=args.pn_lr,
        discrete_mode=args.discrete_mode,
        aggregate_n=args.images_per_gm,
        **overrides,
    )
    return cfg


# -- commands ------------------------------------------------------------
def cmd_zoo_build(args):
    seed = master_seed(args)
    zcfg = zoo.ZooConfig.default(steps=args.steps, lr=args.lr, master_seed=seed)
    cfg = E.ExperimentConfig(zoo=zcfg.to_dict(), images_per_gm=args.images_per_gm, seed=seed)
    out = snapshot(args, seed, experiment=cfg.to_dict())
    data = E.build_zoo_data(cfg, root=out, jobs=args.jobs)
    print(f"zoo: {len(data.manifest.gms)} GMs x {args.images_per_gm} images -> {out}")
    for spec in data.specs:
        print(f"  {spec.id}  {spec.family:8s} blocks={spec.blocks} lpb={spec.layers_per_block} "
              f"losses={'+'.join(spec.losses)}")
    return 0


def _save_fold_parsers(res, out):
    for fold, parser in sorted(res.parsers.items()):
        run = next(r for r in res.results if r["fold"] == fold and r["variant"] == "full")
        entry = res.plan.folds[fold]
        save_parser(parser, out / "checkpoints" / f"fold{fold}.ckpt",
                    {"fold": fold, "train": entry["train"], "test": entry["test"], "stats": run["stats"]})


def _print_summary(summary):
    for variant, block in sorted(summary.items()):
        mean, std = block["mean"], block["std"]
        line = f"{variant:15s} L1 {mean['l1']:.3f}±{std['l1']:.3f}  F1 {mean['f1']:.3f}±{std['f1']:.3f}"
        if "random_guess_l1" in mean:
            line += f"  | random guess L1 {mean['random_guess_l1']:.3f} F1 {mean['random_guess_f1']:.3f}"
        print(line)


def cmd_parse_train(args):
    seed = master_seed(args)
    variants = tuple(split_csv(args.variants))
    cfg = experiment_config(args, seed, args.data, variants=variants, random_gt_repeats=args.repeats)
    out = snapshot(args, seed, experiment=cfg.to_dict())
    data = load_data(args.data)
    res = E.run_experiment(cfg, data, jobs=args.jobs, out=out, only=args.folds)
    _save_fold_parsers(res, out)
    _print_summary(res.summary)
    return 0


def cmd_baseline_random_gt(args):
    seed = master_seed(args)
    cfg = experiment_config(args, seed, args.data, variants=("random_gt",), random_gt_repeats=args.repeats)
    out = snapshot(args, seed, experiment=cfg.to_dict())
    data = load_data(args.data)
    res = E.run_experiment(cfg, data, jobs=args.jobs, out=out, only=args.folds)
    guesses = []
    for fold in sorted({r["fold"] for r in res.results}):
        cont, disc, _ = E.gm_targets(data.manifest, res.plan.folds[fold]["test"])
        stats = D.NormalizationStats(*[np.asarray(v) for v in
                                       next(r for r in res.results if r["fold"] == fold)["stats"].values()])
        counts = [len(data.images[g]) for g in res.plan.folds[fold]["test"]]
        guess = M.random_guess_level(np.repeat(D.normalize_continuous(cont, stats), counts, axis=0),
                                     np.repeat(disc, counts, axis=0), cfg.mc_draws, E.derive_seed(seed, 9, fold))
        guesses.append({"fold": fold, "l1": guess["l1"], "f1": guess["f1"]})
    write_json(out / "random_guess.json", guesses)
    _print_summary(res.summary)
    print(f"random guess    L1 {np.mean([g['l1'] for g in guesses]):.3f}  F1 {np.mean([g['f1'] for g in guesses]):.3f}")
    return 0


def _write_confusions(out, fold, block):
    for name, c in block.items():
        with open(out / f"confusion_fold{fold}_{name}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["predicted\\truth"] + list(range(len(c["counts"]))))
            for i, row in enumerate(c["counts"]):
                w.writerow([i] + row)


def cmd_parse_eval(args):
    seed = master_seed(args)
    out = snapshot(args, seed)
    data = load_data(args.data)
    rows = []
    for ckpt in parser_checkpoints(args.model):
        parser, meta = load_parser(ckpt)
        test = meta["test"]
        stats = D.NormalizationStats(meta["stats"]["min"], meta["stats"]["max"])
        cont, disc, fine = E.gm_targets(data.manifest, test)
        norm = D.normalize_continuous(cont, stats)
        counts = [len(data.images[g]) for g in test]
        pred = parser.predict(data.stack(test))
        pred.continuous = np.clip(pred.continuous, 0.0, 1.0)
        ci, di, fi = (np.repeat(v, counts, axis=0) for v in (norm, disc, fine))
        if args.images_per_gm > 1:
            block = E.aggregated_metrics(pred, counts, norm, disc, fine, args.images_per_gm, args.repeats,
                                         E.derive_seed(seed, 8, meta["fold"]))
        else:
            block = E.evaluate_predictions(pred, ci, di, fi)
        confusion = E.confusion_block(pred, di)
        _write_confusions(out, meta["fold"], confusion)
        rows.append({"fold": meta["fold"], "test": test, "images_per_gm": args.images_per_gm, **block,
                     "collapsed": [k for k, c in confusion.items() if c["collapsed"]]})
        print(f"fold {meta['fold']} ({','.join(test)}): L1 {block['l1']:.3f}  F1 {block['f1']:.3f}  "
              f"n={block['n']}")
    report = {"folds": rows, "mean": {k: float(np.mean([r[k] for r in rows])) for k in ("l1", "f1")}}
    write_json(out / "report.json", report)
    print(f"mean: L1 {report['mean']['l1']:.3f}  F1 {report['mean']['f1']:.3f}")
    return 0


def cmd_fingerprint_extract(args):
    seed = master_seed(args)
    out = snapshot(args, seed)
    fen, _ = load_fen(args.model)
    images = np.stack([read_image(p) for p in args.image])
    if images.shape[1:] != (fen.config.channels, fen.config.height, fen.config.width):
        raise CliError(f"image shape {images.shape[1:]} does not match the FEN input")
    fps = fingerprints_of(fen, images)
    for path, fp in zip(args.image, fps):
        stem = Path(path).stem
        blob = np.ascontiguousarray(fp, dtype="<f4")
        (out / f"{stem}.f32").write_bytes(blob.tobytes())
        write_json(out / f"{stem}.json", {"shape": list(fp.shape), "dtype": "float32", "byteorder": "little",
                                          "layout": "row-major", "source": str(path)})
        if args.spectrum:
            mag = spectral.spectrum_magnitude_image(spectral.dft2(fp.astype(np.float64).mean(axis=0)),
                                                    log_scale=True)
            write_pgm_scaled(out / f"{stem}_spectrum.pgm", mag, zoom=args.zoom)
        print(f"{path}: fingerprint {tuple(fp.shape)} |F|={float(np.linalg.norm(fp)):.4f}")
    return 0


def cmd_similarity(args):
    seed = master_seed(args)
    out = snapshot(args, seed)
    data = load_data(args.data)
    fen, _ = load_fen(args.model)
    ids = data.manifest.ids
    fps = [fingerprints_of(fen, data.images[g][:args.per_gm]) for g in ids]
    sim = M.similarity_matrix(fps, args.pairs, seed)
    contrast = M.diagonal_contrast(sim)
    with open(out / "similarity.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["gm"] + ids)
        for g, row in zip(ids, sim):
            w.writerow([g] + [f"{v:.6f}" for v in row])
    write_pgm_scaled(out / "similarity.pgm", sim, -1.0, 1.0, zoom=8)
    write_json(out / "report.json", {"ids": ids, "matrix": np.where(np.isnan(sim), None, sim).tolist(),
                                     "diagonal_minus_offdiagonal": contrast, "pairs_per_cell": args.pairs})
    print(f"similarity: diagonal - off-diagonal = {contrast:.4f}")
    return 0


def _app_config(args, defaults):
    values = dict(defaults)
    for key in ("epochs", "batch_size", "fen_lr", "head_lr"):
        if getattr(args, key, None) is not None:
            values[key] = getattr(args, key)
    values["use_fingerprint"] = not args.no_fingerprint
    return apps.AppTrainConfig(**values)


def _fold_of(data, split_seed, fold):
    plan = D.make_splits(data.manifest, seed=split_seed)
    if not 0 <= fold < len(plan.folds):
        raise CliError(f"fold {fold} outside 0..{len(plan.folds) - 1}")
    return plan.folds[fold]


def cmd_deepfake_train(args):
    seed = master_seed(args)
    config = _app_config(args, E.DETECTOR_TRAIN)
    out = snapshot(args, seed, train=asdict(config))
    data = load_data(args.data)
    fold = _fold_of(data, args.split_seed, args.fold)
    genuine, fake, _, _ = E.detection_sets(data, fold, seed)
    model = apps.train_detector(genuine, fake, None, config, seed)
    apps.save_classifier(model, out / "checkpoints" / "detector.ckpt",
                         {"fold": args.fold, "split_seed": args.split_seed, "seed": seed, "test": fold["test"]})
    print(f"detector trained on {len(genuine)} genuine + {len(fake)} fake images "
          f"(final CE {model.history[-1]['ce']:.4f})")
    return 0


def cmd_deepfake_eval(args):
    seed = master_seed(args)
    out = snapshot(args, seed)
    data = load_data(args.data)
    ckpt = Path(args.model)
    ckpt = ckpt / "checkpoints" / "detector.ckpt" if ckpt.is_dir() else ckpt
    model, meta = apps.load_classifier(ckpt)
    fold = _fold_of(data, meta["split_seed"], meta["fold"])
    _, _, test_real, test_fake = E.detection_sets(data, fold, meta["seed"])
    real_paths = D.write_gm_images(out, "genuine", test_real)
    fake_paths = [str(Path(args.data) / p) for g in fold["test"] for p in data.manifest.entry(g).image_paths]
    if len(fake_paths) != len(test_fake):
        fake_paths = [f"{g}[{i}]" for g in fold["test"] for i in range(len(data.images[g]))]
    scores = apps.detect(model, np.concatenate([test_real, test_fake]))
    labels = np.concatenate([np.zeros(len(test_real), int), np.ones(len(test_fake), int)])
    with open(out / "scores.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path", "score", "label"])
        for p, s, y in zip(real_paths + fake_paths, scores, labels):
            w.writerow([p, f"{s:.6f}", int(y)])
    value = M.auc(scores, labels)
    write_json(out / "report.json", {"auc": value, "n_genuine": len(test_real), "n_fake": len(test_fake),
                                     "held_out_gms": fold["test"]})
    print(f"deepfake AUC on held-out GMs {','.join(fold['test'])}: {value:.4f}")
    return 0


def cmd_attribute_train(args):
    seed = master_seed(args)
    config = _app_config(args, {})
    out = snapshot(args, seed, train=asdict(config))
    data = load_data(args.data)
    gms = split_csv(args.gms)
    unknown = [g for g in gms if g not in data.manifest.ids]
    if unknown:
        raise CliError(f"unknown GM ids {unknown}")
    train, _, _ = E.attribution_sets(data, gms, seed, args.train_fraction)
    model = apps.train_attribution(train, None, config, seed)
    apps.save_classifier(model, out / "checkpoints" / "attribution.ckpt",
                         {"classes_named": ["genuine"] + gms, "seed": seed, "train_fraction": args.train_fraction})
    print(f"attribution over {['genuine'] + gms} trained on {sum(len(t) for t in train)} images")
    return 0


def cmd_attribute_eval(args):
    seed = master_seed(args)
    out = snapshot(args, seed)
    data = load_data(args.data)
    ckpt = Path(args.model)
    ckpt = ckpt / "checkpoints" / "attribution.ckpt" if ckpt.is_dir() else ckpt
    model, meta = apps.load_classifier(ckpt)
    names = meta["classes_named"]
    _, test, labels = E.attribution_sets(data, names[1:], meta["seed"], meta["train_fraction"])
    pred, probs = apps.attribute(model, test)
    acc = apps.attribution_accuracy(model, test, labels)
    with open(out / "predictions.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "label", "predicted"] + [f"p_{n}" for n in names])
        for i, (y, p, pr) in enumerate(zip(labels, pred, probs)):
            w.writerow([i, names[y], names[p]] + [f"{v:.6f}" for v in pr])
    write_json(out / "report.json", {"accuracy": acc, "n": len(labels), "classes": names,
                                     "chance": 1.0 / len(names)})
    print(f"attribution accuracy over {len(names)} classes: {acc:.4f} (n={len(labels)})")
    return 0


def _parameter_targets(parameter, data, gm_ids, stats):
    cont, disc, fine = E.gm_targets(data.manifest, gm_ids)
    counts = [len(data.images[g]) for g in gm_ids]
    if parameter in CONTINUOUS_NAMES:
        col = D.normalize_continuous(cont, stats)[:, CONTINUOUS_NAMES.index(parameter)]
    elif parameter in DISCRETE_NAMES:
        col = disc[:, DISCRETE_NAMES.index(parameter)]
    elif parameter in FINE_NAMES:
        col = fine[:, FINE_NAMES.index(parameter)]
    else:
        raise CliError(f"unknown parameter {parameter!r}")
    return np.repeat(col, counts)


def cmd_heatmap(args):
    seed = master_seed(args)
    out = snapshot(args, seed)
    data = load_data(args.data)
    parser, meta = load_parser(args.model)
    gms = split_csv(args.gms) if args.gms else meta["test"]
    stats = D.NormalizationStats(meta["stats"]["min"], meta["stats"]["max"])
    targets = _parameter_targets(args.parameter, data, gms, stats)

    def predict(x):
        pred = parser.predict(x)
        pred.continuous = np.clip(pred.continuous, 0.0, 1.0)
        return pred

    res = M.occlusion_heatmap(predict, data.stack(gms), targets, args.parameter, args.patch, args.count, seed)
    np.savetxt(out / "heatmap.csv", res.heatmap, delimiter=",", fmt="%.6f")
    write_pgm_scaled(out / "heatmap.pgm", res.delta, zoom=args.zoom)
    write_json(out / "report.json", {"parameter": args.parameter, "baseline": res.baseline,
                                     "grid": res.grid.tolist(), "gms": gms, "patch": args.patch})
    print(f"heatmap for {args.parameter}: baseline {res.baseline:.4f}, "
          f"max increase {float(res.delta.max()):.4f}")
    return 0


def cmd_gradcheck(args):
    seed = master_seed(args)
    if args.out:
        snapshot(args, seed)
    errors = gradient_suite(seed=seed, eps=args.eps)
    width = max(len(k) for k in errors)
    for name, err in errors.items():
        print(f"{name:{width}s}  {err:.3e}  {'ok' if err < GRAD_TOLERANCE else 'FAIL'}")
    worst = max(errors.values())
    print(f"max relative error {worst:.3e} (tolerance {GRAD_TOLERANCE:g})")
    if args.out:
        write_json(Path(args.out) / "report.json", {"errors": errors, "tolerance": GRAD_TOLERANCE})
    return 0 if worst < GRAD_TOLERANCE else 1


# -- argument parsing ----------------------------------------------------
def _common(p, out_required=True):
    p.add_argument("--out", type=Path, required=out_required, help="run directory")
    p.add_argument("--seed", type=int, default=None, help="master seed (default: $GMPARSE_SEED or 0)")
    p.add_argument("--jobs", type=int, default=1, help="worker processes")


def _training(p):
    p.add_argument("--data", type=Path, required=True, help="zoo directory from `zoo build`")
    p.add_argument("--folds", type=int_list, default=None, help="fold indices, e.g. 0,3 (default: all)")
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--fen-lr", type=float, default=1e-4)
    p.add_argument("--pn-lr", type=float, default=1e-3)
    p.add_argument("--discrete-mode", choices=("softmax", "sigmoid"), default="softmax")
    p.add_argument("--images-per-gm", type=int, default=10, help="aggregation size reported for the full variant")
    p.add_argument("--repeats", type=int, default=3, help="random ground-truth shuffles per fold")


def _app_args(p, fold=False):
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--fen-lr", type=float, default=None)
    p.add_argument("--head-lr", type=float, default=None)
    p.add_argument("--no-fingerprint", action="store_true", help="drop the fingerprint losses")
    if fold:
        p.add_argument("--fold", type=int, default=0)
        p.add_argument("--split-seed", type=int, default=0)


def build_parser():
    top = argparse.ArgumentParser(prog="gmparse", description=__doc__.split("\n")[0])
    top.add_argument("--version", action="version", version=f"gmparse {__version__}")
    sub = top.add_subparsers(dest="command", required=True, metavar="command")

    zoo_p = sub.add_parser("zoo", help="toy generative-model zoo").add_subparsers(dest="action", required=True)
    p = zoo_p.add_parser("build", help="train the zoo and sample images")
    _common(p)
    p.add_argument("--images-per-gm", type=int, default=200)
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--lr", type=float, default=2e-3)
    p.set_defaults(func=cmd_zoo_build, command_path="zoo build")

    parse_p = sub.add_parser("parse", help="train or evaluate the model parser").add_subparsers(
        dest="action", required=True)
    p = parse_p.add_parser("train", help="cross-validated parser training")
    _common(p)
    _training(p)
    p.add_argument("--variants", default="full", help="comma list of full,no_fingerprint,random_gt,unweighted")
    p.set_defaults(func=cmd_parse_train, command_path="parse train")
    p = parse_p.add_parser("eval", help="evaluate trained parsers on their held-out GMs")
    _common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--model", type=Path, required=True, help="parse-train run directory or checkpoint")
    p.add_argument("--images-per-gm", type=int, default=1, help="aggregate n images per prediction")
    p.add_argument("--repeats", type=int, default=10)
    p.set_defaults(func=cmd_parse_eval, command_path="parse eval")

    fp_p = sub.add_parser("fingerprint", help="fingerprint tools").add_subparsers(dest="action", required=True)
    p = fp_p.add_parser("extract", help="write fingerprints of images as raw float32 + JSON")
    _common(p)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--image", nargs="+", required=True)
    p.add_argument("--spectrum", action="store_true", help="also write a log-magnitude spectrum PGM")
    p.add_argument("--zoom", type=int, default=8)
    p.set_defaults(func=cmd_fingerprint_extract, command_path="fingerprint extract")

    base_p = sub.add_parser("baseline", help="baselines").add_subparsers(dest="action", required=True)
    p = base_p.add_parser("random-gt", help="parser retrained on shuffled ground truth")
    _common(p)
    _training(p)
    p.set_defaults(func=cmd_baseline_random_gt, command_path="baseline random-gt")

    p = sub.add_parser("similarity", help="GM x GM fingerprint cosine-similarity matrix")
    _common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--pairs", type=int, default=50)
    p.add_argument("--per-gm", type=int, default=60)
    p.set_defaults(func=cmd_similarity, command_path="similarity")

    df_p = sub.add_parser("deepfake", help="genuine vs fake detection").add_subparsers(dest="action", required=True)
    p = df_p.add_parser("train")
    _common(p)
    _app_args(p, fold=True)
    p.set_defaults(func=cmd_deepfake_train, command_path="deepfake train")
    p = df_p.add_parser("eval")
    _common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--model", type=Path, required=True)
    p.set_defaults(func=cmd_deepfake_eval, command_path="deepfake eval")

    at_p = sub.add_parser("attribute", help="closed-set image attribution").add_subparsers(
        dest="action", required=True)
    p = at_p.add_parser("train")
    _common(p)
    _app_args(p)
    p.add_argument("--gms", default="gm00,gm03,gm06,gm09")
    p.add_argument("--train-fraction", type=float, default=0.75)
    p.set_defaults(func=cmd_attribute_train, command_path="attribute train")
    p = at_p.add_parser("eval")
    _common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--model", type=Path, required=True)
    p.set_defaults(func=cmd_attribute_eval, command_path="attribute eval")

    p = sub.add_parser("heatmap", help="occlusion heatmap for one parser output")
    _common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--model", type=Path, required=True, help="parser checkpoint")
    p.add_argument("--parameter", required=True, choices=CONTINUOUS_NAMES + DISCRETE_NAMES + FINE_NAMES)
    p.add_argument("--gms", default=None, help="comma list of GM ids (default: the checkpoint's test GMs)")
    p.add_argument("--patch", type=int, default=5)
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--zoom", type=int, default=8)
    p.set_defaults(func=cmd_heatmap, command_path="heatmap")

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    _common(p, out_required=False)
    p.add_argument("--eps", type=float, default=1e-6)
    p.set_defaults(func=cmd_gradcheck, command_path="gradcheck")
    return top


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on unknown commands or flags
    try:
        return args.func(args)
    except (CliError, ValueError, KeyError, OSError, FloatingPointError, RuntimeError) as exc:
        print(f"gmparse {args.command_path}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
