import json

import numpy as np
import pytest

from gmparse import dataset as D
from gmparse.zoo import build_zoo, ground_truth_vector


def zoo_manifest(images=None):
    entries = []
    for s in build_zoo():
        arch, losses = ground_truth_vector(s)
        entries.append(D.GmEntry(s.id, s.family, arch.continuous_raw.tolist(), arch.discrete.tolist(),
                                 losses.fine.tolist(), (images or {}).get(s.id, [])))
    return D.Manifest(entries, (16, 16, 1), seed=0)


# -- images --------------------------------------------------------------
def test_pgm_and_ppm_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    gray = rng.integers(0, 256, (5, 7), dtype=np.uint8)
    rgb = rng.integers(0, 256, (4, 3, 3), dtype=np.uint8)
    D.write_pnm(tmp_path / "g.pgm", gray)
    D.write_pnm(tmp_path / "c.ppm", rgb)
    np.testing.assert_array_equal(D.read_pnm(tmp_path / "g.pgm"), gray)
    np.testing.assert_array_equal(D.read_pnm(tmp_path / "c.ppm"), rgb)
    assert (tmp_path / "g.pgm").read_bytes().startswith(b"P5\n7 5\n255\n")


def test_pnm_header_comments(tmp_path):
    (tmp_path / "a.pgm").write_bytes(b"P5\n# made by hand\n2 1\n255\n\x00\xff")
    assert D.read_pnm(tmp_path / "a.pgm").tolist() == [[0, 255]]


def test_pnm_rejects_bad_input(tmp_path):
    with pytest.raises(D.DatasetError):
        D.write_pnm(tmp_path / "x.pgm", np.zeros((2, 2), np.float32))
    (tmp_path / "b.pgm").write_bytes(b"P2\n1 1\n255\n0")
    with pytest.raises(D.DatasetError):
        D.read_pnm(tmp_path / "b.pgm")


def test_quantization_is_idempotent():
    x = np.random.default_rng(1).uniform(-1, 1, (3, 1, 4, 4))
    q = D.quantize(x)
    assert np.abs(q - x).max() <= 1 / 127.5
    np.testing.assert_array_equal(D.quantize(q), q)
    np.testing.assert_array_equal(D.to_uint8(D.from_uint8(np.arange(256, dtype=np.uint8))), np.arange(256))


# -- manifest ------------------------------------------------------------
def test_manifest_round_trip(tmp_path):
    imgs = np.random.default_rng(2).uniform(-1, 1, (3, 1, 16, 16))
    paths = D.write_gm_images(tmp_path, "gm00", imgs)
    m = zoo_manifest({"gm00": paths})
    D.write_manifest(m, tmp_path / "manifest.json")
    back = D.read_manifest(tmp_path / "manifest.json")
    assert back == m
    np.testing.assert_array_equal(D.load_images(back, tmp_path, "gm00"), D.quantize(imgs))


def test_manifest_missing_image_names_path(tmp_path):
    m = zoo_manifest({"gm03": ["images/gm03/00000.pgm"]})
    D.write_manifest(m, tmp_path / "manifest.json")
    with pytest.raises(D.DatasetError, match="images/gm03/00000.pgm"):
        D.read_manifest(tmp_path / "manifest.json")


def test_manifest_shape_mismatch(tmp_path):
    D.write_pnm(tmp_path / "a.pgm", np.zeros((8, 8), np.uint8))
    m = zoo_manifest({"gm00": ["a.pgm"]})
    D.write_manifest(m, tmp_path / "manifest.json")
    with pytest.raises(D.DatasetError, match="shape"):
        D.read_manifest(tmp_path / "manifest.json")


def test_manifest_version_and_empty(tmp_path):
    with pytest.raises(D.DatasetError):
        D.Manifest([])
    raw = zoo_manifest().to_dict()
    raw["version"] = 99
    (tmp_path / "m.json").write_text(json.dumps(raw))
    with pytest.raises(D.DatasetError, match="version"):
        D.read_manifest(tmp_path / "m.json")
    raw["version"] = 1
    raw["gms"] = []
    (tmp_path / "m.json").write_text(json.dumps(raw))
    with pytest.raises(D.DatasetError, match="empty"):
        D.read_manifest(tmp_path / "m.json")


# -- normalization -------------------------------------------------------
def test_normalization_example():
    stats = D.NormalizationStats(np.full(9, 5.0), np.full(9, 95.0))
    assert D.normalize_continuous(np.full(9, 50.0), stats)[0] == 0.5
    assert D.normalize_continuous(np.full(9, 5.0), stats)[0] == 0.0
    x = np.random.default_rng(3).uniform(5, 95, 9)
    np.testing.assert_allclose(D.denormalize_continuous(D.normalize_continuous(x, stats), stats), x, atol=1e-9)


def test_normalization_clamps_out_of_range():
    stats = D.NormalizationStats(np.zeros(9), np.ones(9))
    np.testing.assert_array_equal(D.normalize_continuous(np.full(9, 2.0), stats), np.ones(9))
    np.testing.assert_array_equal(D.normalize_continuous(np.full(9, -1.0), stats), np.zeros(9))
    np.testing.assert_array_equal(D.denormalize_continuous(np.full(9, 2.0), stats), np.full(9, 2.0))


def test_degenerate_range_rejected():
    raw = np.random.default_rng(4).uniform(0, 1, (5, 9))
    raw[:, 3] = 1.0
    with pytest.raises(D.DatasetError, match="num_pool_layers"):
        D.NormalizationStats.from_raw(raw)


def test_stats_ignore_test_gms():
    m = zoo_manifest()
    plan = D.make_splits(m)
    fold = plan.folds[0]
    before = D.NormalizationStats.from_manifest(m, fold["train"]).to_dict()
    for g in fold["test"]:
        m.entry(g).continuous_raw = [1e9] * 9
    assert D.NormalizationStats.from_manifest(m, fold["train"]).to_dict() == before


# -- splits --------------------------------------------------------------
def test_default_splits_test_every_gm_once():
    m = zoo_manifest()
    plan = D.make_splits(m, folds=6, test_size=2, seed=0)
    tested = [g for f in plan.folds for g in f["test"]]
    assert sorted(tested) == sorted(m.ids)
    for f in plan.folds:
        assert not set(f["test"]) & set(f["train"])
        assert set(f["test"]) | set(f["train"]) == set(m.ids)
        assert sorted(m.entry(g).family for g in f["test"]) == ["blobs", "stripes"]


def test_splits_keep_every_class_in_training():
    m = zoo_manifest()
    for f in D.make_splits(m).folds:
        assert D._covers_all_classes([m.entry(g) for g in f["train"]])


def test_splits_are_seeded():
    m = zoo_manifest()
    assert D.make_splits(m, seed=5).folds == D.make_splits(m, seed=5).folds
    assert D.make_splits(m, seed=0).folds == [
        {"test": t, "train": [g for g in m.ids if g not in t]}
        for t in (["gm03", "gm10"], ["gm02", "gm11"], ["gm05", "gm07"], ["gm04", "gm08"],
                  ["gm00", "gm06"], ["gm01", "gm09"])
    ]


def test_split_errors():
    m = zoo_manifest()
    with pytest.raises(D.DatasetError):
        D.make_splits(m, test_size=1)
    with pytest.raises(D.DatasetError):
        D.make_splits(m, folds=7, test_size=2)
    with pytest.raises(D.DatasetError, match="balance"):
        D.make_splits(m, folds=2, test_size=3)
