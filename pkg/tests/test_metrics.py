import math

import numpy as np
import pytest

from gmparse import metrics as M
from gmparse.parser import DISCRETE_CARDINALITY, Prediction


def brute_auc(scores, labels):
    pos = [s for s, l in zip(scores, labels) if l == 1]
    neg = [s for s, l in zip(scores, labels) if l == 0]
    total = sum(1.0 if p > q else 0.5 if p == q else 0.0 for p in pos for q in neg)
    return total / (len(pos) * len(neg))


def make_pred(n=6, seed=0):
    rng = np.random.default_rng(seed)
    return Prediction(
        rng.uniform(0, 1, (n, 9)),
        np.stack([rng.integers(0, m, n) for m in DISCRETE_CARDINALITY], axis=1),
        [rng.dirichlet(np.ones(m), n) for m in DISCRETE_CARDINALITY],
        rng.uniform(0, 1, (n, 3)),
        rng.uniform(0, 1, (n, 8)),
    )


# -- L1 and F1 -----------------------------------------------------------
def test_l1_examples():
    t = np.random.default_rng(0).uniform(0, 1, (5, 9))
    per, mean = M.l1_error(t, t)
    assert mean == 0 and not per.any()
    off = t.copy()
    off[:, 2] += 0.1
    per, mean = M.l1_error(off, t)
    assert abs(per[2] - 0.1) < 1e-12 and abs(mean - 0.1 / 9) < 1e-12
    with pytest.raises(M.MetricError):
        M.l1_error(t[:, :8], t)


def test_f1_examples():
    y = np.array([0, 1, 2, 3, 1])
    assert M.f1_score(y, y, 4) == 1.0
    assert M.f1_score(1 - np.array([0, 1, 1, 0]), np.array([0, 1, 1, 0]), 2) == 0.0
    # positive class: TP=2, FP=1, FN=1
    pred = np.array([1, 1, 1, 0, 0, 0])
    true = np.array([1, 1, 0, 1, 0, 0])
    assert abs(M.per_class_f1(pred, true, 2)[1] - 2 / 3) < 1e-12


def test_f1_errors():
    with pytest.raises(M.MetricError):
        M.f1_score([], [], 2)
    with pytest.raises(M.MetricError):
        M.f1_score([0, 2], [0, 1], 2)


def test_f1_invariant_to_relabeling():
    rng = np.random.default_rng(1)
    pred, true = rng.integers(0, 4, 50), rng.integers(0, 4, 50)
    perm = np.array([2, 0, 3, 1])
    assert abs(M.f1_score(pred, true, 4) - M.f1_score(perm[pred], perm[true], 4)) < 1e-12


# -- baselines -----------------------------------------------------------
def test_random_guess_matches_closed_form():
    rng = np.random.default_rng(2)
    cont = rng.uniform(0, 1, (40, 9))
    disc = np.stack([rng.integers(0, m, 40) for m in DISCRETE_CARDINALITY], axis=1)
    level = M.random_guess_level(cont, disc, draws=1_000_000, seed=0)
    # E|U - t| for U uniform on [0, 1]
    exact = np.mean((cont**2 + (1 - cont) ** 2) / 2, axis=0)
    np.testing.assert_allclose(level["l1_per_param"], exact, atol=2e-3)
    # uniform guessing: macro-F1 ~= mean over present classes of 2 p_c / (M p_c + 1)
    for k, m in enumerate(DISCRETE_CARDINALITY):
        p = np.bincount(disc[:, k], minlength=m) / 40
        pc = p[p > 0]
        exact_f1 = np.mean(2 * pc / (1 + m * pc)) if len(pc) == m else None
        if exact_f1 is not None:
            assert abs(level["f1_per_param"][k] - exact_f1) < 3e-3


def test_paper_reference_random_guess_scale():
    # uniform targets give the classic 1/3; the paper's table lists 0.393 for its target mix
    cont = np.random.default_rng(3).uniform(0, 1, (5000, 9))
    disc = np.zeros((5000, 6), int)
    assert abs(M.random_guess_level(cont, disc, draws=200_000)["l1"] - 1 / 3) < 5e-3


def test_shuffles_preserve_marginals_and_move_something():
    rng = np.random.default_rng(4)
    values = rng.integers(0, 4, (12, 6))
    for seed in range(20):
        out = M.shuffle_columns(values, np.random.default_rng(seed))
        assert not np.array_equal(out, values)
        for j in range(6):
            assert sorted(out[:, j]) == sorted(values[:, j])
    rows = M.shuffle_rows(values, np.random.default_rng(0))
    assert sorted(map(tuple, rows)) == sorted(map(tuple, values))
    assert not np.array_equal(rows, values)


def test_shuffle_never_returns_identity_for_two_rows():
    values = np.array([[0, 1], [1, 0]])
    for seed in range(10):
        assert not np.array_equal(M.shuffle_columns(values, np.random.default_rng(seed)), values)
    with pytest.raises(M.MetricError):
        M.shuffle_rows(np.ones((3, 2)), np.random.default_rng(0))


# -- confusion -----------------------------------------------------------
def test_confusion_examples():
    y = np.array([0, 1, 2, 2, 3])
    cm = M.confusion(y, y, 4)
    assert np.array_equal(cm.counts, np.diag(np.bincount(y, minlength=4)))
    const = M.confusion(np.zeros(5, int), y, 4)
    assert const.collapsed and np.count_nonzero(const.counts.sum(1)) == 1
    assert cm.counts.sum() == 5
    np.testing.assert_array_equal(const.counts.sum(0), np.bincount(y, minlength=4))
    with pytest.raises(M.MetricError):
        M.confusion([4], [0], 4)


def test_confusion_csv():
    csv = M.confusion([0, 1, 1], [0, 1, 0], 2).to_csv().splitlines()
    assert csv == ["predicted\\truth,0,1", "0,1,0", "1,1,1"]


# -- similarity ----------------------------------------------------------
def test_cosine_examples():
    assert M.cosine_similarity([1, 2, 3], [1, 2, 3]) == 1.0
    assert M.cosine_similarity([1, 0], [0, 5]) == 0.0
    with pytest.raises(M.MetricError):
        M.cosine_similarity([0, 0], [1, 0])


def test_similarity_matrix_structure():
    rng = np.random.default_rng(5)
    bases = rng.standard_normal((3, 16))
    fps = [b + 0.3 * rng.standard_normal((20, 16)) for b in bases]
    sim = M.similarity_matrix(fps, pairs_per_cell=50, seed=0)
    assert sim.shape == (3, 3) and np.all(np.abs(sim) <= 1)
    assert M.diagonal_contrast(sim) > 0.5
    with pytest.raises(M.MetricError):
        M.similarity_matrix([f[:5] for f in fps], pairs_per_cell=50)


def test_similarity_zero_norm_cell_skipped():
    fps = [np.zeros((10, 4)), np.ones((10, 4))]
    with pytest.warns(RuntimeWarning):
        sim = M.similarity_matrix(fps, pairs_per_cell=10)
    assert np.isnan(sim[0, 0]) and sim[1, 1] == 1.0


# -- aggregation ---------------------------------------------------------
def test_majority_vote_examples():
    assert M.majority_vote([[0], [0], [1]], (2,)).tolist() == [0]
    assert M.majority_vote([[1], [0]], (2,)).tolist() == [0]  # tie -> lower index
    assert M.majority_vote([[3], [2], [2], [3]], (4,)).tolist() == [2]


def test_aggregate_examples():
    pred = make_pred(2)
    pred.continuous[:, 0] = [0.2, 0.4]
    agg = M.aggregate_predictions(pred, 2)
    assert abs(agg.continuous[0, 0] - 0.3) < 1e-12
    one = M.aggregate_predictions(pred, 1)
    assert np.array_equal(one.continuous, pred.continuous[:1]) and np.array_equal(one.fine, pred.fine[:1])
    with pytest.raises(M.MetricError):
        M.aggregate_predictions(pred, 0)
    with pytest.raises(M.MetricError):
        M.aggregate_predictions(pred, 3)


def test_aggregate_copies_is_identity():
    base = make_pred(1)
    copies = base.subset(np.zeros(10, int))
    agg = M.aggregate_predictions(copies, 10)
    np.testing.assert_allclose(agg.continuous, base.continuous)
    assert np.array_equal(agg.discrete, base.discrete)
    assert np.array_equal(agg.fine, base.fine_flags.astype(float))


# -- occlusion -----------------------------------------------------------
def mean_pixel_predictor(images):
    n = len(images)
    m = images.reshape(n, -1).mean(1)
    pred = make_pred(n)
    pred.continuous[:] = m[:, None]
    pred.discrete_probs = [np.tile(np.eye(c)[0], (n, 1)) * (0.5 + 0.5 * np.tanh(m))[:, None]
                           + (1 - np.tile(np.eye(c)[0], (n, 1))) * (0.5 - 0.5 * np.tanh(m))[:, None] / max(c - 1, 1)
                           for c in DISCRETE_CARDINALITY]
    return pred


def test_occlusion_identity_mask_gives_zero_delta():
    images = np.random.default_rng(6).uniform(-1, 1, (8, 1, 12, 12))
    res = M.occlusion_heatmap(mean_pixel_predictor, images, np.zeros(8), "num_layers", patch=5, fill=images)
    assert np.abs(res.delta).max() < 1e-12


def test_occlusion_shapes_and_range():
    images = np.random.default_rng(7).uniform(-1, 1, (8, 1, 12, 12))
    res = M.occlusion_heatmap(mean_pixel_predictor, images, np.zeros(8, int), "norm_type", patch=5, count=6)
    assert res.grid.shape == (math.ceil(12 / 5),) * 2 and res.heatmap.shape == (12, 12)
    assert res.heatmap.min() >= 0 and res.heatmap.max() <= 1
    with pytest.raises(M.MetricError):
        M.occlusion_heatmap(mean_pixel_predictor, images, np.zeros(8), "num_layers", patch=12)
    with pytest.raises(M.MetricError):
        M.occlusion_heatmap(mean_pixel_predictor, images, np.zeros(8), "colour", patch=3)


# -- AUC -----------------------------------------------------------------
def test_auc_examples():
    assert M.auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert M.auc([0.5] * 6, [0, 1, 0, 1, 0, 1]) == 0.5
    with pytest.raises(M.MetricError):
        M.auc([0.1, 0.2], [1, 1])


def test_auc_matches_pairwise_count_with_ties():
    rng = np.random.default_rng(8)
    scores = rng.integers(0, 5, 60).astype(float)
    labels = rng.integers(0, 2, 60)
    assert abs(M.auc(scores, labels) - brute_auc(scores, labels)) < 1e-12


def test_auc_of_independent_labels_near_half():
    rng = np.random.default_rng(9)
    assert abs(M.auc(rng.random(100_000), rng.integers(0, 2, 100_000)) - 0.5) < 0.02


def test_auc_monotone_invariance():
    rng = np.random.default_rng(10)
    s, y = rng.standard_normal(200), rng.integers(0, 2, 200)
    assert M.auc(s, y) == M.auc(np.exp(3 * s) + 1, y)


def test_binomial_interval():
    lo, hi = M.binomial_acceptance(100, 0.5)
    assert (lo, hi) == (40, 60)
    lo, hi = M.binomial_acceptance(200, 0.5)
    assert lo <= 100 <= hi and hi - lo < 30
