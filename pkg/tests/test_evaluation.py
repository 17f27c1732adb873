from __future__ import annotations

import numpy as np
import pytest

from shade_lab import data, nn, style
from shade_lab.errors import ContractError, DegenerateProjectionError
from shade_lab.evaluation import (ConfusionMatrix, evaluate, export_style_space,
                                  generalization_gap, pca_2d)


def test_confusion_examples():
    cm = ConfusionMatrix(np.array([[3, 1], [1, 3]]))
    np.testing.assert_allclose(cm.iou(), [0.6, 0.6])
    assert np.isclose(cm.miou(), 0.6)
    perfect = ConfusionMatrix.from_labels([0, 1, 2, 2], [0, 1, 2, 2], 3)
    assert perfect.accuracy() == 1.0 and perfect.miou() == 1.0
    assert perfect.total == 4


def test_all_background_prediction():
    truth = np.array([0, 0, 0, 1, 2, 3, 4])
    cm = ConfusionMatrix.from_labels(truth, np.zeros_like(truth), 5)
    iou = cm.iou()
    assert iou[0] < 1 and np.all(iou[1:] == 0)


def test_miou_skips_absent_classes_and_is_permutation_invariant():
    rng = np.random.default_rng(0)
    truth = rng.integers(0, 3, 500)
    pred = np.where(rng.random(500) < 0.7, truth, rng.integers(0, 4, 500))
    cm = ConfusionMatrix.from_labels(truth, pred, 4)
    assert np.isclose(cm.miou(), np.nanmean(cm.iou()[:3]))
    perm = np.array([2, 0, 3, 1])
    cm2 = ConfusionMatrix.from_labels(perm[truth], perm[pred], 4)
    assert np.isclose(cm.miou(), cm2.miou())


def test_generalization_gap():
    assert generalization_gap(0.8, [0.8, 0.8]) == 0.0
    assert np.isclose(generalization_gap(0.9, [0.7, 0.8, 0.6]), 0.2)
    assert generalization_gap(0.9, [0.8, 0.8]) < generalization_gap(0.9, [0.7, 0.8])
    with pytest.raises(ContractError):
        generalization_gap(0.9, [])


@pytest.mark.parametrize("task", ["classification", "segmentation"])
def test_evaluate_is_pure_and_counts_units(task):
    bm = data.make_benchmark(0, n_train=4, n_val=12, n_target=4)
    k = 4 if task == "classification" else 5
    params = nn.init_params(nn.ModelSpec(task, k), 0)
    a = evaluate(params, bm.source_val, task, batch_size=5)
    b = evaluate(params, bm.source_val, task)
    np.testing.assert_array_equal(a["confusion"].counts, b["confusion"].counts)
    units = 12 if task == "classification" else 12 * 32 * 32
    assert a["confusion"].total == units
    assert np.isclose(a["loss"], b["loss"])
    with pytest.raises(ContractError):
        evaluate(nn.init_params(nn.ModelSpec(task, k + 1), 0), bm.source_val, task)


def test_pca_separates_orthogonal_clusters():
    rng = np.random.default_rng(1)
    a = rng.standard_normal((50, 3)) * 0.05 + [5, 0, 0]
    b = rng.standard_normal((50, 3)) * 0.05 + [-5, 0, 0]
    pts = np.concatenate([a, b])
    center, axes, var = pca_2d(pts)
    # eigen-oracle: first axis is +-e1 (sign fixed positive), variance ~25
    np.testing.assert_allclose(np.abs(axes[0]), [1, 0, 0], atol=1e-2)
    proj = (pts - center) @ axes[0]
    assert np.all(proj[:50] > 0) and np.all(proj[50:] < 0)
    assert var[0] > 20 and var[1] < 0.01
    with pytest.raises(DegenerateProjectionError):
        pca_2d(pts[:2])


def test_export_style_space_schema_and_subset():
    bm = data.make_benchmark(0, n_train=60, n_val=4, n_target=20)
    params = nn.init_params(nn.ModelSpec("classification", 4), 0)
    doc = export_style_space(params, bm, pool_size=60, n_generated=10)
    assert doc["projection"] == "pca" and len(doc["explained_variance"]) == 2
    kinds = {p["kind"] for p in doc["points"]}
    assert kinds == {"source", "target", "fps_basis", "kmeans_basis", "generated"}
    d = doc["diagnostics"]
    for sel in ("fps", "kmeans"):
        assert d[sel]["min_pairwise_distance"] > 0 and d[sel]["coverage_radius"] > 0
    assert d["fps"]["subset_of_source_pool"]
    src = {(p["x"], p["y"]) for p in doc["points"] if p["kind"] == "source"}
    fps_pts = [(p["x"], p["y"]) for p in doc["points"] if p["kind"] == "fps_basis"]
    assert all(p in src for p in fps_pts)


def test_generated_styles_lie_in_basis_hull():
    pool = np.random.default_rng(2).standard_normal((40, 8))
    basis = style.fps_select(pool, 4)
    w = style.sample_dirichlet(4, np.random.default_rng(3), size=20)
    mu, sigma = style.hallucinate(basis, w)
    rows = np.concatenate([mu, sigma], axis=1)
    base = np.concatenate([basis.mu_base, basis.sigma_base], axis=1)
    np.testing.assert_allclose(rows, w @ base, atol=1e-12)
    assert np.all(rows <= base.max(axis=0) + 1e-12) and np.all(rows >= base.min(axis=0) - 1e-12)
