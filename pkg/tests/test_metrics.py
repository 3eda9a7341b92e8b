import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from scipy import ndimage

from sharpdepth import metrics, toygen
from sharpdepth.errors import ConfigError, DataError, ShapeError


def brute_force_distance(edges):
    pts = np.argwhere(edges)
    H, W = edges.shape
    out = np.full((H, W), np.inf)
    if len(pts) == 0:
        return out
    for i in range(H):
        for j in range(W):
            out[i, j] = math.sqrt(min((i - a) ** 2 + (j - b) ** 2 for a, b in pts))
    return out


# ---------------------------------------------------------------------------
# depth metrics


def test_perfect_prediction():
    gt = np.random.default_rng(0).uniform(0.5, 5, (8, 8))
    m = metrics.depth_metrics(gt, gt)
    assert (m.rel, m.log10, m.rmse_lin, m.rmse_log) == (0, 0, 0, 0)
    assert (m.sigma1, m.sigma2, m.sigma3) == (1, 1, 1)


def test_doubled_prediction():
    gt = np.ones((4, 4))
    m = metrics.depth_metrics(2 * gt, gt)
    assert m.rel == pytest.approx(1.0)
    assert m.log10 == pytest.approx(0.30103, abs=1e-5)
    assert m.rmse_lin == pytest.approx(1.0)
    assert m.rmse_log == pytest.approx(math.log(2))
    # 2 < 1.25**3 = 1.953125 is false, so no threshold is met
    assert (m.sigma1, m.sigma2, m.sigma3) == (0, 0, 0)


def test_mask_only_selects_pixels():
    rng = np.random.default_rng(1)
    gt = rng.uniform(1, 2, (6, 6))
    pred = rng.uniform(1, 2, (6, 6))
    mask = np.zeros((6, 6), dtype=bool)
    mask[:3] = True
    assert metrics.depth_metrics(pred, gt, mask) == metrics.depth_metrics(pred[:3], gt[:3])


def test_nonpositive_gt_is_rejected():
    gt = np.ones((3, 3))
    gt[1, 1] = 0
    with pytest.raises(DataError):
        metrics.depth_metrics(np.ones((3, 3)), gt)
    mask = np.ones((3, 3), dtype=bool)
    mask[1, 1] = False
    metrics.depth_metrics(np.ones((3, 3)), gt, mask)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (5, 5), elements=st.floats(0.1, 10)), arrays(np.float64, (5, 5), elements=st.floats(0.1, 10)))
def test_threshold_accuracies_are_monotone(pred, gt):
    m = metrics.depth_metrics(pred, gt)
    assert 0 <= m.sigma1 <= m.sigma2 <= m.sigma3 <= 1


def test_normalize_depth():
    np.testing.assert_allclose(metrics.normalize_depth(np.array([[1.0, 2.0, 3.0]])), [[0, 0.5, 1]])
    d = np.random.default_rng(2).random((5, 5))
    np.testing.assert_allclose(metrics.normalize_depth(3 * d + 7), metrics.normalize_depth(d), atol=1e-6)
    with pytest.raises(DataError):
        metrics.normalize_depth(np.ones((3, 3)))


# ---------------------------------------------------------------------------
# canny


def test_constant_image_has_no_edges():
    assert not metrics.canny(np.full((16, 16), 0.3)).any()


def test_vertical_step_gives_one_pixel_wide_line():
    img = np.zeros((20, 30))
    img[:, 12:] = 1.0
    edges = metrics.canny(img)
    cols = np.unique(np.nonzero(edges)[1])
    assert set(cols) <= {11, 12, 13}
    assert (edges.sum(axis=1) == 1).all()


def test_canny_is_deterministic_and_checks_thresholds():
    img = toygen.gen_polygons_2d(3, 48, 48, 3)
    a = metrics.depth_edges(img)
    np.testing.assert_array_equal(a, metrics.depth_edges(img))
    with pytest.raises(ConfigError):
        metrics.canny(img, 0.2, 0.1)
    with pytest.raises(ConfigError):
        metrics.canny(img, 0.0, 0.1)


def test_relative_thresholds_ignore_contrast():
    img = toygen.gaussian_blur(toygen.gen_polygons_2d(4, 48, 48, 2), 2.0)
    norm = metrics.normalize_depth(img)
    np.testing.assert_array_equal(metrics.canny(norm, relative=True), metrics.canny(0.1 * norm, relative=True))


def test_edges_are_invariant_to_positive_affine_depth_changes():
    img = toygen.gaussian_blur(toygen.gen_polygons_2d(8, 48, 48, 3), 1.5).astype(np.float64)
    base = metrics.depth_edges(img)
    assert base.any()
    np.testing.assert_array_equal(metrics.depth_edges(4 * img + 2), base)
    np.testing.assert_array_equal(metrics.depth_edges(0.5 * img + 10), base)


def test_edge_accumulation():
    img = metrics.normalize_depth(toygen.gen_polygons_2d(2, 48, 48, 3))
    single = metrics.canny(img, 0.05, 0.15)
    np.testing.assert_array_equal(metrics.edge_accumulate(img, [(0.05, 0.15)]), single)
    pairs = [(0.05, 0.15), (0.2, 0.4), (0.01, 0.03)]
    acc = metrics.edge_accumulate(img, pairs)
    assert (acc >= single).all() and (acc >= metrics.canny(img, 0.2, 0.4)).all()
    with pytest.raises(ConfigError):
        metrics.edge_accumulate(img, [])


# ---------------------------------------------------------------------------
# distance transform


def test_distance_examples():
    e = np.zeros((6, 6), dtype=bool)
    e[0, 0] = True
    d = metrics.distance_transform(e)
    assert d[0, 0] == 0 and d[3, 4] == 5.0
    assert np.isinf(metrics.distance_transform(np.zeros((3, 3), dtype=bool))).all()


def test_distance_transform_matches_brute_force_exactly():
    rng = np.random.default_rng(17)
    for k in range(50):
        mask = rng.random((32, 32)) < rng.uniform(0.005, 0.2)
        np.testing.assert_array_equal(metrics.distance_transform(mask), brute_force_distance(mask))


def test_distance_transform_matches_scipy():
    mask = np.random.default_rng(3).random((40, 50)) < 0.03
    np.testing.assert_allclose(metrics.distance_transform(mask), ndimage.distance_transform_edt(~mask), atol=1e-12)


# ---------------------------------------------------------------------------
# chamfer OB metrics


def test_shifted_lines():
    gt = np.zeros((32, 32), dtype=bool)
    pred = np.zeros((32, 32), dtype=bool)
    gt[:, 10] = True
    pred[:, 13] = True
    m = metrics.chamfer_ob(pred, gt, cap=10)
    assert m.eps_acc == 3.0 and m.eps_comp == 3.0


def test_identical_and_empty_edge_maps():
    e = np.zeros((10, 10), dtype=bool)
    e[4, 2:8] = True
    assert metrics.chamfer_ob(e, e).to_dict() == {"eps_acc": 0.0, "eps_comp": 0.0}
    empty = np.zeros_like(e)
    m = metrics.chamfer_ob(empty, e, cap=10)
    assert m.eps_acc == 10 and m.eps_comp == 10


def test_far_predictions_are_excluded_from_accuracy():
    gt = np.zeros((5, 40), dtype=bool)
    pred = np.zeros((5, 40), dtype=bool)
    gt[:, 2] = True
    pred[:, 4] = True
    pred[:, 30] = True  # 28 px away, outside the cap
    assert metrics.chamfer_ob(pred, gt, cap=10).eps_acc == 2.0


def test_shape_mismatch():
    with pytest.raises(ShapeError):
        metrics.chamfer_ob(np.zeros((3, 3), bool), np.zeros((3, 4), bool))


@settings(max_examples=60, deadline=None)
@given(arrays(bool, (12, 12)), arrays(bool, (12, 12)))
def test_chamfer_roles_are_symmetric_and_bounded(a, b):
    ab, ba = metrics.chamfer_ob(a, b), metrics.chamfer_ob(b, a)
    assert ab.eps_acc == ba.eps_comp and ab.eps_comp == ba.eps_acc
    assert 0 <= ab.eps_acc <= 10 and 0 <= ab.eps_comp <= 10


# ---------------------------------------------------------------------------
# evaluation crop


def test_eval_crops():
    assert metrics.eval_crop("full", (5, 7)).all()
    eigen = metrics.eval_crop("eigen", (480, 640))
    assert eigen.sum() < 480 * 640
    assert eigen.sum() == (471 - 45) * (601 - 41)
    with pytest.raises(ShapeError):
        metrics.eval_crop("eigen", (100, 100))
    with pytest.raises(ConfigError):
        metrics.eval_crop("middle", (10, 10))


def test_masked_metrics_equal_cropped_metrics():
    rng = np.random.default_rng(8)
    gt = rng.uniform(1, 10, (480, 640))
    pred = gt * rng.uniform(0.8, 1.3, gt.shape)
    mask = metrics.eval_crop("eigen", gt.shape)
    t, b, l, r = metrics.EIGEN_CROP
    assert metrics.depth_metrics(pred, gt, mask) == metrics.depth_metrics(pred[t:b, l:r], gt[t:b, l:r])


def test_ob_metrics_from_depth_or_edges():
    gt = toygen.gen_polygons_2d(5, 40, 40, 2)
    assert metrics.ob_metrics(gt, gt).eps_acc == 0
    assert metrics.ob_metrics(gt, gt_edges=metrics.depth_edges(gt)).eps_comp == 0
    with pytest.raises(ConfigError):
        metrics.ob_metrics(gt)
