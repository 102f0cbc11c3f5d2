from __future__ import annotations

import math

import numpy as np
import pytest

from app.core.config import ObjectiveConfig
from app.core.errors import DataError
from app.core.head import TrackOutput, decode
from app.core.objectives import (
    check_box,
    focal_loss,
    gaussian_radius,
    gaussian_target,
    giou_loss,
    l1_loss,
    predicted_box,
    sigma_for_box,
    total_loss,
)
from app.core.tensor import GradTape, Tensor

GRID = 1000


def test_focal_single_positive_cell():
    loss = focal_loss(Tensor(np.array([[0.5]])), np.array([[1.0]]))
    assert loss.item() == pytest.approx(0.25 * math.log(2.0), abs=1e-6)
    assert loss.item() == pytest.approx(0.173287, abs=1e-6)


def test_focal_near_perfect_prediction_is_near_zero():
    target = gaussian_target(np.array([20.0, 20.0, 16.0, 16.0]), 4, 4, 16, sigma=0.5).heatmap
    pred = np.where(target == 1.0, 1.0 - 1e-9, 1e-9)
    assert focal_loss(Tensor(pred), target).item() < 1e-5


def test_focal_is_non_negative():
    rng = np.random.default_rng(0)
    target = gaussian_target(np.array([10.0, 30.0, 12.0, 20.0]), 4, 4, 16).heatmap
    for _ in range(10):
        assert focal_loss(Tensor(rng.uniform(size=(1, 4, 4))), target).item() >= 0.0


def test_focal_falls_with_confidence_on_the_peak_and_rises_elsewhere():
    probs = np.linspace(0.05, 0.95, 19)
    on_peak = [focal_loss(Tensor(np.array([[p]])), np.array([[1.0]])).item() for p in probs]
    assert (np.diff(on_peak) < 0).all()
    for g in (0.0, 0.5, 0.9):
        off_peak = [focal_loss(Tensor(np.array([[p]])), np.array([[g]])).item() for p in probs]
        assert (np.diff(off_peak) > 0).all(), g


def test_gaussian_peak_and_neighbor():
    t = gaussian_target(np.array([16.0, 16.0, 32.0, 32.0]), 4, 4, 16, sigma=1.0)
    assert t.center_cell == (2, 2)
    assert t.heatmap[2, 2] == 1.0
    assert t.heatmap[2, 3] == pytest.approx(math.exp(-0.5), abs=1e-6)
    assert t.heatmap[2, 3] == pytest.approx(0.606531, abs=1e-6)


def test_gaussian_center_is_clipped_into_grid():
    t = gaussian_target(np.array([60.0, 60.0, 10.0, 10.0]), 4, 4, 16)
    assert t.center_cell == (3, 3)
    assert t.heatmap.max() == 1.0


def test_equal_size_targets_are_translates():
    a = gaussian_target(np.array([16.0, 16.0, 20.0, 20.0]), 8, 8, 8).heatmap
    b = gaussian_target(np.array([24.0, 32.0, 20.0, 20.0]), 8, 8, 8).heatmap
    np.testing.assert_allclose(np.roll(a, (2, 1), axis=(0, 1))[3:, 2:], b[3:, 2:])


def test_sigma_follows_radius():
    r = gaussian_radius(4.0, 4.0, 0.7)
    assert r > 0
    assert sigma_for_box(4.0, 4.0) == pytest.approx((2 * int(r) + 1) / 6)


def test_degenerate_box_rejected():
    with pytest.raises(DataError):
        check_box(np.array([1.0, 1.0, 0.0, 3.0]))
    with pytest.raises(DataError):
        gaussian_target(np.array([1.0, 1.0, np.nan, 3.0]), 4, 4, 16)


def test_identical_boxes_cost_nothing():
    box = np.array([[0.2, 0.3, 0.4, 0.2]])
    assert giou_loss(Tensor(box), box).item() == pytest.approx(0.0, abs=1e-12)
    assert l1_loss(Tensor(box), box).item() == 0.0


def test_touching_unit_boxes_have_zero_giou():
    loss = giou_loss(Tensor(np.array([[0.0, 0.0, 1.0, 1.0]])), np.array([[1.0, 0.0, 1.0, 1.0]]))
    assert loss.item() == pytest.approx(1.0, abs=1e-12)


def _raster(box: np.ndarray) -> np.ndarray:
    centers = (np.arange(GRID) + 0.5) / GRID
    x, y, w, h = box
    cols = (centers >= x) & (centers < x + w)
    rows = (centers >= y) & (centers < y + h)
    return np.outer(rows, cols)


def rasterized_giou(a: np.ndarray, b: np.ndarray) -> float:
    ma, mb = _raster(a), _raster(b)
    inter = np.logical_and(ma, mb).sum()
    union = np.logical_or(ma, mb).sum()
    x1, y1 = min(a[0], b[0]), min(a[1], b[1])
    x2, y2 = max(a[0] + a[2], b[0] + b[2]), max(a[1] + a[3], b[1] + b[3])
    enclose = _raster(np.array([x1, y1, x2 - x1, y2 - y1])).sum()
    return inter / union - (enclose - union) / enclose


def test_giou_matches_rasterized_overlap():
    rng = np.random.default_rng(0)
    for _ in range(200):
        # Corners on the raster lattice so pixel counts are exact areas.
        a = np.concatenate([rng.integers(0, 600, 2), rng.integers(20, 400, 2)]) / GRID
        b = np.concatenate([rng.integers(0, 600, 2), rng.integers(20, 400, 2)]) / GRID
        loss = giou_loss(Tensor(a[None]), b[None]).item()
        assert loss == pytest.approx(1.0 - rasterized_giou(a, b), abs=1e-3)


def test_total_is_exact_weighted_sum():
    rng = np.random.default_rng(2)
    target = gaussian_target(np.array([20.0, 18.0, 24.0, 30.0]), 4, 4, 16)
    score = Tensor(rng.uniform(0.05, 0.95, size=(1, 4, 4)))
    pred = Tensor(np.array([[0.3, 0.25, 0.4, 0.5]]))
    total, parts = total_loss(score, target.heatmap, pred, target.box_normalized.reshape(1, 4), ObjectiveConfig())
    assert parts["total"] == parts["focal"] + 2.0 * parts["giou"] + 5.0 * parts["l1"]
    assert total.item() == parts["total"]


def test_predicted_box_agrees_with_decode():
    rng = np.random.default_rng(5)
    logits = rng.normal(size=(1, 4, 4))
    out = TrackOutput(
        score_logits=Tensor(logits),
        score=Tensor(1 / (1 + np.exp(-logits))),
        offset=Tensor(rng.uniform(size=(2, 4, 4))),
        size=Tensor(rng.uniform(0.1, 0.6, size=(2, 4, 4))),
    )
    decoded = decode(out, 16, 64)
    np.testing.assert_allclose(predicted_box(out, 16, 64).data[0] * 64, decoded.box, atol=1e-12)


def test_predicted_box_routes_gradient_to_peak_only():
    logits = np.zeros((1, 4, 4))
    logits[0, 1, 2] = 3.0
    offset = Tensor(np.full((2, 4, 4), 0.5), requires_grad=True)
    size = Tensor(np.full((2, 4, 4), 0.2), requires_grad=True)
    out = TrackOutput(Tensor(logits), Tensor(logits), offset, size)
    with GradTape() as tape:
        loss = l1_loss(predicted_box(out, 16, 64), np.array([[0.1, 0.1, 0.3, 0.3]]))
    tape.backward(loss)
    touched = np.argwhere(np.abs(offset.grad).sum(axis=0) > 0)
    assert touched.tolist() == [[1, 2]]
