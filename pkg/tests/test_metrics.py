from __future__ import annotations

import json

import numpy as np
import pytest

from app.core.errors import DataError
from eval.metrics import (
    SUCCESS_THRESHOLDS,
    evaluate,
    evaluate_benchmark,
    iou,
    iou_trace,
    score_sequence,
    success_curve,
    write_report,
)

GT = np.array([[0.0, 0.0, 10.0, 10.0]] * 4)
# Frame 1 is the given box and is skipped; frames 2..4 overlap 1.0, 0.6 and 0.4.
PRED = np.array(
    [
        [50.0, 50.0, 5.0, 5.0],
        [0.0, 0.0, 10.0, 10.0],
        [0.0, 0.0, 6.0, 10.0],
        [0.0, 0.0, 4.0, 10.0],
    ]
)


def test_iou_hand_values():
    assert iou(np.array([0.0, 0.0, 2.0, 2.0]), np.array([1.0, 1.0, 2.0, 2.0])) == pytest.approx(1 / 7)
    assert iou(np.array([0.0, 0.0, 1.0, 1.0]), np.array([1.0, 0.0, 1.0, 1.0])) == 0.0
    assert iou(np.array([3.0, 4.0, 5.0, 6.0]), np.array([3.0, 4.0, 5.0, 6.0])) == 1.0


def test_iou_is_scale_invariant():
    rng = np.random.default_rng(0)
    a = np.concatenate([rng.uniform(0, 50, (20, 2)), rng.uniform(1, 30, (20, 2))], axis=1)
    b = np.concatenate([rng.uniform(0, 50, (20, 2)), rng.uniform(1, 30, (20, 2))], axis=1)
    np.testing.assert_allclose(iou_trace(a, b), iou_trace(3.5 * a, 3.5 * b), atol=1e-12)
    np.testing.assert_allclose(iou_trace(a, b), iou_trace(b, a), atol=1e-12)


def test_hand_trace_summary():
    scores = score_sequence("hand", PRED, GT)
    np.testing.assert_allclose(scores.trace, [1.0, 0.6, 0.4])
    assert scores.frames == 3
    assert scores.ao == pytest.approx(2 / 3)
    assert scores.sr50 == pytest.approx(2 / 3)
    assert scores.sr75 == pytest.approx(1 / 3)
    # Fraction above each of the 21 thresholds: 8 at 1, 4 at 2/3, 8 at 1/3, then 0 at t = 1.
    assert scores.auc == pytest.approx((8 + 4 * 2 / 3 + 8 / 3) / 21)


def test_perfect_and_missed_tracks():
    perfect = evaluate(GT, GT)
    assert (perfect.ao, perfect.sr50, perfect.sr75, perfect.precision) == (1.0, 1.0, 1.0, 1.0)
    miss = evaluate(np.array([[0.0, 0.0, 10.0, 10.0]] + [[80.0, 80.0, 10.0, 10.0]] * 3), GT)
    assert (miss.ao, miss.sr50, miss.sr75, miss.precision) == (0.0, 0.0, 0.0, 0.0)


def test_success_curve_is_non_increasing():
    trace = np.random.default_rng(1).uniform(size=50)
    curve = success_curve(trace)
    assert len(curve) == len(SUCCESS_THRESHOLDS) == 21
    assert all(a >= b for a, b in zip(curve, curve[1:]))
    assert curve[-1] == 0.0


def test_length_mismatch_is_a_data_error():
    with pytest.raises(DataError):
        score_sequence("short", PRED[:3], GT)


def test_single_frame_sequence_is_left_out_of_the_mean():
    report = evaluate_benchmark({"a": (PRED, GT), "b": (GT[:1], GT[:1])})
    assert report.sequences["b"].frames == 0
    assert report.ao == pytest.approx(2 / 3)


def test_sequences_weigh_equally():
    long_gt = np.array([[0.0, 0.0, 10.0, 10.0]] * 11)
    report = evaluate_benchmark({"long": (long_gt, long_gt), "hand": (PRED, GT)})
    assert report.ao == pytest.approx((1.0 + 2 / 3) / 2)


def test_report_files(tmp_path):
    report = evaluate_benchmark({"hand": (PRED, GT)}, config_hash="abc123", flops={"total": 10})
    csv_path, json_path = write_report(report, tmp_path)
    rows = csv_path.read_text(encoding="utf-8").splitlines()
    assert rows[0].startswith("sequence,frames,ao")
    assert rows[-1].startswith("__mean__,3,")
    data = json.loads(json_path.read_text(encoding="utf-8"))
    assert data["config_hash"] == "abc123"
    assert data["per_sequence"]["hand"]["iou_trace"] == pytest.approx([1.0, 0.6, 0.4])
