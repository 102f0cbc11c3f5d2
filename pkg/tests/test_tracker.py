from __future__ import annotations

from typing import List

import numpy as np
import pytest

from app.core.config import TrackerConfig
from app.core.errors import DataError
from app.core.model import build_model
from app.core.tracker import (
    TemplateSet,
    clamp_to_frame,
    crop,
    crop_transform,
    model_predictor,
    track_sequence,
)

from conftest import moving_square, tiny

# Search side is 4 * 16 = 64 frame px resampled to 16, so the 16px square
# sits at [6, 6, 4, 4] in every search crop centered on it.
CENTERED = np.array([6.0, 6.0, 4.0, 4.0])


def tracker_cfg(**overrides) -> TrackerConfig:
    values = dict(scales=(2.0,), template_resolution=8, search_resolution=16, patch_size=4, tau=0.7)
    values.update(overrides)
    return TrackerConfig(**values)


class Scripted:
    """Predictor that keeps the box still and replays a list of scores."""

    def __init__(self, scores: List[float]) -> None:
        self.scores = list(scores)
        self.seen: List[TemplateSet] = []

    def __call__(self, templates: TemplateSet, search: np.ndarray):
        self.seen.append(templates)
        return CENTERED.copy(), self.scores[len(self.seen) - 1]


def test_update_gate_is_strict():
    seq = moving_square(num_frames=3)
    result = track_sequence(seq.frames, seq.boxes[0], tracker_cfg(), Scripted([0.71, 0.69]))
    assert result.updated == [False, True, False]
    assert result.update_count == 1
    assert result.scores == [1.0, 0.71, 0.69]


def test_score_equal_to_tau_does_not_update():
    seq = moving_square(num_frames=2)
    result = track_sequence(seq.frames, seq.boxes[0], tracker_cfg(tau=0.5), Scripted([0.5]))
    assert result.update_count == 0


def test_randomized_score_sequences():
    rng = np.random.default_rng(8)
    seq = moving_square(num_frames=6)
    for _ in range(1000):
        scores = rng.uniform(size=5).tolist()
        predictor = Scripted(scores)
        result = track_sequence(seq.frames, seq.boxes[0], tracker_cfg(), predictor)
        assert result.updated[1:] == [s > 0.7 for s in scores]
        assert len(result.boxes) == 6
        first = predictor.seen[0]
        assert first.dynamic is first.static


def test_rerun_is_bitwise_identical():
    seq = moving_square(num_frames=6)
    scores = [0.9, 0.2, 0.8, 0.75, 0.1]
    a = track_sequence(seq.frames, seq.boxes[0], tracker_cfg(), Scripted(scores))
    b = track_sequence(seq.frames, seq.boxes[0], tracker_cfg(), Scripted(scores))
    np.testing.assert_array_equal(np.asarray(a.boxes), np.asarray(b.boxes))
    assert a.updated == b.updated


def test_dynamic_off_never_updates():
    seq = moving_square(num_frames=4)
    result = track_sequence(seq.frames, seq.boxes[0], tracker_cfg(dynamic=False), Scripted([0.99] * 3))
    assert result.update_count == 0


def test_one_box_per_frame_and_first_is_init():
    seq = moving_square(num_frames=5)
    result = track_sequence(seq.frames, seq.boxes[0], tracker_cfg(), Scripted([0.2] * 4))
    assert len(result.boxes) == len(result.scores) == 5
    np.testing.assert_allclose(result.boxes[0], seq.boxes[0])
    # Centered predictions keep the box where it started.
    for box in result.boxes:
        np.testing.assert_allclose(box, seq.boxes[0], atol=1e-9)


def test_single_frame_sequence():
    seq = moving_square(num_frames=1)
    predictor = Scripted([])
    result = track_sequence(seq.frames, seq.boxes[0], tracker_cfg(), predictor)
    assert len(result.boxes) == 1
    np.testing.assert_allclose(result.boxes[0], seq.boxes[0])
    assert predictor.seen == []


def test_empty_sequence_is_rejected():
    with pytest.raises(DataError):
        track_sequence([], np.array([0.0, 0.0, 4.0, 4.0]), tracker_cfg(), Scripted([]))


def test_static_templates_never_change():
    seq = moving_square(num_frames=5)
    predictor = Scripted([0.9, 0.9, 0.1, 0.9])
    track_sequence(seq.frames, seq.boxes[0], tracker_cfg(), predictor)
    first = predictor.seen[0]
    for templates in predictor.seen[1:]:
        for a, b in zip(first.static_images, templates.static_images):
            np.testing.assert_array_equal(a, b)
    # Frame 2 scored above tau, so frame 3 sees a dynamic crop of the moved square.
    assert not np.array_equal(predictor.seen[1].dynamic_images[0], first.dynamic_images[0])


def test_crop_box_roundtrip_and_side():
    tf = crop_transform(np.array([10.0, 10.0, 10.0, 10.0]), 2.0, 40)
    assert tf.side == pytest.approx(20.0)
    assert tf.factor == pytest.approx(2.0)
    np.testing.assert_allclose(tf.box_to_crop([10.0, 10.0, 10.0, 10.0]), [10.0, 10.0, 20.0, 20.0])
    box = np.array([7.5, 12.0, 3.0, 4.0])
    np.testing.assert_allclose(tf.box_to_frame(tf.box_to_crop(box)), box, atol=1e-12)


def test_crop_pads_with_frame_mean():
    frame = np.zeros((16, 16, 3), dtype=np.uint8)
    frame[:, 8:] = 200
    patch, _ = crop(frame, np.array([0.0, 0.0, 4.0, 4.0]), 4.0, 16)
    assert patch.shape == (16, 16, 3)
    np.testing.assert_array_equal(patch[0, 0], [100, 100, 100])
    np.testing.assert_array_equal(patch[8, 8], [0, 0, 0])


def test_crop_scale_below_one_is_rejected():
    with pytest.raises(DataError):
        crop(np.zeros((16, 16, 3), dtype=np.uint8), np.array([2.0, 2.0, 4.0, 4.0]), 0.5, 8)


def test_clamp_to_frame_keeps_min_extent():
    np.testing.assert_allclose(clamp_to_frame([-5.0, -5.0, 10.0, 10.0], 20, 20), [0.0, 0.0, 5.0, 5.0])
    np.testing.assert_allclose(clamp_to_frame([30.0, 5.0, 4.0, 4.0], 20, 20), [19.0, 5.0, 1.0, 4.0])


def test_model_tracking_is_deterministic():
    settings = tiny()
    model = build_model(settings, seed=0)
    seq = moving_square(num_frames=4)
    cfg = settings.tracker_config()
    a = track_sequence(seq.frames, seq.boxes[0], cfg, model_predictor(model, settings.prune_config()))
    b = track_sequence(seq.frames, seq.boxes[0], cfg, model_predictor(model, settings.prune_config()))
    np.testing.assert_array_equal(np.asarray(a.boxes), np.asarray(b.boxes))
    assert a.scores == b.scores
    assert all(0.0 <= s <= 1.0 for s in a.scores)
