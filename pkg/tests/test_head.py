from __future__ import annotations

import numpy as np

from app.core.head import TrackOutput, decode, head_forward, head_macs, init_head, layer_shapes, peak_cell
from app.core.tensor import Tensor, count_macs


def output(logits: np.ndarray, offset: np.ndarray, size: np.ndarray) -> TrackOutput:
    logits = logits[None]
    return TrackOutput(
        score_logits=Tensor(logits),
        score=Tensor(1 / (1 + np.exp(-logits))),
        offset=Tensor(offset),
        size=Tensor(size),
    )


def test_zero_grid_with_zero_final_layers_scores_one_half():
    head = init_head(16, np.random.default_rng(0), zero_final=True)
    out = head_forward(head, Tensor(np.zeros((16, 4, 4))))
    np.testing.assert_allclose(out.score.data, 0.5)
    assert out.score.shape == (1, 4, 4)
    assert out.offset.shape == (2, 4, 4)
    assert out.size.shape == (2, 4, 4)


def test_layer_shapes_halve_channels():
    assert layer_shapes(64, 2) == [(32, 64, 3), (16, 32, 3), (8, 16, 3), (2, 8, 1)]


def test_head_macs_match_counter():
    head = init_head(16, np.random.default_rng(1))
    with count_macs() as counter:
        head_forward(head, Tensor(np.random.default_rng(2).normal(size=(16, 4, 4))))
    assert counter.total == head_macs(16, 4, 4)


def test_decode_hand_example():
    logits = np.full((4, 4), -5.0)
    logits[1, 2] = 5.0
    out = decode(output(logits, np.zeros((2, 4, 4)), np.full((2, 4, 4), 0.5)), stride=16, search_size=64)
    assert out.peak == (1, 2)
    # Center (2*16, 1*16) = (32, 16), 32x32 box.
    np.testing.assert_allclose(out.box, [16.0, 0.0, 32.0, 32.0])


def test_decode_clamps_to_crop():
    logits = np.zeros((4, 4))
    logits[0, 0] = 1.0
    out = decode(output(logits, np.zeros((2, 4, 4)), np.full((2, 4, 4), 0.5)), stride=16, search_size=64)
    np.testing.assert_allclose(out.box, [0.0, 0.0, 16.0, 16.0])


def test_uniform_scores_pick_first_cell():
    out = decode(output(np.zeros((4, 4)), np.zeros((2, 4, 4)), np.full((2, 4, 4), 0.25)), 16, 64)
    assert out.peak == (0, 0)
    assert peak_cell(np.zeros((1, 3, 3))) == (0, 0)


def test_confidence_is_max_score():
    score = np.zeros((1, 4, 4))
    score[0, 3, 1] = 1.0
    out = TrackOutput(
        score_logits=Tensor(score),
        score=Tensor(score),
        offset=Tensor(np.zeros((2, 4, 4))),
        size=Tensor(np.full((2, 4, 4), 0.1)),
    )
    decoded = decode(out, 16, 64)
    assert decoded.confidence == 1.0
    assert decoded.peak == (3, 1)


def test_peak_invariant_under_positive_scaling():
    rng = np.random.default_rng(4)
    logits = rng.normal(size=(1, 5, 5))
    assert peak_cell(logits) == peak_cell(logits * 3.7)
