from __future__ import annotations

import numpy as np
import pytest

from app.core.config import BenchConfig
from app.core.errors import DataError
from app.core.storage import load_benchmark
from eval.synthetic import GeneratorParams, generate, generate_benchmark, sequence_seeds

SMALL = GeneratorParams(num_frames=5, frame_size=64, object_size=16, distractors=1)


def test_same_seed_same_pixels():
    a, b = generate(SMALL, seed=9), generate(SMALL, seed=9)
    for fa, fb in zip(a.frames, b.frames):
        np.testing.assert_array_equal(fa, fb)
    np.testing.assert_array_equal(a.boxes, b.boxes)
    assert not np.array_equal(generate(SMALL, seed=10).frames[0], a.frames[0])


def test_static_scene_without_drift_or_distractors():
    params = GeneratorParams(
        num_frames=4, frame_size=64, object_size=16, hue_drift=0.0, scale_drift=0.0, distractors=0, speed=0.0
    )
    seq = generate(params, seed=1)
    for frame in seq.frames[1:]:
        np.testing.assert_array_equal(frame, seq.frames[0])
    np.testing.assert_allclose(seq.boxes, np.tile(seq.boxes[0], (4, 1)))


def test_hue_walks_at_the_drift_rate():
    params = GeneratorParams(num_frames=6, frame_size=64, object_size=16, hue=30.0, hue_drift=2.5)
    seq = generate(params, seed=2)
    hue = seq.traces["hue"]
    assert hue[0] == 30.0
    assert hue[-1] - hue[0] == pytest.approx(2.5 * 5)
    np.testing.assert_allclose(np.diff(hue), 2.5)


def test_boxes_stay_inside_the_frame():
    seq = generate(GeneratorParams(num_frames=20, frame_size=64, object_size=16, speed=8.0), seed=4)
    assert (seq.boxes[:, :2] >= 0).all()
    assert (seq.boxes[:, 0] + seq.boxes[:, 2] <= 64).all()
    assert (seq.boxes[:, 1] + seq.boxes[:, 3] <= 64).all()
    assert (seq.boxes[:, 2:] > 0).all()


@pytest.mark.parametrize(
    "overrides",
    [{"num_frames": 0}, {"object_size": 2}, {"frame_size": 32}, {"sides": 2}, {"speed": -1.0}, {"scale_drift": -0.01}],
)
def test_infeasible_params_are_rejected(overrides):
    values = dict(num_frames=5, frame_size=64, object_size=16)
    values.update(overrides)
    with pytest.raises(DataError):
        generate(GeneratorParams(**values), seed=0)


def test_benchmark_splits_and_disk_layout(tmp_path):
    bench = BenchConfig(train_sequences=2, test_sequences=1, num_frames=3, frame_size=64, object_size=16, distractors=1)
    splits = generate_benchmark(bench, seed=0, out_dir=tmp_path, verbose=False)
    assert [r.name for r in splits["train"]] == ["train_000", "train_001"]
    assert [r.name for r in splits["test"]] == ["test_000"]
    loaded = load_benchmark(tmp_path / "test")
    np.testing.assert_array_equal(loaded[0].frames[2], splits["test"][0].frames[2])
    assert loaded[0].params["seed"] == str(splits["test"][0].params["seed"])
    assert len({r.params["seed"] for r in splits["train"] + splits["test"]}) == 3


def test_scale_drift_grows_or_shrinks_the_target():
    params = GeneratorParams(num_frames=10, frame_size=128, object_size=16, scale_drift=0.05, distractors=0)
    signs = set()
    for seed in range(40):
        seq = generate(params, seed=seed)
        sizes = seq.traces["size"]
        sign = seq.params["scale_sign"]
        signs.add(sign)
        assert sizes[0] == 16.0
        if sign > 0:
            assert (np.diff(sizes) > 0).all()
            assert sizes[-1] == pytest.approx(16.0 * 1.05**9)
            assert seq.boxes[-1, 2] > seq.boxes[0, 2]
        else:
            assert (np.diff(sizes) < 0).all()
            assert sizes[-1] == pytest.approx(16.0 * 1.05**-9)
    assert signs == {1, -1}


def test_growth_stops_at_twice_the_initial_size():
    params = GeneratorParams(num_frames=30, frame_size=128, object_size=16, scale_drift=0.1, distractors=0)
    for seed in range(40):
        seq = generate(params, seed=seed)
        if seq.params["scale_sign"] > 0:
            assert seq.traces["size"].max() == pytest.approx(32.0)
            assert (seq.boxes[:, 0] + seq.boxes[:, 2] <= 128).all()
            break
    else:
        pytest.fail("no growing sequence among 40 seeds")


def test_sequence_seeds_are_distinct_and_reproducible():
    seeds = sequence_seeds(0, 2000)
    assert len(set(seeds)) == 2000
    assert seeds == sequence_seeds(0, 2000)
    assert all(0 <= s < 2**31 - 1 for s in seeds)
    assert sequence_seeds(1, 5) != seeds[:5]
