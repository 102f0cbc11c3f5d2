from __future__ import annotations

from typing import Dict, List

import numpy as np
import pytest

from app.core.config import Settings, make_settings
from app.core.storage import SequenceRecord

# Small enough that a forward pass takes milliseconds: 2x2 template grid,
# 4x4 search grid, three blocks.
TINY: Dict[str, object] = {
    "patch_size": 4,
    "embed_dim": 8,
    "num_heads": 2,
    "num_blocks": 3,
    "mlp_ratio": 2,
    "template_resolution": 8,
    "search_resolution": 16,
    "scales": (2.0,),
    "dynamic": True,
    "keep_ratio": 0.7,
    "prune_stages": (1, 2),
    "epochs": 1,
    "batch_size": 2,
    "samples_per_epoch": 2,
    "max_gap": 3,
    "bench_train_sequences": 2,
    "bench_test_sequences": 1,
    "bench_frames": 6,
    "bench_frame_size": 64,
    "bench_object_size": 16,
    "bench_distractors": 1,
}


def tiny(**overrides: object) -> Settings:
    return make_settings({**TINY, **overrides})


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_settings() -> Settings:
    return tiny()


@pytest.fixture
def tiny_bench(tiny_settings: Settings) -> Dict[str, List[SequenceRecord]]:
    from eval.synthetic import generate_benchmark

    return generate_benchmark(tiny_settings.bench_config(), seed=3, verbose=False)


def moving_square(num_frames: int = 6, size: int = 64, side: int = 16, step: int = 2) -> SequenceRecord:
    """A bright square drifting right on a gray background."""
    frames, boxes = [], []
    for t in range(num_frames):
        frame = np.full((size, size, 3), 90, dtype=np.uint8)
        x, y = 12 + step * t, 20
        frame[y : y + side, x : x + side] = (230, 60, 40)
        frames.append(frame)
        boxes.append([x, y, side, side])
    return SequenceRecord(name="square", frames=frames, boxes=np.asarray(boxes, dtype=np.float64))


@pytest.fixture
def square_sequence() -> SequenceRecord:
    return moving_square()
