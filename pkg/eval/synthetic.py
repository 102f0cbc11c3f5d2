"""Seeded synthetic tracking sequences: a drifting polygon among look-alike distractors.

The target's hue walks away from its first-frame color at a fixed rate while
distractors keep the target's initial hue (plus a small offset), so a tracker
that only remembers frame 1 is drawn towards the distractors.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import cv2
import numpy as np

from app.core.config import BenchConfig
from app.core.errors import DataError
from app.core.storage import SequenceRecord, save_sequence

DISTRACTOR_HUE_SPREAD = 10.0
SATURATION = 200
VALUE = 220
MOMENTUM = 0.8


@dataclass(frozen=True)
class GeneratorParams:
    num_frames: int = 40
    frame_size: int = 256
    object_size: int = 64
    sides: int = 5
    hue: float = 0.0
    hue_drift: float = 1.5
    scale_drift: float = 0.01
    distractors: int = 3
    speed: float = 4.0
    background_contrast: float = 40.0

    @classmethod
    def from_bench(cls, bench: BenchConfig) -> "GeneratorParams":
        return cls(
            num_frames=bench.num_frames,
            frame_size=bench.frame_size,
            object_size=bench.object_size,
            hue_drift=bench.hue_drift,
            scale_drift=bench.scale_drift,
            distractors=bench.distractors,
            speed=bench.speed,
        )

    def validate(self) -> "GeneratorParams":
        if self.num_frames < 1:
            raise DataError("num_frames must be >= 1")
        if self.object_size < 4:
            raise DataError("object_size must be >= 4 px")
        if self.frame_size < 4 * self.object_size:
            raise DataError(
                f"frame_size {self.frame_size} must be at least 4x object_size {self.object_size}"
            )
        if self.sides < 3:
            raise DataError("a polygon needs at least 3 sides")
        if self.distractors < 0 or self.speed < 0 or self.scale_drift < 0:
            raise DataError("distractors, speed and scale_drift must be non-negative")
        return self


def hsv_to_rgb(hue_deg: float, saturation: int = SATURATION, value: int = VALUE) -> Tuple[int, int, int]:
    hsv = np.array([[[int(round((hue_deg % 360.0) / 2.0)) % 180, saturation, value]]], dtype=np.uint8)
    r, g, b = cv2.cvtColor(hsv, cv2.COLOR_HSV2RGB)[0, 0]
    return int(r), int(g), int(b)


def polygon(cx: float, cy: float, size: float, sides: int, angle: float) -> np.ndarray:
    t = angle + 2 * math.pi * np.arange(sides) / sides
    r = size / 2
    return np.stack([cx + r * np.cos(t), cy + r * np.sin(t)], axis=1)


def bounding_box(points: np.ndarray, frame_size: int) -> np.ndarray:
    x1, y1 = np.clip(points.min(axis=0), 0, frame_size)
    x2, y2 = np.clip(points.max(axis=0), 0, frame_size)
    return np.array([x1, y1, x2 - x1, y2 - y1], dtype=np.float64)


def background(rng: np.random.Generator, size: int, contrast: float) -> np.ndarray:
    """Smooth low-frequency color noise around mid gray."""
    coarse = rng.normal(0.0, 1.0, size=(8, 8, 3)).astype(np.float32)
    smooth = cv2.resize(coarse, (size, size), interpolation=cv2.INTER_CUBIC)
    return np.clip(110.0 + contrast * smooth, 0, 255).astype(np.uint8)


class _Walker:
    """Smooth random walk kept inside the frame with a margin of half the object size."""

    def __init__(self, rng: np.random.Generator, frame_size: int, margin: float, speed: float) -> None:
        self.rng = rng
        self.lo, self.hi = margin, frame_size - margin
        self.pos = rng.uniform(self.lo, self.hi, size=2)
        self.vel = rng.normal(0.0, speed, size=2)
        self.speed = speed

    def step(self) -> np.ndarray:
        self.vel = MOMENTUM * self.vel + (1 - MOMENTUM) * self.rng.normal(0.0, self.speed, size=2) * 2.0
        self.pos = self.pos + self.vel
        for i in range(2):
            if self.pos[i] < self.lo:
                self.pos[i] = 2 * self.lo - self.pos[i]
                self.vel[i] = abs(self.vel[i])
            elif self.pos[i] > self.hi:
                self.pos[i] = 2 * self.hi - self.pos[i]
                self.vel[i] = -abs(self.vel[i])
            self.pos[i] = float(np.clip(self.pos[i], self.lo, self.hi))
        return self.pos.copy()


def generate(params: GeneratorParams, seed: int, name: Optional[str] = None) -> SequenceRecord:
    """Render one sequence; identical (params, seed) pairs give identical pixels."""
    params.validate()
    rng = np.random.default_rng(seed)
    size = params.frame_size
    # Growth runs until the object doubles; the walker margin leaves room for the largest size.
    reach = params.object_size * (1.0 + params.scale_drift) ** (params.num_frames - 1)
    max_object = min(reach, 2.0 * params.object_size)
    min_object = params.object_size / 2.0
    grow = 1.0 if rng.random() < 0.5 else -1.0
    angle = float(rng.uniform(0, 2 * math.pi))
    bg = background(rng, size, params.background_contrast)

    target = _Walker(rng, size, max_object / 2, params.speed)
    others = [_Walker(rng, size, params.object_size / 2, params.speed) for _ in range(params.distractors)]
    other_hues = [params.hue + float(rng.uniform(-DISTRACTOR_HUE_SPREAD, DISTRACTOR_HUE_SPREAD)) for _ in others]
    other_angles = [float(rng.uniform(0, 2 * math.pi)) for _ in others]

    frames: List[np.ndarray] = []
    boxes: List[np.ndarray] = []
    hues: List[float] = []
    sizes: List[float] = []
    for t in range(params.num_frames):
        hue = params.hue + params.hue_drift * t
        obj = float(np.clip(params.object_size * (1.0 + params.scale_drift) ** (grow * t), min_object, max_object))
        if t == 0:
            centers = [target.pos.copy()] + [w.pos.copy() for w in others]
        else:
            centers = [target.step()] + [w.step() for w in others]

        frame = bg.copy()
        for (cx, cy), h, a in zip(centers[1:], other_hues, other_angles):
            pts = polygon(cx, cy, params.object_size, params.sides, a)
            cv2.fillPoly(frame, [np.round(pts * 16).astype(np.int32)], hsv_to_rgb(h), lineType=cv2.LINE_AA, shift=4)
        pts = polygon(centers[0][0], centers[0][1], obj, params.sides, angle)
        cv2.fillPoly(frame, [np.round(pts * 16).astype(np.int32)], hsv_to_rgb(hue), lineType=cv2.LINE_AA, shift=4)

        frames.append(frame)
        boxes.append(bounding_box(pts, size))
        hues.append(hue)
        sizes.append(obj)

    meta: Dict[str, object] = {**asdict(params), "seed": seed, "motion": "momentum-random-walk", "scale_sign": int(grow)}
    return SequenceRecord(
        name=name or f"seq_{seed:06d}",
        frames=frames,
        boxes=np.stack(boxes),
        params=meta,
        traces={"hue": np.asarray(hues), "size": np.asarray(sizes)},
    )


def sequence_seeds(seed: int, count: int) -> List[int]:
    """``count`` distinct generator seeds drawn without replacement from ``seed``."""
    rng = np.random.default_rng(seed)
    return [int(s) for s in rng.choice(2**31 - 1, size=count, replace=False)]


def generate_benchmark(
    bench: BenchConfig,
    seed: int,
    out_dir: Optional[Path] = None,
    *,
    verbose: bool = True,
) -> Dict[str, List[SequenceRecord]]:
    """Train/test splits with disjoint per-sequence seeds derived from ``seed``."""
    base = GeneratorParams.from_bench(bench).validate()
    seeds = sequence_seeds(seed, bench.train_sequences + bench.test_sequences)
    rng = np.random.default_rng(seed + 1)
    splits: Dict[str, List[SequenceRecord]] = {"train": [], "test": []}
    for i, s in enumerate(seeds):
        split = "train" if i < bench.train_sequences else "test"
        params = replace(base, hue=float(rng.uniform(0, 360)), sides=int(rng.integers(3, 8)))
        index = i if split == "train" else i - bench.train_sequences
        record = generate(params, s, name=f"{split}_{index:03d}")
        splits[split].append(record)
        if out_dir is not None:
            save_sequence(record, out_dir / split / record.name)
    if verbose:
        print(f"[genbench] train={len(splits['train'])} test={len(splits['test'])} seed={seed}")
    return splits
