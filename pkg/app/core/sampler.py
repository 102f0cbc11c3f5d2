from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Tuple

import numpy as np

from app.core.config import ObjectiveConfig, TrackerConfig, TrainConfig
from app.core.errors import DataError
from app.core.objectives import TrainTarget, gaussian_target
from app.core.storage import SequenceRecord
from app.core.tracker import crop

MAX_ATTEMPTS = 50


@dataclass(frozen=True)
class TrainSample:
    static: Tuple[np.ndarray, ...]
    dynamic: Tuple[np.ndarray, ...]
    search: np.ndarray
    target: TrainTarget
    frames: Tuple[int, int, int] = (1, 1, 1)


def make_target(box: np.ndarray, tcfg: TrackerConfig, ocfg: ObjectiveConfig) -> TrainTarget:
    grid = tcfg.search_resolution // tcfg.patch_size
    return gaussian_target(box, grid, grid, tcfg.patch_size, min_overlap=ocfg.min_overlap)


def pick_frames(n: int, max_gap: int, rng: np.random.Generator) -> Tuple[int, int]:
    """1-based (t_dynamic, t_search) with 1 <= t_d < t_s <= min(n, t_d + max_gap)."""
    t_d = int(rng.integers(1, n))
    t_s = int(rng.integers(t_d + 1, min(n, t_d + max_gap) + 1))
    return t_d, t_s


def sample(
    record: SequenceRecord,
    rng: np.random.Generator,
    cfg: TrainConfig,
    tcfg: TrackerConfig,
    ocfg: ObjectiveConfig = ObjectiveConfig(),
) -> TrainSample:
    """Draw a (frame 1, t_d, t_s) training tuple whose target box lies inside the search crop."""
    n = len(record)
    if n < 3:
        raise DataError(f"{record.name}: need at least 3 frames to sample, got {n}")
    size = float(tcfg.search_resolution)
    for _ in range(MAX_ATTEMPTS):
        t_d, t_s = pick_frames(n, cfg.max_gap, rng)
        gt = record.boxes[t_s - 1]
        reach = cfg.search_center_jitter * math.sqrt(gt[2] * gt[3])
        shift = rng.uniform(-0.5, 0.5, size=2) * reach
        center_box = np.array([gt[0] + shift[0], gt[1] + shift[1], gt[2], gt[3]])
        search, tf = crop(record.frames[t_s - 1], center_box, tcfg.search_scale, tcfg.search_resolution)
        box = tf.box_to_crop(gt)
        if box[0] < 0 or box[1] < 0 or box[0] + box[2] > size or box[1] + box[3] > size:
            continue
        static = tuple(crop(record.frames[0], record.boxes[0], k, tcfg.template_resolution)[0] for k in tcfg.scales)
        dynamic = tuple(
            crop(record.frames[t_d - 1], record.boxes[t_d - 1], k, tcfg.template_resolution)[0] for k in tcfg.scales
        )
        return TrainSample(
            static=static,
            dynamic=dynamic,
            search=search,
            target=make_target(box, tcfg, ocfg),
            frames=(1, t_d, t_s),
        )
    raise DataError(f"{record.name}: could not place the target inside a search crop in {MAX_ATTEMPTS} draws")


def flip_sample(s: TrainSample, tcfg: TrackerConfig, ocfg: ObjectiveConfig = ObjectiveConfig()) -> TrainSample:
    """Mirror every crop horizontally; the box maps to x' = W - x - w."""

    def mirror(img: np.ndarray) -> np.ndarray:
        return np.ascontiguousarray(img[:, ::-1])

    width = s.search.shape[1]
    x, y, w, h = s.target.box
    return replace(
        s,
        static=tuple(mirror(i) for i in s.static),
        dynamic=tuple(mirror(i) for i in s.dynamic),
        search=mirror(s.search),
        target=make_target(np.array([width - x - w, y, w, h]), tcfg, ocfg),
    )


def jitter_crop(image: np.ndarray, rng: np.random.Generator, scale_jitter: float, center_jitter: float) -> np.ndarray:
    """Re-window a square crop by a random scale and shift, keeping its size."""
    side = float(image.shape[0])
    factor = rng.uniform(1.0 - scale_jitter, 1.0 + scale_jitter)
    dx, dy = rng.uniform(-center_jitter, center_jitter, size=2) * side
    length = side * factor
    cx, cy = side / 2 + dx, side / 2 + dy
    window = np.array([cx - length / 2, cy - length / 2, length, length])
    return crop(image, window, 1.0, image.shape[0])[0]


def augment(
    s: TrainSample,
    rng: np.random.Generator,
    cfg: TrainConfig,
    tcfg: TrackerConfig,
    ocfg: ObjectiveConfig = ObjectiveConfig(),
) -> TrainSample:
    if rng.random() < cfg.flip_prob:
        s = flip_sample(s, tcfg, ocfg)
    if cfg.scale_jitter <= 0 and cfg.center_jitter <= 0:
        return s
    return replace(
        s,
        static=tuple(jitter_crop(i, rng, cfg.scale_jitter, cfg.center_jitter) for i in s.static),
        dynamic=tuple(jitter_crop(i, rng, cfg.scale_jitter, cfg.center_jitter) for i in s.dynamic),
    )
