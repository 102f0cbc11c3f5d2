"""Inference loop: crops, template state and confidence-gated template refresh."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, List, Optional, Tuple

import cv2
import numpy as np

from app.core.config import PruneConfig, TrackerConfig
from app.core.errors import DataError
from app.core.model import Model, run_model
from app.core.objectives import check_box

Predictor = Callable[["TemplateSet", np.ndarray], Tuple[np.ndarray, float]]


@dataclass(frozen=True)
class CropTransform:
    """Square source window ``side`` px wide centered on (center_x, center_y), resampled to ``out_size``."""

    center_x: float
    center_y: float
    side: float
    out_size: int

    @property
    def factor(self) -> float:
        return self.out_size / self.side

    @property
    def origin(self) -> Tuple[float, float]:
        return self.center_x - self.side / 2, self.center_y - self.side / 2

    def matrix(self) -> np.ndarray:
        """Frame->crop affine in cv2's pixel-center convention."""
        a = self.factor
        x0, y0 = self.origin
        return np.array(
            [[a, 0.0, a * (0.5 - x0) - 0.5], [0.0, a, a * (0.5 - y0) - 0.5]],
            dtype=np.float64,
        )

    def box_to_crop(self, box: np.ndarray) -> np.ndarray:
        x, y, w, h = np.asarray(box, dtype=np.float64)
        x0, y0 = self.origin
        a = self.factor
        return np.array([(x - x0) * a, (y - y0) * a, w * a, h * a])

    def box_to_frame(self, box: np.ndarray) -> np.ndarray:
        x, y, w, h = np.asarray(box, dtype=np.float64)
        x0, y0 = self.origin
        a = self.factor
        return np.array([x / a + x0, y / a + y0, w / a, h / a])


@dataclass(frozen=True)
class TemplateCrop:
    image: np.ndarray
    box: np.ndarray
    scale: float
    transform: CropTransform


@dataclass(frozen=True)
class TemplateSet:
    static: Tuple[TemplateCrop, ...]
    dynamic: Tuple[TemplateCrop, ...]
    scales: Tuple[float, ...]

    def __post_init__(self) -> None:
        if not (len(self.static) == len(self.dynamic) == len(self.scales)):
            raise DataError("static, dynamic and scales must all have one entry per scale")

    @property
    def static_images(self) -> List[np.ndarray]:
        return [t.image for t in self.static]

    @property
    def dynamic_images(self) -> List[np.ndarray]:
        return [t.image for t in self.dynamic]


@dataclass(frozen=True)
class TrackerState:
    templates: TemplateSet
    box: np.ndarray
    tau: float
    frame_index: int = 1
    score: float = 1.0
    updates: int = 0


@dataclass
class TrackResult:
    boxes: List[np.ndarray] = field(default_factory=list)
    scores: List[float] = field(default_factory=list)
    updated: List[bool] = field(default_factory=list)

    @property
    def update_count(self) -> int:
        return int(sum(self.updated))


def frame_mean(frame: np.ndarray) -> Tuple[float, ...]:
    return tuple(float(c) for c in frame.reshape(-1, frame.shape[-1]).mean(axis=0))


def crop_transform(box: np.ndarray, k: float, out_size: int) -> CropTransform:
    x, y, w, h = check_box(box)
    return CropTransform(center_x=x + w / 2, center_y=y + h / 2, side=k * math.sqrt(w * h), out_size=out_size)


def crop(frame: np.ndarray, box: np.ndarray, k: float, out_size: int) -> Tuple[np.ndarray, CropTransform]:
    """Square crop of side ``k * sqrt(w*h)`` around the box center, bilinearly resized.

    Area outside the frame takes the frame's mean color.
    """
    if k < 1.0:
        raise DataError(f"Crop scale must be >= 1, got {k}")
    tf = crop_transform(box, k, out_size)
    patch = cv2.warpAffine(
        frame,
        tf.matrix(),
        (out_size, out_size),
        flags=cv2.INTER_LINEAR,
        borderMode=cv2.BORDER_CONSTANT,
        borderValue=frame_mean(frame),
    )
    return patch, tf


def clamp_to_frame(box: np.ndarray, width: int, height: int, min_size: float = 1.0) -> np.ndarray:
    """Intersect with the frame, keeping at least ``min_size`` px of extent."""
    x, y, w, h = (float(v) for v in box)
    x1 = min(max(x, 0.0), width - min_size)
    y1 = min(max(y, 0.0), height - min_size)
    x2 = min(max(x + w, x1 + min_size), float(width))
    y2 = min(max(y + h, y1 + min_size), float(height))
    return np.array([x1, y1, x2 - x1, y2 - y1], dtype=np.float64)


def crop_templates(frame: np.ndarray, box: np.ndarray, cfg: TrackerConfig) -> Tuple[TemplateCrop, ...]:
    crops = []
    for k in cfg.scales:
        image, tf = crop(frame, box, k, cfg.template_resolution)
        crops.append(TemplateCrop(image=image, box=np.asarray(box, dtype=np.float64).copy(), scale=k, transform=tf))
    return tuple(crops)


def _check_frame(frame: np.ndarray, cfg: TrackerConfig) -> None:
    if frame.ndim != 3 or frame.shape[2] != 3:
        raise DataError(f"Expected an HxWx3 frame, got {frame.shape}")
    if frame.shape[0] < cfg.patch_size or frame.shape[1] < cfg.patch_size:
        raise DataError(f"Frame {frame.shape[1]}x{frame.shape[0]} is smaller than one {cfg.patch_size}px patch")


def init_tracker(frame: np.ndarray, box: np.ndarray, cfg: TrackerConfig) -> TrackerState:
    """Frame-1 state: static templates cut at every scale, dynamic set to the same crops."""
    _check_frame(frame, cfg)
    box = check_box(box)
    static = crop_templates(frame, box, cfg)
    templates = TemplateSet(static=static, dynamic=static, scales=tuple(cfg.scales))
    return TrackerState(templates=templates, box=box, tau=cfg.tau)


def track_frame(
    state: TrackerState,
    frame: np.ndarray,
    predictor: Predictor,
    cfg: TrackerConfig,
) -> Tuple[np.ndarray, float, TrackerState]:
    _check_frame(frame, cfg)
    height, width = frame.shape[:2]
    search, tf = crop(frame, state.box, cfg.search_scale, cfg.search_resolution)
    crop_box, score = predictor(state.templates, search)
    score = float(score)
    box = clamp_to_frame(tf.box_to_frame(crop_box), width, height)

    templates, updates = state.templates, state.updates
    if cfg.dynamic and score > state.tau:
        templates = replace(templates, dynamic=crop_templates(frame, box, cfg))
        updates += 1
    new_state = replace(
        state,
        templates=templates,
        box=box,
        frame_index=state.frame_index + 1,
        score=score,
        updates=updates,
    )
    return box, score, new_state


def track_sequence(
    frames: Iterable[np.ndarray],
    init_box: np.ndarray,
    cfg: TrackerConfig,
    predictor: Predictor,
    on_frame: Optional[Callable[[int, np.ndarray, float], None]] = None,
) -> TrackResult:
    it = iter(frames)
    try:
        first = next(it)
    except StopIteration:
        raise DataError("Cannot track an empty sequence") from None
    state = init_tracker(first, init_box, cfg)
    result = TrackResult(boxes=[state.box.copy()], scores=[1.0], updated=[False])
    for frame in it:
        before = state.updates
        box, score, state = track_frame(state, frame, predictor, cfg)
        result.boxes.append(box)
        result.scores.append(score)
        result.updated.append(state.updates > before)
        if on_frame is not None:
            on_frame(state.frame_index, box, score)
    return result


def model_predictor(model: Model, prune_cfg: Optional[PruneConfig] = None) -> Predictor:
    """Bind a trained model as a tracker predictor; dynamic crops are skipped when the model has none."""
    use_dynamic = model.encoder_config.use_dynamic

    def predict(templates: TemplateSet, search: np.ndarray) -> Tuple[np.ndarray, float]:
        out = run_model(
            model,
            templates.static_images,
            templates.dynamic_images if use_dynamic else None,
            search,
            prune_cfg=prune_cfg,
        )
        return out.box, out.confidence

    return predict
