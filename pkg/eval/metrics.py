"""Overlap-based tracking metrics: AO, SR at 0.5/0.75, success AUC and center precision.

Frame 1 carries the given initial box, so every metric is computed over
frames 2..n only.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Mapping, Optional, Sequence, Tuple

import numpy as np

from app.core.errors import DataError
from app.core.storage import fmt, write_json

SUCCESS_THRESHOLDS = np.round(np.arange(0.0, 1.0001, 0.05), 2)
PRECISION_PIXELS = 20.0
NORM_PRECISION_RADIUS = 0.2

REPORT_FIELDNAMES = [
    "sequence",
    "frames",
    "ao",
    "sr50",
    "sr75",
    "auc",
    "precision20",
    "norm_precision",
]


def _as_boxes(boxes: np.ndarray) -> np.ndarray:
    arr = np.asarray(boxes, dtype=np.float64)
    return arr[None, :] if arr.ndim == 1 else arr


def iou_trace(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise IoU of two ``[n, 4]`` xywh arrays."""
    a, b = _as_boxes(a), _as_boxes(b)
    left = np.maximum(a[:, 0], b[:, 0])
    right = np.minimum(a[:, 0] + a[:, 2], b[:, 0] + b[:, 2])
    top = np.maximum(a[:, 1], b[:, 1])
    bottom = np.minimum(a[:, 1] + a[:, 3], b[:, 1] + b[:, 3])
    inter = np.maximum(0.0, right - left) * np.maximum(0.0, bottom - top)
    union = a[:, 2] * a[:, 3] + b[:, 2] * b[:, 3] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(union > 0, inter / union, 0.0)
    return np.clip(out, 0.0, 1.0)


def iou(a: np.ndarray, b: np.ndarray) -> float:
    return float(iou_trace(a, b)[0])


def centers(boxes: np.ndarray) -> np.ndarray:
    boxes = _as_boxes(boxes)
    return boxes[:, :2] + boxes[:, 2:] / 2


def success_curve(trace: np.ndarray, thresholds: np.ndarray = SUCCESS_THRESHOLDS) -> np.ndarray:
    trace = np.asarray(trace, dtype=np.float64)
    if trace.size == 0:
        return np.zeros(len(thresholds))
    return np.array([(trace > t).mean() for t in thresholds])


@dataclass(frozen=True)
class SequenceScores:
    name: str
    trace: np.ndarray
    ao: float
    sr50: float
    sr75: float
    auc: float
    precision: float
    norm_precision: float

    @property
    def frames(self) -> int:
        return int(self.trace.size)

    def row(self) -> Dict[str, object]:
        return {
            "sequence": self.name,
            "frames": self.frames,
            "ao": fmt(self.ao),
            "sr50": fmt(self.sr50),
            "sr75": fmt(self.sr75),
            "auc": fmt(self.auc),
            "precision20": fmt(self.precision),
            "norm_precision": fmt(self.norm_precision),
        }


def summarize_trace(trace: np.ndarray) -> Tuple[float, float, float]:
    """(AO, SR_0.5, SR_0.75) of an IoU trace; an empty trace scores 0."""
    trace = np.asarray(trace, dtype=np.float64)
    if trace.size == 0:
        return 0.0, 0.0, 0.0
    return float(trace.mean()), float((trace > 0.5).mean()), float((trace > 0.75).mean())


def score_sequence(name: str, boxes: np.ndarray, gt: np.ndarray) -> SequenceScores:
    boxes, gt = _as_boxes(boxes), _as_boxes(gt)
    if boxes.shape != gt.shape:
        raise DataError(f"{name}: {len(boxes)} predicted boxes for {len(gt)} ground-truth boxes")
    pred, truth = boxes[1:], gt[1:]
    trace = iou_trace(pred, truth) if len(pred) else np.zeros(0)
    ao, sr50, sr75 = summarize_trace(trace)
    if len(pred):
        err = centers(pred) - centers(truth)
        dist = np.linalg.norm(err, axis=1)
        norm_dist = np.linalg.norm(err / np.maximum(truth[:, 2:], 1e-12), axis=1)
        precision = float((dist <= PRECISION_PIXELS).mean())
        norm_precision = float((norm_dist <= NORM_PRECISION_RADIUS).mean())
    else:
        precision = norm_precision = 0.0
    return SequenceScores(
        name=name,
        trace=trace,
        ao=ao,
        sr50=sr50,
        sr75=sr75,
        auc=float(success_curve(trace).mean()) if trace.size else 0.0,
        precision=precision,
        norm_precision=norm_precision,
    )


@dataclass
class EvalReport:
    sequences: Dict[str, SequenceScores]
    ao: float
    sr50: float
    sr75: float
    auc: float
    precision: float
    norm_precision: float
    config_hash: str = ""
    flops: Dict[str, object] = field(default_factory=dict)

    @property
    def traces(self) -> Dict[str, np.ndarray]:
        return {name: s.trace for name, s in self.sequences.items()}

    def summary(self) -> Dict[str, object]:
        return {
            "sequences": len(self.sequences),
            "ao": self.ao,
            "sr50": self.sr50,
            "sr75": self.sr75,
            "auc": self.auc,
            "precision20": self.precision,
            "norm_precision": self.norm_precision,
            "config_hash": self.config_hash,
            "flops": self.flops,
        }


def _aggregate(scores: Sequence[SequenceScores], config_hash: str, flops: Optional[Dict[str, object]]) -> EvalReport:
    # Sequences without evaluated frames carry no information.
    counted = [s for s in scores if s.frames] or list(scores)

    def avg(key: str) -> float:
        return float(np.mean([getattr(s, key) for s in counted])) if counted else 0.0

    return EvalReport(
        sequences={s.name: s for s in scores},
        ao=avg("ao"),
        sr50=avg("sr50"),
        sr75=avg("sr75"),
        auc=avg("auc"),
        precision=avg("precision"),
        norm_precision=avg("norm_precision"),
        config_hash=config_hash,
        flops=dict(flops or {}),
    )


def evaluate(
    boxes: np.ndarray,
    gt: np.ndarray,
    *,
    name: str = "sequence",
    config_hash: str = "",
    flops: Optional[Dict[str, object]] = None,
) -> EvalReport:
    return _aggregate([score_sequence(name, boxes, gt)], config_hash, flops)


def evaluate_benchmark(
    results: Mapping[str, Tuple[np.ndarray, np.ndarray]],
    *,
    config_hash: str = "",
    flops: Optional[Dict[str, object]] = None,
) -> EvalReport:
    """Per-sequence scores averaged with equal weight per sequence."""
    scores = [score_sequence(name, boxes, gt) for name, (boxes, gt) in sorted(results.items())]
    return _aggregate(scores, config_hash, flops)


def write_report(report: EvalReport, out_dir: Path) -> Tuple[Path, Path]:
    """eval_report.csv (one row per sequence plus ``__mean__``) and eval_report.json."""
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "eval_report.csv"
    with csv_path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=REPORT_FIELDNAMES)
        writer.writeheader()
        for s in report.sequences.values():
            writer.writerow(s.row())
        writer.writerow(
            {
                "sequence": "__mean__",
                "frames": sum(s.frames for s in report.sequences.values()),
                "ao": fmt(report.ao),
                "sr50": fmt(report.sr50),
                "sr75": fmt(report.sr75),
                "auc": fmt(report.auc),
                "precision20": fmt(report.precision),
                "norm_precision": fmt(report.norm_precision),
            }
        )
    json_path = out_dir / "eval_report.json"
    write_json(
        json_path,
        {
            **report.summary(),
            "per_sequence": {
                name: {**s.row(), "iou_trace": [float(v) for v in s.trace]} for name, s in report.sequences.items()
            },
        },
    )
    return csv_path, json_path
