"""Overlay rendering: predicted (and optional ground-truth) boxes drawn on frames."""
from __future__ import annotations

from pathlib import Path
from typing import List, Optional, Sequence

import cv2
import numpy as np

PRED_COLOR = (0, 255, 0)
GT_COLOR = (255, 0, 0)


def draw_overlay(
    frame: np.ndarray,
    box: np.ndarray,
    *,
    gt: Optional[np.ndarray] = None,
    label: Optional[str] = None,
    thickness: int = 2,
) -> np.ndarray:
    """Return an RGB copy of ``frame`` with the box (green) and ground truth (red) drawn."""
    img = np.ascontiguousarray(frame, dtype=np.uint8).copy()
    if gt is not None:
        x, y, w, h = (int(round(v)) for v in gt)
        cv2.rectangle(img, (x, y), (x + w, y + h), GT_COLOR, 1)
    x, y, w, h = (int(round(v)) for v in box)
    cv2.rectangle(img, (x, y), (x + w, y + h), PRED_COLOR, thickness)
    if label:
        cv2.putText(img, label, (4, 14), cv2.FONT_HERSHEY_SIMPLEX, 0.4, (255, 255, 255), 1, cv2.LINE_AA)
    return img


def write_overlays(
    frames: Sequence[np.ndarray],
    boxes: Sequence[np.ndarray],
    out_dir: Path,
    *,
    scores: Optional[Sequence[float]] = None,
    gt: Optional[np.ndarray] = None,
    fps: int = 10,
    video: bool = True,
) -> List[Path]:
    """Write one PNG per frame and, with ``video``, an ``overlay.mp4`` next to them.

    Returns the written paths; the video is skipped silently when no mp4
    encoder is available.
    """
    out_dir.mkdir(parents=True, exist_ok=True)
    written: List[Path] = []
    rendered = []
    for i, (frame, box) in enumerate(zip(frames, boxes), start=1):
        label = f"#{i}" if scores is None else f"#{i} score={scores[i - 1]:.3f}"
        img = draw_overlay(frame, box, gt=None if gt is None else gt[i - 1], label=label)
        path = out_dir / f"{i:08d}.png"
        cv2.imwrite(str(path), cv2.cvtColor(img, cv2.COLOR_RGB2BGR))
        written.append(path)
        rendered.append(img)

    if video and rendered:
        height, width = rendered[0].shape[:2]
        video_path = out_dir / "overlay.mp4"
        fourcc = cv2.VideoWriter_fourcc(*"mp4v")
        writer = cv2.VideoWriter(str(video_path), fourcc, fps, (width, height))
        if writer.isOpened():
            for img in rendered:
                writer.write(cv2.cvtColor(img, cv2.COLOR_RGB2BGR))
            writer.release()
            written.append(video_path)
        else:
            print(f"[track] mp4 encoder unavailable; skipped {video_path}")
    return written
