from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Optional, Tuple, Union

import numpy as np

from app.core.config import ObjectiveConfig
from app.core.errors import DataError
from app.core.head import TrackOutput, peak_cell
from app.core.tensor import (
    Tensor,
    abs_,
    add,
    as_tensor,
    clamp,
    concat,
    div,
    gather,
    log,
    maximum,
    mean,
    minimum,
    mul,
    power,
    reshape,
    scale,
    sub,
    sum_,
)

BoxLike = Union[Tensor, np.ndarray]


@dataclass(frozen=True)
class TrainTarget:
    heatmap: np.ndarray
    box: np.ndarray
    center_cell: Tuple[int, int]
    sigma: float
    stride: int
    search_size: int

    @property
    def box_normalized(self) -> np.ndarray:
        return self.box / float(self.search_size)


def gaussian_radius(height: float, width: float, min_overlap: float = 0.7) -> float:
    """Smallest corner shift radius keeping IoU >= ``min_overlap`` with the box."""
    b1 = height + width
    c1 = width * height * (1 - min_overlap) / (1 + min_overlap)
    r1 = (b1 + math.sqrt(b1**2 - 4 * c1)) / 2

    b2 = 2 * (height + width)
    c2 = (1 - min_overlap) * width * height
    r2 = (b2 + math.sqrt(b2**2 - 16 * c2)) / 2

    a3 = 4 * min_overlap
    b3 = -2 * min_overlap * (height + width)
    c3 = (min_overlap - 1) * width * height
    r3 = (b3 + math.sqrt(b3**2 - 4 * a3 * c3)) / 2
    return min(r1, r2, r3)


def sigma_for_box(w_cells: float, h_cells: float, min_overlap: float = 0.7) -> float:
    radius = max(0, int(gaussian_radius(h_cells, w_cells, min_overlap)))
    return (2 * radius + 1) / 6.0


def check_box(box: np.ndarray) -> np.ndarray:
    box = np.asarray(box, dtype=np.float64).reshape(-1)
    if box.shape != (4,) or not np.all(np.isfinite(box)):
        raise DataError(f"Box must be four finite numbers, got {box!r}")
    if box[2] <= 0 or box[3] <= 0:
        raise DataError(f"Box has non-positive extent: {box.tolist()}")
    return box


def gaussian_target(
    box: np.ndarray,
    grid_w: int,
    grid_h: int,
    stride: int,
    *,
    sigma: Optional[float] = None,
    min_overlap: float = 0.7,
) -> TrainTarget:
    """Heatmap supervision for a crop-space box, peaked at the cell holding its center."""
    box = check_box(box)
    cx, cy = box[0] + box[2] / 2, box[1] + box[3] / 2
    px = int(np.clip(math.floor(cx / stride), 0, grid_w - 1))
    py = int(np.clip(math.floor(cy / stride), 0, grid_h - 1))
    if sigma is None:
        sigma = sigma_for_box(box[2] / stride, box[3] / stride, min_overlap)
    xs = np.arange(grid_w, dtype=np.float64)[None, :]
    ys = np.arange(grid_h, dtype=np.float64)[:, None]
    heatmap = np.exp(-((xs - px) ** 2 + (ys - py) ** 2) / (2 * sigma**2))
    return TrainTarget(
        heatmap=heatmap,
        box=box,
        center_cell=(px, py),
        sigma=float(sigma),
        stride=stride,
        search_size=grid_w * stride,
    )


def focal_loss(pred: Tensor, target: np.ndarray, alpha: float = 2.0, beta: float = 4.0, eps: float = 1e-6) -> Tensor:
    """Penalty-reduced pixel focal loss, normalized by the count of G == 1 cells."""
    target = np.asarray(target, dtype=pred.dtype)
    p = clamp(reshape(pred, target.shape), eps, 1.0 - eps)
    pos = (target == 1.0).astype(pred.dtype)
    neg = 1.0 - pos
    pos_term = mul(mul(power(sub(1.0, p), alpha), log(p)), pos)
    neg_term = mul(mul(power(p, alpha), log(sub(1.0, p))), neg * np.power(1.0 - target, beta))
    total = add(sum_(pos_term), sum_(neg_term))
    return scale(total, -1.0 / max(1.0, float(pos.sum())))


def _column(box: Tensor, i: int) -> Tensor:
    return gather(box, [i], axis=1)


def giou_loss(pred: BoxLike, gt: BoxLike) -> Tensor:
    """1 - GIoU for xywh boxes shaped ``[1, 4]`` (any consistent unit)."""
    p = reshape(as_tensor(pred), (1, 4))
    g = reshape(as_tensor(gt, like=p), (1, 4))
    px1, py1, pw, ph = (_column(p, i) for i in range(4))
    gx1, gy1, gw, gh = (_column(g, i) for i in range(4))
    px2, py2 = add(px1, pw), add(py1, ph)
    gx2, gy2 = add(gx1, gw), add(gy1, gh)

    iw = clamp(sub(minimum(px2, gx2), maximum(px1, gx1)), lo=0.0)
    ih = clamp(sub(minimum(py2, gy2), maximum(py1, gy1)), lo=0.0)
    inter = mul(iw, ih)
    union = sub(add(mul(pw, ph), mul(gw, gh)), inter)
    iou = div(inter, union)
    enclose = mul(
        sub(maximum(px2, gx2), minimum(px1, gx1)),
        sub(maximum(py2, gy2), minimum(py1, gy1)),
    )
    giou = sub(iou, div(sub(enclose, union), enclose))
    return sum_(sub(1.0, giou))


def l1_loss(pred: BoxLike, gt: BoxLike) -> Tensor:
    p = reshape(as_tensor(pred), (1, 4))
    g = reshape(as_tensor(gt, like=p), (1, 4))
    return mean(abs_(sub(p, g)))


def predicted_box(out: TrackOutput, stride: int, search_size: int) -> Tensor:
    """Differentiable ``[1, 4]`` xywh box at the score argmax, in units of the search extent.

    Mirrors ``head.decode`` including the clamp to the crop.
    """
    _, h, w = out.score.shape
    row, col = peak_cell(out.score_logits.data)
    flat = [row * w + col]
    offset = gather(reshape(out.offset, (2, h * w)), flat, axis=1)
    size = gather(reshape(out.size, (2, h * w)), flat, axis=1)
    cell = stride / float(search_size)
    center = scale(add(offset, np.array([[col], [row]], dtype=offset.dtype)), cell)
    lo = clamp(sub(center, scale(size, 0.5)), 0.0, 1.0)
    hi = clamp(add(center, scale(size, 0.5)), 0.0, 1.0)
    return reshape(concat([lo, sub(hi, lo)], axis=0), (1, 4))


def total_loss(
    score: Tensor,
    heatmap: np.ndarray,
    pred_box: BoxLike,
    gt_box: BoxLike,
    cfg: Optional[ObjectiveConfig] = None,
) -> Tuple[Tensor, Dict[str, float]]:
    """Focal + weighted GIoU + weighted L1; boxes in units of the search extent."""
    cfg = cfg or ObjectiveConfig()
    l_score = focal_loss(score, heatmap, cfg.alpha, cfg.beta, cfg.eps)
    l_giou = giou_loss(pred_box, gt_box)
    l_l1 = l1_loss(pred_box, gt_box)
    total = add(add(l_score, scale(l_giou, cfg.lambda_giou)), scale(l_l1, cfg.lambda_l1))
    parts = {
        "focal": l_score.item(),
        "giou": l_giou.item(),
        "l1": l_l1.item(),
        "total": total.item(),
    }
    return total, parts
