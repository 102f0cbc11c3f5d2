from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from app.core.tensor import Tensor, conv2d, gelu, sigmoid

BRANCH_OUTPUTS: Dict[str, int] = {"score": 1, "offset": 2, "size": 2}


@dataclass
class ConvLayer:
    weight: Tensor
    bias: Tensor


@dataclass
class TrackHead:
    branches: Dict[str, List[ConvLayer]]

    def parameters(self) -> Dict[str, Tensor]:
        params: Dict[str, Tensor] = {}
        for name, layers in self.branches.items():
            for i, layer in enumerate(layers):
                params[f"{name}.{i}.weight"] = layer.weight
                params[f"{name}.{i}.bias"] = layer.bias
        return params


@dataclass
class TrackOutput:
    """Raw branch maps plus, once decoded, the crop-space box and confidence."""

    score_logits: Tensor
    score: Tensor
    offset: Tensor
    size: Tensor
    box: Optional[np.ndarray] = None
    confidence: Optional[float] = None
    peak: Optional[Tuple[int, int]] = None


def layer_shapes(embed_dim: int, out_channels: int) -> List[Tuple[int, int, int]]:
    """(out, in, kernel) per layer: three 3x3 layers halving channels, then a 1x1 projection."""
    chans = [embed_dim, max(1, embed_dim // 2), max(1, embed_dim // 4), max(1, embed_dim // 8)]
    shapes = [(chans[i + 1], chans[i], 3) for i in range(3)]
    shapes.append((out_channels, chans[-1], 1))
    return shapes


def head_macs(embed_dim: int, height: int, width: int) -> int:
    return sum(
        o * c * k * k * height * width
        for out in BRANCH_OUTPUTS.values()
        for o, c, k in layer_shapes(embed_dim, out)
    )


def init_head(
    embed_dim: int,
    rng: np.random.Generator,
    dtype: np.dtype = np.float64,
    *,
    zero_final: bool = False,
) -> TrackHead:
    branches: Dict[str, List[ConvLayer]] = {}
    for name, out in BRANCH_OUTPUTS.items():
        layers = []
        shapes = layer_shapes(embed_dim, out)
        for i, (o, c, k) in enumerate(shapes):
            last = i == len(shapes) - 1
            if last and zero_final:
                w = np.zeros((o, c, k, k), dtype=dtype)
            else:
                std = 0.01 if last else np.sqrt(2.0 / (c * k * k))
                w = rng.normal(0.0, std, size=(o, c, k, k)).astype(dtype)
            layers.append(
                ConvLayer(
                    weight=Tensor(w, requires_grad=True),
                    bias=Tensor(np.zeros(o, dtype=dtype), requires_grad=True),
                )
            )
        branches[name] = layers
    return TrackHead(branches)


def _branch(layers: List[ConvLayer], x: Tensor) -> Tensor:
    for i, layer in enumerate(layers):
        x = conv2d(x, layer.weight, layer.bias)
        if i < len(layers) - 1:
            x = gelu(x)
    return x


def head_forward(head: TrackHead, grid: Tensor) -> TrackOutput:
    logits = _branch(head.branches["score"], grid)
    return TrackOutput(
        score_logits=logits,
        score=sigmoid(logits),
        offset=sigmoid(_branch(head.branches["offset"], grid)),
        size=sigmoid(_branch(head.branches["size"], grid)),
    )


def peak_cell(score: np.ndarray) -> Tuple[int, int]:
    """(row, col) of the maximum; ties go to the lowest row-major index."""
    score = np.asarray(score)
    if score.ndim == 3:
        score = score[0]
    row, col = np.unravel_index(int(np.argmax(score)), score.shape)
    return int(row), int(col)


def clamp_box(box: np.ndarray, width: float, height: float) -> np.ndarray:
    """Intersect an xywh box with ``[0, width] x [0, height]``."""
    x, y, w, h = (float(v) for v in box)
    x1, y1 = min(max(x, 0.0), width), min(max(y, 0.0), height)
    x2, y2 = min(max(x + w, 0.0), width), min(max(y + h, 0.0), height)
    return np.array([x1, y1, x2 - x1, y2 - y1], dtype=np.float64)


def decode(out: TrackOutput, stride: int, search_size: int) -> TrackOutput:
    """Fill in ``box`` (search-crop pixels), ``confidence`` and ``peak`` at the score argmax."""
    row, col = peak_cell(out.score_logits.data)
    dx, dy = (float(v) for v in out.offset.data[:, row, col])
    w_n, h_n = (float(v) for v in out.size.data[:, row, col])
    cx, cy = (col + dx) * stride, (row + dy) * stride
    w, h = w_n * search_size, h_n * search_size
    box = clamp_box(np.array([cx - w / 2, cy - h / 2, w, h]), search_size, search_size)
    return TrackOutput(
        score_logits=out.score_logits,
        score=out.score,
        offset=out.offset,
        size=out.size,
        box=box,
        confidence=float(out.score.data.max()),
        peak=(row, col),
    )
