from __future__ import annotations

from dataclasses import dataclass, replace
from enum import IntEnum
from typing import Sequence

import numpy as np

from app.core.tensor import Tensor, gather


class SegmentKind(IntEnum):
    STATIC = 0
    DYNAMIC = 1
    SEARCH = 2


@dataclass(frozen=True)
class TokenSequence:
    """Concatenated [static; dynamic; search] tokens plus per-token bookkeeping.

    ``segments`` holds a ``SegmentKind`` per token, ``scales`` the template
    scale index (-1 for search tokens), ``grid_coords`` the (row, col) of the
    token in its source patch grid. The bookkeeping arrays travel with the
    embeddings through pruning.
    """

    embeddings: Tensor
    segments: np.ndarray
    scales: np.ndarray
    grid_coords: np.ndarray
    center_flags: np.ndarray
    search_grid: int

    def __post_init__(self) -> None:
        n = self.embeddings.shape[0]
        for name in ("segments", "scales", "grid_coords", "center_flags"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"TokenSequence.{name} has {len(getattr(self, name))} rows, expected {n}")

    def __len__(self) -> int:
        return self.embeddings.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.embeddings.shape[1]

    def search_mask(self) -> np.ndarray:
        return self.segments == SegmentKind.SEARCH

    def template_mask(self) -> np.ndarray:
        return self.segments != SegmentKind.SEARCH

    @property
    def search_count(self) -> int:
        return int(self.search_mask().sum())

    @property
    def template_count(self) -> int:
        return int(self.template_mask().sum())

    def search_flat_index(self) -> np.ndarray:
        coords = self.grid_coords[self.search_mask()]
        return coords[:, 0] * self.search_grid + coords[:, 1]

    def with_embeddings(self, embeddings: Tensor) -> "TokenSequence":
        return replace(self, embeddings=embeddings)

    def subset(self, indices: Sequence[int]) -> "TokenSequence":
        idx = np.asarray(indices, dtype=np.int64)
        return TokenSequence(
            embeddings=gather(self.embeddings, idx, axis=0),
            segments=self.segments[idx],
            scales=self.scales[idx],
            grid_coords=self.grid_coords[idx],
            center_flags=self.center_flags[idx],
            search_grid=self.search_grid,
        )


def center_cells(grid: int) -> np.ndarray:
    """(row, col) of the center cell for odd ``grid``; the four central cells for even."""
    if grid % 2:
        c = grid // 2
        return np.array([[c, c]])
    c = grid // 2
    return np.array([[c - 1, c - 1], [c - 1, c], [c, c - 1], [c, c]])


def grid_coords(grid: int) -> np.ndarray:
    rows, cols = np.divmod(np.arange(grid * grid), grid)
    return np.stack([rows, cols], axis=1)
