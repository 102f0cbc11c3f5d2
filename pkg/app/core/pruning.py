"""Template-guided search-token pruning and the analytic MAC model."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from app.core.config import EncoderConfig, PruneConfig
from app.core.errors import ContractError
from app.core.head import head_macs
from app.core.tensor import Tensor, gather, reshape, scatter, transpose
from app.core.tokens import TokenSequence


@dataclass(frozen=True)
class PruneDecision:
    omega: np.ndarray
    kept_indices: np.ndarray
    dropped_grid_coords: np.ndarray

    @property
    def kept_search(self) -> int:
        return len(self.omega) - len(self.dropped_grid_coords)


def keep_count(n: int, keep_ratio: float) -> int:
    """ceil(keep_ratio * n); the epsilon stops 0.7 * 10 rounding up to 8."""
    if n <= 0:
        return 0
    return max(1, min(n, math.ceil(keep_ratio * n - 1e-9)))


def score_tokens(weights: np.ndarray, seq: TokenSequence) -> np.ndarray:
    """Relevance of each current search token to the template centers.

    Sums the post-softmax rows of every center-flagged template token over
    the search columns, then averages over heads.
    """
    n = len(seq)
    if weights.ndim != 3 or weights.shape[1:] != (n, n):
        raise ContractError(f"Attention weights {weights.shape} do not match a {n}-token sequence")
    rows = np.flatnonzero(seq.center_flags & seq.template_mask())
    if rows.size == 0:
        raise ContractError("No template center tokens to score search tokens with")
    cols = np.flatnonzero(seq.search_mask())
    return weights[:, rows][:, :, cols].sum(axis=1).mean(axis=0)


def prune(seq: TokenSequence, omega: np.ndarray, keep_ratio: float) -> Tuple[TokenSequence, PruneDecision]:
    search_idx = np.flatnonzero(seq.search_mask())
    omega = np.asarray(omega)
    if omega.shape != (len(search_idx),):
        raise ContractError(f"omega has shape {omega.shape}, expected ({len(search_idx)},)")
    if not 0.0 < keep_ratio <= 1.0:
        raise ContractError(f"keep_ratio {keep_ratio} outside (0, 1]")
    if keep_ratio >= 1.0:
        return seq, PruneDecision(omega, np.arange(len(seq)), np.zeros((0, 2), dtype=np.int64))

    k = keep_count(len(search_idx), keep_ratio)
    # Highest omega first; equal scores fall back to ascending grid index.
    order = np.lexsort((seq.search_flat_index(), -omega))
    keep_local = np.sort(order[:k])
    drop_local = np.sort(order[k:])
    kept = np.concatenate([np.flatnonzero(seq.template_mask()), search_idx[keep_local]])
    kept.sort()
    decision = PruneDecision(
        omega=omega,
        kept_indices=kept,
        dropped_grid_coords=seq.grid_coords[search_idx[drop_local]],
    )
    return seq.subset(kept), decision


def scatter_to_grid(seq: TokenSequence, width: int, height: int) -> Tensor:
    """Put surviving search tokens back on their ``[D, H, W]`` grid; pruned cells are zero."""
    search_idx = np.flatnonzero(seq.search_mask())
    coords = seq.grid_coords[search_idx]
    if len(coords) and (coords.min() < 0 or coords[:, 0].max() >= height or coords[:, 1].max() >= width):
        raise ContractError("Search token grid coordinates fall outside the grid")
    flat = coords[:, 0] * width + coords[:, 1]
    if len(np.unique(flat)) != len(flat):
        raise ContractError("Duplicate grid coordinates among surviving search tokens")
    tokens = gather(seq.embeddings, search_idx, axis=0)
    full = scatter(tokens, flat, height * width, axis=0)
    return reshape(transpose(full), (seq.embed_dim, height, width))


# --- MAC model -------------------------------------------------------------

def block_macs(tokens: int, embed_dim: int, mlp_ratio: int) -> int:
    """QKV and output projections, QK^T and AV, then the two MLP layers."""
    n, d = tokens, embed_dim
    return 4 * n * d * d + 2 * n * n * d + 2 * n * d * (mlp_ratio * d)


def search_schedule(search_tokens: int, num_blocks: int, prune_cfg: Optional[PruneConfig]) -> List[int]:
    counts, n = [], search_tokens
    stages = set(prune_cfg.stages) if prune_cfg is not None else set()
    for b in range(num_blocks):
        if b in stages:
            n = keep_count(n, prune_cfg.keep_ratio)
        counts.append(n)
    return counts


@dataclass(frozen=True)
class FlopsReport:
    keep_ratio: float
    stages: Tuple[int, ...]
    tokens_per_block: List[int]
    block_macs: List[int]
    embed_macs: int
    head_macs: int

    @property
    def encoder_macs(self) -> int:
        return self.embed_macs + sum(self.block_macs)

    @property
    def total(self) -> int:
        return self.encoder_macs + self.head_macs

    def reduction_vs(self, baseline: "FlopsReport") -> float:
        """Percent fewer total MACs than ``baseline``."""
        return 100.0 * (1.0 - self.total / baseline.total) if baseline.total else 0.0

    def as_row(self, config_hash: str = "") -> Dict[str, object]:
        return {
            "config_hash": config_hash,
            "keep_ratio": self.keep_ratio,
            "stages": " ".join(str(s) for s in self.stages),
            "block_macs": " ".join(str(m) for m in self.block_macs),
            "embed_macs": self.embed_macs,
            "head_macs": self.head_macs,
            "total_macs": self.total,
            "gmacs": round(self.total / 1e9, 6),
        }


FLOPS_FIELDNAMES = ["config_hash", "keep_ratio", "stages", "block_macs", "embed_macs", "head_macs", "total_macs", "gmacs"]


def flops(config: EncoderConfig, prune_cfg: Optional[PruneConfig] = None, include_head: bool = True) -> FlopsReport:
    templates = config.template_token_count
    searches = search_schedule(config.search_tokens, config.num_blocks, prune_cfg)
    tokens = [templates + s for s in searches]
    per_block = [block_macs(n, config.embed_dim, config.mlp_ratio) for n in tokens]
    patch_dim = config.patch_size * config.patch_size * 3
    embed = config.num_tokens * patch_dim * config.embed_dim
    head = head_macs(config.embed_dim, config.search_grid, config.search_grid) if include_head else 0
    return FlopsReport(
        keep_ratio=prune_cfg.keep_ratio if prune_cfg is not None else 1.0,
        stages=tuple(prune_cfg.stages) if prune_cfg is not None else (),
        tokens_per_block=tokens,
        block_macs=per_block,
        embed_macs=embed,
        head_macs=head,
    )
