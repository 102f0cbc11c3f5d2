"""One-stream encoder over [static templates; dynamic templates; search] tokens.

All template crops and the search crop are patchified, embedded, tagged with a
learned segment embedding and concatenated; every block then runs plain
multi-head self-attention over the whole sequence, so template-template,
template-search and search-search interactions all happen in one softmax.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from app.core.config import EncoderConfig, PruneConfig
from app.core.errors import ConfigError, DimensionError
from app.core.pruning import PruneDecision, prune, score_tokens
from app.core.tensor import (
    Tensor,
    add,
    concat,
    gather,
    gelu,
    layer_norm,
    linear,
    matmul,
    scale,
    softmax_rows,
    transpose,
)
from app.core.tokens import SegmentKind, TokenSequence, center_cells, grid_coords

INIT_STD = 0.02


@dataclass
class AttentionBlock:
    num_heads: int
    w_q: Tensor
    b_q: Tensor
    w_k: Tensor
    b_k: Tensor
    w_v: Tensor
    b_v: Tensor
    w_o: Tensor
    b_o: Tensor
    ln1_g: Tensor
    ln1_b: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    w_fc1: Tensor
    b_fc1: Tensor
    w_fc2: Tensor
    b_fc2: Tensor

    @property
    def embed_dim(self) -> int:
        return self.w_q.shape[0]

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    def parameters(self) -> Dict[str, Tensor]:
        return {k: v for k, v in vars(self).items() if isinstance(v, Tensor)}


@dataclass
class Encoder:
    config: EncoderConfig
    patch_w: Tensor
    patch_b: Tensor
    pos_template: Tensor
    pos_search: Tensor
    segment_embed: Tensor
    norm_g: Tensor
    norm_b: Tensor
    blocks: List[AttentionBlock] = field(default_factory=list)

    def parameters(self) -> Dict[str, Tensor]:
        params = {
            "patch_w": self.patch_w,
            "patch_b": self.patch_b,
            "pos_template": self.pos_template,
            "pos_search": self.pos_search,
            "segment_embed": self.segment_embed,
            "norm_g": self.norm_g,
            "norm_b": self.norm_b,
        }
        for i, block in enumerate(self.blocks):
            for name, t in block.parameters().items():
                params[f"blocks.{i}.{name}"] = t
        return params


def _normal(rng: np.random.Generator, shape: Tuple[int, ...], dtype: np.dtype, std: float = INIT_STD) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape).astype(dtype), requires_grad=True)


def _zeros(shape: Tuple[int, ...], dtype: np.dtype) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def _ones(shape: Tuple[int, ...], dtype: np.dtype) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)


def init_block(embed_dim: int, num_heads: int, mlp_ratio: int, rng: np.random.Generator, dtype: np.dtype) -> AttentionBlock:
    d, hidden = embed_dim, embed_dim * mlp_ratio
    return AttentionBlock(
        num_heads=num_heads,
        w_q=_normal(rng, (d, d), dtype),
        b_q=_zeros((d,), dtype),
        w_k=_normal(rng, (d, d), dtype),
        b_k=_zeros((d,), dtype),
        w_v=_normal(rng, (d, d), dtype),
        b_v=_zeros((d,), dtype),
        w_o=_normal(rng, (d, d), dtype),
        b_o=_zeros((d,), dtype),
        ln1_g=_ones((d,), dtype),
        ln1_b=_zeros((d,), dtype),
        ln2_g=_ones((d,), dtype),
        ln2_b=_zeros((d,), dtype),
        w_fc1=_normal(rng, (d, hidden), dtype),
        b_fc1=_zeros((hidden,), dtype),
        w_fc2=_normal(rng, (hidden, d), dtype),
        b_fc2=_zeros((d,), dtype),
    )


def init_encoder(config: EncoderConfig, rng: np.random.Generator, dtype: np.dtype = np.float64) -> Encoder:
    d = config.embed_dim
    patch_dim = config.patch_size * config.patch_size * 3
    return Encoder(
        config=config,
        patch_w=_normal(rng, (patch_dim, d), dtype),
        patch_b=_zeros((d,), dtype),
        pos_template=_normal(rng, (config.tokens_per_template, d), dtype),
        pos_search=_normal(rng, (config.search_tokens, d), dtype),
        segment_embed=_normal(rng, (len(SegmentKind), d), dtype),
        norm_g=_ones((d,), dtype),
        norm_b=_zeros((d,), dtype),
        blocks=[init_block(d, config.num_heads, config.mlp_ratio, rng, dtype) for _ in range(config.num_blocks)],
    )


def patchify(image: np.ndarray, patch_size: int, resolution: int) -> np.ndarray:
    """``[res, res, 3]`` image to ``[(res/p)^2, p*p*3]`` row-major patch rows."""
    if image.ndim != 3 or image.shape != (resolution, resolution, 3):
        raise DimensionError(f"Expected a {resolution}x{resolution}x3 crop, got {image.shape}")
    g = resolution // patch_size
    return (
        image.reshape(g, patch_size, g, patch_size, 3)
        .transpose(0, 2, 1, 3, 4)
        .reshape(g * g, patch_size * patch_size * 3)
    )


def embed(
    encoder: Encoder,
    static: Sequence[np.ndarray],
    dynamic: Optional[Sequence[np.ndarray]],
    search: np.ndarray,
) -> TokenSequence:
    """Embed float template and search crops into one token sequence.

    ``dynamic`` is ignored (and may be None) when the encoder was built
    without dynamic templates.
    """
    cfg = encoder.config
    if len(static) != cfg.num_scales:
        raise DimensionError(f"Expected {cfg.num_scales} static templates, got {len(static)}")
    groups: List[Tuple[SegmentKind, int, np.ndarray]] = [(SegmentKind.STATIC, i, img) for i, img in enumerate(static)]
    if cfg.use_dynamic:
        if dynamic is None or len(dynamic) != cfg.num_scales:
            raise DimensionError(f"Expected {cfg.num_scales} dynamic templates")
        groups += [(SegmentKind.DYNAMIC, i, img) for i, img in enumerate(dynamic)]

    dtype = encoder.patch_w.dtype
    t_grid, s_grid = cfg.template_grid, cfg.search_grid
    t_coords, s_coords = grid_coords(t_grid), grid_coords(s_grid)
    t_center = np.zeros(len(t_coords), dtype=bool)
    for r, c in center_cells(t_grid):
        t_center[r * t_grid + c] = True

    patches, pos, kinds, scales, coords, centers = [], [], [], [], [], []
    for kind, scale_index, img in groups:
        patches.append(patchify(np.asarray(img, dtype=dtype), cfg.patch_size, cfg.template_resolution))
        pos.append(encoder.pos_template)
        kinds.append(np.full(len(t_coords), kind, dtype=np.int64))
        scales.append(np.full(len(t_coords), scale_index, dtype=np.int64))
        coords.append(t_coords)
        centers.append(t_center)
    patches.append(patchify(np.asarray(search, dtype=dtype), cfg.patch_size, cfg.search_resolution))
    pos.append(encoder.pos_search)
    kinds.append(np.full(len(s_coords), SegmentKind.SEARCH, dtype=np.int64))
    scales.append(np.full(len(s_coords), -1, dtype=np.int64))
    coords.append(s_coords)
    centers.append(np.zeros(len(s_coords), dtype=bool))

    segments = np.concatenate(kinds)
    x = linear(Tensor(np.concatenate(patches, axis=0)), encoder.patch_w, encoder.patch_b)
    x = add(x, concat(pos, axis=0))
    x = add(x, gather(encoder.segment_embed, segments, axis=0))
    return TokenSequence(
        embeddings=x,
        segments=segments,
        scales=np.concatenate(scales),
        grid_coords=np.concatenate(coords, axis=0),
        center_flags=np.concatenate(centers),
        search_grid=s_grid,
    )


def multi_head_attention(block: AttentionBlock, x: Tensor) -> Tuple[Tensor, np.ndarray]:
    """Scaled dot-product attention over all rows of ``x``; returns output and ``[H, N, N]`` weights."""
    n = x.shape[0]
    dk = block.head_dim
    q = linear(x, block.w_q, block.b_q)
    k = linear(x, block.w_k, block.b_k)
    v = linear(x, block.w_v, block.b_v)
    weights = np.empty((block.num_heads, n, n), dtype=x.dtype)
    heads = []
    for h in range(block.num_heads):
        cols = np.arange(h * dk, (h + 1) * dk)
        qh, kh, vh = gather(q, cols, axis=1), gather(k, cols, axis=1), gather(v, cols, axis=1)
        a = softmax_rows(scale(matmul(qh, transpose(kh)), 1.0 / math.sqrt(dk)))
        weights[h] = a.data
        heads.append(matmul(a, vh))
    out = heads[0] if len(heads) == 1 else concat(heads, axis=1)
    return linear(out, block.w_o, block.b_o), weights


def attention(block: AttentionBlock, seq: TokenSequence) -> Tuple[TokenSequence, np.ndarray]:
    if len(seq) == 0:
        raise DimensionError("attention over an empty sequence")
    out, weights = multi_head_attention(block, seq.embeddings)
    return seq.with_embeddings(out), weights


def block_forward(block: AttentionBlock, seq: TokenSequence) -> Tuple[TokenSequence, np.ndarray]:
    x = seq.embeddings
    attn, weights = multi_head_attention(block, layer_norm(x, block.ln1_g, block.ln1_b))
    x = add(x, attn)
    hidden = gelu(linear(layer_norm(x, block.ln2_g, block.ln2_b), block.w_fc1, block.b_fc1))
    x = add(x, linear(hidden, block.w_fc2, block.b_fc2))
    return seq.with_embeddings(x), weights


def check_schedule(config: EncoderConfig, prune_cfg: Optional[PruneConfig]) -> None:
    if prune_cfg is None:
        return
    for stage in prune_cfg.stages:
        if stage < 1:
            raise ConfigError("Pruning before block 0 has no attention weights to score with")
        if stage >= config.num_blocks:
            raise ConfigError(f"Prune stage {stage} is out of range for {config.num_blocks} blocks")


def forward(
    encoder: Encoder,
    seq: TokenSequence,
    prune_cfg: Optional[PruneConfig] = None,
    trace: Optional[List[PruneDecision]] = None,
) -> Tuple[TokenSequence, np.ndarray]:
    """Run every block, pruning search tokens before each scheduled block.

    Returns the normalized final sequence and the (row, col) grid coordinates
    of the search tokens that survived.
    """
    check_schedule(encoder.config, prune_cfg)
    stages = set(prune_cfg.stages) if prune_cfg is not None else set()
    weights: Optional[np.ndarray] = None
    for b, block in enumerate(encoder.blocks):
        if b in stages and weights is not None:
            omega = score_tokens(weights, seq)
            seq, decision = prune(seq, omega, prune_cfg.keep_ratio)
            if trace is not None:
                trace.append(decision)
        seq, weights = block_forward(block, seq)
    seq = seq.with_embeddings(layer_norm(seq.embeddings, encoder.norm_g, encoder.norm_b))
    return seq, seq.grid_coords[seq.search_mask()]
