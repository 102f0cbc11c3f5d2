from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from app.core.config import EncoderConfig, PruneConfig, Settings, make_settings
from app.core.encoder import Encoder, embed, forward, init_encoder
from app.core.errors import ConfigError, DimensionError
from app.core.head import TrackHead, TrackOutput, decode, head_forward, init_head
from app.core.pruning import PruneDecision, scatter_to_grid
from app.core.storage import load_checkpoint, save_checkpoint
from app.core.tensor import Tensor

PIXEL_MEAN = 127.5
PIXEL_SCALE = 1.0 / 64.0

# Settings that change parameter shapes or their meaning; a checkpoint is only
# usable when these agree with the requested config.
ARCHITECTURE_KEYS = (
    "patch_size",
    "embed_dim",
    "num_heads",
    "num_blocks",
    "mlp_ratio",
    "template_resolution",
    "search_resolution",
    "scales",
    "dynamic",
)


@dataclass
class Model:
    settings: Settings
    encoder: Encoder
    head: TrackHead

    @property
    def encoder_config(self) -> EncoderConfig:
        return self.encoder.config

    @property
    def prune_config(self) -> PruneConfig:
        return self.settings.prune_config()

    @property
    def dtype(self) -> np.dtype:
        return self.encoder.patch_w.dtype

    def parameters(self) -> Dict[str, Tensor]:
        params = {f"encoder.{k}": v for k, v in self.encoder.parameters().items()}
        params.update({f"head.{k}": v for k, v in self.head.parameters().items()})
        return params

    def num_parameters(self) -> int:
        return sum(t.size for t in self.parameters().values())


def build_model(settings: Settings, seed: int = 0) -> Model:
    rng = np.random.default_rng(seed)
    dtype = np.dtype(settings.dtype)
    cfg = settings.encoder_config()
    return Model(
        settings=settings,
        encoder=init_encoder(cfg, rng, dtype),
        head=init_head(cfg.embed_dim, rng, dtype),
    )


def normalize_image(image: np.ndarray, dtype: np.dtype = np.float64) -> np.ndarray:
    return ((np.asarray(image, dtype=dtype) - PIXEL_MEAN) * PIXEL_SCALE).astype(dtype, copy=False)


def run_model(
    model: Model,
    static: Sequence[np.ndarray],
    dynamic: Optional[Sequence[np.ndarray]],
    search: np.ndarray,
    *,
    prune_cfg: Optional[PruneConfig] = None,
    trace: Optional[List[PruneDecision]] = None,
) -> TrackOutput:
    """uint8 crops in, decoded ``TrackOutput`` (box in search-crop pixels) out."""
    cfg = model.encoder_config
    prune_cfg = prune_cfg if prune_cfg is not None else model.prune_config
    dt = model.dtype
    seq = embed(
        model.encoder,
        [normalize_image(img, dt) for img in static],
        [normalize_image(img, dt) for img in dynamic] if cfg.use_dynamic and dynamic is not None else None,
        normalize_image(search, dt),
    )
    seq, _ = forward(model.encoder, seq, prune_cfg, trace)
    grid = scatter_to_grid(seq, cfg.search_grid, cfg.search_grid)
    return decode(head_forward(model.head, grid), cfg.patch_size, cfg.search_resolution)


def architecture(settings: Settings) -> Dict[str, object]:
    dumped = settings.model_dump(mode="json")
    return {k: dumped[k] for k in ARCHITECTURE_KEYS}


def save_model(model: Model, path: Path) -> Path:
    arrays = {name: t.data for name, t in model.parameters().items()}
    return save_checkpoint(path, model.settings.model_dump(mode="json"), arrays)


def load_model(path: Path, expected: Optional[Settings] = None) -> Model:
    """Rebuild a model from a checkpoint.

    With ``expected``, its architecture keys must match the stored ones; the
    returned model then carries ``expected`` so runtime knobs (keep ratio, tau)
    follow the caller.
    """
    stored_values, arrays = load_checkpoint(path)
    stored = make_settings(stored_values)
    if expected is not None:
        want, have = architecture(expected), architecture(stored)
        diff = sorted(k for k in ARCHITECTURE_KEYS if want[k] != have[k])
        if diff:
            raise ConfigError(f"Checkpoint {path} was trained with a different architecture: {', '.join(diff)}")
        settings = expected.with_overrides(dtype=stored.dtype)
    else:
        settings = stored
    model = build_model(settings)
    params = model.parameters()
    missing = sorted(set(params) - set(arrays))
    extra = sorted(set(arrays) - set(params))
    if missing or extra:
        raise ConfigError(f"Checkpoint tensors do not match the model (missing={missing[:3]}, unexpected={extra[:3]})")
    for name, t in params.items():
        arr = arrays[name]
        if arr.shape != t.shape:
            raise DimensionError(f"Checkpoint tensor {name} has shape {arr.shape}, model expects {t.shape}")
        t.data = arr.astype(t.dtype, copy=True)
    return model
