from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Annotated, Any, Dict, Optional, Tuple

from dotenv import dotenv_values
from pydantic import BaseModel, BeforeValidator, ConfigDict, ValidationError, field_validator, model_validator

from app.core.errors import ConfigError

# Desk-scale defaults. The full-size setting is patch 16, 12 blocks, 768 wide,
# 192px templates and a 384px search area.
PATCH_SIZE = 16
EMBED_DIM = 64
NUM_HEADS = 4
NUM_BLOCKS = 6
MLP_RATIO = 4
TEMPLATE_RESOLUTION = 32
SEARCH_RESOLUTION = 64

SCALES = (2.0, 4.0)
SEARCH_SCALE = 4.0
KEEP_RATIO = 0.7
# Full-size schedule is (4, 7, 10) on 12 blocks.
PRUNE_STAGES = (2, 4)
TAU = 0.7

FOCAL_ALPHA = 2.0
FOCAL_BETA = 4.0
LAMBDA_GIOU = 2.0
LAMBDA_L1 = 5.0

# Full-size training runs lr 1e-4 at batch 128 for 300 epochs. Desk runs take
# about a thousand steps, so the step size is larger.
LR = 5e-4
WEIGHT_DECAY = 1e-4
BATCH_SIZE = 8
EPOCHS = 30
SAMPLES_PER_EPOCH = 256
# Search-crop center offset, in units of the target size.
SEARCH_CENTER_JITTER = 1.0
MAX_GAP = 10

FORMAT_VERSION = 1


class _Frozen(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


def _split_floats(value: Any) -> Any:
    if isinstance(value, str):
        parts = [p.strip() for p in value.replace(";", ",").split(",")]
        return tuple(float(p) for p in parts if p)
    return value


def _split_ints(value: Any) -> Any:
    if isinstance(value, str):
        parts = [p.strip() for p in value.replace(";", ",").split(",")]
        return tuple(int(p) for p in parts if p)
    return value


FloatTuple = Annotated[Tuple[float, ...], BeforeValidator(_split_floats)]
IntTuple = Annotated[Tuple[int, ...], BeforeValidator(_split_ints)]


class EncoderConfig(_Frozen):
    patch_size: int = PATCH_SIZE
    embed_dim: int = EMBED_DIM
    num_heads: int = NUM_HEADS
    num_blocks: int = NUM_BLOCKS
    mlp_ratio: int = MLP_RATIO
    template_resolution: int = TEMPLATE_RESOLUTION
    search_resolution: int = SEARCH_RESOLUTION
    num_scales: int = len(SCALES)
    use_dynamic: bool = True

    @model_validator(mode="after")
    def _check(self) -> "EncoderConfig":
        if self.patch_size <= 0 or self.num_blocks <= 0 or self.num_scales <= 0:
            raise ValueError("patch_size, num_blocks and num_scales must be positive")
        if self.template_resolution % self.patch_size or self.search_resolution % self.patch_size:
            raise ValueError("template/search resolution must be multiples of patch_size")
        if self.embed_dim % self.num_heads:
            raise ValueError("embed_dim must be divisible by num_heads")
        return self

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def template_grid(self) -> int:
        return self.template_resolution // self.patch_size

    @property
    def search_grid(self) -> int:
        return self.search_resolution // self.patch_size

    @property
    def tokens_per_template(self) -> int:
        return self.template_grid**2

    @property
    def search_tokens(self) -> int:
        return self.search_grid**2

    @property
    def template_token_count(self) -> int:
        copies = 2 if self.use_dynamic else 1
        return copies * self.num_scales * self.tokens_per_template

    @property
    def num_tokens(self) -> int:
        return self.template_token_count + self.search_tokens


class PruneConfig(_Frozen):
    keep_ratio: float = KEEP_RATIO
    stages: IntTuple = PRUNE_STAGES

    @model_validator(mode="after")
    def _check(self) -> "PruneConfig":
        if not 0.0 < self.keep_ratio <= 1.0:
            raise ValueError("keep_ratio must lie in (0, 1]")
        for a, b in zip(self.stages, self.stages[1:]):
            if b <= a:
                raise ValueError("prune stages must be strictly increasing")
        if self.stages and self.stages[0] < 1:
            raise ValueError("prune stages must be >= 1")
        return self


class ObjectiveConfig(_Frozen):
    alpha: float = FOCAL_ALPHA
    beta: float = FOCAL_BETA
    lambda_giou: float = LAMBDA_GIOU
    lambda_l1: float = LAMBDA_L1
    min_overlap: float = 0.7
    eps: float = 1e-6


class TrackerConfig(_Frozen):
    scales: FloatTuple = SCALES
    tau: float = TAU
    search_scale: float = SEARCH_SCALE
    template_resolution: int = TEMPLATE_RESOLUTION
    search_resolution: int = SEARCH_RESOLUTION
    patch_size: int = PATCH_SIZE
    dynamic: bool = True

    @model_validator(mode="after")
    def _check(self) -> "TrackerConfig":
        if not 0.0 < self.tau < 1.0:
            raise ValueError("tau must lie in (0, 1)")
        if not self.scales or any(k < 1.0 for k in self.scales):
            raise ValueError("scales must be non-empty and >= 1")
        if self.search_scale < 1.0:
            raise ValueError("search_scale must be >= 1")
        return self


class TrainConfig(_Frozen):
    lr: float = LR
    weight_decay: float = WEIGHT_DECAY
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = BATCH_SIZE
    epochs: int = EPOCHS
    samples_per_epoch: int = SAMPLES_PER_EPOCH
    max_gap: int = MAX_GAP
    flip_prob: float = 0.5
    scale_jitter: float = 0.1
    center_jitter: float = 0.05
    search_center_jitter: float = SEARCH_CENTER_JITTER
    dtype: str = "float64"

    @field_validator("dtype")
    @classmethod
    def _dtype(cls, v: str) -> str:
        if v not in ("float64", "float32"):
            raise ValueError("dtype must be float64 or float32")
        return v


class BenchConfig(_Frozen):
    train_sequences: int = 50
    test_sequences: int = 20
    num_frames: int = 40
    frame_size: int = 256
    object_size: int = 64
    distractors: int = 3
    hue_drift: float = 1.5
    scale_drift: float = 0.01
    speed: float = 4.0


class Settings(_Frozen):
    """Every knob of the system as one flat record (one config-file key per field)."""

    patch_size: int = PATCH_SIZE
    embed_dim: int = EMBED_DIM
    num_heads: int = NUM_HEADS
    num_blocks: int = NUM_BLOCKS
    mlp_ratio: int = MLP_RATIO
    template_resolution: int = TEMPLATE_RESOLUTION
    search_resolution: int = SEARCH_RESOLUTION

    scales: FloatTuple = SCALES
    dynamic: bool = True
    search_scale: float = SEARCH_SCALE
    keep_ratio: float = KEEP_RATIO
    prune_stages: IntTuple = PRUNE_STAGES
    tau: float = TAU

    focal_alpha: float = FOCAL_ALPHA
    focal_beta: float = FOCAL_BETA
    lambda_giou: float = LAMBDA_GIOU
    lambda_l1: float = LAMBDA_L1
    sigma_min_overlap: float = 0.7

    lr: float = LR
    weight_decay: float = WEIGHT_DECAY
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = BATCH_SIZE
    epochs: int = EPOCHS
    samples_per_epoch: int = SAMPLES_PER_EPOCH
    max_gap: int = MAX_GAP
    flip_prob: float = 0.5
    scale_jitter: float = 0.1
    center_jitter: float = 0.05
    search_center_jitter: float = SEARCH_CENTER_JITTER
    dtype: str = "float64"

    bench_train_sequences: int = 50
    bench_test_sequences: int = 20
    bench_frames: int = 40
    bench_frame_size: int = 256
    bench_object_size: int = 64
    bench_distractors: int = 3
    bench_hue_drift: float = 1.5
    bench_scale_drift: float = 0.01
    bench_speed: float = 4.0

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            patch_size=self.patch_size,
            embed_dim=self.embed_dim,
            num_heads=self.num_heads,
            num_blocks=self.num_blocks,
            mlp_ratio=self.mlp_ratio,
            template_resolution=self.template_resolution,
            search_resolution=self.search_resolution,
            num_scales=len(self.scales),
            use_dynamic=self.dynamic,
        )

    def prune_config(self) -> PruneConfig:
        return PruneConfig(keep_ratio=self.keep_ratio, stages=self.prune_stages)

    def objective_config(self) -> ObjectiveConfig:
        return ObjectiveConfig(
            alpha=self.focal_alpha,
            beta=self.focal_beta,
            lambda_giou=self.lambda_giou,
            lambda_l1=self.lambda_l1,
            min_overlap=self.sigma_min_overlap,
        )

    def tracker_config(self) -> TrackerConfig:
        return TrackerConfig(
            scales=self.scales,
            tau=self.tau,
            search_scale=self.search_scale,
            template_resolution=self.template_resolution,
            search_resolution=self.search_resolution,
            patch_size=self.patch_size,
            dynamic=self.dynamic,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            lr=self.lr,
            weight_decay=self.weight_decay,
            beta1=self.adam_beta1,
            beta2=self.adam_beta2,
            eps=self.adam_eps,
            batch_size=self.batch_size,
            epochs=self.epochs,
            samples_per_epoch=self.samples_per_epoch,
            max_gap=self.max_gap,
            flip_prob=self.flip_prob,
            scale_jitter=self.scale_jitter,
            center_jitter=self.center_jitter,
            search_center_jitter=self.search_center_jitter,
            dtype=self.dtype,
        )

    def bench_config(self) -> BenchConfig:
        return BenchConfig(
            train_sequences=self.bench_train_sequences,
            test_sequences=self.bench_test_sequences,
            num_frames=self.bench_frames,
            frame_size=self.bench_frame_size,
            object_size=self.bench_object_size,
            distractors=self.bench_distractors,
            hue_drift=self.bench_hue_drift,
            scale_drift=self.bench_scale_drift,
            speed=self.bench_speed,
        )

    def validate_all(self) -> "Settings":
        # Sub-config validators carry the cross-field invariants.
        for build in (self.encoder_config, self.prune_config, self.tracker_config, self.train_config):
            try:
                build()
            except ValidationError as e:
                raise ConfigError(_format_validation(e)) from e
        if any(stage >= self.num_blocks for stage in self.prune_stages):
            raise ConfigError(f"prune_stages {self.prune_stages} must be < num_blocks={self.num_blocks}")
        return self

    def config_hash(self) -> str:
        payload = json.dumps(self.model_dump(mode="json"), sort_keys=True)
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:12]

    def with_overrides(self, **overrides: Any) -> "Settings":
        overrides = {k: v for k, v in overrides.items() if v is not None}
        if not overrides:
            return self
        return make_settings({**self.model_dump(), **overrides})


def _format_validation(e: ValidationError) -> str:
    parts = []
    for err in e.errors():
        loc = ".".join(str(x) for x in err.get("loc", ())) or "config"
        parts.append(f"{loc}: {err.get('msg')}")
    return "; ".join(parts)


def make_settings(values: Dict[str, Any]) -> Settings:
    unknown = sorted(set(values) - set(Settings.model_fields))
    if unknown:
        raise ConfigError(f"Unknown config key(s): {', '.join(unknown)}")
    try:
        settings = Settings(**values)
    except ValidationError as e:
        raise ConfigError(_format_validation(e)) from e
    return settings.validate_all()


def parse_config_text(path: Path) -> Dict[str, Optional[str]]:
    if not path.exists():
        raise ConfigError(f"Config file not found: {path}")
    # dotenv_values never writes to os.environ.
    values = dotenv_values(path, interpolate=False)
    missing = [k for k, v in values.items() if v is None]
    if missing:
        raise ConfigError(f"Config line(s) without a value: {', '.join(missing)}")
    return dict(values)


def load_settings(path: Optional[Path] = None, **overrides: Any) -> Settings:
    values: Dict[str, Any] = {}
    if path is not None:
        values.update(parse_config_text(Path(path)))
    values.update({k: v for k, v in overrides.items() if v is not None})
    return make_settings(values)


def write_settings(settings: Settings, path: Path) -> Path:
    lines = []
    for key, value in settings.model_dump(mode="json").items():
        if isinstance(value, list):
            value = ",".join(str(v) for v in value)
        elif isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{key} = {value}")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path
