from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from app.core.config import Settings
from app.core.errors import DataError, DivergenceError, NonFiniteError
from app.core.model import Model, build_model, run_model
from app.core.objectives import predicted_box, total_loss
from app.core.optim import AdamW
from app.core.sampler import TrainSample, augment, sample
from app.core.storage import SequenceRecord, fmt
from app.core.tensor import GradTape, Tensor

Gradients = List[Optional[np.ndarray]]


@dataclass
class TrainResult:
    model: Model
    epoch_losses: List[float] = field(default_factory=list)
    step_losses: List[float] = field(default_factory=list)
    seconds: float = 0.0


def sample_loss(model: Model, s: TrainSample) -> Tuple[Tensor, Dict[str, float]]:
    cfg = model.encoder_config
    out = run_model(model, s.static, s.dynamic if cfg.use_dynamic else None, s.search)
    box = predicted_box(out, cfg.patch_size, cfg.search_resolution)
    return total_loss(
        out.score,
        s.target.heatmap,
        box,
        s.target.box_normalized.reshape(1, 4),
        model.settings.objective_config(),
    )


def sample_gradients(model: Model, params: Sequence[Tensor], s: TrainSample) -> Tuple[float, Gradients]:
    """Loss and per-parameter gradients for one sample on a private tape."""
    with GradTape() as tape:
        loss, _ = sample_loss(model, s)
    grads = tape.backward(loss, populate=False)
    return loss.item(), [grads.get(id(p)) for p in params]


def batch_gradients(
    model: Model,
    params: Sequence[Tensor],
    batch: Sequence[TrainSample],
    workers: int = 1,
) -> Tuple[float, Gradients]:
    """Mean loss and mean gradients; per-sample results are summed in batch order."""
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda s: sample_gradients(model, params, s), batch))
    else:
        results = [sample_gradients(model, params, s) for s in batch]

    total: Gradients = [None] * len(params)
    for _, grads in results:
        for i, g in enumerate(grads):
            if g is None:
                continue
            total[i] = g.copy() if total[i] is None else total[i] + g
    n = float(len(batch))
    mean_grads = [None if g is None else g / n for g in total]
    return sum(loss for loss, _ in results) / n, mean_grads


def draw_batch(
    dataset: Sequence[SequenceRecord],
    rng: np.random.Generator,
    settings: Settings,
    size: int,
) -> List[TrainSample]:
    tcfg, trcfg, ocfg = settings.tracker_config(), settings.train_config(), settings.objective_config()
    batch = []
    for _ in range(size):
        record = dataset[int(rng.integers(len(dataset)))]
        batch.append(augment(sample(record, rng, trcfg, tcfg, ocfg), rng, trcfg, tcfg, ocfg))
    return batch


def train(
    dataset: Sequence[SequenceRecord],
    settings: Settings,
    *,
    seed: int = 0,
    workers: int = 1,
    verbose: bool = True,
    on_epoch: Optional[Callable[[int, float], None]] = None,
) -> TrainResult:
    """AdamW on sampled (static, dynamic, search) tuples; one mean-loss entry per epoch."""
    if not dataset:
        raise DataError("Training needs at least one sequence")
    trcfg = settings.train_config()
    model = build_model(settings, seed)
    named = model.parameters()
    params = list(named.values())
    opt = AdamW(
        params,
        lr=trcfg.lr,
        betas=(trcfg.beta1, trcfg.beta2),
        eps=trcfg.eps,
        weight_decay=trcfg.weight_decay,
    )
    rng = np.random.default_rng(seed)
    steps = max(1, math.ceil(trcfg.samples_per_epoch / trcfg.batch_size))
    result = TrainResult(model=model)
    if verbose:
        print(
            f"[train] params={model.num_parameters()} sequences={len(dataset)} "
            f"epochs={trcfg.epochs} steps/epoch={steps} batch={trcfg.batch_size} workers={workers}"
        )
    t0 = time.perf_counter()
    for epoch in range(1, trcfg.epochs + 1):
        losses = []
        for step in range(1, steps + 1):
            batch = draw_batch(dataset, rng, settings, trcfg.batch_size)
            try:
                loss, grads = batch_gradients(model, params, batch, workers)
            except NonFiniteError as e:
                raise DivergenceError(f"Non-finite value during forward/backward: {e}", epoch=epoch, step=step) from e
            if not math.isfinite(loss) or any(g is not None and not np.all(np.isfinite(g)) for g in grads):
                raise DivergenceError(f"Loss diverged (loss={loss})", epoch=epoch, step=step)
            opt.step(grads)
            losses.append(loss)
            result.step_losses.append(loss)
        mean_loss = float(np.mean(losses))
        result.epoch_losses.append(mean_loss)
        if verbose:
            print(f"[train] epoch {epoch}/{trcfg.epochs} loss={mean_loss:.6f} ({time.perf_counter() - t0:.1f}s)")
        if on_epoch is not None:
            on_epoch(epoch, mean_loss)
    result.seconds = time.perf_counter() - t0
    return result


def write_loss_csv(path: Path, losses: Sequence[float]) -> None:
    lines = ["epoch,loss"] + [f"{i},{fmt(v)}" for i, v in enumerate(losses, start=1)]
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
