from __future__ import annotations

import math

import numpy as np
import pytest

from app.core import train as train_module
from app.core.errors import DataError, DivergenceError
from app.core.train import batch_gradients, draw_batch, train, write_loss_csv

from conftest import moving_square, tiny


def test_smoke_run_reports_finite_losses(tiny_settings):
    seen = []
    result = train([moving_square()], tiny_settings, seed=0, verbose=False, on_epoch=lambda e, l: seen.append(e))
    assert len(result.epoch_losses) == 1
    assert all(math.isfinite(v) for v in result.step_losses)
    assert seen == [1]
    assert result.seconds > 0


def test_same_seed_gives_same_parameters():
    settings = tiny(epochs=2)
    a = train([moving_square()], settings, seed=5, verbose=False)
    b = train([moving_square()], settings, seed=5, verbose=False)
    assert a.epoch_losses == b.epoch_losses
    for name, t in a.model.parameters().items():
        np.testing.assert_array_equal(t.data, b.model.parameters()[name].data)


def test_training_moves_the_weights(tiny_settings):
    from app.core.model import build_model

    before = build_model(tiny_settings, seed=0).parameters()
    after = train([moving_square()], tiny_settings, seed=0, verbose=False).model.parameters()
    assert any(not np.array_equal(before[k].data, after[k].data) for k in before)


def test_threaded_batch_matches_serial(tiny_settings):
    from app.core.model import build_model

    model = build_model(tiny_settings, seed=1)
    params = list(model.parameters().values())
    batch = draw_batch([moving_square()], np.random.default_rng(0), tiny_settings, 3)
    loss1, g1 = batch_gradients(model, params, batch, workers=1)
    loss3, g3 = batch_gradients(model, params, batch, workers=3)
    assert loss1 == loss3
    for a, b in zip(g1, g3):
        if a is None:
            assert b is None
        else:
            np.testing.assert_array_equal(a, b)


def test_nan_loss_raises_divergence(tiny_settings, monkeypatch):
    def nan_batch(model, params, batch, workers=1):
        return float("nan"), [None] * len(params)

    monkeypatch.setattr(train_module, "batch_gradients", nan_batch)
    with pytest.raises(DivergenceError) as info:
        train([moving_square()], tiny_settings, seed=0, verbose=False)
    assert info.value.epoch == 1
    assert info.value.step == 1


def test_empty_dataset_is_rejected(tiny_settings):
    with pytest.raises(DataError):
        train([], tiny_settings, verbose=False)


def test_loss_csv(tmp_path):
    path = tmp_path / "loss.csv"
    write_loss_csv(path, [1.5, 0.25])
    assert path.read_text(encoding="utf-8").splitlines() == ["epoch,loss", "1,1.5", "2,0.25"]


@pytest.fixture(scope="module")
def default_run():
    from app.core.config import Settings
    from eval.synthetic import generate_benchmark

    settings = Settings()
    train_set = generate_benchmark(settings.bench_config(), seed=0, verbose=False)["train"]
    return train(train_set, settings, seed=0, workers=4, verbose=False)


@pytest.mark.slow
def test_default_training_halves_the_loss(default_run):
    losses = default_run.epoch_losses
    assert len(losses) == 30
    assert losses[-1] < 0.5 * losses[0], losses


@pytest.mark.slow
def test_early_epochs_decrease_in_moving_average(default_run):
    losses = np.asarray(default_run.epoch_losses)
    window = 5
    moving = np.convolve(losses, np.ones(window) / window, mode="valid")
    assert (np.diff(moving[: window + 1]) < 0).all(), moving[: window + 1]
