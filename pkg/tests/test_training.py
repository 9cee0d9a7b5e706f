import math

import numpy as np
import pytest

import training
from autodiff import Parameter
from config_manager import DataConfig, OptimizerConfig, OutputConfig, TrainConfig
from errors import CheckpointError, ConfigurationError, DatasetError, NumericError
from network import ModelConfig, Supervision
from synthetic_data import SegDataset, SynthSpec, synth_generate
from training import AdamW, CosineWarmRestarts, Trainer


# =============================================================================
# OPTIMIZER
# =============================================================================

def test_adamw_first_step_closed_form():
    p0 = np.array([0.5, -2.0, 3.0])
    g = np.array([0.1, -4.0, 2.0])
    param = Parameter(p0.copy())
    optimizer = AdamW([("w", param)], lr=0.01, weight_decay=0.1)
    param.grad = g.copy()
    optimizer.step()
    expected = p0 * (1 - 0.01 * 0.1) - 0.01 * g / (np.abs(g) + 1e-8)
    np.testing.assert_allclose(param.data, expected, rtol=1e-12)
    assert optimizer.step_count == 1


def test_adamw_without_decay_moves_by_lr_against_gradient_sign():
    param = Parameter(np.array([1.0, 1.0]))
    optimizer = AdamW([("w", param)], lr=0.05, weight_decay=0.0)
    for _ in range(3):
        param.grad = np.array([2.0, -0.5])
        optimizer.step()
    np.testing.assert_allclose(param.data, [1.0 - 0.15, 1.0 + 0.15], rtol=1e-6)


def test_adamw_skips_parameters_without_gradients():
    a, b = Parameter(np.ones(2)), Parameter(np.ones(2))
    optimizer = AdamW([("a", a), ("b", b)], lr=0.1)
    a.grad = np.ones(2)
    optimizer.step()
    np.testing.assert_array_equal(b.data, np.ones(2))
    assert list(optimizer.state_records()) == ["exp_avg.a", "exp_avg_sq.a"]


def test_adamw_state_records_are_validated():
    optimizer = AdamW([("w", Parameter(np.ones(3)))])
    with pytest.raises(CheckpointError):
        optimizer.load_state_records(1, {"exp_avg.missing": np.zeros(3)})
    with pytest.raises(CheckpointError):
        optimizer.load_state_records(1, {"exp_avg.w": np.zeros(4)})
    with pytest.raises(CheckpointError):
        optimizer.load_state_records(1, {"momentum.w": np.zeros(3)})


# =============================================================================
# SCHEDULE
# =============================================================================

def test_restarts_double_the_period():
    schedule = CosineWarmRestarts(1.0, steps_per_epoch=5, restart_period=2, period_mult=2)
    assert schedule.restart_steps(3) == [0, 10, 30]
    for step in schedule.restart_steps(4):
        assert schedule.lr_at(step) == 1.0
    assert schedule.lr_at(5) == pytest.approx(0.5)
    assert schedule.lr_at(20) == pytest.approx(0.5)
    assert schedule.position(29) == (19, 20)


def test_schedule_is_non_negative_and_decreasing_within_a_period():
    schedule = CosineWarmRestarts(1e-3, steps_per_epoch=3, restart_period=2, min_lr=1e-5)
    rates = [schedule.lr_at(step) for step in range(6)]
    assert all(b < a for a, b in zip(rates, rates[1:]))
    assert min(schedule.lr_at(step) for step in range(100)) >= 1e-5
    assert schedule.lr_at(6) == pytest.approx(1e-3)


def test_schedule_needs_steps():
    with pytest.raises(DatasetError):
        CosineWarmRestarts(1.0, steps_per_epoch=0)


# =============================================================================
# TRAINER
# =============================================================================

def _config(run_dir, **overrides) -> TrainConfig:
    values = dict(model=ModelConfig.preset("tiny"), optimizer=OptimizerConfig(lr=1e-3),
                  data=DataConfig(prefetch=0), output=OutputConfig(run_dir=str(run_dir)),
                  epochs=2, batch_size=2, seed=3, quiet=True)
    values.update(overrides)
    return TrainConfig(**values)


def _trainer(tiny_dataset, run_dir, **overrides) -> Trainer:
    return Trainer(_config(run_dir, **overrides), tiny_dataset.split("train"), tiny_dataset.split("val"))


def test_training_is_reproducible(tiny_dataset, tmp_path):
    first = _trainer(tiny_dataset, tmp_path / "a").fit()
    second = _trainer(tiny_dataset, tmp_path / "b").fit()
    assert first.epoch_losses == second.epoch_losses
    assert first.final_loss == second.final_loss
    assert (tmp_path / "a" / "final.dmck").read_bytes() == (tmp_path / "b" / "final.dmck").read_bytes()
    assert all(math.isfinite(loss) for loss in first.epoch_losses)


def test_fit_writes_logs_and_checkpoints(tiny_dataset, tmp_path, log_messages):
    trainer = _trainer(tiny_dataset, tmp_path / "run")
    result = trainer.fit()
    assert trainer.steps_per_epoch == 3
    assert result.global_step == 6

    records = trainer.log.read()
    events = [r["event"] for r in records]
    assert events.count("step") == 6
    assert events.count("eval") == 2
    assert events.count("epoch") == 2
    step = next(r for r in records if r["event"] == "step")
    assert {"loss", "dice", "dist1", "lambda5", "lr"} <= set(step)
    assert float(step["lr"]) == pytest.approx(1e-3)

    assert result.best_epoch in (1, 2)
    assert (tmp_path / "run" / "best.dmck").exists()
    assert result.final_path.endswith("final.dmck")
    assert 0.0 <= result.last_eval.mean_dice <= 1.0
    assert any(message.startswith("[TRAIN] epoch 2/2") for message in log_messages)


def test_periodic_checkpoints(tiny_dataset, tmp_path):
    output = OutputConfig(run_dir=str(tmp_path / "run"), save_every=1, keep_periodic=1)
    trainer = _trainer(tiny_dataset, tmp_path / "run", epochs=2, output=output)
    trainer.fit()
    assert [p.name for p in (tmp_path / "run").glob("periodic_*.dmck")] == ["periodic_step00000006.dmck"]


def test_non_finite_loss_aborts_with_step(tiny_dataset, tmp_path, monkeypatch):
    real_total_loss = training.total_loss
    calls = []

    def failing_total_loss(*args, **kwargs):
        calls.append(1)
        if len(calls) == 2:
            raise NumericError("softmax")
        return real_total_loss(*args, **kwargs)

    monkeypatch.setattr(training, "total_loss", failing_total_loss)
    with pytest.raises(NumericError) as info:
        _trainer(tiny_dataset, tmp_path / "run").fit()
    assert info.value.step == 1
    assert "at step 1" in str(info.value)


def test_trainer_rejects_mismatched_inputs(tiny_dataset, tmp_path):
    with pytest.raises(DatasetError):
        Trainer(_config(tmp_path), SegDataset(tiny_dataset.split("train").samples, 4))
    with pytest.raises(ConfigurationError):
        Trainer(_config(tmp_path, batch_size=0), tiny_dataset.split("train"))


def test_dice_only_training_runs(tiny_dataset, tmp_path):
    model = ModelConfig.preset("tiny", supervision=Supervision.DICE)
    result = _trainer(tiny_dataset, tmp_path, model=model, epochs=1).fit()
    assert math.isfinite(result.final_loss)


# =============================================================================
# DESK-SCALE EXPERIMENT
# =============================================================================

def _desk_run(run_dir, supervision: Supervision) -> float:
    spec = SynthSpec(count=200, val_count=50, height=96, width=96, num_classes=4)
    dataset = synth_generate(spec, seed=0)
    config = TrainConfig(model=ModelConfig.preset("desk", supervision=supervision),
                         optimizer=OptimizerConfig(lr=1e-3),
                         output=OutputConfig(run_dir=str(run_dir)), epochs=40, batch_size=8,
                         seed=0, quiet=True)
    result = Trainer(config, dataset.split("train"), dataset.split("val")).fit()
    assert not any(math.isnan(loss) for loss in result.epoch_losses)
    return result.best_dice


@pytest.mark.slow
def test_desk_scale_training_reaches_target_dice(tmp_path):
    msda = _desk_run(tmp_path / "msda", Supervision.DICE_MSDA)
    assert msda >= 0.90
    dice_only = _desk_run(tmp_path / "dice", Supervision.DICE)
    assert msda >= dice_only - 0.01
