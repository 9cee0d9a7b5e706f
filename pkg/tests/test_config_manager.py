import json
from pathlib import Path

import pytest

import config_manager
from config_manager import (THREADS_ENV_VAR, TrainConfig, get_thread_count, load_train_config,
                            save_train_config)
from errors import ConfigurationError
from network import ModelConfig

CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"


def test_defaults_follow_published_training_setup():
    config = TrainConfig.default().validate()
    assert config.optimizer.lr == 1e-4
    assert config.batch_size == 16
    assert config.model.input_size == (224, 224)
    assert config.schedule.restart_period == 2.0


def test_save_load_round_trip(tmp_path):
    config = TrainConfig(model=ModelConfig.preset("tiny"), epochs=3, batch_size=2, seed=5)
    path = tmp_path / "nested" / "config.json"
    save_train_config(config, str(path))
    loaded = load_train_config(str(path))
    assert loaded == config
    assert loaded.optimizer.betas == (0.9, 0.999)

    save_train_config(loaded, str(tmp_path / "again.json"))
    assert (tmp_path / "again.json").read_text() == path.read_text()


@pytest.mark.parametrize("data, key", [
    ({"bogus": 1}, "bogus"),
    ({"optimizer": {"learning_rate": 1.0}}, "optimizer.learning_rate"),
    ({"model": {"num_classes": 3, "width": 2}}, "model.width"),
    ({"data": []}, "data"),
])
def test_unknown_keys_are_reported_with_their_path(data, key):
    with pytest.raises(ConfigurationError) as info:
        TrainConfig.from_dict(data)
    assert info.value.key == key


@pytest.mark.parametrize("data, key", [
    ({"optimizer": {"lr": 0.0}}, "optimizer.lr"),
    ({"optimizer": {"weight_decay": -1.0}}, "optimizer.weight_decay"),
    ({"optimizer": {"betas": [0.9, 1.0]}}, "optimizer.betas"),
    ({"schedule": {"restart_period": 0.5}}, "schedule.restart_period"),
    ({"schedule": {"min_lr": 1.0}}, "schedule.min_lr"),
    ({"batch_size": 0}, "batch_size"),
    ({"epochs": 0}, "epochs"),
    ({"model": {"num_classes": 1}}, "num_classes"),
])
def test_invalid_values_are_reported_with_their_key(data, key):
    with pytest.raises(ConfigurationError) as info:
        TrainConfig.from_dict(data)
    assert info.value.key == key


def test_missing_and_malformed_files(tmp_path):
    with pytest.raises(ConfigurationError, match="not found"):
        load_train_config(str(tmp_path / "missing.json"))
    broken = tmp_path / "broken.json"
    broken.write_text("{ not json")
    with pytest.raises(ConfigurationError, match="invalid JSON"):
        load_train_config(str(broken))


def test_partial_file_keeps_defaults(tmp_path):
    path = tmp_path / "partial.json"
    path.write_text(json.dumps({"model": {"num_classes": 3, "input_size": [32, 32],
                                          "encoder_sr_ratios": [8, 4, 1, 1]},
                                "epochs": 2}))
    config = load_train_config(str(path))
    assert config.epochs == 2
    assert config.model.input_size == (32, 32)
    assert config.batch_size == 16


def test_thread_count_from_environment(monkeypatch):
    monkeypatch.setenv(THREADS_ENV_VAR, "3")
    assert get_thread_count() == 3
    monkeypatch.setenv(THREADS_ENV_VAR, "0")
    assert get_thread_count() == 1
    monkeypatch.delenv(THREADS_ENV_VAR)
    assert get_thread_count() >= 1


def test_thread_count_defaults_to_physical_cores(monkeypatch):
    monkeypatch.delenv(THREADS_ENV_VAR, raising=False)
    monkeypatch.setattr(config_manager.psutil, "cpu_count", lambda logical=True: 5)
    assert get_thread_count() == 5
    monkeypatch.setattr(config_manager.psutil, "cpu_count", lambda logical=True: None)
    monkeypatch.setattr(config_manager.os, "cpu_count", lambda: 3)
    assert get_thread_count() == 3


def test_invalid_thread_count(monkeypatch):
    monkeypatch.setenv(THREADS_ENV_VAR, "many")
    with pytest.raises(ConfigurationError) as info:
        get_thread_count()
    assert info.value.key == THREADS_ENV_VAR


@pytest.mark.parametrize("name, preset", [("tiny", "tiny"), ("desk", "desk")])
def test_shipped_configs_match_presets(name, preset):
    config = load_train_config(str(CONFIG_DIR / f"{name}.json"))
    assert config.model == ModelConfig.preset(preset)
