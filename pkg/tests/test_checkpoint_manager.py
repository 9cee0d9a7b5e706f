import struct

import numpy as np
import pytest

from autodiff import DiffArray, no_grad
from checkpoint_manager import (FORMAT_VERSION, MAGIC, Checkpoint, CheckpointKind, CheckpointManager,
                                decode_checkpoint, encode_checkpoint, load_checkpoint, model_from_checkpoint,
                                restore, save_checkpoint, write_checkpoint)
from errors import CheckpointError
from network import DecoMamba, ModelConfig, count_params
from training import AdamW


@pytest.fixture
def stepped(tiny_config):
    """A tiny model with one optimizer step of history."""
    model = DecoMamba(tiny_config)
    optimizer = AdamW(model.block_params().trainable(), lr=1e-3)
    for _, param in optimizer.params.items():
        param.grad = np.ones_like(param.data)
    optimizer.step()
    return model, optimizer


def _logits(model, seed=3):
    images = DiffArray(np.random.default_rng(seed).standard_normal((2, 3, 32, 32)).astype(np.float32))
    with no_grad():
        return model.eval()(images).logits.data


def _perturb(model):
    for _, param in model.named_parameters():
        param.data = param.data + 1


# =============================================================================
# FORMAT
# =============================================================================

def test_encode_decode_is_byte_identical(stepped):
    model, optimizer = stepped
    payload = encode_checkpoint(Checkpoint.from_model(model, optimizer, global_step=7))
    assert payload.startswith(MAGIC)
    assert struct.unpack("<I", payload[4:8])[0] == FORMAT_VERSION
    decoded = decode_checkpoint(payload)
    assert decoded.global_step == 7
    assert decoded.optimizer_step == 1
    assert encode_checkpoint(decoded) == payload


def test_file_round_trip_is_byte_identical(stepped, tmp_path):
    model, optimizer = stepped
    first = tmp_path / "a.dmck"
    size = save_checkpoint(str(first), model, optimizer, global_step=3)
    assert first.stat().st_size == size
    write_checkpoint(str(tmp_path / "b.dmck"), load_checkpoint(str(first)))
    assert (tmp_path / "b.dmck").read_bytes() == first.read_bytes()
    assert not (tmp_path / "b.dmck.tmp").exists()


def test_element_count_matches_trainable_parameters(tiny_config):
    checkpoint = Checkpoint.from_model(DecoMamba(tiny_config))
    assert checkpoint.element_count() == count_params(tiny_config)
    assert checkpoint.element_count(trainable_only=False) > checkpoint.element_count()
    running = [r for r in checkpoint.params.values() if not r.trainable]
    assert running and all("running_" in r.path for r in running)


def test_restored_model_reproduces_outputs_exactly(stepped):
    model, _ = stepped
    expected = _logits(model)
    decoded = decode_checkpoint(encode_checkpoint(Checkpoint.from_model(model)))

    rebuilt = model_from_checkpoint(decoded)
    np.testing.assert_array_equal(_logits(rebuilt), expected)

    _perturb(model)
    assert not np.array_equal(_logits(model), expected)
    restore(decoded, model)
    np.testing.assert_array_equal(_logits(model), expected)


def test_optimizer_state_round_trip(stepped, tiny_config):
    model, optimizer = stepped
    decoded = decode_checkpoint(encode_checkpoint(Checkpoint.from_model(model, optimizer)))
    fresh_model = DecoMamba(tiny_config)
    fresh = AdamW(fresh_model.block_params().trainable(), lr=1e-3)
    restore(decoded, fresh_model, fresh)
    assert fresh.step_count == 1
    for path in optimizer.params:
        np.testing.assert_array_equal(fresh.exp_avg[path], optimizer.exp_avg[path])
        np.testing.assert_array_equal(fresh.exp_avg_sq[path], optimizer.exp_avg_sq[path])


# =============================================================================
# CORRUPTION
# =============================================================================

def test_bad_magic_and_version(stepped):
    payload = encode_checkpoint(Checkpoint.from_model(stepped[0]))
    with pytest.raises(CheckpointError, match="magic"):
        decode_checkpoint(b"XXXX" + payload[4:])
    with pytest.raises(CheckpointError, match="version"):
        decode_checkpoint(payload[:4] + struct.pack("<I", 99) + payload[8:])


def test_truncated_checkpoint_is_rejected(stepped):
    payload = encode_checkpoint(Checkpoint.from_model(*stepped))
    for cut in (2, 6, 10, 200, len(payload) // 2, len(payload) - 1):
        with pytest.raises(CheckpointError):
            decode_checkpoint(payload[:cut])


def test_trailing_bytes_are_rejected(stepped):
    payload = encode_checkpoint(Checkpoint.from_model(stepped[0]))
    with pytest.raises(CheckpointError, match="trailing"):
        decode_checkpoint(payload + b"\x00")


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(str(tmp_path / "nothing.dmck"))


def test_architecture_mismatch_reports_differences_and_changes_nothing(stepped):
    model, _ = stepped
    checkpoint = Checkpoint.from_model(model)
    other = DecoMamba(ModelConfig.preset("tiny", alpha=2.0))
    _perturb(other)
    before = {path: p.data.copy() for path, p in other.named_parameters()}
    with pytest.raises(CheckpointError) as info:
        restore(checkpoint, other)
    assert info.value.diff == {"alpha": (2.0, 1.0)}
    assert "alpha" in str(info.value)
    for path, p in other.named_parameters():
        np.testing.assert_array_equal(p.data, before[path])


def test_parameter_shape_mismatch(stepped):
    model, _ = stepped
    checkpoint = Checkpoint.from_model(model)
    path = next(iter(checkpoint.params))
    checkpoint.params[path].data = checkpoint.params[path].data[..., :1]
    with pytest.raises(CheckpointError, match=path):
        restore(checkpoint, DecoMamba(model.config))


# =============================================================================
# RUN REGISTRY
# =============================================================================

def test_manager_records_and_prunes(stepped, tmp_path):
    model, optimizer = stepped
    manager = CheckpointManager(str(tmp_path / "run"), keep_periodic=2)
    for step in range(1, 6):
        manager.save(CheckpointKind.PERIODIC, model, optimizer, global_step=step, epoch=step)
    best = manager.save(CheckpointKind.BEST, model, optimizer, global_step=4, epoch=4, metric=0.8)
    manager.save(CheckpointKind.FINAL, model, optimizer, global_step=5, epoch=5)

    periodic = [info for info in manager.list_checkpoints() if info.kind is CheckpointKind.PERIODIC]
    assert [info.global_step for info in periodic] == [4, 5]
    assert sorted(p.name for p in (tmp_path / "run").glob("periodic_*.dmck")) == \
        ["periodic_step00000004.dmck", "periodic_step00000005.dmck"]
    found = manager.find(CheckpointKind.BEST)
    assert found.path == best and found.metric == 0.8
    assert found.fingerprint == model.config.fingerprint()
    assert manager.find(CheckpointKind.FINAL).epoch == 5


def test_unreadable_registry_is_ignored(tmp_path, log_messages):
    manager = CheckpointManager(str(tmp_path))
    (tmp_path / "checkpoints.json").write_text("{ broken")
    assert manager.list_checkpoints() == []
    assert manager.find(CheckpointKind.BEST) is None
    assert any("unreadable registry" in message for message in log_messages)
