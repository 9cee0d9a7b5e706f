"""
Checkpoint Management for Deco-Mamba

Binary checkpoints plus a JSON registry of what was saved during a run.

Key Principles:
1. A checkpoint is parsed completely before anything is applied to a model
2. load -> save reproduces the file byte for byte
3. The architecture echo is compared on load; a mismatch reports every differing key
4. Periodic checkpoints are pruned by count; best and final are always kept

File layout (little-endian throughout):
    magic "DMCK" | version u32 | config length u32 | config JSON (canonical)
    | global step u64 | parameter count u32 | parameter records
    | optimizer step u64 | optimizer record count u32 | optimizer records

    record: path length u16 | path utf-8 | dtype code u8 (1=float32, 2=float64)
            | trainable u8 | rank u8 | dims u32 x rank | raw values
"""

import json
import os
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass
from datetime import datetime
from enum import Enum
from typing import Dict, List, Optional, Tuple

import numpy as np

from errors import CheckpointError, ConfigurationError
from network import DecoMamba, ModelConfig
from run_logging import safe_update_log

MAGIC = b"DMCK"
FORMAT_VERSION = 1
REGISTRY_NAME = "checkpoints.json"

_DTYPE_CODES = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}
_CODE_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_NATIVE_DTYPES = {1: np.dtype(np.float32), 2: np.dtype(np.float64)}


# =============================================================================
# RECORDS
# =============================================================================

@dataclass
class TensorRecord:
    path: str
    data: np.ndarray
    trainable: bool = True


@dataclass
class Checkpoint:
    config: ModelConfig
    global_step: int
    params: "OrderedDict[str, TensorRecord]"
    optimizer_step: int = 0
    optimizer_state: "Optional[OrderedDict[str, TensorRecord]]" = None

    def element_count(self, trainable_only: bool = True) -> int:
        return sum(r.data.size for r in self.params.values() if r.trainable or not trainable_only)

    @classmethod
    def from_model(cls, model: DecoMamba, optimizer=None, global_step: int = 0) -> "Checkpoint":
        params = OrderedDict(
            (path, TensorRecord(path, np.array(p.data, copy=True), p.trainable))
            for path, p in model.named_parameters())
        optimizer_step, state = 0, OrderedDict()
        if optimizer is not None:
            optimizer_step = optimizer.step_count
            state = OrderedDict((path, TensorRecord(path, np.array(values, copy=True), True))
                                for path, values in optimizer.state_records().items())
        return cls(model.config, int(global_step), params, int(optimizer_step), state)


class _Reader:
    """Bounds-checked cursor over checkpoint bytes."""

    def __init__(self, payload: bytes):
        self.payload = payload
        self.offset = 0

    def take(self, count: int) -> bytes:
        end = self.offset + count
        if count < 0 or end > len(self.payload):
            raise CheckpointError(f"truncated checkpoint: need {count} bytes at offset {self.offset}")
        chunk = self.payload[self.offset:end]
        self.offset = end
        return chunk

    def unpack(self, fmt: str):
        values = struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt)))
        return values[0] if len(values) == 1 else values


def _encode_record(record: TensorRecord) -> bytes:
    data = np.asarray(record.data)
    code = _DTYPE_CODES.get(data.dtype)
    if code is None:
        raise CheckpointError(f"{record.path}: unsupported dtype {data.dtype}")
    path = record.path.encode("utf-8")
    if len(path) > 0xFFFF or data.ndim > 0xFF:
        raise CheckpointError(f"{record.path}: path or rank too large for the record header")
    header = struct.pack("<H", len(path)) + path + struct.pack("<BBB", code, int(record.trainable), data.ndim)
    dims = struct.pack(f"<{data.ndim}I", *data.shape) if data.ndim else b""
    return header + dims + np.ascontiguousarray(data, dtype=_CODE_DTYPES[code]).tobytes()


def _decode_record(reader: _Reader) -> TensorRecord:
    path_len = reader.unpack("H")
    try:
        path = reader.take(path_len).decode("utf-8")
    except UnicodeDecodeError:
        raise CheckpointError(f"parameter path at offset {reader.offset} is not valid utf-8")
    code, trainable, rank = reader.unpack("BBB")
    if code not in _CODE_DTYPES:
        raise CheckpointError(f"{path}: unknown dtype code {code}")
    if trainable not in (0, 1):
        raise CheckpointError(f"{path}: invalid trainable flag {trainable}")
    shape = struct.unpack(f"<{rank}I", reader.take(4 * rank))
    dtype = _CODE_DTYPES[code]
    count = int(np.prod(shape)) if shape else 1
    values = np.frombuffer(reader.take(count * dtype.itemsize), dtype=dtype).reshape(shape)
    return TensorRecord(path, values.astype(_NATIVE_DTYPES[code]), bool(trainable))


def _encode_records(records: "OrderedDict[str, TensorRecord]") -> bytes:
    return struct.pack("<I", len(records)) + b"".join(_encode_record(r) for r in records.values())


def _decode_records(reader: _Reader) -> "OrderedDict[str, TensorRecord]":
    records = OrderedDict()
    for _ in range(reader.unpack("I")):
        record = _decode_record(reader)
        if record.path in records:
            raise CheckpointError(f"duplicate record {record.path}")
        records[record.path] = record
    return records


# =============================================================================
# ENCODE / DECODE
# =============================================================================

def encode_checkpoint(checkpoint: Checkpoint) -> bytes:
    config = checkpoint.config.canonical_json().encode("utf-8")
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION), struct.pack("<I", len(config)), config,
             struct.pack("<Q", checkpoint.global_step), _encode_records(checkpoint.params),
             struct.pack("<Q", checkpoint.optimizer_step),
             _encode_records(checkpoint.optimizer_state or OrderedDict())]
    return b"".join(parts)


def decode_checkpoint(payload: bytes) -> Checkpoint:
    """Parse every byte; raises CheckpointError without side effects on any defect."""
    reader = _Reader(payload)
    magic = reader.take(len(MAGIC)) if len(payload) >= len(MAGIC) else payload
    if magic != MAGIC:
        raise CheckpointError(f"not a Deco-Mamba checkpoint (magic {magic!r})")
    version = reader.unpack("I")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
    config_bytes = reader.take(reader.unpack("I"))
    try:
        config = ModelConfig.from_dict(json.loads(config_bytes.decode("utf-8")))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"config echo is not valid JSON: {e}")
    except (ConfigurationError, TypeError) as e:
        raise CheckpointError(f"config echo is invalid: {e}")
    global_step = reader.unpack("Q")
    params = _decode_records(reader)
    optimizer_step = reader.unpack("Q")
    optimizer_state = _decode_records(reader)
    if reader.offset != len(payload):
        raise CheckpointError(f"{len(payload) - reader.offset} unexpected trailing bytes")
    return Checkpoint(config, global_step, params, optimizer_step, optimizer_state)


def write_checkpoint(path: str, checkpoint: Checkpoint) -> int:
    """Write via a temporary file and rename; returns the byte count."""
    payload = encode_checkpoint(checkpoint)
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    tmp_path = path + ".tmp"
    with open(tmp_path, "wb") as f:
        f.write(payload)
    os.replace(tmp_path, path)
    return len(payload)


def save_checkpoint(path: str, model: DecoMamba, optimizer=None, global_step: int = 0) -> int:
    return write_checkpoint(path, Checkpoint.from_model(model, optimizer, global_step))


def load_checkpoint(path: str) -> Checkpoint:
    try:
        with open(path, "rb") as f:
            payload = f.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}")
    return decode_checkpoint(payload)


# =============================================================================
# APPLY
# =============================================================================

def check_compatible(checkpoint: Checkpoint, config: ModelConfig):
    if checkpoint.config.fingerprint() != config.fingerprint():
        raise CheckpointError("checkpoint was saved for a different architecture",
                              diff=config.diff(checkpoint.config))


def restore(checkpoint: Checkpoint, model: DecoMamba, optimizer=None, expected: Optional[ModelConfig] = None):
    """Copy parameters (and optimizer state) into model after validating all of them."""
    check_compatible(checkpoint, expected or model.config)
    params = model.block_params()
    missing = [p for p in params.paths() if p not in checkpoint.params]
    unexpected = [p for p in checkpoint.params if p not in params]
    if missing or unexpected:
        raise CheckpointError(f"parameter set mismatch: missing {missing[:5]}, unexpected {unexpected[:5]}")
    for path, record in checkpoint.params.items():
        if record.data.shape != params[path].shape:
            raise CheckpointError(f"{path}: shape {record.data.shape} vs model {params[path].shape}")
        if record.trainable != params[path].trainable:
            raise CheckpointError(f"{path}: trainable flag differs from the model")
    state = OrderedDict((p, r.data) for p, r in (checkpoint.optimizer_state or {}).items())
    if optimizer is not None:
        optimizer.validate_state_records(state)

    for path, record in checkpoint.params.items():
        param = params[path]
        param.data = np.array(record.data, dtype=record.data.dtype, copy=True)
        param.grad = None
    if optimizer is not None:
        optimizer.load_state_records(checkpoint.optimizer_step, state)


def model_from_checkpoint(checkpoint: Checkpoint) -> DecoMamba:
    model = DecoMamba(checkpoint.config)
    restore(checkpoint, model)
    return model.eval()


# =============================================================================
# RUN REGISTRY
# =============================================================================

class CheckpointKind(Enum):
    """Why a checkpoint was saved"""
    BEST = "best"
    FINAL = "final"
    PERIODIC = "periodic"


@dataclass
class CheckpointInfo:
    name: str
    kind: CheckpointKind
    path: str
    global_step: int
    epoch: int
    metric: Optional[float]
    fingerprint: str
    size_bytes: int
    created_at: str


class CheckpointManager:
    """Saves checkpoints into a run directory and records them in checkpoints.json"""

    def __init__(self, run_dir: str, keep_periodic: int = 3):
        self.run_dir = run_dir
        self.registry_file = os.path.join(run_dir, REGISTRY_NAME)
        self.keep_periodic = keep_periodic
        os.makedirs(run_dir, exist_ok=True)

    def _file_name(self, kind: CheckpointKind, global_step: int) -> str:
        if kind is CheckpointKind.PERIODIC:
            return f"periodic_step{global_step:08d}.dmck"
        return f"{kind.value}.dmck"

    def save(self, kind: CheckpointKind, model: DecoMamba, optimizer=None, global_step: int = 0,
             epoch: int = 0, metric: Optional[float] = None) -> str:
        name = self._file_name(kind, global_step)
        path = os.path.join(self.run_dir, name)
        size = save_checkpoint(path, model, optimizer, global_step)
        info = CheckpointInfo(name=name, kind=kind, path=path, global_step=global_step, epoch=epoch,
                              metric=metric, fingerprint=model.config.fingerprint(), size_bytes=size,
                              created_at=datetime.now().isoformat(timespec="seconds"))
        self._register(info)
        detail = f" metric={metric:.4f}" if metric is not None else ""
        safe_update_log(f"[CKPT] ✅ saved {kind.value} checkpoint {name} (step {global_step}{detail})")
        if kind is CheckpointKind.PERIODIC:
            self.cleanup_periodic()
        return path

    def _register(self, info: CheckpointInfo):
        registry = self._load_registry()
        entry = asdict(info)
        entry["kind"] = info.kind.value
        registry[info.name] = entry
        self._save_registry(registry)

    def _load_registry(self) -> Dict:
        if os.path.exists(self.registry_file):
            try:
                with open(self.registry_file, "r", encoding="utf-8") as f:
                    return json.load(f)
            except (OSError, json.JSONDecodeError) as e:
                safe_update_log(f"[CKPT] ⚠️ ignoring unreadable registry {self.registry_file}: {e}")
        return {}

    def _save_registry(self, registry: Dict):
        with open(self.registry_file, "w", encoding="utf-8") as f:
            json.dump(registry, f, indent=2, sort_keys=True)

    def list_checkpoints(self) -> List[CheckpointInfo]:
        infos = []
        for name, entry in self._load_registry().items():
            try:
                entry = dict(entry)
                entry["kind"] = CheckpointKind(entry["kind"])
                infos.append(CheckpointInfo(**entry))
            except (KeyError, TypeError, ValueError) as e:
                safe_update_log(f"[CKPT] ⚠️ skipping registry entry {name}: {e}")
        return sorted(infos, key=lambda info: (info.global_step, info.name))

    def find(self, kind: CheckpointKind) -> Optional[CheckpointInfo]:
        matches = [info for info in self.list_checkpoints() if info.kind is kind]
        return matches[-1] if matches else None

    def cleanup_periodic(self) -> Tuple[int, int]:
        """Delete periodic checkpoints beyond the newest keep_periodic; returns (count, bytes freed)."""
        periodic = [info for info in self.list_checkpoints() if info.kind is CheckpointKind.PERIODIC]
        stale = periodic[:max(len(periodic) - self.keep_periodic, 0)]
        registry = self._load_registry()
        freed = 0
        for info in stale:
            if os.path.exists(info.path):
                os.remove(info.path)
            freed += info.size_bytes
            registry.pop(info.name, None)
            safe_update_log(f"[CKPT] 🗑️ removed {info.name}")
        if stale:
            self._save_registry(registry)
        return len(stale), freed
