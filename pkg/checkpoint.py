"""BECH checkpoint files.

Layout (little-endian):
    magic b'BECH' | version u16 | metadata length u32 | metadata (UTF-8 JSON)
    tensor table | training-state table

Each table is a u32 entry count followed by entries of
    name length u16 | UTF-8 name | dtype code u8 | rank u8 | dims u32 x rank | values
Parameters are stored as 32-bit floats unless they are float64 (gradient-check
models) or integer counters, so a load after a save is bit-exact.
"""
import json
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from errors import CheckpointError
from monitoring import metrics, structured_logger

logger = logging.getLogger(__name__)

MAGIC = b'BECH'
VERSION = 1
_DTYPES = {0: np.dtype('<f4'), 1: np.dtype('<f8'), 2: np.dtype('<i8')}
_CODES = {dtype: code for code, dtype in _DTYPES.items()}


@dataclass
class Checkpoint:
    tensors: dict
    training_state: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)


def _dtype_code(array):
    if np.issubdtype(array.dtype, np.integer) or array.dtype == np.bool_:
        return 2
    if array.dtype == np.float64:
        return 1
    return 0


def _write_table(f, table):
    f.write(struct.pack('<I', len(table)))
    for name, value in table.items():
        array = np.asarray(value)
        code = _dtype_code(array)
        array = np.ascontiguousarray(array, dtype=_DTYPES[code])
        encoded = name.encode('utf-8')
        f.write(struct.pack('<H', len(encoded)))
        f.write(encoded)
        f.write(struct.pack('<BB', code, array.ndim))
        f.write(struct.pack(f'<{array.ndim}I', *array.shape))
        f.write(array.tobytes())


def _read_table(buf, offset, path):
    try:
        (count,) = struct.unpack_from('<I', buf, offset)
        offset += 4
        table = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from('<H', buf, offset)
            offset += 2
            name = bytes(buf[offset:offset + name_len]).decode('utf-8')
            offset += name_len
            code, rank = struct.unpack_from('<BB', buf, offset)
            offset += 2
            dims = struct.unpack_from(f'<{rank}I', buf, offset)
            offset += 4 * rank
            dtype = _DTYPES[code]
            nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
            if offset + nbytes > len(buf):
                raise CheckpointError(f"{path}: tensor '{name}' is truncated")
            if name in table:
                raise CheckpointError(f"{path}: duplicate tensor name '{name}'")
            table[name] = np.frombuffer(buf, dtype=dtype, count=nbytes // dtype.itemsize,
                                        offset=offset).reshape(dims).copy()
            offset += nbytes
        return table, offset
    except (struct.error, KeyError, UnicodeDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt tensor table ({e})") from e


def save_checkpoint(path, checkpoint: Checkpoint):
    for table in (checkpoint.tensors, checkpoint.training_state):
        for name in table:
            if not name or len(name.encode('utf-8')) > 0xFFFF:
                raise CheckpointError(f"invalid tensor name {name!r}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + '.tmp')
    meta = json.dumps(checkpoint.metadata, sort_keys=True).encode('utf-8')
    with open(tmp, 'wb') as f:
        f.write(MAGIC)
        f.write(struct.pack('<HI', VERSION, len(meta)))
        f.write(meta)
        _write_table(f, checkpoint.tensors)
        _write_table(f, checkpoint.training_state)
    os.replace(tmp, path)
    metrics.record_checkpoint()
    structured_logger.log_checkpoint('SAVE', path)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    buf = path.read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {buf[:4]!r}")
    try:
        version, meta_len = struct.unpack_from('<HI', buf, 4)
    except struct.error as e:
        raise CheckpointError(f"{path}: truncated header") from e
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    offset = 10
    try:
        metadata = json.loads(buf[offset:offset + meta_len].decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: unreadable metadata") from e
    offset += meta_len
    tensors, offset = _read_table(buf, offset, path)
    training_state, offset = _read_table(buf, offset, path)
    if offset != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - offset} trailing bytes")
    structured_logger.log_checkpoint('LOAD', path)
    return Checkpoint(tensors, training_state, metadata)


def module_checkpoint(module, optimizer=None, epoch=0, seed=0, metadata=None, optimizer_state=None):
    """Bundle a module's state, and optionally the optimizer moments, for saving.

    `optimizer_state` is a snapshot from `AdamW.state()`; a live `optimizer` takes precedence.
    """
    state = {'epoch': np.asarray(epoch, dtype=np.int64), 'seed': np.asarray(seed, dtype=np.int64)}
    if optimizer is not None:
        optimizer_state = optimizer.state()
    if optimizer_state is not None:
        state['scheduler_step'] = np.asarray(epoch, dtype=np.int64)
        state.update({f"optim.{k}": v for k, v in optimizer_state.items()})
    return Checkpoint(module.state_dict(), state, dict(metadata or {}))


def restore_module(module, checkpoint: Checkpoint, optimizer=None, strict=True):
    module.load_state_dict(checkpoint.tensors, strict=strict)
    if optimizer is not None:
        prefix = 'optim.'
        state = {k[len(prefix):]: v for k, v in checkpoint.training_state.items() if k.startswith(prefix)}
        if 'step_count' not in state:
            raise CheckpointError("checkpoint carries no optimizer state to resume from")
        optimizer.load_state(state)
    return module
