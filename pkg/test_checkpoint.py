#!/usr/bin/env python3
"""
Test BECH checkpoint files: bit-exact round trips and rejection of damaged files
"""
import struct

import numpy as np
import pytest

import autodiff as ad
from autodiff import Tensor
from checkpoint import (MAGIC, VERSION, Checkpoint, load_checkpoint, module_checkpoint, restore_module,
                        save_checkpoint)
from errors import CheckpointError
from layers import BatchNorm2d, Linear, Module, parameter_checksum
from optim import AdamW
from training import StageTrainer, TrainConfig


class Net(Module):
    def __init__(self, rng):
        super().__init__()
        self.fc = Linear(5, 3, rng)
        self.norm = BatchNorm2d(3)

    def forward(self, x):
        h = self.fc(x)
        return self.norm(h.reshape(h.shape[0], 3, 1, 1))


def test_tables_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    ckpt = Checkpoint(
        tensors={'w': rng.standard_normal((3, 4)).astype(np.float32),
                 'w64': rng.standard_normal(5),
                 'scalar': np.asarray(1.5, dtype=np.float32),
                 'counts': np.arange(6, dtype=np.int64).reshape(2, 3)},
        training_state={'epoch': np.asarray(7, dtype=np.int64)},
        metadata={'stage': 'stage1', 'r': 4})
    save_checkpoint(tmp_path / 'a.bech', ckpt)
    loaded = load_checkpoint(tmp_path / 'a.bech')
    assert loaded.metadata == {'stage': 'stage1', 'r': 4}
    assert int(loaded.training_state['epoch']) == 7
    for name, value in ckpt.tensors.items():
        assert loaded.tensors[name].dtype == value.dtype
        assert loaded.tensors[name].tobytes() == value.tobytes()
    assert not (tmp_path / 'a.bech.tmp').exists()


def test_module_and_optimizer_restore(tmp_path):
    net = Net(np.random.default_rng(1))
    optimizer = AdamW(net.parameters(), lr=1e-2)
    x = Tensor(np.random.default_rng(2).standard_normal((4, 5)))
    for _ in range(3):
        optimizer.zero_grad()
        (net(x) ** 2).mean().backward()
        optimizer.step()
    save_checkpoint(tmp_path / 'net.bech', module_checkpoint(net, optimizer, epoch=3, seed=9))

    other = Net(np.random.default_rng(5))
    other_optimizer = AdamW(other.parameters(), lr=1e-2)
    ckpt = load_checkpoint(tmp_path / 'net.bech')
    restore_module(other, ckpt, other_optimizer)
    assert parameter_checksum(other) == parameter_checksum(net)
    np.testing.assert_array_equal(other.norm._buffers['running_mean'], net.norm._buffers['running_mean'])
    assert other_optimizer.step_count == 3
    for a, b in zip(other_optimizer.m, optimizer.m):
        np.testing.assert_array_equal(a, b)
    assert int(ckpt.training_state['seed']) == 9

    net.eval()
    other.eval()
    with ad.no_grad():
        np.testing.assert_array_equal(net(x).data, other(x).data)


def test_stage_training_state_resumes(tmp_path):
    rng = np.random.default_rng(3)
    w = np.array([1.0, -2.0, 0.5, 0.0, 3.0])
    items = [(x, x @ w) for x in rng.standard_normal((64, 5))]
    model = Linear(5, 1, np.random.default_rng(4))

    def loss_fn(batch):
        x = Tensor(np.stack([item[0] for item in batch]))
        y = Tensor(np.array([[item[1]] for item in batch]))
        loss = ad.mse_mean(model(x), y)
        return loss, {}

    config = TrainConfig(batch_size=16, max_epochs=6, max_lr=5e-2, patience=6)
    history = StageTrainer('toy', model, loss_fn, config, rng).fit(items[:48], items[48:])
    save_checkpoint(tmp_path / 'toy.bech', module_checkpoint(model, epoch=history.best_epoch, seed=11,
                                                             optimizer_state=history.optimizer_state))

    ckpt = load_checkpoint(tmp_path / 'toy.bech')
    assert int(ckpt.training_state['epoch']) == history.best_epoch
    assert int(ckpt.training_state['scheduler_step']) == history.best_epoch
    assert int(ckpt.training_state['seed']) == 11

    fresh = Linear(5, 1, np.random.default_rng(9))
    resumed = StageTrainer('toy', fresh, loss_fn, config, rng)
    restore_module(fresh, ckpt, resumed.optimizer)
    assert parameter_checksum(fresh) == parameter_checksum(model)
    # three steps per epoch, moments taken at the selected epoch
    assert resumed.optimizer.step_count == 3 * history.best_epoch
    for i in range(len(resumed.optimizer.params)):
        np.testing.assert_array_equal(resumed.optimizer.m[i], history.optimizer_state[f"m.{i}"])
        np.testing.assert_array_equal(resumed.optimizer.v[i], history.optimizer_state[f"v.{i}"])
    assert any(np.any(m != 0) for m in resumed.optimizer.m)


def test_restore_without_optimizer_state_raises(tmp_path):
    net = Net(np.random.default_rng(1))
    save_checkpoint(tmp_path / 'bare.bech', module_checkpoint(net, epoch=2))
    ckpt = load_checkpoint(tmp_path / 'bare.bech')
    assert 'scheduler_step' not in ckpt.training_state
    with pytest.raises(CheckpointError):
        restore_module(Net(np.random.default_rng(2)), ckpt, AdamW(net.parameters()))


def _bytes(tmp_path):
    save_checkpoint(tmp_path / 'ok.bech', Checkpoint({'w': np.ones((2, 2), dtype=np.float32)}))
    return (tmp_path / 'ok.bech').read_bytes()


def _load_bytes(tmp_path, raw):
    (tmp_path / 'bad.bech').write_bytes(raw)
    return load_checkpoint(tmp_path / 'bad.bech')


def test_rejects_bad_magic_and_version(tmp_path):
    raw = _bytes(tmp_path)
    with pytest.raises(CheckpointError):
        _load_bytes(tmp_path, b'NOPE' + raw[4:])
    with pytest.raises(CheckpointError):
        _load_bytes(tmp_path, raw[:4] + struct.pack('<H', VERSION + 1) + raw[6:])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / 'missing.bech')


def test_rejects_truncation_and_trailing_bytes(tmp_path):
    raw = _bytes(tmp_path)
    with pytest.raises(CheckpointError):
        _load_bytes(tmp_path, raw[:-3])
    with pytest.raises(CheckpointError):
        _load_bytes(tmp_path, raw[:8])
    with pytest.raises(CheckpointError):
        _load_bytes(tmp_path, raw + b'\x00')


def test_rejects_duplicate_names(tmp_path):
    entry = struct.pack('<H', 1) + b'w' + struct.pack('<BB', 0, 1) + struct.pack('<I', 1) + \
        np.float32(1.0).tobytes()
    raw = MAGIC + struct.pack('<HI', VERSION, 2) + b'{}' + struct.pack('<I', 2) + entry + entry + \
        struct.pack('<I', 0)
    with pytest.raises(CheckpointError):
        _load_bytes(tmp_path, raw)


def test_rejects_empty_names(tmp_path):
    with pytest.raises(CheckpointError):
        save_checkpoint(tmp_path / 'x.bech', Checkpoint({'': np.zeros(1)}))


if __name__ == "__main__":
    print("Testing checkpoints")
    print("=" * 45)
    print("Run with pytest: these tests use the tmp_path fixture")
