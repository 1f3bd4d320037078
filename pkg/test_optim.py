#!/usr/bin/env python3
"""
Test AdamW, the cosine schedule and early stopping
"""
import numpy as np
import pytest

from layers import Parameter
from optim import AdamW, EarlyStopping, clip_grad_norm, early_stop, scheduler_lr


def test_cosine_schedule_points():
    assert scheduler_lr(0, 2e-4, 40) == pytest.approx(2e-4)
    assert scheduler_lr(20, 2e-4, 40) == pytest.approx(1e-4)
    assert scheduler_lr(40, 2e-4, 40) == 0.0
    assert scheduler_lr(55, 2e-4, 40) == 0.0
    values = [scheduler_lr(t, 1.0, 10) for t in range(11)]
    assert all(a >= b for a, b in zip(values, values[1:]))


def test_early_stop_examples():
    assert early_stop([3, 2, 1, 1, 1, 1, 1], patience=4) == (7, 3)
    assert early_stop([2, 1, 2, 0.5, 2, 2, 2, 2], patience=4) == (8, 4)
    assert early_stop([5, 4, 3, 2, 1, 0.5], patience=4) == (None, 6)


def test_early_stopping_improved_flag():
    stopper = EarlyStopping(patience=2)
    assert stopper.update(1.0) is False and stopper.improved
    assert stopper.update(1.0) is False and not stopper.improved
    assert stopper.update(2.0) is True
    assert stopper.best_epoch == 1


def test_adamw_first_step_and_decoupled_decay():
    p = Parameter(np.array([1.0, -2.0]))
    p.grad = np.array([0.5, -0.5])
    opt = AdamW([p], lr=0.1, weight_decay=0.0)
    opt.step()
    # first bias-corrected Adam step moves each weight by lr against the gradient sign
    np.testing.assert_allclose(p.data, [0.9, -1.9], rtol=1e-5)

    q = Parameter(np.array([1.0]))
    q.grad = np.array([0.0])
    AdamW([q], lr=0.1, weight_decay=0.5).step()
    np.testing.assert_allclose(q.data, [0.95], rtol=1e-6)


def test_adamw_skips_frozen_parameters():
    p = Parameter(np.array([1.0, 1.0]))
    p.requires_grad = False
    p.grad = np.array([1.0, 1.0])
    AdamW([p], lr=0.1, weight_decay=0.1).step()
    np.testing.assert_array_equal(p.data, [1.0, 1.0])


def test_adamw_state_round_trip():
    p = Parameter(np.array([1.0, 2.0]))
    opt = AdamW([p], lr=0.01)
    for _ in range(3):
        p.grad = np.array([0.1, -0.2])
        opt.step()
    other = AdamW([Parameter(np.array([1.0, 2.0]))], lr=0.01)
    other.load_state(opt.state())
    assert other.step_count == 3
    np.testing.assert_array_equal(other.m[0], opt.m[0])
    np.testing.assert_array_equal(other.v[0], opt.v[0])


def test_clip_grad_norm():
    p = Parameter(np.zeros(2))
    p.grad = np.array([3.0, 4.0])
    assert clip_grad_norm([p], 1.0) == pytest.approx(5.0)
    np.testing.assert_allclose(np.linalg.norm(p.grad), 1.0, rtol=1e-6)


if __name__ == "__main__":
    print("Testing optimisation helpers")
    print("=" * 45)
    test_cosine_schedule_points()
    test_early_stop_examples()
    test_early_stopping_improved_flag()
    test_adamw_first_step_and_decoupled_decay()
    test_adamw_skips_frozen_parameters()
    test_adamw_state_round_trip()
    test_clip_grad_norm()
    print("Optimiser tests complete!")
