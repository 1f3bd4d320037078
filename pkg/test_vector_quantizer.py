#!/usr/bin/env python3
"""
Test the codebook quantizer against brute force, its losses and the bit arithmetic
"""
import math

import numpy as np
import pytest

import autodiff as ad
from autodiff import Tensor
from errors import ContractViolation
from vector_quantizer import (Codebook, codebook_stats, compression_ratio, nearest_indices, quantize,
                              straight_through, vq_losses)


def brute_force(cells, entries):
    out = []
    for cell in cells:
        best, best_d = 0, math.inf
        for j, entry in enumerate(entries):
            d = sum((float(a) - float(b)) ** 2 for a, b in zip(cell, entry))
            if d < best_d:
                best, best_d = j, d
        out.append(best)
    return out


def codebook_with(entries):
    book = Codebook(len(entries), len(entries[0]), np.random.default_rng(0))
    book.entries.data = np.asarray(entries, dtype=np.float32)
    return book


def test_oracle_including_ties():
    rng = np.random.default_rng(11)
    for trial in range(10):
        n = int(rng.integers(2, 65))
        dim = int(rng.integers(1, 5))
        # small integer grids make exact ties frequent
        entries = rng.integers(-2, 3, size=(n, dim)).astype(np.float64)
        cells = rng.integers(-3, 4, size=(100, dim)).astype(np.float64) / 2.0
        assert nearest_indices(cells, entries).tolist() == brute_force(cells, entries), f"trial {trial}"


def test_small_examples():
    book = codebook_with([[0.0, 0.0], [1.0, 1.0]])
    q = quantize(Tensor([[[0.0, 0.0]]]), book)
    assert q.indices.tolist() == [[0]]
    np.testing.assert_array_equal(q.quantized.data, [[[0.0, 0.0]]])
    far = codebook_with([[0.0, 0.0], [2.0, 2.0]])
    assert quantize(Tensor([[[0.9, 0.9]]]), far).indices.tolist() == [[0]]


def test_default_grid_indices_in_range():
    rng = np.random.default_rng(0)
    book = Codebook(2048, 8, rng)
    q = quantize(Tensor(rng.standard_normal((300, 20, 8)) * 1e-3), book)
    assert q.indices.shape == (300, 20)
    assert q.indices.min() >= 0 and q.indices.max() < 2048


def test_straight_through_value_and_gradient():
    rng = np.random.default_rng(2)
    book = Codebook(16, 4, rng)
    z = Tensor(rng.standard_normal((3, 5, 4)), requires_grad=True)
    q = quantize(z, book)
    out = straight_through(z, q)
    np.testing.assert_array_equal(out.data, q.quantized.data)
    out.mean().backward()
    np.testing.assert_allclose(z.grad, np.full(z.shape, 1.0 / z.size), rtol=1e-6)
    assert book.entries.grad is None


def test_vq_losses_examples():
    z = Tensor([[1.0, 1.0]], requires_grad=True)
    zq = Tensor([[0.0, 0.0]], requires_grad=True)
    quant, commit = vq_losses(z, zq)
    assert quant.item() == pytest.approx(1.0)
    assert commit.item() == pytest.approx(1.0)
    (quant + commit).backward()
    # each loss only moves its own side
    np.testing.assert_allclose(z.grad, [[1.0, 1.0]])
    np.testing.assert_allclose(zq.grad, [[-1.0, -1.0]])

    same = Tensor([[0.5, -0.5]])
    assert all(v.item() == 0.0 for v in vq_losses(same, same))


def test_usage_recorded_only_in_training():
    book = codebook_with([[0.0], [1.0], [2.0]])
    quantize(Tensor([[0.1], [0.9], [1.1]]), book)
    assert book.usage_counts.tolist() == [1, 2, 0]
    book.eval()
    quantize(Tensor([[2.0]]), book)
    assert book.usage_counts.tolist() == [1, 2, 0]
    book.reset_usage()
    assert book.usage_counts.sum() == 0


def test_codebook_stats_examples():
    assert codebook_stats([5] * 8)[0] == pytest.approx(8.0)
    perplexity, dead = codebook_stats([0, 7, 0, 0])
    assert perplexity == pytest.approx(1.0) and dead == pytest.approx(0.75)
    perplexity, dead = codebook_stats([2, 2, 0, 0])
    assert perplexity == pytest.approx(2.0) and dead == pytest.approx(0.5)
    with pytest.raises(ContractViolation):
        codebook_stats([0, 0])


def test_compression_ratio_values():
    assert compression_ratio(4, 2048) == pytest.approx(128 / 11)
    # quoted values are truncated to one decimal
    for r, reported in ((2, 2.9), (4, 11.6), (8, 46.5), (16, 186.1)):
        assert math.floor(compression_ratio(r, 2048) * 10) / 10 == pytest.approx(reported)


def test_dimension_mismatch():
    with pytest.raises(ContractViolation):
        quantize(Tensor(np.zeros((2, 3))), Codebook(4, 2, np.random.default_rng(0)))


if __name__ == "__main__":
    print("Testing vector quantizer")
    print("=" * 45)
    test_oracle_including_ties()
    test_small_examples()
    test_default_grid_indices_in_range()
    test_straight_through_value_and_gradient()
    test_vq_losses_examples()
    test_usage_recorded_only_in_training()
    test_codebook_stats_examples()
    test_compression_ratio_values()
    test_dimension_mismatch()
    print("Quantizer tests complete!")
