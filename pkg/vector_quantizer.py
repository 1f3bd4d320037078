"""Nearest-codebook quantization with straight-through gradients.

Latent grids are tensors laid out (batch, time_cells, freq_cells, D); a single
grid without the batch axis is accepted everywhere too.
"""
import logging
import math
from dataclasses import dataclass

import numpy as np

import autodiff as ad
from autodiff import Function, Tensor
from errors import ContractViolation
from layers import Module, Parameter

logger = logging.getLogger(__name__)

# rows per distance chunk, keeps chunk * N * D bounded
_CHUNK_ELEMENTS = 1 << 22


class Codebook(Module):
    """N x D learnable entries plus a per-epoch usage histogram."""

    def __init__(self, size, dim, rng):
        super().__init__()
        if size < 2 or dim < 1:
            raise ContractViolation(f"codebook needs N >= 2 and D >= 1, got N={size}, D={dim}")
        self.entries = Parameter(rng.uniform(-1.0 / size, 1.0 / size, size=(size, dim)))
        self.usage_counts = np.zeros(size, dtype=np.int64)

    @property
    def size(self):
        return self.entries.shape[0]

    @property
    def dim(self):
        return self.entries.shape[1]

    def record_usage(self, indices):
        self.usage_counts += np.bincount(np.asarray(indices).reshape(-1), minlength=self.size)

    def reset_usage(self):
        self.usage_counts = np.zeros(self.size, dtype=np.int64)


@dataclass
class QuantizationResult:
    quantized: Tensor
    indices: np.ndarray
    quant_loss: Tensor
    commit_loss: Tensor


def nearest_indices(flat, entries):
    """Exact argmin of squared Euclidean distance; ties go to the smallest index."""
    flat = np.asarray(flat, dtype=np.float64)
    entries = np.asarray(entries, dtype=np.float64)
    rows = max(1, _CHUNK_ELEMENTS // max(entries.size, 1))
    out = np.empty(flat.shape[0], dtype=np.int64)
    for start in range(0, flat.shape[0], rows):
        chunk = flat[start:start + rows]
        dist = ((chunk[:, None, :] - entries[None, :, :]) ** 2).sum(axis=-1)
        out[start:start + rows] = np.argmin(dist, axis=1)
    return out


def quantize(z, codebook: Codebook, record=True) -> QuantizationResult:
    z = ad.as_tensor(z)
    if z.shape[-1] != codebook.dim:
        raise ContractViolation(f"latent dim {z.shape[-1]} does not match codebook dim {codebook.dim}")
    flat = z.data.reshape(-1, codebook.dim)
    indices = nearest_indices(flat, codebook.entries.data).reshape(z.shape[:-1])
    if record and codebook.training:
        codebook.record_usage(indices)
    quantized = ad.embedding_lookup(codebook.entries, indices)
    quant_loss, commit_loss = vq_losses(z, quantized)
    return QuantizationResult(quantized, indices, quant_loss, commit_loss)


class StraightThrough(Function):
    """Forward: the quantized values exactly. Backward: identity onto z."""

    op_kind = 'straight_through'

    def forward(self, z, quantized):
        if z.shape != quantized.shape:
            raise ContractViolation(f"straight-through shape mismatch {z.shape} vs {quantized.shape}")
        return quantized.copy()

    def backward(self, grad):
        return grad, None


def straight_through(z, q: QuantizationResult):
    """Same value as z + stop_gradient(z_q - z) without the float round trip."""
    return StraightThrough.apply(z, ad.stop_gradient(q.quantized))


def vq_losses(z, quantized):
    """(quantization loss, commitment loss); each side of the pair sees only its own gradient."""
    quantized = quantized.quantized if isinstance(quantized, QuantizationResult) else quantized
    if z.shape != quantized.shape:
        raise ContractViolation(f"vq loss shape mismatch {z.shape} vs {quantized.shape}")
    quant_loss = ad.mse_mean(ad.stop_gradient(z), quantized)
    commit_loss = ad.mse_mean(z, ad.stop_gradient(quantized))
    return quant_loss, commit_loss


def codebook_stats(usage_counts):
    """(perplexity, dead_fraction) of an empirical usage histogram."""
    counts = np.asarray(usage_counts, dtype=np.float64)
    total = counts.sum()
    if total <= 0:
        raise ContractViolation("codebook statistics need at least one quantized cell")
    p = counts[counts > 0] / total
    perplexity = float(np.exp(-np.sum(p * np.log(p))))
    dead_fraction = float(np.mean(counts == 0))
    return perplexity, dead_fraction


def compression_ratio(downsample_ratio, codebook_size, bits_per_pixel=8):
    if downsample_ratio < 1 or codebook_size < 2:
        raise ContractViolation(f"invalid ratio r={downsample_ratio}, N={codebook_size}")
    return bits_per_pixel * downsample_ratio ** 2 / math.log2(codebook_size)
