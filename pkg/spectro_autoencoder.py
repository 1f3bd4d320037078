"""Stage 1: residual convolutional autoencoder over Mel spectrograms with a VQ bottleneck.

Spectrograms enter as (batch, 80, frames) and are treated as one-channel images
with frequency on the height axis and time on the width axis. The encoder
shrinks both axes by `downsample_ratio`; the latent grid handed to the
quantizer is laid out (batch, time_cells, freq_cells, D).
"""
import logging
from dataclasses import dataclass

import numpy as np

import autodiff as ad
from autodiff import Tensor
from dsp_frontend import N_MELS, MelSpectrogram
from errors import ConfigurationError, ContractViolation
from layers import Conv2d, GroupNorm, Module
from training import StageTrainer, TrainConfig
import vector_quantizer as vq

logger = logging.getLogger(__name__)


@dataclass
class AutoencoderConfig:
    downsample_ratio: int = 4
    latent_dim: int = 8
    codebook_size: int = 2048
    base_channels: int = 32
    blocks_per_level: int = 2
    alpha: float = 0.5
    beta1: float = 0.1
    disable_quantizer: bool = False

    def __post_init__(self):
        r = self.downsample_ratio
        if r < 1 or r & (r - 1):
            raise ConfigurationError(f"downsample ratio must be a power of two, got {r}")
        if N_MELS % r:
            raise ConfigurationError(f"{N_MELS} Mel bins are not divisible by r={r}")
        if self.latent_dim < 1 or self.base_channels < 1 or self.blocks_per_level < 1:
            raise ConfigurationError("latent_dim, base_channels and blocks_per_level must be positive")

    @property
    def levels(self):
        return int(self.downsample_ratio).bit_length() - 1

    def grid_shape(self, frames):
        r = self.downsample_ratio
        return frames // r, N_MELS // r, self.latent_dim


def _groups(channels):
    return 8 if channels % 8 == 0 else 1


class ConvNormAct(Module):
    def __init__(self, in_channels, out_channels, rng):
        super().__init__()
        self.conv = Conv2d(in_channels, out_channels, 3, rng, padding=1)
        self.norm = GroupNorm(_groups(out_channels), out_channels)

    def forward(self, x):
        return ad.gelu(self.norm(self.conv(x)))


class ResidualBlock(Module):
    """Two conv-norm-GELU layers with an additive skip."""

    def __init__(self, channels, rng):
        super().__init__()
        self.first = ConvNormAct(channels, channels, rng)
        self.second = ConvNormAct(channels, channels, rng)

    def forward(self, x):
        return x + self.second(self.first(x))


def _upsample2(x):
    return ad.repeat(ad.repeat(x, 2, axis=2), 2, axis=3)


class MelEncoder(Module):
    def __init__(self, cfg: AutoencoderConfig, rng):
        super().__init__()
        c = cfg.base_channels
        self.stem = Conv2d(1, c, 3, rng, padding=1)
        self.blocks = [ResidualBlock(c, rng) for _ in range(cfg.levels * cfg.blocks_per_level)]
        self.downs = [Conv2d(c, c, 3, rng, stride=2, padding=1) for _ in range(cfg.levels)]
        self.bottleneck = ResidualBlock(c, rng)
        self.to_latent = Conv2d(c, cfg.latent_dim, 1, rng)
        self.blocks_per_level = cfg.blocks_per_level

    def forward(self, mel):
        x = self.stem(mel.reshape(mel.shape[0], 1, mel.shape[1], mel.shape[2]))
        for level, down in enumerate(self.downs):
            for block in self.blocks[level * self.blocks_per_level:(level + 1) * self.blocks_per_level]:
                x = block(x)
            x = down(x)
        x = self.to_latent(self.bottleneck(x))
        # (B, D, freq, time) -> (B, time, freq, D)
        return x.transpose(0, 3, 2, 1)


class MelDecoder(Module):
    """Upsamples the quantized latent grid back to a Mel spectrogram.

    There are no encoder skip connections: stage 2 decodes from the quantized latent alone, with no Mel to encode.
    """

    def __init__(self, cfg: AutoencoderConfig, rng):
        super().__init__()
        c = cfg.base_channels
        self.from_latent = Conv2d(cfg.latent_dim, c, 1, rng)
        self.bottleneck = ResidualBlock(c, rng)
        self.ups = [Conv2d(c, c, 3, rng, padding=1) for _ in range(cfg.levels)]
        self.blocks = [ResidualBlock(c, rng) for _ in range(cfg.levels * cfg.blocks_per_level)]
        # linear head: padding is exactly -1, a bounded output would bias it
        self.head = Conv2d(c, 1, 3, rng, padding=1)
        self.blocks_per_level = cfg.blocks_per_level

    def forward(self, grid):
        x = self.bottleneck(self.from_latent(grid.transpose(0, 3, 2, 1)))
        for level, up in enumerate(self.ups):
            x = up(_upsample2(x))
            for block in self.blocks[level * self.blocks_per_level:(level + 1) * self.blocks_per_level]:
                x = block(x)
        out = self.head(x)
        return out.reshape(out.shape[0], out.shape[2], out.shape[3])


class ResUnetAutoencoder(Module):
    def __init__(self, cfg: AutoencoderConfig, rng):
        super().__init__()
        self.config = cfg
        self.encoder = MelEncoder(cfg, rng)
        self.decoder = MelDecoder(cfg, rng)
        self.codebook = vq.Codebook(cfg.codebook_size, cfg.latent_dim, rng)

    def check_frames(self, frames):
        if frames % self.config.downsample_ratio:
            raise ContractViolation(
                f"{frames} frames are not divisible by the downsampling ratio {self.config.downsample_ratio}")

    def quantize(self, z):
        """(decoder input, QuantizationResult or None); identity when the quantizer is disabled."""
        if self.config.disable_quantizer:
            return z, None
        q = vq.quantize(z, self.codebook)
        return vq.straight_through(z, q), q

    def forward(self, mel):
        z = self.encoder(mel)
        zq, q = self.quantize(z)
        return self.decoder(zq), z, q


def _as_batch(m):
    if isinstance(m, MelSpectrogram):
        m = m.values
    t = ad.as_tensor(m)
    if t.ndim == 2:
        return t.reshape(1, *t.shape), True
    if t.ndim != 3:
        raise ContractViolation(f"expected (80, frames) or (batch, 80, frames), got {t.shape}")
    return t, False


def encode(m, model: ResUnetAutoencoder):
    """Latent grid (time_cells, freq_cells, D) for one spectrogram, batched if given a batch."""
    batch, single = _as_batch(m)
    if batch.shape[1] != N_MELS:
        raise ContractViolation(f"expected {N_MELS} Mel bins, got {batch.shape[1]}")
    model.check_frames(batch.shape[2])
    z = model.encoder(batch)
    return z.reshape(*z.shape[1:]) if single else z


def decode(zq, model: ResUnetAutoencoder):
    zq = ad.as_tensor(zq)
    single = zq.ndim == 3
    if single:
        zq = zq.reshape(1, *zq.shape)
    cfg = model.config
    if zq.ndim != 4 or zq.shape[2] != N_MELS // cfg.downsample_ratio or zq.shape[3] != cfg.latent_dim:
        raise ContractViolation(f"latent grid {zq.shape} does not fit r={cfg.downsample_ratio}, D={cfg.latent_dim}")
    out = model.decoder(zq)
    return out.reshape(*out.shape[1:]) if single else out


def stage1_loss(m, m_hat, z, q, cfg: AutoencoderConfig):
    """Reconstruction MSE + alpha * quantization loss + beta1 * commitment loss."""
    loss = ad.mse_mean(m_hat, ad.as_tensor(m))
    if q is not None:
        loss = loss + cfg.alpha * q.quant_loss + cfg.beta1 * q.commit_loss
    return loss


def stage1_terms(mel_batch, model):
    mel = Tensor(np.stack([np.asarray(getattr(m, 'values', m)) for m in mel_batch]))
    recon, z, q = model(mel)
    loss = stage1_loss(mel, recon, z, q, model.config)
    terms = {'recon': ad.mse_mean(recon, mel).item()}
    if q is not None:
        terms['quant'] = q.quant_loss.item()
        terms['commit'] = q.commit_loss.item()
    return loss, terms


def train_stage1(train_mels, valid_mels, model: ResUnetAutoencoder, train_config: TrainConfig, rng):
    """Fit encoder, decoder and codebook; returns the loss History (best epoch restored)."""
    if not train_mels:
        raise ContractViolation("stage 1 needs at least one training spectrogram")
    for m in list(train_mels) + list(valid_mels):
        model.check_frames(np.asarray(getattr(m, 'values', m)).shape[-1])

    def start(epoch):
        model.codebook.reset_usage()

    def end(epoch):
        if model.config.disable_quantizer or not model.codebook.usage_counts.any():
            return {}
        perplexity, dead = vq.codebook_stats(model.codebook.usage_counts)
        logger.info(f"stage1 epoch {epoch}: codebook perplexity {perplexity:.1f}, dead {dead:.1%}")
        return {'perplexity': perplexity, 'dead_fraction': dead}

    trainer = StageTrainer('stage1', model, lambda batch: stage1_terms(batch, model), train_config, rng,
                           on_epoch_start=start, on_epoch_end=end)
    return trainer.fit(list(train_mels), list(valid_mels))


def codebook_usage(model: ResUnetAutoencoder, mels):
    """Usage histogram of the current codebook over `mels`, without touching training state."""
    counts = np.zeros(model.config.codebook_size, dtype=np.int64)
    with ad.no_grad():
        for m in mels:
            z = encode(m, model)
            idx = vq.nearest_indices(z.data.reshape(-1, model.config.latent_dim), model.codebook.entries.data)
            counts += np.bincount(idx, minlength=model.config.codebook_size)
    return counts
