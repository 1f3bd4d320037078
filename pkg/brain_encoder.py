"""Stage 2: Conformer-style brain encoder aligned to the frozen stage-1 latent space."""
import logging
from dataclasses import dataclass

import numpy as np

import autodiff as ad
from autodiff import Tensor
from dsp_frontend import RawSignal
from errors import ConfigurationError, ContractViolation, InvariantViolation
from layers import BatchNorm2d, Conv2d, Linear, Module, Parameter, TransformerEncoderBlock, parameter_checksum
from spectro_autoencoder import ResUnetAutoencoder, decode
from training import StageTrainer, TrainConfig
import vector_quantizer as vq

logger = logging.getLogger(__name__)


@dataclass
class BrainEncoderConfig:
    in_channels: int = 60
    time_len: int = 2400
    hidden: int = 256
    transformer_layers: int = 4
    heads: int = 8
    ts_channels: tuple = (64, 128)
    grid_time: int = 300
    grid_freq: int = 20
    latent_dim: int = 8
    gamma: float = 1.0
    beta2: float = 0.1

    def __post_init__(self):
        if self.time_len % 4:
            raise ConfigurationError(f"brain length {self.time_len} must be divisible by 4")
        if self.hidden % self.heads:
            raise ConfigurationError(f"hidden width {self.hidden} is not divisible by {self.heads} heads")
        ratio = self.sequence_len // self.grid_time if self.grid_time else 0
        if not ratio or self.sequence_len % self.grid_time or ratio & (ratio - 1):
            raise ConfigurationError(
                f"cannot reduce {self.sequence_len} brain steps to {self.grid_time} latent cells by stride-2 convs")

    @property
    def sequence_len(self):
        return self.time_len // 4

    @property
    def time_reductions(self):
        return (self.sequence_len // self.grid_time).bit_length() - 1


class TsConvStack(Module):
    """Temporal conv, temporal conv, then a spatial conv spanning every channel."""

    def __init__(self, cfg: BrainEncoderConfig, rng):
        super().__init__()
        c1, c2 = cfg.ts_channels
        self.temporal1 = Conv2d(1, c1, (1, 5), rng, stride=(1, 2), padding=(0, 2))
        self.norm1 = BatchNorm2d(c1)
        self.temporal2 = Conv2d(c1, c2, (1, 3), rng, stride=(1, 2), padding=(0, 1))
        self.norm2 = BatchNorm2d(c2)
        self.spatial = Conv2d(c2, cfg.hidden, (cfg.in_channels, 1), rng)
        self.norm3 = BatchNorm2d(cfg.hidden)

    def forward(self, x):
        batch, channels, length = x.shape
        x = x.reshape(batch, 1, channels, length)
        x = ad.elu(self.norm1(self.temporal1(x)))
        x = ad.elu(self.norm2(self.temporal2(x)))
        x = ad.elu(self.norm3(self.spatial(x)))
        # (B, hidden, 1, T/4) -> (B, T/4, hidden)
        return x.reshape(batch, x.shape[1], x.shape[3]).transpose(0, 2, 1)


class LatentProjectionHead(Module):
    """Per-step linear to f_m * D, then stride-2 convs over time down to t_m."""

    def __init__(self, cfg: BrainEncoderConfig, rng):
        super().__init__()
        self.grid_freq, self.latent_dim = cfg.grid_freq, cfg.latent_dim
        self.linear = Linear(cfg.hidden, cfg.grid_freq * cfg.latent_dim, rng)
        d = cfg.latent_dim
        if cfg.time_reductions == 0:
            self.convs = [Conv2d(d, d, 3, rng, padding=1)]
        else:
            self.convs = [Conv2d(d, d, 3, rng, stride=(2, 1), padding=1) for _ in range(cfg.time_reductions)]

    def forward(self, h):
        batch, steps, _ = h.shape
        x = self.linear(h).reshape(batch, steps, self.grid_freq, self.latent_dim)
        # channels = D, height = time, width = freq
        x = x.transpose(0, 3, 1, 2)
        for i, conv in enumerate(self.convs):
            if i:
                x = ad.gelu(x)
            x = conv(x)
        return x.transpose(0, 2, 3, 1)


class BrainEncoder(Module):
    def __init__(self, cfg: BrainEncoderConfig, rng):
        super().__init__()
        self.config = cfg
        self.ts_conv = TsConvStack(cfg, rng)
        self.positions = Parameter(rng.normal(0.0, 0.02, size=(cfg.sequence_len, cfg.hidden)))
        self.layers = [TransformerEncoderBlock(cfg.hidden, cfg.heads, rng) for _ in range(cfg.transformer_layers)]
        self.head = LatentProjectionHead(cfg, rng)

    def forward(self, x):
        h = self.ts_conv(x) + self.positions
        for layer in self.layers:
            h = layer(h)
        return self.head(h)


def _brain_batch(eps, cfg: BrainEncoderConfig):
    data = eps.data if isinstance(eps, (RawSignal, Tensor)) else np.asarray(eps)
    data = np.asarray(data)
    single = data.ndim == 2
    if single:
        data = data[None]
    if data.ndim != 3 or data.shape[1] != cfg.in_channels or data.shape[2] != cfg.time_len:
        raise ContractViolation(
            f"brain input must be ({cfg.in_channels}, {cfg.time_len}) per item, got {data.shape}")
    return Tensor(data), single


def encode_brain(eps, model: BrainEncoder):
    """Latent grid (t_m, f_m, D) for one padded recording, batched if given a batch."""
    x, single = _brain_batch(eps, model.config)
    z = model(x)
    return z.reshape(*z.shape[1:]) if single else z


def stage2_loss(m, z_m, z_eps, autoencoder: ResUnetAutoencoder, cfg: BrainEncoderConfig, return_terms=False):
    """Reconstruction through the stage-1 quantizer and decoder + gamma * alignment + beta2 * commitment.

    `z_m` of None drops the alignment term (stage-1 skipped); the codebook term
    alpha * quant_loss is then added so the untrained codebook can learn.
    """
    m = ad.as_tensor(m)
    zq, q = autoencoder.quantize(z_eps)
    m_hat = decode(zq, autoencoder)
    recon = ad.mse_mean(m_hat, m)
    loss = recon
    terms = {'recon': recon.item()}
    if z_m is not None:
        align = ad.mse_mean(z_eps, ad.stop_gradient(z_m))
        loss = loss + cfg.gamma * align
        terms['align'] = align.item()
    if q is not None:
        loss = loss + cfg.beta2 * q.commit_loss
        terms['commit'] = q.commit_loss.item()
        if z_m is None:
            loss = loss + autoencoder.config.alpha * q.quant_loss
            terms['quant'] = q.quant_loss.item()
    return (loss, terms) if return_terms else loss


class _JointStage2(Module):
    def __init__(self, brain, autoencoder):
        super().__init__()
        self.brain = brain
        self.autoencoder = autoencoder


def train_stage2(train_pairs, valid_pairs, model: BrainEncoder, autoencoder: ResUnetAutoencoder,
                 train_config: TrainConfig, rng, skip_autoencoding=False):
    """Train the brain encoder against the frozen stage-1 quantizer and decoder.

    Pairs are dicts with 'brain' (C, T), 'mel' (80, F) and 'z_m' (t_m, f_m, D),
    the last one precomputed by the frozen stage-1 encoder (None when stage 1
    was skipped, in which case the quantizer and decoder train jointly).
    """
    if not train_pairs:
        raise ContractViolation("stage 2 needs at least one training pair")
    cfg = model.config

    def loss_fn(batch):
        x, _ = _brain_batch(np.stack([p['brain'] for p in batch]), cfg)
        mel = Tensor(np.stack([p['mel'] for p in batch]))
        z_m = None if skip_autoencoding else Tensor(np.stack([p['z_m'] for p in batch]))
        return stage2_loss(mel, z_m, model(x), autoencoder, cfg, return_terms=True)

    if skip_autoencoding:
        autoencoder.unfreeze()
        autoencoder.encoder.freeze()
        joint = _JointStage2(model, autoencoder)
        trainer = StageTrainer('stage2', joint, loss_fn, train_config, rng,
                               params=model.trainable_parameters() + autoencoder.trainable_parameters(),
                               frozen=[autoencoder.encoder])
        return trainer.fit(list(train_pairs), list(valid_pairs))

    autoencoder.freeze().eval()
    before = parameter_checksum(autoencoder)
    trainer = StageTrainer('stage2', model, loss_fn, train_config, rng, frozen=[autoencoder])
    history = trainer.fit(list(train_pairs), list(valid_pairs))
    if parameter_checksum(autoencoder) != before:
        raise InvariantViolation("stage-1 parameters changed during stage 2")
    return history


def predict_mel(brain, model: BrainEncoder, autoencoder: ResUnetAutoencoder):
    """Dec(Q(encode_brain(x))) as a numpy array, (80, F) or (B, 80, F)."""
    model.eval()
    autoencoder.eval()
    with ad.no_grad():
        z = encode_brain(brain, model)
        zq, _ = autoencoder.quantize(z if z.ndim == 4 else z.reshape(1, *z.shape))
        out = decode(zq, autoencoder).data
    return out if z.ndim == 4 else out[0]


def mel_pearson(predicted, target, mask=None):
    """Pearson correlation over all (unpadded) Mel cells."""
    p = np.asarray(predicted, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise ContractViolation(f"shape mismatch {p.shape} vs {t.shape}")
    if mask is not None:
        keep = ~np.broadcast_to(np.asarray(mask, dtype=bool), p.shape)
        p, t = p[keep], t[keep]
    p, t = p.ravel() - p.mean(), t.ravel() - t.mean()
    denom = np.sqrt((p ** 2).sum() * (t ** 2).sum())
    return float((p * t).sum() / denom) if denom > 0 else 0.0
