"""Readers and writers for the corpus file formats.

Audio: canonical 16-bit little-endian PCM WAV (44-byte header), mono.
Brain signals: BSIG files, a small header followed by float32 little-endian
samples stored row-major by channel.
"""
import logging
import struct
from pathlib import Path

import numpy as np
from scipy.io import wavfile

from errors import ContractViolation

logger = logging.getLogger(__name__)

BSIG_MAGIC = b'BSIG'
BSIG_VERSION = 1
# magic, version, channels, samples per channel, sample rate (Hz)
_BSIG_HEADER = struct.Struct('<4sHIId')


def write_wav(path, samples, sample_rate):
    """Write a mono float waveform in [-1, 1] as 16-bit PCM."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 1:
        raise ContractViolation(f"expected mono audio, got shape {samples.shape}")
    pcm = np.clip(np.round(samples * 32767.0), -32768, 32767).astype('<i2')
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    wavfile.write(str(path), int(sample_rate), pcm)


def read_wav(path):
    """Return (samples as float32 in [-1, 1], sample_rate)."""
    rate, data = wavfile.read(str(path))
    if data.dtype != np.int16:
        raise ContractViolation(f"{path}: expected 16-bit PCM, got {data.dtype}")
    if data.ndim != 1:
        raise ContractViolation(f"{path}: expected mono audio, got {data.ndim} channels")
    return data.astype(np.float32) / 32768.0, int(rate)


def write_bsig(path, data, sample_rate):
    data = np.asarray(data, dtype='<f4')
    if data.ndim != 2:
        raise ContractViolation(f"brain signal must be (channels, samples), got {data.shape}")
    channels, samples = data.shape
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'wb') as f:
        f.write(_BSIG_HEADER.pack(BSIG_MAGIC, BSIG_VERSION, channels, samples, float(sample_rate)))
        f.write(np.ascontiguousarray(data).tobytes())


def read_bsig(path):
    """Return (data as float32 (channels, samples), sample_rate)."""
    raw = Path(path).read_bytes()
    if len(raw) < _BSIG_HEADER.size:
        raise ContractViolation(f"{path}: truncated BSIG header")
    magic, version, channels, samples, rate = _BSIG_HEADER.unpack_from(raw)
    if magic != BSIG_MAGIC:
        raise ContractViolation(f"{path}: bad magic {magic!r}")
    if version != BSIG_VERSION:
        raise ContractViolation(f"{path}: unsupported BSIG version {version}")
    expected = channels * samples * 4
    payload = raw[_BSIG_HEADER.size:]
    if len(payload) != expected:
        raise ContractViolation(f"{path}: payload has {len(payload)} bytes, expected {expected}")
    data = np.frombuffer(payload, dtype='<f4').reshape(channels, samples).astype(np.float32)
    return data, float(rate)
