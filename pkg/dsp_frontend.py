"""Deterministic preprocessing for brain signals and audio.

Brain path: notch -> zero-phase Butterworth band-pass -> polyphase resample ->
per-channel robust scaling -> zero padding.
Audio path: resample to 16 kHz -> centred STFT (25 ms window, 10 ms hop) ->
80-band Mel projection -> log10 with an 80 dB dynamic-range clamp ->
(x + 4) / 4 rescale -> optional time downsampling -> padding with -1.
"""
import logging
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Optional

import librosa
import numpy as np
from scipy import signal

from errors import ConfigurationError, ContractViolation

logger = logging.getLogger(__name__)

AUDIO_RATE = 16000
N_FFT = 400
HOP_LENGTH = 160
N_MELS = 80
WHISPER_FRAMES = 3000
MEL_PAD_VALUE = -1.0
NOTCH_Q = 30.0
BANDPASS_ORDER = 4
IQR_FLOOR = 1e-8


@dataclass
class RawSignal:
    data: np.ndarray
    sample_rate_hz: float
    subject_id: str = ''
    session_id: str = ''

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2:
            raise ContractViolation(f"brain signal must be (channels, samples), got {self.data.shape}")
        if self.sample_rate_hz <= 0:
            raise ContractViolation(f"sample rate must be positive, got {self.sample_rate_hz}")

    @property
    def channels(self):
        return self.data.shape[0]

    @property
    def samples_per_channel(self):
        return self.data.shape[1]

    def with_data(self, data, sample_rate_hz=None):
        return replace(self, data=data, sample_rate_hz=sample_rate_hz or self.sample_rate_hz)


@dataclass(frozen=True)
class FilterSpec:
    notch_hz: float
    bandpass_low_hz: float
    bandpass_high_hz: float
    target_rate_hz: float


@dataclass(frozen=True)
class SignalProfile:
    """Everything that differs between the EEG and MEG recording setups."""

    name: str
    filters: FilterSpec
    max_audio_seconds: float
    mel_downsample: int
    brain_len: int = 2400
    mel_frames: int = 1200


EEG_FILTERS = FilterSpec(notch_hz=60.0, bandpass_low_hz=0.5, bandpass_high_hz=99.0, target_rate_hz=200.0)
MEG_FILTERS = FilterSpec(notch_hz=50.0, bandpass_low_hz=1.0, bandpass_high_hz=58.0, target_rate_hz=100.0)
EEG_PROFILE = SignalProfile('eeg', EEG_FILTERS, max_audio_seconds=12.0, mel_downsample=1)
MEG_PROFILE = SignalProfile('meg', MEG_FILTERS, max_audio_seconds=24.0, mel_downsample=2)
PROFILES = {'eeg': EEG_PROFILE, 'meg': MEG_PROFILE}


@dataclass
class MelSpectrogram:
    values: np.ndarray
    hop_seconds: float = HOP_LENGTH / AUDIO_RATE
    window_seconds: float = N_FFT / AUDIO_RATE
    pad_mask: Optional[np.ndarray] = field(default=None)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 2 or self.values.shape[0] != N_MELS:
            raise ContractViolation(f"Mel spectrogram must be ({N_MELS}, frames), got {self.values.shape}")

    @property
    def mel_bins(self):
        return self.values.shape[0]

    @property
    def frames(self):
        return self.values.shape[1]


# ---------------------------------------------------------------------------
# Brain signals
# ---------------------------------------------------------------------------

def _rational_ratio(target_rate, source_rate):
    ratio = Fraction(target_rate / source_rate).limit_denominator(1000)
    return ratio.numerator, ratio.denominator


def filter_brain(x: RawSignal, spec: FilterSpec) -> RawSignal:
    """Notch, band-pass and resample (no scaling). Filtering happens at the source rate."""
    rate = x.sample_rate_hz
    if rate < 2 * spec.bandpass_high_hz:
        raise ConfigurationError(
            f"sample rate {rate} Hz cannot carry a {spec.bandpass_high_hz} Hz band edge (Nyquist)")
    if not 0 < spec.bandpass_low_hz < spec.bandpass_high_hz:
        raise ConfigurationError(f"invalid band {spec.bandpass_low_hz}-{spec.bandpass_high_hz} Hz")
    if spec.bandpass_high_hz >= spec.target_rate_hz / 2:
        raise ConfigurationError(
            f"band edge {spec.bandpass_high_hz} Hz is above the Nyquist frequency of {spec.target_rate_hz} Hz")

    data = x.data
    if spec.notch_hz < rate / 2:
        b, a = signal.iirnotch(spec.notch_hz, NOTCH_Q, fs=rate)
        data = signal.filtfilt(b, a, data, axis=-1)
    high = min(spec.bandpass_high_hz, 0.999 * rate / 2)
    sos = signal.butter(BANDPASS_ORDER, [spec.bandpass_low_hz, high], btype='bandpass', fs=rate, output='sos')
    data = signal.sosfiltfilt(sos, data, axis=-1)

    up, down = _rational_ratio(spec.target_rate_hz, rate)
    if up != down:
        data = signal.resample_poly(data, up, down, axis=-1, window=('kaiser', 5.0))
    return x.with_data(data, sample_rate_hz=spec.target_rate_hz)


def robust_scale(x: RawSignal) -> RawSignal:
    """Per channel: subtract the median, divide by the IQR (floored), clip to [-1, 1]."""
    if x.samples_per_channel < 2:
        raise ContractViolation("robust scaling needs at least two samples per channel")
    data = x.data
    median = np.median(data, axis=-1, keepdims=True)
    q1, q3 = np.percentile(data, [25, 75], axis=-1, method='linear', keepdims=True)
    iqr = np.maximum(q3 - q1, IQR_FLOOR)
    return x.with_data(np.clip((data - median) / iqr, -1.0, 1.0))


def preprocess_brain(x: RawSignal, spec: FilterSpec) -> RawSignal:
    return robust_scale(filter_brain(x, spec))


def pad_brain(x: RawSignal, target_len: int = 2400) -> RawSignal:
    if x.samples_per_channel > target_len:
        raise ContractViolation(f"brain signal has {x.samples_per_channel} samples, longer than {target_len}")
    widths = ((0, 0), (0, target_len - x.samples_per_channel))
    return x.with_data(np.pad(x.data, widths))


# ---------------------------------------------------------------------------
# Audio
# ---------------------------------------------------------------------------

def resample_audio(samples, sample_rate):
    if sample_rate == AUDIO_RATE:
        return np.asarray(samples, dtype=np.float64)
    up, down = _rational_ratio(AUDIO_RATE, sample_rate)
    return signal.resample_poly(np.asarray(samples, dtype=np.float64), up, down, window=('kaiser', 5.0))


_MEL_BASIS = {}


def mel_filterbank():
    """80 triangular (Slaney-normalised) filters over 0-8000 Hz for a 400-point FFT."""
    if 'basis' not in _MEL_BASIS:
        _MEL_BASIS['basis'] = librosa.filters.mel(sr=AUDIO_RATE, n_fft=N_FFT, n_mels=N_MELS,
                                                  fmin=0.0, fmax=AUDIO_RATE / 2)
    return _MEL_BASIS['basis']


def mel_spectrogram(audio, sample_rate=AUDIO_RATE) -> MelSpectrogram:
    if sample_rate != AUDIO_RATE:
        raise ConfigurationError(f"Mel frontend needs {AUDIO_RATE} Hz audio, got {sample_rate} Hz")
    audio = np.asarray(audio, dtype=np.float64)
    if audio.ndim != 1:
        raise ContractViolation(f"expected mono audio, got shape {audio.shape}")
    frames = int(np.floor(audio.size / HOP_LENGTH + 0.5))
    stft = librosa.stft(audio, n_fft=N_FFT, hop_length=HOP_LENGTH, window='hann', center=True,
                        pad_mode='reflect')
    power = np.abs(stft[:, :frames]) ** 2
    log_spec = np.log10(np.maximum(mel_filterbank() @ power, 1e-10))
    log_spec = np.maximum(log_spec, log_spec.max() - 8.0)
    return MelSpectrogram((log_spec + 4.0) / 4.0)


def downsample_time(m: MelSpectrogram, factor: int) -> MelSpectrogram:
    if factor < 1 or m.frames % factor:
        raise ContractViolation(f"{m.frames} frames cannot be downsampled by {factor}")
    if factor == 1:
        return m
    pooled = m.values.reshape(N_MELS, m.frames // factor, factor).mean(axis=-1)
    return MelSpectrogram(pooled, hop_seconds=m.hop_seconds * factor, window_seconds=m.window_seconds)


def upsample_time(m: MelSpectrogram, factor: int) -> MelSpectrogram:
    """Repeat each frame `factor` times (inverse framing of downsample_time)."""
    if factor < 1:
        raise ContractViolation(f"upsampling factor must be >= 1, got {factor}")
    if factor == 1:
        return m
    return MelSpectrogram(np.repeat(m.values, factor, axis=1), hop_seconds=m.hop_seconds / factor,
                          window_seconds=m.window_seconds)


def pad_mel(m: MelSpectrogram, target_frames: int = WHISPER_FRAMES) -> MelSpectrogram:
    if m.frames > target_frames:
        raise ContractViolation(f"spectrogram has {m.frames} frames, more than {target_frames}")
    values = np.full((N_MELS, target_frames), MEL_PAD_VALUE, dtype=np.float32)
    values[:, :m.frames] = m.values
    mask = np.zeros(target_frames, dtype=bool)
    mask[m.frames:] = True
    return MelSpectrogram(values, hop_seconds=m.hop_seconds, window_seconds=m.window_seconds, pad_mask=mask)


def audio_to_mel(samples, sample_rate, profile: SignalProfile = EEG_PROFILE) -> MelSpectrogram:
    """Full audio path for one segment, ending at `profile.mel_frames` frames."""
    audio = resample_audio(samples, sample_rate)
    seconds = audio.size / AUDIO_RATE
    if seconds > profile.max_audio_seconds + 1e-9:
        raise ContractViolation(
            f"audio segment of {seconds:.2f} s exceeds the {profile.max_audio_seconds} s limit of the {profile.name} profile")
    m = mel_spectrogram(audio)
    usable = m.frames - m.frames % profile.mel_downsample
    if usable != m.frames:
        m = MelSpectrogram(m.values[:, :usable])
    m = downsample_time(m, profile.mel_downsample)
    return pad_mel(m, profile.mel_frames)


def brain_to_input(raw: RawSignal, profile: SignalProfile = EEG_PROFILE) -> RawSignal:
    """Full brain path for one segment, ending at `profile.brain_len` samples."""
    return pad_brain(preprocess_brain(raw, profile.filters), profile.brain_len)
