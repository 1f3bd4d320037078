#!/usr/bin/env python3
"""
Test the brain and audio preprocessing paths
"""
import librosa
import numpy as np
import pytest

from dsp_frontend import (EEG_PROFILE, MEG_PROFILE, N_MELS, FilterSpec, MelSpectrogram, RawSignal, audio_to_mel,
                          brain_to_input, downsample_time, filter_brain, mel_spectrogram, pad_brain, pad_mel,
                          resample_audio, robust_scale, upsample_time)
from errors import ConfigurationError, ContractViolation


def tone(freq, seconds, rate=16000):
    t = np.arange(int(seconds * rate)) / rate
    return 0.5 * np.sin(2 * np.pi * freq * t)


def test_mel_framing_shapes():
    assert mel_spectrogram(np.zeros(192000) + 1e-3 * tone(300, 12.0)).values.shape == (80, 1200)
    long = mel_spectrogram(tone(300, 24.0))
    assert long.values.shape == (80, 2400)
    assert downsample_time(long, 2).values.shape == (80, 1200)


def test_pad_mel_fills_minus_one():
    m = MelSpectrogram(np.zeros((80, 1200)))
    padded = pad_mel(m)
    assert padded.values.shape == (80, 3000)
    assert np.all(padded.values[:, 1200:] == -1.0)
    assert padded.pad_mask.sum() == 1800
    full = MelSpectrogram(np.ones((80, 3000)))
    np.testing.assert_array_equal(pad_mel(full).values, full.values)
    with pytest.raises(ContractViolation):
        pad_mel(MelSpectrogram(np.zeros((80, 3001))))


def test_downsample_and_upsample():
    m = MelSpectrogram(np.full((80, 10), 0.25))
    assert downsample_time(m, 1) is m
    np.testing.assert_allclose(downsample_time(m, 2).values, 0.25)
    with pytest.raises(ContractViolation):
        downsample_time(MelSpectrogram(np.zeros((80, 9))), 2)
    ramp = MelSpectrogram(np.tile(np.arange(4.0), (80, 1)))
    up = upsample_time(ramp, 2)
    assert up.values.shape == (80, 8)
    np.testing.assert_array_equal(up.values[0], [0, 0, 1, 1, 2, 2, 3, 3])
    np.testing.assert_array_equal(downsample_time(up, 2).values, ramp.values)


def test_mel_peak_follows_tone():
    m = mel_spectrogram(tone(440.0, 1.0))
    peak = int(np.argmax(m.values[:, 10:-10].mean(axis=1)))
    edges = librosa.mel_frequencies(n_mels=N_MELS + 2, fmin=0.0, fmax=8000.0)
    assert edges[peak] < 440.0 < edges[peak + 2]


def test_mel_rejects_wrong_rate():
    with pytest.raises(ConfigurationError):
        mel_spectrogram(np.zeros(8000), sample_rate=8000)


def test_resample_audio_length():
    assert resample_audio(np.zeros(44100), 44100).size == 16000


def test_audio_to_mel_profiles():
    eeg = audio_to_mel(tone(500, 3.0), 16000, EEG_PROFILE)
    assert eeg.values.shape == (80, 1200)
    assert np.all(eeg.values[:, 300:] == -1.0)
    meg = audio_to_mel(tone(500, 24.0), 16000, MEG_PROFILE)
    assert meg.values.shape == (80, 1200)
    with pytest.raises(ContractViolation):
        audio_to_mel(tone(500, 12.5), 16000, EEG_PROFILE)


def test_robust_scale_examples():
    out = robust_scale(RawSignal(np.array([[1.0, 2.0, 3.0, 4.0, 5.0], [7.0] * 5]), 200.0)).data
    np.testing.assert_allclose(out[0], [-1.0, -0.5, 0.0, 0.5, 1.0])
    np.testing.assert_array_equal(out[1], np.zeros(5))
    wild = robust_scale(RawSignal(np.random.default_rng(0).standard_cauchy((4, 500)), 200.0)).data
    assert wild.min() >= -1.0 and wild.max() <= 1.0


def test_robust_scale_ignores_channel_shift_and_scale():
    rng = np.random.default_rng(12)
    for _ in range(10):
        data = rng.standard_normal((6, 300)) * rng.uniform(0.5, 3.0, size=(6, 1))
        shift = rng.uniform(-50.0, 50.0, size=(6, 1))
        scale = rng.uniform(0.1, 20.0, size=(6, 1))
        base = robust_scale(RawSignal(data, 200.0)).data
        moved = robust_scale(RawSignal(data * scale + shift, 200.0)).data
        np.testing.assert_allclose(moved, base, atol=1e-9)
        assert np.all(np.abs(base) <= 1.0)


def test_pad_brain_examples():
    raw = RawSignal(np.ones((3, 2000)), 200.0)
    padded = pad_brain(raw, 2400).data
    assert padded.shape == (3, 2400)
    assert np.all(padded[:, 2000:] == 0)
    exact = RawSignal(np.ones((3, 2400)), 200.0)
    np.testing.assert_array_equal(pad_brain(exact, 2400).data, exact.data)
    with pytest.raises(ContractViolation):
        pad_brain(RawSignal(np.ones((3, 2401)), 200.0), 2400)


def test_notch_removes_mains_hum():
    rate = 1000.0
    t = np.arange(int(10 * rate)) / rate
    hum = np.sin(2 * np.pi * 60.0 * t)[None, :]
    out = filter_brain(RawSignal(hum, rate), EEG_PROFILE.filters)
    assert out.sample_rate_hz == 200.0
    steady = out.data[:, 200:-200]
    assert np.sqrt(np.mean(steady ** 2)) <= 0.05 * np.sqrt(np.mean(hum ** 2))


def test_filter_keeps_in_band_signal():
    rate = 200.0
    t = np.arange(int(10 * rate)) / rate
    wave = np.sin(2 * np.pi * 12.0 * t)[None, :]
    out = filter_brain(RawSignal(wave, rate), EEG_PROFILE.filters)
    steady = out.data[:, 200:-200]
    assert np.sqrt(np.mean(steady ** 2)) == pytest.approx(np.sqrt(0.5), rel=0.05)


def test_filter_nyquist_errors():
    with pytest.raises(ConfigurationError):
        filter_brain(RawSignal(np.zeros((1, 1000)), 150.0), EEG_PROFILE.filters)
    with pytest.raises(ConfigurationError):
        filter_brain(RawSignal(np.zeros((1, 1000)), 1000.0), FilterSpec(60.0, 0.5, 120.0, 200.0))


def test_brain_to_input_shape():
    raw = RawSignal(np.random.default_rng(1).standard_normal((16, 1000)), 200.0)
    out = brain_to_input(raw, EEG_PROFILE)
    assert out.data.shape == (16, 2400)
    assert np.abs(out.data).max() <= 1.0


if __name__ == "__main__":
    print("Testing DSP frontend")
    print("=" * 45)
    for name, fn in list(globals().items()):
        if name.startswith('test_') and callable(fn):
            fn()
            print(f"  PASS {name}")
    print("DSP frontend tests complete!")
