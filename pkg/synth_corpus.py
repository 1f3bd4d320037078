"""Seeded generator of a small, solvable audio/brain/text corpus.

Each token is a 0.25 s two-tone chord (the lower tone glides upward). A
sentence is rendered by concatenating its token chords with short seeded
silences. The simulated brain signal of a (subject, session, sentence) pair
is a bank of low-frequency oscillators whose amplitudes follow grouped
Mel-band envelopes of the audio, mixed into channels by a per-subject
orthonormal matrix, plus white noise at `snr_db`.
"""
import logging
import math
from dataclasses import dataclass, field, replace
from itertools import combinations
from pathlib import Path

import librosa
import numpy as np
from scipy import signal
from scipy.ndimage import uniform_filter1d

import dsp_frontend
from corpus_splitter import SamplePairMeta
from dsp_frontend import RawSignal
from errors import ContractViolation, CorpusError, GenerationError
import signal_io

logger = logging.getLogger(__name__)

CONSONANTS = 'bdfgklmnprstvz'
VOWELS = 'aeiou'
TOKEN_SECONDS = 0.25
MAX_PATTERN_CORRELATION = 0.9
ENVELOPE_CUTOFF_HZ = 5.0
# over three times the envelope cutoff, so AM sidebands stay clear of 0 Hz
CARRIER_MIN_HZ = 16.0
MANIFEST_NAME = 'corpus.tsv'
MANIFEST_FIELDS = ['pair_id', 'subject', 'session', 'sentence_id', 'text', 'audio', 'brain']


@dataclass
class SynthConfig:
    vocab_size: int = 60
    n_sentences: int = 40
    sentence_len: tuple = (3, 8)
    n_subjects: int = 6
    n_sessions: int = 2
    brain_channels: int = 16
    brain_rate: float = 200.0
    audio_rate: int = 16000
    snr_db: float = 10.0
    max_seconds: float = 12.0
    seed: int = 7

    def __post_init__(self):
        if self.vocab_size < 4:
            raise GenerationError(f"vocab_size must be at least 4, got {self.vocab_size}")
        if math.isnan(self.snr_db):
            raise GenerationError("snr_db must be a number (use inf to disable noise)")
        lo, hi = self.sentence_len
        if not 1 <= lo <= hi:
            raise GenerationError(f"invalid sentence length range {self.sentence_len}")
        if hi > self.vocab_size:
            raise GenerationError(f"sentences of {hi} distinct tokens need a vocabulary of at least {hi}")
        if self.n_subjects < 1 or self.n_sessions < 1 or self.n_sentences < 1 or self.brain_channels < 1:
            raise GenerationError("subject, session, sentence and channel counts must be positive")


@dataclass(frozen=True)
class TokenPattern:
    token: str
    low_hz: float
    high_hz: float
    glide: float = 1.12

    def render(self, rate):
        n = int(round(TOKEN_SECONDS * rate))
        t = np.arange(n) / rate
        # linear glide of the lower tone: phase is the integral of the frequency
        f0, f1 = self.low_hz, self.low_hz * self.glide
        low = np.sin(2 * np.pi * (f0 * t + (f1 - f0) * t ** 2 / (2 * TOKEN_SECONDS)))
        high = np.sin(2 * np.pi * self.high_hz * t)
        fade = np.minimum(1.0, np.minimum(t, t[-1] - t) / 0.01)
        return 0.3 * fade * (low + high) / 2


@dataclass
class SamplePair:
    meta: SamplePairMeta
    text: str
    audio: np.ndarray
    audio_rate: int
    brain: RawSignal

    @property
    def pair_id(self):
        return self.meta.pair_id


@dataclass
class SynthCorpus:
    config: SynthConfig
    vocabulary: list
    patterns: dict
    sentences: dict
    mixing: dict
    pairs: list = field(default_factory=list)

    def metas(self):
        return [p.meta for p in self.pairs]


def make_vocabulary(size, rng):
    syllables = [c + v for c in CONSONANTS for v in VOWELS]
    words = [a + b for a in syllables for b in syllables if a != b]
    if size > len(words):
        raise GenerationError(f"cannot build {size} distinct words")
    return sorted(words[i] for i in rng.permutation(len(words))[:size])


def make_patterns(words, rng, audio_rate=16000):
    """Distinct two-tone chords on a Mel-spaced frequency grid."""
    grid = librosa.mel_frequencies(n_mels=40, fmin=200.0, fmax=min(6000.0, audio_rate / 2.5))
    # neighbouring grid points overlap in the Mel filterbank, keep chords apart
    chords = [(i, j) for i, j in combinations(range(len(grid)), 2) if j - i >= 3]
    if len(words) > len(chords):
        raise GenerationError(f"vocabulary of {len(words)} tokens exceeds the {len(chords)} available chords")
    picks = rng.permutation(len(chords))[:len(words)]
    patterns = {w: TokenPattern(w, float(grid[chords[k][0]]), float(grid[chords[k][1]]))
                for w, k in zip(words, picks)}
    check_pattern_distinctness(patterns, audio_rate)
    return patterns


def pattern_signature(pattern: TokenPattern, audio_rate=16000):
    audio = pattern.render(audio_rate)
    if audio_rate != dsp_frontend.AUDIO_RATE:
        audio = dsp_frontend.resample_audio(audio, audio_rate)
    stft = librosa.stft(audio, n_fft=dsp_frontend.N_FFT, hop_length=dsp_frontend.HOP_LENGTH)
    return (dsp_frontend.mel_filterbank() @ np.abs(stft) ** 2).ravel()


def check_pattern_distinctness(patterns, audio_rate=16000):
    """Largest pairwise correlation of the token Mel signatures; raises if it reaches the limit."""
    words = sorted(patterns)
    sigs = np.stack([pattern_signature(patterns[w], audio_rate) for w in words])
    corr = np.corrcoef(sigs)
    np.fill_diagonal(corr, -1.0)
    worst = float(corr.max()) if len(words) > 1 else 0.0
    if worst >= MAX_PATTERN_CORRELATION:
        i, j = np.unravel_index(np.argmax(corr), corr.shape)
        raise GenerationError(f"token patterns '{words[i]}' and '{words[j]}' correlate at {worst:.3f}")
    return worst


def make_sentences(words, config: SynthConfig, rng):
    lo, hi = config.sentence_len
    sentences, seen = {}, set()
    attempts = 0
    while len(sentences) < config.n_sentences:
        attempts += 1
        if attempts > 1000 * config.n_sentences:
            raise GenerationError(f"could not draw {config.n_sentences} distinct sentences")
        length = int(rng.integers(lo, hi + 1))
        tokens = tuple(words[i] for i in rng.choice(len(words), size=length, replace=False))
        if tokens in seen:
            continue
        seen.add(tokens)
        sentences[f"s{len(sentences):03d}"] = ' '.join(tokens)
    return sentences


def render_sentence(text, patterns, config: SynthConfig, rng):
    pieces = []
    for word in text.split():
        silence = int(round(rng.uniform(0.010, 0.100) * config.audio_rate))
        pieces.append(np.zeros(silence))
        pieces.append(patterns[word].render(config.audio_rate))
    pieces.append(np.zeros(int(0.05 * config.audio_rate)))
    audio = np.concatenate(pieces)
    if audio.size / config.audio_rate > config.max_seconds:
        raise GenerationError(f"sentence '{text}' renders to more than {config.max_seconds} s")
    return audio


def subject_mixing(config: SynthConfig, rng):
    """Random orthonormal channel mixing matrix (channels x oscillators)."""
    q, r = np.linalg.qr(rng.standard_normal((config.brain_channels, config.brain_channels)))
    return q * np.sign(np.diag(r))


def carrier_frequencies(config: SynthConfig):
    top = min(45.0, 0.4 * config.brain_rate)
    freqs = np.linspace(CARRIER_MIN_HZ, top, config.brain_channels + 4)
    # keep away from the mains lines removed by the notch
    freqs = [f for f in freqs if abs(f - 50.0) > 3 and abs(f - 60.0) > 3]
    return np.asarray(freqs[:config.brain_channels])


def band_envelopes(audio, config: SynthConfig):
    """(channels, brain samples) non-negative envelopes of grouped Mel bands."""
    audio16 = dsp_frontend.resample_audio(audio, config.audio_rate)
    mel = dsp_frontend.mel_spectrogram(audio16).values.astype(np.float64)
    groups = np.array_split(np.arange(dsp_frontend.N_MELS), config.brain_channels)
    env = np.stack([mel[g].mean(axis=0) for g in groups]) + 1.5
    env = np.clip(env, 0.0, None)
    mel_rate = 1.0 / (dsp_frontend.HOP_LENGTH / dsp_frontend.AUDIO_RATE)
    up, down = dsp_frontend._rational_ratio(config.brain_rate, mel_rate)
    env = signal.resample_poly(env, up, down, axis=-1, padtype='line')
    # well below CARRIER_MIN_HZ, so each oscillator stays a clean AM signal
    sos = signal.butter(4, ENVELOPE_CUTOFF_HZ, btype='lowpass', fs=config.brain_rate, output='sos')
    env = signal.sosfiltfilt(sos, env, axis=-1)
    return np.clip(env, 0.0, None)


def simulate_brain(audio, mixing, config: SynthConfig, rng, snr_db=None):
    snr_db = config.snr_db if snr_db is None else snr_db
    env = band_envelopes(audio, config)
    n = env.shape[1]
    t = np.arange(n) / config.brain_rate
    phases = rng.uniform(0, 2 * np.pi, size=(config.brain_channels, 1))
    carriers = np.sin(2 * np.pi * carrier_frequencies(config)[:, None] * t + phases)
    clean = mixing @ (env * carriers)
    if math.isinf(snr_db) and snr_db > 0:
        return clean
    noise_power = np.mean(clean ** 2) / (10.0 ** (snr_db / 10.0))
    return clean + rng.standard_normal(clean.shape) * math.sqrt(noise_power)


def generate(config: SynthConfig) -> SynthCorpus:
    rng = np.random.default_rng(config.seed)
    words = make_vocabulary(config.vocab_size, rng)
    patterns = make_patterns(words, rng, config.audio_rate)
    sentences = make_sentences(words, config, rng)
    audio = {sid: render_sentence(text, patterns, config,
                                  np.random.default_rng([config.seed, 1, int(sid[1:])]))
             for sid, text in sentences.items()}
    mixing = {f"sub{s:02d}": subject_mixing(config, np.random.default_rng([config.seed, 2, s]))
              for s in range(config.n_subjects)}
    corpus = SynthCorpus(config, words, patterns, sentences, mixing)
    for s_idx, subject in enumerate(sorted(mixing)):
        for session in range(config.n_sessions):
            for sid, text in sentences.items():
                pair_rng = np.random.default_rng([config.seed, 3, s_idx, session, int(sid[1:])])
                data = simulate_brain(audio[sid], mixing[subject], config, pair_rng)
                meta = SamplePairMeta(f"{subject}_ses{session}_{sid}", subject, f"ses{session}", sid)
                brain = RawSignal(data, config.brain_rate, subject, meta.session_id)
                corpus.pairs.append(SamplePair(meta, text, audio[sid], config.audio_rate, brain))
    logger.info(f"Generated {len(corpus.pairs)} pairs: {config.n_subjects} subjects, "
                f"{config.n_sessions} sessions, {len(sentences)} sentences, vocab {len(words)}")
    return corpus


def noise_like(pair: SamplePair, rng) -> SamplePair:
    """Same pair with the brain signal replaced by standard normal noise."""
    noise = rng.standard_normal(pair.brain.data.shape)
    return replace(pair, brain=pair.brain.with_data(noise))


def write_corpus(corpus: SynthCorpus, directory):
    """WAV per sentence, BSIG per pair, and a tab-separated manifest."""
    directory = Path(directory)
    rows = []
    written = set()
    for pair in corpus.pairs:
        audio_rel = f"audio/{pair.meta.sentence_id}.wav"
        brain_rel = f"brain/{pair.pair_id}.bsig"
        if audio_rel not in written:
            signal_io.write_wav(directory / audio_rel, pair.audio, pair.audio_rate)
            written.add(audio_rel)
        signal_io.write_bsig(directory / brain_rel, pair.brain.data, pair.brain.sample_rate_hz)
        m = pair.meta
        rows.append([m.pair_id, m.subject_id, m.session_id, m.sentence_id, pair.text, audio_rel, brain_rel])
    lines = ['\t'.join(MANIFEST_FIELDS)] + ['\t'.join(row) for row in rows]
    (directory / MANIFEST_NAME).write_text('\n'.join(lines) + '\n', encoding='utf-8')
    logger.info(f"Wrote {len(rows)} pairs to {directory}")
    return directory / MANIFEST_NAME


def read_manifest(directory):
    path = Path(directory) / MANIFEST_NAME
    if not path.exists():
        raise CorpusError(f"no corpus manifest at {path}")
    lines = path.read_text(encoding='utf-8').splitlines()
    if not lines or lines[0].split('\t') != MANIFEST_FIELDS:
        raise CorpusError(f"{path}: unexpected header")
    records = [dict(zip(MANIFEST_FIELDS, line.split('\t'))) for line in lines[1:] if line]
    if not records:
        raise CorpusError(f"{path}: corpus is empty")
    return records


def load_corpus(directory):
    """SamplePairs read back from a written corpus directory."""
    directory = Path(directory)
    pairs = []
    audio_cache = {}
    for rec in read_manifest(directory):
        if rec['audio'] not in audio_cache:
            audio_cache[rec['audio']] = signal_io.read_wav(directory / rec['audio'])
        audio, rate = audio_cache[rec['audio']]
        data, brain_rate = signal_io.read_bsig(directory / rec['brain'])
        meta = SamplePairMeta(rec['pair_id'], rec['subject'], rec['session'], rec['sentence_id'])
        brain = RawSignal(data, brain_rate, rec['subject'], rec['session'])
        pairs.append(SamplePair(meta, rec['text'], audio, rate, brain))
    return pairs


# ---------------------------------------------------------------------------
# Solvability gate
# ---------------------------------------------------------------------------

def _power_features(brain, rate, window_seconds=0.1):
    size = max(1, int(round(window_seconds * rate)))
    return uniform_filter1d(np.asarray(brain, dtype=np.float64) ** 2, size=size, axis=-1)


def ridge_solvability(pairs, config: SynthConfig, ridge=1e-2, holdout=0.25, seed=0):
    """Held-out Pearson r of a ridge map from smoothed brain power to squared Mel-band envelopes.

    Fitted per subject, since mixing differs across subjects; returns the mean r.
    """
    by_subject = {}
    for pair in pairs:
        by_subject.setdefault(pair.meta.subject_id, []).append(pair)
    rng = np.random.default_rng(seed)
    scores = []
    for subject in sorted(by_subject):
        items = by_subject[subject]
        if len(items) < 4:
            continue
        order = rng.permutation(len(items))
        n_test = max(1, int(len(items) * holdout))
        feats, targets = [], []
        for pair in items:
            x = _power_features(pair.brain.data, pair.brain.sample_rate_hz)
            y = _power_features(band_envelopes(pair.audio, config), config.brain_rate)
            n = min(x.shape[1], y.shape[1])
            feats.append(x[:, :n].T)
            targets.append(y[:, :n].T)
        test_idx, train_idx = order[:n_test], order[n_test:]
        X = np.concatenate([feats[i] for i in train_idx])
        Y = np.concatenate([targets[i] for i in train_idx])
        X1 = np.hstack([X, np.ones((X.shape[0], 1))])
        W = np.linalg.solve(X1.T @ X1 + ridge * np.eye(X1.shape[1]), X1.T @ Y)
        Xt = np.concatenate([feats[i] for i in test_idx])
        Yt = np.concatenate([targets[i] for i in test_idx])
        pred = np.hstack([Xt, np.ones((Xt.shape[0], 1))]) @ W
        scores.append(float(np.corrcoef(pred.ravel(), Yt.ravel())[0, 1]))
    if not scores:
        raise ContractViolation("ridge solvability needs at least four pairs for some subject")
    return float(np.mean(scores))


def envelope_correlation(pair: SamplePair, mixing, config: SynthConfig):
    """Per-band correlation between the unmixed brain amplitude and its audio envelope.

    Each unmixed source is demodulated against its own carrier (in-phase and
    quadrature products, low-passed); the envelope goes through the same
    low-pass so filter edges affect both sides alike. Bands whose envelope
    varies by less than 0.1% of its level (never excited) give NaN.
    """
    sources = mixing.T @ pair.brain.data
    env = band_envelopes(pair.audio, config)
    n = min(sources.shape[1], env.shape[1])
    t = np.arange(n) / config.brain_rate
    phase = 2 * np.pi * carrier_frequencies(config)[:, None] * t
    sos = signal.butter(4, 2 * ENVELOPE_CUTOFF_HZ, btype='lowpass', fs=config.brain_rate, output='sos')
    in_phase = signal.sosfiltfilt(sos, sources[:, :n] * np.sin(phase), axis=-1)
    quadrature = signal.sosfiltfilt(sos, sources[:, :n] * np.cos(phase), axis=-1)
    amplitude = 2.0 * np.hypot(in_phase, quadrature)
    reference = signal.sosfiltfilt(sos, env[:, :n], axis=-1)
    out = np.full(env.shape[0], np.nan)
    for k in range(env.shape[0]):
        a, e = amplitude[k], reference[k]
        if e.std() > 1e-3 * max(abs(e.mean()), 1e-6):
            out[k] = np.corrcoef(a, e)[0, 1]
    return out
