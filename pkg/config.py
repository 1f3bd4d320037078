"""Run configuration: defaults, presets, key=value files, .env and environment overrides.

Precedence, lowest first: built-in defaults, named preset, --config file,
.env file, NEUROTEXT__SECTION__KEY environment variables, CLI flags.
"""
import logging
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

from dotenv import dotenv_values

from brain_encoder import BrainEncoderConfig
from dsp_frontend import PROFILES, FilterSpec, SignalProfile
from errors import ConfigurationError
from spectro_autoencoder import AutoencoderConfig
from synth_corpus import SynthConfig
from training import TrainConfig
from transcriber import DecodeConfig, TranscriberConfig
from validators import ConfigValidator

logger = logging.getLogger(__name__)

ENV_PREFIX = 'NEUROTEXT__'


@dataclass
class CorpusSection:
    dir: str = 'corpus'
    vocab_size: int = 60
    n_sentences: int = 40
    sentence_min: int = 3
    sentence_max: int = 8
    n_subjects: int = 6
    n_sessions: int = 2
    brain_channels: int = 16
    snr_db: float = 10.0
    # 0 keeps the profile's segment length (12 s EEG, 24 s MEG)
    segment_seconds: float = 0.0
    synth_seed: int = 7


@dataclass
class SplitSection:
    strategy: str = 'random_shuffle'
    seed: int = 0
    test_subjects: int = 3
    valid_subjects: int = 3
    test_sentence_fraction: float = 0.1
    test_session: str = ''


@dataclass
class AutoencoderSection:
    downsample_ratio: int = 4
    latent_dim: int = 8
    codebook_size: int = 2048
    base_channels: int = 32
    blocks_per_level: int = 2
    alpha: float = 0.5
    beta1: float = 0.1


@dataclass
class BrainSection:
    hidden: int = 256
    transformer_layers: int = 4
    heads: int = 8
    ts_channels1: int = 64
    ts_channels2: int = 128
    gamma: float = 1.0
    beta2: float = 0.1


@dataclass
class TranscriberSection:
    dim: int = 128
    heads: int = 4
    encoder_layers: int = 2
    decoder_layers: int = 2
    max_len: int = 32
    encoder_pool: int = 1


@dataclass
class DecodeSection:
    num_beams: int = 5
    repetition_penalty: float = 5.0
    no_repeat_ngram_size: int = 2
    max_len: int = 32
    bleu_mode: str = 'corpus'


@dataclass
class AblationSection:
    skip_autoencoding: bool = False
    skip_alignment: bool = False
    skip_finetune: bool = False
    disable_quantizer: bool = False


@dataclass
class CacheSection:
    type: str = 'disk'
    ttl: int = 86400


def _train(batch_size, max_epochs, max_lr):
    return field(default_factory=lambda: TrainConfig(batch_size=batch_size, max_epochs=max_epochs, max_lr=max_lr))


@dataclass
class RunConfig:
    seed: int = 0
    profile: str = 'eeg'
    corpus: CorpusSection = field(default_factory=CorpusSection)
    split: SplitSection = field(default_factory=SplitSection)
    stage1: TrainConfig = _train(16, 400, 2e-4)
    stage2: TrainConfig = _train(16, 40, 1e-4)
    pretrain: TrainConfig = _train(16, 100, 1e-3)
    stage3: TrainConfig = _train(16, 40, 1e-4)
    autoencoder: AutoencoderSection = field(default_factory=AutoencoderSection)
    brain: BrainSection = field(default_factory=BrainSection)
    transcriber: TranscriberSection = field(default_factory=TranscriberSection)
    decode: DecodeSection = field(default_factory=DecodeSection)
    ablation: AblationSection = field(default_factory=AblationSection)
    cache: CacheSection = field(default_factory=CacheSection)

    # -- key access ----------------------------------------------------------
    def sections(self):
        return [f.name for f in fields(self) if not isinstance(getattr(self, f.name), (int, float, str))]

    def valid_keys(self, section=None):
        if section is None:
            top = [f.name for f in fields(self) if f.name not in self.sections()]
            return top + [f"{s}.{f.name}" for s in self.sections() for f in fields(getattr(self, s))]
        return [f"{section}.{f.name}" for f in fields(getattr(self, section))]

    def get(self, key):
        section, _, name = key.rpartition('.')
        owner = getattr(self, section) if section else self
        return getattr(owner, name)

    def set(self, key, raw, validator=None):
        validator = validator or ConfigValidator()
        key, error = validator.validate_key(key)
        if error:
            raise ConfigurationError(error)
        section, _, name = key.rpartition('.')
        if section:
            if section not in self.sections():
                raise ConfigurationError(f"unknown config section '{section}'; valid sections: {self.sections()}")
            owner = getattr(self, section)
        else:
            owner = self
        known = {f.name for f in fields(owner)}
        if name not in known or (not section and name in self.sections()):
            valid = self.valid_keys(section) if section else self.valid_keys()
            raise ConfigurationError(f"unknown config key '{key}'; valid keys: {', '.join(valid)}")
        value, error = validator.validate(raw, getattr(owner, name))
        if error:
            raise ConfigurationError(f"{key}: {error}")
        setattr(owner, name, value)

    def update(self, values, source=''):
        for key, raw in values.items():
            self.set(key, raw)
            if source:
                logger.debug(f"config {key}={raw} from {source}")
        return self

    def to_lines(self):
        return [f"{key} = {self.get(key)}" for key in self.valid_keys()]

    # -- derived component configs ------------------------------------------
    def signal_profile(self) -> SignalProfile:
        if self.profile not in PROFILES:
            raise ConfigurationError(f"unknown profile '{self.profile}'; valid profiles: {sorted(PROFILES)}")
        base = PROFILES[self.profile]
        seconds = self.corpus.segment_seconds or base.max_audio_seconds
        if seconds > base.max_audio_seconds:
            raise ConfigurationError(
                f"segment of {seconds} s exceeds the {base.max_audio_seconds} s limit of the {base.name} profile")
        brain_len = int(round(seconds * base.filters.target_rate_hz))
        mel_frames = int(round(seconds * 100)) // base.mel_downsample
        return SignalProfile(base.name, base.filters, seconds, base.mel_downsample, brain_len, mel_frames)

    def filter_spec(self) -> FilterSpec:
        return self.signal_profile().filters

    def synth_config(self) -> SynthConfig:
        c = self.corpus
        profile = self.signal_profile()
        return SynthConfig(vocab_size=c.vocab_size, n_sentences=c.n_sentences,
                           sentence_len=(c.sentence_min, c.sentence_max), n_subjects=c.n_subjects,
                           n_sessions=c.n_sessions, brain_channels=c.brain_channels,
                           brain_rate=profile.filters.target_rate_hz, snr_db=c.snr_db,
                           max_seconds=profile.max_audio_seconds, seed=c.synth_seed)

    def autoencoder_config(self) -> AutoencoderConfig:
        a = self.autoencoder
        return AutoencoderConfig(a.downsample_ratio, a.latent_dim, a.codebook_size, a.base_channels,
                                 a.blocks_per_level, a.alpha, a.beta1,
                                 disable_quantizer=self.ablation.disable_quantizer)

    def brain_config(self) -> BrainEncoderConfig:
        b = self.brain
        profile = self.signal_profile()
        ae = self.autoencoder_config()
        t_m, f_m, d = ae.grid_shape(profile.mel_frames)
        return BrainEncoderConfig(in_channels=self.corpus.brain_channels, time_len=profile.brain_len,
                                  hidden=b.hidden, transformer_layers=b.transformer_layers, heads=b.heads,
                                  ts_channels=(b.ts_channels1, b.ts_channels2), grid_time=t_m, grid_freq=f_m,
                                  latent_dim=d, gamma=b.gamma, beta2=b.beta2)

    def transcriber_config(self) -> TranscriberConfig:
        t = self.transcriber
        return TranscriberConfig(dim=t.dim, heads=t.heads, encoder_layers=t.encoder_layers,
                                 decoder_layers=t.decoder_layers, max_len=t.max_len, encoder_pool=t.encoder_pool)

    def decode_config(self, teacher_forcing=False) -> DecodeConfig:
        d = self.decode
        return DecodeConfig(num_beams=d.num_beams, repetition_penalty=d.repetition_penalty,
                            no_repeat_ngram_size=d.no_repeat_ngram_size, max_len=d.max_len,
                            teacher_forcing=teacher_forcing)

    def validate(self):
        """Cross-field checks; building every component config runs their own invariants."""
        validator = ConfigValidator()
        for value, name, choices in ((self.split.strategy, 'split.strategy',
                                      {'random_shuffle', 'sentence', 'session', 'subject'}),
                                     (self.decode.bleu_mode, 'decode.bleu_mode', {'corpus', 'sentence'}),
                                     (self.cache.type, 'cache.type', {'memory', 'disk'}),
                                     (self.profile, 'profile', set(PROFILES))):
            _, error = validator.validate_choice(value, choices, name)
            if error:
                raise ConfigurationError(error)
        for section in ('stage1', 'stage2', 'pretrain', 'stage3'):
            cfg = getattr(self, section)
            for name in ('batch_size', 'max_epochs', 'max_lr', 'patience'):
                _, error = validator.validate_positive(getattr(cfg, name), f"{section}.{name}")
                if error:
                    raise ConfigurationError(error)
        self.synth_config()
        self.brain_config()
        self.transcriber_config()
        self.decode_config()
        return self


# MEG recording profile and a laptop-scale acceptance setup
PRESETS = {
    'brennan': {},
    'gwilliams': {
        'profile': 'meg',
        'corpus.brain_channels': 16,
        'stage1.max_epochs': 100,
        'stage2.batch_size': 8,
        'stage3.max_lr': 2e-4,
    },
    'desk': {
        'corpus.segment_seconds': 4.0,
        'autoencoder.codebook_size': 256,
        'autoencoder.base_channels': 8,
        'autoencoder.blocks_per_level': 1,
        'brain.hidden': 64,
        'brain.transformer_layers': 2,
        'brain.heads': 4,
        'brain.ts_channels1': 16,
        'brain.ts_channels2': 32,
        'transcriber.encoder_pool': 10,
        'stage1.max_epochs': 30,
        'stage1.max_lr': 1e-3,
        'stage2.max_epochs': 40,
        'stage2.max_lr': 1e-3,
        'pretrain.max_epochs': 60,
        'pretrain.patience': 8,
        'stage3.max_epochs': 30,
        'stage3.max_lr': 5e-4,
    },
}


def parse_config_file(path):
    """`section.key = value` lines; blank lines and # comments are ignored."""
    values = {}
    for number, line in enumerate(Path(path).read_text(encoding='utf-8').splitlines(), start=1):
        line = line.split('#', 1)[0].strip()
        if not line:
            continue
        if '=' not in line:
            raise ConfigurationError(f"{path}:{number}: expected 'key = value', got '{line}'")
        key, value = line.split('=', 1)
        values[key.strip()] = value.strip()
    return values


def environment_overrides(environ):
    """NEUROTEXT__SECTION__KEY=value -> {'section.key': value} (NEUROTEXT__SEED -> 'seed')."""
    values = {}
    for name, value in environ.items():
        if not name.startswith(ENV_PREFIX) or value is None:
            continue
        values[name[len(ENV_PREFIX):].lower().replace('__', '.')] = value
    return values


def load_config(preset=None, config_file=None, env_file='.env', environ=None, overrides=None) -> RunConfig:
    cfg = RunConfig()
    if preset:
        if preset not in PRESETS:
            raise ConfigurationError(f"unknown preset '{preset}'; valid presets: {sorted(PRESETS)}")
        cfg.update(PRESETS[preset], source=f"preset {preset}")
    if config_file:
        if not Path(config_file).exists():
            raise ConfigurationError(f"config file not found: {config_file}")
        cfg.update(parse_config_file(config_file), source=str(config_file))
    if env_file and Path(env_file).exists():
        cfg.update(environment_overrides(dotenv_values(env_file)), source=str(env_file))
    cfg.update(environment_overrides(os.environ if environ is None else environ), source='environment')
    if overrides:
        cfg.update({k: v for k, v in overrides.items() if v is not None}, source='command line')
    if cfg.ablation.skip_alignment:
        cfg.ablation.skip_autoencoding = True
    return cfg.validate()


def write_resolved(cfg: RunConfig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text('\n'.join(cfg.to_lines()) + '\n', encoding='utf-8')
