"""Seeded train/valid/test partitioning of sample pairs and leakage checks.

Held-out counts always use floor; the remainder goes to train.
"""
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from errors import ConfigurationError, ContractViolation, LeakageError

logger = logging.getLogger(__name__)

STRATEGIES = ('random_shuffle', 'sentence', 'session', 'subject')
SPLITS = ('train', 'valid', 'test')


@dataclass(frozen=True)
class SamplePairMeta:
    pair_id: str
    subject_id: str
    session_id: str
    sentence_id: str


@dataclass
class SplitParams:
    test_subjects: int = 3
    valid_subjects: int = 3
    test_sentence_fraction: float = 0.10
    # default: the last session id in sorted order
    test_session: str = ''


@dataclass
class SplitManifest:
    strategy: str
    seed: int
    params: dict = field(default_factory=dict)
    train: tuple = ()
    valid: tuple = ()
    test: tuple = ()

    def sizes(self):
        return len(self.train), len(self.valid), len(self.test)

    def split_of(self):
        return {pid: name for name in SPLITS for pid in getattr(self, name)}


@dataclass
class LeakageReport:
    pairs_checked: int
    sentence_overlap: dict
    subject_overlap: dict

    @property
    def has_sentence_overlap(self):
        return any(self.sentence_overlap.values())


def _check_pairs(pairs):
    if not pairs:
        raise ContractViolation("cannot split an empty set of pairs")
    ids = [p.pair_id for p in pairs]
    if len(set(ids)) != len(ids):
        raise ContractViolation("pair ids must be unique")
    keys = [(p.subject_id, p.session_id, p.sentence_id) for p in pairs]
    if len(set(keys)) != len(keys):
        raise ContractViolation("(subject, session, sentence) must identify at most one pair")


def _train_valid(pair_ids, rng, valid_share=9):
    """Shuffle and cut floor(n / valid_share) off as validation (8:1 for the default)."""
    shuffled = [pair_ids[i] for i in rng.permutation(len(pair_ids))]
    n_valid = len(shuffled) // valid_share
    return shuffled[n_valid:], shuffled[:n_valid]


def split(pairs, strategy, seed=0, params: SplitParams = None) -> SplitManifest:
    pairs = sorted(pairs, key=lambda p: p.pair_id)
    _check_pairs(pairs)
    params = params or SplitParams()
    rng = np.random.default_rng(seed)
    ids = [p.pair_id for p in pairs]

    if strategy == 'random_shuffle':
        shuffled = [ids[i] for i in rng.permutation(len(ids))]
        n_hold = len(ids) // 10
        test, valid, train = shuffled[:n_hold], shuffled[n_hold:2 * n_hold], shuffled[2 * n_hold:]
    elif strategy == 'sentence':
        by_subject = defaultdict(list)
        for p in pairs:
            by_subject[p.subject_id].append(p)
        test_ids = set()
        for subject in sorted(by_subject):
            sentences = sorted({p.sentence_id for p in by_subject[subject]})
            k = math.floor(params.test_sentence_fraction * len(sentences) + 1e-9)
            chosen = {sentences[i] for i in rng.permutation(len(sentences))[:k]}
            test_ids.update(p.pair_id for p in by_subject[subject] if p.sentence_id in chosen)
        test = [pid for pid in ids if pid in test_ids]
        train, valid = _train_valid([pid for pid in ids if pid not in test_ids], rng)
    elif strategy == 'session':
        sessions = sorted({p.session_id for p in pairs})
        if len(sessions) < 2:
            raise ConfigurationError(f"session split needs at least two sessions, found {sessions}")
        held = params.test_session or sessions[-1]
        if held not in sessions:
            raise ConfigurationError(f"test session '{held}' not found; sessions are {sessions}")
        test = [p.pair_id for p in pairs if p.session_id == held]
        train, valid = _train_valid([p.pair_id for p in pairs if p.session_id != held], rng)
    elif strategy == 'subject':
        subjects = sorted({p.subject_id for p in pairs})
        needed = params.test_subjects + params.valid_subjects
        if len(subjects) <= needed:
            raise ConfigurationError(
                f"subject split needs more than {needed} subjects, found {len(subjects)}")
        order = [subjects[i] for i in rng.permutation(len(subjects))]
        test_subj = set(order[:params.test_subjects])
        valid_subj = set(order[params.test_subjects:needed])
        test = [p.pair_id for p in pairs if p.subject_id in test_subj]
        valid = [p.pair_id for p in pairs if p.subject_id in valid_subj]
        train = [p.pair_id for p in pairs if p.subject_id not in test_subj | valid_subj]
    else:
        raise ConfigurationError(f"unknown split strategy '{strategy}', expected one of {STRATEGIES}")

    manifest = SplitManifest(strategy, int(seed), dict(vars(params)),
                             tuple(sorted(train)), tuple(sorted(valid)), tuple(sorted(test)))
    logger.info(f"split {strategy} (seed {seed}): train/valid/test = {manifest.sizes()}")
    return manifest


def verify_no_leakage(manifest: SplitManifest, pairs) -> LeakageReport:
    """Fails on any pair in two splits or a coverage mismatch; sentence and subject overlap are only reported."""
    seen = {}
    for name in SPLITS:
        for pid in getattr(manifest, name):
            if pid in seen:
                raise LeakageError(f"pair '{pid}' appears in both {seen[pid]} and {name}")
            seen[pid] = name
    expected = {p.pair_id for p in pairs}
    if set(seen) != expected:
        missing = sorted(expected - set(seen))[:5]
        extra = sorted(set(seen) - expected)[:5]
        raise LeakageError(f"manifest does not cover the pairs exactly (missing {missing}, unknown {extra})")

    by_id = {p.pair_id: p for p in pairs}
    sentences = {name: {by_id[pid].sentence_id for pid in getattr(manifest, name)} for name in SPLITS}
    subjects = {name: {by_id[pid].subject_id for pid in getattr(manifest, name)} for name in SPLITS}
    sentence_overlap, subject_overlap = {}, {}
    for a, b in (('train', 'valid'), ('train', 'test'), ('valid', 'test')):
        sentence_overlap[f"{a}-{b}"] = len(sentences[a] & sentences[b])
        subject_overlap[f"{a}-{b}"] = len(subjects[a] & subjects[b])
    report = LeakageReport(len(seen), sentence_overlap, subject_overlap)
    if report.has_sentence_overlap:
        logger.info(f"sentence overlap across splits (allowed, different signals): {sentence_overlap}")
    return report


def save_manifest(path, manifest: SplitManifest):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = [f"strategy={manifest.strategy}", f"seed={manifest.seed}"]
    header += [f"{k}={v}" for k, v in sorted(manifest.params.items())]
    lines = ['# ' + ' '.join(header)]
    for name in SPLITS:
        lines.extend(f"{pid}\t{name}" for pid in getattr(manifest, name))
    path.write_text('\n'.join(lines) + '\n', encoding='utf-8')


def load_manifest(path) -> SplitManifest:
    lines = Path(path).read_text(encoding='utf-8').splitlines()
    if not lines or not lines[0].startswith('# '):
        raise ContractViolation(f"{path}: missing manifest header")
    fields = dict(item.split('=', 1) for item in lines[0][2:].split())
    strategy, seed = fields.pop('strategy'), int(fields.pop('seed'))
    params = {}
    for key, value in fields.items():
        default = getattr(SplitParams(), key, value)
        params[key] = type(default)(value) if not isinstance(default, str) else value
    members = {name: [] for name in SPLITS}
    for line in lines[1:]:
        if not line:
            continue
        pid, name = line.split('\t')
        if name not in members:
            raise ContractViolation(f"{path}: unknown split '{name}'")
        members[name].append(pid)
    return SplitManifest(strategy, seed, params, *(tuple(members[name]) for name in SPLITS))
