#!/usr/bin/env python3
"""
Test the split strategies, their sizes and the leakage checks
"""
import pytest

from corpus_splitter import (SamplePairMeta, SplitManifest, SplitParams, load_manifest, save_manifest, split,
                             verify_no_leakage)
from errors import ConfigurationError, ContractViolation, LeakageError


def grid_pairs(subjects, sentences, sessions=1):
    return [SamplePairMeta(f"s{s:02d}_{e}_{t:03d}", f"s{s:02d}", f"ses{e}", f"t{t:03d}")
            for s in range(subjects) for e in range(sessions) for t in range(sentences)]


def test_subject_split_sizes():
    pairs = grid_pairs(33, 140)
    manifest = split(pairs, 'subject', seed=1, params=SplitParams(test_subjects=3, valid_subjects=3))
    assert manifest.sizes() == (3780, 420, 420)
    report = verify_no_leakage(manifest, pairs)
    assert set(report.subject_overlap.values()) == {0}

    small = split(grid_pairs(10, 10), 'subject', seed=0, params=SplitParams(test_subjects=1, valid_subjects=1))
    assert small.sizes() == (80, 10, 10)


def test_sentence_split_sizes_and_overlap():
    pairs = grid_pairs(33, 140)
    manifest = split(pairs, 'sentence', seed=1)
    assert manifest.sizes() == (3696, 462, 462)
    report = verify_no_leakage(manifest, pairs)
    # the same sentence read by other subjects stays in train
    assert report.has_sentence_overlap
    assert report.sentence_overlap['train-test'] > 0


def test_random_shuffle_ratio():
    pairs = grid_pairs(7, 13)
    manifest = split(pairs, 'random_shuffle', seed=3)
    train, valid, test = manifest.sizes()
    assert valid == test == len(pairs) // 10
    assert train + valid + test == len(pairs)


def test_session_split():
    pairs = grid_pairs(4, 10, sessions=2)
    by_id = {p.pair_id: p for p in pairs}
    manifest = split(pairs, 'session', seed=0)
    assert {by_id[pid].session_id for pid in manifest.test} == {'ses1'}
    assert manifest.sizes() == (36, 4, 40)
    chosen = split(pairs, 'session', seed=0, params=SplitParams(test_session='ses0'))
    assert {by_id[pid].session_id for pid in chosen.test} == {'ses0'}
    with pytest.raises(ConfigurationError):
        split(pairs, 'session', params=SplitParams(test_session='ses9'))
    with pytest.raises(ConfigurationError):
        split(grid_pairs(4, 10), 'session')


def test_configuration_errors():
    with pytest.raises(ConfigurationError):
        split(grid_pairs(6, 5), 'subject', params=SplitParams(test_subjects=3, valid_subjects=3))
    with pytest.raises(ConfigurationError):
        split(grid_pairs(6, 5), 'by_length')
    with pytest.raises(ContractViolation):
        split([], 'subject')
    duplicated = grid_pairs(2, 2) + [grid_pairs(2, 2)[0]]
    with pytest.raises(ContractViolation):
        split(duplicated, 'random_shuffle')


def test_coverage_for_every_strategy():
    pairs = grid_pairs(8, 20, sessions=2)
    for strategy in ('random_shuffle', 'sentence', 'session', 'subject'):
        manifest = split(pairs, strategy, seed=5)
        assert sum(manifest.sizes()) == len(pairs)
        assert verify_no_leakage(manifest, pairs).pairs_checked == len(pairs)


def test_leakage_detection():
    pairs = grid_pairs(2, 3)
    ids = sorted(p.pair_id for p in pairs)
    leaky = SplitManifest('subject', 0, {}, tuple(ids[:4]), (ids[3],), tuple(ids[4:]))
    with pytest.raises(LeakageError):
        verify_no_leakage(leaky, pairs)
    missing = SplitManifest('subject', 0, {}, tuple(ids[:4]), (), tuple(ids[4:5]))
    with pytest.raises(LeakageError):
        verify_no_leakage(missing, pairs)


def test_manifest_is_deterministic_and_reloadable(tmp_path):
    pairs = grid_pairs(6, 12, sessions=2)
    first, second = tmp_path / 'a.tsv', tmp_path / 'b.tsv'
    save_manifest(first, split(pairs, 'sentence', seed=11))
    save_manifest(second, split(list(reversed(pairs)), 'sentence', seed=11))
    assert first.read_bytes() == second.read_bytes()

    loaded = load_manifest(first)
    assert loaded == split(pairs, 'sentence', seed=11)
    verify_no_leakage(loaded, pairs)

    other = tmp_path / 'c.tsv'
    save_manifest(other, split(pairs, 'sentence', seed=12))
    assert other.read_bytes() != first.read_bytes()

    (tmp_path / 'bad.tsv').write_text('s00_0_000\ttrain\n', encoding='utf-8')
    with pytest.raises(ContractViolation):
        load_manifest(tmp_path / 'bad.tsv')


if __name__ == "__main__":
    print("Testing corpus splitter")
    print("=" * 45)
    test_subject_split_sizes()
    test_sentence_split_sizes_and_overlap()
    test_random_shuffle_ratio()
    test_session_split()
    test_configuration_errors()
    test_coverage_for_every_strategy()
    test_leakage_detection()
    print("Splitter tests complete!")
