#!/usr/bin/env python3
"""
Test BLEU, ROUGE-1 and WER against hand-computed values and brute-force counts
"""
import math
from collections import Counter

import numpy as np
import pytest

from errors import ContractViolation
from text_metrics import (EvalPair, bleu_n, metric_report, normalize, read_metrics_csv, read_transcripts, rouge1,
                          wer, write_metrics_csv, write_transcripts)


def pair(ref, hyp):
    return EvalPair.from_text(ref, hyp)


def ngrams(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def oracle_bleu(pairs, n_max):
    matched, total = [0] * n_max, [0] * n_max
    ref_len = hyp_len = 0
    for p in pairs:
        ref_len += len(p.reference)
        hyp_len += len(p.hypothesis)
        for n in range(1, n_max + 1):
            hyp_counts, ref_counts = ngrams(p.hypothesis, n), ngrams(p.reference, n)
            matched[n - 1] += sum(min(c, ref_counts[g]) for g, c in hyp_counts.items())
            total[n - 1] += sum(hyp_counts.values())
    if min(matched) == 0:
        return 0.0
    log_precision = sum(math.log(m / t) for m, t in zip(matched, total)) / n_max
    bp = 1.0 if hyp_len >= ref_len else math.exp(1 - ref_len / hyp_len)
    return 100.0 * bp * math.exp(log_precision)


def oracle_rouge1(pairs):
    p_sum = r_sum = f_sum = 0.0
    for p in pairs:
        overlap = sum((Counter(p.reference) & Counter(p.hypothesis)).values())
        precision = overlap / len(p.hypothesis) if p.hypothesis else 0.0
        recall = overlap / len(p.reference)
        p_sum += precision
        r_sum += recall
        f_sum += 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    n = len(pairs)
    return 100 * p_sum / n, 100 * r_sum / n, 100 * f_sum / n


def edit_distance(a, b):
    row = list(range(len(b) + 1))
    for i, x in enumerate(a, start=1):
        prev, row[0] = row[0], i
        for j, y in enumerate(b, start=1):
            prev, row[j] = row[j], min(row[j] + 1, row[j - 1] + 1, prev + (x != y))
    return row[-1]


def fixture_pairs():
    rng = np.random.default_rng(20)
    words = ['the', 'cat', 'sat', 'on', 'a', 'mat', 'dog', 'ran']
    pairs = []
    for i in range(20):
        ref = list(rng.choice(words, size=int(rng.integers(4, 9))))
        hyp = [w if rng.random() < 0.7 else str(rng.choice(words)) for w in ref]
        if rng.random() < 0.3:
            hyp = hyp[:-1]
        pairs.append(EvalPair(tuple(ref), tuple(hyp), f"p{i}"))
    return pairs


def test_normalization():
    assert normalize("The Cat, sat!") == ['the', 'cat', 'sat']
    text = ' '.join(normalize("Hello,  World."))
    assert normalize(text) == ['hello', 'world']


def test_identical_pairs():
    pairs = [pair('the cat sat on the mat', 'The cat sat on the mat.'), pair('a dog ran off', 'a dog ran off')]
    report = metric_report(pairs)
    for n in range(1, 5):
        assert report[f"bleu{n}"] == pytest.approx(100.0)
    assert (report['rouge1_p'], report['rouge1_r'], report['rouge1_f']) == pytest.approx((100.0, 100.0, 100.0))
    assert report['wer'] == 0.0


def test_bleu_examples():
    assert bleu_n([pair('a b c d', 'a b c')], 1) == pytest.approx(100 * math.exp(1 - 4 / 3), abs=1e-6)
    assert bleu_n([pair('a b c d', 'a b c')], 1) == pytest.approx(71.65, abs=0.01)
    assert bleu_n([pair('the cat', 'the the the')], 1) == pytest.approx(100 / 3, abs=1e-6)
    # no smoothing: a missing 4-gram zeroes BLEU-4 but not BLEU-1
    shuffled = [pair('a b c d e', 'e d c b a')]
    assert bleu_n(shuffled, 4) == 0.0
    assert bleu_n(shuffled, 1) == pytest.approx(100.0)


def test_bleu_matches_oracle():
    pairs = fixture_pairs()
    for n in range(1, 5):
        assert bleu_n(pairs, n) == pytest.approx(oracle_bleu(pairs, n), abs=1e-9)


def test_bleu_empty_and_invalid():
    assert bleu_n([pair('a b', '')], 1) == 0.0
    with pytest.raises(ContractViolation):
        bleu_n([], 1)
    with pytest.raises(ContractViolation):
        bleu_n([pair('a', 'a')], 5)
    with pytest.raises(ContractViolation):
        bleu_n([pair('a', 'a')], 1, mode='document')


def test_rouge_examples():
    assert rouge1([pair('the cat sat', 'the cat')]) == pytest.approx((100.0, 200 / 3, 80.0))
    assert rouge1([pair('a b c', 'x y z')]) == (0.0, 0.0, 0.0)
    pairs = fixture_pairs()
    assert rouge1(pairs) == pytest.approx(oracle_rouge1(pairs), abs=1e-9)


def test_wer_examples():
    assert wer([pair('a b c', 'a x c')]) == pytest.approx(100 / 3)
    assert wer([pair('a b', 'a b c d e f')]) == pytest.approx(200.0)
    pairs = fixture_pairs()
    expected = 100.0 * sum(edit_distance(p.reference, p.hypothesis) for p in pairs) / sum(len(p.reference)
                                                                                          for p in pairs)
    assert wer(pairs) == pytest.approx(expected, abs=1e-9)
    with pytest.raises(ContractViolation):
        wer([pair('', 'a')])


def test_asymmetry_and_order_invariance():
    forward = [pair('a b c d', 'a b')]
    backward = [pair('a b', 'a b c d')]
    assert wer(forward) == pytest.approx(50.0)
    assert wer(backward) == pytest.approx(100.0)
    assert bleu_n(forward, 1) != bleu_n(backward, 1)

    pairs = fixture_pairs()
    assert metric_report(pairs) == pytest.approx(metric_report(list(reversed(pairs))))


def test_transcript_and_metric_files(tmp_path):
    rows = [('p1', 'the cat', 'the cat sat'), ('p2', 'a dog', 'a dog')]
    write_transcripts(tmp_path / 'transcripts.tsv', rows)
    pairs = read_transcripts(tmp_path / 'transcripts.tsv')
    assert [p.pair_id for p in pairs] == ['p1', 'p2']
    assert pairs[0].reference == ('the', 'cat', 'sat')

    report = metric_report(pairs)
    report['mode'] = 'brain'
    write_metrics_csv(tmp_path / 'metrics.csv', report)
    loaded = read_metrics_csv(tmp_path / 'metrics.csv')
    assert loaded['mode'] == 'brain'
    assert loaded['rouge1_p'] == pytest.approx(report['rouge1_p'], abs=1e-6)

    (tmp_path / 'bad.tsv').write_text('p1\tonly two\n', encoding='utf-8')
    with pytest.raises(ContractViolation):
        read_transcripts(tmp_path / 'bad.tsv')


if __name__ == "__main__":
    print("Testing text metrics")
    print("=" * 45)
    test_normalization()
    test_identical_pairs()
    test_bleu_examples()
    test_bleu_matches_oracle()
    test_bleu_empty_and_invalid()
    test_rouge_examples()
    test_wer_examples()
    test_asymmetry_and_order_invariance()
    print("Text metric tests complete!")
