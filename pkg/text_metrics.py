"""BLEU-N, ROUGE-1 and WER over normalized word sequences.

Both sides are lowercased, stripped of punctuation and split on whitespace
before scoring. BLEU is corpus-level without smoothing by default, so a
single zero n-gram precision gives 0.
"""
import csv
import logging
import re
from dataclasses import dataclass
from pathlib import Path

import jiwer
from rouge_score import rouge_scorer
from sacrebleu.metrics import BLEU

from errors import ContractViolation

logger = logging.getLogger(__name__)

_PUNCT = re.compile(r"[^\w\s]", re.UNICODE)


def normalize(text):
    """Lowercase, drop punctuation, collapse whitespace; returns the token list."""
    return _PUNCT.sub('', text.lower()).split()


@dataclass(frozen=True)
class EvalPair:
    reference: tuple
    hypothesis: tuple
    pair_id: str = ''

    @classmethod
    def from_text(cls, reference, hypothesis, pair_id=''):
        return cls(tuple(normalize(reference)), tuple(normalize(hypothesis)), pair_id)


def _joined(pairs):
    refs = [' '.join(p.reference) for p in pairs]
    hyps = [' '.join(p.hypothesis) for p in pairs]
    return refs, hyps


def _bleu_scorer(n_max):
    if not 1 <= n_max <= 4:
        raise ContractViolation(f"BLEU order must be in 1..4, got {n_max}")
    return BLEU(max_ngram_order=n_max, smooth_method='none', tokenize='none', lowercase=False,
                effective_order=False, force=True)


def bleu_n(pairs, n_max=4, mode='corpus'):
    """BLEU-n_max as a percentage; `mode='sentence'` macro-averages per-pair scores."""
    pairs = list(pairs)
    if not pairs:
        raise ContractViolation("BLEU needs at least one pair")
    if not any(p.hypothesis for p in pairs):
        logger.warning("all hypotheses are empty, BLEU is 0")
        return 0.0
    scorer = _bleu_scorer(n_max)
    refs, hyps = _joined(pairs)
    if mode == 'corpus':
        return float(scorer.corpus_score(hyps, [refs]).score)
    if mode == 'sentence':
        scores = [scorer.sentence_score(h, [r]).score if h else 0.0 for h, r in zip(hyps, refs)]
        return float(sum(scores) / len(scores))
    raise ContractViolation(f"unknown BLEU mode '{mode}'")


class _WhitespaceTokenizer:
    def tokenize(self, text):
        return text.split()


_ROUGE = rouge_scorer.RougeScorer(['rouge1'], tokenizer=_WhitespaceTokenizer())


def rouge1(pairs):
    """Macro-averaged unigram (precision, recall, F) percentages."""
    pairs = list(pairs)
    if not pairs:
        raise ContractViolation("ROUGE-1 needs at least one pair")
    p_sum = r_sum = f_sum = 0.0
    refs, hyps = _joined(pairs)
    for ref, hyp in zip(refs, hyps):
        score = _ROUGE.score(ref, hyp)['rouge1']
        p_sum += score.precision
        r_sum += score.recall
        f_sum += score.fmeasure
    n = len(pairs)
    return 100.0 * p_sum / n, 100.0 * r_sum / n, 100.0 * f_sum / n


def wer(pairs):
    """Total word edit distance over total reference words, as a percentage (can exceed 100)."""
    pairs = list(pairs)
    if not pairs:
        raise ContractViolation("WER needs at least one pair")
    if any(not p.reference for p in pairs):
        raise ContractViolation("WER is undefined for an empty reference")
    refs, hyps = _joined(pairs)
    return 100.0 * float(jiwer.wer(refs, hyps))


def metric_report(pairs, bleu_mode='corpus'):
    """Every metric in reporting order."""
    precision, recall, f = rouge1(pairs)
    report = {f"bleu{n}": bleu_n(pairs, n, mode=bleu_mode) for n in range(1, 5)}
    report.update({'rouge1_p': precision, 'rouge1_r': recall, 'rouge1_f': f, 'wer': wer(pairs)})
    return report


def write_transcripts(path, rows):
    """rows of (pair_id, hypothesis, reference) as UTF-8 tab-separated lines."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8', newline='') as f:
        for pair_id, hyp, ref in rows:
            f.write(f"{pair_id}\t{hyp}\t{ref}\n")


def read_transcripts(path):
    """EvalPairs from a transcript file (id, hypothesis, reference)."""
    pairs = []
    with open(path, encoding='utf-8') as f:
        for line in f:
            line = line.rstrip('\n')
            if not line:
                continue
            parts = line.split('\t')
            if len(parts) != 3:
                raise ContractViolation(f"{path}: malformed transcript line {line!r}")
            pair_id, hyp, ref = parts
            pairs.append(EvalPair.from_text(ref, hyp, pair_id))
    return pairs


def write_metrics_csv(path, report):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', newline='') as f:
        writer = csv.writer(f)
        writer.writerow(['metric', 'value'])
        for name, value in report.items():
            writer.writerow([name, f"{value:.6f}" if isinstance(value, float) else value])


def read_metrics_csv(path):
    report = {}
    with open(path, newline='') as f:
        for row in csv.DictReader(f):
            try:
                report[row['metric']] = float(row['value'])
            except ValueError:
                report[row['metric']] = row['value']
    return report
