"""Stage 3: a small encoder-decoder transformer that turns padded Mel spectrograms into words.

It is pretrained on clean audio Mels, then only its encoder side (conv
frontend and encoder stack) is fine-tuned on brain-predicted Mels.
Decoding is beam search with a repetition penalty and no-repeat n-gram
masking, or teacher-forced argmax for the "w/ tf" evaluation.
"""
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

import autodiff as ad
from autodiff import Tensor
from dsp_frontend import N_MELS, WHISPER_FRAMES
from errors import ConfigurationError, ContractViolation, CorpusError, InvariantViolation
from layers import (Conv1d, Embedding, LayerNorm, Module, TransformerDecoderBlock, TransformerEncoderBlock,
                    causal_mask, parameter_checksum, sinusoidal_positions)
import text_metrics
from training import StageTrainer, TrainConfig

logger = logging.getLogger(__name__)

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ('<pad>', '<bos>', '<eos>', '<unk>')


class Vocabulary:
    """Word-level vocabulary; ids 0-3 are pad, begin, end and unknown."""

    def __init__(self, words=()):
        self.tokens = list(RESERVED)
        self.ids = {tok: i for i, tok in enumerate(self.tokens)}
        for word in words:
            self.add(word)

    @classmethod
    def from_texts(cls, texts):
        return cls(sorted({w for text in texts for w in text_metrics.normalize(text)}))

    def add(self, word):
        if word not in self.ids:
            self.ids[word] = len(self.tokens)
            self.tokens.append(word)
        return self.ids[word]

    def __len__(self):
        return len(self.tokens)

    def encode(self, text, strict=True):
        ids = []
        for word in text_metrics.normalize(text):
            if word not in self.ids:
                if strict:
                    raise CorpusError(f"token '{word}' is not in the vocabulary")
                ids.append(UNK)
            else:
                ids.append(self.ids[word])
        return ids

    def decode(self, ids):
        words = []
        for i in ids:
            i = int(i)
            if i == EOS:
                break
            if i in (PAD, BOS):
                continue
            words.append(self.tokens[i] if 0 <= i < len(self.tokens) else RESERVED[UNK])
        return ' '.join(words)

    def save(self, path):
        Path(path).write_text('\n'.join(self.tokens[len(RESERVED):]) + '\n', encoding='utf-8')

    @classmethod
    def load(cls, path):
        words = [w for w in Path(path).read_text(encoding='utf-8').splitlines() if w]
        return cls(words)


@dataclass
class TranscriberConfig:
    dim: int = 128
    heads: int = 4
    encoder_layers: int = 2
    decoder_layers: int = 2
    max_len: int = 32
    mel_frames: int = WHISPER_FRAMES
    # extra mean pooling of the 1500-step encoder sequence (1 = none)
    encoder_pool: int = 1

    def __post_init__(self):
        if self.dim % self.heads:
            raise ConfigurationError(f"transcriber width {self.dim} is not divisible by {self.heads} heads")
        if self.mel_frames % 2 or (self.mel_frames // 2) % self.encoder_pool:
            raise ConfigurationError(
                f"{self.mel_frames} frames cannot be halved and pooled by {self.encoder_pool}")

    @property
    def memory_len(self):
        return self.mel_frames // 2 // self.encoder_pool


@dataclass
class DecodeConfig:
    num_beams: int = 5
    repetition_penalty: float = 5.0
    no_repeat_ngram_size: int = 2
    max_len: int = 32
    teacher_forcing: bool = False

    def __post_init__(self):
        if self.num_beams < 1:
            raise ConfigurationError(f"num_beams must be >= 1, got {self.num_beams}")
        if self.repetition_penalty < 1:
            raise ConfigurationError(f"repetition_penalty must be >= 1, got {self.repetition_penalty}")
        if self.no_repeat_ngram_size < 0:
            raise ConfigurationError(f"no_repeat_ngram_size must be >= 0, got {self.no_repeat_ngram_size}")


class AudioEncoder(Module):
    def __init__(self, cfg: TranscriberConfig, rng):
        super().__init__()
        self.conv1 = Conv1d(N_MELS, cfg.dim, 3, rng, padding=1)
        self.conv2 = Conv1d(cfg.dim, cfg.dim, 3, rng, stride=2, padding=1)
        self.layers = [TransformerEncoderBlock(cfg.dim, cfg.heads, rng) for _ in range(cfg.encoder_layers)]
        self.norm = LayerNorm(cfg.dim)
        self.pool = cfg.encoder_pool
        self._positions = sinusoidal_positions(cfg.memory_len, cfg.dim)

    def forward(self, mel):
        x = ad.gelu(self.conv1(mel))
        x = ad.gelu(self.conv2(x)).transpose(0, 2, 1)
        if self.pool > 1:
            x = ad.mean_pool(x, self.pool, axis=1)
        x = x + self._positions[:x.shape[1]]
        for layer in self.layers:
            x = layer(x)
        return self.norm(x)


class TextDecoder(Module):
    def __init__(self, cfg: TranscriberConfig, vocab_size, rng):
        super().__init__()
        self.embedding = Embedding(vocab_size, cfg.dim, rng)
        self.layers = [TransformerDecoderBlock(cfg.dim, cfg.heads, rng) for _ in range(cfg.decoder_layers)]
        self.norm = LayerNorm(cfg.dim)
        self._positions = sinusoidal_positions(cfg.max_len + 2, cfg.dim)

    def forward(self, tokens, memory):
        tokens = np.asarray(tokens, dtype=np.int64)
        length = tokens.shape[1]
        if length > self._positions.shape[0]:
            raise ContractViolation(f"token sequence of {length} exceeds the decoder limit {self._positions.shape[0]}")
        x = self.embedding(tokens) + self._positions[:length]
        mask = causal_mask(length)
        for layer in self.layers:
            x = layer(x, memory, self_mask=mask)
        # tied output projection
        return ad.matmul(self.norm(x), self.embedding.weight.transpose(1, 0))


class TranscriberModel(Module):
    def __init__(self, cfg: TranscriberConfig, vocab_size, rng):
        super().__init__()
        self.config = cfg
        self.vocab_size = vocab_size
        self.encoder = AudioEncoder(cfg, rng)
        self.decoder = TextDecoder(cfg, vocab_size, rng)

    def encode(self, mel):
        mel = ad.as_tensor(mel)
        if mel.ndim == 2:
            mel = mel.reshape(1, *mel.shape)
        if mel.shape[1] != N_MELS or mel.shape[2] != self.config.mel_frames:
            raise ContractViolation(f"transcriber expects ({N_MELS}, {self.config.mel_frames}) Mels, got {mel.shape[1:]}")
        return self.encoder(mel)

    def forward(self, mel, tokens):
        return self.decoder(tokens, self.encode(mel))


def target_batch(token_lists, max_len):
    """(decoder input, target) arrays: <bos> w1..wn <eos> padded with <pad>."""
    width = max_len + 1
    inputs = np.full((len(token_lists), width), PAD, dtype=np.int64)
    targets = np.full((len(token_lists), width), PAD, dtype=np.int64)
    for row, ids in enumerate(token_lists):
        if len(ids) > max_len:
            raise ContractViolation(f"transcript of {len(ids)} tokens exceeds max_len {max_len}")
        seq = [BOS] + list(ids) + [EOS]
        inputs[row, :len(seq) - 1] = seq[:-1]
        targets[row, :len(seq) - 1] = seq[1:]
    return inputs, targets


def sequence_loss(model: TranscriberModel, mel, token_lists):
    """Mean next-token cross-entropy over non-pad targets."""
    inputs, targets = target_batch(token_lists, model.config.max_len)
    logits = model(mel, inputs)
    return ad.cross_entropy(logits.reshape(-1, model.vocab_size), targets.reshape(-1), ignore_index=PAD)


def _loss_fn(model):
    def loss_fn(batch):
        mel = Tensor(np.stack([item['mel'] for item in batch]))
        loss = sequence_loss(model, mel, [item['tokens'] for item in batch])
        return loss, {'ce': loss.item()}
    return loss_fn


def pretrain_transcriber(train_items, valid_items, model: TranscriberModel, train_config: TrainConfig, rng):
    """Train every transcriber parameter on clean (Mel, tokens) items."""
    if not train_items:
        raise CorpusError("cannot pretrain the transcriber on an empty corpus")
    model.unfreeze()
    trainer = StageTrainer('pretrain', model, _loss_fn(model), train_config, rng)
    return trainer.fit(list(train_items), list(valid_items))


def finetune_stage3(train_items, valid_items, model: TranscriberModel, train_config: TrainConfig, rng):
    """Cross-entropy fine-tuning of the encoder side on predicted Mels; the decoder stays frozen."""
    if not train_items:
        raise ContractViolation("stage 3 needs at least one training item")
    model.unfreeze()
    model.decoder.freeze()
    before = parameter_checksum(model.decoder)
    trainer = StageTrainer('stage3', model, _loss_fn(model), train_config, rng,
                           params=model.encoder.trainable_parameters(), frozen=[model.decoder])
    history = trainer.fit(list(train_items), list(valid_items))
    if parameter_checksum(model.decoder) != before:
        raise InvariantViolation("transcriber decoder changed during stage 3")
    return history


# ---------------------------------------------------------------------------
# Decoding
# ---------------------------------------------------------------------------

def apply_repetition_penalty(logits, previous, penalty):
    """Divide positive logits / multiply negative logits of already generated tokens."""
    if penalty == 1.0 or not len(previous):
        return logits
    logits = logits.copy()
    seen = np.unique(np.asarray(previous, dtype=np.int64))
    values = logits[seen]
    logits[seen] = np.where(values > 0, values / penalty, values * penalty)
    return logits


def banned_ngram_tokens(tokens, n):
    """Tokens that would complete an n-gram already present in `tokens`."""
    if n <= 0 or len(tokens) < n:
        return set()
    prefix = tuple(tokens[len(tokens) - n + 1:]) if n > 1 else ()
    banned = set()
    for i in range(len(tokens) - n + 1):
        if tuple(tokens[i:i + n - 1]) == prefix:
            banned.add(tokens[i + n - 1])
    return banned


def _next_scores(model, memory, sequences, cfg: DecodeConfig):
    """Log-probabilities for the next token of each sequence after the logit processors."""
    with ad.no_grad():
        logits = model.decoder(np.asarray(sequences, dtype=np.int64), memory).data[:, -1, :]
    logits = logits.astype(np.float64)
    out = np.empty_like(logits)
    for row, seq in enumerate(sequences):
        row_logits = apply_repetition_penalty(logits[row], seq[1:], cfg.repetition_penalty)
        for token in banned_ngram_tokens(seq, cfg.no_repeat_ngram_size):
            row_logits[token] = -np.inf
        row_logits[[PAD, BOS]] = -np.inf
        shifted = row_logits - row_logits.max()
        out[row] = shifted - np.log(np.exp(shifted).sum())
    return out


def _greedy(model: TranscriberModel, memory, cfg: DecodeConfig):
    seq, logp = [BOS], 0.0
    for _ in range(cfg.max_len + 1):
        row = _next_scores(model, memory, [seq], cfg)[0]
        token = int(np.argmax(row))
        seq.append(token)
        logp += float(row[token])
        if token == EOS:
            break
    return seq, logp


def greedy_decode(model: TranscriberModel, memory, cfg: DecodeConfig):
    return _greedy(model, memory, cfg)[0][1:]


def sequence_score(model: TranscriberModel, memory, tokens, cfg: DecodeConfig):
    """Length-normalised log-probability of generated `tokens` under the decoding constraints."""
    if not len(tokens):
        raise ContractViolation("cannot score an empty sequence")
    seq, logp = [BOS], 0.0
    for token in tokens:
        logp += float(_next_scores(model, memory, [seq], cfg)[0][int(token)])
        seq.append(int(token))
    return logp / len(tokens)


def beam_search(model: TranscriberModel, memory, cfg: DecodeConfig):
    """Beam search scored by total log-probability / generated length.

    The greedy hypothesis always competes in the final ranking, so the result
    never scores below greedy decoding.
    """
    beams = [([BOS], 0.0)]
    finished = []
    for _ in range(cfg.max_len + 1):
        scores = _next_scores(model, memory, [seq for seq, _ in beams], cfg)
        candidates = []
        for (seq, logp), row in zip(beams, scores):
            top = np.argsort(-row, kind='stable')[:2 * cfg.num_beams]
            for token in top:
                if np.isfinite(row[token]):
                    candidates.append((seq + [int(token)], logp + float(row[token])))
        candidates.sort(key=lambda c: -c[1])
        beams = []
        for seq, logp in candidates:
            if seq[-1] == EOS:
                finished.append((seq, logp))
            else:
                beams.append((seq, logp))
            if len(beams) == cfg.num_beams:
                break
        if len(finished) >= cfg.num_beams or not beams:
            break
    pool = (finished or beams) + [_greedy(model, memory, cfg)]
    best_seq, _ = max(pool, key=lambda c: c[1] / (len(c[0]) - 1))
    return best_seq[1:]


def teacher_forced_tokens(model: TranscriberModel, memory, gold_ids):
    """Argmax prediction at each position given the gold prefix, cut at the first <eos>."""
    inputs = np.asarray([[BOS] + list(gold_ids)], dtype=np.int64)
    with ad.no_grad():
        logits = model.decoder(inputs, memory).data[0]
    logits[:, [PAD, BOS]] = -np.inf
    predicted = [int(t) for t in np.argmax(logits, axis=-1)]
    return predicted[:predicted.index(EOS) + 1] if EOS in predicted else predicted


def decode(model: TranscriberModel, mel, cfg: DecodeConfig, gold_ids=None):
    """Token ids for one padded Mel (trailing <eos> included when produced)."""
    model.eval()
    with ad.no_grad():
        memory = model.encode(mel)
    if cfg.teacher_forcing:
        if gold_ids is None:
            raise ContractViolation("teacher-forced decoding needs the gold transcript")
        return teacher_forced_tokens(model, memory, gold_ids)
    if cfg.num_beams == 1:
        return greedy_decode(model, memory, cfg)
    return beam_search(model, memory, cfg)


def transcribe(model, vocab: Vocabulary, items, cfg: DecodeConfig):
    """(pair_id, hypothesis, reference) rows for items with 'id', 'mel' and 'text'."""
    rows = []
    for item in items:
        gold = vocab.encode(item['text'], strict=False) if cfg.teacher_forcing else None
        ids = decode(model, item['mel'], cfg, gold_ids=gold)
        rows.append((item['id'], vocab.decode(ids), item['text']))
    return rows


def evaluate(model, vocab: Vocabulary, items, cfg: DecodeConfig, mode='brain', bleu_mode='corpus'):
    """Metric report tagged with the input mode, plus the transcript rows behind it."""
    if mode not in ('brain', 'noise', 'audio'):
        raise ConfigurationError(f"unknown evaluation mode '{mode}'")
    rows = transcribe(model, vocab, items, cfg)
    pairs = [text_metrics.EvalPair.from_text(ref, hyp, pair_id) for pair_id, hyp, ref in rows]
    report = text_metrics.metric_report(pairs, bleu_mode=bleu_mode)
    report['exact_match'] = 100.0 * float(np.mean([p.reference == p.hypothesis for p in pairs]))
    report['mode'] = mode
    report['teacher_forcing'] = 'on' if cfg.teacher_forcing else 'off'
    return report, rows


def token_accuracy(model: TranscriberModel, items):
    """Teacher-forced next-token accuracy over non-pad targets."""
    model.eval()
    correct = total = 0
    for item in items:
        inputs, targets = target_batch([item['tokens']], model.config.max_len)
        with ad.no_grad():
            logits = model(item['mel'], inputs).data[0]
        valid = targets[0] != PAD
        correct += int((np.argmax(logits, axis=-1)[valid] == targets[0][valid]).sum())
        total += int(valid.sum())
    return correct / max(total, 1)
