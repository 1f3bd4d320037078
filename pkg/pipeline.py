"""Run-directory orchestration of the three training stages, evaluation, reports and sweeps.

Layout of a run directory:

    config.resolved              resolved key = value configuration
    split.tsv                    split manifest
    vocab.txt                    transcriber word list
    stage1.bech ... stage3.bech  checkpoints (transcriber_pretrained.bech for the pretrain step)
    history_<stage>.csv          per-epoch losses
    metrics_<mode>_<tf>.csv      evaluation reports, with transcripts_<mode>_<tf>.tsv
    report_*.svg, run_stats.csv  cmd_report output
    cache/                       frozen stage-1 latents and predicted Mels
"""
import copy
import csv
import logging
import os
from contextlib import contextmanager
from pathlib import Path

import numpy as np

import autodiff as ad
from autodiff import Tensor
import brain_encoder as be
from cache_manager import CacheManager
from checkpoint import load_checkpoint, module_checkpoint, restore_module, save_checkpoint
from config import RunConfig, write_resolved
import corpus_splitter
from dsp_frontend import MEL_PAD_VALUE, WHISPER_FRAMES, MelSpectrogram, audio_to_mel, brain_to_input, pad_mel, upsample_time
from errors import ConfigurationError, LeakageError, RunLockedError
from layers import Module
from monitoring import metrics, monitor_stage, structured_logger
import reporting
import spectro_autoencoder as sa
import synth_corpus
import text_metrics
from training import History, StageTrainer, read_history_csv
import transcriber as tr
import vector_quantizer as vq

logger = logging.getLogger(__name__)

LOCK_NAME = 'run.lock'
STAGE_SEEDS = {'split': 1, 'stage1': 2, 'stage2': 3, 'pretrain': 4, 'stage3': 5, 'eval': 6}
SWEEPS = {
    'ratio': ('autoencoder.downsample_ratio', (2, 4, 8, 16)),
    'codebook': ('autoencoder.codebook_size', (1024, 2048, 3072, 4096)),
}
SWEEP_FIELDS = ['variant', 'value', 'compression_ratio', 'stage1_recon', 'mel_pearson', 'bleu1', 'bleu4', 'wer']


@contextmanager
def run_lock(run_dir):
    """Exclusive lock file; a second command on the same run directory fails fast."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    path = run_dir / LOCK_NAME
    try:
        fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RunLockedError(f"{run_dir} is locked by another command (remove {path} if it is stale)")
    try:
        os.write(fd, str(os.getpid()).encode('ascii'))
        os.close(fd)
        yield path
    finally:
        path.unlink(missing_ok=True)


class BrainToMel(Module):
    """Brain encoder followed by the quantizer and spectrogram decoder."""

    def __init__(self, brain: be.BrainEncoder, autoencoder: sa.ResUnetAutoencoder):
        super().__init__()
        self.brain = brain
        self.autoencoder = autoencoder

    def forward(self, x):
        zq, _ = self.autoencoder.quantize(self.brain(x))
        return sa.decode(zq, self.autoencoder)

    def transcriber_input(self, x, upsample=1):
        """Predicted Mel brought to the transcriber's 3000-frame input, padded with -1."""
        mel = self(x)
        if upsample > 1:
            mel = ad.repeat(mel, upsample, axis=2)
        return ad.pad(mel, ((0, 0), (0, 0), (0, WHISPER_FRAMES - mel.shape[2])), value=MEL_PAD_VALUE)


class EndToEnd(Module):
    """Brain-to-text model trained with the transcriber cross-entropy alone."""

    def __init__(self, brain_to_mel: BrainToMel, transcriber: tr.TranscriberModel):
        super().__init__()
        self.brain_to_mel = brain_to_mel
        self.transcriber = transcriber


def transcriber_mel(m: MelSpectrogram, upsample=1):
    return pad_mel(upsample_time(m, upsample), WHISPER_FRAMES).values


def check_exposure(items, manifest, allowed, loaded):
    """Training and selection items must be loaded pairs from the named splits only."""
    split_of = manifest.split_of()
    for item in items:
        if item['id'] not in loaded:
            raise LeakageError(f"pair '{item['id']}' is not part of the loaded corpus")
        if split_of.get(item['id']) not in allowed:
            raise LeakageError(f"pair '{item['id']}' from split '{split_of.get(item['id'])}' "
                               f"used where only {sorted(allowed)} are allowed")


class Pipeline:
    def __init__(self, run_dir, config: RunConfig):
        self.run_dir = Path(run_dir)
        self.config = config
        self.profile = config.signal_profile()
        self.cache = CacheManager(config.cache.type, config.cache.ttl, directory=self.run_dir / 'cache')
        self._pairs = None
        self._manifest = None
        self._mels = {}
        self._brains = {}
        logger.info(f"Pipeline at {self.run_dir} ({self.profile.name} profile, "
                    f"{self.profile.mel_frames} Mel frames, brain length {self.profile.brain_len})")

    # -- paths ---------------------------------------------------------------
    @property
    def corpus_dir(self):
        path = Path(self.config.corpus.dir)
        return path if path.is_absolute() else self.run_dir / path

    def path(self, name):
        return self.run_dir / name

    def _require(self, name, stage):
        path = self.path(name)
        if not path.exists():
            raise ConfigurationError(f"{stage} has not been run: {path} is missing")
        return path

    def _rng(self, stage, *extra):
        return np.random.default_rng([self.config.seed, STAGE_SEEDS[stage], *extra])

    def prepare(self):
        self.run_dir.mkdir(parents=True, exist_ok=True)
        write_resolved(self.config, self.path('config.resolved'))

    # -- data ----------------------------------------------------------------
    def pairs(self):
        if self._pairs is None:
            self._pairs = {p.pair_id: p for p in synth_corpus.load_corpus(self.corpus_dir)}
        return self._pairs

    def manifest(self):
        """The saved split, checked to partition exactly the pairs of the loaded corpus."""
        if self._manifest is None:
            manifest = corpus_splitter.load_manifest(self._require('split.tsv', 'split'))
            corpus_splitter.verify_no_leakage(manifest, [p.meta for p in self.pairs().values()])
            self._manifest = manifest
        return self._manifest

    def split_ids(self, name):
        return list(getattr(self.manifest(), name))

    def mel(self, pair):
        """Profile-length Mel of a pair's audio; shared by every pair of the same sentence."""
        sid = pair.meta.sentence_id
        if sid not in self._mels:
            self._mels[sid] = audio_to_mel(pair.audio, pair.audio_rate, self.profile)
        return self._mels[sid]

    def brain(self, pair):
        if pair.pair_id not in self._brains:
            self._brains[pair.pair_id] = brain_to_input(pair.brain, self.profile).data.astype(np.float32)
        return self._brains[pair.pair_id]

    def vocabulary(self):
        return tr.Vocabulary.load(self._require('vocab.txt', 'pretrain_decoder'))

    # -- models --------------------------------------------------------------
    def new_autoencoder(self, rng):
        return sa.ResUnetAutoencoder(self.config.autoencoder_config(), rng)

    def new_brain_to_mel(self, rng, autoencoder=None):
        autoencoder = autoencoder or self.new_autoencoder(rng)
        return BrainToMel(be.BrainEncoder(self.config.brain_config(), rng), autoencoder)

    def new_transcriber(self, vocab, rng):
        return tr.TranscriberModel(self.config.transcriber_config(), len(vocab), rng)

    def load_autoencoder(self):
        model = self.new_autoencoder(self._rng('stage1'))
        return restore_module(model, load_checkpoint(self._require('stage1.bech', 'stage1')))

    def load_brain_to_mel(self):
        """The stage-2 model, or the brain side of the end-to-end model when alignment was skipped."""
        if self.config.ablation.skip_alignment:
            return self.load_end_to_end().brain_to_mel
        model = self.new_brain_to_mel(self._rng('stage2'))
        return restore_module(model, load_checkpoint(self._require('stage2.bech', 'stage2')))

    def load_transcriber(self, name='transcriber_pretrained.bech', stage='pretrain_decoder'):
        vocab = self.vocabulary()
        model = self.new_transcriber(vocab, self._rng('pretrain'))
        return restore_module(model, load_checkpoint(self._require(name, stage))), vocab

    def load_end_to_end(self):
        vocab = self.vocabulary()
        model = EndToEnd(self.new_brain_to_mel(self._rng('stage3')), self.new_transcriber(vocab, self._rng('stage3')))
        return restore_module(model, load_checkpoint(self._require('stage3.bech', 'stage3')))

    def final_transcriber(self):
        ablation = self.config.ablation
        if ablation.skip_finetune:
            return self.load_transcriber()
        if ablation.skip_alignment:
            return self.load_end_to_end().transcriber, self.vocabulary()
        return self.load_transcriber('stage3.bech', 'stage3')

    def _save(self, name, module, history: History, stage):
        history.write_csv(self.path(f"history_{stage}.csv"))
        meta = {'stage': stage, 'best_epoch': history.best_epoch, 'stopped_epoch': history.stopped_epoch,
                'profile': self.profile.name}
        save_checkpoint(self.path(name), module_checkpoint(module, epoch=history.best_epoch, seed=self.config.seed,
                                                           metadata=meta, optimizer_state=history.optimizer_state))

    # -- commands ------------------------------------------------------------
    @monitor_stage('synth')
    def cmd_synth(self):
        self.prepare()
        corpus = synth_corpus.generate(self.config.synth_config())
        synth_corpus.write_corpus(corpus, self.corpus_dir)
        self._pairs = None
        self._manifest = None
        return len(corpus.pairs)

    @monitor_stage('split')
    def cmd_split(self):
        self.prepare()
        metas = [p.meta for p in self.pairs().values()]
        s = self.config.split
        params = corpus_splitter.SplitParams(s.test_subjects, s.valid_subjects, s.test_sentence_fraction, s.test_session)
        manifest = corpus_splitter.split(metas, s.strategy, s.seed, params)
        corpus_splitter.verify_no_leakage(manifest, metas)
        corpus_splitter.save_manifest(self.path('split.tsv'), manifest)
        self._manifest = None
        return manifest

    def stage1_items(self):
        """One Mel per sentence over every split (audio only); a seeded tenth of the sentences validates."""
        by_sentence = {}
        for pid in sorted(self.pairs()):
            pair = self.pairs()[pid]
            by_sentence.setdefault(pair.meta.sentence_id, pair)
        sentences = sorted(by_sentence)
        order = self._rng('stage1', 1).permutation(len(sentences))
        n_valid = max(1, len(sentences) // 10) if len(sentences) > 1 else 0
        valid = {sentences[i] for i in order[:n_valid]}
        train = [self.mel(by_sentence[s]).values for s in sentences if s not in valid]
        held = [self.mel(by_sentence[s]).values for s in sentences if s in valid]
        return train, held

    @monitor_stage('stage1')
    def cmd_stage1(self):
        self.prepare()
        if self.config.ablation.skip_autoencoding:
            logger.info("stage1 skipped (skip_autoencoding)")
            return None
        train, valid = self.stage1_items()
        model = self.new_autoencoder(self._rng('stage1'))
        history = sa.train_stage1(train, valid, model, self.config.stage1, self._rng('stage1', 2))
        self._save('stage1.bech', model, history, 'stage1')
        self.cache.clear('z_m')
        self.cache.clear('pred_mel')
        return history

    def stage2_items(self, split, autoencoder):
        pairs = self.pairs()
        items = []
        for pid in self.split_ids(split):
            pair = pairs[pid]
            mel = self.mel(pair)
            item = {'id': pid, 'brain': self.brain(pair), 'mel': mel.values, 'z_m': None}
            if autoencoder is not None:
                key = self.cache.key('z_m', pair.meta.sentence_id)
                item['z_m'] = self.cache.get_or_compute(key, lambda: self._latent(mel, autoencoder))
            items.append(item)
        return items

    @staticmethod
    def _latent(mel, autoencoder):
        autoencoder.eval()
        with ad.no_grad():
            return sa.encode(mel.values, autoencoder).data

    @monitor_stage('stage2')
    def cmd_stage2(self):
        self.prepare()
        ablation = self.config.ablation
        if ablation.skip_alignment:
            logger.info("stage2 skipped (skip_alignment): the brain side trains end to end in stage3")
            return None
        manifest = self.manifest()
        if ablation.skip_autoencoding:
            autoencoder = self.new_autoencoder(self._rng('stage1'))
            train, valid = self.stage2_items('train', None), self.stage2_items('valid', None)
        else:
            autoencoder = self.load_autoencoder()
            train, valid = self.stage2_items('train', autoencoder), self.stage2_items('valid', autoencoder)
        check_exposure(train, manifest, {'train'}, self.pairs())
        check_exposure(valid, manifest, {'valid'}, self.pairs())
        model = self.new_brain_to_mel(self._rng('stage2'), autoencoder)
        history = be.train_stage2(train, valid, model.brain, autoencoder, self.config.stage2,
                                  self._rng('stage2', 1), skip_autoencoding=ablation.skip_autoencoding)
        self._save('stage2.bech', model, history, 'stage2')
        self.cache.clear('pred_mel')
        return history

    def sentence_items(self, split):
        """Clean-audio transcriber items, one per sentence of the split."""
        pairs = self.pairs()
        seen, items = set(), []
        vocab = tr.Vocabulary.load(self.path('vocab.txt'))
        for pid in self.split_ids(split):
            pair = pairs[pid]
            if pair.meta.sentence_id in seen:
                continue
            seen.add(pair.meta.sentence_id)
            items.append({'id': pair.meta.sentence_id, 'text': pair.text, 'tokens': vocab.encode(pair.text),
                          'mel': transcriber_mel(self.mel(pair), self.profile.mel_downsample)})
        return items

    @monitor_stage('pretrain_decoder')
    def cmd_pretrain_decoder(self):
        """Pretrain the transcriber on clean audio Mels of the train and valid sentences."""
        self.prepare()
        vocab = tr.Vocabulary.from_texts(p.text for p in self.pairs().values())
        vocab.save(self.path('vocab.txt'))
        train, valid = self.sentence_items('train'), self.sentence_items('valid')
        model = self.new_transcriber(vocab, self._rng('pretrain'))
        history = tr.pretrain_transcriber(train, valid, model, self.config.pretrain, self._rng('pretrain', 1))
        self._save('transcriber_pretrained.bech', model, history, 'pretrain')
        return history

    def predicted_mel(self, pair, model: BrainToMel):
        key = self.cache.key('pred_mel', pair.pair_id)
        return self.cache.get_or_compute(
            key, lambda: be.predict_mel(self.brain(pair), model.brain, model.autoencoder))

    def stage3_items(self, split, vocab, model: BrainToMel = None):
        pairs = self.pairs()
        items = []
        for pid in self.split_ids(split):
            pair = pairs[pid]
            item = {'id': pid, 'text': pair.text, 'tokens': vocab.encode(pair.text)}
            if model is None:
                item['brain'] = self.brain(pair)
            else:
                pred = MelSpectrogram(self.predicted_mel(pair, model))
                item['mel'] = transcriber_mel(pred, self.profile.mel_downsample)
            items.append(item)
        return items

    @monitor_stage('stage3')
    def cmd_stage3(self):
        self.prepare()
        ablation = self.config.ablation
        if ablation.skip_finetune:
            if ablation.skip_alignment:
                raise ConfigurationError("skip_finetune with skip_alignment leaves the brain encoder untrained")
            logger.info("stage3 skipped (skip_finetune)")
            return None
        manifest = self.manifest()
        transcriber, vocab = self.load_transcriber()
        if ablation.skip_alignment:
            return self._stage3_end_to_end(transcriber, vocab, manifest)
        brain_to_mel = self.load_brain_to_mel()
        train, valid = self.stage3_items('train', vocab, brain_to_mel), self.stage3_items('valid', vocab, brain_to_mel)
        check_exposure(train, manifest, {'train'}, self.pairs())
        check_exposure(valid, manifest, {'valid'}, self.pairs())
        history = tr.finetune_stage3(train, valid, transcriber, self.config.stage3, self._rng('stage3', 1))
        self._save('stage3.bech', transcriber, history, 'stage3')
        return history

    def _stage3_end_to_end(self, transcriber, vocab, manifest):
        brain_to_mel = self.new_brain_to_mel(self._rng('stage3'))
        model = EndToEnd(brain_to_mel, transcriber)
        train, valid = self.stage3_items('train', vocab), self.stage3_items('valid', vocab)
        check_exposure(train, manifest, {'train'}, self.pairs())
        check_exposure(valid, manifest, {'valid'}, self.pairs())
        upsample = self.profile.mel_downsample

        def loss_fn(batch):
            x = Tensor(np.stack([item['brain'] for item in batch]))
            mel = brain_to_mel.transcriber_input(x, upsample)
            loss = tr.sequence_loss(transcriber, mel, [item['tokens'] for item in batch])
            return loss, {'ce': loss.item()}

        model.unfreeze()
        transcriber.decoder.freeze()
        brain_to_mel.autoencoder.encoder.freeze()
        params = brain_to_mel.trainable_parameters() + transcriber.encoder.trainable_parameters()
        trainer = StageTrainer('stage3', model, loss_fn, self.config.stage3, self._rng('stage3', 1),
                               params=params, frozen=[transcriber.decoder])
        history = trainer.fit(train, valid)
        self._save('stage3.bech', model, history, 'stage3')
        self.cache.clear('pred_mel')
        return history

    def eval_items(self, mode, vocab, brain_to_mel: BrainToMel):
        """Test-split transcriber items; noise mode swaps each brain recording for Gaussian noise."""
        pairs = self.pairs()
        items, pearson = [], []
        for i, pid in enumerate(self.split_ids('test')):
            pair = pairs[pid]
            if mode == 'noise':
                noisy = synth_corpus.noise_like(pair, self._rng('eval', i))
                brain = brain_to_input(noisy.brain, self.profile).data.astype(np.float32)
                pred = be.predict_mel(brain, brain_to_mel.brain, brain_to_mel.autoencoder)
            else:
                pred = self.predicted_mel(pair, brain_to_mel)
            target = self.mel(pair)
            pearson.append(be.mel_pearson(pred, target.values, target.pad_mask))
            if i == 0 and mode == 'brain':
                np.save(self.path('mel_example.npy'), np.stack([target.values, np.asarray(pred, dtype=np.float32)]))
            items.append({'id': pid, 'text': pair.text,
                          'mel': transcriber_mel(MelSpectrogram(pred), self.profile.mel_downsample)})
        return items, float(np.mean(pearson))

    @monitor_stage('eval')
    def cmd_eval(self, mode='brain', teacher_forcing=False):
        self.prepare()
        if mode not in ('brain', 'noise'):
            raise ConfigurationError(f"unknown evaluation mode '{mode}', expected brain or noise")
        brain_to_mel = self.load_brain_to_mel()
        transcriber, vocab = self.final_transcriber()
        items, pearson = self.eval_items(mode, vocab, brain_to_mel)
        cfg = self.config.decode_config(teacher_forcing=teacher_forcing)
        report, rows = tr.evaluate(transcriber, vocab, items, cfg, mode=mode, bleu_mode=self.config.decode.bleu_mode)
        report['mel_pearson'] = pearson
        tag = f"{mode}_{'tf' if teacher_forcing else 'free'}"
        text_metrics.write_metrics_csv(self.path(f"metrics_{tag}.csv"), report)
        text_metrics.write_transcripts(self.path(f"transcripts_{tag}.tsv"), rows)
        structured_logger.log_eval(tag, report)
        return report

    @monitor_stage('report')
    def cmd_report(self):
        self.prepare()
        written = []
        histories = {stage: self.path(f"history_{stage}.csv") for stage in ('stage1', 'stage2', 'pretrain', 'stage3')}
        if any(p.exists() for p in histories.values()):
            written.append(reporting.plot_loss_curves(histories, self.path('report_losses.svg')))
        reports = {p.stem[len('metrics_'):]: text_metrics.read_metrics_csv(p)
                   for p in sorted(self.run_dir.glob('metrics_*.csv'))}
        if reports:
            written.append(reporting.plot_metric_bars(reports, self.path('report_metrics.svg')))
        example = self.path('mel_example.npy')
        if example.exists():
            target, predicted = np.load(example)
            written.append(reporting.plot_mel_comparison(target, predicted, self.path('report_mel.svg'),
                                                         title='first test pair'))
        metrics.write_csv(self.path('run_stats.csv'))
        return written

    def run_all(self):
        """synth (when no corpus exists) -> split -> stage1 -> stage2 -> pretrain -> stage3 -> eval -> report."""
        if not (self.corpus_dir / synth_corpus.MANIFEST_NAME).exists():
            self.cmd_synth()
        self.cmd_split()
        self.cmd_stage1()
        self.cmd_stage2()
        self.cmd_pretrain_decoder()
        self.cmd_stage3()
        reports = {
            'brain_free': self.cmd_eval('brain', False),
            'brain_tf': self.cmd_eval('brain', True),
            'noise_free': self.cmd_eval('noise', False),
        }
        self.cmd_report()
        return reports

    # -- sweeps --------------------------------------------------------------
    def stage1_recon(self):
        """Stage-1 validation reconstruction MSE at the selected epoch (NaN when stage 1 did not run)."""
        path = self.path('history_stage1.csv')
        if not path.exists():
            return float('nan')
        valid = [r for r in read_history_csv(path) if r['split'] == 'valid']
        best = min(valid, key=lambda r: r['loss'])
        return best['recon'] if best.get('recon') is not None else best['loss']

    @monitor_stage('sweep')
    def cmd_sweep(self, kind):
        if kind not in SWEEPS:
            raise ConfigurationError(f"unknown sweep '{kind}', expected one of {sorted(SWEEPS)}")
        self.prepare()
        key, values = SWEEPS[kind]
        if not (self.corpus_dir / synth_corpus.MANIFEST_NAME).exists():
            self.cmd_synth()
        rows = []
        for value in values:
            cfg = copy.deepcopy(self.config)
            cfg.set(key, str(value))
            cfg.corpus.dir = str(self.corpus_dir.resolve())
            cfg.validate()
            sub_dir = self.run_dir / f"sweep_{kind}_{value}"
            with run_lock(sub_dir):
                sub = Pipeline(sub_dir, cfg)
                reports = sub.run_all()
            ae = cfg.autoencoder
            report = reports['brain_free']
            rows.append({'variant': kind, 'value': value,
                         'compression_ratio': vq.compression_ratio(ae.downsample_ratio, ae.codebook_size),
                         'stage1_recon': sub.stage1_recon(), 'mel_pearson': report['mel_pearson'],
                         'bleu1': report['bleu1'], 'bleu4': report['bleu4'], 'wer': report['wer']})
            logger.info(f"sweep {key}={value}: BLEU-1 {report['bleu1']:.2f}, "
                        f"stage1 recon {rows[-1]['stage1_recon']:.4f}")
        with open(self.path('sweep.csv'), 'w', newline='') as f:
            writer = csv.DictWriter(f, fieldnames=SWEEP_FIELDS)
            writer.writeheader()
            for row in rows:
                writer.writerow({k: f"{v:.6f}" if isinstance(v, float) else v for k, v in row.items()})
        return rows
