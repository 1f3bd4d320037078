#!/usr/bin/env python3
"""
Test run-directory orchestration: locking, stage ordering, exposure checks and full runs
"""
import copy
import shutil

import numpy as np
import pytest

from checkpoint import load_checkpoint
from config import load_config
from corpus_splitter import SplitManifest
from errors import ConfigurationError, LeakageError, RunLockedError
from pipeline import SWEEPS, Pipeline, check_exposure, run_lock
import text_metrics
import vector_quantizer as vq

# a corpus and models small enough for a full run in the default test pass
TINY = {
    'corpus.vocab_size': 8, 'corpus.n_sentences': 10, 'corpus.sentence_min': 2, 'corpus.sentence_max': 3,
    'corpus.n_subjects': 2, 'corpus.n_sessions': 1, 'corpus.brain_channels': 4, 'corpus.segment_seconds': 2,
    'autoencoder.codebook_size': 32, 'autoencoder.base_channels': 8, 'autoencoder.blocks_per_level': 1,
    'brain.hidden': 16, 'brain.transformer_layers': 1, 'brain.heads': 2, 'brain.ts_channels1': 4,
    'brain.ts_channels2': 8,
    'transcriber.dim': 16, 'transcriber.heads': 2, 'transcriber.encoder_layers': 1, 'transcriber.decoder_layers': 1,
    'transcriber.max_len': 8, 'transcriber.encoder_pool': 10,
    'decode.num_beams': 2, 'decode.max_len': 8,
    'stage1.max_epochs': 1, 'stage2.max_epochs': 1, 'pretrain.max_epochs': 1, 'stage3.max_epochs': 1,
    'stage1.batch_size': 8, 'stage2.batch_size': 8, 'pretrain.batch_size': 8, 'stage3.batch_size': 8,
}

RUN_FILES = ['config.resolved', 'split.tsv', 'vocab.txt', 'stage1.bech', 'stage2.bech', 'transcriber_pretrained.bech',
             'stage3.bech', 'history_stage1.csv', 'history_stage2.csv', 'history_pretrain.csv', 'history_stage3.csv',
             'metrics_brain_free.csv', 'metrics_brain_tf.csv', 'metrics_noise_free.csv',
             'transcripts_brain_free.tsv', 'mel_example.npy', 'report_losses.svg', 'report_metrics.svg',
             'report_mel.svg', 'run_stats.csv']


def tiny_config(**extra):
    values = {k: str(v) for k, v in TINY.items()}
    values.update({k: str(v) for k, v in extra.items()})
    return load_config(env_file=None, environ={}, overrides=values)


def test_run_lock(tmp_path):
    with run_lock(tmp_path):
        assert (tmp_path / 'run.lock').exists()
        with pytest.raises(RunLockedError):
            with run_lock(tmp_path):
                pass
    assert not (tmp_path / 'run.lock').exists()


def test_stages_require_their_inputs(tmp_path):
    pipeline = Pipeline(tmp_path, tiny_config())
    with pytest.raises(ConfigurationError, match='split has not been run'):
        pipeline.cmd_stage2()
    with pytest.raises(ConfigurationError, match='stage2 has not been run'):
        pipeline.cmd_eval()
    with pytest.raises(ConfigurationError):
        pipeline.cmd_eval(mode='audio')
    with pytest.raises(ConfigurationError):
        pipeline.cmd_sweep('depth')
    assert set(SWEEPS) == {'ratio', 'codebook'}
    assert SWEEPS['ratio'] == ('autoencoder.downsample_ratio', (2, 4, 8, 16))
    assert SWEEPS['codebook'] == ('autoencoder.codebook_size', (1024, 2048, 3072, 4096))
    # 3072 is not a power of two: 128 bits over log2(3072) index bits
    assert vq.compression_ratio(4, 3072) == pytest.approx(11.049, abs=1e-3)


def test_check_exposure():
    manifest = SplitManifest('random_shuffle', 0, {}, ('a', 'b'), ('c',), ('d',))
    loaded = {'a', 'b', 'c', 'd'}
    check_exposure([{'id': 'a'}, {'id': 'b'}], manifest, {'train'}, loaded)
    with pytest.raises(LeakageError, match="split 'test'"):
        check_exposure([{'id': 'a'}, {'id': 'd'}], manifest, {'train'}, loaded)
    with pytest.raises(LeakageError):
        check_exposure([{'id': 'zz'}], manifest, {'train', 'valid'}, loaded | {'zz'})
    # listed in the split but missing from the corpus the stage loaded
    with pytest.raises(LeakageError, match='not part of the loaded corpus'):
        check_exposure([{'id': 'a'}, {'id': 'b'}], manifest, {'train'}, {'a', 'c', 'd'})


def test_split_written_for_another_corpus_is_rejected(tmp_path):
    pipeline = Pipeline(tmp_path, tiny_config())
    pipeline.cmd_synth()
    pipeline.cmd_split()
    assert len(pipeline.split_ids('train')) > 0
    lines = (tmp_path / 'split.tsv').read_text().splitlines()
    (tmp_path / 'split.tsv').write_text('\n'.join(lines[:-1]) + '\n')
    with pytest.raises(LeakageError, match='does not cover'):
        Pipeline(tmp_path, tiny_config()).manifest()
    with pytest.raises(LeakageError):
        Pipeline(tmp_path, tiny_config()).cmd_stage2()


def test_skip_finetune_with_skip_alignment_is_rejected(tmp_path):
    cfg = tiny_config(**{'ablation.skip_alignment': 'true', 'ablation.skip_finetune': 'true'})
    with pytest.raises(ConfigurationError):
        Pipeline(tmp_path, cfg).cmd_stage3()


def test_tiny_run_writes_every_artifact(tmp_path):
    pipeline = Pipeline(tmp_path / 'run', tiny_config())
    reports = pipeline.run_all()
    for name in RUN_FILES:
        assert (tmp_path / 'run' / name).exists(), name
    assert set(reports) == {'brain_free', 'brain_tf', 'noise_free'}
    assert reports['brain_tf']['teacher_forcing'] == 'on'
    assert reports['noise_free']['mode'] == 'noise'
    assert -1.0 <= reports['brain_free']['mel_pearson'] <= 1.0

    rows = text_metrics.read_transcripts(tmp_path / 'run' / 'transcripts_brain_free.tsv')
    assert [p.pair_id for p in rows] == pipeline.split_ids('test')
    example = np.load(tmp_path / 'run' / 'mel_example.npy')
    assert example.shape == (2, 80, 200)
    assert any((tmp_path / 'run' / 'cache').glob('pred_mel__*.npy'))
    for name in ('stage1.bech', 'stage2.bech', 'transcriber_pretrained.bech', 'stage3.bech'):
        state = load_checkpoint(tmp_path / 'run' / name).training_state
        assert int(state['scheduler_step']) == int(state['epoch']) == 1, name
        assert int(state['optim.step_count']) > 0, name


@pytest.mark.slow
def test_identical_seeds_reproduce_artifacts(tmp_path):
    for name in ('a', 'b'):
        Pipeline(tmp_path / name, tiny_config()).run_all()
    for name in ('split.tsv', 'history_stage1.csv', 'history_stage2.csv', 'history_stage3.csv',
                 'metrics_brain_free.csv', 'metrics_noise_free.csv'):
        assert (tmp_path / 'a' / name).read_bytes() == (tmp_path / 'b' / name).read_bytes(), name


@pytest.mark.slow
@pytest.mark.parametrize('ablation', ['disable_quantizer', 'skip_autoencoding', 'skip_alignment', 'skip_finetune'])
def test_ablations_run_to_completion(tmp_path, ablation):
    reports = Pipeline(tmp_path, tiny_config(**{f"ablation.{ablation}": 'true'})).run_all()
    assert 0.0 <= reports['brain_free']['bleu1'] <= 100.0
    assert (tmp_path / 'report_metrics.svg').exists()


@pytest.mark.slow
def test_desk_acceptance(tmp_path):
    """The desk preset learns the synthetic task; noise input and skipped fine-tuning do worse."""
    cfg = load_config(preset='desk', env_file=None, environ={})
    reports = Pipeline(tmp_path / 'run', cfg).run_all()
    free, forced, noise = reports['brain_free'], reports['brain_tf'], reports['noise_free']
    assert free['mel_pearson'] >= 0.8
    assert free['bleu1'] >= 80.0
    assert forced['bleu1'] >= free['bleu1']
    assert noise['bleu4'] <= 5.0

    shutil.copytree(tmp_path / 'run', tmp_path / 'no_finetune', ignore=shutil.ignore_patterns('run.lock'))
    skipped = copy.deepcopy(cfg)
    skipped.ablation.skip_finetune = True
    without = Pipeline(tmp_path / 'no_finetune', skipped).cmd_eval('brain', False)
    assert without['bleu1'] < free['bleu1']


if __name__ == "__main__":
    print("Testing pipeline")
    print("=" * 45)
    test_check_exposure()
    print("Pipeline tests complete! (run with pytest for the run-directory tests)")
