"""SVG reports built from the CSVs a run directory already holds."""
import logging
from pathlib import Path

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt
import numpy as np

from errors import ContractViolation
from training import read_history_csv

logger = logging.getLogger(__name__)

# byte-identical SVGs for identical inputs
matplotlib.rcParams['svg.hashsalt'] = 'neurotext'
matplotlib.rcParams['svg.fonttype'] = 'none'
_SVG_METADATA = {'Date': None, 'Creator': None}

BAR_METRICS = ('bleu1', 'bleu2', 'bleu3', 'bleu4', 'rouge1_p', 'rouge1_r', 'rouge1_f', 'wer')


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, format='svg', metadata=_SVG_METADATA)
    plt.close(fig)
    logger.info(f"Wrote {path}")
    return path


def plot_loss_curves(history_paths, path):
    """One panel per stage: train and valid loss per epoch, selected epoch marked."""
    history_paths = {stage: p for stage, p in history_paths.items() if Path(p).exists()}
    if not history_paths:
        raise ContractViolation("no loss histories to plot")
    fig, axes = plt.subplots(1, len(history_paths), figsize=(4 * len(history_paths), 3.2), squeeze=False)
    for ax, (stage, csv_path) in zip(axes[0], history_paths.items()):
        rows = read_history_csv(csv_path)
        for split, style in (('train', 'b-'), ('valid', 'r--')):
            points = [(r['epoch'], r['loss']) for r in rows if r['split'] == split]
            if points:
                epochs, losses = zip(*points)
                ax.plot(epochs, losses, style, label=split.capitalize())
        valid = [(r['loss'], r['epoch']) for r in rows if r['split'] == 'valid']
        if valid:
            ax.axvline(min(valid)[1], color='grey', alpha=0.5, linestyle=':')
        ax.set_title(stage)
        ax.set_xlabel('epoch')
        ax.set_yscale('log')
        ax.legend()
        ax.grid(True, alpha=0.3)
    return _save(fig, path)


def plot_metric_bars(reports, path):
    """Grouped bars of BLEU/ROUGE-1/WER, one group per labelled report."""
    if not reports:
        raise ContractViolation("no metric reports to plot")
    fig, ax = plt.subplots(figsize=(10, 3.6))
    width = 0.8 / len(reports)
    x = np.arange(len(BAR_METRICS))
    for i, (label, report) in enumerate(reports.items()):
        values = [float(report.get(name, 0.0)) for name in BAR_METRICS]
        ax.bar(x + i * width, values, width, label=label)
    ax.set_xticks(x + width * (len(reports) - 1) / 2)
    ax.set_xticklabels(BAR_METRICS)
    ax.set_ylabel('%')
    ax.legend(fontsize='small')
    ax.grid(True, axis='y', alpha=0.3)
    return _save(fig, path)


def plot_mel_comparison(target, predicted, path, title=''):
    """Ground-truth and predicted Mel spectrograms on a shared colour scale."""
    target = np.asarray(target)
    predicted = np.asarray(predicted)
    if target.shape != predicted.shape:
        raise ContractViolation(f"shape mismatch {target.shape} vs {predicted.shape}")
    lo, hi = float(min(target.min(), predicted.min())), float(max(target.max(), predicted.max()))
    fig, axes = plt.subplots(2, 1, figsize=(8, 4.5), sharex=True)
    for ax, values, name in ((axes[0], target, 'ground truth'), (axes[1], predicted, 'predicted')):
        ax.imshow(values, origin='lower', aspect='auto', vmin=lo, vmax=hi, cmap='magma', interpolation='nearest')
        ax.set_ylabel(f'{name}\nmel bin')
    axes[1].set_xlabel('frame')
    if title:
        axes[0].set_title(title)
    return _save(fig, path)
