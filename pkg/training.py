"""The epoch loop shared by every training stage."""
import csv
import logging
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from tqdm import tqdm

import autodiff as ad
from errors import ContractViolation, InvariantViolation, TrainingDiverged
from monitoring import metrics, structured_logger
from optim import AdamW, EarlyStopping, clip_grad_norm, scheduler_lr

logger = logging.getLogger(__name__)

HISTORY_FIELDS = ['epoch', 'split', 'loss', 'lr']


def progress_enabled():
    return os.getenv('NEUROTEXT_PROGRESS', '1') != '0'


@dataclass
class TrainConfig:
    batch_size: int = 16
    max_epochs: int = 30
    max_lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 1e-2
    patience: int = 4
    grad_clip: float = 1.0


@dataclass
class EpochRecord:
    epoch: int
    split: str
    loss: float
    lr: float
    terms: dict = field(default_factory=dict)


@dataclass
class History:
    stage: str
    records: list = field(default_factory=list)
    best_epoch: int = 0
    stopped_epoch: int = None
    # AdamW moments and step count at the best epoch
    optimizer_state: dict = field(default=None, repr=False)

    def losses(self, split):
        return [r.loss for r in self.records if r.split == split]

    def term_names(self):
        names = []
        for r in self.records:
            for name in r.terms:
                if name not in names:
                    names.append(name)
        return names

    def write_csv(self, path):
        """epoch,split,loss,lr followed by one column per loss term."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        extra = self.term_names()
        with open(path, 'w', newline='') as f:
            writer = csv.writer(f)
            writer.writerow(HISTORY_FIELDS + extra)
            for r in self.records:
                writer.writerow([r.epoch, r.split, f"{r.loss:.8g}", f"{r.lr:.8g}"]
                                + [f"{r.terms[name]:.8g}" if name in r.terms else '' for name in extra])


def read_history_csv(path):
    with open(path, newline='') as f:
        rows = list(csv.DictReader(f))
    return [{k: (v if k == 'split' else float(v) if v != '' else None) for k, v in row.items()} for row in rows]


def batches(items, batch_size, rng=None):
    order = np.arange(len(items)) if rng is None else rng.permutation(len(items))
    for start in range(0, len(items), batch_size):
        yield [items[i] for i in order[start:start + batch_size]]


class StageTrainer:
    """AdamW, per-epoch cosine learning rate, early stopping on the validation loss.

    `loss_fn(batch)` returns (scalar loss tensor, dict of float terms). The
    parameters of `frozen` modules must never receive a non-zero gradient.
    At the end the model is restored to its lowest-validation-loss epoch.
    """

    def __init__(self, stage, model, loss_fn, config: TrainConfig, rng, params=None, frozen=(),
                 on_epoch_start=None, on_epoch_end=None):
        self.stage = stage
        self.model = model
        self.loss_fn = loss_fn
        self.config = config
        self.rng = rng
        self.params = list(params) if params is not None else model.trainable_parameters()
        self.frozen = list(frozen)
        self.on_epoch_start = on_epoch_start
        self.on_epoch_end = on_epoch_end
        self.optimizer = AdamW(self.params, lr=config.max_lr, betas=(config.beta1, config.beta2),
                               weight_decay=config.weight_decay)

    def _optimizer_snapshot(self):
        return {k: np.array(v, copy=True) for k, v in self.optimizer.state().items()}

    def _check_frozen(self):
        for module in self.frozen:
            for name, p in module.named_parameters():
                if p.grad is not None and np.any(p.grad != 0):
                    raise InvariantViolation(f"frozen parameter {name} received a gradient during {self.stage}")

    def _train_epoch(self, epoch, items):
        self.model.train()
        total, count, terms_sum = 0.0, 0, {}
        progress = tqdm(list(batches(items, self.config.batch_size, self.rng)),
                        desc=f"{self.stage} epoch {epoch}", disable=not progress_enabled(), leave=False)
        for step, batch in enumerate(progress, start=1):
            started = time.time()
            self.optimizer.zero_grad()
            for module in self.frozen:
                module.zero_grad()
            loss, terms = self.loss_fn(batch)
            value = loss.item()
            if not math.isfinite(value):
                metrics.record_divergence(self.stage)
                raise TrainingDiverged(self.stage, epoch, step, value)
            loss.backward()
            self._check_frozen()
            if self.config.grad_clip:
                clip_grad_norm(self.params, self.config.grad_clip)
            self.optimizer.step()
            metrics.record_step(time.time() - started)
            total += value * len(batch)
            count += len(batch)
            for name, term in terms.items():
                terms_sum[name] = terms_sum.get(name, 0.0) + term * len(batch)
            progress.set_postfix(loss=f"{value:.4f}")
        return total / count, {k: v / count for k, v in terms_sum.items()}

    def evaluate(self, items):
        self.model.eval()
        total, count, terms_sum = 0.0, 0, {}
        with ad.no_grad():
            for batch in batches(items, self.config.batch_size):
                loss, terms = self.loss_fn(batch)
                total += loss.item() * len(batch)
                count += len(batch)
                for name, term in terms.items():
                    terms_sum[name] = terms_sum.get(name, 0.0) + term * len(batch)
        return total / count, {k: v / count for k, v in terms_sum.items()}

    def fit(self, train_items, valid_items) -> History:
        if not train_items:
            raise ContractViolation(f"{self.stage}: training set is empty")
        if not valid_items:
            logger.warning(f"{self.stage}: no validation items, selecting on the training loss")
        cfg = self.config
        history = History(self.stage)
        stopper = EarlyStopping(cfg.patience)
        best_state = self.model.state_dict()
        best_optim = self._optimizer_snapshot()
        for epoch in range(1, cfg.max_epochs + 1):
            lr = scheduler_lr(epoch - 1, cfg.max_lr, cfg.max_epochs)
            self.optimizer.lr = lr
            if self.on_epoch_start:
                self.on_epoch_start(epoch)
            train_loss, train_terms = self._train_epoch(epoch, train_items)
            if valid_items:
                valid_loss, valid_terms = self.evaluate(valid_items)
            else:
                valid_loss, valid_terms = train_loss, dict(train_terms)
            if self.on_epoch_end:
                train_terms.update(self.on_epoch_end(epoch) or {})
            history.records.append(EpochRecord(epoch, 'train', train_loss, lr, train_terms))
            history.records.append(EpochRecord(epoch, 'valid', valid_loss, lr, valid_terms))
            metrics.record_epoch(self.stage, epoch, train_loss, valid_loss, lr)
            structured_logger.log_epoch(self.stage, epoch, train_loss, valid_loss, lr)

            should_stop = stopper.update(valid_loss)
            if stopper.improved:
                best_state = self.model.state_dict()
                best_optim = self._optimizer_snapshot()
            if should_stop:
                history.stopped_epoch = epoch
                metrics.record_early_stop(self.stage)
                structured_logger.log_stage(self.stage, 'EARLY_STOP',
                                            f"epoch {epoch}, best epoch {stopper.best_epoch}")
                break
        history.best_epoch = stopper.best_epoch
        history.optimizer_state = best_optim
        self.model.load_state_dict(best_state)
        logger.info(f"{self.stage}: selected epoch {history.best_epoch} "
                    f"(valid loss {stopper.best_loss:.6f})")
        return history
