"""AdamW with decoupled weight decay, cosine annealing and early stopping."""
import logging
import math

import numpy as np

logger = logging.getLogger(__name__)


def scheduler_lr(step, max_lr, t_max):
    """Cosine annealing: 0.5 * max_lr * (1 + cos(pi * t / T_max)), clamped to 0 past T_max."""
    if t_max <= 0 or step >= t_max:
        return 0.0
    step = max(step, 0)
    return max(0.0, 0.5 * max_lr * (1.0 + math.cos(math.pi * step / t_max)))


class AdamW:
    """Adam with weight decay applied to the weights directly.

    Parameters that are frozen (`requires_grad` False) or received no gradient
    this step are skipped entirely, so they are not decayed either.
    """

    def __init__(self, params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-2,
                 decay_frozen=False):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.decay_frozen = decay_frozen
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.step_count += 1
        beta1, beta2 = self.betas
        correction1 = 1.0 - beta1 ** self.step_count
        correction2 = 1.0 - beta2 ** self.step_count
        for i, p in enumerate(self.params):
            if not p.requires_grad or p.grad is None:
                if self.decay_frozen and self.weight_decay:
                    p.data = p.data - self.lr * self.weight_decay * p.data
                continue
            grad = p.grad
            if self.weight_decay:
                p.data = p.data - self.lr * self.weight_decay * p.data
            self.m[i] = beta1 * self.m[i] + (1 - beta1) * grad
            self.v[i] = beta2 * self.v[i] + (1 - beta2) * grad * grad
            m_hat = self.m[i] / correction1
            v_hat = self.v[i] / correction2
            p.data = (p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.data.dtype)

    def state(self):
        """Moments and step counter, for the checkpoint training-state record."""
        state = {'step_count': np.asarray(self.step_count, dtype=np.int64)}
        for i in range(len(self.params)):
            state[f"m.{i}"] = self.m[i]
            state[f"v.{i}"] = self.v[i]
        return state

    def load_state(self, state):
        self.step_count = int(state['step_count'])
        for i in range(len(self.params)):
            self.m[i] = np.asarray(state[f"m.{i}"], dtype=self.params[i].data.dtype)
            self.v[i] = np.asarray(state[f"v.{i}"], dtype=self.params[i].data.dtype)


def clip_grad_norm(params, max_norm):
    """Scale gradients in place so their global L2 norm is at most `max_norm`; returns the norm."""
    grads = [p.grad for p in params if p.grad is not None]
    if not grads:
        return 0.0
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads))
    if max_norm and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return total


class EarlyStopping:
    """Stop after `patience` consecutive epochs without a new strict validation minimum."""

    def __init__(self, patience=4):
        self.patience = patience
        self.best_loss = math.inf
        self.best_epoch = None
        self.counter = 0
        self.epoch = 0

    def update(self, valid_loss):
        """Record one epoch's validation loss; returns True if training should stop."""
        self.epoch += 1
        if valid_loss < self.best_loss:
            self.best_loss = valid_loss
            self.best_epoch = self.epoch
            self.counter = 0
            return False
        self.counter += 1
        return self.counter >= self.patience

    @property
    def improved(self):
        return self.best_epoch == self.epoch


def early_stop(valid_losses, patience=4):
    """Replay a loss history; returns (stop_epoch or None, selected_epoch), both 1-based."""
    stopper = EarlyStopping(patience)
    for loss in valid_losses:
        if stopper.update(loss):
            return stopper.epoch, stopper.best_epoch
    return None, stopper.best_epoch
