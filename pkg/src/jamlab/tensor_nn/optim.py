"""AdamW, the warm-up + cosine learning-rate schedule, and early stopping."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 0.05
    warmup_epochs: int = 10
    max_epochs: int = 50
    batch_size: int = 16
    patience: int = 15
    seed: int = 0
    aux_weight: float = 0.01
    router_hold: bool = True  # keep gating uniform (router frozen) during warm-up

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.patience < 1 or self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("patience, batch_size and max_epochs must be >= 1")
        if self.aux_weight < 0 or self.weight_decay < 0 or self.warmup_epochs < 0:
            raise ValueError("aux_weight, weight_decay and warmup_epochs must be >= 0")

    def to_dict(self):
        return asdict(self)


def adamw_step(params, lr, weight_decay, betas=BETAS, eps=ADAM_EPS):
    """One decoupled-weight-decay Adam update, in place.

    Decay multiplies the value by ``1 - lr * weight_decay`` before the Adam
    step and never enters the moment estimates. Parameters without a gradient
    are only decayed.
    """
    b1, b2 = betas
    for p in params:
        if weight_decay:
            p.data *= p.data.dtype.type(1.0 - lr * weight_decay)
        g = p.grad
        if g is None:
            continue
        p.step += 1
        p.m = b1 * p.m + (1.0 - b1) * g
        p.v = b2 * p.v + (1.0 - b2) * g * g
        m_hat = p.m / (1.0 - b1**p.step)
        v_hat = p.v / (1.0 - b2**p.step)
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.data.dtype)


def lr_at(epoch, cfg):
    """Learning rate for ``epoch`` (0-based).

    Warm-up: ``lr * (epoch + 1) / warmup_epochs`` for epoch < warmup_epochs.
    Afterwards cosine annealing from ``lr`` at epoch == warmup_epochs down to 0
    at the final epoch ``max_epochs - 1``.
    """
    if not 0 <= epoch < cfg.max_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.max_epochs})")
    w = cfg.warmup_epochs
    if epoch < w:
        return cfg.lr * (epoch + 1) / w
    span = cfg.max_epochs - 1 - w
    if span <= 0:
        return cfg.lr
    progress = (epoch - w) / span
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def early_stopper(history, patience):
    """Return ``(stop, best_index)`` for a validation-accuracy history.

    Stops once the last ``patience`` entries all fail to beat the best value
    seen before them. The best index is the first epoch reaching the maximum.
    """
    if not history:
        return False, -1
    best = int(np.argmax(history))
    stop = len(history) - 1 - best >= patience
    return stop, best
