"""Soft-gated training with the load-balancing term, and hard-gated evaluation."""
from __future__ import annotations

import logging
import math

import numpy as np

from ..tensor_nn import adamw_step, early_stopper, lr_at
from .model import load_balance_loss, total_loss

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


def split_indices(n, seed, train_frac=0.8):
    """Random 80/20 partition of ``range(n)``; returns (train, val) sorted."""
    perm = np.random.default_rng(seed).permutation(n)
    cut = int(round(train_frac * n))
    return np.sort(perm[:cut]), np.sort(perm[cut:])


def predict(model, tf, psd, batch_size=64):
    """Hard-gated predictions: (class_index, chosen_expert, flops, probs, gate_probs)."""
    preds, chosen, flops, probs, gates = [], [], [], [], []
    for s in range(0, len(tf), batch_size):
        x, p = model.prepare(tf[s : s + batch_size], psd[s : s + batch_size])
        pr, ch, fl = model.forward_hard(x, p)
        g = model.route(p).probs
        preds.append(pr.argmax(axis=1))
        chosen.append(ch)
        flops.append(fl)
        probs.append(pr)
        gates.append(g)
    return (
        np.concatenate(preds),
        np.concatenate(chosen),
        np.concatenate(flops),
        np.concatenate(probs),
        np.concatenate(gates),
    )


def accuracy(model, tf, psd, labels):
    pred = predict(model, tf, psd)[0]
    return float(np.mean(pred == np.asarray(labels) - 1) * 100)


def fit(model, data, cfg, val_data=None, on_epoch=None, trace=None, force_expert=None):
    """Train ``model`` in place; returns the per-epoch history.

    ``data`` and ``val_data`` are ``(tf, psd, labels)`` tuples with class ids
    1..C as labels. When ``val_data`` is omitted the data is split 80/20 with
    ``cfg.seed``. The parameters of the best validation epoch are restored.
    With ``cfg.router_hold`` the router is left out of the updates during the
    warm-up epochs, so every expert first trains under uniform gating.
    If ``trace`` is a list, one ``(epoch, batch, ce, aux, total)`` row is
    appended per mini-batch. ``force_expert`` pins the gate to a one-hot on
    that expert, which turns training into plain single-network training.
    """
    tf, psd, labels = data
    if val_data is None:
        tr, va = split_indices(len(labels), cfg.seed)
        val_data = (tf[va], psd[va], labels[va])
        tf, psd, labels = tf[tr], psd[tr], labels[tr]
    targets = np.asarray(labels) - 1
    params = model.parameters()
    router = model.router_head.parameters()
    router_ids = {id(p) for p in router}
    body = [p for p in params if id(p) not in router_ids]
    rng = np.random.default_rng(cfg.seed)
    history = []
    best_state, val_curve = None, []
    for epoch in range(cfg.max_epochs):
        lr = lr_at(epoch, cfg)
        perm = rng.permutation(len(targets))
        sums = np.zeros(3)
        n_batches = 0
        for s in range(0, len(perm), cfg.batch_size):
            idx = perm[s : s + cfg.batch_size]
            x, p = model.prepare(tf[idx], psd[idx])
            override = None
            if force_expert is not None:
                override = np.zeros((len(idx), len(model.experts)))
                override[:, force_expert] = 1.0
            mix, gate = model.forward_soft(x, p, gate_override=override)
            loss = total_loss(mix, targets[idx], load_balance_loss(gate), cfg.aux_weight)
            if not math.isfinite(loss.total):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}, batch {n_batches}: "
                    f"ce={loss.ce} aux={loss.aux} lr={lr:.3g}"
                )
            loss.tensor.backward()
            adamw_step(body, lr, cfg.weight_decay)
            if not (cfg.router_hold and epoch < cfg.warmup_epochs):
                adamw_step(router, lr, cfg.weight_decay)
            model.zero_grad()
            sums += (loss.ce, loss.aux, loss.total)
            if trace is not None:
                trace.append((epoch, n_batches, loss.ce, loss.aux, loss.total))
            n_batches += 1
        ce, aux, tot = sums / max(n_batches, 1)
        val_oa = accuracy(model, *val_data)
        val_curve.append(val_oa)
        stop, best = early_stopper(val_curve, cfg.patience)
        if best == epoch:
            best_state = model.state_dict()
        row = {"epoch": epoch, "lr": lr, "ce": ce, "aux": aux, "total": tot, "val_oa": val_oa}
        history.append(row)
        log.info("epoch %d lr %.3g ce %.4f aux %.4f val_oa %.2f", epoch, lr, ce, aux, val_oa)
        if on_epoch is not None:
            on_epoch(row)
        if stop:
            break
    if best_state is not None:
        model.load_state_dict(best_state)
    return history
