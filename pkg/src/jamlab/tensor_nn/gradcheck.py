"""Finite-difference verification of reverse-mode gradients."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import Module, Parameter


@dataclass
class GradReport:
    max_rel_error: float
    worst_param: str
    worst_index: tuple
    analytic: float
    numeric: float
    n_checked: int
    n_kinks: int = 0  # probes re-run with a smaller step after straddling a kink


def _collect(params):
    if isinstance(params, Module):
        return list(params.named_parameters())
    if isinstance(params, dict):
        return list(params.items())
    return [(f"p{i}", p) for i, p in enumerate(params)]


def _evaluate(loss_fn):
    with T.record_branches() as branches:
        value = float(loss_fn().data)
    return value, branches


def _same(a, b):
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def _estimate(loss_fn, flat, i, h, f0, b0):
    """Derivative along entry ``i`` from points on the same smooth piece as x.

    Returns ``(value, kinked)``; ``value`` is ``None`` when both ``x + h`` and
    ``x - h`` lie across a switch point.
    """
    orig = flat[i]

    def at(k):
        flat[i] = orig + k * h
        try:
            return _evaluate(loss_fn)
        finally:
            flat[i] = orig

    (fp, bp), (fm, bm) = at(1), at(-1)
    right, left = _same(bp, b0), _same(bm, b0)
    if right and left:
        return (fp - fm) / (2 * h), False
    if right:
        fp2, b2 = at(2)
        if _same(b2, b0):
            return (-3 * f0 + 4 * fp - fp2) / (2 * h), True
    if left:
        fm2, b2 = at(-2)
        if _same(b2, b0):
            return (3 * f0 - 4 * fm + fm2) / (2 * h), True
    return None, True


def grad_check(loss_fn, params, step=1e-5, floor=1e-6, max_per_param=None, rng=None, shrink=2):
    """Compare reverse-mode gradients of ``loss_fn()`` with central differences.

    Every parameter is cast to float64 first, so ``loss_fn`` must build its
    graph from the parameters (and float64 inputs) on each call. Relative
    error per entry is ``|a - n| / max(|a|, |n|, floor)``. With
    ``max_per_param`` set, a random subset of entries of each tensor is probed.

    ReLU, max-pool and argmax make the loss piecewise smooth. Each probe
    compares the discrete choices those ops make (``record_branches``) with
    the ones at x. A step that crosses a switch point on one side is answered
    with the second-order one-sided difference from the other side; when
    both sides cross, the step is divided by 10 (at most ``shrink`` times,
    then plain central differences). ``n_kinks`` counts such probes;
    ``shrink=0`` gives plain central differences throughout.
    """
    named = _collect(params)
    for _, p in named:
        p.astype(np.float64)
        p.grad = None
    loss = loss_fn()
    if loss.data.size != 1:
        raise ValueError("grad_check needs a scalar loss")
    loss.backward()
    f0, b0 = _evaluate(loss_fn)
    analytic = {name: (p.grad if p.grad is not None else np.zeros_like(p.data)).copy() for name, p in named}
    rng = rng or np.random.default_rng(0)

    worst = GradReport(0.0, "", (), 0.0, 0.0, 0)
    count = kinks = 0
    for name, p in named:
        flat = p.data.reshape(-1)
        idxs = np.arange(flat.size)
        if max_per_param is not None and flat.size > max_per_param:
            idxs = rng.choice(flat.size, size=max_per_param, replace=False)
        for i in idxs:
            h, num, kinked = step, None, False
            if shrink > 0:
                for _ in range(shrink + 1):
                    num, k = _estimate(loss_fn, flat, i, h, f0, b0)
                    kinked |= k
                    if num is not None:
                        break
                    h /= 10
                else:
                    h *= 10
                kinks += kinked
            if num is None:
                orig = flat[i]
                flat[i] = orig + h
                fp = float(loss_fn().data)
                flat[i] = orig - h
                fm = float(loss_fn().data)
                flat[i] = orig
                num = (fp - fm) / (2 * h)
            ana = float(analytic[name].reshape(-1)[i])
            err = abs(ana - num) / max(abs(ana), abs(num), floor)
            count += 1
            if err >= worst.max_rel_error:
                worst = GradReport(err, name, np.unravel_index(i, p.data.shape), ana, num, 0)
    worst.n_checked = count
    worst.n_kinks = kinks
    return worst


def check_inputs(fn, *arrays, **kw):
    """Gradient-check ``fn(*tensors)`` with respect to its own inputs."""
    params = [Parameter(np.asarray(a, dtype=np.float64)) for a in arrays]
    return grad_check(lambda: fn(*params), params, **kw)
