"""Confusion matrix, OA / precision / recall / F1, FLOPs ledger and expert usage."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

TIER_NAMES = ("single", "dual", "triple")


class MetricsError(ValueError):
    pass


@dataclass(frozen=True)
class ConfusionMatrix:
    """counts[i, j]: samples of true class i+1 predicted as class j+1."""

    counts: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.counts)
        if c.ndim != 2 or c.shape[0] != c.shape[1]:
            raise MetricsError(f"confusion matrix must be square, got {c.shape}")
        if (c < 0).any():
            raise MetricsError("negative counts")
        c = c.astype(np.int64)
        c.setflags(write=False)
        object.__setattr__(self, "counts", c)

    @property
    def n_classes(self):
        return self.counts.shape[0]

    @property
    def total(self):
        return int(self.counts.sum())

    def merge(self, other):
        if other.n_classes != self.n_classes:
            raise MetricsError("cannot merge matrices of different size")
        return ConfusionMatrix(self.counts + other.counts)

    def to_csv(self, names=None):
        names = names or [str(i + 1) for i in range(self.n_classes)]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["truth\\pred"] + list(names))
        for name, row in zip(names, self.counts):
            w.writerow([name] + [int(v) for v in row])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text):
        rows = list(csv.reader(io.StringIO(text)))
        return cls(np.array([[int(v) for v in r[1:]] for r in rows[1:]]))


def confusion(truths, preds, n_classes):
    """Accumulate a C x C confusion matrix from labels in 1..C."""
    truths = np.asarray(truths, dtype=np.int64).ravel()
    preds = np.asarray(preds, dtype=np.int64).ravel()
    if truths.shape != preds.shape:
        raise MetricsError("truths and predictions differ in length")
    for arr in (truths, preds):
        if arr.size and (arr.min() < 1 or arr.max() > n_classes):
            raise MetricsError(f"labels must lie in 1..{n_classes}")
    flat = (truths - 1) * n_classes + (preds - 1)
    return ConfusionMatrix(np.bincount(flat, minlength=n_classes * n_classes).reshape(n_classes, n_classes))


def _check(cm):
    if cm.total == 0:
        raise MetricsError("empty confusion matrix")


def oa(cm):
    """Overall accuracy in percent."""
    _check(cm)
    return float(np.trace(cm.counts) / cm.total * 100.0)


def _safe_div(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return np.divide(a, b, out=np.zeros_like(a), where=b > 0)


def precision_recall(cm):
    """Per-class (precision, recall); a zero denominator gives 0."""
    _check(cm)
    tp = np.diag(cm.counts)
    return _safe_div(tp, cm.counts.sum(axis=0)), _safe_div(tp, cm.counts.sum(axis=1))


def f1(cm):
    p, r = precision_recall(cm)
    return _safe_div(2 * p * r, p + r)


# FLOPs ledger


@dataclass
class FlopsLedger:
    """Per-layer records grouped by part ("router", "heavy", "mid", "light")."""

    records: dict

    def total(self, part):
        return int(sum(r["flops"] for r in self.records[part]))

    def params(self, part):
        return int(sum(r["params"] for r in self.records[part]))

    @property
    def parts(self):
        return list(self.records)

    @property
    def experts(self):
        return [p for p in self.records if p != "router"]

    def hard_route_cost(self, expert):
        return self.total("router") + self.total(expert)

    def expected_cost(self, usage):
        """Mean charged FLOPs when experts are chosen with probabilities ``usage``."""
        usage = np.asarray(usage, dtype=float)
        if usage.shape != (len(self.experts),) or (usage < 0).any() or abs(usage.sum() - 1) > 1e-9:
            raise MetricsError("usage must be a distribution over the experts")
        return float(sum(u * self.hard_route_cost(e) for u, e in zip(usage, self.experts)))

    def to_csv(self):
        cols = ["part", "name", "kind", "H", "W", "k_size", "C_in", "C_out", "N_in", "N_out", "flops", "params"]
        buf = io.StringIO()
        w = csv.DictWriter(buf, cols, lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        for part, recs in self.records.items():
            for r in recs:
                w.writerow({"part": part, **{c: r.get(c, "") for c in cols[1:]}})
        return buf.getvalue()


def flops_of_model(model):
    recs = model.cost_records()
    for part, rows in recs.items():
        for r in rows:
            if any(not isinstance(r.get(k, 0), (int, np.integer)) for k in ("H", "W", "flops")):
                raise MetricsError(f"{part}/{r.get('name')}: non-static shape in ledger")
    return FlopsLedger(recs)


# routing usage


def usage_histogram(chosen, tiers, n_experts=3):
    """3 x N_E table: row t-1 holds expert fractions among samples of tier t.

    Tiers without samples get an all-zero row.
    """
    chosen = np.asarray(chosen, dtype=np.int64)
    tiers = np.asarray(tiers, dtype=np.int64)
    out = np.zeros((3, n_experts))
    for t in (1, 2, 3):
        sel = chosen[tiers == t]
        if sel.size:
            out[t - 1] = np.bincount(sel, minlength=n_experts)[:n_experts] / sel.size
    return out


# report


@dataclass
class EvalReport:
    oa: float
    precision: list
    recall: list
    f1: list
    confusion: list
    class_names: list
    n_samples: int
    flops_mean: float
    flops_percentiles: dict
    usage: list
    usage_tiers: list = field(default_factory=lambda: list(TIER_NAMES))
    expert_names: list = field(default_factory=lambda: ["heavy", "mid", "light"])

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        return cls(**json.loads(text))


def build_report(truths, preds, chosen, flops, tiers, class_names, n_classes=None):
    n_classes = n_classes or len(class_names)
    cm = confusion(truths, preds, n_classes)
    p, r = precision_recall(cm)
    flops = np.asarray(flops, dtype=float)
    return EvalReport(
        oa=oa(cm),
        precision=p.tolist(),
        recall=r.tolist(),
        f1=f1(cm).tolist(),
        confusion=cm.counts.tolist(),
        class_names=list(class_names),
        n_samples=cm.total,
        flops_mean=float(flops.mean()),
        flops_percentiles={str(q): float(np.percentile(flops, q)) for q in (5, 50, 95)},
        usage=usage_histogram(chosen, tiers).tolist(),
    )
