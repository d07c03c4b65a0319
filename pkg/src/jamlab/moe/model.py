"""Shared PSD encoder, router, three experts and the gated mixture."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..tensor_nn import tensor as T
from ..tensor_nn.nn import Conv1d, Conv2d, Linear, Module, recording
from ..tensor_nn.tensor import GraphError, Tensor
from .layers import AggregatedAttention, CoordAttGLU, GhostModule, MobileMQA, SEFusion, SKSelect

N_CLASSES = 21
N_EXPERTS = 3
EXPERT_NAMES = ("heavy", "mid", "light")
CE_EPS = 1e-9


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    image_h: int = 64
    image_w: int = 64
    psd_bins: int = 128
    n_classes: int = N_CLASSES
    enc_channels: tuple = (8, 16)
    seed: int = 0

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["enc_channels"] = tuple(d["enc_channels"])
        return cls(**d)


class PsdEncoder(Module):
    """Two conv(k=3) + ReLU + stride-2 max-pool blocks over the PSD vector."""

    def __init__(self, n_bins, channels, rng):
        if n_bins % 4:
            raise ModelError("PSD length must be divisible by 4")
        c1, c2 = channels
        self.conv1 = Conv1d(1, c1, 3, rng)
        self.conv2 = Conv1d(c1, c2, 3, rng)
        self.out_channels = c2
        self.out_len = n_bins // 4

    def forward(self, psd):
        x = psd.reshape(psd.shape[0], 1, psd.shape[1])
        x = T.max_pool1d(T.relu(self.conv1(x)), 2)
        return T.max_pool1d(T.relu(self.conv2(x)), 2)


class Expert(Module):
    """Backbone -> global mean pool -> SE fusion with the PSD embedding -> softmax head."""

    width = 0

    def __init__(self, emb_dim, n_classes, rng):
        self.se = SEFusion(emb_dim, self.width, rng)
        # Zero head: every expert starts at the uniform class distribution.
        self.head = Linear(self.width, n_classes, rng, zero=True)

    def features(self, x):
        raise NotImplementedError

    def forward(self, x, emb):
        f = self.features(x).mean(axis=(2, 3))
        return T.softmax(self.head(self.se(emb, f)), axis=-1)


class HeavyExpert(Expert):
    """Strided conv stem, aggregated attention, CoordAttGLU, strided conv."""

    width = 48

    def __init__(self, emb_dim, n_classes, rng, image_hw=(64, 64)):
        self.stem1 = Conv2d(1, 16, 3, rng, stride=2)
        self.stem2 = Conv2d(16, 32, 3, rng, stride=2)
        self.attn = AggregatedAttention(32, 16, rng).build(image_hw[0] // 4, image_hw[1] // 4)
        self.expand = Conv2d(32, 64, 1, rng)
        self.glu = CoordAttGLU(64, 8, 32, rng)
        self.down = Conv2d(32, 48, 3, rng, stride=2)
        super().__init__(emb_dim, n_classes, rng)

    def features(self, x):
        x = T.relu(self.stem1(x))
        x = T.relu(self.stem2(x))
        x = x + self.attn(x)
        x = x + self.glu(self.expand(x))
        return T.relu(self.down(x))


class MidExpert(Expert):
    """Strided stem, Ghost module, SK selection over 3x3 / 5x5 Ghost branches."""

    width = 16

    def __init__(self, emb_dim, n_classes, rng, image_hw=(64, 64)):
        self.stem = Conv2d(1, 8, 3, rng, stride=2)
        self.ghost = GhostModule(8, 16, 3, rng)
        self.sk = SKSelect([GhostModule(16, 16, 3, rng), GhostModule(16, 16, 5, rng)], 16, rng)
        super().__init__(emb_dim, n_classes, rng)

    def features(self, x):
        x = T.relu(self.stem(x))
        x = T.max_pool2d(T.relu(self.ghost(x)), 2)
        return T.relu(self.sk(x))


class LightExpert(Expert):
    """Two conv + max-pool blocks, then a Mobile MQA block."""

    width = 16

    def __init__(self, emb_dim, n_classes, rng, image_hw=(64, 64)):
        self.conv1 = Conv2d(1, 4, 3, rng)
        self.conv2 = Conv2d(4, 16, 3, rng)
        self.mqa = MobileMQA(16, 2, 8, rng)
        super().__init__(emb_dim, n_classes, rng)

    def features(self, x):
        x = T.max_pool2d(T.relu(self.conv1(x)), 2)
        x = T.max_pool2d(T.relu(self.conv2(x)), 2)
        return x + self.mqa(x)


@dataclass
class GateOutput:
    probs: np.ndarray  # (B, N_E)
    argmax: np.ndarray  # (B,)
    fraction: np.ndarray  # f_e: share of samples whose argmax is e
    mean_prob: np.ndarray  # g_bar_e


def gate_stats(probs):
    probs = np.asarray(probs)
    top = argmax_lowest(probs)
    frac = np.bincount(top, minlength=probs.shape[1]) / probs.shape[0]
    return GateOutput(probs, top, frac, probs.mean(axis=0))


def argmax_lowest(probs):
    """Row-wise argmax; ties go to the lowest index."""
    return np.argmax(np.asarray(probs), axis=1)


class MoEModel(Module):
    def __init__(self, config=ModelConfig()):
        rng = np.random.default_rng(config.seed)
        self.config = config
        self.encoder = PsdEncoder(config.psd_bins, config.enc_channels, rng)
        emb = self.encoder.out_channels
        self.router_head = Linear(emb * self.encoder.out_len, N_EXPERTS, rng, zero=True)
        hw = (config.image_h, config.image_w)
        self.experts = [
            HeavyExpert(emb, config.n_classes, rng, hw),
            MidExpert(emb, config.n_classes, rng, hw),
            LightExpert(emb, config.n_classes, rng, hw),
        ]
        self.assign_names()
        self._costs = None

    # inputs

    def prepare(self, tf, psd, dtype=None):
        """Numpy batches -> tensors; images standardised per sample."""
        tf = np.asarray(tf, dtype=np.float64)
        psd = np.asarray(psd, dtype=np.float64)
        if tf.ndim == 2:
            tf, psd = tf[None], psd[None]
        if tf.shape[1:] != (self.config.image_h, self.config.image_w) or psd.shape[1:] != (self.config.psd_bins,):
            raise ModelError(
                f"inputs {tf.shape[1:]}/{psd.shape[1:]} do not match model "
                f"{(self.config.image_h, self.config.image_w)}/{(self.config.psd_bins,)}"
            )
        mu = tf.mean(axis=(1, 2), keepdims=True)
        sd = tf.std(axis=(1, 2), keepdims=True)
        tf = (tf - mu) / np.maximum(sd, 1e-6)
        dtype = dtype or self.encoder.conv1.weight.dtype
        return Tensor(tf[:, None].astype(dtype)), Tensor(psd.astype(dtype))

    # routing

    def encode(self, psd):
        feats = self.encoder(psd)
        return feats, feats.mean(axis=2)

    def gate_logits(self, feats):
        return self.router_head(feats.reshape(feats.shape[0], -1))

    def route(self, psd):
        """Gate probabilities for a prepared PSD tensor (or numpy batch)."""
        if not isinstance(psd, Tensor):
            psd = Tensor(np.atleast_2d(np.asarray(psd, dtype=self.encoder.conv1.weight.dtype)))
        feats, _ = self.encode(psd)
        return gate_stats(T.softmax(self.gate_logits(feats), axis=-1).data)

    # forward passes

    def forward_soft(self, tf, psd, gate_override=None):
        """Mixture of expert class probabilities weighted by the soft gate.

        Returns ``(mixture, gate_probs)`` as tensors. ``gate_override`` (B, N_E)
        replaces the learned gate, e.g. with a one-hot.
        """
        feats, emb = self.encode(psd)
        gate = T.softmax(self.gate_logits(feats), axis=-1)
        if gate_override is not None:
            gate = T.as_tensor(np.asarray(gate_override, dtype=feats.dtype))
        B = tf.shape[0]
        mix = None
        for e, expert in enumerate(self.experts):
            term = gate[:, e].reshape(B, 1) * expert(tf, emb)
            mix = term if mix is None else mix + term
        return mix, gate

    def expert_probs(self, e, tf, psd):
        _, emb = self.encode(psd)
        return self.experts[e](tf, emb)

    def forward_hard(self, tf, psd):
        """Top-1 inference: only the argmax expert runs for each sample.

        Returns ``(probs, chosen, flops)`` as numpy arrays.
        """
        feats, emb = self.encode(psd)
        gate = T.softmax(self.gate_logits(feats), axis=-1).data
        chosen = argmax_lowest(gate)
        B = tf.shape[0]
        probs = np.zeros((B, self.config.n_classes), dtype=gate.dtype)
        for e in np.unique(chosen):
            idx = np.flatnonzero(chosen == e)
            if len(idx) == B:
                probs[:] = self.experts[e](tf, emb).data
            else:
                probs[idx] = self.experts[e](tf[idx], emb[idx]).data
        costs = self.costs()
        flops = np.array([costs["router"] + costs[EXPERT_NAMES[e]] for e in chosen])
        return probs, chosen, flops

    # cost accounting

    def cost_records(self):
        """Per-layer records for one sample: {'router': [...], 'heavy': [...], ...}."""
        dtype = self.encoder.conv1.weight.dtype
        tf = Tensor(np.zeros((1, 1, self.config.image_h, self.config.image_w), dtype))
        psd = Tensor(np.zeros((1, self.config.psd_bins), dtype))
        out = {}
        with recording() as rec:
            feats, emb = self.encode(psd)
            self.gate_logits(feats)
        out["router"] = rec
        for name, expert in zip(EXPERT_NAMES, self.experts):
            with recording() as rec:
                expert(tf, emb)
            out[name] = rec
        return out

    def costs(self):
        if self._costs is None:
            recs = self.cost_records()
            self._costs = {k: int(sum(r["flops"] for r in v)) for k, v in recs.items()}
        return self._costs


# losses


def load_balance_loss(gate_probs):
    """N_E * sum_e f_e * g_bar_e; f_e from hard argmax counts (constant), g_bar differentiable."""
    gate_probs = T.as_tensor(gate_probs)
    B, E = gate_probs.shape
    if B < 1:
        raise ModelError("empty batch")
    top = argmax_lowest(gate_probs.data)
    T.note_branch(top)
    frac = np.bincount(top, minlength=E) / B
    gbar = gate_probs.mean(axis=0)
    return (gbar * frac.astype(gate_probs.dtype)).sum() * float(E)


def load_balance_value(gate_probs):
    g = gate_stats(gate_probs)
    return float(len(g.fraction) * np.sum(g.fraction * g.mean_prob))


@dataclass
class LossBreakdown:
    ce: float
    aux: float
    total: float
    weight: float
    tensor: Tensor = None


def total_loss(probs, labels, aux, weight):
    """CE of the mixture at the true class (eps-guarded log) plus weight * aux."""
    ce = T.cross_entropy_from_probs(probs, labels, CE_EPS)
    aux = T.as_tensor(aux, like=ce)
    total = ce + aux * float(weight) if weight else ce
    return LossBreakdown(float(ce.data), float(aux.data), float(total.data), float(weight), total)


def check_shapes(model, tf, psd):
    if tf.shape[0] != psd.shape[0]:
        raise GraphError("batch sizes of spectrogram and PSD differ")
