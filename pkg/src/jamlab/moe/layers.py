"""Mechanism layers used inside the three experts and the fusion path."""
from __future__ import annotations

import math

import numpy as np

from ..tensor_nn import tensor as T
from ..tensor_nn.nn import Conv1d, Conv2d, Linear, Module, Parameter, attention_cost, record
from ..tensor_nn.tensor import DEFAULT_DTYPE, GraphError

MASK_VALUE = -1e9


def to_tokens(x):
    """(B, C, H, W) -> (B, H*W, C)."""
    B, C, H, W = x.shape
    return x.reshape(B, C, H * W).transpose(0, 2, 1)


def from_tokens(t, H, W):
    B, N, C = t.shape
    return t.transpose(0, 2, 1).reshape(B, C, H, W)


class CoordAttGLU(Module):
    """Gated linear unit whose gate branch is re-weighted by per-axis attention.

    The input channels split into Z1 (attention branch) and Z2 (gate). Z1 is
    mean-pooled along width and along height, the two profiles share a 1x1
    transform + ReLU, then separate 1x1 maps and sigmoids give g_h and g_w.
    """

    def __init__(self, channels, mid, c_out, rng):
        if channels % 2:
            raise GraphError("CoordAttGLU needs an even channel count")
        half = channels // 2
        self.channels = channels
        self.f_conv = Conv1d(half, mid, 1, rng)
        self.f_h = Conv1d(mid, half, 1, rng)
        self.f_w = Conv1d(mid, half, 1, rng)
        self.out = Conv2d(half, c_out, 1, rng)

    def gates(self, z1):
        H, W = z1.shape[-2:]
        zh = z1.mean(axis=3)
        zw = z1.mean(axis=2)
        f = T.relu(self.f_conv(T.concat([zh, zw], axis=2)))
        fh, fw = f[:, :, :H], f[:, :, H:]
        return T.sigmoid(self.f_h(fh)), T.sigmoid(self.f_w(fw))

    def attend(self, z):
        if z.shape[1] != self.channels:
            raise GraphError(f"expected {self.channels} channels, got {z.shape[1]}")
        z1, z2 = T.split(z, 2, axis=1)
        gh, gw = self.gates(z1)
        B, C, H, W = z1.shape
        y_att = z1 * gh.reshape(B, C, H, 1) * gw.reshape(B, C, 1, W)
        return y_att, z2

    def forward(self, z):
        y_att, z2 = self.attend(z)
        return self.out(T.gelu(y_att) * z2)


class GhostModule(Module):
    """Primary k x k conv to half the outputs, depthwise 3x3 'ghost' maps for the rest."""

    def __init__(self, c_in, c_out, k, rng, stride=1):
        if c_out % 2:
            raise GraphError("Ghost module needs an even output channel count")
        self.primary = Conv2d(c_in, c_out // 2, k, rng, stride=stride)
        self.cheap = Conv2d(c_out // 2, c_out // 2, 3, rng, groups=c_out // 2)

    def set_cheap_identity(self):
        w = np.zeros_like(self.cheap.weight.data)
        w[:, 0, 1, 1] = 1.0
        self.cheap.weight.data = w
        self.cheap.bias.data = np.zeros_like(self.cheap.bias.data)

    def forward(self, x):
        y = self.primary(x)
        return T.concat([y, self.cheap(y)], axis=1)


class SKSelect(Module):
    """Split-fuse-select over parallel branches with per-channel softmax weights."""

    def __init__(self, branches, channels, rng):
        if len(branches) < 2:
            raise GraphError("SK selection needs at least two branches")
        self.branches = list(branches)
        self.select = [Linear(channels, channels, rng) for _ in branches]
        self.last_attention = None

    def forward(self, x):
        us = [b(x) for b in self.branches]
        shape = us[0].shape
        if any(u.shape != shape for u in us):
            raise GraphError(f"branch outputs differ: {[u.shape for u in us]}")
        B, C = shape[:2]
        total = us[0]
        for u in us[1:]:
            total = total + u
        z = total.mean(axis=(2, 3))
        logits = T.stack([fc(z) for fc in self.select], axis=1)
        a = T.softmax(logits, axis=1)
        self.last_attention = a.data
        out = None
        for q, u in enumerate(us):
            term = a[:, q, :].reshape(B, C, 1, 1) * u
            out = term if out is None else out + term
        return out


def mqa_attention(q, k, v, d_k):
    """softmax(q k^T / sqrt(d_k)) v with one shared key/value head.

    q: (B, heads, N, d_k); k, v: (B, M, d_k). Returns (output, weights).
    """
    kt = k.transpose(0, 2, 1).reshape(k.shape[0], 1, k.shape[2], k.shape[1])
    scores = T.matmul(q, kt) * (1.0 / math.sqrt(d_k))
    a = T.softmax(scores, axis=-1)
    vv = v.reshape(v.shape[0], 1, v.shape[1], v.shape[2])
    return T.matmul(a, vv), a


class MobileMQA(Module):
    """Multi-query attention: per-head queries, one K/V head on a stride-2 reduced map."""

    def __init__(self, channels, heads, d_k, rng):
        self.heads, self.d_k = heads, d_k
        self.wq = Linear(channels, heads * d_k, rng, bias=False)
        self.sr = Conv2d(channels, channels, 3, rng, stride=2, groups=channels)
        self.wk = Linear(channels, d_k, rng, bias=False)
        self.wv = Linear(channels, d_k, rng, bias=False)
        self.wo = Linear(heads * d_k, channels, rng)
        self.last_attention = None

    def forward(self, x):
        B, C, H, W = x.shape
        q = self.wq(to_tokens(x))
        q = q.reshape(B, H * W, self.heads, self.d_k).transpose(0, 2, 1, 3)
        red = to_tokens(self.sr(x))
        k, v = self.wk(red), self.wv(red)
        out, a = mqa_attention(q, k, v, self.d_k)
        self.last_attention = a.data
        attention_cost(self.name + ".attn", H * W, red.shape[1], self.d_k, self.heads)
        out = out.transpose(0, 2, 1, 3).reshape(B, H * W, self.heads * self.d_k)
        return from_tokens(self.wo(out), H, W)


class AggregatedAttention(Module):
    """Each pixel attends to its k x k neighbourhood and to a pooled global map.

    Local and global similarities are concatenated, scaled by
    ``alpha * log(n_keys)``, offset by a learnable per-slot bias and normalised
    with one softmax. Neighbours falling outside the map are masked out. A
    learnable query embedding is added to every query.
    """

    def __init__(self, channels, dim, rng, window=3, pool=2):
        if window % 2 == 0:
            raise GraphError("window must be odd")
        self.window, self.pool, self.dim = window, pool, dim
        self.wq = Linear(channels, dim, rng, bias=False)
        self.wk = Linear(channels, dim, rng, bias=False)
        self.wv = Linear(channels, dim, rng, bias=False)
        self.wo = Linear(dim, channels, rng)
        self.query_embed = Parameter(np.zeros(dim, DEFAULT_DTYPE))
        self.alpha = Parameter(np.array([1.0 / math.sqrt(dim)], DEFAULT_DTYPE))
        self.bias = None
        self.last_attention = None

    def _pool_size(self, H, W):
        p = min(self.pool, H, W)
        if H % p or W % p:
            raise GraphError(f"pool {p} must divide map {H}x{W}")
        return p

    def _ensure_bias(self, n_slots):
        if self.bias is None:
            self.bias = Parameter(np.zeros(n_slots, DEFAULT_DTYPE))
        elif self.bias.shape[0] != n_slots:
            raise GraphError(f"bias built for {self.bias.shape[0]} keys, map needs {n_slots}")

    def build(self, H, W):
        """Create the positional bias for an H x W map (needed before training)."""
        p = self._pool_size(H, W)
        self._ensure_bias(self.window**2 + (H // p) * (W // p))
        return self

    def forward(self, x):
        B, C, H, W = x.shape
        r = self.window // 2
        if self.window > 2 * min(H, W) + 1:
            raise GraphError(f"window {self.window} larger than map {H}x{W}")
        p = self._pool_size(H, W)
        kk = self.window**2
        n_glob = (H // p) * (W // p)
        self._ensure_bias(kk + n_glob)
        d = self.dim

        tok = to_tokens(x)
        q = self.wq(tok) + self.query_embed  # (B, N, d)
        k_map = from_tokens(self.wk(tok), H, W)
        v_map = from_tokens(self.wv(tok), H, W)
        k_loc = T.unfold2d(k_map, self.window, r).reshape(B, d, H * W, kk).transpose(0, 2, 3, 1)
        v_loc = T.unfold2d(v_map, self.window, r).reshape(B, d, H * W, kk).transpose(0, 2, 3, 1)

        pooled = T.avg_pool2d(x, p) if p > 1 else x
        g_tok = to_tokens(pooled)
        # the global keys reuse wk / wv, so their weights are counted once
        k_glob, v_glob = T.matmul(g_tok, self.wk.weight), T.matmul(g_tok, self.wv.weight)
        n_g = g_tok.shape[1]
        for proj in (self.wk, self.wv):
            record(
                name=proj.name + ".global", kind="dense", H=n_g, W=1, k_size=1, C_in=0, C_out=0,
                N_in=C, N_out=d, flops=2 * n_g * C * d, params=0,
            )

        s_loc = (q.reshape(B, H * W, 1, d) * k_loc).sum(axis=-1)
        s_glob = T.matmul(q, k_glob.transpose(0, 2, 1))
        s = T.concat([s_loc, s_glob], axis=-1)

        valid = np.lib.stride_tricks.sliding_window_view(
            np.pad(np.ones((H, W)), r), (self.window, self.window)
        ).reshape(H * W, kk)
        mask = np.concatenate([(1.0 - valid) * MASK_VALUE, np.zeros((H * W, n_glob))], axis=1).astype(x.dtype)
        logits = s * (self.alpha * float(math.log(kk + n_glob))) + self.bias + mask
        a = T.softmax(logits, axis=-1)
        self.last_attention = a.data

        a_loc, a_glob = a[:, :, :kk], a[:, :, kk:]
        out = (a_loc.reshape(B, H * W, kk, 1) * v_loc).sum(axis=2) + T.matmul(a_glob, v_glob)
        own = self.query_embed.data.size + self.alpha.data.size + self.bias.data.size
        attention_cost(self.name + ".attn", H * W, kk + n_glob, d, params=own)
        return from_tokens(self.wo(out), H, W)


class SEFusion(Module):
    """Channel gate sigmoid(W e + b) from the PSD embedding e scales expert features."""

    def __init__(self, emb_dim, channels, rng):
        self.gate = Linear(emb_dim, channels, rng)

    def forward(self, emb, features):
        g = T.sigmoid(self.gate(emb))
        if features.ndim == 4:
            g = g.reshape(g.shape[0], g.shape[1], 1, 1)
        return features * g
