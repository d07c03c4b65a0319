"""Parameters, modules and the basic trainable layers."""
from __future__ import annotations

import contextvars
import math
from contextlib import contextmanager

import numpy as np

from . import tensor as T
from .tensor import DEFAULT_DTYPE, Tensor

_ledger = contextvars.ContextVar("jamlab_ledger", default=None)


@contextmanager
def recording():
    """Collect per-layer cost records from every forward pass run inside."""
    records = []
    token = _ledger.set(records)
    try:
        yield records
    finally:
        _ledger.reset(token)


def record(**fields):
    records = _ledger.get()
    if records is not None:
        records.append(fields)


class Parameter(Tensor):
    """Trainable leaf tensor carrying its AdamW moment buffers."""

    def __init__(self, data):
        super().__init__(np.asarray(data), requires_grad=True)
        self.m = np.zeros_like(self.data)
        self.v = np.zeros_like(self.data)
        self.step = 0

    def astype(self, dtype):
        self.data = self.data.astype(dtype)
        self.m = self.m.astype(dtype)
        self.v = self.v.astype(dtype)
        if self.grad is not None:
            self.grad = self.grad.astype(dtype)


class Module:
    name = ""

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def children(self):
        for key, val in vars(self).items():
            if isinstance(val, Module):
                yield key, val
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield f"{key}.{i}", item

    def named_parameters(self, prefix=""):
        for key, val in vars(self).items():
            if isinstance(val, Parameter):
                yield prefix + key, val
        for key, child in self.children():
            yield from child.named_parameters(prefix + key + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def assign_names(self, prefix=""):
        """Give every submodule its dotted path; used by cost records."""
        self.name = prefix.rstrip(".")
        for key, child in self.children():
            child.assign_names(prefix + key + ".")
        return self

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype):
        for p in self.parameters():
            p.astype(dtype)
        return self

    def num_params(self):
        return int(sum(p.data.size for p in self.parameters()))

    def state_dict(self):
        return {k: p.data.copy() for k, p in self.named_parameters()}

    def load_state_dict(self, state):
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for k, p in own.items():
            arr = np.asarray(state[k])
            if arr.shape != p.data.shape:
                raise ValueError(f"{k}: shape {arr.shape} != {p.data.shape}")
            p.data = arr.astype(p.data.dtype)


def uniform_init(rng, shape, fan_in, dtype=DEFAULT_DTYPE):
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Linear(Module):
    """y = x @ W + b over the last axis; leading axes are rows."""

    def __init__(self, n_in, n_out, rng, bias=True, zero=False):
        self.n_in, self.n_out = n_in, n_out
        w = np.zeros((n_in, n_out), DEFAULT_DTYPE) if zero else uniform_init(rng, (n_in, n_out), n_in)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(n_out, DEFAULT_DTYPE)) if bias else None

    def forward(self, x):
        y = T.matmul(x, self.weight) if x.ndim > 1 else T.matmul(x.reshape(1, -1), self.weight).reshape(-1)
        if self.bias is not None:
            y = y + self.bias
        rows = int(np.prod(x.shape[1:-1])) if x.ndim > 2 else 1
        record(
            name=self.name, kind="dense", H=rows, W=1, k_size=1, C_in=0, C_out=0,
            N_in=self.n_in, N_out=self.n_out, flops=2 * rows * self.n_in * self.n_out,
            params=self.n_in * self.n_out + (self.n_out if self.bias is not None else 0),
        )
        return y


class Conv2d(Module):
    def __init__(self, c_in, c_out, k, rng, stride=1, padding=None, groups=1, bias=True):
        if groups not in (1, c_in):
            raise ValueError("groups must be 1 or c_in")
        if groups != 1 and c_out != c_in:
            raise ValueError("depthwise conv needs c_out == c_in")
        self.c_in, self.c_out, self.k = c_in, c_out, k
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        self.groups = groups
        fan_in = (c_in // groups) * k * k
        self.weight = Parameter(uniform_init(rng, (c_out, c_in // groups, k, k), fan_in))
        self.bias = Parameter(np.zeros(c_out, DEFAULT_DTYPE)) if bias else None

    def forward(self, x):
        y = T.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.groups)
        H, W = y.shape[-2:]
        cin_g = self.c_in // self.groups
        record(
            name=self.name, kind="conv", H=H, W=W, k_size=self.k, C_in=cin_g, C_out=self.c_out,
            N_in=0, N_out=0, flops=2 * H * W * self.k**2 * cin_g * self.c_out,
            params=self.weight.data.size + (self.c_out if self.bias is not None else 0),
        )
        return y


class Conv1d(Module):
    def __init__(self, c_in, c_out, k, rng, stride=1, padding=None, bias=True):
        self.c_in, self.c_out, self.k = c_in, c_out, k
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        self.weight = Parameter(uniform_init(rng, (c_out, c_in, k), c_in * k))
        self.bias = Parameter(np.zeros(c_out, DEFAULT_DTYPE)) if bias else None

    def forward(self, x):
        y = T.conv1d(x, self.weight, self.bias, self.stride, self.padding)
        L = y.shape[-1]
        record(
            name=self.name, kind="conv1d", H=1, W=L, k_size=self.k, C_in=self.c_in, C_out=self.c_out,
            N_in=0, N_out=0, flops=2 * L * self.k * self.c_in * self.c_out,
            params=self.weight.data.size + (self.c_out if self.bias is not None else 0),
        )
        return y


def attention_cost(name, n_query, n_key, dim, heads=1, params=0):
    """Record the two attention matmuls (scores and weighted values).

    ``params`` carries trainable values owned by the attention itself
    (embeddings, scales, biases) that no dense or conv record counts.
    """
    record(
        name=name, kind="attention", H=n_query, W=n_key, k_size=1, C_in=dim, C_out=heads,
        N_in=0, N_out=0, flops=2 * 2 * heads * n_query * n_key * dim, params=params,
    )
