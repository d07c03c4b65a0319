"""Lossless image output for features and matplotlib figures for evaluation reports."""
from __future__ import annotations

import numpy as np

import matplotlib

matplotlib.use("Agg")
import matplotlib.image as mpimg  # noqa: E402
import matplotlib.pyplot as plt  # noqa: E402

from .specfeat.stft import resize_bilinear  # noqa: E402

# Fixed metadata keeps re-renders byte-identical across runs.
PNG_META = {"Software": None}


def to_unit(data):
    """Affine map of ``data`` onto [0, 1]; constant input maps to 0."""
    data = np.asarray(data, dtype=np.float64)
    lo, hi = float(data.min()), float(data.max())
    if hi <= lo:
        return np.zeros_like(data)
    return (data - lo) / (hi - lo)


def colorize(unit, colormap="gray"):
    """[0, 1] array -> (H, W, 3) uint8. ``gray`` maps 0 to black and 1 to white exactly."""
    if colormap == "gray":
        g = np.round(unit * 255).astype(np.uint8)
        return np.repeat(g[..., None], 3, axis=-1)
    rgba = matplotlib.colormaps[colormap](unit)
    return np.round(rgba[..., :3] * 255).astype(np.uint8)


def psd_canvas(values, size=(224, 224)):
    """Rasterize a curve as black strokes on a white canvas (no axes).

    Column x holds the value at the matching position of ``values``; each
    column is filled between its point and the next one so the stroke stays
    connected.
    """
    h, w = size
    v = np.asarray(values, dtype=np.float64).ravel()
    xs = np.linspace(0, v.size - 1, w)
    y = to_unit(np.interp(xs, np.arange(v.size), v))
    rows = np.round((1 - y) * (h - 1)).astype(int)
    img = np.ones((h, w))
    for x in range(w):
        nxt = rows[min(x + 1, w - 1)]
        lo, hi = sorted((rows[x], nxt))
        img[lo : hi + 1, x] = 0.0
    return img


def render_image(data, path, colormap="gray", kind="image", size=None):
    """Write ``data`` as a PNG. ``kind`` is ``image`` (2-D field) or ``psd`` (1-D curve).

    Returns the (H, W, 3) uint8 array that was written.
    """
    if kind == "psd":
        unit = psd_canvas(data, size or (224, 224))
        colormap = "gray"
    elif kind == "image":
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim != 2:
            raise ValueError("image data must be 2-D")
        if size is not None and tuple(size) != arr.shape:
            arr = resize_bilinear(arr, size[0], size[1])
        unit = to_unit(arr)
    else:
        raise ValueError(f"unknown kind {kind!r}")
    rgb = colorize(unit, colormap)
    mpimg.imsave(path, rgb, format="png", metadata=PNG_META)
    return rgb


def read_png(path):
    """(H, W, 3) uint8 pixels of a PNG written by :func:`render_image`."""
    arr = mpimg.imread(path)
    return np.round(arr[..., :3] * 255).astype(np.uint8)


def _save(fig, path):
    fig.savefig(path, format="png", metadata=PNG_META, dpi=100)
    plt.close(fig)


def confusion_figure(counts, names, path, title="Confusion matrix"):
    counts = np.asarray(counts, dtype=float)
    rows = counts.sum(axis=1, keepdims=True)
    frac = np.divide(counts, rows, out=np.zeros_like(counts), where=rows > 0)
    n = len(names)
    fig, ax = plt.subplots(figsize=(2 + 0.45 * n, 1.5 + 0.45 * n))
    im = ax.imshow(frac, cmap="Blues", vmin=0, vmax=1)
    ax.set_xticks(range(n), names, rotation=90, fontsize=7)
    ax.set_yticks(range(n), names, fontsize=7)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    ax.set_title(title)
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    _save(fig, path)


def usage_figure(usage, path, tiers=("single", "dual", "triple"), experts=("heavy", "mid", "light")):
    """Grouped bars: per tier, the share of samples routed to each expert."""
    usage = np.asarray(usage, dtype=float)
    fig, ax = plt.subplots(figsize=(5, 3.2))
    width = 0.8 / len(experts)
    x = np.arange(len(tiers))
    for e, name in enumerate(experts):
        ax.bar(x + (e - (len(experts) - 1) / 2) * width, usage[:, e] * 100, width, label=name)
    ax.set_xticks(x, tiers)
    ax.set_ylabel("samples routed (%)")
    ax.set_ylim(0, 100)
    ax.legend(frameon=False)
    fig.tight_layout()
    _save(fig, path)


def history_figure(history, path):
    ep = [h["epoch"] for h in history]
    fig, ax = plt.subplots(1, 2, figsize=(8, 3))
    ax[0].plot(ep, [h["ce"] for h in history], label="CE")
    ax[0].plot(ep, [h["aux"] for h in history], label="L_aux")
    ax[0].set_xlabel("epoch")
    ax[0].legend(frameon=False)
    ax[1].plot(ep, [h["val_oa"] for h in history])
    ax[1].set_xlabel("epoch")
    ax[1].set_ylabel("validation OA (%)")
    fig.tight_layout()
    _save(fig, path)
