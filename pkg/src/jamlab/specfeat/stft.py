"""Hann-windowed STFT and the gamma-compressed log-magnitude image."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

FLOOR_DB = -120.0


@dataclass(frozen=True)
class StftConfig:
    n_win: int = 128
    n_fft: int = 4096
    hop: int = 11
    gamma: float = 0.9
    epsilon: float = 1e-12
    out_h: int | None = 224
    out_w: int | None = 224
    periodic: bool = True
    floor_db: float = FLOOR_DB

    def __post_init__(self):
        if not 1 <= self.hop <= self.n_win <= self.n_fft:
            raise ValueError("need 1 <= hop <= n_win <= n_fft")
        if self.gamma <= 0 or self.epsilon <= 0:
            raise ValueError("gamma and epsilon must be positive")


@dataclass
class Spectrogram:
    image: np.ndarray  # (rows = frequency, ascending with DC in the middle; cols = time)
    freqs: np.ndarray
    times: np.ndarray
    config: StftConfig


def hann_window(n_win, periodic=True):
    """sin^2(pi n / D) with D = n_win (periodic) or n_win - 1 (symmetric)."""
    if n_win < 2:
        raise ValueError("window length must be >= 2")
    denom = n_win if periodic else n_win - 1
    return np.sin(np.pi * np.arange(n_win) / denom) ** 2


def n_frames(n, cfg):
    return (n - cfg.n_win) // cfg.hop + 1


def stft(x, cfg, fs=None):
    """Complex STFT matrix X[m, k] of shape (frames, n_fft).

    Each row is the n_fft-point DFT of the windowed frame zero-padded at the
    end, with time measured from the frame start.
    """
    data = np.asarray(getattr(x, "data", x))
    if data.shape[0] < cfg.n_win:
        raise ValueError(f"signal of {data.shape[0]} samples is shorter than one window ({cfg.n_win})")
    w = hann_window(cfg.n_win, cfg.periodic)
    m = n_frames(data.shape[0], cfg)
    frames = np.lib.stride_tricks.sliding_window_view(data, cfg.n_win)[:: cfg.hop][:m]
    return np.fft.fft(frames * w, n=cfg.n_fft, axis=1)


def bin_freqs(n_fft, fs):
    """Natural-order bin frequencies: k fs/n_fft, wrapped to negative above n_fft/2."""
    k = np.arange(n_fft)
    return np.where(k < n_fft / 2, k, k - n_fft) * fs / n_fft


def _axis_weights(n_in, n_out):
    src = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def resize_bilinear(img, out_h, out_w):
    """Bilinear resize with half-pixel centres and edge clamping."""
    img = np.asarray(img, dtype=np.float64)
    lo, hi, t = _axis_weights(img.shape[0], out_h)
    rows = img[lo] * (1 - t)[:, None] + img[hi] * t[:, None]
    lo, hi, t = _axis_weights(img.shape[1], out_w)
    return rows[:, lo] * (1 - t) + rows[:, hi] * t


def resize_axis(values, n_out):
    lo, hi, t = _axis_weights(len(values), n_out)
    return values[lo] * (1 - t) + values[hi] * t


def log_magnitude_db(X, gamma, epsilon, floor_db=FLOOR_DB):
    """20 log10(|X|^g / (max |X|^g + eps)), clamped below at floor_db."""
    mag = np.abs(X) ** gamma
    with np.errstate(divide="ignore"):
        img = 20 * np.log10(mag / (mag.max() + epsilon))
    return np.maximum(img, floor_db)


def log_magnitude_image(X, cfg, fs=1.0):
    """Max-normalised log-magnitude image, DC centred, resized to out_h x out_w."""
    X = np.asarray(X)
    if X.size == 0:
        raise ValueError("empty STFT matrix")
    db = log_magnitude_db(X, cfg.gamma, cfg.epsilon, cfg.floor_db)
    img = np.fft.fftshift(db, axes=1).T
    freqs = np.fft.fftshift(bin_freqs(X.shape[1], fs))
    times = (np.arange(X.shape[0]) * cfg.hop + cfg.n_win / 2) / fs
    if cfg.out_h is not None and cfg.out_w is not None:
        img = resize_bilinear(img, cfg.out_h, cfg.out_w)
        freqs = resize_axis(freqs, cfg.out_h)
        times = resize_axis(times, cfg.out_w)
    return Spectrogram(img, freqs, times, cfg)


def spectrogram(x, cfg):
    fs = x.config.fs if hasattr(x, "config") else 1.0
    return log_magnitude_image(stft(x, cfg), cfg, fs)
