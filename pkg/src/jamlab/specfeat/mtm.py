"""Multitaper PSD and the standardised router feature vector."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .stft import bin_freqs

PSD_TINY = 1e-30


@dataclass
class PsdEstimate:
    values: np.ndarray  # linear power per bin, natural DFT order
    log_values: np.ndarray  # 10 log10(values)
    freqs: np.ndarray


def _fold(y, n_fft):
    """Alias a sequence onto n_fft points so its FFT samples the full-length DTFT."""
    n = y.shape[-1]
    reps = -(-n // n_fft)
    pad = reps * n_fft - n
    if pad:
        y = np.concatenate([y, np.zeros(y.shape[:-1] + (pad,), dtype=y.dtype)], axis=-1)
    return y.reshape(y.shape[:-1] + (reps, n_fft)).sum(axis=-2)


def eigencoefficients(x, tapers, n_fft):
    data = np.asarray(getattr(x, "data", x))
    v = tapers.tapers
    if data.shape[0] != v.shape[1]:
        raise ValueError(f"taper length {v.shape[1]} != signal length {data.shape[0]}")
    return np.fft.fft(_fold(data[None, :] * v, n_fft), axis=-1)


def mtm_psd(x, tapers, n_fft):
    """Mean of |Y_p(f)|^2 over tapers at f = k / n_fft cycles per sample."""
    Y = eigencoefficients(x, tapers, n_fft)
    values = np.maximum(np.mean(np.abs(Y) ** 2, axis=0), PSD_TINY)
    fs = x.config.fs if hasattr(x, "config") else 1.0
    return PsdEstimate(values, 10 * np.log10(values), bin_freqs(n_fft, fs))


def psd_feature_vector(psd, n_bins):
    """DC-centred log PSD, mean-pooled to ``n_bins``, standardised per vector."""
    logp = np.fft.fftshift(psd.log_values)
    n = logp.shape[0]
    if not 1 <= n_bins <= n:
        raise ValueError(f"n_bins must lie in [1, {n}]")
    if n % n_bins == 0:
        pooled = logp.reshape(n_bins, -1).mean(axis=1)
    else:
        pooled = np.array([c.mean() for c in np.array_split(logp, n_bins)])
    sd = pooled.std()
    if sd < 1e-12:
        return np.zeros(n_bins)
    return (pooled - pooled.mean()) / sd
