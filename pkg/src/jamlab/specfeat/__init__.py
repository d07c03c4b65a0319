"""Dual-domain features: STFT log-magnitude images and multitaper PSD vectors."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .dpss import DpssTapers, EigenSolverError, dpss_tapers
from .mtm import PsdEstimate, mtm_psd, psd_feature_vector
from .stft import (
    Spectrogram,
    StftConfig,
    bin_freqs,
    hann_window,
    log_magnitude_image,
    resize_bilinear,
    spectrogram,
    stft,
)


@dataclass(frozen=True)
class FeatureProfile:
    name: str
    stft: StftConfig = field(default_factory=StftConfig)
    nw: float = 3.0
    n_tapers: int = 5
    psd_nfft: int = 4096
    psd_bins: int = 128

    @property
    def image_shape(self):
        return (self.stft.out_h, self.stft.out_w)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["stft"] = StftConfig(**d["stft"])
        return cls(**d)


PROFILES = {
    "desk": FeatureProfile("desk", StftConfig(n_fft=128, out_h=64, out_w=64), psd_bins=128),
    "full": FeatureProfile("full", StftConfig(n_fft=4096, out_h=224, out_w=224), psd_bins=4096),
}


def extract_features(x, profile):
    """(spectrogram image float32 (H, W) in dB, standardised PSD vector float32)."""
    spec = spectrogram(x, profile.stft)
    tapers = dpss_tapers(x.config.n_samples, profile.nw, profile.n_tapers)
    psd = mtm_psd(x, tapers, profile.psd_nfft)
    vec = psd_feature_vector(psd, profile.psd_bins)
    return spec.image.astype(np.float32), vec.astype(np.float32)


def render_image(data, path, colormap="gray", kind="image", size=None):
    from ..plotting import render_image as _render

    return _render(data, path, colormap=colormap, kind=kind, size=size)


__all__ = [
    "DpssTapers",
    "EigenSolverError",
    "FeatureProfile",
    "PROFILES",
    "PsdEstimate",
    "Spectrogram",
    "StftConfig",
    "bin_freqs",
    "dpss_tapers",
    "extract_features",
    "hann_window",
    "log_magnitude_image",
    "mtm_psd",
    "psd_feature_vector",
    "render_image",
    "resize_bilinear",
    "spectrogram",
    "stft",
]
