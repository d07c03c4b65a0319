"""Seedable synthesis of the 21 GNSS jamming classes.

Five primitives (single tone, multi-tone, linear chirp, gated pulse and
partial-band noise) are generated at unit mean power, superposed with power
weights for compound classes, scaled to a target jamming-to-noise ratio and
passed through an AWGN channel with noise variance 1.

Randomness comes from numpy's counter-based Philox generator. A dataset has
one root seed; each sample gets its own stream keyed by a hash of
``(root_seed, class_id, jnr, index)`` so samples can be produced in any order
or in parallel.
"""
from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

FS = 20e6
DURATION = 1e-3
TONE_LIMIT = 9.5e6
MTJ_TONES = (5, 7)
MTJ_SPACING = (1.5e6, 3.0e6)
LFM_BANDWIDTH = 10e6
LFM_PERIOD = 1e-3
PULSE_PRI = 1.0 / 6.0 * 1e-3
PULSE_DUTY = 0.3
PBNJ_BANDWIDTH = (0.10, 0.25)
PR_LIMIT_DB = 3.0
PBNJ_TAPS = 127

PRIMITIVES = ("STJ", "MTJ", "LFM", "Pulse", "PBNJ")


class ParameterError(ValueError):
    pass


class CompositionError(ValueError):
    pass


class NormalizationError(ValueError):
    pass


def _build_classes():
    singles = [(p,) for p in PRIMITIVES]
    pairs = [
        ("STJ", "LFM"), ("STJ", "Pulse"), ("STJ", "PBNJ"),
        ("MTJ", "LFM"), ("MTJ", "Pulse"), ("MTJ", "PBNJ"),
        ("LFM", "Pulse"), ("LFM", "PBNJ"), ("Pulse", "PBNJ"),
    ]
    triples = [
        ("STJ", "LFM", "Pulse"), ("STJ", "LFM", "PBNJ"), ("STJ", "Pulse", "PBNJ"),
        ("MTJ", "LFM", "Pulse"), ("MTJ", "LFM", "PBNJ"), ("MTJ", "Pulse", "PBNJ"),
        ("LFM", "Pulse", "PBNJ"),
    ]
    return {i + 1: kinds for i, kinds in enumerate(singles + pairs + triples)}


CLASSES = _build_classes()
CLASS_NAMES = {cid: "+".join(kinds) for cid, kinds in CLASSES.items()}
CLASS_IDS = {name: cid for cid, name in CLASS_NAMES.items()}


def class_id(name):
    """Class id for a name such as ``"STJ+LFM"`` (primitive order as listed)."""
    try:
        return CLASS_IDS[name]
    except KeyError:
        raise ParameterError(f"unknown class {name!r}") from None


def tier(cid):
    """Number of active primitives (1, 2 or 3) for a class id."""
    return len(CLASSES[cid])


# configuration and signal containers


@dataclass(frozen=True)
class SignalConfig:
    fs: float = FS
    duration: float = DURATION

    def __post_init__(self):
        if self.fs <= 0:
            raise ParameterError("fs must be positive")
        if self.n_samples < 2:
            raise ParameterError("need at least two samples")

    @property
    def n_samples(self):
        # guard against fs*duration landing a hair below an integer
        return int(math.floor(self.fs * self.duration + 1e-9))

    def time(self):
        return np.arange(self.n_samples) / self.fs


@dataclass
class IqSignal:
    data: np.ndarray
    config: SignalConfig

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.complex128)
        if self.data.shape != (self.config.n_samples,):
            raise ParameterError(f"expected {self.config.n_samples} samples, got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ParameterError("non-finite samples")

    def power(self):
        return float(np.mean(np.abs(self.data) ** 2))


@dataclass(frozen=True)
class Stj:
    f_c: float
    phi: float = 0.0
    kind = "STJ"


@dataclass(frozen=True)
class Tone:
    f_k: float
    phi_k: float = 0.0


@dataclass(frozen=True)
class Mtj:
    tones: tuple
    kind = "MTJ"


@dataclass(frozen=True)
class Lfm:
    f_start: float
    mu: float
    kind = "LFM"


@dataclass(frozen=True)
class Pulse:
    f_c: float
    pri: float = PULSE_PRI
    tau: float = PULSE_PRI * PULSE_DUTY
    kind = "Pulse"


@dataclass(frozen=True)
class Pbnj:
    f_c: float
    b_jam: float
    kind = "PBNJ"


@dataclass
class JammingSpec:
    class_id: int
    components: list = field(default_factory=list)  # [(PrimitiveParams, power_weight)]
    jnr_db: float = 0.0

    def __post_init__(self):
        if self.class_id not in CLASSES:
            raise ParameterError(f"class_id {self.class_id} not in 1..21")
        if not 1 <= len(self.components) <= 3:
            raise ParameterError("a spec holds 1 to 3 components")
        kinds = tuple(p.kind for p, _ in self.components)
        if len(set(kinds)) != len(kinds) or set(kinds) != set(CLASSES[self.class_id]):
            raise ParameterError(f"components {kinds} do not match class {CLASS_NAMES[self.class_id]}")
        weights = [w for _, w in self.components]
        if min(weights) < 0 or sum(weights) <= 0:
            raise ParameterError("power weights must be >= 0 with a positive sum")

    @property
    def name(self):
        return CLASS_NAMES[self.class_id]


@dataclass(frozen=True)
class ChannelConfig:
    noise_variance: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.noise_variance <= 0:
            raise ParameterError("noise variance must be positive")


# randomness


def derive_seed(root_seed, *keys):
    """128-bit Philox key from a root seed and integer/float keys (blake2b)."""
    h = hashlib.blake2b(digest_size=16)
    h.update(struct.pack("<Q", int(root_seed) & 0xFFFFFFFFFFFFFFFF))
    for k in keys:
        h.update(struct.pack("<d", float(k)))
    return int.from_bytes(h.digest(), "little")


def make_rng(root_seed, *keys):
    """Generator on a Philox stream; the same keys always give the same stream."""
    return np.random.Generator(np.random.Philox(key=derive_seed(root_seed, *keys)))


def sample_rng(root_seed, cid, jnr_db, index):
    return make_rng(root_seed, cid, jnr_db, index)


# primitives


def _check_freq(f, cfg, what="frequency"):
    if not abs(f) < cfg.fs / 2:
        raise ParameterError(f"{what} {f} Hz outside (-fs/2, fs/2)")


def _phase_ramp(f, cfg):
    n = np.arange(cfg.n_samples)
    return 2 * np.pi * f * n / cfg.fs


def synth_stj(p, cfg):
    _check_freq(p.f_c, cfg)
    return IqSignal(np.exp(1j * (_phase_ramp(p.f_c, cfg) + p.phi)), cfg)


def synth_mtj(p, cfg):
    """Raw tone superposition; no per-tone scaling, mean power ~ K."""
    if not p.tones:
        raise ParameterError("MTJ needs at least one tone")
    freqs = [t.f_k for t in p.tones]
    if len(set(freqs)) != len(freqs):
        raise ParameterError("duplicate tone frequencies")
    x = np.zeros(cfg.n_samples, dtype=np.complex128)
    for t in p.tones:
        _check_freq(t.f_k, cfg, "tone frequency")
        x += np.exp(1j * (_phase_ramp(t.f_k, cfg) + t.phi_k))
    return IqSignal(x, cfg)


def synth_lfm(p, cfg):
    """Linear chirp exp(j 2 pi (f_start t + mu t^2 / 2)).

    Instantaneous frequency f_start + mu t may leave (-fs/2, fs/2); it then
    aliases modulo fs, as any sampled chirp does.
    """
    t = cfg.time()
    return IqSignal(np.exp(2j * np.pi * (p.f_start * t + 0.5 * p.mu * t * t)), cfg)


def pulse_counts(p, cfg):
    n_pri = int(math.floor(p.pri * cfg.fs + 1e-9))
    n_tau = int(math.floor(p.tau * cfg.fs + 1e-9))
    return n_pri, n_tau


def pulse_gate(n_pri, n_tau, n):
    if n_pri < 1 or n_tau < 1:
        raise ParameterError("PRI and pulse width must each span at least one sample")
    if n_tau >= n_pri:
        raise ParameterError(f"pulse width {n_tau} must be shorter than PRI {n_pri} samples")
    return (np.arange(n) % n_pri < n_tau).astype(np.float64)


def synth_pulse(p, cfg):
    _check_freq(p.f_c, cfg)
    n_pri, n_tau = pulse_counts(p, cfg)
    gate = pulse_gate(n_pri, n_tau, cfg.n_samples)
    return IqSignal(gate * np.exp(1j * _phase_ramp(p.f_c, cfg)), cfg)


def lowpass_taps(cutoff, fs, n_taps=PBNJ_TAPS):
    """Hann-windowed sinc low-pass with unit DC gain before windowing.

    ``n_taps`` is odd so the filter is symmetric about a whole sample; a
    cutoff of fs/2 then reduces to a unit impulse.
    """
    if n_taps % 2 == 0:
        raise ParameterError("n_taps must be odd")
    m = np.arange(n_taps) - (n_taps - 1) / 2
    fc = cutoff / fs
    h = 2 * fc * np.sinc(2 * fc * m)
    window = np.sin(np.pi * np.arange(1, n_taps + 1) / (n_taps + 1)) ** 2
    return h * window


def synth_pbnj(p, cfg, rng):
    """Complex white noise -> low-pass (cutoff b_jam/2) -> mix to f_c -> unit power."""
    if not 0 < p.b_jam <= cfg.fs:
        raise ParameterError("b_jam must lie in (0, fs]")
    if abs(p.f_c) + p.b_jam / 2 > cfg.fs / 2 + 1e-6:
        raise ParameterError("PBNJ band leaves the Nyquist range")
    n = cfg.n_samples
    nu = (rng.standard_normal(n) + 1j * rng.standard_normal(n)) / np.sqrt(2)
    h = lowpass_taps(p.b_jam / 2, cfg.fs)
    shaped = np.convolve(nu, h, mode="same") * np.exp(1j * _phase_ramp(p.f_c, cfg))
    return normalize_power(IqSignal(shaped, cfg))


SYNTH = {"STJ": synth_stj, "MTJ": synth_mtj, "LFM": synth_lfm, "Pulse": synth_pulse}


def synth_primitive(p, cfg, rng=None):
    if p.kind == "PBNJ":
        if rng is None:
            raise ParameterError("PBNJ synthesis needs an rng")
        return synth_pbnj(p, cfg, rng)
    return SYNTH[p.kind](p, cfg)


def normalize_power(sig):
    pw = sig.power()
    if pw <= 0:
        raise NormalizationError("cannot normalise an all-zero signal")
    return IqSignal(sig.data / np.sqrt(pw), sig.config)


# composition and channel


def compose_compound(components):
    """J[n] = sum_k sqrt(P_k) J_k[n] for unit-power components (IqSignal, P_k)."""
    if not components:
        raise CompositionError("nothing to compose")
    cfg = components[0][0].config
    out = np.zeros(cfg.n_samples, dtype=np.complex128)
    for sig, weight in components:
        if sig.config != cfg or sig.data.shape != out.shape:
            raise CompositionError("components differ in length or sample rate")
        if weight < 0:
            raise CompositionError("power weights must be non-negative")
        out += np.sqrt(weight) * sig.data
    return IqSignal(out, cfg)


def jnr_scale(power, jnr_db, sigma_n_sq=1.0):
    if power <= 0:
        raise NormalizationError("jamming signal has zero power")
    return math.sqrt(sigma_n_sq * 10 ** (jnr_db / 10) / power)


def apply_jnr(j, jnr_db, sigma_n_sq=1.0):
    """Scale so that 10 log10(mean|J|^2 / sigma_n^2) == jnr_db."""
    return IqSignal(j.data * jnr_scale(j.power(), jnr_db, sigma_n_sq), j.config)


def measured_jnr_db(j, sigma_n_sq=1.0):
    return 10 * math.log10(j.power() / sigma_n_sq)


def awgn(n, noise_variance, rng):
    s = math.sqrt(noise_variance / 2)
    return s * rng.standard_normal(n) + 1j * s * rng.standard_normal(n)


def add_awgn(x, ch, rng):
    """x + w with w ~ CN(0, sigma_n^2): real and imaginary variance sigma_n^2 / 2 each."""
    return IqSignal(x.data + awgn(x.config.n_samples, ch.noise_variance, rng), x.config)


# random specs following the generator's parameter table


def power_weights(n, rng, limit_db=PR_LIMIT_DB):
    """Weights summing to 1 with every pairwise ratio inside +-limit_db.

    Draws ratios of components 2..n against component 1 uniformly in dB and
    rejects draws whose remaining pairwise ratios exceed the bound.
    """
    if n == 1:
        return [1.0]
    while True:
        rel = np.concatenate([[0.0], rng.uniform(-limit_db, limit_db, size=n - 1)])
        if rel.max() - rel.min() <= limit_db:
            break
    lin = 10 ** (rel / 10)
    return list(lin / lin.sum())


def _draw(kind, cfg, rng):
    if kind == "STJ":
        return Stj(rng.uniform(-TONE_LIMIT, TONE_LIMIT), rng.uniform(0, 2 * np.pi))
    if kind == "MTJ":
        k = int(rng.integers(MTJ_TONES[0], MTJ_TONES[1] + 1))
        gaps = rng.uniform(*MTJ_SPACING, size=k - 1)
        offsets = np.concatenate([[0.0], np.cumsum(gaps)])
        start = rng.uniform(-TONE_LIMIT, TONE_LIMIT - offsets[-1])
        phases = rng.uniform(0, 2 * np.pi, size=k)
        return Mtj(tuple(Tone(float(start + o), float(ph)) for o, ph in zip(offsets, phases)))
    if kind == "LFM":
        sign = 1.0 if rng.random() < 0.5 else -1.0
        mu = sign * LFM_BANDWIDTH / LFM_PERIOD
        sweep = mu * cfg.duration
        lo, hi = -cfg.fs / 2, cfg.fs / 2
        f_start = rng.uniform(lo, hi - sweep) if sweep > 0 else rng.uniform(lo - sweep, hi)
        return Lfm(float(f_start), mu)
    if kind == "Pulse":
        return Pulse(rng.uniform(-TONE_LIMIT, TONE_LIMIT))
    if kind == "PBNJ":
        b = rng.uniform(*PBNJ_BANDWIDTH) * cfg.fs
        edge = cfg.fs / 2 - b / 2
        return Pbnj(rng.uniform(-edge, edge), b)
    raise ParameterError(f"unknown primitive {kind}")


def sample_spec(cid, jnr_db, rng, cfg=SignalConfig()):
    """Draw a fully instantiated spec for class ``cid`` at ``jnr_db``."""
    if cid not in CLASSES:
        raise ParameterError(f"class_id {cid} not in 1..21")
    kinds = CLASSES[cid]
    params = [_draw(k, cfg, rng) for k in kinds]
    weights = power_weights(len(kinds), rng)
    return JammingSpec(cid, list(zip(params, weights)), float(jnr_db))


def synthesize(spec, cfg=SignalConfig(), rng=None, channel=ChannelConfig()):
    """Full pipeline: unit-power primitives -> compound -> JNR scaling -> AWGN.

    Returns ``(x, j)``: the received signal and the scaled noise-free jamming.
    """
    parts = [(normalize_power(synth_primitive(p, cfg, rng)), w) for p, w in spec.components]
    j = apply_jnr(compose_compound(parts), spec.jnr_db, channel.noise_variance)
    return add_awgn(j, channel, rng), j


def generate(root_seed, cid, jnr_db, index, cfg=SignalConfig(), channel=ChannelConfig()):
    """Deterministic sample ``index`` of class ``cid`` at ``jnr_db``."""
    rng = sample_rng(root_seed, cid, jnr_db, index)
    spec = sample_spec(cid, jnr_db, rng, cfg)
    x, j = synthesize(spec, cfg, rng, channel)
    return spec, x, j


def pairwise_ratios_db(weights):
    return [abs(10 * math.log10(a / b)) for a, b in combinations(weights, 2)]
