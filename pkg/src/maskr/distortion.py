"""On-the-fly corruption of clean clips: reverb, additive noise, band limiting, clipping."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import signal

from .dsp import AudioClip, lowpass
from .errors import DegenerateInputError, DomainError, InvalidConfigError

log = logging.getLogger(__name__)

PEAK_LIMIT = 0.99


def _rms(x):
    return float(np.sqrt(np.mean(np.square(x))))


def mix_noise_at_snr(clean: AudioClip, noise: AudioClip, snr_db: float):
    """Add ``noise`` to ``clean`` at ``snr_db``.

    Noise shorter than the clean clip is looped, longer noise is cropped.
    Returns ``(mixed, scale)`` where ``scale`` (<= 1) is the factor applied to
    keep the mixture peak at or below 0.99; scaling both terms leaves the SNR
    untouched.
    """
    n = len(clean)
    c_rms = clean.rms()
    if c_rms <= 0.0:
        raise DegenerateInputError("cannot set an SNR against a silent clean clip")
    v = np.resize(noise.samples, n)
    n_rms = _rms(v)
    if n_rms <= 0.0:
        raise DegenerateInputError("noise clip is silent")
    gain = (c_rms / n_rms) * 10.0 ** (-snr_db / 20.0)
    mixed = clean.samples + gain * v
    peak = float(np.max(np.abs(mixed)))
    scale = 1.0
    if peak > PEAK_LIMIT:
        scale = PEAK_LIMIT / peak
        mixed = mixed * scale
        log.debug("noise mix rescaled by %.4f to avoid overload", scale)
    return AudioClip(mixed, clean.sample_rate), scale


def noise_gain(clean: AudioClip, noise: AudioClip, snr_db: float) -> float:
    v = np.resize(noise.samples, len(clean))
    return (clean.rms() / _rms(v)) * 10.0 ** (-snr_db / 20.0)


def synth_noise(num_samples, sample_rate, seed):
    """Stationary coloured noise with a random spectral tilt (-6..+3 dB/octave)."""
    rng = np.random.default_rng(seed)
    white = rng.normal(size=num_samples)
    tilt = rng.uniform(-6.0, 3.0)
    spec = np.fft.rfft(white)
    f = np.fft.rfftfreq(num_samples, 1.0 / sample_rate)
    f[0] = f[1] if len(f) > 1 else 1.0
    spec *= (f / 1000.0) ** (tilt / (20.0 * math.log10(2.0)))
    x = np.fft.irfft(spec, n=num_samples)
    x /= max(np.max(np.abs(x)), 1e-12)
    return AudioClip(0.5 * x, sample_rate)


RIR_TAIL_GAIN = 0.3


def synth_rir(rt60_s: float, sample_rate: int, seed) -> np.ndarray:
    """Exponentially decaying Gaussian tail plus a unit direct path at t=0.

    The energy envelope falls by 60 dB at ``rt60_s``; the response runs to
    1.2 * rt60 so the decay point is inside the array.
    """
    if not 0.05 <= rt60_s <= 1.5:
        raise DomainError(f"rt60 {rt60_s} s outside [0.05, 1.5]")
    rng = np.random.default_rng(seed)
    n = int(math.ceil(1.2 * rt60_s * sample_rate))
    t = np.arange(n) / sample_rate
    h = RIR_TAIL_GAIN * rng.normal(size=n) * rir_envelope(t, rt60_s)
    h[0] = 1.0
    return h


def rir_envelope(t, rt60_s):
    """Amplitude envelope whose square drops 60 dB at ``rt60_s``."""
    return 10.0 ** (-3.0 * np.asarray(t) / rt60_s)


def apply_reverb(clean: AudioClip, rir) -> AudioClip:
    rir = np.asarray(rir, dtype=np.float64)
    y = signal.convolve(clean.samples, rir, mode="full")[: len(clean)]
    ref, peak = clean.peak(), float(np.max(np.abs(y))) if len(y) else 0.0
    if ref > 0 and peak > 0:
        y = y * (ref / peak)
    return AudioClip(y, clean.sample_rate)


def clip_signal(clean: AudioClip, clip_level: float, reference_peak=None) -> AudioClip:
    """Hard clip at ``clip_level`` times the clip's own peak.

    ``reference_peak`` pins the threshold to another clip's peak (used when a
    recipe is re-applied to an already clipped signal).
    """
    if not 0.0 < clip_level <= 1.0:
        raise DomainError(f"clip_level {clip_level} outside (0, 1]")
    peak = clean.peak() if reference_peak is None else reference_peak
    if peak == 0.0:
        return AudioClip(clean.samples.copy(), clean.sample_rate)
    theta = clip_level * peak
    return AudioClip(np.clip(clean.samples, -theta, theta), clean.sample_rate)


def limit_bandwidth(clean: AudioClip, cutoff_hz: float) -> AudioClip:
    return lowpass(clean, cutoff_hz)


@dataclass
class CorruptionPolicy:
    p_reverb: float = 0.5
    p_noise: float = 0.5
    p_bandwidth: float = 0.5
    p_clip: float = 0.5
    snr_range: tuple = (-5.0, 20.0)
    clip_range: tuple = (0.1, 0.5)
    cutoff_range: tuple = (1000.0, 22050.0)
    rt60_range: tuple = (0.2, 1.0)

    def __post_init__(self):
        probs = (self.p_reverb, self.p_noise, self.p_bandwidth, self.p_clip)
        if any(not 0.0 <= p <= 1.0 for p in probs):
            raise InvalidConfigError("distortion probabilities must lie in [0, 1]")
        if max(probs) == 0.0:
            raise InvalidConfigError("at least one distortion needs a nonzero probability")


@dataclass
class CorruptionRecipe:
    """Everything needed to re-create one corrupted clip from its clean source."""

    seed: int
    sample_rate: int
    snr_db: float | None = None
    rt60_s: float | None = None
    rir_seed: int | None = None
    noise_seed: int | None = None
    clip_level: float | None = None
    cutoff_hz: float | None = None
    noise_scale: float = 1.0

    @property
    def rir(self):
        if self.rt60_s is None:
            return None
        return synth_rir(self.rt60_s, self.sample_rate, self.rir_seed)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "CorruptionRecipe":
        return cls(**json.loads(line))


def sample_recipe(policy: CorruptionPolicy, sample_rate: int, seed: int) -> CorruptionRecipe:
    rng = np.random.default_rng(seed)
    probs = np.array([policy.p_reverb, policy.p_noise, policy.p_bandwidth, policy.p_clip])
    while True:
        on = rng.random(4) < probs
        if on.any():
            break
    # every parameter is drawn regardless of the enable flags so the stream stays aligned
    snr = float(rng.uniform(*policy.snr_range))
    rt60 = float(rng.uniform(*policy.rt60_range))
    lo, hi = policy.cutoff_range
    hi = min(hi, sample_rate / 2.0)
    cutoff = float(rng.uniform(min(lo, hi), hi))
    level = float(rng.uniform(*policy.clip_range))
    rir_seed, noise_seed = (int(s) for s in rng.integers(0, 2**31 - 1, size=2))
    return CorruptionRecipe(
        seed=int(seed),
        sample_rate=int(sample_rate),
        snr_db=snr if on[1] else None,
        rt60_s=rt60 if on[0] else None,
        rir_seed=rir_seed if on[0] else None,
        noise_seed=noise_seed if on[1] else None,
        clip_level=level if on[3] else None,
        cutoff_hz=cutoff if on[2] else None,
    )


def apply_recipe(clean: AudioClip, recipe: CorruptionRecipe) -> AudioClip:
    """Reverb, then noise, then band limit, then clipping; output kept within [-1, 1]."""
    if clean.rms() <= 0.0:
        raise DegenerateInputError("clean clip is silent")
    if clean.sample_rate != recipe.sample_rate:
        raise DomainError("recipe sample rate differs from the clip's")
    x = clean
    if recipe.rt60_s is not None:
        x = apply_reverb(x, recipe.rir)
    if recipe.snr_db is not None:
        noise = synth_noise(len(x), x.sample_rate, recipe.noise_seed)
        x, recipe.noise_scale = mix_noise_at_snr(x, noise, recipe.snr_db)
    if recipe.cutoff_hz is not None:
        x = limit_bandwidth(x, recipe.cutoff_hz)
    if recipe.clip_level is not None:
        x = clip_signal(x, recipe.clip_level)
    peak = x.peak()
    if peak > 1.0:
        x = AudioClip(x.samples / peak, x.sample_rate)
    return x


def corrupt(clean: AudioClip, policy: CorruptionPolicy | None = None, seed: int = 0):
    """Returns ``(corrupted, recipe)``; deterministic in ``seed``."""
    policy = policy or CorruptionPolicy()
    recipe = sample_recipe(policy, clean.sample_rate, seed)
    return apply_recipe(clean, recipe), recipe
