"""Waveform containers, STFT/ISTFT, power-law spectra, Griffin-Lim, resampling, low-pass.

Framing convention: Hann window, signal reflect-padded by ``window // 2`` on
both sides, ``T = ceil(len / hop)`` frames. The codec, the conditioning
frontends and the metrics all rely on this frame count.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from scipy import signal
from scipy.io import wavfile

from .errors import DomainError, InvalidConfigError

log = logging.getLogger(__name__)

POWER_LAW_EXPONENT = 0.3


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate <= 0:
            raise DomainError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise DomainError("audio contains non-finite samples")

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self):
        return len(self) / self.sample_rate

    def peak(self):
        return float(np.max(np.abs(self.samples))) if len(self) else 0.0

    def rms(self):
        return float(np.sqrt(np.mean(self.samples**2))) if len(self) else 0.0


@dataclass
class SpectralFrames:
    """T x F power-law compressed magnitudes."""

    frames: np.ndarray
    window: int
    hop: int
    sample_rate: int

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 2 or self.frames.shape[1] != self.window // 2 + 1:
            raise DomainError(
                f"frames must be T x {self.window // 2 + 1}, got {self.frames.shape}")

    @property
    def num_frames(self):
        return self.frames.shape[0]


def _check_geometry(window, hop):
    if window <= 0 or window & (window - 1):
        raise InvalidConfigError(f"window must be a power of two, got {window}")
    if hop <= 0 or hop > window:
        raise InvalidConfigError(f"hop must be in (0, window], got {hop}")


def num_frames(length, hop):
    return -(-length // hop)


def hann(window):
    """Periodic Hann window."""
    return signal.get_window("hann", window, fftbins=True)


def frame_signal(x, window, hop):
    """Centered, reflect-padded frames of ``x``: shape (ceil(len/hop), window)."""
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise DomainError("cannot frame an empty signal")
    T = num_frames(x.size, hop)
    pad = window // 2
    padded = np.pad(x, (pad, pad), mode="reflect" if x.size > 1 else "constant")
    need = (T - 1) * hop + window
    if padded.size < need:
        padded = np.pad(padded, (0, need - padded.size))
    return np.lib.stride_tricks.sliding_window_view(padded, window)[::hop][:T]


def stft(clip: AudioClip, window=2048, hop=512):
    """Complex spectrogram, shape (T, window // 2 + 1)."""
    _check_geometry(window, hop)
    if len(clip) == 0:
        raise DomainError("stft of an empty clip")
    frames = frame_signal(clip.samples, window, hop) * hann(window)
    return np.fft.rfft(frames, axis=-1)


def istft(spec, window=2048, hop=512, length=None):
    """Weighted overlap-add inverse of :func:`stft`."""
    _check_geometry(window, hop)
    spec = np.asarray(spec)
    T = spec.shape[0]
    win = hann(window)
    frames = np.fft.irfft(spec, n=window, axis=-1) * win
    total = (T - 1) * hop + window
    out = np.zeros(total)
    norm = np.zeros(total)
    for t in range(T):
        s = t * hop
        out[s:s + window] += frames[t]
        norm[s:s + window] += win**2
    out = np.divide(out, norm, out=np.zeros_like(out), where=norm > 1e-10)
    pad = window // 2
    out = out[pad:]
    if length is None:
        length = T * hop
    if out.size < length:
        out = np.pad(out, (0, length - out.size))
    return out[:length]


def power_law_compress(mag, exponent=POWER_LAW_EXPONENT):
    mag = np.asarray(mag)
    if np.any(mag < 0):
        raise DomainError("power-law compression of a negative magnitude")
    return np.power(mag, exponent)


def power_law_expand(frames, exponent=POWER_LAW_EXPONENT):
    return np.power(np.maximum(np.asarray(frames), 0.0), 1.0 / exponent)


def compressed_spectrogram(clip: AudioClip, window=2048, hop=512,
                           exponent=POWER_LAW_EXPONENT) -> SpectralFrames:
    mag = np.abs(stft(clip, window, hop))
    return SpectralFrames(power_law_compress(mag, exponent), window, hop, clip.sample_rate)


def griffin_lim(mag, window=2048, hop=512, iters=32, sample_rate=44100, length=None,
                seed=None, return_errors=False):
    """Waveform whose STFT magnitude approximates ``mag`` (linear magnitude, T x F).

    Phase starts at zero unless ``seed`` is given, in which case it is drawn
    uniformly. With ``return_errors`` the per-iteration spectral inconsistency
    ``|| STFT(x_i) - X_i ||`` is returned too.
    """
    mag = np.asarray(mag, dtype=np.float64)
    T = mag.shape[0]
    if length is None:
        length = T * hop
    if seed is None:
        spec = mag.astype(np.complex128)
    else:
        phase = np.random.default_rng(seed).uniform(0, 2 * np.pi, size=mag.shape)
        spec = mag * np.exp(1j * phase)
    errors = []
    x = istft(spec, window, hop, length)
    for _ in range(iters):
        rebuilt = stft(AudioClip(x, sample_rate), window, hop)
        if return_errors:
            errors.append(float(np.linalg.norm(rebuilt - spec)))
        spec = mag * np.exp(1j * np.angle(rebuilt))
        x = istft(spec, window, hop, length)
    clip = AudioClip(np.clip(x, -1.0, 1.0), sample_rate)
    return (clip, errors) if return_errors else clip


def resample(clip: AudioClip, target_rate: int) -> AudioClip:
    """Polyphase windowed-sinc resampling."""
    if target_rate <= 0:
        raise DomainError("target_rate must be positive")
    if target_rate == clip.sample_rate:
        return AudioClip(clip.samples.copy(), clip.sample_rate)
    ratio = Fraction(int(target_rate), int(clip.sample_rate))
    y = signal.resample_poly(clip.samples, ratio.numerator, ratio.denominator,
                             window=("kaiser", 10.0))
    return AudioClip(y, int(target_rate))


MIN_TRANSITION_HZ = 50.0


def lowpass_taps(cutoff, sample_rate, attenuation_db=60.0):
    """Kaiser FIR with transition band [cutoff, min(1.2 * cutoff, nyquist)].

    Returns None when the band left above ``cutoff`` is too narrow to filter.
    """
    nyq = sample_rate / 2.0
    width_hz = min(0.2 * cutoff, nyq - cutoff)
    if width_hz < MIN_TRANSITION_HZ:
        return None
    numtaps, beta = signal.kaiserord(attenuation_db, width_hz / nyq)
    numtaps |= 1
    return signal.firwin(numtaps, cutoff + width_hz / 2, window=("kaiser", beta), fs=sample_rate)


def lowpass(clip: AudioClip, cutoff: float) -> AudioClip:
    """Linear-phase low-pass, delay compensated so the output aligns with the input."""
    nyq = clip.sample_rate / 2.0
    if not 0 < cutoff <= nyq:
        raise DomainError(f"cutoff {cutoff} Hz outside (0, {nyq}]")
    taps = lowpass_taps(cutoff, clip.sample_rate)
    if taps is None:
        return AudioClip(clip.samples.copy(), clip.sample_rate)
    y = signal.oaconvolve(clip.samples, taps, mode="full")
    delay = (len(taps) - 1) // 2
    return AudioClip(y[delay:delay + len(clip)], clip.sample_rate)


def read_wav(path) -> AudioClip:
    """Mono PCM16 or float32 WAV. Stereo is averaged down with a warning."""
    rate, data = wavfile.read(path)
    if data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        x = data.astype(np.float64) / 2147483648.0
    elif data.dtype == np.uint8:
        x = (data.astype(np.float64) - 128.0) / 128.0
    else:
        x = data.astype(np.float64)
    if x.ndim == 2:
        warnings.warn(f"{path}: {x.shape[1]} channels downmixed to mono", stacklevel=2)
        x = x.mean(axis=1)
    return AudioClip(x, int(rate))


def write_wav(path, clip: AudioClip, pcm16=False):
    x = np.clip(clip.samples, -1.0, 1.0)
    if pcm16:
        wavfile.write(path, clip.sample_rate, np.round(x * 32767.0).astype(np.int16))
    else:
        wavfile.write(path, clip.sample_rate, x.astype(np.float32))


def db(x, floor=1e-20):
    return 10.0 * math.log10(max(x, floor))
