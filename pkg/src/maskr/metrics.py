"""Evaluation metrics, decode benchmarks, guidance sweeps and CSV reports."""
from __future__ import annotations

import csv
import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import dsp
from .codec import Codegram
from .dsp import AudioClip
from .errors import DegenerateInputError, DimensionError, DomainError
from .sampler import DecodeConfig, DecodeStats, decode, decode_windows, expected_forwards, expected_sweeps

log = logging.getLogger(__name__)

LSD_WINDOW = 2048
LSD_HOP = 512
LSD_EPS = 1e-8
SNR_SENTINEL = math.inf


def lsd(ref: AudioClip, test: AudioClip, window=LSD_WINDOW, hop=LSD_HOP, eps=LSD_EPS) -> float:
    """Log-spectral distance in log10 power units, averaged over frames."""
    if ref.sample_rate != test.sample_rate:
        raise DomainError("lsd needs equal sample rates")
    n = min(len(ref), len(test))
    if n == 0:
        raise DegenerateInputError("lsd of empty signals")
    a = np.abs(dsp.stft(AudioClip(ref.samples[:n], ref.sample_rate), window, hop)) ** 2
    b = np.abs(dsp.stft(AudioClip(test.samples[:n], test.sample_rate), window, hop)) ** 2
    diff = np.log10(a + eps) - np.log10(b + eps)
    return float(np.mean(np.sqrt(np.mean(diff**2, axis=1))))


def token_accuracy(pred: Codegram, truth: Codegram) -> np.ndarray:
    """Per-codebook share of exact id matches."""
    p, t = np.asarray(getattr(pred, "tokens", pred)), np.asarray(getattr(truth, "tokens", truth))
    if p.shape != t.shape:
        raise DimensionError(f"codegram shapes differ: {p.shape} vs {t.shape}")
    if p.shape[-1] == 0:
        raise DimensionError("empty codegram")
    return (p == t).mean(axis=-1)


def measured_snr(clean: AudioClip, noisy: AudioClip) -> float:
    """10 log10(P_clean / P_residual); +inf when the signals are identical."""
    if len(clean) != len(noisy):
        raise DimensionError("measured_snr needs equal lengths")
    resid = noisy.samples - clean.samples
    p_n = float(np.mean(resid**2))
    if p_n == 0.0:
        return SNR_SENTINEL
    return 10.0 * math.log10(float(np.mean(clean.samples**2)) / p_n)


# ---------------------------------------------------------------------------
# reports


@dataclass
class EvalReport:
    """Rows of one evaluation; every row shares the same columns."""

    columns: list
    rows: list = field(default_factory=list)

    def add(self, **values):
        missing = set(self.columns) - set(values)
        if missing:
            raise KeyError(f"row lacks columns {sorted(missing)}")
        for k in ("lsd",):
            if k in values and not (values[k] >= 0):
                raise DomainError(f"{k} must be non-negative, got {values[k]}")
        for k, v in values.items():
            if k.startswith("acc_") and not (0.0 <= v <= 1.0 or math.isnan(v)):
                raise DomainError(f"{k} must lie in [0, 1], got {v}")
        self.rows.append({c: values[c] for c in self.columns})

    def column(self, name):
        return [r[name] for r in self.rows]

    def where(self, **match):
        return [r for r in self.rows if all(r[k] == v for k, v in match.items())]

    def to_csv(self, path):
        write_csv(path, self.columns, self.rows)

    @classmethod
    def from_csv(cls, path):
        cols, rows = read_csv(path)
        return cls(cols, rows)


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "%.6g" % v
    return str(v)


def write_csv(path, columns, rows):
    with open(path, "w", newline="") as fp:
        w = csv.writer(fp)
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in columns])


def _parse(s):
    for conv in (int, float):
        try:
            return conv(s)
        except ValueError:
            pass
    return s


def read_csv(path):
    with open(path, newline="") as fp:
        rd = csv.reader(fp)
        columns = next(rd)
        rows = [dict(zip(columns, map(_parse, line))) for line in rd]
    return columns, rows


# ---------------------------------------------------------------------------
# benchmarks


def bench_decode(model, lengths_s, decoders, repeats=1, cfg: DecodeConfig | None = None,
                 frame_rate=None) -> EvalReport:
    """Mean wall time per (decoder, length) on a random conditioning sequence.

    Also records model sweeps and forward passes, checked against the analytic counts.
    """
    cfg = cfg or DecodeConfig()
    frame_rate = frame_rate or model.cfg.frame_rate
    report = EvalReport(["decoder", "length_s", "frames", "runtime_s", "sweeps", "forwards",
                         "expected_sweeps"])
    rng = np.random.default_rng(cfg.seed)
    for length in lengths_s:
        T = int(math.ceil(length * frame_rate))
        cond = rng.normal(size=(T, model.cfg.model_dim)).astype(np.float32)
        for dec in decoders:
            times = []
            for r in range(repeats):
                stats = DecodeStats()
                t0 = time.perf_counter()
                decode(model, cond, dataclasses.replace(cfg, seed=cfg.seed + r), dec, stats)
                times.append(time.perf_counter() - t0)
                want_s = expected_sweeps(dec, cfg.iterations, model.num_codebooks, T)
                want_f = expected_forwards(dec, cfg.iterations, model.num_codebooks, T, cfg.guidance)
                if (stats.sweeps, stats.forwards) != (want_s, want_f):
                    raise AssertionError(
                        f"{dec}: counted {stats.sweeps}/{stats.forwards} sweeps/forwards, "
                        f"expected {want_s}/{want_f}")
            report.add(decoder=dec, length_s=float(length), frames=T,
                       runtime_s=float(np.mean(times)), sweeps=stats.sweeps,
                       forwards=stats.forwards, expected_sweeps=want_s)
            log.info("%s %.1fs: %.3fs", dec, length, np.mean(times))
    return report


@dataclass
class HeldOutItem:
    """One held-out pair; ``tag`` marks e.g. band-limited items."""

    clean: AudioClip
    corrupted: AudioClip
    tokens: np.ndarray | None = None
    tag: str = ""


def restore(model, codec, clip, cfg: DecodeConfig, decoder="parallel", window_s=None, gl_iters=32):
    window_s = window_s or model.cfg.clip_seconds
    return decode_windows(model, codec, clip, window_s, cfg, decoder, gl_iters)


def evaluate(model, codec, items, cfg: DecodeConfig, decoder="parallel", window_s=None,
             gl_iters=32) -> EvalReport:
    """Per-clip LSD before and after restoration plus token accuracy against the clean codegram."""
    C = model.num_codebooks
    cols = ["clip", "tag", "lsd_corrupted", "lsd_restored", "snr_db"] + [f"acc_{c + 1}" for c in range(C)]
    report = EvalReport(cols)
    for i, it in enumerate(items):
        audio, cg = restore(model, codec, it.corrupted, dataclasses.replace(cfg, seed=cfg.seed + i),
                            decoder, window_s, gl_iters)
        acc = _acc(cg, it.tokens, C)
        report.add(clip=i, tag=it.tag, lsd_corrupted=lsd(it.clean, it.corrupted),
                   lsd_restored=lsd(it.clean, audio), snr_db=measured_snr(it.clean, it.corrupted),
                   **{f"acc_{c + 1}": float(acc[c]) for c in range(C)})
    return report


def _acc(cg, truth, C):
    if truth is None:
        return np.full(C, np.nan)
    n = min(cg.tokens.shape[1], truth.shape[1])
    return token_accuracy(cg.tokens[:, :n], truth[:, :n])


def summarize(report: EvalReport, tag=None):
    """Corpus means of the per-clip columns (optionally one tag only)."""
    rows = report.rows if tag is None else report.where(tag=tag)
    out = {"n": len(rows)}
    for c in report.columns:
        if c in ("clip", "tag"):
            continue
        vals = np.array([r[c] for r in rows], dtype=float)
        vals = vals[np.isfinite(vals)]
        out[c] = float(vals.mean()) if vals.size else float("nan")
    return out


DEFAULT_GUIDANCE_GRID = (0.0, 0.5, 1.0, 2.0, 4.0)


def sweep_guidance(model, codec, items, w_values=DEFAULT_GUIDANCE_GRID, cfg: DecodeConfig | None = None,
                   decoder="parallel", window_s=None, gl_iters=32) -> EvalReport:
    """One row per guidance weight: mean LSD and per-codebook accuracy on ``items``."""
    cfg = cfg or DecodeConfig()
    C = model.num_codebooks
    report = EvalReport(["w", "lsd"] + [f"acc_{c + 1}" for c in range(C)])
    for w in w_values:
        per = evaluate(model, codec, items, dataclasses.replace(cfg, guidance=float(w)),
                       decoder, window_s, gl_iters)
        s = summarize(per)
        report.add(w=float(w), lsd=s["lsd_restored"], **{f"acc_{c + 1}": s[f"acc_{c + 1}"] for c in range(C)})
        log.info("w=%g lsd=%.4f", w, s["lsd_restored"])
    return report
