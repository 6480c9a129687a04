"""Decoders: parallel iterative with guidance, hierarchical, and autoregressive.

A decodable model exposes ``num_codebooks``, ``codebook_size``, ``mask_id`` and
``logits(tokens, conds) -> (len(conds), C, T, K)`` where a ``None`` entry in
``conds`` requests the unconditional pass. Autoregressive decoding also needs
``ar_session(cond)`` returning an object whose ``step(prev_token)`` yields the
logits of the next flat position.
"""
from __future__ import annotations

import dataclasses
import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .codec import Codegram
from .errors import InvalidConfigError, ModelFaultError

log = logging.getLogger(__name__)


@dataclass
class DecodeConfig:
    iterations: int = 40
    guidance: float = 2.0
    noise_var_start: float = 4.0
    temperature: float = 1.0
    seed: int = 0
    confidence: str = "logit"  # or "logprob"
    remask_kept: bool = False
    skip_uncond_at_zero: bool = True

    def __post_init__(self):
        if self.iterations < 1:
            raise InvalidConfigError("iterations must be >= 1")
        if self.guidance < 0:
            raise InvalidConfigError("guidance must be >= 0")
        if self.temperature < 0:
            raise InvalidConfigError("temperature must be >= 0")
        if self.confidence not in ("logit", "logprob"):
            raise InvalidConfigError("confidence must be 'logit' or 'logprob'")


@dataclass
class DecodeStats:
    """``sweeps`` counts decoding steps; ``forwards`` counts model passes
    (two per step when guidance runs the unconditional pass too)."""

    sweeps: int = 0
    forwards: int = 0
    mask_counts: list = field(default_factory=list)


def cfg_combine(l_c, l_u, w):
    """Guided logits (1 + w) * l_c - w * l_u."""
    l_c = np.asarray(l_c)
    l_u = np.asarray(l_u)
    if l_c.shape != l_u.shape:
        raise ValueError(f"logit shapes differ: {l_c.shape} vs {l_u.shape}")
    return (1.0 + w) * l_c - w * l_u


def cosine_mask_count(t, N, total):
    """Positions still masked after iteration ``t`` of ``N``.

    ceil(total * cos(pi/2 * t / N)), zero at t = N and forced strictly below the
    previous count while that count is positive. t = 0 gives ``total``.
    """
    if not 0 <= t <= N:
        raise ValueError(f"iteration {t} outside [0, {N}]")
    count = total
    for s in range(1, t + 1):
        if s == N:
            return 0
        nxt = math.ceil(total * math.cos(0.5 * math.pi * s / N))
        count = max(0, min(nxt, count - 1))
    return count


def confidence_noise_var(t, N, start=4.0):
    """Linear anneal from ``start`` at t = 1 to 0 at t = N."""
    if N == 1:
        return 0.0
    return start * (N - t) / (N - 1)


def _guided(model, tokens, cond, w, stats, skip_uncond_at_zero=True):
    if w > 0 or not skip_uncond_at_zero:
        both = model.logits(tokens, [cond, None])
        stats.forwards += 2
        out = cfg_combine(both[0], both[1], w)
    else:
        out = model.logits(tokens, [cond])[0]
        stats.forwards += 1
    if not np.all(np.isfinite(out)):
        raise ModelFaultError("model produced non-finite logits")
    return out


def _log_softmax(x):
    z = x - x.max(-1, keepdims=True)
    return z - np.log(np.exp(z).sum(-1, keepdims=True))


def _sample(logits, temperature, rng):
    """Sample one id per row of ``logits`` (n, K); argmax at temperature 0."""
    if temperature == 0:
        return logits.argmax(-1)
    p = np.exp(_log_softmax(logits / temperature))
    cdf = np.cumsum(p, axis=-1)
    u = rng.random(logits.shape[0]) * cdf[:, -1]
    idx = (cdf < u[:, None]).sum(-1)
    return np.minimum(idx, logits.shape[-1] - 1)


def _top_positions(conf, positions, k):
    """The ``k`` positions with highest confidence; ties go to the lower position index."""
    order = np.lexsort((positions, -conf))
    return positions[order[:k]]


def maskgit_decode(model, cond, cfg: DecodeConfig, T=None, rows=None, tokens=None,
                   stats: DecodeStats | None = None, rng=None):
    """Iterative parallel decoding from a fully masked grid.

    ``rows`` restricts decoding to a subset of codebooks (others stay as given
    in ``tokens``, masked by default). Returns a (C, T) int array; positions in
    the decoded rows never hold the mask id afterwards.
    """
    stats = stats if stats is not None else DecodeStats()
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    C, K, M = model.num_codebooks, model.codebook_size, model.mask_id
    if tokens is None:
        if T is None:
            T = cond.shape[0]
        tokens = np.full((C, T), M, dtype=np.int64)
    else:
        tokens = np.array(tokens, dtype=np.int64)
        T = tokens.shape[1]
    rows = np.arange(C) if rows is None else np.asarray(rows)
    region = np.zeros((C, T), dtype=bool)
    region[rows] = True
    total = int((region & (tokens == M)).sum())
    N = cfg.iterations
    stats.mask_counts.append(total)
    for t in range(1, N + 1):
        masked = region & (tokens == M)
        lg = _guided(model, tokens, cond, cfg.guidance, stats, cfg.skip_uncond_at_zero)
        stats.sweeps += 1
        cand = np.flatnonzero(region if cfg.remask_kept else masked)
        flat_lg = lg.reshape(C * T, K)[cand]
        sampled = _sample(flat_lg, cfg.temperature, rng)
        prev = tokens.reshape(-1)[cand]
        was_masked = prev == M
        chosen = np.where(was_masked, sampled, prev)
        if cfg.confidence == "logit":
            conf = flat_lg[np.arange(cand.size), chosen]
        else:
            conf = _log_softmax(flat_lg)[np.arange(cand.size), chosen]
        var = confidence_noise_var(t, N, cfg.noise_var_start)
        if var > 0:
            conf = conf + rng.normal(0.0, math.sqrt(var), size=conf.shape)
        target = cosine_mask_count(t, N, total)
        if cfg.remask_kept:
            keep = _top_positions(conf, cand, cand.size - target)
            flat = tokens.reshape(-1)
            new_vals = dict(zip(cand.tolist(), chosen.tolist()))
            flat[cand] = M
            flat[keep] = [new_vals[p] for p in keep.tolist()]
        else:
            n_unmask = int(masked.sum()) - target
            keep = _top_positions(conf, cand, n_unmask)
            lookup = dict(zip(cand.tolist(), chosen.tolist()))
            tokens.reshape(-1)[keep] = [lookup[p] for p in keep.tolist()]
        stats.mask_counts.append(int((region & (tokens == M)).sum()))
    return tokens


def parallel_decode(model, cond, cfg: DecodeConfig, stats=None) -> np.ndarray:
    return maskgit_decode(model, cond, cfg, stats=stats)


def soundstorm_decode(model, cond, cfg: DecodeConfig, stats=None) -> np.ndarray:
    """Codebook 1 by iterative decoding, then one greedy pass per higher codebook
    (lower ones visible, higher ones masked). Argmax ties go to the lowest id."""
    stats = stats if stats is not None else DecodeStats()
    rng = np.random.default_rng(cfg.seed)
    tokens = maskgit_decode(model, cond, cfg, T=cond.shape[0] if cond is not None else None,
                            rows=[0], stats=stats, rng=rng)
    for c in range(1, model.num_codebooks):
        lg = _guided(model, tokens, cond, cfg.guidance, stats, cfg.skip_uncond_at_zero)
        stats.sweeps += 1
        tokens[c] = lg[c].argmax(-1)
    return tokens


def ar_decode(model, cond, cfg: DecodeConfig, T=None, stats=None) -> np.ndarray:
    """Left-to-right over the time-major flattened grid: exactly C * T invocations."""
    stats = stats if stats is not None else DecodeStats()
    rng = np.random.default_rng(cfg.seed)
    C = model.num_codebooks
    T = cond.shape[0] if T is None else T
    session = model.ar_session(cond)
    flat = np.empty(C * T, dtype=np.int64)
    prev = None
    for i in range(C * T):
        lg = np.asarray(session.step(prev), dtype=np.float64)
        stats.forwards += 1
        stats.sweeps += 1
        if not np.all(np.isfinite(lg)):
            raise ModelFaultError("model produced non-finite logits")
        prev = int(_sample(lg[None], cfg.temperature, rng)[0])
        flat[i] = prev
    return flat.reshape(T, C).T.copy()


DECODERS = {
    "parallel": parallel_decode,
    "hierarchical": soundstorm_decode,
    "ar": ar_decode,
}


def expected_sweeps(decoder, iterations, num_codebooks, frames):
    if decoder == "parallel":
        return iterations
    if decoder == "hierarchical":
        return iterations + num_codebooks - 1
    if decoder == "ar":
        return num_codebooks * frames
    raise InvalidConfigError(f"unknown decoder {decoder!r}")


def expected_forwards(decoder, iterations, num_codebooks, frames, guidance):
    mult = 2 if guidance > 0 else 1
    if decoder == "ar":
        return num_codebooks * frames
    return mult * expected_sweeps(decoder, iterations, num_codebooks, frames)


def decode(model, cond, cfg: DecodeConfig, decoder="parallel", stats=None) -> np.ndarray:
    if decoder not in DECODERS:
        raise InvalidConfigError(f"decoder must be one of {sorted(DECODERS)}")
    return DECODERS[decoder](model, cond, cfg, stats=stats)


def split_windows(num_samples, window_samples, hop):
    """Non-overlapping [start, end) spans; a tail shorter than one hop is dropped."""
    spans = []
    for start in range(0, num_samples, window_samples):
        end = min(start + window_samples, num_samples)
        if end - start < hop:
            warnings.warn(f"dropping {end - start}-sample tail shorter than one hop", stacklevel=3)
            continue
        spans.append((start, end))
    return spans


def decode_windows(model, codec, clip, window_s, cfg: DecodeConfig, decoder="parallel",
                   gl_iters=32, stats=None):
    """Decode non-overlapping windows independently and return ``(audio, codegram)``."""
    from . import dsp
    from .codec import rvq_decode

    stats = stats if stats is not None else DecodeStats()
    win = int(round(window_s * clip.sample_rate))
    spans = split_windows(len(clip), win, codec.hop)
    parts = []
    for k, (s, e) in enumerate(spans):
        piece = dsp.AudioClip(clip.samples[s:e], clip.sample_rate)
        cond = model.condition(piece)
        wcfg = dataclasses.replace(cfg, seed=cfg.seed + k)
        parts.append(decode(model, cond, wcfg, decoder, stats))
    tokens = np.concatenate(parts, axis=1) if parts else np.zeros((model.num_codebooks, 0), np.int64)
    cg = Codegram(tokens, model.codebook_size, codec.frame_rate)
    length = spans[-1][1] if spans else 0
    if not spans:
        return dsp.AudioClip(np.zeros(0), clip.sample_rate), cg
    frames = rvq_decode(cg, codec)
    audio = dsp.griffin_lim(dsp.power_law_expand(frames.frames), codec.window, codec.hop,
                            gl_iters, codec.sample_rate, length)
    return audio, cg
