"""Synthetic speech-like corpus, dataset manifests and training-example assembly."""
from __future__ import annotations

import json
import logging
import math
import os
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dsp
from .codec import CodebookSet, encode_clip
from .distortion import CorruptionPolicy, CorruptionRecipe, apply_recipe, sample_recipe
from .dsp import AudioClip
from .errors import DomainError, FormatError
from .masked_lm import TrainingExample

log = logging.getLogger(__name__)

F0_RANGE = (90.0, 300.0)
PEAK = 0.9
NOISE_FLOOR = 1e-4
RAMP_S = 0.01


def _smooth_curve(rng, n, sample_rate, rate_hz=(0.3, 2.0), parts=3):
    """Sum of a few slow sinusoids with random phase, scaled to [-1, 1]."""
    t = np.arange(n) / sample_rate
    y = np.zeros(n)
    for _ in range(parts):
        y += rng.uniform(0.5, 1.0) * np.sin(2 * np.pi * rng.uniform(*rate_hz) * t + rng.uniform(0, 2 * np.pi))
    return y / max(np.max(np.abs(y)), 1e-12)


def _envelope(rng, n, sample_rate, silence_fraction):
    """Alternating gaps and syllables; gap total is ``silence_fraction`` of the clip."""
    duration = n / sample_rate
    n_syll = max(1, int(round(duration / rng.uniform(0.25, 0.45))))
    voiced = rng.dirichlet(np.full(n_syll, 4.0)) * (1 - silence_fraction) * n
    gaps = rng.dirichlet(np.full(n_syll + 1, 2.0)) * silence_fraction * n
    env = np.zeros(n)
    ramp = max(1, int(RAMP_S * sample_rate))
    pos = gaps[0]
    for k in range(n_syll):
        a, b = int(round(pos)), int(round(pos + voiced[k]))
        seg = b - a
        if seg > 0:
            w = np.ones(seg)
            r = min(ramp, seg // 2)
            if r:
                up = 0.5 - 0.5 * np.cos(np.pi * np.arange(r) / r)
                w[:r] = up
                w[seg - r:] = up[::-1]
            env[a:b] = w * rng.uniform(0.5, 1.0)
        pos += voiced[k] + gaps[k + 1]
    return env


def synth_speech(duration_s, seed, sample_rate=16000, return_f0=False):
    """Voiced harmonic source shaped by 2-3 moving formants and a syllabic envelope.

    The f0 track drifts inside [90, 300] Hz, roughly a fifth to a third of the
    clip is silent and the result is peak-normalized to 0.9.
    """
    if not 0.5 <= duration_s <= 30.0:
        raise DomainError(f"duration {duration_s} s outside [0.5, 30]")
    rng = np.random.default_rng(seed)
    n = int(round(duration_s * sample_rate))
    nyq = sample_rate / 2.0

    lo, hi = math.log(F0_RANGE[0] * 1.05), math.log(F0_RANGE[1] * 0.95)
    centre = rng.uniform(lo + 0.2, hi - 0.2)
    span = min(centre - lo, hi - centre, rng.uniform(0.1, 0.3))
    f0 = np.exp(centre + span * _smooth_curve(rng, n, sample_rate))
    phase = 2 * np.pi * np.cumsum(f0) / sample_rate

    n_formants = int(rng.integers(2, 4))
    bands = [(300.0, 900.0), (900.0, 2400.0), (2400.0, 3600.0)][:n_formants]
    formants = []
    for a, b in bands:
        b = min(b, 0.9 * nyq)
        centre_f = rng.uniform(a, b)
        move = 0.15 * centre_f * _smooth_curve(rng, n, sample_rate, rate_hz=(0.5, 3.0), parts=2)
        formants.append((centre_f + move, rng.uniform(60.0, 160.0), rng.uniform(0.4, 1.0)))

    x = np.zeros(n)
    max_k = int(0.45 * sample_rate / F0_RANGE[0])
    for k in range(1, max_k + 1):
        fk = k * f0
        audible = fk < 0.45 * sample_rate
        if not audible.any():
            break
        gain = np.zeros(n)
        for fc, bw, g in formants:
            gain += g / np.sqrt(1.0 + ((fk - fc) / (0.5 * bw)) ** 2)
        gain = (gain + 0.05) / k ** 0.5
        x += np.where(audible, gain, 0.0) * np.sin(k * phase)

    silence = rng.uniform(0.18, 0.3)
    x *= _envelope(rng, n, sample_rate, silence)
    x /= max(np.max(np.abs(x)), 1e-12)
    x = PEAK * x + NOISE_FLOOR * rng.normal(size=n)
    x *= PEAK / np.max(np.abs(x))
    clip = AudioClip(x, sample_rate)
    return (clip, f0) if return_f0 else clip


def silence_fraction(clip: AudioClip, gate_db=-40.0, frame_s=0.02):
    """Share of 20 ms frames whose RMS sits ``gate_db`` or more below the loudest frame."""
    n = max(1, int(frame_s * clip.sample_rate))
    m = len(clip) // n
    frames = clip.samples[: m * n].reshape(m, n)
    rms = np.sqrt(np.mean(frames**2, axis=1))
    ref = rms.max()
    if ref == 0:
        return 1.0
    return float(np.mean(20 * np.log10(np.maximum(rms, 1e-20) / ref) < gate_db))


# ---------------------------------------------------------------------------
# manifests

SPLITS = ("train", "dev", "test")


@dataclass
class ManifestEntry:
    clean_path: str
    duration_s: float
    seed: int
    recipe: CorruptionRecipe | None = None
    corrupted_path: str | None = None

    def to_dict(self):
        d = {"clean_path": self.clean_path, "duration_s": self.duration_s, "seed": self.seed}
        if self.recipe is not None:
            d["recipe"] = json.loads(self.recipe.to_json())
        if self.corrupted_path is not None:
            d["corrupted_path"] = self.corrupted_path
        return d

    @classmethod
    def from_dict(cls, d):
        rec = d.get("recipe")
        return cls(d["clean_path"], float(d["duration_s"]), int(d["seed"]),
                   CorruptionRecipe(**rec) if rec else None, d.get("corrupted_path"))


@dataclass
class DatasetManifest:
    """JSON-lines file: a header object, then one entry per line.

    Paths are stored relative to the manifest's directory.
    """

    sample_rate: int
    split: str
    entries: list = field(default_factory=list)
    root: str = "."

    def __post_init__(self):
        if self.split not in SPLITS:
            raise FormatError(f"split must be one of {SPLITS}, got {self.split!r}")

    def path(self, rel):
        return os.path.join(self.root, rel)

    def save(self, path):
        with open(path, "w") as fp:
            fp.write(json.dumps({"format": "maskr-manifest", "version": 1,
                                 "sample_rate": self.sample_rate, "split": self.split}) + "\n")
            for e in self.entries:
                fp.write(json.dumps(e.to_dict(), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path, check_paths=True):
        with open(path) as fp:
            lines = [ln for ln in fp.read().splitlines() if ln.strip()]
        if not lines:
            raise FormatError(f"{path}: empty manifest")
        try:
            head = json.loads(lines[0])
            entries = [ManifestEntry.from_dict(json.loads(ln)) for ln in lines[1:]]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise FormatError(f"{path}: malformed manifest ({exc})") from None
        if head.get("format") != "maskr-manifest":
            raise FormatError(f"{path}: not a manifest")
        man = cls(int(head["sample_rate"]), head["split"], entries, os.path.dirname(os.path.abspath(path)))
        if check_paths:
            for e in entries:
                for rel in (e.clean_path, e.corrupted_path):
                    if rel is not None and not os.path.exists(man.path(rel)):
                        raise FormatError(f"{path}: missing audio file {rel}")
        return man

    def clean_clips(self):
        for e in self.entries:
            yield dsp.read_wav(self.path(e.clean_path))


def check_disjoint(*manifests):
    """Raise if any clean file or seed appears in more than one split."""
    seen = {}
    for man in manifests:
        for e in man.entries:
            for key in (("path", os.path.normpath(man.path(e.clean_path))), ("seed", e.seed)):
                other = seen.setdefault(key, man.split)
                if other != man.split:
                    raise FormatError(f"{key[0]} {key[1]} is in both {other} and {man.split}")


def split_seeds(seed, counts):
    """Disjoint per-split clip seeds derived from one global seed."""
    ss = np.random.SeedSequence(seed)
    out, offset = {}, 0
    pool = ss.generate_state(sum(counts.values()) * 2, dtype=np.uint32)
    # dedupe in order so splits can never share a seed
    uniq = list(dict.fromkeys(int(v) for v in pool))
    for split, n in counts.items():
        out[split] = uniq[offset:offset + n]
        offset += n
    return out


def write_corpus(out_dir, counts, seed=0, sample_rate=16000, clip_seconds=2.0,
                 policy: CorruptionPolicy | None = None, workers=None):
    """Synthesize clean clips (plus a corrupted copy for dev/test) and one manifest per split."""
    policy = policy or CorruptionPolicy()
    out = Path(out_dir)
    seeds = split_seeds(seed, counts)
    manifests = {}
    for split, split_seeds_ in seeds.items():
        (out / split).mkdir(parents=True, exist_ok=True)

        def make(args, split=split):
            i, s = args
            clean = synth_speech(clip_seconds, s, sample_rate)
            rel = f"{split}/clean_{i:05d}.wav"
            dsp.write_wav(out / rel, clean)
            entry = ManifestEntry(rel, clean.duration, s)
            if split != "train":
                noisy, recipe = _corrupt(clean, policy, s)
                crel = f"{split}/corrupted_{i:05d}.wav"
                dsp.write_wav(out / crel, noisy)
                entry.recipe, entry.corrupted_path = recipe, crel
            return entry

        entries = list(ordered_map(make, enumerate(split_seeds_), workers))
        man = DatasetManifest(sample_rate, split, entries, str(out))
        man.save(out / f"{split}.jsonl")
        manifests[split] = man
        log.info("%s: %d clips", split, len(entries))
    check_disjoint(*manifests.values())
    return manifests


def _corrupt(clean, policy, seed):
    recipe = sample_recipe(policy, clean.sample_rate, seed)
    return apply_recipe(clean, recipe), recipe


# ---------------------------------------------------------------------------
# training examples


def worker_count(default=None):
    env = os.environ.get("MASKR_THREADS")
    if env:
        return max(1, int(env))
    return default or min(4, os.cpu_count() or 1)


def ordered_map(fn, items, workers=None, queue_size=None):
    """Thread-pool map with a bounded number of in-flight jobs; results keep input order."""
    workers = worker_count(workers)
    items = iter(items)
    if workers <= 1:
        for it in items:
            yield fn(it)
        return
    queue_size = queue_size or 2 * workers
    with ThreadPoolExecutor(workers) as pool:
        pending = deque()
        for it in items:
            pending.append(pool.submit(fn, it))
            if len(pending) >= queue_size:
                yield pending.popleft().result()
        while pending:
            yield pending.popleft().result()


def build_examples(clean_clips, model, codec: CodebookSet, variants=1, seed=0,
                   policy: CorruptionPolicy | None = None, workers=None):
    """Pair each clean clip's codegram with frontend features of corrupted copies.

    Variant ``v`` of clip ``i`` is corrupted with a seed drawn from ``seed``, so
    the examples are reproducible regardless of the worker count.
    """
    policy = policy or CorruptionPolicy()
    clips = list(clean_clips)
    seeds = np.random.default_rng(seed).integers(0, 2**31 - 1, size=(len(clips), variants))

    def make(i):
        clean = clips[i]
        tokens = encode_clip(clean, codec).tokens.astype(np.int64)
        out = []
        for v in range(variants):
            noisy, _ = _corrupt(clean, policy, int(seeds[i, v]))
            out.append(TrainingExample(tokens, model.features(noisy)))
        return out

    examples = []
    for group in ordered_map(make, range(len(clips)), workers):
        examples.extend(group)
    return examples
