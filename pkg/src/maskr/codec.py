"""Residual vector quantization over power-law STFT frames.

Frames are projected onto an orthonormal basis fit by truncated SVD (the
least-squares rank-d_c map), then quantized by C cascaded codebooks trained
with EMA k-means. Code 0 of every stage is pinned at the origin, so choosing
it leaves the residual unchanged and residual norms can never grow from one
stage to the next.
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass

import numpy as np

from . import dsp
from .dsp import AudioClip, SpectralFrames
from .errors import CorruptCodegramError, DimensionError, FormatError, NotTrainedError
from .nn_core import load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)


@dataclass
class Codegram:
    tokens: np.ndarray  # (C, T) uint16
    codebook_size: int
    frame_rate: float

    def __post_init__(self):
        tokens = np.asarray(self.tokens)
        if tokens.ndim != 2 or tokens.shape[0] < 1:
            raise DimensionError(f"codegram must be C x T, got shape {tokens.shape}")
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.codebook_size):
            raise CorruptCodegramError(f"token id outside [0, {self.codebook_size})")
        self.tokens = tokens.astype(np.uint16)
        self.frame_rate = float(np.float32(self.frame_rate))

    @property
    def num_codebooks(self):
        return self.tokens.shape[0]

    @property
    def num_frames(self):
        return self.tokens.shape[1]

    def __eq__(self, other):
        return (isinstance(other, Codegram)
                and self.codebook_size == other.codebook_size
                and self.frame_rate == other.frame_rate
                and np.array_equal(self.tokens, other.tokens))


# Codegram file: b"CGRM", u8 version, u16 C, u16 K, u32 T, f32 frame rate,
# then C*T little-endian u16 ids, codebook-major.
CODEGRAM_MAGIC = b"CGRM"
CODEGRAM_VERSION = 1
_HEADER = struct.Struct("<4sBHHIf")
CODEGRAM_HEADER_SIZE = _HEADER.size


def codegram_to_bytes(cg: Codegram) -> bytes:
    C, T = cg.tokens.shape
    head = _HEADER.pack(CODEGRAM_MAGIC, CODEGRAM_VERSION, C, cg.codebook_size, T, cg.frame_rate)
    return head + cg.tokens.astype("<u2").tobytes(order="C")


def codegram_from_bytes(buf: bytes) -> Codegram:
    if len(buf) < _HEADER.size:
        raise FormatError("truncated codegram header")
    magic, version, C, K, T, rate = _HEADER.unpack_from(buf, 0)
    if magic != CODEGRAM_MAGIC:
        raise FormatError("bad codegram magic")
    if version != CODEGRAM_VERSION:
        raise FormatError(f"unsupported codegram version {version}")
    expected = _HEADER.size + 2 * C * T
    if len(buf) != expected:
        raise FormatError(f"codegram payload is {len(buf)} bytes, expected {expected}")
    ids = np.frombuffer(buf, dtype="<u2", count=C * T, offset=_HEADER.size).reshape(C, T)
    try:
        return Codegram(ids.copy(), K, rate)
    except CorruptCodegramError as exc:
        raise FormatError(str(exc)) from None


def write_codegram(path, cg: Codegram):
    with open(path, "wb") as fp:
        fp.write(codegram_to_bytes(cg))


def read_codegram(path) -> Codegram:
    with open(path, "rb") as fp:
        return codegram_from_bytes(fp.read())


@dataclass
class CodecConfig:
    num_codebooks: int = 4
    codebook_size: int = 256
    latent_dim: int = 64
    window: int = 1024
    hop: int = 256
    sample_rate: int = 16000
    decay: float = 0.99
    iterations: int = 300
    batch_size: int = 2048
    dead_fraction: float = 1e-3
    min_frames: int = 256
    seed: int = 0


@dataclass
class CodebookSet:
    codebooks: np.ndarray  # (C, K, d_c)
    ema_counts: np.ndarray  # (C, K)
    projection_in: np.ndarray  # (F, d_c)
    projection_out: np.ndarray  # (d_c, F)
    window: int
    hop: int
    sample_rate: int

    @property
    def num_codebooks(self):
        return self.codebooks.shape[0]

    @property
    def codebook_size(self):
        return self.codebooks.shape[1]

    @property
    def latent_dim(self):
        return self.codebooks.shape[2]

    @property
    def frame_rate(self):
        return self.sample_rate / self.hop

    def save(self, path):
        arrays = {
            "codebooks": self.codebooks,
            "ema_counts": self.ema_counts,
            "projection_in": self.projection_in,
            "projection_out": self.projection_out,
        }
        meta = {"kind": "codec", "window": self.window, "hop": self.hop,
                "sample_rate": self.sample_rate}
        save_checkpoint(path, arrays, meta)

    @classmethod
    def load(cls, path):
        arrays, meta = load_checkpoint(path)
        if not meta or meta.get("kind") != "codec":
            raise FormatError(f"{path} is not a codec checkpoint")
        return cls(arrays["codebooks"].astype(np.float64), arrays["ema_counts"].astype(np.float64),
                   arrays["projection_in"].astype(np.float64),
                   arrays["projection_out"].astype(np.float64),
                   meta["window"], meta["hop"], meta["sample_rate"])


def _frames_array(frames):
    return frames.frames if isinstance(frames, SpectralFrames) else np.asarray(frames)


def nearest_codes(x, centroids, chunk=512):
    """Index of the nearest centroid (squared L2) for each row; lowest id wins ties."""
    out = np.empty(x.shape[0], dtype=np.int64)
    for s in range(0, x.shape[0], chunk):
        diff = x[s:s + chunk, None, :] - centroids[None, :, :]
        out[s:s + chunk] = np.argmin(np.einsum("nkd,nkd->nk", diff, diff), axis=1)
    return out


def _fast_nearest(x, centroids):
    d = (x**2).sum(1)[:, None] - 2.0 * x @ centroids.T + (centroids**2).sum(1)[None, :]
    return np.argmin(d, axis=1)


def rvq_quantize(latent, cb: CodebookSet, stages=None):
    """Returns ``(codes (C, N), residual norms (C + 1, N))`` for latent rows."""
    C = cb.num_codebooks if stages is None else stages
    r = np.array(latent, dtype=np.float64)
    codes = np.empty((C, r.shape[0]), dtype=np.int64)
    norms = np.empty((C + 1, r.shape[0]))
    norms[0] = np.linalg.norm(r, axis=1)
    for c in range(C):
        k = nearest_codes(r, cb.codebooks[c])
        codes[c] = k
        r = r - cb.codebooks[c][k]
        norms[c + 1] = np.linalg.norm(r, axis=1)
    return codes, norms


def _check_trained(cb: CodebookSet):
    if not np.any(cb.codebooks) or not np.any(cb.projection_in):
        raise NotTrainedError("codebooks are untrained (all zero)")


def rvq_encode(frames, cb: CodebookSet) -> Codegram:
    _check_trained(cb)
    x = _frames_array(frames)
    if x.ndim != 2 or x.shape[1] != cb.projection_in.shape[0]:
        raise DimensionError(
            f"frame dim {x.shape[-1]} does not match codec input {cb.projection_in.shape[0]}")
    codes, _ = rvq_quantize(x @ cb.projection_in, cb)
    return Codegram(codes, cb.codebook_size, cb.frame_rate)


def encode_clip(clip: AudioClip, cb: CodebookSet) -> Codegram:
    return rvq_encode(dsp.compressed_spectrogram(clip, cb.window, cb.hop), cb)


def rvq_decode(cg: Codegram, cb: CodebookSet, stages=None) -> SpectralFrames:
    """Sum of selected centroids, projected back to frames and clamped at zero.

    ``stages`` limits decoding to the first ``stages`` codebooks.
    """
    tokens = np.asarray(cg.tokens)
    C = tokens.shape[0]
    if C != cb.num_codebooks or cg.codebook_size != cb.codebook_size:
        raise DimensionError(
            f"codegram {C}x{cg.codebook_size} does not match codec "
            f"{cb.num_codebooks}x{cb.codebook_size}")
    if tokens.size and tokens.max() >= cb.codebook_size:
        raise CorruptCodegramError("token id out of range")
    use = C if stages is None else stages
    z = np.zeros((tokens.shape[1], cb.latent_dim))
    for c in range(use):
        z += cb.codebooks[c][tokens[c].astype(np.int64)]
    frames = np.maximum(z @ cb.projection_out, 0.0)
    return SpectralFrames(frames, cb.window, cb.hop, cb.sample_rate)


def decode_to_audio(cg: Codegram, cb: CodebookSet, gl_iters=32, length=None) -> AudioClip:
    frames = rvq_decode(cg, cb)
    mag = dsp.power_law_expand(frames.frames)
    return dsp.griffin_lim(mag, cb.window, cb.hop, gl_iters, cb.sample_rate, length)


def ema_kmeans(data, k, rng, decay=0.99, iterations=300, batch_size=2048,
               dead_fraction=1e-3, pin_zero=False, init=None):
    """Minibatch k-means with exponential moving averages of counts and sums.

    Returns ``(centroids, ema_counts)``. Codes whose EMA share of assignments
    drops below ``dead_fraction`` of the uniform share are reseeded at the
    batch rows their nearest centroid fits worst. With ``pin_zero`` code 0
    stays at the origin. Seeds are drawn from distinct rows so that no two
    codes start out identical (duplicates would tie forever).
    """
    data = np.asarray(data, dtype=np.float64)
    n, d = data.shape
    if init is None:
        pool = np.unique(data, axis=0)
        if pin_zero:
            pool = pool[np.any(pool != 0.0, axis=1)]
        if pool.shape[0] == 0:
            pool = data
        centroids = pool[rng.choice(pool.shape[0], size=k, replace=pool.shape[0] < k)].copy()
    else:
        centroids = np.array(init, dtype=np.float64)
    if pin_zero:
        centroids[0] = 0.0
    counts = np.ones(k)
    sums = centroids * counts[:, None]
    free = np.arange(1 if pin_zero else 0, k)
    for _ in range(iterations):
        batch = data[rng.choice(n, size=min(batch_size, n), replace=False)]
        assign = _fast_nearest(batch, centroids)
        bc = np.bincount(assign, minlength=k).astype(np.float64)
        bs = np.zeros((k, d))
        np.add.at(bs, assign, batch)
        counts = decay * counts + (1 - decay) * bc
        sums = decay * sums + (1 - decay) * bs
        centroids[free] = sums[free] / np.maximum(counts[free], 1e-12)[:, None]
        share = counts / counts.sum()
        dead = free[share[free] < dead_fraction / k]
        if dead.size:
            err = np.sum((batch - centroids[assign]) ** 2, axis=1)
            order = np.argsort(-err, kind="stable")
            picks = batch[order[np.arange(dead.size) % batch.shape[0]]]
            centroids[dead] = picks
            counts[dead] = counts.mean()
            sums[dead] = picks * counts[dead][:, None]
    if pin_zero:
        centroids[0] = 0.0
    return centroids, counts


def fit_projection(x, latent_dim):
    """Orthonormal rank-``latent_dim`` basis minimising squared reconstruction error."""
    _, s, vt = np.linalg.svd(x, full_matrices=False)
    basis = vt[:latent_dim].T
    if basis.shape[1] < latent_dim:
        basis = np.pad(basis, ((0, 0), (0, latent_dim - basis.shape[1])))
    return basis, basis.T.copy()


def train_codec(corpus, cfg: CodecConfig) -> CodebookSet:
    """Fit projections and stage-wise EMA k-means codebooks.

    ``corpus`` is an iterable of AudioClips or SpectralFrames (or raw T x F arrays).
    """
    mats = []
    for item in corpus:
        if isinstance(item, AudioClip):
            item = dsp.compressed_spectrogram(item, cfg.window, cfg.hop)
        mats.append(_frames_array(item))
    x = np.concatenate(mats, axis=0) if mats else np.zeros((0, cfg.window // 2 + 1))
    if x.shape[0] < max(cfg.min_frames, cfg.codebook_size):
        raise DimensionError(
            f"corpus has {x.shape[0]} frames; need at least "
            f"{max(cfg.min_frames, cfg.codebook_size)}")
    rng = np.random.default_rng(cfg.seed)
    p_in, p_out = fit_projection(x, cfg.latent_dim)
    r = x @ p_in
    books, counts = [], []
    for c in range(cfg.num_codebooks):
        cents, cnt = ema_kmeans(r, cfg.codebook_size, rng, cfg.decay, cfg.iterations,
                                cfg.batch_size, cfg.dead_fraction, pin_zero=True)
        k = nearest_codes(r, cents)
        r = r - cents[k]
        log.info("stage %d: %d/%d codes used, residual rms %.4f", c + 1,
                 np.unique(k).size, cfg.codebook_size, float(np.sqrt((r**2).mean())))
        books.append(cents)
        counts.append(cnt)
    return CodebookSet(np.stack(books), np.stack(counts), p_in, p_out,
                       cfg.window, cfg.hop, cfg.sample_rate)


def codebook_utilization(cb: CodebookSet, frames) -> np.ndarray:
    """Fraction of codes used per stage on ``frames``."""
    cg = rvq_encode(frames, cb)
    return np.array([np.unique(row).size / cb.codebook_size for row in cg.tokens])


def reencode_agreement(cg: Codegram, cb: CodebookSet) -> float:
    """Share of tokens unchanged after decode then re-encode (quality metric)."""
    again = rvq_encode(rvq_decode(cg, cb), cb)
    return float(np.mean(again.tokens == cg.tokens))
