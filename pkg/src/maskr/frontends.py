"""Conditioning encoders mapping a corrupted clip to a T x d sequence.

Each frontend splits into ``features(clip)`` (numpy, no parameters, cacheable
per clip) and ``__call__(features)`` (differentiable, batched (B, ...)).
"""
from __future__ import annotations

import numpy as np

from . import dsp
from .codec import CodebookSet, rvq_encode
from .config import ModelConfig
from .dsp import AudioClip
from .errors import AlignmentError, NotTrainedError
from .nn_core import (
    Embedding,
    LayerNorm,
    Linear,
    Module,
    Tensor,
    TransformerBlock,
    TransformerBlockConfig,
    add,
    gelu,
    relu,
    sinusoidal_positions,
)


def check_alignment(cond_frames, target_frames):
    if cond_frames != target_frames:
        raise AlignmentError(
            f"conditioning has {cond_frames} frames but the target codegram has {target_frames}")


class _EncoderStack(Module):
    def __init__(self, cfg: ModelConfig, num_blocks, rng):
        bc = TransformerBlockConfig(cfg.model_dim, cfg.num_heads)
        self.blocks = [TransformerBlock(bc, rng) for _ in range(num_blocks)]

    def __call__(self, x):
        T, d = x.shape[-2:]
        x = add(x, Tensor(sinusoidal_positions(T, d)))
        for blk in self.blocks:
            x = blk(x, causal=False)
        return x


class STFTFrontend(Module):
    """Power-law STFT -> two-layer MLP -> bidirectional transformer blocks."""

    source = "stft"

    def __init__(self, cfg: ModelConfig, rng):
        self.window, self.hop = cfg.window, cfg.hop
        n_bins = cfg.window // 2 + 1
        self.fc1 = Linear(n_bins, cfg.model_dim, rng)
        self.fc2 = Linear(cfg.model_dim, cfg.model_dim, rng)
        self.encoder = _EncoderStack(cfg, cfg.enc_blocks, rng)

    def features(self, clip: AudioClip):
        return dsp.compressed_spectrogram(clip, self.window, self.hop).frames.astype(np.float32)

    def __call__(self, feats):
        return self.encoder(self.fc2(gelu(self.fc1(Tensor(feats)))))


class WaveformFrontend(Module):
    """Strided learnable filterbank (kernel = window, stride = hop) -> ReLU ->
    layer norm -> linear to d -> bidirectional transformer blocks."""

    source = "waveform"

    def __init__(self, cfg: ModelConfig, rng):
        self.window, self.hop = cfg.window, cfg.hop
        self.conv = Linear(cfg.window, cfg.conv_channels, rng)
        self.norm = LayerNorm(cfg.conv_channels)
        self.proj = Linear(cfg.conv_channels, cfg.model_dim, rng)
        self.encoder = _EncoderStack(cfg, cfg.enc_blocks, rng)

    def features(self, clip: AudioClip):
        # same centred framing as the STFT so frame counts agree
        return dsp.frame_signal(clip.samples, self.window, self.hop).astype(np.float32)

    def __call__(self, feats):
        h = self.norm(relu(self.conv(Tensor(feats))))
        return self.encoder(self.proj(h))


class CodecTokenFrontend(Module):
    """Codec tokens of the corrupted clip, embedded with their own tables and summed.

    No encoder stack: the LM receives the summed embeddings directly.
    """

    source = "codec_tokens"

    def __init__(self, cfg: ModelConfig, rng, codec: CodebookSet | None = None):
        self.codec = codec
        self.tables = [Embedding(cfg.codebook_size, cfg.model_dim, rng, scale=_EMB_SCALE)
                       for _ in range(cfg.num_codebooks)]

    def features(self, clip: AudioClip):
        if self.codec is None:
            raise NotTrainedError("codec-token frontend needs a trained codec")
        cg = rvq_encode(dsp.compressed_spectrogram(clip, self.codec.window, self.codec.hop),
                        self.codec)
        return cg.tokens.astype(np.int64)

    def __call__(self, feats):
        feats = np.asarray(feats)
        out = None
        for c, table in enumerate(self.tables):
            e = table(feats[..., c, :])
            out = e if out is None else add(out, e)
        return out


_EMB_SCALE = 1.0


def build_frontend(cfg: ModelConfig, rng, codec: CodebookSet | None = None):
    if cfg.frontend == "stft":
        return STFTFrontend(cfg, rng)
    if cfg.frontend == "waveform":
        return WaveformFrontend(cfg, rng)
    return CodecTokenFrontend(cfg, rng, codec)
