"""The restoration LM: codegram embedding, conditioning, transformer stack, C heads,
and the three training objectives (parallel masking, hierarchical, autoregressive)."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .codec import CodebookSet
from .config import ModelConfig
from .errors import AlignmentError, DimensionError, FormatError
from .frontends import build_frontend, check_alignment
from .nn_core import (
    Adam,
    Embedding,
    LayerNorm,
    Module,
    Tensor,
    TransformerBlock,
    TransformerBlockConfig,
    add,
    concat,
    cross_entropy_masked,
    embedding,
    load_checkpoint,
    matmul,
    mul,
    no_grad,
    parameter,
    reshape,
    save_checkpoint,
    sinusoidal_positions,
    transpose,
)

log = logging.getLogger(__name__)


class RestorerModel(Module):
    def __init__(self, cfg: ModelConfig, codec: CodebookSet | None = None):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        C, K, d = cfg.num_codebooks, cfg.codebook_size, cfg.model_dim
        # row K of every table is the mask token
        self.tables = [Embedding(K + 1, d, rng) for _ in range(C)]
        self.frontend = build_frontend(cfg, rng, codec)
        bc = TransformerBlockConfig(d, cfg.num_heads)
        self.blocks = [TransformerBlock(bc, rng) for _ in range(cfg.lm_blocks)]
        self.ln_f = LayerNorm(d)
        bound = 1.0 / math.sqrt(d)
        self.head_weight = parameter(rng.uniform(-bound, bound, size=(C, d, K)))
        self.null_cond = parameter(rng.uniform(-1.0, 1.0, size=d))

    @property
    def num_codebooks(self):
        return self.cfg.num_codebooks

    @property
    def codebook_size(self):
        return self.cfg.codebook_size

    @property
    def mask_id(self):
        return self.cfg.codebook_size

    @property
    def causal(self):
        return self.cfg.objective == "ar"

    # -- conditioning -------------------------------------------------------

    def features(self, clip):
        return self.frontend.features(clip)

    def conditioning(self, feats):
        """(B, ...) frontend features -> (B, T, d) conditioning Tensor."""
        return self.frontend(feats)

    def with_null(self, cond: Tensor, drop):
        """Replace batch rows where ``drop`` is set by the learnable null embedding."""
        drop = np.asarray(drop, dtype=bool)
        if not drop.any():
            return cond
        keep = Tensor((~drop).astype(cond.data.dtype)[:, None, None])
        null = mul(reshape(self.null_cond, (1, 1, -1)), Tensor(drop.astype(cond.data.dtype)[:, None, None]))
        return add(mul(cond, keep), null)

    def null_conditioning(self, batch, frames):
        return add(Tensor(np.zeros((batch, frames, self.cfg.model_dim), dtype=np.float32)),
                   reshape(self.null_cond, (1, 1, -1)))

    # -- forward ------------------------------------------------------------

    def embed_codegram(self, ids):
        """(B, C, T) ids in [0, K] -> (B, T, d) summed over codebooks."""
        ids = np.asarray(ids)
        if ids.shape[-2] != self.num_codebooks:
            raise DimensionError(f"expected {self.num_codebooks} codebooks, got {ids.shape[-2]}")
        if ids.size and (ids.min() < 0 or ids.max() > self.mask_id):
            raise DimensionError(f"token id outside [0, {self.mask_id}]")
        out = None
        for c, table in enumerate(self.tables):
            e = table(ids[..., c, :])
            out = e if out is None else add(out, e)
        return out

    def _trunk(self, x, causal):
        for blk in self.blocks:
            x = blk(x, causal=causal)
        return self.ln_f(x)

    def _heads(self, h):
        """(B, T, d) -> (B, C, T, K)."""
        B, T, d = h.shape
        return matmul(reshape(h, (B, 1, T, d)), self.head_weight)

    def forward_logits(self, ids, cond: Tensor):
        """Masked-LM logits (B, C, T, K) for (B, C, T) ids given (B, T, d) conditioning."""
        ids = np.asarray(ids)
        if ids.ndim == 2:
            ids = ids[None]
        T = ids.shape[-1]
        check_alignment(cond.shape[-2], T)
        x = add(self.embed_codegram(ids), cond)
        x = add(x, Tensor(sinusoidal_positions(T, self.cfg.model_dim)))
        return self._heads(self._trunk(x, causal=False))

    def ar_inputs(self, ids):
        """Shifted flat sequence laid out as (B, C, T): entry (c, t) holds the token
        preceding flat position t * C + c (the mask id at position 0)."""
        ids = np.asarray(ids)
        B, C, T = ids.shape
        flat = ids.transpose(0, 2, 1).reshape(B, C * T)
        shifted = np.concatenate([np.full((B, 1), self.mask_id, dtype=flat.dtype), flat[:, :-1]], axis=1)
        return shifted.reshape(B, T, C).transpose(0, 2, 1)

    def ar_forward_logits(self, ids, cond: Tensor):
        """Teacher-forced causal logits over the time-major flattened codegram.

        Flat position i = t * C + c sees its codebook's table applied to token i - 1,
        the conditioning frame t (repeated C times) and a sinusoid for i.
        Returns (B, C, T, K) aligned with ``ids``.
        """
        ids = np.asarray(ids)
        if ids.ndim == 2:
            ids = ids[None]
        B, C, T = ids.shape
        check_alignment(cond.shape[-2], T)
        d = self.cfg.model_dim
        inp = self.ar_inputs(ids)
        per_cb = [reshape(self.tables[c](inp[:, c, :]), (B, T, 1, d)) for c in range(C)]
        x = concat(per_cb, axis=2)  # (B, T, C, d)
        x = add(x, reshape(cond, (B, T, 1, d)))
        x = add(x, Tensor(sinusoidal_positions(T * C, d).reshape(T, C, d)))
        h = self._trunk(reshape(x, (B, T * C, d)), causal=True)
        h = transpose(reshape(h, (B, T, C, d)), (0, 2, 1, 3))  # (B, C, T, d)
        return matmul(h, self.head_weight)

    # -- inference helpers used by the sampler ----------------------------

    def condition(self, clip) -> np.ndarray:
        """(T, d) conditioning array for one clip."""
        with no_grad():
            return self.conditioning(self.features(clip)[None]).data[0]

    def logits(self, tokens, conds):
        """One batched forward. ``conds`` lists (T, d) arrays or None (unconditional)."""
        tokens = np.asarray(tokens)
        T = tokens.shape[-1]
        rows = []
        for cond in conds:
            if cond is None:
                rows.append(np.broadcast_to(self.null_cond.data, (T, self.cfg.model_dim)))
            else:
                check_alignment(cond.shape[0], T)
                rows.append(cond)
        with no_grad():
            ids = np.broadcast_to(tokens, (len(conds),) + tokens.shape)
            out = self.forward_logits(ids, Tensor(np.stack(rows).astype(np.float32)))
        return out.data

    def ar_session(self, cond):
        return ARSession(self, cond)

    # -- persistence ----------------------------------------------------------

    def save(self, path):
        save_checkpoint(path, self.state_dict(), {"kind": "restorer", "model": self.cfg.to_dict()})

    @classmethod
    def load(cls, path, codec: CodebookSet | None = None):
        arrays, meta = load_checkpoint(path)
        if not meta or meta.get("kind") != "restorer":
            raise FormatError(f"{path} is not a restorer checkpoint")
        model = cls(ModelConfig.from_dict(meta["model"]), codec)
        model.load_state_dict(arrays)
        return model

    def parameter_counts(self):
        C, K, d = self.num_codebooks, self.codebook_size, self.cfg.model_dim
        return {
            "heads": self.head_weight.data.size,
            "tables": sum(t.table.data.size for t in self.tables),
            "expected_heads": C * d * K,
            "expected_tables": C * (K + 1) * d,
        }


# ---------------------------------------------------------------------------
# incremental causal decoding with a key/value cache


def _ln(x, ln: LayerNorm):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(-1, keepdims=True)
    return xc / np.sqrt(var + ln.eps) * ln.gamma.data + ln.beta.data


def _gelu(x):
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * x * (1.0 + 0.044715 * x * x)))


class ARSession:
    """Feeds one flat position at a time; each ``step`` is one model invocation."""

    def __init__(self, model: RestorerModel, cond):
        self.model = model
        cfg = model.cfg
        self.C = cfg.num_codebooks
        self.T = cond.shape[0]
        self.L = self.C * self.T
        self.h = cfg.num_heads
        self.dh = cfg.model_dim // cfg.num_heads
        self.cond = np.asarray(cond, dtype=np.float32)
        self.pos = sinusoidal_positions(self.L, cfg.model_dim)
        self.k_cache = [np.zeros((self.h, self.L, self.dh), np.float32) for _ in model.blocks]
        self.v_cache = [np.zeros((self.h, self.L, self.dh), np.float32) for _ in model.blocks]
        self.i = 0

    def step(self, prev_token=None):
        """Logits (K,) for flat position ``self.i``; ``prev_token`` is token i - 1."""
        m = self.model
        i = self.i
        if i >= self.L:
            raise IndexError("sequence already complete")
        c, t = i % self.C, i // self.C
        tok = m.mask_id if i == 0 else int(prev_token)
        x = m.tables[c].table.data[tok] + self.cond[t] + self.pos[i]
        scale = 1.0 / math.sqrt(self.dh)
        for b, blk in enumerate(m.blocks):
            a = _ln(x, blk.ln1)
            q = (a @ blk.attn.q.weight.data + blk.attn.q.bias.data).reshape(self.h, self.dh)
            k = (a @ blk.attn.k.weight.data + blk.attn.k.bias.data).reshape(self.h, self.dh)
            v = (a @ blk.attn.v.weight.data + blk.attn.v.bias.data).reshape(self.h, self.dh)
            self.k_cache[b][:, i] = k
            self.v_cache[b][:, i] = v
            keys = self.k_cache[b][:, : i + 1]
            s = np.einsum("hd,hld->hl", q, keys) * scale
            w = np.exp(s - s.max(-1, keepdims=True))
            w /= w.sum(-1, keepdims=True)
            o = np.einsum("hl,hld->hd", w, self.v_cache[b][:, : i + 1]).reshape(-1)
            x = x + o @ blk.attn.o.weight.data + blk.attn.o.bias.data
            f = _gelu(_ln(x, blk.ln2) @ blk.fc1.weight.data + blk.fc1.bias.data)
            x = x + f @ blk.fc2.weight.data + blk.fc2.bias.data
        self.i += 1
        return _ln(x, m.ln_f) @ m.head_weight.data[c]


# ---------------------------------------------------------------------------
# training objectives


def sample_mask_ratio(rng):
    """Cosine law r = cos(pi/2 * u), u ~ U(0, 1)."""
    return math.cos(0.5 * math.pi * rng.random())


def random_mask(rng, shape, ratio):
    """Boolean mask with exactly ceil(ratio * size) set positions (at least one)."""
    size = int(np.prod(shape))
    n = min(size, max(1, math.ceil(ratio * size)))
    flat = np.zeros(size, dtype=bool)
    flat[rng.choice(size, size=n, replace=False)] = True
    return flat.reshape(shape)


@dataclass
class StepResult:
    loss: Tensor
    logits: Tensor
    loss_mask: np.ndarray
    cond_dropped: np.ndarray
    extra: dict = field(default_factory=dict)

    def masked_accuracy(self, targets):
        pred = self.logits.data.argmax(-1)
        hits = (pred == targets) & self.loss_mask
        per_cb = hits.sum(axis=(0, 2)) / np.maximum(self.loss_mask.sum(axis=(0, 2)), 1)
        return per_cb


def _conditioned(model, feats, rng, dropout):
    cond = model.conditioning(feats)
    drop = rng.random(cond.shape[0]) < dropout
    return model.with_null(cond, drop), drop


def masksr_training_step(model: RestorerModel, clean_ids, feats, rng) -> StepResult:
    """Mask ceil(r * C * T) random positions per example; loss on masked positions only."""
    clean_ids = np.asarray(clean_ids)
    B, C, T = clean_ids.shape
    cond, drop = _conditioned(model, feats, rng, model.cfg.cfg_dropout)
    mask = np.stack([random_mask(rng, (C, T), sample_mask_ratio(rng)) for _ in range(B)])
    ids = np.where(mask, model.mask_id, clean_ids)
    logits = model.forward_logits(ids, cond)
    loss = cross_entropy_masked(logits, clean_ids, mask)
    return StepResult(loss, logits, mask, drop)


def soundstorm_training_step(model: RestorerModel, clean_ids, feats, rng, codebook=None) -> StepResult:
    """Pick one codebook c*; lower codebooks visible, c* partly masked, higher ones fully
    masked. Loss on the masked positions of c* only."""
    clean_ids = np.asarray(clean_ids)
    B, C, T = clean_ids.shape
    cond, drop = _conditioned(model, feats, rng, model.cfg.cfg_dropout)
    chosen = rng.integers(0, C, size=B) if codebook is None else np.full(B, codebook)
    ids = clean_ids.copy()
    loss_mask = np.zeros((B, C, T), dtype=bool)
    for b in range(B):
        c = chosen[b]
        row = random_mask(rng, (T,), sample_mask_ratio(rng))
        ids[b, c][row] = model.mask_id
        ids[b, c + 1:] = model.mask_id
        loss_mask[b, c] = row
    logits = model.forward_logits(ids, cond)
    loss = cross_entropy_masked(logits, clean_ids, loss_mask)
    return StepResult(loss, logits, loss_mask, drop, {"codebooks": chosen})


def ar_training_step(model: RestorerModel, clean_ids, feats, rng=None) -> StepResult:
    clean_ids = np.asarray(clean_ids)
    cond = model.conditioning(feats)
    logits = model.ar_forward_logits(clean_ids, cond)
    mask = np.ones(clean_ids.shape, dtype=bool)
    loss = cross_entropy_masked(logits, clean_ids, mask)
    return StepResult(loss, logits, mask, np.zeros(clean_ids.shape[0], dtype=bool))


TRAINING_STEPS = {
    "masksr": masksr_training_step,
    "soundstorm": soundstorm_training_step,
    "ar": ar_training_step,
}


@dataclass
class TrainingExample:
    tokens: np.ndarray  # (C, T) clean target ids
    features: np.ndarray  # frontend features of the corrupted clip


def _stack_features(items):
    return np.stack(items)


def train_restorer(model: RestorerModel, examples, steps, batch_size=8, lr=1e-4, seed=0,
                   log_every=100, callback=None):
    """Adam on the model's objective; returns the per-step loss history.

    ``examples`` is a list of :class:`TrainingExample` (all with equal T).
    Each step draws ``batch_size`` examples without replacement (the whole
    list when it is not larger than the batch).
    """
    step_fn = TRAINING_STEPS[model.cfg.objective]
    rng = np.random.default_rng(seed)
    opt = Adam(model.parameters(), lr=lr)
    history = []
    t0 = time.perf_counter()
    n = len(examples)
    for step in range(steps):
        if n <= batch_size:
            idx = np.arange(n)
        else:
            idx = rng.choice(n, size=batch_size, replace=False)
        tokens = np.stack([examples[i].tokens for i in idx]).astype(np.int64)
        feats = _stack_features([examples[i].features for i in idx])
        opt.zero_grad()
        res = step_fn(model, tokens, feats, rng)
        res.loss.backward()
        opt.step()
        history.append(float(res.loss.data))
        if callback is not None:
            callback(step, res, tokens)
        if log_every and (step + 1) % log_every == 0:
            log.info("step %d/%d loss %.4f (%.1fs)", step + 1, steps,
                     np.mean(history[-log_every:]), time.perf_counter() - t0)
    return history


def masked_accuracy(model: RestorerModel, examples, rng, ratio=None):
    """Per-codebook argmax accuracy on freshly masked positions (no CFG dropout)."""
    tokens = np.stack([e.tokens for e in examples]).astype(np.int64)
    feats = _stack_features([e.features for e in examples])
    B, C, T = tokens.shape
    with no_grad():
        cond = model.conditioning(feats)
        if model.cfg.objective == "ar":
            logits = model.ar_forward_logits(tokens, cond).data
            mask = np.ones(tokens.shape, dtype=bool)
        else:
            mask = np.stack([random_mask(rng, (C, T), sample_mask_ratio(rng) if ratio is None else ratio)
                             for _ in range(B)])
            logits = model.forward_logits(np.where(mask, model.mask_id, tokens), cond).data
    hits = (logits.argmax(-1) == tokens) & mask
    return hits.sum(axis=(0, 2)) / np.maximum(mask.sum(axis=(0, 2)), 1)
