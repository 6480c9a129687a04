"""Reverse-mode autodiff on numpy arrays, transformer building blocks and Adam.

Every op records a closure that maps the output gradient to the gradients of
its inputs. ``Tensor.backward`` walks the graph in reverse topological order.
Arrays keep whatever float dtype they were created with; models use float32,
gradient checks promote parameters to float64.
"""
from __future__ import annotations

import contextlib
import io
import json
import math
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import (
    DimensionError,
    EmptyMaskError,
    FormatError,
    InvalidConfigError,
    TrainingDivergedError,
)

DTYPE = np.float32
_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference mode)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        if not isinstance(data, np.ndarray):
            data = np.asarray(data, dtype=DTYPE)
        self.data = data
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise DimensionError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(_wrap(other), -1.0))

    def __rsub__(self, other):
        return add(_wrap(other), mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)


def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _wrap(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=DTYPE))


def _make(data, parents, backward):
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward)
    return Tensor(data)


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def parameter(data) -> Tensor:
    return Tensor(np.ascontiguousarray(data, dtype=DTYPE), requires_grad=True)


# ---------------------------------------------------------------------------
# primitive ops


def add(a, b):
    a, b = _wrap(a), _wrap(b)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), backward)


def mul(a, b):
    a = _wrap(a)
    if not isinstance(b, Tensor):
        s = b
        out = a.data * s
        return _make(out, (a,), lambda g: (g * s,))
    out = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), backward)


def matmul(a, b):
    a, b = _wrap(a), _wrap(b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise DimensionError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), backward)


def reshape(a, shape):
    src = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def concat(tensors, axis=0):
    tensors = [_wrap(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tuple(tensors), backward)


def tsum(a):
    shape = a.shape
    out = np.asarray(a.data.sum(), dtype=a.data.dtype)
    return _make(out, (a,), lambda g: (np.broadcast_to(g, shape).astype(a.data.dtype),))


def tmean(a):
    n = a.data.size
    shape = a.shape
    out = np.asarray(a.data.mean(), dtype=a.data.dtype)
    return _make(out, (a,), lambda g: (np.full(shape, g / n, dtype=a.data.dtype),))


def relu(a):
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a):
    """Tanh approximation of GELU."""
    x = a.data
    x2 = x * x
    th = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + th)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner),)

    return _make(out, (a,), backward)


def softmax(a, axis=-1):
    x = a.data
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (a,), backward)


def layer_norm(x, gamma, beta, eps=1e-5):
    d = x.shape[-1]
    if d == 0:
        raise InvalidConfigError("layer_norm over an empty feature dimension")
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm affine params must be ({d},)")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        axes = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        gx = g * gamma.data
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return dx, dgamma, dbeta

    return _make(out, (x, gamma, beta), backward)


def embedding(table, ids):
    ids = np.asarray(ids)
    V, d = table.shape
    if ids.size and (ids.min() < 0 or ids.max() >= V):
        raise DimensionError(f"embedding id out of range [0, {V})")
    out = table.data[ids]

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, d))
        return (gt,)

    return _make(out, (table,), backward)


def cross_entropy_masked(logits, targets, mask):
    """Mean negative log-likelihood of ``targets`` over positions where ``mask`` is set.

    ``logits`` has shape ``mask.shape + (K,)``. Gradients at unmasked
    positions are exactly zero.
    """
    mask = np.asarray(mask, dtype=bool)
    targets = np.asarray(targets)
    if logits.shape[:-1] != mask.shape or targets.shape != mask.shape:
        raise DimensionError(
            f"logits {logits.shape} / targets {targets.shape} / mask {mask.shape} disagree")
    n = int(mask.sum())
    if n == 0:
        raise EmptyMaskError("cross_entropy_masked needs at least one masked position")
    K = logits.shape[-1]
    sel = logits.data[mask]
    tgt = targets[mask]
    z = sel - sel.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    nll = lse - z[np.arange(n), tgt]
    out = np.asarray(nll.mean(), dtype=logits.data.dtype)

    def backward(g):
        p = np.exp(z - lse[:, None])
        p[np.arange(n), tgt] -= 1.0
        full = np.zeros_like(logits.data)
        full[mask] = p * (g / n)
        return (full,)

    return _make(out, (logits,), backward)


# ---------------------------------------------------------------------------
# layers


def linear_forward(x, weight, bias=None):
    """``x @ weight + bias`` with weight laid out (in, out)."""
    if x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"linear: input dim {x.shape[-1]} != weight rows {weight.shape[0]}")
    y = matmul(x, weight)
    if bias is not None:
        if bias.shape != (weight.shape[1],):
            raise DimensionError("linear: bias shape mismatch")
        y = add(y, bias)
    return y


def sinusoidal_positions(T, d, dtype=DTYPE):
    pos = np.arange(T)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    pe = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return pe.astype(dtype)


def causal_bias(T, dtype=DTYPE):
    return np.triu(np.full((T, T), -1e9, dtype=dtype), k=1)


def _split_heads(x, h):
    *lead, T, d = x.shape
    y = reshape(x, (*lead, T, h, d // h))
    n = y.ndim
    return transpose(y, (*range(n - 3), n - 2, n - 3, n - 1))


def _merge_heads(x):
    *lead, h, T, dh = x.shape
    n = x.ndim
    y = transpose(x, (*range(n - 3), n - 2, n - 3, n - 1))
    return reshape(y, (*lead, T, h * dh))


def scaled_dot_product_attention(q, k, v, causal=False, return_weights=False):
    """Attention over the last two axes; q, k, v are (..., T, dh)."""
    dh = q.shape[-1]
    scores = mul(matmul(q, transpose(k, (*range(k.ndim - 2), k.ndim - 1, k.ndim - 2))),
                 1.0 / math.sqrt(dh))
    if causal:
        scores = add(scores, Tensor(causal_bias(q.shape[-2], scores.data.dtype)))
    w = softmax(scores, axis=-1)
    out = matmul(w, v)
    return (out, w) if return_weights else out


@dataclass(frozen=True)
class TransformerBlockConfig:
    model_dim: int
    num_heads: int
    mlp_hidden: int = 0
    norm_eps: float = 1e-5
    dropout: float = 0.0

    def __post_init__(self):
        if self.model_dim <= 0 or self.num_heads <= 0:
            raise InvalidConfigError("model_dim and num_heads must be positive")
        if self.model_dim % self.num_heads:
            raise InvalidConfigError(
                f"num_heads {self.num_heads} does not divide model_dim {self.model_dim}")
        if self.mlp_hidden == 0:
            object.__setattr__(self, "mlp_hidden", 4 * self.model_dim)


class Module:
    """Parameter container. Parameters are Tensors, lists of Modules are walked."""

    def named_parameters(self, prefix=""):
        for name, val in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield key, val
            elif isinstance(val, Module):
                yield from val.named_parameters(key + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{key}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{key}.{i}", item

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def num_parameters(self):
        return sum(p.data.size for p in self.parameters())

    def state_dict(self):
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state):
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        unexpected = set(state) - set(params)
        if missing or unexpected:
            raise FormatError(
                f"state mismatch: missing={sorted(missing)[:5]} unexpected={sorted(unexpected)[:5]}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.data.shape:
                raise FormatError(f"{name}: shape {arr.shape} != {p.data.shape}")
            p.data = np.ascontiguousarray(arr, dtype=p.data.dtype)


def _uniform(rng, shape, fan_in):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, n_in, n_out, rng, bias=True):
        self.weight = parameter(_uniform(rng, (n_in, n_out), n_in))
        self.bias = parameter(np.zeros(n_out)) if bias else None

    def __call__(self, x):
        return linear_forward(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, d, eps=1e-5):
        if d <= 0:
            raise InvalidConfigError("LayerNorm needs d > 0")
        self.gamma = parameter(np.ones(d))
        self.beta = parameter(np.zeros(d))
        self.eps = eps

    def __call__(self, x):
        return layer_norm(x, self.gamma, self.beta, self.eps)


class Embedding(Module):
    def __init__(self, num, d, rng, scale=1.0):
        self.table = parameter(rng.uniform(-scale, scale, size=(num, d)))

    def __call__(self, ids):
        return embedding(self.table, ids)


class MultiHeadAttention(Module):
    def __init__(self, cfg: TransformerBlockConfig, rng):
        d = cfg.model_dim
        self.num_heads = cfg.num_heads
        self.q = Linear(d, d, rng)
        self.k = Linear(d, d, rng)
        self.v = Linear(d, d, rng)
        self.o = Linear(d, d, rng)

    def __call__(self, x, causal=False, return_weights=False):
        h = self.num_heads
        q, k, v = (_split_heads(proj(x), h) for proj in (self.q, self.k, self.v))
        res = scaled_dot_product_attention(q, k, v, causal=causal, return_weights=return_weights)
        if return_weights:
            out, w = res
            return self.o(_merge_heads(out)), w
        return self.o(_merge_heads(res))


def multi_head_attention(x, attn: MultiHeadAttention, causal=False, return_weights=False):
    if x.shape[-2] < 1:
        raise DimensionError("attention over an empty sequence")
    return attn(x, causal=causal, return_weights=return_weights)


class TransformerBlock(Module):
    """Pre-norm block: x + attn(ln(x)), then x + mlp(ln(x))."""

    def __init__(self, cfg: TransformerBlockConfig, rng):
        self.ln1 = LayerNorm(cfg.model_dim, cfg.norm_eps)
        self.attn = MultiHeadAttention(cfg, rng)
        self.ln2 = LayerNorm(cfg.model_dim, cfg.norm_eps)
        self.fc1 = Linear(cfg.model_dim, cfg.mlp_hidden, rng)
        self.fc2 = Linear(cfg.mlp_hidden, cfg.model_dim, rng)

    def __call__(self, x, causal=False):
        x = add(x, self.attn(self.ln1(x), causal=causal))
        return add(x, self.fc2(gelu(self.fc1(self.ln2(x)))))


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    first_moment: list = field(default_factory=list)
    second_moment: list = field(default_factory=list)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray | None], state: AdamState):
    """In-place Adam update with bias correction. ``None`` grads count as zero."""
    if not state.first_moment:
        state.first_moment = [np.zeros_like(p) for p in params]
        state.second_moment = [np.zeros_like(p) for p in params]
    if len(params) != len(state.first_moment) or len(grads) != len(params):
        raise DimensionError("Adam: parameter list changed size")
    for p, g in zip(params, grads):
        if g is not None:
            if g.shape != p.shape:
                raise DimensionError(f"Adam: grad shape {g.shape} != param shape {p.shape}")
            if not np.all(np.isfinite(g)):
                raise TrainingDivergedError(state.step + 1)
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        if g is None:
            g = 0.0
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        p -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)
    return params, state


class Adam:
    def __init__(self, params: Iterable[Tensor], lr=1e-4, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)

    def step(self):
        adam_step([p.data for p in self.params], [p.grad for p in self.params], self.state)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(model_fn: Callable[[], Tensor], params: Sequence[Tensor], h=1e-3,
               max_entries=None, rng=None, atol=1e-7):
    """Max relative error between backprop and central differences over ``params``.

    Parameters are promoted to float64 for the duration of the check. The
    error per parameter is ``|a - n| / (|a| + |n|)`` in L2 norm; a parameter
    whose both gradients are below ``atol`` counts as zero error.
    """
    originals = [p.data for p in params]
    for p in params:
        p.data = p.data.astype(np.float64)
        p.grad = None
    try:
        loss = model_fn()
        loss.backward()
        worst = 0.0
        for p in params:
            analytic = np.zeros_like(p.data) if p.grad is None else np.asarray(p.grad, np.float64)
            flat = p.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_entries is not None and flat.size > max_entries:
                idx = (rng or np.random.default_rng(0)).choice(flat.size, max_entries, replace=False)
            numeric = np.zeros(len(idx))
            for j, i in enumerate(idx):
                old = flat[i]
                flat[i] = old + h
                with no_grad():
                    fp = float(model_fn().data)
                flat[i] = old - h
                with no_grad():
                    fm = float(model_fn().data)
                flat[i] = old
                numeric[j] = (fp - fm) / (2 * h)
            a = analytic.reshape(-1)[idx]
            na, nn = np.linalg.norm(a), np.linalg.norm(numeric)
            if na < atol and nn < atol:
                continue
            worst = max(worst, float(np.linalg.norm(a - numeric) / (na + nn)))
        return worst
    finally:
        for p, orig in zip(params, originals):
            p.data = orig
            p.grad = None


# ---------------------------------------------------------------------------
# checkpoint format: b"MSKR", u8 version, then records of
# u16 name length, utf-8 name, u32 rank, u32 dims[rank], little-endian f32 data.
# A model config travels as a rank-1 record "__config__" holding utf-8 bytes.

CHECKPOINT_MAGIC = b"MSKR"
CHECKPOINT_VERSION = 1
CONFIG_RECORD = "__config__"


def write_checkpoint(fp, arrays: dict, config: dict | None = None):
    records = dict(arrays)
    if config is not None:
        raw = json.dumps(config, sort_keys=True).encode("utf-8")
        records[CONFIG_RECORD] = np.frombuffer(raw, dtype=np.uint8).astype(np.float32)
    fp.write(CHECKPOINT_MAGIC)
    fp.write(struct.pack("<B", CHECKPOINT_VERSION))
    for name, arr in records.items():
        arr = np.asarray(arr, dtype="<f4")
        bname = name.encode("utf-8")
        fp.write(struct.pack("<H", len(bname)))
        fp.write(bname)
        fp.write(struct.pack("<I", arr.ndim))
        fp.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fp.write(np.ascontiguousarray(arr).tobytes())


def read_checkpoint(fp):
    """Returns ``(arrays, config)``; config is None when absent."""
    buf = fp.read()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise FormatError("not a checkpoint (bad magic)")
    if len(buf) < 5 or buf[4] != CHECKPOINT_VERSION:
        raise FormatError("unsupported checkpoint version")
    pos, arrays, config = 5, {}, None
    try:
        while pos < len(buf):
            (nlen,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos:pos + nlen].decode("utf-8")
            if len(name.encode("utf-8")) != nlen:
                raise FormatError("truncated record name")
            pos += nlen
            (rank,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            end = pos + 4 * count
            if end > len(buf):
                raise FormatError(f"truncated data for record {name!r}")
            arr = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).reshape(dims)
            pos = end
            if name == CONFIG_RECORD:
                config = json.loads(arr.astype(np.uint8).tobytes().decode("utf-8"))
            else:
                arrays[name] = arr.astype(np.float32)
    except struct.error as exc:
        raise FormatError(f"truncated checkpoint: {exc}") from None
    return arrays, config


def save_checkpoint(path, arrays, config=None):
    with open(path, "wb") as fp:
        write_checkpoint(fp, arrays, config)


def load_checkpoint(path):
    with open(path, "rb") as fp:
        return read_checkpoint(fp)


def checkpoint_bytes(arrays, config=None) -> bytes:
    buf = io.BytesIO()
    write_checkpoint(buf, arrays, config)
    return buf.getvalue()
