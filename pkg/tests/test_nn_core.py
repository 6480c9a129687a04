import io
import math

import numpy as np
import pytest

from maskr.errors import (DimensionError, EmptyMaskError, FormatError, InvalidConfigError,
                          TrainingDivergedError)
from maskr.nn_core import (
    Adam,
    AdamState,
    Linear,
    MultiHeadAttention,
    Tensor,
    TransformerBlock,
    TransformerBlockConfig,
    adam_step,
    checkpoint_bytes,
    concat,
    cross_entropy_masked,
    embedding,
    gelu,
    grad_check,
    layer_norm,
    linear_forward,
    matmul,
    mul,
    multi_head_attention,
    no_grad,
    parameter,
    read_checkpoint,
    relu,
    reshape,
    softmax,
    tmean,
    transpose,
    tsum,
)

LN64 = 4.1588830833596715  # ln(64)


def weighted_sum(t, seed=0):
    """Scalar probe: sum(t * fixed random weights) so every output entry matters."""
    w = np.random.default_rng(seed).normal(size=t.shape)
    return tsum(mul(t, Tensor(w)))


# -- linear ------------------------------------------------------------------


def test_linear_zero_input_gives_bias():
    b = parameter([1.0, -2.0, 3.0])
    y = linear_forward(Tensor(np.zeros((4, 2), np.float32)), parameter(np.ones((2, 3))), b)
    np.testing.assert_array_equal(y.data, np.tile(b.data, (4, 1)))


def test_linear_identity():
    x = Tensor(np.arange(12, dtype=np.float32).reshape(3, 4))
    y = linear_forward(x, parameter(np.eye(4)), parameter(np.zeros(4)))
    np.testing.assert_array_equal(y.data, x.data)


def test_linear_shape_mismatch():
    with pytest.raises(DimensionError):
        linear_forward(Tensor(np.zeros((3, 4))), parameter(np.zeros((5, 2))))


def test_linear_gradient(rng):
    x = parameter(rng.normal(size=(3, 4)))
    w = parameter(rng.normal(size=(4, 5)))
    b = parameter(rng.normal(size=5))
    err = grad_check(lambda: weighted_sum(linear_forward(x, w, b)), [x, w, b])
    assert err < 1e-3


# -- primitives -----------------------------------------------------------------


@pytest.mark.parametrize("op", [
    lambda a: gelu(a),
    lambda a: softmax(a, axis=-1),
    lambda a: transpose(reshape(a, (2, 3, 2)), (1, 0, 2)),
    lambda a: mul(a, a),
    lambda a: tmean(mul(a, 3.0)),
])
def test_unary_gradients(op, rng):
    a = parameter(rng.normal(size=(3, 4)))
    assert grad_check(lambda: weighted_sum(op(a)), [a]) < 1e-3


def test_relu_gradient_away_from_kink(rng):
    x = rng.normal(size=(4, 5))
    x[np.abs(x) < 0.1] = 0.5
    a = parameter(x)
    assert grad_check(lambda: weighted_sum(relu(a)), [a]) < 1e-3


def test_matmul_broadcast_gradient(rng):
    a = parameter(rng.normal(size=(2, 3, 4)))
    b = parameter(rng.normal(size=(4, 5)))
    assert grad_check(lambda: weighted_sum(matmul(a, b)), [a, b]) < 1e-3


def test_concat_gradient(rng):
    a = parameter(rng.normal(size=(2, 3)))
    b = parameter(rng.normal(size=(2, 2)))
    assert grad_check(lambda: weighted_sum(concat([a, b], axis=1)), [a, b]) < 1e-3


def test_embedding_gradient_accumulates_repeats(rng):
    table = parameter(rng.normal(size=(5, 3)))
    ids = np.array([[0, 2, 2], [4, 0, 2]])
    assert grad_check(lambda: weighted_sum(embedding(table, ids)), [table]) < 1e-3
    with pytest.raises(DimensionError):
        embedding(table, np.array([5]))


def test_layer_norm_cases(rng):
    x = Tensor(np.full((2, 6), 3.0, np.float32))
    out = layer_norm(x, parameter(np.ones(6)), parameter(np.zeros(6)))
    np.testing.assert_allclose(out.data, 0.0, atol=1e-6)
    beta = parameter(rng.normal(size=6))
    out = layer_norm(Tensor(rng.normal(size=(3, 6))), parameter(np.zeros(6)), beta)
    np.testing.assert_allclose(out.data, np.broadcast_to(beta.data, (3, 6)), atol=1e-7)
    with pytest.raises(InvalidConfigError):
        layer_norm(Tensor(np.zeros((2, 0))), parameter(np.zeros(0)), parameter(np.zeros(0)))


def test_layer_norm_gradient(rng):
    x = parameter(rng.normal(size=(3, 6)))
    g = parameter(rng.normal(size=6))
    b = parameter(rng.normal(size=6))
    assert grad_check(lambda: weighted_sum(layer_norm(x, g, b)), [x, g, b]) < 1e-3


def test_softmax_rows_sum_to_one(rng):
    s = softmax(Tensor(rng.normal(size=(7, 11)) * 10)).data
    np.testing.assert_allclose(s.sum(-1), 1.0, atol=1e-6)


# -- attention -------------------------------------------------------------------


def test_attention_single_token_weight_is_one(rng):
    cfg = TransformerBlockConfig(8, 2)
    attn = MultiHeadAttention(cfg, rng)
    x = Tensor(rng.normal(size=(1, 8)).astype(np.float32))
    out, w = multi_head_attention(x, attn, return_weights=True)
    np.testing.assert_allclose(w.data, 1.0, atol=1e-7)
    v = x.data @ attn.v.weight.data + attn.v.bias.data
    expect = v @ attn.o.weight.data + attn.o.bias.data
    np.testing.assert_allclose(out.data, expect, rtol=1e-5, atol=1e-6)


def test_attention_rows_sum_to_one(rng):
    attn = MultiHeadAttention(TransformerBlockConfig(8, 4), rng)
    _, w = attn(Tensor(rng.normal(size=(5, 8)).astype(np.float32)), return_weights=True)
    np.testing.assert_allclose(w.data.sum(-1), 1.0, atol=1e-6)


def test_causal_attention_ignores_future(rng):
    attn = MultiHeadAttention(TransformerBlockConfig(8, 2), rng)
    x = rng.normal(size=(6, 8)).astype(np.float32)
    y = x.copy()
    y[1:] += rng.normal(size=(5, 8)).astype(np.float32)
    a = attn(Tensor(x), causal=True).data
    b = attn(Tensor(y), causal=True).data
    np.testing.assert_array_equal(a[0], b[0])
    assert not np.allclose(a[1:], b[1:])


def test_transformer_block_gradient(rng):
    blk = TransformerBlock(TransformerBlockConfig(8, 2), rng)
    x = parameter(rng.normal(size=(2, 4, 8)))
    params = [x] + blk.parameters()
    err = grad_check(lambda: weighted_sum(blk(x, causal=True)), params, max_entries=20, rng=rng)
    assert err < 1e-2


def test_block_config_validation():
    assert TransformerBlockConfig(64, 4).mlp_hidden == 256
    with pytest.raises(InvalidConfigError):
        TransformerBlockConfig(10, 3)


# -- loss -------------------------------------------------------------------


def test_cross_entropy_uniform_is_ln_k():
    logits = Tensor(np.zeros((2, 3, 64), np.float32))
    loss = cross_entropy_masked(logits, np.zeros((2, 3), int), np.ones((2, 3), bool))
    assert float(loss.data) == pytest.approx(LN64, rel=1e-6)


def test_cross_entropy_confident_correct_goes_to_zero():
    lg = np.zeros((1, 4, 8), np.float32)
    tgt = np.array([[1, 3, 5, 7]])
    lg[0, np.arange(4), tgt[0]] = 50.0
    loss = cross_entropy_masked(Tensor(lg), tgt, np.ones((1, 4), bool))
    assert float(loss.data) < 1e-12


def test_cross_entropy_zero_grad_off_mask(rng):
    logits = parameter(rng.normal(size=(2, 3, 5, 7)))
    mask = rng.random((2, 3, 5)) < 0.4
    mask[0, 0, 0] = True
    tsum(mul(cross_entropy_masked(logits, rng.integers(0, 7, (2, 3, 5)), mask), 1.0)).backward()
    assert np.all(logits.grad[~mask] == 0.0)
    assert np.any(logits.grad[mask] != 0.0)


def test_cross_entropy_gradient(rng):
    logits = parameter(rng.normal(size=(3, 4, 6)))
    mask = np.array([[1, 0, 1, 1], [0, 0, 1, 0], [1, 1, 0, 0]], bool)
    tgt = rng.integers(0, 6, size=(3, 4))
    assert grad_check(lambda: cross_entropy_masked(logits, tgt, mask), [logits]) < 1e-3


def test_cross_entropy_empty_mask():
    with pytest.raises(EmptyMaskError):
        cross_entropy_masked(Tensor(np.zeros((2, 3))), np.zeros(2, int), np.zeros(2, bool))


# -- grad_check itself -----------------------------------------------------------


def test_grad_check_unused_parameter(rng):
    used = parameter(rng.normal(size=3))
    unused = parameter(rng.normal(size=3))
    assert grad_check(lambda: weighted_sum(used), [used, unused]) < 1e-6


def test_grad_check_restores_parameters(rng):
    p = parameter(rng.normal(size=4))
    before = p.data.copy()
    grad_check(lambda: weighted_sum(gelu(p)), [p])
    assert p.data.dtype == np.float32
    np.testing.assert_array_equal(p.data, before)


def test_no_grad_builds_no_graph(rng):
    p = parameter(rng.normal(size=3))
    with no_grad():
        y = mul(p, 2.0)
    assert not y.requires_grad


# -- Adam --------------------------------------------------------------------------


def test_adam_zero_gradient_leaves_params():
    p = np.array([1.0, -2.0], np.float32)
    st = AdamState(lr=0.1)
    for _ in range(5):
        adam_step([p], [np.zeros(2, np.float32)], st)
    np.testing.assert_array_equal(p, [1.0, -2.0])
    assert st.step == 5


def test_adam_first_step_magnitude_is_lr():
    # bias-corrected m/sqrt(v) == g/|g| on step one, so the move is lr / (1 + eps)
    p = np.array([0.0])
    adam_step([p], [np.array([1.0])], AdamState(lr=1e-4))
    assert p[0] == pytest.approx(-1e-4 / (1 + 1e-8), rel=1e-12)


def test_adam_quadratic_converges():
    target = np.array([0.7, -1.3, 2.0], np.float32)
    x = parameter(np.zeros(3))
    opt = Adam([x], lr=0.01)
    for _ in range(2000):
        opt.zero_grad()
        d = x - Tensor(target)
        tsum(mul(d, d)).backward()
        opt.step()
    assert np.max(np.abs(x.data - target)) < 1e-2


def test_adam_nan_reports_step():
    st = AdamState()
    p = np.zeros(2)
    adam_step([p], [np.ones(2)], st)
    with pytest.raises(TrainingDivergedError) as exc:
        adam_step([p], [np.array([np.nan, 0.0])], st)
    assert exc.value.step == 2


# -- modules and checkpoints ---------------------------------------------------------


def test_linear_module_init_bounds(rng):
    lin = Linear(16, 4, rng)
    assert np.all(np.abs(lin.weight.data) <= 0.25)
    assert np.all(lin.bias.data == 0)


def test_checkpoint_roundtrip_bit_exact(rng):
    blk = TransformerBlock(TransformerBlockConfig(8, 2), rng)
    state = blk.state_dict()
    arrays, cfg = read_checkpoint(io.BytesIO(checkpoint_bytes(state, {"a": 1, "name": "x"})))
    assert cfg == {"a": 1, "name": "x"}
    assert list(arrays) == list(state)
    for k in state:
        assert arrays[k].tobytes() == state[k].astype("<f4").tobytes()
    other = TransformerBlock(TransformerBlockConfig(8, 2), np.random.default_rng(99))
    other.load_state_dict(arrays)
    x = Tensor(rng.normal(size=(3, 8)).astype(np.float32))
    np.testing.assert_array_equal(other(x).data, blk(x).data)


def test_checkpoint_layout():
    buf = checkpoint_bytes({"w": np.array([[1.0, 2.0]], np.float32)})
    # magic, version, u16 name length, name, u32 rank, u32 dims, f32 data
    expect = b"MSKR" + bytes([1]) + (1).to_bytes(2, "little") + b"w" + (2).to_bytes(4, "little") \
        + (1).to_bytes(4, "little") + (2).to_bytes(4, "little") + np.array([1, 2], "<f4").tobytes()
    assert buf == expect


def test_checkpoint_rejects_garbage():
    with pytest.raises(FormatError):
        read_checkpoint(io.BytesIO(b"NOPE\x01"))
    good = checkpoint_bytes({"w": np.ones((4, 4), np.float32)})
    with pytest.raises(FormatError):
        read_checkpoint(io.BytesIO(good[:-3]))


def test_forward_deterministic(rng):
    blk = TransformerBlock(TransformerBlockConfig(8, 2), rng)
    x = Tensor(rng.normal(size=(4, 8)).astype(np.float32))
    assert blk(x).data.tobytes() == blk(x).data.tobytes()


def test_tensor_sum_mean_basics():
    t = Tensor(np.arange(6, dtype=np.float32))
    assert float(tsum(t).data) == 15.0
    assert math.isclose(float(tmean(t).data), 2.5)
