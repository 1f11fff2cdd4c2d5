import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dfsmn_san.layers import (
    MEMORY_INPUT_EMBEDDING,
    MEMORY_KEY_VALUE,
    MEMORY_NONE,
    AttentionLayer,
    DfsmnBlock,
    LayerError,
    MultiHeadAttention,
    PositionalEncoding,
    dfsmn_block_forward,
    dfsmn_memory,
    fir_filter,
    input_memory_keys_values,
    kv_memory_keys_values,
    multi_head_attention,
    positional_encode,
    self_attention,
)
from dfsmn_san.numerics import finite_diff_gradient


def block_with_taps(back, ahead, d_proj=1, d_in=3):
    back = np.asarray(back, float).reshape(-1, d_proj)
    ahead = np.asarray(ahead, float).reshape(-1, d_proj)
    block = DfsmnBlock(d_in, 4, d_proj, len(back) - 1, len(ahead), np.random.default_rng(0))
    block.params["fir_back"] = back
    block.params["fir_ahead"] = ahead
    return block


def scalar_attention(x, wq, wk, wv, wo, memory=MEMORY_NONE, n=0):
    """A 1x1 single-head attention sublayer with every weight set by hand."""
    layer = MultiHeadAttention(1, 1, np.random.default_rng(0), memory, n)
    for name, value in (("wq", wq), ("wk", wk), ("wv", wv), ("wo", wo)):
        layer.params[name] = np.array([[value]])
    return layer


# --- FIR memory -------------------------------------------------------------


def test_fir_hand_example():
    block = block_with_taps([2, 1], [3])
    out = dfsmn_memory(np.array([[1.0], [2.0], [3.0]]), block)
    np.testing.assert_array_equal(out[:, 0], [8, 14, 8])


def test_fir_identity_and_zero():
    h = np.random.default_rng(1).normal(size=(7, 3))
    ident = block_with_taps(np.r_[[1, 1, 1], np.zeros(6)], np.zeros(6), d_proj=3)
    np.testing.assert_array_equal(dfsmn_memory(h, ident), h)
    zero = block_with_taps(np.zeros(9), np.zeros(6), d_proj=3)
    np.testing.assert_array_equal(dfsmn_memory(h, zero), np.zeros_like(h))


def test_fir_matches_loop_oracle():
    rng = np.random.default_rng(2)
    T, d, n1, n2 = 6, 3, 3, 2
    a, b, h = rng.normal(size=(n1 + 1, d)), rng.normal(size=(n2, d)), rng.normal(size=(T, d))
    expected = np.zeros_like(h)
    for t in range(T):
        for i in range(n1 + 1):
            if t - i >= 0:
                expected[t] += a[i] * h[t - i]
        for j in range(1, n2 + 1):
            if t + j < T:
                expected[t] += b[j - 1] * h[t + j]
    np.testing.assert_allclose(fir_filter(h, a, b), expected, atol=1e-14)


@given(st.integers(0, 10_000), st.floats(-3, 3), st.floats(-3, 3))
@settings(max_examples=50, deadline=None)
def test_fir_is_linear(seed, alpha, beta):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(3, 2)), rng.normal(size=(2, 2))
    x, y = rng.normal(size=(5, 2)), rng.normal(size=(5, 2))
    lhs = fir_filter(alpha * x + beta * y, a, b)
    rhs = alpha * fir_filter(x, a, b) + beta * fir_filter(y, a, b)
    np.testing.assert_allclose(lhs, rhs, atol=1e-10)


def test_fir_shape_errors():
    block = block_with_taps([1, 1], [1])
    block.params["fir_back"] = np.ones((3, 1))
    with pytest.raises(LayerError):
        dfsmn_memory(np.ones((4, 1)), block)
    with pytest.raises(LayerError):
        dfsmn_memory(np.ones((4, 2)), block_with_taps([1], []))


# --- DFSMN block ------------------------------------------------------------


def test_block_init():
    block = DfsmnBlock(4, 16, 4, 10, 10, np.random.default_rng(0))
    np.testing.assert_array_equal(block.fir_back[0], 1.0)
    bound = 1 / 21
    assert np.all(np.abs(block.fir_back[1:]) <= bound)
    assert np.all(np.abs(block.fir_ahead) <= bound)
    assert block.fir_back.shape == (11, 4) and block.fir_ahead.shape == (10, 4)


def test_block_zero_input():
    block = DfsmnBlock(3, 5, 2, 1, 1, np.random.default_rng(0))
    np.testing.assert_array_equal(dfsmn_block_forward(np.zeros((4, 3)), block), np.zeros((4, 2)))


def test_block_identity_filter_doubles_projection():
    rng = np.random.default_rng(3)
    block = DfsmnBlock(3, 5, 2, 2, 2, rng)
    block.params["fir_back"][:] = 0
    block.params["fir_back"][0] = 1
    block.params["fir_ahead"][:] = 0
    x = rng.normal(size=(4, 3))
    h = np.maximum(x @ block.params["input_weight"], 0) @ block.params["projection_weight"]
    np.testing.assert_allclose(dfsmn_block_forward(x, block), 2 * h, atol=1e-14)


def test_block_matches_straight_line_oracle():
    rng = np.random.default_rng(4)
    block = DfsmnBlock(4, 6, 4, 1, 1, rng)
    block.params["input_bias"] = rng.normal(size=6)
    x = rng.normal(size=(2, 4))
    W1, b1, W2 = (block.params[k] for k in ("input_weight", "input_bias", "projection_weight"))
    a0, a1 = block.fir_back
    (b1_tap,) = block.fir_ahead
    h0 = np.maximum(x[0] @ W1 + b1, 0) @ W2
    h1 = np.maximum(x[1] @ W1 + b1, 0) @ W2
    # frame 0 sees itself and frame 1 ahead; frame 1 sees itself and frame 0 behind
    y0 = h0 + a0 * h0 + b1_tap * h1 + x[0]
    y1 = h1 + a0 * h1 + a1 * h0 + x[1]
    np.testing.assert_allclose(dfsmn_block_forward(x, block), np.stack([y0, y1]), atol=1e-13)


def test_block_rejects_wrong_width():
    with pytest.raises(LayerError):
        dfsmn_block_forward(np.ones((3, 5)), DfsmnBlock(4, 6, 4, 1, 1, np.random.default_rng(0)))


def test_block_masks_padding():
    rng = np.random.default_rng(5)
    block = DfsmnBlock(3, 6, 3, 2, 2, rng)
    x = rng.normal(size=(1, 6, 3))
    mask = np.array([[True] * 4 + [False] * 2])
    padded = block.forward(x, mask)
    alone = block.forward(x[:, :4])
    np.testing.assert_allclose(padded[:, :4], alone, atol=1e-14)
    np.testing.assert_array_equal(padded[:, 4:], 0)


# --- attention ----------------------------------------------------------------


def test_self_attention_hand_example():
    out = self_attention(np.array([[1.0]]), np.array([[1.0], [0.0]]), np.array([[2.0], [4.0]]))
    w = math.exp(1) / (math.exp(1) + 1)
    assert out[0, 0] == pytest.approx(2 * w + 4 * (1 - w), abs=1e-14)
    assert out[0, 0] == pytest.approx(2.537883, abs=1e-6)


def test_self_attention_trivial_cases():
    rng = np.random.default_rng(0)
    q, v = rng.normal(size=(3, 2)), rng.normal(size=(1, 2))
    np.testing.assert_allclose(self_attention(q, rng.normal(size=(1, 2)), v), np.repeat(v, 3, 0))
    u = np.array([0.5, -2.0])
    out = self_attention(q, rng.normal(size=(4, 2)), np.tile(u, (4, 1)))
    np.testing.assert_allclose(out, np.tile(u, (3, 1)), atol=1e-14)


def test_self_attention_shape_errors():
    with pytest.raises(LayerError):
        self_attention(np.ones((1, 2)), np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(LayerError):
        self_attention(np.ones((1, 2)), np.ones((2, 2)), np.ones((3, 2)))


def test_kv_memory_hand_example():
    layer = scalar_attention(1, wq=1, wk=2, wv=1, wo=1, memory=MEMORY_KEY_VALUE, n=1)
    layer.params["mem_keys"] = np.array([[5.0]])
    layer.params["mem_values"] = np.array([[7.0]])
    out = layer.forward(np.array([[[1.0]]]))[0, 0, 0]
    w = np.exp([2.0, 5.0]) / np.exp([2.0, 5.0]).sum()
    assert out == pytest.approx(w[0] * 1 + w[1] * 7, abs=1e-14)
    assert out == pytest.approx(6.7155, abs=1e-4)


def test_single_head_matches_self_attention():
    rng = np.random.default_rng(6)
    layer = MultiHeadAttention(3, 1, rng)
    x = rng.normal(size=(4, 3))
    p = layer.params
    expected = self_attention(x @ p["wq"], x @ p["wk"], x @ p["wv"]) @ p["wo"]
    np.testing.assert_allclose(layer.forward(x[None])[0], expected, atol=1e-14)


def test_multi_head_per_head_oracle():
    rng = np.random.default_rng(7)
    layer = AttentionLayer(4, 2, rng, dropout=0.0)
    attn = layer.attn
    x = rng.normal(size=(3, 4))
    p = attn.params
    heads = []
    for i in range(2):
        cols = slice(2 * i, 2 * i + 2)
        heads.append(self_attention(x @ p["wq"][:, cols], x @ p["wk"][:, cols], x @ p["wv"][:, cols]))
    a = np.concatenate(heads, axis=1) @ p["wo"]

    def norm(z, ln):
        mu = z.mean(1, keepdims=True)
        var = z.var(1, keepdims=True)
        return (z - mu) / np.sqrt(var + 1e-5) * ln.params["gain"] + ln.params["bias"]

    y = norm(x + a, layer.children["norm1"])
    f = layer.children["ffn"].params
    ff = np.maximum(y @ f["w_in"] + f["b_in"], 0) @ f["w_out"] + f["b_out"]
    expected = norm(y + ff, layer.children["norm2"])
    np.testing.assert_allclose(multi_head_attention(x, layer), expected, atol=1e-12)


@pytest.mark.parametrize("variant", [MEMORY_NONE, MEMORY_KEY_VALUE, MEMORY_INPUT_EMBEDDING])
@pytest.mark.parametrize("n", [0, 1, 5])
def test_output_shape_and_weight_rows(variant, n):
    rng = np.random.default_rng(8)
    layer = AttentionLayer(8, 2, rng, memory=variant, memory_n=n, dropout=0.0)
    out = multi_head_attention(rng.normal(size=(3, 8)), layer)
    assert out.shape == (3, 8)
    w = layer.attn.last_weights
    expected_keys = 3 + (n if variant != MEMORY_NONE else 0)
    assert w.shape == (1, 2, 3, expected_keys)
    assert np.all(w >= 0)
    np.testing.assert_allclose(w.sum(-1), 1.0, atol=1e-12)


def test_memory_key_value_rows():
    rng = np.random.default_rng(9)
    layer = MultiHeadAttention(4, 2, rng, MEMORY_KEY_VALUE, 3)
    x = rng.normal(size=(2, 4))
    k, v = kv_memory_keys_values(x, layer)
    assert k.shape == v.shape == (2, 5, 2)
    # head 1 sees columns 2:4 of the projections and of the memory
    np.testing.assert_allclose(k[1, :2], (x @ layer.params["wk"])[:, 2:])
    np.testing.assert_array_equal(k[1, 2:], layer.params["mem_keys"][:, 2:])
    np.testing.assert_array_equal(v[0, 2:], layer.params["mem_values"][:, :2])
    with pytest.raises(LayerError):
        input_memory_keys_values(x, layer)


def test_input_memory_rows():
    rng = np.random.default_rng(10)
    layer = MultiHeadAttention(4, 2, rng, MEMORY_INPUT_EMBEDDING, 3)
    x = rng.normal(size=(2, 4))
    k, v = input_memory_keys_values(x, layer)
    aug = np.vstack([x, layer.params["mem_inputs"]])
    np.testing.assert_allclose(k[0], (aug @ layer.params["wk"])[:, :2])
    np.testing.assert_allclose(v[1], (aug @ layer.params["wv"])[:, 2:])
    with pytest.raises(LayerError):
        kv_memory_keys_values(x, layer)


def test_memory_shape_mismatch():
    layer = MultiHeadAttention(4, 2, np.random.default_rng(0), MEMORY_KEY_VALUE, 3)
    layer.params["mem_keys"] = np.zeros((2, 4))
    with pytest.raises(LayerError):
        layer.forward(np.zeros((1, 2, 4)))


@pytest.mark.parametrize("variant", [MEMORY_KEY_VALUE, MEMORY_INPUT_EMBEDDING])
def test_zero_memory_equals_plain_layer(variant):
    x = np.random.default_rng(11).normal(size=(5, 8))
    plain = AttentionLayer(8, 2, np.random.default_rng(3), dropout=0.0)
    mem = AttentionLayer(8, 2, np.random.default_rng(3), memory=variant, memory_n=0, dropout=0.0)
    np.testing.assert_allclose(multi_head_attention(x, mem), multi_head_attention(x, plain), atol=1e-12, rtol=0)
    assert mem.param_count() == plain.param_count()


def test_input_embedding_reproduces_key_value_by_linear_solve():
    rng = np.random.default_rng(12)
    d, n = 4, 3
    kv = MultiHeadAttention(d, 2, np.random.default_rng(1), MEMORY_KEY_VALUE, n)
    ie = MultiHeadAttention(d, 2, np.random.default_rng(1), MEMORY_INPUT_EMBEDDING, n)
    # one memory input M must satisfy M Wk = Mk and M Wv = Mv, so pick Mv = M Wv after solving for Mk
    m = np.linalg.solve(kv.params["wk"].T, kv.params["mem_keys"].T).T
    kv.params["mem_values"] = m @ kv.params["wv"]
    ie.params["mem_inputs"] = m
    x = rng.normal(size=(1, 5, d))
    np.testing.assert_allclose(ie.forward(x), kv.forward(x), atol=1e-10)


@pytest.mark.parametrize("variant", [MEMORY_KEY_VALUE, MEMORY_INPUT_EMBEDDING])
def test_memory_slots_are_permutation_invariant(variant):
    rng = np.random.default_rng(13)
    layer = MultiHeadAttention(4, 2, rng, variant, 5)
    x = rng.normal(size=(1, 3, 4))
    before = layer.forward(x)
    perm = rng.permutation(5)
    for name in ("mem_keys", "mem_values", "mem_inputs"):
        if name in layer.params:
            layer.params[name] = layer.params[name][perm]
    np.testing.assert_allclose(layer.forward(x), before, atol=1e-13)


def test_memory_parameter_ratio():
    kv = MultiHeadAttention(8, 2, np.random.default_rng(0), MEMORY_KEY_VALUE, 6)
    ie = MultiHeadAttention(8, 2, np.random.default_rng(0), MEMORY_INPUT_EMBEDDING, 6)
    assert kv.memory_param_count() == 2 * ie.memory_param_count() == 2 * 6 * 8


def test_memory_init_does_not_disturb_other_weights():
    kw = dict(dropout=0.0, memory_rng=np.random.default_rng(99))
    plain = AttentionLayer(8, 2, np.random.default_rng(4), **kw)
    kv = AttentionLayer(8, 2, np.random.default_rng(4), memory=MEMORY_KEY_VALUE, memory_n=4,
                        **{**kw, "memory_rng": np.random.default_rng(99)})
    shared = dict(plain.named_parameters())
    for name, value in kv.named_parameters():
        if name in shared:
            np.testing.assert_array_equal(value, shared[name])


def test_attention_ignores_padded_keys():
    rng = np.random.default_rng(14)
    layer = AttentionLayer(4, 2, rng, memory=MEMORY_KEY_VALUE, memory_n=2, dropout=0.0)
    x = rng.normal(size=(1, 5, 4))
    mask = np.array([[True, True, True, False, False]])
    padded = layer.forward(x, mask)
    x2 = x.copy()
    x2[:, 3:] = 1e3
    np.testing.assert_allclose(layer.forward(x2, mask), padded, atol=1e-14)
    np.testing.assert_allclose(padded[:, :3], layer.forward(x[:, :3]), atol=1e-13)
    np.testing.assert_array_equal(padded[:, 3:], 0)


def test_head_divisibility():
    with pytest.raises(LayerError):
        MultiHeadAttention(6, 4, np.random.default_rng(0))


# --- positional encoding ----------------------------------------------------


def test_positional_encoding_examples():
    pe = PositionalEncoding(16, 6)
    out = positional_encode(np.zeros((3, 6)), pe)
    np.testing.assert_array_equal(out[0], [0, 1, 0, 1, 0, 1])
    np.testing.assert_array_equal(out, pe.table[:3])
    for d in (2, 4, 64):
        assert PositionalEncoding(4, d).table[1, 0] == pytest.approx(0.841471, abs=1e-6)
    # odd column 2m+1 pairs with sin column 2m: same frequency
    t, m = 5, 1
    assert pe.table[t, 2 * m + 1] == pytest.approx(math.cos(t / 10000 ** (2 * m / 6)))


def test_positional_encoding_too_long():
    with pytest.raises(LayerError):
        positional_encode(np.zeros((5, 2)), PositionalEncoding(4, 2))


# --- backward -----------------------------------------------------------------


def test_backward_before_forward():
    with pytest.raises(LayerError):
        DfsmnBlock(2, 3, 2, 1, 1, np.random.default_rng(0)).backward(np.zeros((1, 2, 2)))
    with pytest.raises(LayerError):
        AttentionLayer(4, 2, np.random.default_rng(0)).backward(np.zeros((1, 2, 4)))


@pytest.mark.parametrize("variant", [MEMORY_NONE, MEMORY_KEY_VALUE, MEMORY_INPUT_EMBEDDING])
def test_zero_upstream_gives_zero_gradients(variant):
    rng = np.random.default_rng(15)
    layer = AttentionLayer(4, 2, rng, memory=variant, memory_n=2, dropout=0.0)
    x = rng.normal(size=(2, 3, 4))
    out = layer.forward(x)
    dx = layer.backward(np.zeros_like(out))
    np.testing.assert_array_equal(dx, 0)
    for name, g in layer.named_gradients():
        np.testing.assert_array_equal(g, 0, err_msg=name)


def test_scalar_kv_gradients_by_hand():
    # one query q = x wq, keys (x wk, mk), values (x wv, mv); output o = wo * sum p_i v_i
    x, wq, wk, wv, wo, mk, mv = 0.7, 1.3, -0.4, 0.9, 1.6, 0.5, -1.2
    layer = scalar_attention(x, wq, wk, wv, wo, MEMORY_KEY_VALUE, 1)
    layer.params["mem_keys"] = np.array([[mk]])
    layer.params["mem_values"] = np.array([[mv]])
    layer.forward(np.array([[[x]]]))
    layer.backward(np.ones((1, 1, 1)))
    q = x * wq
    s = np.array([q * x * wk, q * mk])
    p = np.exp(s - s.max()) / np.exp(s - s.max()).sum()
    v = np.array([x * wv, mv])
    mean_v = p @ v
    grads = dict(layer.named_gradients())
    assert grads["mem_values"][0, 0] == pytest.approx(wo * p[1], abs=1e-14)
    assert grads["mem_keys"][0, 0] == pytest.approx(wo * p[1] * (mv - mean_v) * q, abs=1e-14)
    assert grads["wo"][0, 0] == pytest.approx(mean_v, abs=1e-14)


def test_dfsmn_block_gradient_against_finite_differences():
    rng = np.random.default_rng(16)
    block = DfsmnBlock(3, 5, 3, 2, 1, rng)
    x = rng.normal(size=(1, 4, 3))
    probe = rng.normal(size=(1, 4, 3))
    block.forward(x)
    block.backward(probe)
    analytic = block.grads["fir_ahead"].copy()

    def loss(theta):
        block.params["fir_ahead"] = theta.reshape(block.fir_ahead.shape)
        return float(np.sum(block.forward(x) * probe))

    numeric = finite_diff_gradient(loss, block.fir_ahead.ravel())
    np.testing.assert_allclose(analytic.ravel(), numeric, rtol=1e-6, atol=1e-8)
