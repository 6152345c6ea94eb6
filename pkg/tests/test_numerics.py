import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sidesum.numerics import (
    FeedForward,
    MultiHeadAttention,
    TransformerLayer,
    attention,
    causal_mask,
    ffn,
    grad_check,
    init_uniform_,
    layer_norm,
    masked_softmax,
    softmax,
)

D = torch.float64
finite = st.floats(-50, 50, allow_nan=False)


def t(x):
    return torch.tensor(x, dtype=D)


def np_layer_norm(x, gain, bias, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return gain * (x - mu) / np.sqrt(var + eps) + bias


def np_softmax(x):
    e = np.exp(x - x.max(-1, keepdims=True))
    return e / e.sum(-1, keepdims=True)


# ----------------------------------------------------------------------------- softmax

def test_softmax_examples():
    np.testing.assert_allclose(softmax(t([0.0, 0.0, 0.0])), [1 / 3] * 3, atol=1e-15)
    np.testing.assert_allclose(softmax(t([math.log(2), 0.0])), [2 / 3, 1 / 3], atol=1e-15)


@given(arrays(np.float64, st.integers(1, 12), elements=finite), st.floats(-1e3, 1e3))
def test_softmax_shift_invariant_and_normalised(v, c):
    p = softmax(t(v))
    assert (p > 0).all()
    assert abs(float(p.sum()) - 1) < 1e-9
    np.testing.assert_allclose(softmax(t(v + c)), p, atol=1e-9)


def test_softmax_stable_for_large_inputs():
    p = softmax(t([1000.0, 1000.0, -1000.0]))
    assert torch.isfinite(p).all()
    np.testing.assert_allclose(p, [0.5, 0.5, 0.0], atol=1e-12)


def test_masked_softmax_zeroes_empty_rows():
    logits = t([[1.0, 2.0], [3.0, 4.0]])
    mask = torch.tensor([[True, False], [False, False]])
    out = masked_softmax(logits, mask)
    np.testing.assert_allclose(out, [[1.0, 0.0], [0.0, 0.0]])


# ----------------------------------------------------------------------------- layer norm

def test_layer_norm_constant_vector_is_zero():
    out = layer_norm(t([3.0, 3.0, 3.0]), torch.ones(3, dtype=D), torch.zeros(3, dtype=D))
    np.testing.assert_allclose(out, 0.0, atol=1e-12)


def test_layer_norm_unit_pair():
    out = layer_norm(t([1.0, -1.0]), torch.ones(2, dtype=D), torch.zeros(2, dtype=D))
    np.testing.assert_allclose(out, [1.0, -1.0], atol=1e-5)


@given(arrays(np.float64, st.integers(2, 16), elements=st.floats(-10, 10)))
def test_layer_norm_properties(x):
    if x.std() < 0.5:  # the 1e-5 epsilon visibly shrinks low-variance inputs
        return
    ones, zeros = torch.ones(len(x), dtype=D), torch.zeros(len(x), dtype=D)
    y = layer_norm(t(x), ones, zeros)
    assert abs(float(y.mean())) < 1e-9
    assert abs(float(y.var(unbiased=False)) - 1) < 1e-3
    np.testing.assert_allclose(layer_norm(t(2 * x), ones, zeros), y, atol=1e-4)
    np.testing.assert_allclose(y, np_layer_norm(x, 1.0, 0.0), atol=1e-12)


def test_layer_norm_module_matches_function():
    from sidesum.numerics import LayerNorm
    ln = LayerNorm(5).double()
    with torch.no_grad():
        ln.gain.uniform_(0.5, 1.5)
        ln.bias.uniform_(-1, 1)
    x = torch.randn(3, 5, dtype=D)
    np.testing.assert_allclose(ln(x).detach(), layer_norm(x, ln.gain, ln.bias).detach(), atol=1e-12)


# ----------------------------------------------------------------------------- ffn

def test_ffn_zero_weights():
    d, h = 4, 6
    z = lambda *s: torch.zeros(*s, dtype=D)  # noqa: E731
    np.testing.assert_array_equal(ffn(t([1.0, -2.0, 3.0, 0.5]), z(h, d), z(h), z(d, h), z(d)), z(d))


def test_ffn_relu_gate():
    one = t([[1.0]])
    assert float(ffn(t([-3.0]), one, t([0.0]), one, t([0.0]))[0]) == 0.0


def test_ffn_matches_numpy_oracle():
    rng = np.random.default_rng(0)
    x, W1, b1, W2, b2 = rng.normal(size=5), rng.normal(size=(7, 5)), rng.normal(size=7), rng.normal(size=(5, 7)), \
        rng.normal(size=5)
    expected = W2 @ np.maximum(W1 @ x + b1, 0) + b2
    np.testing.assert_allclose(ffn(*(t(a) for a in (x, W1, b1, W2, b2))), expected, atol=1e-12)


def test_ffn_shape_mismatch():
    with pytest.raises(ValueError):
        ffn(torch.zeros(3, dtype=D), torch.zeros(4, 2, dtype=D), torch.zeros(4, dtype=D),
            torch.zeros(3, 4, dtype=D), torch.zeros(3, dtype=D))


# ----------------------------------------------------------------------------- attention

def test_attention_single_key():
    rng = np.random.default_rng(1)
    Q, K, V = rng.normal(size=(3, 4)), rng.normal(size=(1, 4)), rng.normal(size=(1, 4))
    out = attention(t(Q), t(K), t(V))
    np.testing.assert_allclose(out, np.repeat(V / 2.0, 3, axis=0), atol=1e-12)


def test_attention_identical_keys_average_values():
    rng = np.random.default_rng(2)
    Q, V = rng.normal(size=(2, 9)), rng.normal(size=(5, 9))
    K = np.repeat(rng.normal(size=(1, 9)), 5, axis=0)
    np.testing.assert_allclose(attention(t(Q), t(K), t(V)), np.repeat(V.mean(0, keepdims=True) / 3.0, 2, 0),
                               atol=1e-12)


def test_attention_matches_numpy_oracle_both_modes():
    rng = np.random.default_rng(3)
    Q, K, V = rng.normal(size=(3, 4)), rng.normal(size=(6, 4)), rng.normal(size=(6, 4))
    literal = np_softmax(Q @ K.T) @ V / 2.0
    scaled = np_softmax(Q @ K.T / 2.0) @ V
    np.testing.assert_allclose(attention(t(Q), t(K), t(V)), literal, atol=1e-12)
    np.testing.assert_allclose(attention(t(Q), t(K), t(V), scaled_logits=True), scaled, atol=1e-12)


def test_attention_causal_mask():
    rng = np.random.default_rng(4)
    n, d = 6, 4
    Q, K, V = (t(rng.normal(size=(n, d))) for _ in range(3))
    mask = causal_mask(n)
    base = attention(Q, K, V, mask)
    for pos in range(n - 1):
        K2, V2 = K.clone(), V.clone()
        K2[pos + 1:] += 5.0
        V2[pos + 1:] -= 3.0
        np.testing.assert_allclose(attention(Q, K2, V2, mask)[:pos + 1], base[:pos + 1], atol=1e-12)


def test_attention_rows_sum_to_one():
    rng = np.random.default_rng(5)
    for _ in range(50):
        n_q, n_k = rng.integers(1, 8, size=2)
        Q, K, V = (t(rng.normal(size=(s, 3)) * 4) for s in (n_q, n_k, n_k))
        mask = torch.as_tensor(rng.random((n_q, n_k)) < 0.7)
        mask[:, 0] = True
        _, w = attention(Q, K, V, mask, return_weights=True)
        np.testing.assert_allclose(w.sum(-1), 1.0, atol=1e-9)


def test_attention_fully_masked_row_errors():
    Q = K = V = torch.zeros(2, 2, dtype=D)
    with pytest.raises(ValueError):
        attention(Q, K, V, torch.tensor([[True, False], [False, False]]))


# ----------------------------------------------------------------------------- multi-head

def _mha(d=8, heads=2, scaled=False, seed=0):
    mha = MultiHeadAttention(d, heads, scaled_logits=scaled).double()
    init_uniform_(mha, 0.5, torch.Generator().manual_seed(seed))
    return mha.eval()


def test_mha_single_head_is_projected_attention():
    mha = _mha(6, 1)
    x = torch.randn(1, 4, 6, dtype=D)
    kv = torch.randn(1, 5, 6, dtype=D)
    Q, K, V = mha.q(x)[0], mha.k(kv)[0], mha.v(kv)[0]
    expected = mha.o(attention(Q, K, V, d_e=6))
    np.testing.assert_allclose(mha(x, kv)[0].detach(), expected.detach(), atol=1e-12)


def test_mha_shape_and_kv_permutation():
    mha = _mha(8, 4)
    q = torch.randn(2, 3, 8, dtype=D)
    kv = torch.randn(2, 7, 8, dtype=D)
    out = mha(q, kv)
    assert out.shape == q.shape
    perm = torch.randperm(7)
    np.testing.assert_allclose(mha(q, kv[:, perm]).detach(), out.detach(), atol=1e-12)


def test_mha_key_mask_ignores_padding():
    mha = _mha(8, 2)
    q = torch.randn(1, 3, 8, dtype=D)
    kv = torch.randn(1, 5, 8, dtype=D)
    mask = torch.tensor([[True, True, True, False, False]])
    padded = kv.clone()
    padded[:, 3:] = 100.0
    np.testing.assert_allclose(mha(q, padded, mask).detach(), mha(q, kv[:, :3]).detach(), atol=1e-12)


def test_mha_rejects_indivisible_heads():
    with pytest.raises(ValueError):
        MultiHeadAttention(10, 4)


def test_mha_weights_rows_sum_to_one():
    mha = _mha(8, 4)
    mha.keep_weights = True
    mha(torch.randn(2, 3, 8, dtype=D) * 5, torch.randn(2, 6, 8, dtype=D) * 5)
    np.testing.assert_allclose(mha.last_weights.sum(-1), 1.0, atol=1e-9)


# ----------------------------------------------------------------------------- transformer layer

def _np_linear(layer, x):
    return x @ layer.weight.detach().numpy().T + layer.bias.detach().numpy()


def test_transformer_layer_single_token_composition():
    d = 6
    layer = TransformerLayer(d, 2, 10).double()
    init_uniform_(layer, 0.3, torch.Generator().manual_seed(3))
    layer.eval()
    x = np.random.default_rng(0).normal(size=(1, d))
    # one token: every head attends only to itself, so attention reduces to the value path
    attn = _np_linear(layer.attn.o, _np_linear(layer.attn.v, x) / math.sqrt(d))
    h = np_layer_norm(x + attn, layer.ln1.gain.detach().numpy(), layer.ln1.bias.detach().numpy())
    f = _np_linear(layer.ffn.w2, np.maximum(_np_linear(layer.ffn.w1, h), 0))
    expected = np_layer_norm(h + f, layer.ln2.gain.detach().numpy(), layer.ln2.bias.detach().numpy())
    out = layer(t(x)[None])[0]
    np.testing.assert_allclose(out.detach(), expected, atol=1e-12)


def test_transformer_layer_shape_and_determinism():
    layer = TransformerLayer(8, 4, 16).double().eval()
    x = torch.randn(3, 5, 8, dtype=D)
    a, b = layer(x), layer(x)
    assert a.shape == x.shape
    assert torch.equal(a, b)


def test_dropout_only_in_training():
    ff = FeedForward(4, 8, 4, dropout=0.5).double()
    x = torch.randn(10, 4, dtype=D)
    ff.eval()
    assert torch.equal(ff(x), ff(x))
    ff.train()
    torch.manual_seed(0)
    a = ff(x)
    b = ff(x)
    assert not torch.equal(a, b)


# ----------------------------------------------------------------------------- grad check

def test_grad_check_square():
    x = torch.tensor([3.0], dtype=D, requires_grad=True)
    assert grad_check(lambda: (x * x).sum(), [x]) < 1e-8


def test_grad_check_softmax_cross_entropy():
    gen = torch.Generator().manual_seed(0)
    logits = torch.randn(4, 7, dtype=D, generator=gen).requires_grad_()
    target = torch.tensor([0, 3, 6, 2])
    f = lambda: -torch.log(softmax(logits)).gather(1, target[:, None]).sum()  # noqa: E731
    assert grad_check(f, [logits]) < 1e-6


def test_grad_check_detects_wrong_gradient():
    x = torch.tensor([1.5], dtype=D, requires_grad=True)

    class Wrong(torch.autograd.Function):
        @staticmethod
        def forward(ctx, v):
            return v ** 3

        @staticmethod
        def backward(ctx, g):
            return g * 0.0

    assert grad_check(lambda: Wrong.apply(x).sum(), [x]) > 0.5


def test_grad_check_rejects_non_finite():
    x = torch.tensor([0.0], dtype=D, requires_grad=True)
    with pytest.raises(FloatingPointError):
        grad_check(lambda: (1.0 / x).sum(), [x])


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (3, 4), elements=st.floats(-5, 5)))
def test_attention_finite_in_finite_out(q):
    out = attention(t(q), t(q), t(q))
    assert torch.isfinite(out).all()
