import math

import numpy as np
import pytest
import torch
import torch.nn as nn

from sidesum.corpus import BOS, EOS, PAD
from sidesum.decoder import (
    AttentionTrace,
    Decoder,
    DecoderLayer,
    Hypothesis,
    beam_search,
    context_vector,
    greedy_decode,
    guided_input_attention,
    length_penalty,
    topic_attention,
    vocab_distribution,
)
from sidesum.graph_encoder import NodeStates
from sidesum.numerics import attention, causal_mask, grad_check, init_uniform_

D = torch.float64
d, H, V = 8, 2, 12


def t(x):
    return torch.tensor(x, dtype=D)


def _decoder(seed=0, layers=1, bound=0.5, normalize=False, vocab=V):
    dec = Decoder(nn.Embedding(vocab, d), vocab, 40, d, H, 12, layers, 4, normalize=normalize).double()
    init_uniform_(dec, bound, torch.Generator().manual_seed(seed))
    return dec.eval()


def _enc(B=1, nd=5, ns=3, k=3, seed=0):
    g = torch.Generator().manual_seed(seed + 100)
    return NodeStates(
        torch.randn(B, nd, d, generator=g, dtype=D), torch.ones(B, nd, dtype=torch.bool),
        torch.randn(B, ns, d, generator=g, dtype=D), torch.ones(B, ns, dtype=torch.bool),
        torch.randn(B, k, d, generator=g, dtype=D),
    )


def _step_fn(dec, enc):
    def step(prefixes):
        n = prefixes.shape[0]
        e = NodeStates(*(x.expand(n, *x.shape[1:]) for x in (enc.doc, enc.doc_mask, enc.side, enc.side_mask,
                                                                enc.topics)))
        return torch.log_softmax(dec(prefixes, e)[0][:, -1], -1)
    return step


def _trigrams(seq):
    return [tuple(seq[i:i + 3]) for i in range(len(seq) - 2)]


# ----------------------------------------------------------------------------- routing functions

def test_topic_attention_examples():
    eye = torch.eye(2, dtype=D)
    topics = t([[1.0, 0.0], [0.0, 1.0]])
    assert topic_attention(t([[-1.0, -2.0]]), topics, eye, eye).abs().max() == 0
    assert topic_attention(t([[0.0, 0.0]]), topics, eye, eye).abs().max() == 0
    assert topic_attention(t([[0.0, 3.0]]), t([[1.0, 0.0], [2.0, 0.0]]), eye, eye).abs().max() == 0
    # hand case: g W_a = (1, 2), topics W_b = [[1, 1], [2, -3]] -> logits (3, -4) -> relu (3, 0)
    w_a = t([[1.0, 0.0], [0.0, 2.0]])
    w_b = t([[1.0, 1.0], [1.0, -1.0]])
    z = topic_attention(t([[1.0, 1.0]]), t([[1.0, 0.0], [-0.5, 2.5]]), w_a, w_b)
    np.testing.assert_allclose(z, [[3.0, 0.0]], atol=1e-15)


def test_guided_input_attention_examples():
    ones = lambda x: torch.ones_like(x)  # noqa: E731
    states = torch.randn(4, d, dtype=D)
    assert guided_input_attention(torch.zeros(1, 2, dtype=D), torch.randn(2, d, dtype=D), states, ones).abs().max() == 0
    z = guided_input_attention(t([[0.7]]), torch.randn(1, d, dtype=D), states, ones)
    np.testing.assert_allclose(z, [[0.7] * 4], atol=1e-15)
    # 2 topics x 3 positions with identity similarity
    topics = t([[1.0, 0.0], [0.0, 1.0]])
    states = t([[1.0, 2.0], [3.0, 0.0], [0.0, -1.0]])
    e = topics @ states.T
    z = guided_input_attention(t([[0.5, 2.0]]), topics, states, lambda x: x)
    np.testing.assert_allclose(z, [[0.5 * e[0, j] + 2.0 * e[1, j] for j in range(3)]], atol=1e-15)
    np.testing.assert_allclose(z, [[4.5, 1.5, -2.0]], atol=1e-15)


def test_guided_input_attention_mask_zeroes_padding():
    z = guided_input_attention(t([[1.0, 1.0]]), torch.randn(2, d, dtype=D), torch.randn(3, d, dtype=D),
                               lambda x: x + 10, torch.tensor([True, False, True]))
    assert z[0, 1] == 0


def test_context_vector_examples():
    rows = torch.randn(4, d, dtype=D)
    np.testing.assert_allclose(context_vector(t([0.0, 0.0, 1.0, 0.0]), rows), rows[2])
    assert context_vector(torch.zeros(4, dtype=D), rows).abs().max() == 0
    z = torch.randn(4, dtype=D)
    np.testing.assert_allclose(context_vector(z, rows), sum(z[i] * rows[i] for i in range(4)), atol=1e-12)


def test_vocab_distribution():
    g, co, cd, cs = (torch.randn(d, dtype=D) for _ in range(4))
    np.testing.assert_allclose(vocab_distribution(g, co, cd, cs, torch.zeros(V, 4 * d, dtype=D)), [1 / V] * V,
                               atol=1e-15)
    rng = torch.Generator().manual_seed(1)
    for _ in range(20):
        w = torch.randn(V, 4 * d, dtype=D, generator=rng) * 3
        p = vocab_distribution(g, co, cd, cs, w)
        assert abs(float(p.sum()) - 1) < 1e-12 and (p >= 0).all()
        assert int(p.argmax()) == int((w @ torch.cat([g, co, cd, cs])).argmax())


# ----------------------------------------------------------------------------- decoder layer

def test_masked_self_attention_single_position():
    layer = DecoderLayer(d, 1, 12, 4).double()
    init_uniform_(layer, 0.5, torch.Generator().manual_seed(0))
    g = torch.randn(1, 1, d, dtype=D)
    att = layer.self_attn.o(layer.self_attn.v(g) / math.sqrt(d))
    np.testing.assert_allclose(layer.masked_self_attention(g).detach(), layer.ln1(g + att).detach(), atol=1e-12)


def test_masked_self_attention_matches_causal_oracle():
    layer = DecoderLayer(d, 1, 12, 4).double()
    init_uniform_(layer, 0.5, torch.Generator().manual_seed(1))
    g = torch.randn(1, 6, d, dtype=D)
    a = layer.self_attn
    expected = a.o(attention(a.q(g[0]), a.k(g[0]), a.v(g[0]), causal_mask(6), d_e=d))
    np.testing.assert_allclose(layer.masked_self_attention(g)[0].detach(), layer.ln1(g[0] + expected).detach(),
                               atol=1e-12)


def test_decoder_is_causal():
    dec = _decoder(seed=2, layers=2)
    enc = _enc()
    tokens = torch.randint(4, V, (1, 7))
    logits, _, _ = dec(tokens, enc)
    for pos in range(6):
        changed = tokens.clone()
        changed[0, pos + 1:] = torch.randint(4, V, (6 - pos,))
        np.testing.assert_allclose(dec(changed, enc)[0][0, :pos + 1].detach(), logits[0, :pos + 1].detach(),
                                   atol=1e-12)


def test_decoder_output_shapes_and_trace():
    dec = _decoder()
    enc = _enc(nd=5, ns=3, k=3)
    logits, states, (z_o, z_d, z_s) = dec(torch.randint(0, V, (1, 4)), enc)
    assert logits.shape == (1, 4, V) and states.shape == (1, 4, d)
    assert z_o.shape == (1, 4, 3) and z_d.shape == (1, 4, 5) and z_s.shape == (1, 4, 3)
    assert (z_o >= 0).all()
    trace = AttentionTrace(z_o[0], z_d[0], z_s[0])
    rows = list(trace.rows())
    assert len(rows) == 4 * (3 + 5 + 3)
    assert rows[0][:3] == (0, "topic", 0)


def test_decoder_without_side():
    dec = _decoder()
    enc = _enc(ns=0)
    logits, _, (_, _, z_s) = dec(torch.randint(0, V, (1, 3)), enc)
    assert torch.isfinite(logits).all() and z_s.shape == (1, 3, 0)


def test_normalized_guided_attention_rows_sum_to_one():
    dec = _decoder(normalize=True)
    enc = _enc()
    enc.doc_mask[0, -2:] = False
    with torch.no_grad():
        _, _, (_, z_d, z_s) = dec(torch.randint(0, V, (1, 4)), enc)
    np.testing.assert_allclose(z_d.sum(-1), 1.0, atol=1e-12)
    np.testing.assert_allclose(z_s.sum(-1), 1.0, atol=1e-12)
    assert (z_d[..., -2:] == 0).all()


def test_uniform_output_gives_log_vocab_loss():
    dec = _decoder()
    with torch.no_grad():
        dec.out.weight.zero_()
    logits, _, _ = dec(torch.randint(0, V, (2, 5)), _enc(B=2))
    nll = -torch.log_softmax(logits, -1)[..., 3]
    np.testing.assert_allclose(nll.detach(), math.log(V), atol=1e-12)


def test_decoder_loss_gradients():
    dec = Decoder(nn.Embedding(7, 4), 7, 8, 4, 2, 6, 1, 3).double()
    init_uniform_(dec, 0.5, torch.Generator().manual_seed(3))
    g = torch.Generator().manual_seed(3)
    enc = NodeStates(torch.randn(2, 3, 4, dtype=D, generator=g), torch.ones(2, 3, dtype=torch.bool),
                     torch.randn(2, 2, 4, dtype=D, generator=g), torch.tensor([[True, True], [True, False]]),
                     torch.randn(2, 2, 4, dtype=D, generator=g))
    tokens, target = torch.tensor([[1, 4, 5], [1, 6, 0]]), torch.tensor([[4, 5, 2], [6, 2, 0]])

    def loss():
        logp = torch.log_softmax(dec(tokens, enc)[0], -1)
        return -logp.gather(-1, target.unsqueeze(-1)).mean()

    assert grad_check(loss, list(dec.parameters()), max_coords=8) < 1e-4


# ----------------------------------------------------------------------------- search

def test_length_penalty():
    assert length_penalty(7, 0.0) == 1.0
    assert length_penalty(1, 1.0) == 1.0
    assert abs(length_penalty(7, 0.5) - math.sqrt(2.0)) < 1e-15


def test_hypothesis_length_excludes_bos_and_eos():
    assert Hypothesis([BOS]).length == 0
    assert Hypothesis([BOS, 5, 6, EOS]).length == 2
    assert Hypothesis([BOS, 5, 6, EOS]).output() == [5, 6]


def _table_step(table):
    """Step function whose next-token log-probabilities depend only on the last token."""
    def step(prefixes):
        return torch.stack([table[int(p[-1])] for p in prefixes])
    return step


def test_beam_one_alpha_zero_equals_greedy_on_random_models():
    for seed in range(100):
        dec = _decoder(seed=seed, bound=1.5)
        fn = _step_fn(dec, _enc(seed=seed))
        with torch.no_grad():
            assert beam_search(fn, beam=1, alpha=0.0, min_len=1, max_len=8) == greedy_decode(fn, 1, 8)


def test_alpha_zero_ranks_by_raw_log_probability():
    # tokens x, y = 4, 5; after BOS only x; after x: EOS (p=0.4) or y (p=0.6);
    # after y: EOS certain.  Finished: [x] with log .4, [x y] with log .6.
    table = torch.full((6, 6), -math.inf, dtype=D)
    table[BOS, 4] = 0.0
    table[4, EOS] = math.log(0.4)
    table[4, 5] = math.log(0.6)
    table[5, EOS] = 0.0
    assert beam_search(_table_step(table), beam=2, alpha=0.0, min_len=1, max_len=3) == [4, 5]


def test_length_penalty_can_favour_longer_output():
    V_ = 6
    table = torch.full((V_, V_), -math.inf, dtype=D)
    table[BOS, 4] = 0.0
    table[4, EOS] = math.log(0.55)
    table[4, 5] = math.log(0.45)
    table[5, EOS] = math.log(0.9)
    table[5, 4] = math.log(0.1)
    short = beam_search(_table_step(table), beam=2, alpha=0.0, min_len=1, max_len=5)
    long = beam_search(_table_step(table), beam=2, alpha=5.0, min_len=1, max_len=5)
    assert short == [4]
    assert len(long) > 1


def test_rigged_model_never_repeats_trigrams():
    # tokens a, b, c = 4, 5, 6; the model strongly prefers the cycle a -> b -> c -> a.
    V_ = 7
    table = torch.full((V_, V_), math.log(1e-3), dtype=D)
    for prev, nxt in ((BOS, 4), (4, 5), (5, 6), (6, 4)):
        table[prev, nxt] = math.log(0.9)
    table = torch.log_softmax(table, -1)
    for beam in (1, 3, 5):
        out = beam_search(_table_step(table), beam=beam, alpha=0.8, min_len=1, max_len=20)
        assert len(_trigrams(out)) == len(set(_trigrams(out)))
        assert out[:3] == [4, 5, 6]
    greedy = greedy_decode(_table_step(table), 1, 20)
    assert len(_trigrams(greedy)) == len(set(_trigrams(greedy)))


def test_lengths_respect_bounds_and_specials_never_emitted():
    for seed in range(30):
        fn = _step_fn(_decoder(seed=seed, bound=1.5), _enc(seed=seed))
        with torch.no_grad():
            for min_len, max_len in ((1, 4), (3, 6), (5, 5)):
                out = beam_search(fn, beam=3, alpha=0.8, min_len=min_len, max_len=max_len)
                assert min_len <= len(out) <= max_len
                assert not {PAD, BOS, EOS} & set(out)
                assert len(_trigrams(out)) == len(set(_trigrams(out)))


def test_eos_suppressed_below_min_len():
    table = torch.full((6, 6), math.log(1e-6), dtype=D)
    table[:, EOS] = 0.0
    table = torch.log_softmax(table, -1)
    assert len(beam_search(_table_step(table), beam=2, alpha=0.0, min_len=3, max_len=6)) == 3
    assert len(greedy_decode(_table_step(table), 4, 6)) == 4


def test_beam_search_rejects_bad_arguments():
    fn = _table_step(torch.zeros(6, 6, dtype=D))
    with pytest.raises(ValueError):
        beam_search(fn, beam=0)
    with pytest.raises(ValueError):
        beam_search(fn, min_len=5, max_len=3)
