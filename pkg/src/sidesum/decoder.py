"""Hierarchical topic-guided decoder and beam search."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import torch
import torch.nn as nn

from .corpus import BOS, EOS, PAD
from .graph_encoder import NodeStates
from .numerics import FeedForward, LayerNorm, Linear, MultiHeadAttention, ScalarFFN, causal_mask, masked_softmax


def topic_attention(g, topics, w_a, w_b):
    """``relu(g W_a (topics W_b)^T)``: unnormalised weights over topics (one row per decoder position)."""
    return torch.relu((g @ w_a) @ (topics @ w_b).transpose(-1, -2))


def guided_input_attention(z_o, topics, states, sim_ffn, mask=None):
    """Route topic weights to input positions: ``z_o @ FFN(topics states^T)``."""
    e = sim_ffn(topics @ states.transpose(-1, -2))
    if mask is not None:
        e = e * mask.unsqueeze(-2).to(e.dtype)
    return z_o @ e


def context_vector(z, states):
    return z @ states


def vocab_distribution(g, c_o, c_d, c_s, w_d):
    return torch.softmax(torch.cat([g, c_o, c_d, c_s], dim=-1) @ w_d.T, dim=-1)


@dataclass
class AttentionTrace:
    """Final-layer routing weights for one sample, one row per decoding step."""

    topic: torch.Tensor  # [T, K]
    doc: torch.Tensor  # [T, Nd]
    side: torch.Tensor  # [T, Ns]

    def rows(self):
        for step in range(self.topic.shape[0]):
            for kind, weights in (("topic", self.topic), ("doc", self.doc), ("side", self.side)):
                for index, w in enumerate(weights[step].tolist()):
                    yield step, kind, index, w


class DecoderLayer(nn.Module):
    def __init__(self, d_model, heads, d_ff, scalar_hidden, dropout=0.0, scaled_logits=False, normalize=False):
        super().__init__()
        self.self_attn = MultiHeadAttention(d_model, heads, dropout, scaled_logits)
        self.ln1 = LayerNorm(d_model)
        self.w_a = nn.Parameter(torch.empty(d_model, d_model))
        self.w_b = nn.Parameter(torch.empty(d_model, d_model))
        self.sim_doc = ScalarFFN(scalar_hidden)
        self.sim_side = ScalarFFN(scalar_hidden)
        self.fuse = FeedForward(4 * d_model, d_ff, d_model, dropout)
        self.ln2 = LayerNorm(d_model)
        self.normalize = normalize

    def masked_self_attention(self, g):
        T = g.shape[1]
        return self.ln1(g + self.self_attn(g, g, attn_mask=causal_mask(T, g.device)))

    def forward(self, g, enc: NodeStates):
        g_tilde = self.masked_self_attention(g)
        z_o = topic_attention(g_tilde, enc.topics, self.w_a, self.w_b)
        z_d = guided_input_attention(z_o, enc.topics, enc.doc, self.sim_doc, enc.doc_mask)
        if self.normalize:
            z_d = masked_softmax(z_d, enc.doc_mask.unsqueeze(1))
        c_o = context_vector(z_o, enc.topics)
        c_d = context_vector(z_d, enc.doc)
        if enc.side.shape[1] > 0:
            z_s = guided_input_attention(z_o, enc.topics, enc.side, self.sim_side, enc.side_mask)
            if self.normalize:
                z_s = masked_softmax(z_s, enc.side_mask.unsqueeze(1))
            c_s = context_vector(z_s, enc.side)
        else:
            z_s = g.new_zeros(g.shape[0], g.shape[1], 0)
            c_s = torch.zeros_like(c_d)
        out = self.ln2(g_tilde + self.fuse(torch.cat([g_tilde, c_o, c_d, c_s], dim=-1)))
        return out, (c_o, c_d, c_s), (z_o, z_d, z_s)


class Decoder(nn.Module):
    def __init__(self, embed: nn.Embedding, vocab_size, max_positions, d_model, heads, d_ff, layers,
                 scalar_hidden, dropout=0.0, scaled_logits=False, normalize=False):
        super().__init__()
        self.embed = embed
        self.pos = nn.Embedding(max_positions, d_model)
        self.layers = nn.ModuleList(
            DecoderLayer(d_model, heads, d_ff, scalar_hidden, dropout, scaled_logits, normalize)
            for _ in range(layers)
        )
        self.out = Linear(4 * d_model, vocab_size, bias=False, dropout=dropout)

    def forward(self, tokens, enc: NodeStates):
        """Logits [B, T, V], final states [B, T, d] and the last layer's (z_o, z_d, z_s)."""
        T = tokens.shape[1]
        g = self.embed(tokens) + self.pos.weight[:T]
        for layer in self.layers:
            g, contexts, weights = layer(g, enc)
        logits = self.out(torch.cat([g, *contexts], dim=-1))
        return logits, g, weights


# --------------------------------------------------------------------------- search

StepFn = Callable[[torch.Tensor], torch.Tensor]
"""Maps prefixes [n, t] (starting with BOS) to next-token log-probabilities [n, V]."""


@dataclass
class Hypothesis:
    tokens: list[int]
    score: float = 0.0
    finished: bool = False
    trigrams: set = field(default_factory=set)

    @property
    def length(self) -> int:
        """Generated token count, excluding BOS and EOS."""
        return len(self.tokens) - 1 - (1 if self.tokens[-1] == EOS and len(self.tokens) > 1 else 0)

    def output(self) -> list[int]:
        return [t for t in self.tokens[1:] if t != EOS]


def length_penalty(length: int, alpha: float) -> float:
    return ((5.0 + length) / 6.0) ** alpha


def _extend(hyp: Hypothesis, token: int, logp: float) -> Hypothesis:
    gen = hyp.tokens[1:]
    trigrams = hyp.trigrams
    if token != EOS and len(gen) >= 2:
        trigrams = trigrams | {(gen[-2], gen[-1], token)}
    return Hypothesis(hyp.tokens + [token], hyp.score + logp, token == EOS, trigrams)


def _mask_logprobs(logp: torch.Tensor, hyps: list[Hypothesis], min_len: int) -> torch.Tensor:
    logp = logp.clone()
    logp[:, PAD] = -math.inf
    logp[:, BOS] = -math.inf
    for row, hyp in enumerate(hyps):
        if hyp.length < min_len:
            logp[row, EOS] = -math.inf
        gen = hyp.tokens[1:]
        if len(gen) >= 2:
            for (a, b, c) in hyp.trigrams:
                if a == gen[-2] and b == gen[-1]:
                    logp[row, c] = -math.inf
    return logp


def beam_search(step_fn: StepFn, beam: int = 5, alpha: float = 0.8, min_len: int = 1, max_len: int = 32) -> list[int]:
    """Length-penalised beam search with EOS suppression below ``min_len`` and trigram blocking.

    Finished hypotheses are ranked by ``score / ((5 + len) / 6) ** alpha``.  Search
    stops once ``beam`` hypotheses have finished, none are left alive, or every
    live hypothesis has ``max_len`` tokens.
    """
    if beam < 1:
        raise ValueError("beam must be >= 1")
    if min_len > max_len:
        raise ValueError("min_len must not exceed max_len")
    alive = [Hypothesis([BOS])]
    finished: list[Hypothesis] = []
    while alive and len(finished) < beam:
        if alive[0].length >= max_len:
            finished.extend(Hypothesis(h.tokens, h.score, True, h.trigrams) for h in alive)
            break
        prefixes = torch.tensor([h.tokens for h in alive], dtype=torch.long)
        logp = _mask_logprobs(step_fn(prefixes).detach().double(), alive, min_len)
        flat = logp + torch.tensor([h.score for h in alive], dtype=torch.float64).unsqueeze(1)
        order = torch.argsort(flat.view(-1), descending=True, stable=True)
        vocab = logp.shape[1]
        next_alive = []
        for idx in order.tolist():
            total = flat.view(-1)[idx].item()
            if total == -math.inf or len(next_alive) >= beam:
                break
            row, token = divmod(idx, vocab)
            hyp = _extend(alive[row], token, logp[row, token].item())
            if hyp.finished:
                if len(finished) < beam:
                    finished.append(hyp)
            else:
                next_alive.append(hyp)
        alive = next_alive
    pool = finished or alive
    if not pool:
        return []
    best = max(pool, key=lambda h: h.score / length_penalty(h.length, alpha))
    return best.output()


def greedy_decode(step_fn: StepFn, min_len: int = 1, max_len: int = 32) -> list[int]:
    """Stepwise argmax under the same EOS and trigram constraints as :func:`beam_search`."""
    hyp = Hypothesis([BOS])
    while hyp.length < max_len:
        logp = _mask_logprobs(step_fn(torch.tensor([hyp.tokens])).detach().double(), [hyp], min_len)[0]
        token = int(torch.argmax(logp))
        if logp[token] == -math.inf:
            break
        hyp = _extend(hyp, token, logp[token].item())
        if hyp.finished:
            break
    return hyp.output()
