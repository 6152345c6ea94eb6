"""Attention, normalisation and feed-forward blocks plus a finite-difference gradient checker.

Tensors are torch tensors; reverse-mode gradients come from torch autograd and
:func:`grad_check` verifies them against central differences computed here.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

LN_EPS = 1e-5


def softmax(v: torch.Tensor, dim: int = -1) -> torch.Tensor:
    v = torch.as_tensor(v)
    shifted = v - v.max(dim=dim, keepdim=True).values
    e = shifted.exp()
    return e / e.sum(dim=dim, keepdim=True)


def masked_softmax(logits: torch.Tensor, mask: torch.Tensor | None, dim: int = -1) -> torch.Tensor:
    """Softmax over entries where ``mask`` is True; rows with no valid entry become all-zero."""
    if mask is None:
        return torch.softmax(logits, dim=dim)
    filled = logits.masked_fill(~mask, torch.finfo(logits.dtype).min)
    weights = torch.softmax(filled, dim=dim)
    return weights * mask.any(dim=dim, keepdim=True).to(weights.dtype)


def layer_norm(x: torch.Tensor, gain: torch.Tensor, bias: torch.Tensor, eps: float = LN_EPS) -> torch.Tensor:
    mean = x.mean(dim=-1, keepdim=True)
    var = ((x - mean) ** 2).mean(dim=-1, keepdim=True)
    return gain * (x - mean) / torch.sqrt(var + eps) + bias


def ffn(x, W1, b1, W2, b2):
    """``W2 relu(W1 x + b1) + b2`` for a vector or a batch of row vectors."""
    x, W1, b1, W2, b2 = (torch.as_tensor(t) for t in (x, W1, b1, W2, b2))
    if W1.shape[-1] != x.shape[-1] or W2.shape[-1] != W1.shape[0] or b1.shape[-1] != W1.shape[0] \
            or b2.shape[-1] != W2.shape[0]:
        raise ValueError(f"ffn shape mismatch: x{tuple(x.shape)} W1{tuple(W1.shape)} W2{tuple(W2.shape)}")
    return torch.relu(x @ W1.T + b1) @ W2.T + b2


def attention(Q, K, V, mask=None, d_e: int | None = None, scaled_logits: bool = False, return_weights=False):
    """Single-head attention.

    By default logits are the raw dot products and the weighted value sum is divided
    by ``sqrt(d_e)``; with ``scaled_logits`` the logits are divided by ``sqrt(d_h)``
    instead and the sum is left unscaled.  ``mask[i, j]`` True means query ``i`` may
    attend to key ``j``.  Fully masked rows raise ``ValueError``.
    """
    Q, K, V = (torch.as_tensor(t) for t in (Q, K, V))
    d_e = d_e if d_e is not None else Q.shape[-1]
    logits = Q @ K.transpose(-1, -2)
    if scaled_logits:
        logits = logits / math.sqrt(Q.shape[-1])
    if mask is not None:
        mask = torch.as_tensor(mask, dtype=torch.bool)
        if not bool(mask.any(dim=-1).all()):
            raise ValueError("attention row with every key masked")
        logits = logits.masked_fill(~mask, float("-inf"))
    weights = softmax(logits, dim=-1)
    out = weights @ V
    if not scaled_logits:
        out = out / math.sqrt(d_e)
    return (out, weights) if return_weights else out


def causal_mask(n: int, device=None) -> torch.Tensor:
    return torch.ones(n, n, dtype=torch.bool, device=device).tril()


def init_uniform_(module: nn.Module, bound: float, generator: torch.Generator | None = None) -> None:
    """Uniform [-bound, bound] for every parameter except layer-norm gains (ones) and biases (zeros)."""
    with torch.no_grad():
        for p in module.parameters():
            p.uniform_(-bound, bound, generator=generator)
        for m in module.modules():
            if isinstance(m, LayerNorm):
                m.gain.fill_(1.0)
                m.bias.zero_()


class Linear(nn.Linear):
    """``nn.Linear`` with dropout applied to its input."""

    def __init__(self, d_in: int, d_out: int, bias: bool = True, dropout: float = 0.0):
        super().__init__(d_in, d_out, bias=bias)
        self.p = dropout

    def forward(self, x):
        if self.p and self.training:
            x = F.dropout(x, self.p, training=True)
        return super().forward(x)


class LayerNorm(nn.Module):
    def __init__(self, d: int):
        super().__init__()
        self.gain = nn.Parameter(torch.ones(d))
        self.bias = nn.Parameter(torch.zeros(d))

    def forward(self, x):
        return F.layer_norm(x, self.gain.shape, self.gain, self.bias, LN_EPS)


class FeedForward(nn.Module):
    def __init__(self, d_in: int, d_ff: int, d_out: int, dropout: float = 0.0):
        super().__init__()
        self.w1 = Linear(d_in, d_ff, dropout=dropout)
        self.w2 = Linear(d_ff, d_out, dropout=dropout)

    def forward(self, x):
        return self.w2(torch.relu(self.w1(x)))


class ScalarFFN(nn.Module):
    """Elementwise scalar-to-scalar perceptron, ``w2 . relu(x w1 + b1) + b2``."""

    def __init__(self, hidden: int):
        super().__init__()
        self.w1 = nn.Parameter(torch.empty(hidden))
        self.b1 = nn.Parameter(torch.empty(hidden))
        self.w2 = nn.Parameter(torch.empty(hidden))
        self.b2 = nn.Parameter(torch.empty(()))

    def forward(self, x):
        return torch.relu(x.unsqueeze(-1) * self.w1 + self.b1) @ self.w2 + self.b2


class MultiHeadAttention(nn.Module):
    """Batched multi-head attention.

    ``q``: [B, Nq, d], ``kv``: [B, Nk, d], ``key_mask``: [B, Nk] (True = valid key),
    ``attn_mask``: [Nq, Nk] (True = allowed).  Query rows with no allowed key
    produce zeros; this only happens for padding rows and absent side channels.
    """

    def __init__(self, d_model: int, heads: int, dropout: float = 0.0, scaled_logits: bool = False):
        super().__init__()
        if d_model % heads:
            raise ValueError(f"d_model={d_model} is not divisible by heads={heads}")
        self.d_model, self.heads, self.d_head = d_model, heads, d_model // heads
        self.scaled_logits = scaled_logits
        self.q = Linear(d_model, d_model, dropout=dropout)
        self.k = Linear(d_model, d_model, dropout=dropout)
        self.v = Linear(d_model, d_model, dropout=dropout)
        self.o = Linear(d_model, d_model, dropout=dropout)
        self.last_weights: torch.Tensor | None = None
        self.keep_weights = False

    def _split(self, x):
        B, N, _ = x.shape
        return x.view(B, N, self.heads, self.d_head).transpose(1, 2)

    def forward(self, q, kv, key_mask=None, attn_mask=None):
        B, Nq, _ = q.shape
        Nk = kv.shape[1]
        Q, K, V = self._split(self.q(q)), self._split(self.k(kv)), self._split(self.v(kv))
        logits = Q @ K.transpose(-1, -2)
        if self.scaled_logits:
            logits = logits / math.sqrt(self.d_head)
        mask = None
        if key_mask is not None:
            mask = key_mask[:, None, None, :].expand(B, 1, Nq, Nk)
        if attn_mask is not None:
            am = attn_mask[None, None]
            mask = am if mask is None else mask & am
        weights = masked_softmax(logits, mask)
        if self.keep_weights:
            self.last_weights = weights.detach()
        out = weights @ V
        if not self.scaled_logits:
            out = out / math.sqrt(self.d_model)
        out = out.transpose(1, 2).reshape(B, Nq, self.d_model)
        return self.o(out)


class TransformerLayer(nn.Module):
    """Post-norm encoder layer: ``LN(x + MHAtt(x, x))`` then ``LN(h + FFN(h))``."""

    def __init__(self, d_model, heads, d_ff, dropout=0.0, scaled_logits=False):
        super().__init__()
        self.attn = MultiHeadAttention(d_model, heads, dropout, scaled_logits)
        self.ln1 = LayerNorm(d_model)
        self.ffn = FeedForward(d_model, d_ff, d_model, dropout)
        self.ln2 = LayerNorm(d_model)

    def forward(self, x, key_mask=None, attn_mask=None):
        h = self.ln1(x + self.attn(x, x, key_mask, attn_mask))
        return self.ln2(h + self.ffn(h))


def grad_check(
    f: Callable[[], torch.Tensor],
    params: Sequence[torch.Tensor],
    step: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Largest ``|g_ad - g_fd| / max(1, |g_ad| + |g_fd|)`` over checked coordinates.

    ``f`` is re-evaluated with each parameter coordinate nudged by ``+-step``; the
    parameters should be float64 leaf tensors.  ``max_coords`` limits the number of
    coordinates checked per tensor (a seeded random subset).
    """
    params = list(params)
    for p in params:
        p.grad = None
    value = f()
    if not torch.isfinite(value).all():
        raise FloatingPointError("non-finite function value")
    grads = torch.autograd.grad(value, params, allow_unused=True)
    rng = np.random.default_rng(seed)
    worst = 0.0
    with torch.no_grad():
        for p, g in zip(params, grads):
            g = torch.zeros_like(p) if g is None else g
            flat_p, flat_g = p.view(-1), g.reshape(-1)
            coords = np.arange(flat_p.numel())
            if max_coords is not None and coords.size > max_coords:
                coords = rng.choice(coords, size=max_coords, replace=False)
            for i in coords:
                orig = flat_p[i].item()
                flat_p[i] = orig + step
                up = f().item()
                flat_p[i] = orig - step
                down = f().item()
                flat_p[i] = orig
                if not (math.isfinite(up) and math.isfinite(down)):
                    raise FloatingPointError("non-finite function value")
                g_fd = (up - down) / (2 * step)
                g_ad = flat_g[i].item()
                worst = max(worst, abs(g_ad - g_fd) / max(1.0, abs(g_ad) + abs(g_fd)))
    return worst
