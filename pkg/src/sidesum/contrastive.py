"""Triplet contrastive alignment of document, side and summary representations."""

from __future__ import annotations

import numpy as np
import torch


def masked_mean(states: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean over valid rows; all-masked samples pool to the zero vector."""
    if states.shape[1] == 0:
        return states.new_zeros(states.shape[0], states.shape[-1])
    m = mask.to(states.dtype).unsqueeze(-1)
    return (states * m).sum(1) / m.sum(1).clamp(min=1.0)


def pool_representations(doc, doc_mask, side, side_mask, dec_states, summary_lengths):
    """(D, S, G): mean-pooled document and side nodes, and the decoder state at each summary's last input position."""
    D = masked_mean(doc, doc_mask)
    S = masked_mean(side, side_mask)
    idx = torch.as_tensor(summary_lengths, dtype=torch.long) - 1
    G = dec_states[torch.arange(dec_states.shape[0]), idx]
    return D, S, G


def sample_negatives(batch_size: int, rng: np.random.Generator) -> np.ndarray:
    """For each sample, a uniformly chosen index of a different batch member; empty when batch_size < 2."""
    if batch_size < 2:
        return np.empty(0, dtype=np.int64)
    offsets = rng.integers(1, batch_size, size=batch_size)
    return (np.arange(batch_size) + offsets) % batch_size


def cosine(a: torch.Tensor, b: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    """Row-wise cosine similarity, 0 where either vector has zero norm."""
    na = a.norm(dim=-1)
    nb = b.norm(dim=-1)
    ok = (na > eps) & (nb > eps)
    denom = torch.where(ok, na * nb, torch.ones_like(na))
    return torch.where(ok, (a * b).sum(-1) / denom, torch.zeros_like(na))


def pair_cosines(D, S, G, D_neg, S_neg, G_neg):
    """Positive [(D,S), (S,G), (G,D)] cosines [B, 3] and negative [(D,S-), (S,G-), (G,D-)] cosines.

    Negatives are [B, d] (one per pair, giving [B, 3]) or a pool [B, n, d] (giving [B, 3n]).
    """
    pos = torch.stack([cosine(D, S), cosine(S, G), cosine(G, D)], dim=-1)
    if D_neg.dim() == D.dim():
        neg = torch.stack([cosine(D, S_neg), cosine(S, G_neg), cosine(G, D_neg)], dim=-1)
    else:
        neg = torch.stack([cosine(D.unsqueeze(1), S_neg), cosine(S.unsqueeze(1), G_neg),
                           cosine(G.unsqueeze(1), D_neg)], dim=-1).flatten(1)
    return pos, neg


def triplet_loss(D, S, G, D_neg, S_neg, G_neg, tau: float = 0.1, has_side=None) -> torch.Tensor:
    """Batch mean of ``-log(sum_pos exp(cos/tau) / sum_{pos+neg} exp(cos/tau))``.

    Samples without side information keep only the (G, D) and (G, D-) pairs.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    pos, neg = pair_cosines(D, S, G, D_neg, S_neg, G_neg)
    pos, neg = pos / tau, neg / tau
    if has_side is not None:
        keep = torch.ones_like(pos, dtype=torch.bool)
        keep[:, 0] = has_side
        keep[:, 1] = has_side
        pos = pos.masked_fill(~keep, float("-inf"))
        neg = neg.masked_fill(~keep.repeat(1, neg.shape[1] // 3), float("-inf"))
    num = torch.logsumexp(pos, dim=-1)
    den = torch.logsumexp(torch.cat([pos, neg], dim=-1), dim=-1)
    return (den - num).mean()
