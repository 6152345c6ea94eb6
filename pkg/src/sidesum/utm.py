"""Unified topic model: Gaussian topic latents for document and side, summary bag-of-words prediction."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from .numerics import Linear, softmax


class Perceptron(nn.Module):
    """One-hidden-layer relu perceptron ``W2 relu(W1 h + b1) + b2``."""

    def __init__(self, d_in: int, hidden: int, d_out: int, dropout: float = 0.0):
        super().__init__()
        self.w1 = Linear(d_in, hidden, dropout=dropout)
        self.w2 = Linear(hidden, d_out, dropout=dropout)

    def forward(self, x):
        return self.w2(torch.relu(self.w1(x)))


class PriorEncoder(nn.Module):
    """Maps one input channel to the mean and log-std of its topic latent."""

    def __init__(self, d_in: int, hidden: int, topics: int, dropout: float = 0.0):
        super().__init__()
        self.f_mu = Perceptron(d_in, hidden, topics, dropout)
        self.f_sigma = Perceptron(d_in, hidden, topics, dropout)

    def forward(self, h):
        if not torch.isfinite(h).all():
            raise ValueError("non-finite topic-model input")
        return self.f_mu(h), self.f_sigma(h)


def sample_latent(mu: torch.Tensor, log_sigma: torch.Tensor, eps: torch.Tensor | None = None) -> torch.Tensor:
    """Reparameterised draw ``mu + exp(log_sigma) * eps``; ``eps=None`` returns the mean."""
    if eps is None:
        return mu
    return mu + log_sigma.exp() * eps


def mix_topics(z_d: torch.Tensor, z_s: torch.Tensor) -> torch.Tensor:
    return softmax(z_d + z_s, dim=-1)


def predict_bow(theta: torch.Tensor, w_phi: torch.Tensor) -> torch.Tensor:
    return softmax(theta @ w_phi, dim=-1)


def wasserstein_gaussian(mu: torch.Tensor, log_sigma: torch.Tensor) -> torch.Tensor:
    """Squared 2-Wasserstein distance from N(mu, diag(sigma^2)) to N(0, I), summed over the last axis."""
    sigma = log_sigma.exp()
    return (mu ** 2).sum(-1) + ((sigma - 1.0) ** 2).sum(-1)


class UnifiedTopicModel(nn.Module):
    """Encodes document and side inputs to topic latents and predicts the summary bag-of-words.

    ``side_dim`` is the width of the side input: the topic vocabulary size for
    text sides, the visual feature size for visual sides (mean-pooled per sample,
    then projected by ``visual_in``), or ``None`` when the corpus has no side.
    """

    def __init__(self, vocab_t: int, topics: int, hidden: int, d_model: int,
                 side_kind: str = "text", visual_dim: int = 64, dropout: float = 0.0,
                 normalize_bow: bool = True):
        super().__init__()
        self.vocab_t, self.topics = vocab_t, topics
        self.normalize_bow = normalize_bow
        self.side_kind = side_kind
        self.doc_prior = PriorEncoder(vocab_t, hidden, topics, dropout)
        self.visual_in = None
        if side_kind == "visual":
            self.visual_in = Linear(visual_dim, d_model, dropout=dropout)
            self.side_prior = PriorEncoder(d_model, hidden, topics, dropout)
        elif side_kind == "text":
            self.side_prior = PriorEncoder(vocab_t, hidden, topics, dropout)
        else:
            self.side_prior = None
        self.w_phi = nn.Parameter(torch.empty(topics, vocab_t))
        self.f_phi = Perceptron(vocab_t, hidden, d_model, dropout)

    def side_input(self, side_bow=None, side_visual=None, side_mask=None):
        if self.side_kind == "visual":
            m = side_mask.to(side_visual.dtype).unsqueeze(-1)
            pooled = (side_visual * m).sum(1) / m.sum(1).clamp(min=1.0)
            return self.visual_in(pooled)
        return side_bow

    def encode(self, h_d, h_s=None):
        mu_d, ls_d = self.doc_prior(h_d)
        if h_s is None or self.side_prior is None:
            return (mu_d, ls_d), None
        return (mu_d, ls_d), self.side_prior(h_s)

    def forward(self, h_d, h_s=None, has_side=None, eps_d=None, eps_s=None):
        """Return a dict with ``theta``, ``log_pred`` (log summary-BoW distribution) and the latent stats."""
        (mu_d, ls_d), side = self.encode(h_d, h_s)
        z_d = sample_latent(mu_d, ls_d, eps_d)
        z_s = torch.zeros_like(z_d)
        out = {"mu_d": mu_d, "log_sigma_d": ls_d, "z_d": z_d}
        if side is not None:
            mu_s, ls_s = side
            present = has_side.to(z_d.dtype).unsqueeze(-1) if has_side is not None else 1.0
            z_s = sample_latent(mu_s, ls_s, eps_s) * present
            out.update(mu_s=mu_s, log_sigma_s=ls_s, z_s=z_s)
        theta = mix_topics(z_d, z_s)
        out["theta"] = theta
        out["log_pred"] = torch.log_softmax(theta @ self.w_phi, dim=-1)
        return out

    def loss(self, out: dict, y_bow: torch.Tensor, has_side=None) -> torch.Tensor:
        """Batch mean of the two Wasserstein terms minus the summary-BoW log-likelihood.

        With ``normalize_bow`` the summary counts are scaled to sum to one, making the
        reconstruction a per-word cross-entropy.  The per-document Wasserstein terms
        then outweigh it and the latents tend to collapse onto the prior, so a
        standalone topic model is better fitted with ``normalize_bow=False``, which
        sums log-probabilities over the raw counts.
        """
        reg = wasserstein_gaussian(out["mu_d"], out["log_sigma_d"])
        if "mu_s" in out:
            w_s = wasserstein_gaussian(out["mu_s"], out["log_sigma_s"])
            if has_side is not None:
                w_s = w_s * has_side.to(w_s.dtype)
            reg = reg + w_s
        target = y_bow / y_bow.sum(-1, keepdim=True).clamp(min=1e-12) if self.normalize_bow else y_bow
        recon = -(target * out["log_pred"]).sum(-1)
        return (reg + recon).mean()

    def topic_embeddings(self) -> torch.Tensor:
        return self.f_phi(self.w_phi)


def utm_loss(model: UnifiedTopicModel, h_d, h_s, y_bow, has_side=None, eps_d=None, eps_s=None):
    out = model(h_d, h_s, has_side, eps_d, eps_s)
    return model.loss(out, y_bow, has_side)


def top_word_ids(w_phi, k: int) -> list[list[int]]:
    """Per topic, the ``k`` word ids with the largest weight; ties go to the lower id."""
    w = np.asarray(w_phi.detach().cpu() if torch.is_tensor(w_phi) else w_phi, dtype=np.float64)
    if k > w.shape[1]:
        raise ValueError("k exceeds the topic vocabulary size")
    # stable sort on the negated row keeps lower ids first among equal weights
    return [list(np.argsort(-row, kind="stable")[:k]) for row in w]


def top_words(w_phi, vocab_t, k: int) -> list[list[str]]:
    return [[vocab_t.itos[j] for j in ids] for ids in top_word_ids(w_phi, k)]


def topic_coherence_npmi(topics: Sequence[Sequence[str]], corpus: Sequence[Sequence[str]]) -> float:
    """Mean pairwise NPMI of topic words with document-level co-occurrence.

    Probabilities are Laplace-smoothed document frequencies, ``(df + 1) / (N + 2)``,
    for single words and word pairs alike, so every estimate lies strictly in (0, 1).
    """
    words = sorted({w for topic in topics for w in topic})
    index = {w: i for i, w in enumerate(words)}
    n_docs = len(corpus)
    presence = np.zeros((n_docs, len(words)), dtype=np.float64)
    for d, doc in enumerate(corpus):
        for tok in set(doc):
            j = index.get(tok)
            if j is not None:
                presence[d, j] = 1.0
    df = presence.sum(0)
    co = presence.T @ presence
    denom = n_docs + 2.0
    p = (df + 1.0) / denom
    scores = []
    for topic in topics:
        ids = [index[w] for w in topic]
        for a in range(len(ids)):
            for b in range(a + 1, len(ids)):
                i, j = ids[a], ids[b]
                p_ij = (co[i, j] + 1.0) / denom
                pmi = math.log(p_ij / (p[i] * p[j]))
                scores.append(pmi / -math.log(p_ij))
    return float(np.mean(scores)) if scores else 0.0
