"""Batching and the end-to-end side-aware summarizer."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from .config import Config
from .contrastive import masked_mean, pool_representations, sample_negatives
from .corpus import BOS, EOS, PAD, Sample, bow_from_ids
from .decoder import AttentionTrace, Decoder, Hypothesis, _extend, _mask_logprobs, beam_search
from .graph_encoder import GraphEncoder, NodeStates, TokenEncoder, init_nodes
from .numerics import Linear, init_uniform_
from .utm import UnifiedTopicModel

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass
class Batch:
    ids: list[str]
    doc_ids: torch.Tensor  # [B, Nd]
    doc_mask: torch.Tensor
    side: torch.Tensor | None  # [B, Ns] ids or [B, Ns, Dv] features
    side_mask: torch.Tensor
    has_side: torch.Tensor  # [B]
    doc_bow: torch.Tensor  # [B, Vt]
    side_bow: torch.Tensor | None
    sum_bow: torch.Tensor
    dec_in: torch.Tensor  # [B, T] BOS + summary
    dec_out: torch.Tensor  # [B, T] summary + EOS
    dec_mask: torch.Tensor
    sum_len: torch.Tensor  # [B] = len(summary) + 1

    def __len__(self) -> int:
        return len(self.ids)


def _pad(seqs: Sequence[Sequence[int]], width: int | None = None) -> tuple[torch.Tensor, torch.Tensor]:
    width = max((len(s) for s in seqs), default=0) if width is None else width
    ids = torch.full((len(seqs), width), PAD, dtype=torch.long)
    mask = torch.zeros((len(seqs), width), dtype=torch.bool)
    for i, s in enumerate(seqs):
        ids[i, :len(s)] = torch.as_tensor(list(s), dtype=torch.long)
        mask[i, :len(s)] = True
    return ids, mask


class Collator:
    """Turns samples into padded tensors for a given side kind and topic vocabulary map."""

    def __init__(self, topic_index: np.ndarray, topic_vocab_size: int, side_kind: str = "text",
                 visual_dim: int = 64, dtype: torch.dtype = torch.float32):
        self.topic_index = topic_index
        self.vt = topic_vocab_size
        self.side_kind = side_kind
        self.visual_dim = visual_dim
        self.dtype = dtype

    def bow(self, ids) -> np.ndarray:
        return bow_from_ids(ids, self.topic_index, self.vt)

    def __call__(self, samples: Sequence[Sample], mask_side: bool = False) -> Batch:
        B = len(samples)
        doc_ids, doc_mask = _pad([s.document for s in samples])
        has_side = torch.tensor([s.has_side and not mask_side for s in samples], dtype=torch.bool)
        side = side_bow = None
        side_mask = torch.zeros((B, 0), dtype=torch.bool)
        if self.side_kind == "text":
            seqs = [s.side_tokens if (s.side_tokens and not mask_side) else [] for s in samples]
            side, side_mask = _pad(seqs)
            side_bow = torch.tensor(np.stack([self.bow(q) for q in seqs]), dtype=self.dtype)
        elif self.side_kind == "visual":
            width = max((len(s.side_visual) for s in samples if s.side_visual is not None and not mask_side),
                        default=0)
            side = torch.zeros((B, width, self.visual_dim), dtype=self.dtype)
            side_mask = torch.zeros((B, width), dtype=torch.bool)
            if not mask_side:
                for i, s in enumerate(samples):
                    if s.side_visual is not None and len(s.side_visual):
                        n = len(s.side_visual)
                        side[i, :n] = torch.as_tensor(s.side_visual, dtype=self.dtype)
                        side_mask[i, :n] = True
        dec_in, dec_mask = _pad([[BOS] + list(s.summary) for s in samples])
        dec_out, _ = _pad([list(s.summary) + [EOS] for s in samples])
        return Batch(
            ids=[s.id for s in samples],
            doc_ids=doc_ids,
            doc_mask=doc_mask,
            side=side,
            side_mask=side_mask,
            has_side=has_side,
            doc_bow=torch.tensor(np.stack([self.bow(s.document) for s in samples]), dtype=self.dtype),
            side_bow=side_bow,
            sum_bow=torch.tensor(np.stack([self.bow(s.summary) for s in samples]), dtype=self.dtype),
            dec_in=dec_in,
            dec_out=dec_out,
            dec_mask=dec_mask,
            sum_len=dec_mask.sum(1),
        )


class SideSummarizer(nn.Module):
    """Topic model, token encoder, graph encoder and decoder sharing one token embedding table."""

    def __init__(self, cfg: Config, vocab_size: int, topic_vocab_size: int):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        d = cfg.d_model
        self.embed = nn.Embedding(vocab_size, d)
        self.token_encoder = TokenEncoder(self.embed, cfg.max_positions, d, cfg.heads, cfg.d_ff,
                                          cfg.encoder_layers, cfg.dropout, cfg.scaled_logits)
        self.visual_proj = Linear(cfg.visual_dim, d, dropout=cfg.dropout) if cfg.side_kind == "visual" else None
        self.utm = UnifiedTopicModel(topic_vocab_size, cfg.topics, cfg.utm_hidden, d, cfg.side_kind,
                                     cfg.visual_dim, cfg.dropout, cfg.normalize_bow)
        self.register_buffer("fixed_topics", torch.empty(cfg.topics, d))
        self.graph = GraphEncoder(cfg.graph_layers, d, cfg.heads, cfg.d_ff, cfg.scalar_ffn_hidden,
                                  cfg.dropout, cfg.scaled_logits)
        self.decoder = Decoder(self.embed, vocab_size, cfg.max_positions, d, cfg.heads, cfg.d_ff,
                               cfg.decoder_layers, cfg.scalar_ffn_hidden, cfg.dropout, cfg.scaled_logits,
                               cfg.normalize_guided_attention)
        gen = torch.Generator().manual_seed(cfg.seed)
        init_uniform_(self, cfg.init_range, gen)
        with torch.no_grad():
            self.fixed_topics.uniform_(-1.0, 1.0, generator=gen)
            # distinct topic rows from the start, so topic nodes differ before the topic model trains
            self.utm.w_phi.uniform_(-cfg.topic_init_range, cfg.topic_init_range, generator=gen)
        self.to(_DTYPES[cfg.dtype])

    @property
    def dtype(self) -> torch.dtype:
        return self.embed.weight.dtype

    def collator(self, topic_index: np.ndarray) -> Collator:
        return Collator(topic_index, self.utm.vocab_t, self.cfg.side_kind, self.cfg.visual_dim, self.dtype)

    # ------------------------------------------------------------------ encoder side

    def topic_nodes(self) -> torch.Tensor:
        return self.fixed_topics if self.cfg.no_utm else self.utm.topic_embeddings()

    def run_utm(self, batch: Batch, generator: torch.Generator | None = None) -> dict:
        h_d = torch.log1p(batch.doc_bow)
        h_s = None
        if self.cfg.side_kind == "text":
            h_s = torch.log1p(batch.side_bow)
        elif batch.side is not None and batch.side.shape[1] > 0:
            h_s = self.utm.side_input(side_visual=batch.side, side_mask=batch.side_mask)
        eps_d = eps_s = None
        if generator is not None:
            shape = (len(batch), self.cfg.topics)
            eps_d = torch.randn(shape, generator=generator, dtype=self.dtype)
            eps_s = torch.randn(shape, generator=generator, dtype=self.dtype)
        return self.utm(h_d, h_s, batch.has_side, eps_d, eps_s)

    def init_nodes(self, batch: Batch) -> NodeStates:
        return init_nodes(batch.doc_ids, batch.doc_mask, batch.side, batch.side_mask, self.topic_nodes(),
                          self.token_encoder, self.visual_proj)

    def encode(self, batch: Batch) -> tuple[NodeStates, NodeStates]:
        """Initial and final node states; ``no_graph`` passes the initial states straight through."""
        nodes = self.init_nodes(batch)
        return nodes, nodes if self.cfg.no_graph else self.graph(nodes)

    # ------------------------------------------------------------------ training forward

    def forward(self, batch: Batch, generator: torch.Generator | None = None,
                neg_rng: np.random.Generator | None = None) -> dict:
        out = {}
        if not self.cfg.no_utm:
            out["utm"] = self.run_utm(batch, generator)
        init, enc = self.encode(batch)
        logits, states, weights = self.decoder(batch.dec_in, enc)
        out.update(logits=logits, states=states, weights=weights, enc=enc)
        if not self.cfg.no_contrastive and len(batch) >= 2:
            D, S, G = pool_representations(enc.doc, enc.doc_mask, enc.side, enc.side_mask, states, batch.sum_len)
            rng = neg_rng if neg_rng is not None else np.random.default_rng(0)
            neg = sample_negatives(len(batch), rng)
            if self.cfg.negatives > 1:  # pool [B, n]
                neg = np.stack([neg] + [sample_negatives(len(batch), rng) for _ in range(self.cfg.negatives - 1)], 1)
            neg_t = torch.as_tensor(neg, dtype=torch.long)
            out["triplet"] = {
                "D": D, "S": S, "G": G,
                "D_neg": masked_mean(init.doc, init.doc_mask)[neg_t],
                "S_neg": masked_mean(init.side, init.side_mask)[neg_t],
                "G_neg": G[neg_t],
                "neg": neg,
            }
        return out

    # ------------------------------------------------------------------ inference

    def encode_sample(self, sample: Sample, collate: Collator, mask_side: bool = False) -> NodeStates:
        return self.encode(collate([sample], mask_side=mask_side))[1]

    def step_fn(self, enc: NodeStates):
        def step(prefixes: torch.Tensor) -> torch.Tensor:
            n = prefixes.shape[0]
            expanded = NodeStates(*(t.expand(n, *t.shape[1:]) for t in
                                    (enc.doc, enc.doc_mask, enc.side, enc.side_mask, enc.topics)))
            logits, _, _ = self.decoder(prefixes, expanded)
            return torch.log_softmax(logits[:, -1].double(), dim=-1)
        return step

    @torch.no_grad()
    def generate(self, sample: Sample, collate: Collator, beam=5, alpha=0.8, min_len=1, max_len=32,
                 mask_side: bool = False) -> list[int]:
        enc = self.encode_sample(sample, collate, mask_side)
        return beam_search(self.step_fn(enc), beam, alpha, min_len, max_len)

    @torch.no_grad()
    def greedy_batch(self, samples: Sequence[Sample], collate: Collator, min_len=1, max_len=32,
                     mask_side: bool = False) -> list[list[int]]:
        """Batched greedy decoding; matches :func:`greedy_decode` sample by sample."""
        batch = collate(samples, mask_side=mask_side)
        _, enc = self.encode(batch)
        hyps = [Hypothesis([BOS]) for _ in samples]
        for _ in range(max_len):
            live = [i for i, h in enumerate(hyps) if not h.finished]
            if not live:
                break
            idx = torch.as_tensor(live, dtype=torch.long)
            sub = NodeStates(enc.doc[idx], enc.doc_mask[idx], enc.side[idx], enc.side_mask[idx], enc.topics[idx])
            prefixes = torch.tensor([hyps[i].tokens for i in live], dtype=torch.long)
            logits, _, _ = self.decoder(prefixes, sub)
            logp = torch.log_softmax(logits[:, -1].double(), dim=-1)
            logp = _mask_logprobs(logp, [hyps[i] for i in live], min_len)
            for row, i in enumerate(live):
                token = int(torch.argmax(logp[row]))
                if logp[row, token] == -math.inf:
                    hyps[i] = Hypothesis(hyps[i].tokens, hyps[i].score, True, hyps[i].trigrams)
                    continue
                hyps[i] = _extend(hyps[i], token, logp[row, token].item())
        return [h.output() for h in hyps]

    @torch.no_grad()
    def attention_trace(self, sample: Sample, tokens: Sequence[int], collate: Collator,
                        mask_side: bool = False) -> AttentionTrace:
        """Final-layer routing weights while teacher-forcing ``tokens``."""
        enc = self.encode_sample(sample, collate, mask_side)
        prefix = torch.tensor([[BOS] + list(tokens)], dtype=torch.long)
        _, _, (z_o, z_d, z_s) = self.decoder(prefix, enc)
        return AttentionTrace(z_o[0], z_d[0], z_s[0])
