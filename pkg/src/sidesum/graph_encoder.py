"""Topic-aware graph encoder over document, side and topic nodes."""

from __future__ import annotations

from dataclasses import dataclass, replace

import torch
import torch.nn as nn

from .numerics import FeedForward, LayerNorm, MultiHeadAttention, ScalarFFN, TransformerLayer, masked_softmax


@dataclass
class NodeStates:
    """Batched node states; masks are True on real (non-padding) rows.

    A sample without side information has an all-False ``side_mask`` row, and
    every interaction skips its side nodes.
    """

    doc: torch.Tensor  # [B, Nd, d]
    doc_mask: torch.Tensor  # [B, Nd]
    side: torch.Tensor  # [B, Ns, d]
    side_mask: torch.Tensor  # [B, Ns]
    topics: torch.Tensor  # [B, K, d]

    def replace(self, **kw) -> "NodeStates":
        return replace(self, **kw)

    @property
    def has_side(self) -> bool:
        return self.side.shape[1] > 0 and bool(self.side_mask.any())


class TokenEncoder(nn.Module):
    """Token embeddings plus learned positions, followed by a stack of transformer layers."""

    def __init__(self, embed: nn.Embedding, max_positions: int, d_model: int, heads: int, d_ff: int,
                 layers: int, dropout: float = 0.0, scaled_logits: bool = False):
        super().__init__()
        self.embed = embed
        self.pos = nn.Embedding(max_positions, d_model)
        self.channel = nn.Embedding(2, d_model)
        self.layers = nn.ModuleList(
            TransformerLayer(d_model, heads, d_ff, dropout, scaled_logits) for _ in range(layers)
        )

    def forward(self, ids, mask, channel: int = 0):
        N = ids.shape[1]
        x = self.embed(ids) + self.pos.weight[:N] + self.channel.weight[channel]
        for layer in self.layers:
            x = layer(x, mask)
        return x


def init_nodes(doc_ids, doc_mask, side, side_mask, topics, token_encoder: TokenEncoder, visual_proj=None):
    """Build initial node states.

    ``side`` holds token ids [B, Ns] for textual sides or feature vectors
    [B, Ns, Dv] for visual ones; ``topics`` is the [K, d] topic-embedding matrix.
    """
    if doc_ids.shape[1] == 0 or not bool(doc_mask.any(dim=1).all()):
        raise ValueError("empty document")
    doc = token_encoder(doc_ids, doc_mask, channel=0)
    B, d = doc.shape[0], doc.shape[-1]
    if side is None or side.shape[1] == 0:
        side_states = doc.new_zeros(B, 0, d)
        side_mask = doc_mask.new_zeros(B, 0)
    elif side.dtype in (torch.long, torch.int64, torch.int32):
        side_states = token_encoder(side, side_mask, channel=1)
    else:
        side_states = visual_proj(side) + token_encoder.channel.weight[1]
    topic_states = topics.unsqueeze(0).expand(B, -1, -1)
    return NodeStates(doc, doc_mask, side_states, side_mask, topic_states)


class TopicGuidedAttention(nn.Module):
    """Position weights conditioned on the summed topic vector, applied to self-attended states.

    ``beta = softmax_i(FFN(states_i . sum_k topics_k))`` and the output row ``i`` is
    ``beta_i * attended_i``.
    """

    def __init__(self, hidden: int):
        super().__init__()
        self.score = ScalarFFN(hidden)
        self.last_beta: torch.Tensor | None = None

    def forward(self, states, attended, topics, mask):
        h_o = topics.sum(dim=1)  # [B, d]
        scores = self.score(torch.einsum("bnd,bd->bn", states, h_o))
        beta = masked_softmax(scores, mask)
        self.last_beta = beta.detach()
        return beta.unsqueeze(-1) * attended


class ThreeSourceUpdate(nn.Module):
    """Self-attention, topic cross-attention and topic-guided attention fused by one FFN."""

    def __init__(self, d_model, heads, d_ff, scalar_hidden, dropout=0.0, scaled_logits=False):
        super().__init__()
        self.self_attn = MultiHeadAttention(d_model, heads, dropout, scaled_logits)
        self.cross_attn = MultiHeadAttention(d_model, heads, dropout, scaled_logits)
        self.guided = TopicGuidedAttention(scalar_hidden)
        self.fuse = FeedForward(3 * d_model, d_ff, d_model, dropout)
        self.ln = LayerNorm(d_model)

    def forward(self, states, mask, topics):
        attended = self.self_attn(states, states, key_mask=mask)
        cross = self.cross_attn(states, topics)
        guided = self.guided(states, attended, topics, mask)
        return self.ln(states + self.fuse(torch.cat([attended, cross, guided], dim=-1)))


class TopicUpdate(nn.Module):
    def __init__(self, d_model, heads, d_ff, dropout=0.0, scaled_logits=False):
        super().__init__()
        self.self_attn = MultiHeadAttention(d_model, heads, dropout, scaled_logits)
        self.cross_attn = MultiHeadAttention(d_model, heads, dropout, scaled_logits)
        self.fuse = FeedForward(2 * d_model, d_ff, d_model, dropout)
        self.ln = LayerNorm(d_model)

    def forward(self, nodes: NodeStates):
        topics = nodes.topics
        own = self.self_attn(topics, topics)
        kv = torch.cat([nodes.doc, nodes.side], dim=1)
        kv_mask = torch.cat([nodes.doc_mask, nodes.side_mask], dim=1)
        cross = self.cross_attn(topics, kv, key_mask=kv_mask)
        return self.ln(topics + self.fuse(torch.cat([own, cross], dim=-1)))


class DirectInteraction(nn.Module):
    def __init__(self, d_model, heads, dropout=0.0, scaled_logits=False):
        super().__init__()
        self.attn = MultiHeadAttention(d_model, heads, dropout, scaled_logits)
        self.ln = LayerNorm(d_model)

    def forward(self, nodes: NodeStates):
        n_d = nodes.doc.shape[1]
        x = torch.cat([nodes.doc, nodes.side], dim=1)
        mask = torch.cat([nodes.doc_mask, nodes.side_mask], dim=1)
        y = self.ln(x + self.attn(x, x, key_mask=mask))
        return y[:, :n_d], y[:, n_d:]


class GraphLayer(nn.Module):
    """One round: topic-guided interaction, topic update, direct interaction."""

    def __init__(self, d_model, heads, d_ff, scalar_hidden, dropout=0.0, scaled_logits=False):
        super().__init__()
        self.doc_update = ThreeSourceUpdate(d_model, heads, d_ff, scalar_hidden, dropout, scaled_logits)
        self.side_update = ThreeSourceUpdate(d_model, heads, d_ff, scalar_hidden, dropout, scaled_logits)
        self.topic_update = TopicUpdate(d_model, heads, d_ff, dropout, scaled_logits)
        self.direct = DirectInteraction(d_model, heads, dropout, scaled_logits)

    def topic_guided_interaction(self, nodes: NodeStates):
        doc = self.doc_update(nodes.doc, nodes.doc_mask, nodes.topics)
        if nodes.side.shape[1] == 0:
            return doc, nodes.side
        side = self.side_update(nodes.side, nodes.side_mask, nodes.topics)
        return doc, side

    def forward(self, nodes: NodeStates) -> NodeStates:
        doc, side = self.topic_guided_interaction(nodes)
        nodes = nodes.replace(doc=doc, side=side)
        nodes = nodes.replace(topics=self.topic_update(nodes))
        doc, side = self.direct(nodes)
        return nodes.replace(doc=doc, side=side)


class GraphEncoder(nn.Module):
    def __init__(self, layers, d_model, heads, d_ff, scalar_hidden, dropout=0.0, scaled_logits=False):
        super().__init__()
        self.layers = nn.ModuleList(
            GraphLayer(d_model, heads, d_ff, scalar_hidden, dropout, scaled_logits) for _ in range(layers)
        )

    def forward(self, nodes: NodeStates) -> NodeStates:
        for layer in self.layers:
            nodes = layer(nodes)
        return nodes
