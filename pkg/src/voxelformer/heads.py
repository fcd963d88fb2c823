"""The two decoding heads: prior regression and contrastive projector."""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ShapeError
from .nn import AttentionBlock, FeedForward, Linear, Module


def _flatten(q_out: Tensor, num_queries: int, dim: int) -> Tensor:
    if q_out.ndim != 3 or q_out.shape[1:] != (num_queries, dim):
        raise ShapeError(f"head expects [B, {num_queries}, {dim}], got {q_out.shape}")
    return q_out.reshape(q_out.shape[0], num_queries * dim)


class PriorHead(Module):
    """Transformer layers over the query tokens, then a zero-initialized linear read-out."""

    def __init__(self, dim: int, heads: int, num_queries: int, layers: int, target_size: int,
                 rng: np.random.Generator, hidden_mult: int = 4, dropout: float = 0.0, zero_init_out: bool = True):
        self.dim = dim
        self.num_queries = num_queries
        self.attn = [AttentionBlock(dim, heads, rng, zero_init_out=zero_init_out, dropout=dropout)
                     for _ in range(layers)]
        self.ffn = [FeedForward(dim, rng, hidden_mult, zero_init_out=zero_init_out, dropout=dropout)
                    for _ in range(layers)]
        self.readout = Linear(num_queries * dim, target_size, rng, zero=zero_init_out)

    def __call__(self, q_out: Tensor) -> Tensor:
        _flatten(q_out, self.num_queries, self.dim)
        x = q_out
        for attn_block, ffn_block in zip(self.attn, self.ffn):
            x = ffn_block(attn_block(x).latents)
        return self.readout(_flatten(x, self.num_queries, self.dim))


class ProjectorHead(Module):
    """linear -> GELU -> linear, then L2 normalization of each row."""

    def __init__(self, dim: int, num_queries: int, hidden: int, out_dim: int, rng: np.random.Generator):
        self.dim = dim
        self.num_queries = num_queries
        d_in = num_queries * dim
        self.up = Linear(d_in, hidden, rng, std=1.0 / np.sqrt(d_in))
        self.down = Linear(hidden, out_dim, rng, std=1.0 / np.sqrt(hidden))

    def __call__(self, q_out: Tensor) -> Tensor:
        x = _flatten(q_out, self.num_queries, self.dim)
        return ag.l2_normalize(self.down(ag.gelu(self.up(x))), axis=-1, eps=1e-12)


def prior_forward(q_out: Tensor, head: PriorHead) -> Tensor:
    return head(q_out)


def projector_forward(q_out: Tensor, head: ProjectorHead) -> Tensor:
    return head(q_out)
