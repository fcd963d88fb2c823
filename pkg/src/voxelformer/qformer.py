"""Query-based distillation of a variable-length token set into Q fixed tokens."""

from __future__ import annotations

import numpy as np

from .autograd import Tensor
from .errors import ContractError, ShapeError
from .nn import INIT_STD, AttentionBlock, FeedForward, Module, parameter
from .tomer import TokenSet


class QFormerLayer(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator, hidden_mult: int = 4,
                 dropout: float = 0.0, zero_init_out: bool = True):
        self.cross = AttentionBlock(dim, heads, rng, cross=True, zero_init_out=zero_init_out, dropout=dropout)
        self.attn = AttentionBlock(dim, heads, rng, zero_init_out=zero_init_out, dropout=dropout)
        self.ffn = FeedForward(dim, rng, hidden_mult, zero_init_out=zero_init_out, dropout=dropout)

    def __call__(self, queries: Tensor, context: Tensor) -> Tensor:
        x = self.cross(queries, context).latents
        x = self.attn(x).latents
        return self.ffn(x)


class QFormer(Module):
    """A shared bank of learnable queries refined against the encoder tokens.

    The output is [B, Q, C] for any context length; no parameter depends on
    the subject.
    """

    def __init__(self, dim: int, heads: int, num_queries: int, layers: int, rng: np.random.Generator,
                 hidden_mult: int = 4, dropout: float = 0.0, zero_init_out: bool = True):
        if num_queries < 1:
            raise ContractError(f"need at least one query, got {num_queries}")
        self.dim = dim
        self.queries = parameter(rng.normal(0.0, INIT_STD, size=(num_queries, dim)))
        self.layers = [QFormerLayer(dim, heads, rng, hidden_mult, dropout, zero_init_out) for _ in range(layers)]

    def __call__(self, context) -> Tensor:
        tokens = context.tokens if isinstance(context, TokenSet) else context
        if tokens.ndim != 3 or tokens.shape[1] < 1:
            raise ShapeError(f"context must be [B, n>=1, C], got {tokens.shape}")
        if tokens.shape[-1] != self.dim:
            raise ShapeError(f"context dim {tokens.shape[-1]} does not match query dim {self.dim}")
        x = self.queries + Tensor(np.zeros((tokens.shape[0], 1, 1)))
        for layer in self.layers:
            x = layer(x, tokens)
        return x


def distill(context, qformer: QFormer) -> Tensor:
    return qformer(context)
