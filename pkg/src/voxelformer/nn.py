"""Parameter containers and transformer building blocks."""

from __future__ import annotations

from collections.abc import Iterator
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, ShapeError

INIT_STD = 0.02


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


class Module:
    """Minimal parameter container.

    Parameters are ``requires_grad`` tensors stored as attributes; child
    modules may be attributes or lists of modules.  Names follow attribute
    insertion order, so they are stable across runs.
    """

    training = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator[Module]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def train(self, mode: bool = True) -> Module:
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> Module:
        return self.train(False)

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


class Linear(Module):
    """``y = x @ weight + bias`` with ``weight`` stored as [in, out]."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True, zero: bool = False,
                 std: float = INIT_STD):
        self.weight = parameter(np.zeros((d_in, d_out)) if zero else rng.normal(0.0, std, size=(d_in, d_out)))
        self.bias = parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = ag.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gain = parameter(np.ones(dim))
        self.bias = parameter(np.zeros(dim))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ag.layernorm(x, self.gain, self.bias, self.eps)


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    if not training or p <= 0.0 or rng is None:
        return x
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return x * mask


@dataclass
class AttentionOutput:
    """Block output plus the exact post-softmax attention used to produce it."""

    latents: Tensor
    attention: Tensor  # [B, H, Nq, Nk]
    keys: np.ndarray | None = None  # [B, Nk, C], detached

    def head_averaged(self) -> np.ndarray:
        return self.attention.data.mean(axis=1)


class AttentionBlock(Module):
    """Pre-norm multi-head attention with a residual connection.

    With ``cross=True`` the keys and values come from a separately normalized
    context sequence.
    """

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, cross: bool = False,
                 zero_init_out: bool = True, dropout: float = 0.0):
        if heads < 1 or dim % heads:
            raise ConfigError(f"model dim {dim} is not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        self.cross = cross
        self.p_drop = dropout
        self.norm = LayerNorm(dim)
        if cross:
            self.norm_ctx = LayerNorm(dim)
        self.q = Linear(dim, dim, rng)
        # no key bias: softmax over keys is invariant to it, so its gradient is identically zero
        self.k = Linear(dim, dim, rng, bias=False)
        self.v = Linear(dim, dim, rng)
        self.out = Linear(dim, dim, rng, zero=zero_init_out)
        self.rng: np.random.Generator | None = None

    def _split(self, x: Tensor) -> Tensor:
        b, n, _ = x.shape
        return x.reshape(b, n, self.heads, self.dim // self.heads).transpose(0, 2, 1, 3)

    def __call__(self, x: Tensor, context: Tensor | None = None) -> AttentionOutput:
        if x.ndim != 3 or x.shape[-1] != self.dim:
            raise ShapeError(f"attention block of dim {self.dim} got input {x.shape}")
        h = self.norm(x)
        if self.cross:
            if context is None:
                raise ShapeError("cross-attention block needs a context")
            if context.ndim != 3 or context.shape[-1] != self.dim or context.shape[0] != x.shape[0]:
                raise ShapeError(f"cross-attention: queries {x.shape} vs context {context.shape}")
            kv = self.norm_ctx(context)
        else:
            kv = h
        q, k, v = self._split(self.q(h)), self._split(self.k(kv)), self._split(self.v(kv))
        scale = 1.0 / np.sqrt(self.dim // self.heads)
        attn = ag.softmax(ag.matmul(q, ag.swapaxes(k, -1, -2)) * scale, axis=-1)
        mixed = ag.matmul(attn, v).transpose(0, 2, 1, 3)
        b, n = x.shape[0], x.shape[1]
        branch = self.out(mixed.reshape(b, n, self.dim))
        branch = dropout(branch, self.p_drop, self.rng, self.training)
        keys = k.data.transpose(0, 2, 1, 3).reshape(b, kv.shape[1], self.dim)
        return AttentionOutput(x + branch, attn, keys)


class FeedForward(Module):
    """Pre-norm residual MLP with GELU."""

    def __init__(self, dim: int, rng: np.random.Generator, hidden_mult: int = 4, zero_init_out: bool = True,
                 dropout: float = 0.0):
        if hidden_mult < 1:
            raise ConfigError(f"hidden_mult must be >= 1, got {hidden_mult}")
        self.norm = LayerNorm(dim)
        self.up = Linear(dim, dim * hidden_mult, rng)
        self.down = Linear(dim * hidden_mult, dim, rng, zero=zero_init_out)
        self.p_drop = dropout
        self.rng: np.random.Generator | None = None

    def __call__(self, x: Tensor) -> Tensor:
        branch = self.down(ag.gelu(self.up(self.norm(x))))
        return x + dropout(branch, self.p_drop, self.rng, self.training)


def self_attention(x: Tensor, block: AttentionBlock) -> AttentionOutput:
    return block(x)


def cross_attention(queries: Tensor, context: Tensor, block: AttentionBlock) -> Tensor:
    return block(queries, context).latents


def ffn(x: Tensor, block: FeedForward) -> Tensor:
    return block(x)
