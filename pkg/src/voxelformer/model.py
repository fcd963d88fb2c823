"""The full ToMer -> Q-Former -> (prior, projector) network."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .autograd import Tensor
from .errors import ConfigError
from .heads import PriorHead, ProjectorHead
from .nn import AttentionBlock, FeedForward, Module
from .qformer import QFormer
from .tomer import MergePlan, ToMerEncoder


@dataclass
class ModelConfig:
    dim: int = 64
    heads: int = 4
    layers: int = 2  # ToMer stages (L)
    merge: int = 4  # pairs merged per stage (M)
    queries: int = 16
    qformer_layers: int = 2
    prior_layers: int = 2
    retrieval_dim: int = 64
    target_tokens: int = 1
    target_dim: int = 64
    hidden_mult: int = 4
    projector_hidden: int = 256
    pe: str = "siren"
    pe_hidden: int = 64
    omega0: float = 30.0
    pe_trainable: bool = True
    merge_metric: str = "attention"
    dropout: float = 0.0

    def validate(self) -> None:
        for name in ("dim", "heads", "queries", "retrieval_dim", "target_tokens", "target_dim", "hidden_mult",
                     "projector_hidden", "pe_hidden"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("layers", "merge", "qformer_layers", "prior_layers"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative, got {getattr(self, name)}")
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")

    @property
    def target_size(self) -> int:
        return self.target_tokens * self.target_dim

    def min_voxels(self) -> int:
        """Smallest N for which N - M*L >= 2M holds."""
        return self.merge * (self.layers + 2)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ModelOutput:
    prior: Tensor  # [B, T_t * D_t]
    embedding: Tensor  # [B, D_r], unit rows
    queries: Tensor  # [B, Q, C]
    plans: list[list[MergePlan]]
    counts: list[int]


class VoxelFormer(Module):
    def __init__(self, config: ModelConfig, rng: np.random.Generator, zero_init_out: bool = True):
        config.validate()
        self.config = config
        c = config
        self.encoder = ToMerEncoder(c.dim, c.heads, c.layers, c.merge, rng, pe=c.pe, pe_hidden=c.pe_hidden,
                                    omega0=c.omega0, pe_trainable=c.pe_trainable, metric=c.merge_metric,
                                    hidden_mult=c.hidden_mult, dropout=c.dropout, zero_init_out=zero_init_out)
        self.qformer = QFormer(c.dim, c.heads, c.queries, c.qformer_layers, rng, c.hidden_mult, c.dropout,
                               zero_init_out)
        self.prior = PriorHead(c.dim, c.heads, c.queries, c.prior_layers, c.target_size, rng, c.hidden_mult,
                               c.dropout, zero_init_out)
        self.projector = ProjectorHead(c.dim, c.queries, c.projector_hidden, c.retrieval_dim, rng)

    def set_dropout_rng(self, rng: np.random.Generator | None) -> None:
        for m in self.modules():
            if isinstance(m, (AttentionBlock, FeedForward)):
                m.rng = rng

    def __call__(self, responses, coords, plans=None) -> ModelOutput:
        enc = self.encoder(responses, coords, plans)
        q_out = self.qformer(enc.tokens)
        return ModelOutput(self.prior(q_out), self.projector(q_out), q_out, enc.plans, enc.counts)


def build_model(config: ModelConfig, seed: int = 0, zero_init_out: bool = True) -> VoxelFormer:
    return VoxelFormer(config, np.random.default_rng(seed), zero_init_out)
