"""Token Merging Transformer (ToMer) encoder.

Voxels become tokens through a shared scalar-to-C linear map plus a
coordinate positional embedding.  Each of the L stages runs self-attention,
merges the M most mutually-attending token pairs, then applies a
feed-forward block, so N voxels leave the encoder as N - M*L tokens.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, ContractError, ShapeError
from .nn import AttentionBlock, FeedForward, Linear, Module


@dataclass
class TokenSet:
    tokens: Tensor  # [B, n, C]
    sizes: np.ndarray  # [B, n], voxels absorbed per token

    @property
    def n(self) -> int:
        return self.tokens.shape[1]


@dataclass(frozen=True)
class MergePlan:
    """A matching of M (source, destination) token pairs for one sample.

    Pairs are ordered by descending score; sources are removed and folded into
    their destinations.
    """

    pairs: tuple[tuple[int, int], ...] = ()
    scores: tuple[float, ...] = ()

    @property
    def m(self) -> int:
        return len(self.pairs)


# -- positional embedding ---------------------------------------------------


class CoordinatePE(Module):
    """Sine-activated coordinate MLP: 3 -> hidden -> C, first layer scaled by ``omega0``."""

    def __init__(self, dim: int, rng: np.random.Generator, hidden: int = 64, omega0: float = 30.0,
                 trainable: bool = True):
        self.omega0 = float(omega0)
        self.first = Linear(3, hidden, rng)
        self.first.weight.data[:] = rng.uniform(-1.0 / 3, 1.0 / 3, size=(3, hidden))
        self.first.bias.data[:] = rng.uniform(-1.0 / 3, 1.0 / 3, size=hidden)
        bound = np.sqrt(6.0 / hidden) / self.omega0
        self.second = Linear(hidden, dim, rng)
        self.second.weight.data[:] = rng.uniform(-bound, bound, size=(hidden, dim))
        if not trainable:
            for p in (self.first.weight, self.first.bias, self.second.weight, self.second.bias):
                p.requires_grad = False

    def hidden_activations(self, coords) -> Tensor:
        return ag.sin(self.first(ag.as_tensor(coords)) * self.omega0)

    def __call__(self, coords) -> Tensor:
        return self.second(self.hidden_activations(coords))


class FixedSinusoidalPE(Module):
    """Non-trainable sin/cos features of each coordinate axis at octave frequencies."""

    def __init__(self, dim: int):
        self.dim = dim
        self.octaves = int(np.ceil(dim / 6))

    def __call__(self, coords) -> Tensor:
        c = np.asarray(ag.as_tensor(coords).data)
        freqs = np.pi * 2.0 ** np.arange(self.octaves)
        angles = c[..., :, None] * freqs  # [..., 3, F]
        feats = np.concatenate([np.sin(angles), np.cos(angles)], axis=-1)
        return Tensor(feats.reshape(*c.shape[:-1], -1)[..., : self.dim])


# -- merging ----------------------------------------------------------------


def check_schedule(n_tokens: int, merge: int, layers: int) -> None:
    """Raise ConfigError unless every stage can merge ``merge`` pairs and a token survives."""
    if merge < 0 or layers < 0:
        raise ConfigError(f"merge ({merge}) and layers ({layers}) must be non-negative")
    if n_tokens - merge * layers < 1:
        raise ConfigError(f"schedule exhausts tokens: N={n_tokens}, M={merge}, L={layers}")
    for stage in range(layers):
        live = n_tokens - merge * stage
        if 2 * merge > live:
            raise ConfigError(f"stage {stage}: cannot merge {merge} pairs from {live} tokens")


def _match(sim: np.ndarray, merge: int) -> MergePlan:
    """Greedy bipartite matching of even (A) to odd (B) positions by descending ``sim[a, b]``."""
    n = sim.shape[0]
    if 2 * merge > n:
        raise ContractError(f"merge capacity exceeded: 2*{merge} > {n} tokens")
    if merge == 0:
        return MergePlan()
    a_idx = np.arange(0, n, 2)
    b_idx = np.arange(1, n, 2)
    scores = sim[np.ix_(a_idx, b_idx)]
    aa, bb = np.meshgrid(a_idx, b_idx, indexing="ij")
    aa, bb, flat = aa.ravel(), bb.ravel(), scores.ravel()
    order = np.lexsort((bb, aa, -flat))
    used_a: set[int] = set()
    used_b: set[int] = set()
    pairs, chosen = [], []
    for e in order:
        a, b = int(aa[e]), int(bb[e])
        if a in used_a or b in used_b:
            continue
        used_a.add(a)
        used_b.add(b)
        pairs.append((a, b))
        chosen.append(float(flat[e]))
        if len(pairs) == merge:
            break
    return MergePlan(tuple(pairs), tuple(chosen))


def plan_merge(attn, merge: int):
    """Pick ``merge`` token pairs with the highest symmetric attention mass.

    Similarity between tokens a and b is ``attn[a, b] + attn[b, a]``.  Accepts a
    single [N, N] matrix (returns one plan) or a batch [B, N, N] (returns a list).
    """
    attn = np.asarray(attn.data if isinstance(attn, Tensor) else attn, dtype=np.float64)
    if attn.ndim == 2:
        return _match(attn + attn.T, merge)
    if attn.ndim != 3 or attn.shape[1] != attn.shape[2]:
        raise ShapeError(f"plan_merge expects [N,N] or [B,N,N], got {attn.shape}")
    return [_match(a + a.T, merge) for a in attn]


def plan_merge_by_keys(keys, merge: int):
    """Key-cosine variant of :func:`plan_merge` (the original ToMe metric)."""
    keys = np.asarray(keys, dtype=np.float64)
    unit = keys / np.maximum(np.linalg.norm(keys, axis=-1, keepdims=True), 1e-12)
    sim = unit @ np.swapaxes(unit, -1, -2)
    if sim.ndim == 2:
        return _match(sim, merge)
    return [_match(s, merge) for s in sim]


def merge_matrix(plan: MergePlan, sizes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-stochastic [n-M, n] matrix realizing ``plan`` plus the merged sizes."""
    n = sizes.shape[0]
    flat = [i for pair in plan.pairs for i in pair]
    if len(set(flat)) != len(flat):
        raise ContractError(f"merge plan repeats a token: {plan.pairs}")
    if flat and (min(flat) < 0 or max(flat) >= n):
        raise ContractError(f"merge plan index out of range for {n} tokens: {plan.pairs}")
    src_of = {dst: src for src, dst in plan.pairs}
    sources = set(src_of.values())
    keep = [i for i in range(n) if i not in sources]
    mat = np.zeros((len(keep), n))
    new_sizes = np.empty(len(keep))
    for row, i in enumerate(keep):
        if i in src_of:
            s = src_of[i]
            total = sizes[i] + sizes[s]
            mat[row, i] = sizes[i] / total
            mat[row, s] = sizes[s] / total
            new_sizes[row] = total
        else:
            mat[row, i] = 1.0
            new_sizes[row] = sizes[i]
    return mat, new_sizes


def apply_merge(ts: TokenSet, plans) -> TokenSet:
    """Fold each plan's sources into their destinations with size-weighted means."""
    if isinstance(plans, MergePlan):
        plans = [plans]
    batch = ts.tokens.shape[0]
    if len(plans) != batch:
        raise ContractError(f"{len(plans)} merge plans for a batch of {batch}")
    counts = {p.m for p in plans}
    if len(counts) != 1:
        raise ContractError(f"merge plans disagree on pair count: {sorted(counts)}")
    if counts == {0}:
        return ts
    mats, sizes = zip(*(merge_matrix(p, s) for p, s in zip(plans, ts.sizes)))
    return TokenSet(ag.matmul(Tensor(np.stack(mats)), ts.tokens), np.stack(sizes))


# -- encoder ----------------------------------------------------------------


def validate_coords(coords: np.ndarray) -> None:
    if coords.shape[-1] != 3:
        raise ShapeError(f"coords must end in 3, got {coords.shape}")
    if np.any(np.abs(coords) > 1.0):
        raise ContractError("voxel coordinates must be normalized to [-1, 1]")


@dataclass
class EncoderOutput:
    tokens: TokenSet
    plans: list[list[MergePlan]] = field(default_factory=list)  # per stage, per sample
    counts: list[int] = field(default_factory=list)  # live tokens after each stage


class ToMerEncoder(Module):
    def __init__(self, dim: int, heads: int, layers: int, merge: int, rng: np.random.Generator,
                 pe: str = "siren", pe_hidden: int = 64, omega0: float = 30.0, pe_trainable: bool = True,
                 metric: str = "attention", hidden_mult: int = 4, dropout: float = 0.0,
                 zero_init_out: bool = True):
        if metric not in ("attention", "keys"):
            raise ConfigError(f"unknown merge metric {metric!r}")
        self.dim = dim
        self.merge = merge
        self.metric = metric
        self.tokenizer = Linear(1, dim, rng)
        if pe == "siren":
            self.pe = CoordinatePE(dim, rng, pe_hidden, omega0, pe_trainable)
        elif pe == "fixed":
            self.pe = FixedSinusoidalPE(dim)
        else:
            raise ConfigError(f"unknown positional embedding {pe!r}")
        self.attn = [AttentionBlock(dim, heads, rng, zero_init_out=zero_init_out, dropout=dropout)
                     for _ in range(layers)]
        self.ffn = [FeedForward(dim, rng, hidden_mult, zero_init_out=zero_init_out, dropout=dropout)
                    for _ in range(layers)]

    @property
    def layers(self) -> int:
        return len(self.attn)

    def tokenize(self, responses, coords) -> TokenSet:
        r = ag.as_tensor(responses)
        c = np.asarray(coords.data if isinstance(coords, Tensor) else coords, dtype=np.float64)
        if r.ndim != 2 or r.shape[1] < 1:
            raise ShapeError(f"responses must be [B, N] with N >= 1, got {r.shape}")
        if c.shape not in ((r.shape[1], 3), (r.shape[0], r.shape[1], 3)):
            raise ShapeError(f"coords {c.shape} do not match responses {r.shape}")
        validate_coords(c)
        tokens = self.tokenizer(r.reshape(r.shape[0], r.shape[1], 1)) + self.pe(c)
        return TokenSet(tokens, np.ones(r.shape))

    def __call__(self, responses, coords, plans: list[list[MergePlan]] | None = None) -> EncoderOutput:
        ts = self.tokenize(responses, coords)
        check_schedule(ts.n, self.merge, self.layers)
        used, counts = [], []
        for stage, (attn_block, ffn_block) in enumerate(zip(self.attn, self.ffn)):
            out = attn_block(ts.tokens)
            ts = TokenSet(out.latents, ts.sizes)
            if self.merge:
                if plans is not None:
                    stage_plans = plans[stage]
                elif self.metric == "keys":
                    stage_plans = plan_merge_by_keys(out.keys, self.merge)
                else:
                    stage_plans = plan_merge(out.head_averaged(), self.merge)
                ts = apply_merge(ts, stage_plans)
                used.append(stage_plans)
            else:
                used.append([MergePlan()] * ts.tokens.shape[0])
            ts = TokenSet(ffn_block(ts.tokens), ts.sizes)
            counts.append(ts.n)
        return EncoderOutput(ts, used, counts)


def tokenize(responses, coords, encoder: ToMerEncoder) -> TokenSet:
    return encoder.tokenize(responses, coords)


def encode(responses, coords, encoder: ToMerEncoder, plans=None) -> EncoderOutput:
    return encoder(responses, coords, plans)
