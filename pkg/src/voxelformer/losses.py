"""Regression and contrastive objectives plus the two-phase schedule.

The contrastive losses are sums over the batch, not means.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, ContractError, ShapeError

UNIT_NORM_TOL = 1e-6


class Phase(str, enum.Enum):
    BIMIXCO = "BiMixCo"
    SOFTCLIP = "SoftCLIP"


@dataclass
class LossWeights:
    mse: float = 30.0
    contrastive: float = 1.0
    tau: float = 0.1

    def __post_init__(self):
        if self.mse < 0 or self.contrastive < 0 or self.tau <= 0:
            raise ConfigError(f"loss weights must be non-negative and tau positive: {self}")


@dataclass
class MixupSpec:
    lambdas: np.ndarray  # [B] in [0, 1]
    partners: np.ndarray  # [B] batch indices
    alpha: float = 0.15

    def __post_init__(self):
        self.lambdas = np.asarray(self.lambdas, dtype=np.float64)
        self.partners = np.asarray(self.partners, dtype=np.intp)
        n = self.lambdas.shape[0]
        if self.lambdas.shape != (n,) or self.partners.shape != (n,):
            raise ContractError("mixup lambdas and partners must be 1-D and equally long")
        if np.any((self.lambdas < 0) | (self.lambdas > 1)):
            raise ContractError("mixup lambdas must lie in [0, 1]")
        if np.any((self.partners < 0) | (self.partners >= n)):
            raise ContractError("mixup partner index out of range")

    @classmethod
    def sample(cls, batch: int, rng: np.random.Generator, alpha: float = 0.15) -> MixupSpec:
        return cls(rng.beta(alpha, alpha, size=batch), rng.permutation(batch), alpha)

    @classmethod
    def identity(cls, batch: int) -> MixupSpec:
        return cls(np.ones(batch), np.arange(batch), 0.0)

    def __len__(self) -> int:
        return self.lambdas.shape[0]

    def soft_targets(self) -> np.ndarray:
        """Y[i, j] = lambda_i [j == i] + (1 - lambda_i) [j == k_i]."""
        n = len(self)
        y = np.diag(self.lambdas)
        np.add.at(y, (np.arange(n), self.partners), 1.0 - self.lambdas)
        return y


def mse_loss(prior, target) -> Tensor:
    """Batch mean of the squared L2 distance."""
    prior, target = ag.as_tensor(prior), ag.as_tensor(target)
    if prior.shape != target.shape or prior.ndim != 2:
        raise ShapeError(f"mse_loss: prior {prior.shape} vs target {target.shape}")
    diff = prior - target
    return (diff * diff).sum() / prior.shape[0]


def mixup(z, spec: MixupSpec):
    """Row i becomes lambda_i z_i + (1 - lambda_i) z_{k_i}; works on arrays and tensors."""
    if z.shape[0] != len(spec):
        raise ShapeError(f"mixup spec of length {len(spec)} for batch {z.shape[0]}")
    lam = spec.lambdas.reshape(-1, *([1] * (len(z.shape) - 1)))
    if isinstance(z, Tensor):
        return z * lam + ag.take(z, spec.partners, axis=0) * (1.0 - lam)
    z = np.asarray(z, dtype=np.float64)
    return lam * z + (1.0 - lam) * z[spec.partners]


def _check_unit(x: Tensor, name: str) -> None:
    if x.ndim != 2:
        raise ShapeError(f"{name} must be [N, D], got {x.shape}")
    norms = np.linalg.norm(x.data, axis=1)
    if np.any(np.abs(norms - 1.0) > UNIT_NORM_TOL):
        raise ContractError(f"{name} rows must be unit-norm (max deviation {np.abs(norms - 1).max():.3g})")


def _contrastive_inputs(p, t, tau: float) -> tuple[Tensor, Tensor]:
    p, t = ag.as_tensor(p), ag.as_tensor(t)
    if p.shape != t.shape:
        raise ShapeError(f"embeddings {p.shape} vs targets {t.shape}")
    _check_unit(p, "predictions")
    _check_unit(t, "targets")
    if p.shape[0] < 2:
        raise ContractError("contrastive losses need at least two samples")
    if tau <= 0:
        raise ContractError(f"temperature must be positive, got {tau}")
    return p, t


def bimixco_loss(p_star, t, spec: MixupSpec, tau: float) -> Tensor:
    """Bidirectional InfoNCE against mixup soft targets.

    The forward direction normalizes each mixed embedding over all targets,
    the backward direction normalizes each target over all mixed embeddings.
    """
    p_star, t = _contrastive_inputs(p_star, t, tau)
    if len(spec) != p_star.shape[0]:
        raise ShapeError(f"mixup spec of length {len(spec)} for batch {p_star.shape[0]}")
    logits = ag.matmul(p_star, t.transpose()) * (1.0 / tau)
    y = Tensor(spec.soft_targets())
    forward = (ag.log_softmax(logits, axis=1) * y).sum()
    backward = (ag.log_softmax(logits, axis=0) * y).sum()
    return -(forward + backward)


def infonce_loss(p, t, tau: float) -> Tensor:
    """Symmetric (bidirectional) InfoNCE, summed over the batch."""
    p, t = _contrastive_inputs(p, t, tau)
    logits = ag.matmul(p, t.transpose()) * (1.0 / tau)
    eye = Tensor(np.eye(p.shape[0]))
    return -((ag.log_softmax(logits, axis=1) * eye).sum() + (ag.log_softmax(logits, axis=0) * eye).sum())


def softclip_targets(t, tau: float) -> np.ndarray:
    t = ag.as_tensor(t).data
    return ag.softmax(Tensor(t @ t.T / tau), axis=1).data


def softclip_loss(p, t, tau: float) -> Tensor:
    """Soft cross-entropy between target-target and prediction-target similarity distributions."""
    p, t = _contrastive_inputs(p, t, tau)
    t_t = t.transpose()
    target = ag.softmax(ag.matmul(t, t_t) * (1.0 / tau), axis=1)
    log_pred = ag.log_softmax(ag.matmul(p, t_t) * (1.0 / tau), axis=1)
    return -(target * log_pred).sum()


def total_loss(mse, contrastive, weights: LossWeights) -> Tensor:
    return ag.as_tensor(mse) * weights.mse + ag.as_tensor(contrastive) * weights.contrastive


def phase_for_epoch(epoch: int, total_epochs: int) -> Phase:
    """BiMixCo for the first floor(total/3) epochs, SoftCLIP afterwards."""
    if total_epochs < 1 or not 0 <= epoch < total_epochs:
        raise ContractError(f"epoch {epoch} out of range for {total_epochs} epochs")
    return Phase.BIMIXCO if epoch < total_epochs // 3 else Phase.SOFTCLIP
