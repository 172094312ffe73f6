"""Diagonal-Gaussian algebra: KL, reparameterized sampling, product and mixture of experts.

All functions accept single Gaussians (arrays of shape ``(D,)``) or batches
(``(N, D)``); reductions run over the last axis.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ContractError, ShapeError

LOG_VAR_MIN = -20.0
LOG_VAR_MAX = 20.0


@dataclass
class DiagGaussian:
    mean: np.ndarray
    log_var: np.ndarray

    def __post_init__(self) -> None:
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.log_var = np.asarray(self.log_var, dtype=np.float64)
        if self.mean.shape != self.log_var.shape:
            raise ShapeError(f"mean {self.mean.shape} and log_var {self.log_var.shape} differ")
        if self.mean.ndim == 0 or self.mean.shape[-1] == 0:
            raise ShapeError("Gaussian needs at least one latent dimension")

    @property
    def var(self) -> np.ndarray:
        return np.exp(self.log_var)

    @property
    def std(self) -> np.ndarray:
        return np.exp(0.5 * self.log_var)

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    @classmethod
    def standard(cls, dim: int) -> "DiagGaussian":
        return cls(np.zeros(dim), np.zeros(dim))

    def rows(self, idx) -> "DiagGaussian":
        return DiagGaussian(self.mean[idx], self.log_var[idx])


def clamp_log_var(raw: np.ndarray) -> np.ndarray:
    return np.clip(raw, LOG_VAR_MIN, LOG_VAR_MAX)


def kl_diag(q: DiagGaussian, p: DiagGaussian) -> np.ndarray:
    """KL(q || p) in nats, summed over latent dimensions."""
    if q.dim != p.dim:
        raise ShapeError(f"KL between dimensions {q.dim} and {p.dim}")
    diff = q.mean - p.mean
    terms = 0.5 * ((np.exp(q.log_var - p.log_var) + diff * diff * np.exp(-p.log_var)) - 1.0 + (p.log_var - q.log_var))
    return terms.sum(axis=-1)


def kl_diag_grad(q: DiagGaussian, p: DiagGaussian) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of ``kl_diag(q, p)`` with respect to q's mean and log-variance."""
    d_mean = (q.mean - p.mean) * np.exp(-p.log_var)
    d_log_var = 0.5 * (np.exp(q.log_var - p.log_var) - 1.0)
    return d_mean, d_log_var


def reparam_sample(
    q: DiagGaussian, rng: np.random.Generator, eps: Optional[np.ndarray] = None
) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``z = mean + eps * std`` and return ``(z, eps)``.

    ``eps`` may be supplied to replay a draw; dz/dmean = 1 and
    dz/dlog_var = 0.5 * eps * std.
    """
    if eps is None:
        eps = rng.standard_normal(q.mean.shape)
    return q.mean + eps * q.std, eps


def poe_combine(
    prior: DiagGaussian, experts: Sequence[DiagGaussian], present: Optional[np.ndarray] = None
) -> DiagGaussian:
    """Precision-weighted product of the prior and the experts.

    ``present`` (shape ``(N, n_experts)``, boolean) switches individual
    experts off per row; absent experts contribute zero precision. Terms are
    sorted per coordinate before summation, so the result does not depend on
    expert order, bit for bit.
    """
    for e in experts:
        if e.dim != prior.dim:
            raise ShapeError(f"expert dimension {e.dim} != prior dimension {prior.dim}")
    if not experts:
        return DiagGaussian(prior.mean.copy(), prior.log_var.copy())
    shape = np.broadcast_shapes(prior.mean.shape, *(e.mean.shape for e in experts))
    prec_terms = [np.broadcast_to(np.exp(-prior.log_var), shape)]
    num_terms = [np.broadcast_to(prior.mean * np.exp(-prior.log_var), shape)]
    for v, e in enumerate(experts):
        prec = np.exp(-e.log_var)
        num = e.mean * prec
        if present is not None:
            on = np.asarray(present)[:, v][:, None]
            prec = np.where(on, prec, 0.0)
            num = np.where(on, num, 0.0)
        prec_terms.append(np.broadcast_to(prec, shape))
        num_terms.append(np.broadcast_to(num, shape))
    precision = np.sort(np.stack(prec_terms), axis=0).sum(axis=0)
    numerator = np.sort(np.stack(num_terms), axis=0).sum(axis=0)
    return DiagGaussian(numerator / precision, -np.log(precision))


@dataclass
class GaussianMixture:
    """Mixture over ``components``.

    ``weights`` has shape ``(K,)``, or ``(K, N)`` for a batch where every row
    carries its own weights (rows of batched components).
    """

    components: list[DiagGaussian]
    weights: np.ndarray

    def __post_init__(self) -> None:
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if not self.components:
            raise ContractError("mixture needs at least one component")
        if self.weights.ndim not in (1, 2) or self.weights.shape[0] != len(self.components):
            raise ShapeError("one weight (row) per component required")
        if np.any(self.weights < 0) or np.any(np.abs(self.weights.sum(axis=0) - 1.0) > 1e-12):
            raise ContractError("mixture weights must be non-negative and sum to 1")

    def moment_match(self) -> DiagGaussian:
        """Single Gaussian with the mixture's mean and per-coordinate variance."""
        means = np.stack([c.mean for c in self.components])
        variances = np.stack([c.var for c in self.components])
        w = self.weights.reshape(self.weights.shape + (1,) * (means.ndim - self.weights.ndim))
        mean = (w * means).sum(axis=0)
        # E[var] + Var[mean]; equals sum(w * (var + mean^2)) - mean^2 without the cancellation
        var = (w * variances).sum(axis=0) + (w * (means - mean) ** 2).sum(axis=0)
        return DiagGaussian(mean, np.log(var))


def moe_combine(experts: Sequence[DiagGaussian], weights: Optional[np.ndarray] = None) -> GaussianMixture:
    """Mixture of experts; uniform weights when none are given."""
    if not experts:
        raise ContractError("mixture of experts needs at least one expert")
    if weights is None:
        weights = np.full(len(experts), 1.0 / len(experts))
    return GaussianMixture(list(experts), weights)


def moe_sample(m: GaussianMixture, rng: np.random.Generator) -> np.ndarray:
    """Pick a component by weight, then draw from it by reparameterization."""
    if m.weights.ndim != 1:
        raise ContractError("moe_sample expects a single (unbatched) mixture")
    k = int(rng.choice(len(m.components), p=m.weights))
    z, _ = reparam_sample(m.components[k], rng)
    return z
