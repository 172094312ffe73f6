"""Joint and marginal variational IB losses and their gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ContractError
from .gaussian import DiagGaussian, kl_diag, kl_diag_grad
from .model import DeepIMVParams, ForwardResult, UpstreamGrads, backward

PROB_FLOOR = 1e-12


def _check_labels(labels: np.ndarray, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1 or not np.issubdtype(labels.dtype, np.integer):
        labels = labels.astype(int)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ContractError(f"labels must lie in [0, {n_classes})")
    return labels


def _nll(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    p = probs[np.arange(labels.size), labels]
    return -np.log(np.maximum(p, PROB_FLOOR))


def _nll_logit_grad(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """d(-log p_y)/d logits per row; zero where the floor is active."""
    g = probs.copy()
    g[np.arange(labels.size), labels] -= 1.0
    floored = probs[np.arange(labels.size), labels] < PROB_FLOOR
    g[floored] = 0.0
    return g


def cross_entropy(probs: np.ndarray, labels) -> float:
    """Mean negative log-likelihood of the labels, probabilities floored at 1e-12."""
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    labels = _check_labels(labels, probs.shape[1])
    if labels.size != probs.shape[0]:
        raise ContractError("one label per row required")
    return float(_nll(probs, labels).mean())


@dataclass
class LossBreakdown:
    """Batch-averaged loss terms in nats.

    Per-view terms are summed over the samples observing the view and divided
    by the full batch size, so ``total = ce_joint + beta*kl_joint +
    alpha*sum_v(ce_v + beta_v*kl_v)``. Views absent from the batch hold 0.
    """

    ce_joint: float
    kl_joint: float
    ce_views: list[float]
    kl_views: list[float]
    alpha: float
    beta: float
    beta_views: list[float]
    n: int = 0

    @property
    def joint(self) -> float:
        return self.ce_joint + self.beta * self.kl_joint

    @property
    def marginal(self) -> float:
        return sum(c + b * k for c, b, k in zip(self.ce_views, self.beta_views, self.kl_views))

    @property
    def total(self) -> float:
        return self.joint + self.alpha * self.marginal


def _beta_views(beta_v, n_views: int, beta: float) -> list[float]:
    if beta_v is None:
        return [float(beta)] * n_views
    if np.isscalar(beta_v):
        return [float(beta_v)] * n_views
    beta_v = [float(b) for b in beta_v]
    if len(beta_v) != n_views:
        raise ContractError(f"need {n_views} per-view betas, got {len(beta_v)}")
    return beta_v


def _joint_terms(fr: ForwardResult, labels: np.ndarray, beta: float, up: UpstreamGrads, need_grad: bool):
    n = labels.size
    prior = DiagGaussian.standard(fr.joint.dim)
    ce = float(_nll(fr.joint_probs, labels).mean())
    kl = float(kl_diag(fr.joint, prior).mean())
    if need_grad:
        up.joint_logits = _nll_logit_grad(fr.joint_probs, labels) / n
        if beta:
            dm, dl = kl_diag_grad(fr.joint, prior)
            up.joint_mean = beta * dm / n
            up.joint_log_var = beta * dl / n
    return ce, kl


def _marginal_terms(fr: ForwardResult, labels: np.ndarray, betas: Sequence[float], scale: float, up: UpstreamGrads, need_grad: bool):
    n = labels.size
    V = len(fr.rows)
    ce_v, kl_v = [0.0] * V, [0.0] * V
    if need_grad:
        up.view_logits = [None] * V
        up.view_mean = [None] * V
        up.view_log_var = [None] * V
    for v in range(V):
        r = fr.rows[v]
        if r.size == 0:
            continue
        q = fr.marginals[v]
        prior = DiagGaussian.standard(q.dim)
        y = labels[r]
        ce_v[v] = float(_nll(fr.view_probs[v], y).sum() / n)
        kl_v[v] = float(kl_diag(q, prior).sum() / n)
        if need_grad and scale:
            up.view_logits[v] = scale * _nll_logit_grad(fr.view_probs[v], y) / n
            if betas[v]:
                dm, dl = kl_diag_grad(q, prior)
                up.view_mean[v] = scale * betas[v] * dm / n
                up.view_log_var[v] = scale * betas[v] * dl / n
            else:
                up.view_mean[v] = None
                up.view_log_var[v] = None
    return ce_v, kl_v


def ib_joint_loss(params: DeepIMVParams, fr: ForwardResult, labels, beta: float, need_grad: bool = True):
    """Cross-entropy of the joint prediction plus beta times the mean joint KL.

    Returns ``(value, grads)``; gradients reach the joint predictor and the
    encoders only.
    """
    if beta < 0:
        raise ContractError("beta must be >= 0")
    labels = _check_labels(labels, params.dims.n_classes)
    up = UpstreamGrads()
    ce, kl = _joint_terms(fr, labels, beta, up, need_grad)
    grads = backward(params, fr, up) if need_grad else None
    return ce + beta * kl, grads


def ib_marginal_loss(params: DeepIMVParams, fr: ForwardResult, labels, beta_v, need_grad: bool = True):
    """Sum over views of view-specific cross-entropy plus beta_v times KL, normalized by batch size.

    Gradients reach the view-specific predictors and the encoders only.
    """
    V = params.dims.n_views
    betas = _beta_views(beta_v, V, 0.0)
    if min(betas) < 0:
        raise ContractError("beta_v must be >= 0")
    labels = _check_labels(labels, params.dims.n_classes)
    up = UpstreamGrads()
    ce_v, kl_v = _marginal_terms(fr, labels, betas, 1.0, up, need_grad)
    value = sum(c + b * k for c, b, k in zip(ce_v, betas, kl_v))
    grads = backward(params, fr, up) if need_grad else None
    return value, grads


def total_loss(
    params: DeepIMVParams,
    fr: ForwardResult,
    labels,
    alpha: float = 1.0,
    beta: float = 0.01,
    beta_v=None,
    need_grad: bool = True,
) -> tuple[LossBreakdown, Optional[DeepIMVParams]]:
    """Joint IB loss plus alpha times the marginal IB losses, with one combined backward pass."""
    if alpha < 0 or beta < 0:
        raise ContractError("alpha and beta must be >= 0")
    V = params.dims.n_views
    betas = _beta_views(beta_v, V, beta)
    if min(betas) < 0:
        raise ContractError("beta_v must be >= 0")
    labels = _check_labels(labels, params.dims.n_classes)
    if labels.size != fr.joint_probs.shape[0]:
        raise ContractError("one label per sample required")
    up = UpstreamGrads()
    ce, kl = _joint_terms(fr, labels, beta, up, need_grad)
    ce_v, kl_v = _marginal_terms(fr, labels, betas, alpha, up, need_grad)
    report = LossBreakdown(ce, kl, ce_v, kl_v, float(alpha), float(beta), betas, labels.size)
    grads = backward(params, fr, up) if need_grad else None
    return report, grads
