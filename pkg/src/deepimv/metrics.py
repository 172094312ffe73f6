"""AUROC, information estimates and confidence intervals."""

from __future__ import annotations

import math

import numpy as np

from .errors import ContractError
from .losses import PROB_FLOOR


def _average_ranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks; tied values share the mean of their positions."""
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    starts = np.flatnonzero(np.r_[True, xs[1:] != xs[:-1]])
    ends = np.r_[starts[1:], xs.size]
    avg = (starts + ends + 1) / 2.0
    ranks = np.empty(x.size)
    ranks[order] = np.repeat(avg, ends - starts)
    return ranks


def auroc(scores, labels) -> float:
    """Probability that a random positive outscores a random negative, ties counting 1/2.

    Computed from the Mann-Whitney rank sum.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(int)
    if s.shape != y.shape:
        raise ContractError("scores and labels differ in length")
    if np.any((y != 0) & (y != 1)):
        raise ContractError("labels must be binary")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ContractError("AUROC needs both classes present")
    r = _average_ranks(s)
    # twice the Mann-Whitney U keeps the numerator integral
    u2 = 2.0 * r[y == 1].sum() - n_pos * (n_pos + 1)
    return float(u2 / (2.0 * n_pos * n_neg))


def auroc_pairs(scores, labels) -> float:
    """O(N^2) pair counting; reference for ``auroc``."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(int)
    pos, neg = s[y == 1], s[y == 0]
    if pos.size == 0 or neg.size == 0:
        raise ContractError("AUROC needs both classes present")
    wins = (pos[:, None] > neg[None, :]).sum()
    ties = (pos[:, None] == neg[None, :]).sum()
    return float((2 * wins + ties) / (2.0 * pos.size * neg.size))


def auroc_from_probs(probs: np.ndarray, labels) -> float:
    """Column 1 for two classes; mean one-vs-rest AUROC over present classes otherwise."""
    probs = np.asarray(probs)
    labels = np.asarray(labels).astype(int)
    if probs.shape[1] == 2:
        return auroc(probs[:, 1], labels)
    vals = [auroc(probs[:, c], labels == c) for c in range(probs.shape[1]) if 0 < (labels == c).sum() < labels.size]
    if not vals:
        raise ContractError("AUROC needs at least two classes present")
    return float(np.mean(vals))


def label_entropy(labels) -> float:
    """Empirical entropy of the labels in nats."""
    _, counts = np.unique(np.asarray(labels), return_counts=True)
    p = counts / counts.sum()
    return float(-(p * np.log(p)).sum())


def information_quantity(probs: np.ndarray, labels) -> float:
    """Variational lower bound on I(Y; Z) in nats: H(Y) - cross-entropy, unclamped."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels).astype(int)
    if np.unique(labels).size < 2:
        raise ContractError("information estimate needs both classes present")
    ce = -np.log(np.maximum(probs[np.arange(labels.size), labels], PROB_FLOOR)).mean()
    return label_entropy(labels) - float(ce)


def mean_ci(values) -> tuple[float, float]:
    """Mean and normal-approximation 95% half-width 1.96*sd/sqrt(n) (sample sd; 0 for n=1)."""
    x = np.asarray(values, dtype=np.float64)
    if x.size == 0:
        return math.nan, math.nan
    sd = float(x.std(ddof=1)) if x.size > 1 else 0.0
    return float(x.mean()), 1.96 * sd / math.sqrt(x.size)
