"""Repeated-split experiment harnesses: view-count evaluation, ablation grid, missing-rate sweep, latent PCA."""

from __future__ import annotations

import logging
from dataclasses import replace
from itertools import combinations
from typing import Callable, Optional, Sequence

import numpy as np

from ..data import MultiViewDataset, apply_missingness, split_dataset, split_indices_hash
from ..errors import ContractError
from ..model import MOE, POE, DeepIMVParams, forward, predict_proba
from ..numerics import EVAL, jacobi_eigh, make_rng
from ..training import TrainConfig, train_deepimv
from .baselines import train_base1, train_base2
from ..metrics import auroc_from_probs, information_quantity
from .report import MetricsReport

log = logging.getLogger(__name__)

VARIANTS = {
    "MoE": (MOE, False),
    "MoE+marginal-IB": (MOE, True),
    "PoE": (POE, False),
    "PoE+marginal-IB": (POE, True),
}

FRACTIONS = (0.64, 0.16, 0.20)


def repeat_split(dataset: MultiViewDataset, seed: int, repeat: int, fractions=FRACTIONS):
    return split_dataset(dataset, fractions, make_rng(10_007 * seed + repeat))


def _missing_rng(seed: int, repeat: int, tag: int = 0) -> np.random.Generator:
    return make_rng(20_011 * seed + 101 * repeat + tag + 1)


def view_count_auroc(predict: Callable[[MultiViewDataset], np.ndarray], test: MultiViewDataset) -> dict[int, float]:
    """Mean AUROC over every subset of k views, for k up to the most views any sample has.

    Each subset is intersected with the samples' own availability; samples
    left with no view are dropped for that subset.
    """
    V = test.n_views
    out = {}
    for k in range(1, int(test.mask.sum(axis=1).max()) + 1):
        scores = []
        for subset in combinations(range(V), k):
            keep = np.zeros(V, dtype=bool)
            keep[list(subset)] = True
            mask = test.mask & keep
            rows = np.flatnonzero(mask.any(axis=1))
            if rows.size == 0:
                continue
            sub = test.subset(rows).with_mask(mask[rows])
            try:
                scores.append(auroc_from_probs(predict(sub), sub.labels))
            except ContractError:
                continue
        out[k] = float(np.mean(scores)) if scores else float("nan")
    return out


def deepimv_predictor(params: DeepIMVParams, fusion: str):
    return lambda ds: predict_proba(params, ds.batch(), fusion)


def run_ablation(
    config: TrainConfig,
    dataset: MultiViewDataset,
    repeats: int = 10,
    train_missing_rate: float = 0.5,
    seed: int = 0,
    variants: Optional[Sequence[str]] = None,
) -> MetricsReport:
    """Train every fusion/marginal-IB variant on identical splits and report AUROC per test view count.

    ``train_missing_rate`` of the training and validation samples receive a
    random incomplete view pattern; test samples stay complete and are
    restricted per view count by ``view_count_auroc``.
    """
    if repeats < 1:
        raise ContractError("repeats must be >= 1")
    names = list(variants) if variants is not None else list(VARIANTS)
    V = dataset.n_views
    scores = {(n, k): [] for n in names for k in range(1, V + 1)}
    hashes = {n: [] for n in names}
    for r in range(repeats):
        train, val, test = repeat_split(dataset, seed, r)
        if train_missing_rate > 0:
            train = apply_missingness(train, train_missing_rate, _missing_rng(seed, r, 0))
            val = apply_missingness(val, train_missing_rate, _missing_rng(seed, r, 1))
        for name in names:
            fusion, marginal = VARIANTS[name]
            cfg = replace(config, fusion=fusion, marginal_ib=marginal, seed=config.seed + r)
            params, _ = train_deepimv(cfg, train, val)
            hashes[name].append(split_indices_hash(train, val, test))
            for k, a in view_count_auroc(deepimv_predictor(params, fusion), test).items():
                scores[(name, k)].append(a)
            log.info("ablation repeat %d %s done", r, name)
    rep = MetricsReport(["variant", "n_views"])
    for name in names:
        for k in range(1, V + 1):
            rep.add({"variant": name, "n_views": k}, scores[(name, k)])
    rep.extras["split_hashes"] = hashes
    return rep


def missing_rate_sweep(
    config: TrainConfig,
    dataset: MultiViewDataset,
    rates: Sequence[float] = (0.0, 0.3, 0.6, 0.9),
    repeats: int = 10,
    seed: int = 0,
    methods: Sequence[str] = ("deepimv", "base1"),
) -> MetricsReport:
    """AUROC on a complete-view test split as the training missing rate grows.

    Within a repeat every method and rate shares the same split; for a given
    rate, every method sees the same missingness pattern.
    """
    if any(not 0.0 <= r <= 1.0 for r in rates):
        raise ContractError("rates must lie in [0, 1]")
    scores = {(m, r): [] for m in methods for r in rates}
    for rep_i in range(repeats):
        train, val, test = repeat_split(dataset, seed, rep_i)
        for j, rate in enumerate(rates):
            tr = apply_missingness(train, rate, _missing_rng(seed, rep_i, 10 + j))
            cfg = replace(config, seed=config.seed + rep_i)
            for m in methods:
                if m == "deepimv":
                    params, _ = train_deepimv(cfg, tr, val)
                    probs = predict_proba(params, test.batch(), cfg.fusion)
                elif m == "base1":
                    model, _ = train_base1(cfg, tr, val)
                    probs = model.predict_proba(test)
                elif m == "base2":
                    model, _ = train_base2(cfg, tr, val)
                    probs = model.predict_proba(test)
                else:
                    raise ContractError(f"unknown method {m!r}")
                scores[(m, rate)].append(auroc_from_probs(probs, test.labels))
    rep = MetricsReport(["method", "rate"])
    for m in methods:
        for rate in rates:
            rep.add({"method": m, "rate": rate}, scores[(m, rate)])
    return rep


def pca_2d(Z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Center Z and project onto its top two principal axes; returns (coords, top eigenvalues)."""
    Z = np.asarray(Z, dtype=np.float64)
    if Z.shape[0] < 2:
        raise ContractError("PCA needs at least 2 rows")
    Zc = Z - Z.mean(axis=0)
    cov = Zc.T @ Zc / (Z.shape[0] - 1)
    lam, vecs = jacobi_eigh(cov)
    if vecs.shape[1] < 2:
        vecs = np.hstack([vecs, np.zeros((vecs.shape[0], 2 - vecs.shape[1]))])
        lam = np.r_[lam, 0.0]
    return Zc @ vecs[:, :2], lam[:2]


def latent_pca_projection(
    params: DeepIMVParams, dataset: MultiViewDataset, pattern: Sequence[bool], fusion: str = POE
) -> np.ndarray:
    """2-D PCA of joint-posterior means when only the views in ``pattern`` are available."""
    pattern = np.asarray(pattern, dtype=bool)
    if pattern.shape != (dataset.n_views,):
        raise ContractError(f"pattern needs {dataset.n_views} entries")
    fr = forward(params, dataset.with_mask(dataset.mask & pattern).batch(), fusion, EVAL)
    coords, _ = pca_2d(fr.joint.mean)
    return coords


def information_report(params: DeepIMVParams, dataset: MultiViewDataset, fusion: str = POE) -> MetricsReport:
    """Variational estimates of I(Y;Z) and each I(Y_v;Z_v) in nats."""
    fr = forward(params, dataset.batch(), fusion, EVAL)
    rep = MetricsReport(["quantity"], metric="information", unit="nats")
    rep.add({"quantity": "I(Y;Z)"}, [information_quantity(fr.joint_probs, dataset.labels)])
    for v in range(dataset.n_views):
        rows = fr.rows[v]
        y = dataset.labels[rows]
        if rows.size and np.unique(y).size > 1:
            rep.add({"quantity": f"I(Y_{v + 1};Z_{v + 1})"}, [information_quantity(fr.view_probs[v], y)])
    return rep
