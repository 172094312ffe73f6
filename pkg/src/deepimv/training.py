"""Mini-batch training with validation-based model selection, plus a frozen-noise gradient check."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .data import MultiViewDataset
from .errors import ContractError, NumericError
from .metrics import auroc_from_probs
from .losses import LossBreakdown, total_loss
from .model import (
    POE,
    MOE,
    DeepIMVParams,
    ModelDims,
    forward,
    init_params,
)
from .numerics import EVAL, TRAIN, Adam, make_rng

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 500
    batch_size: int = 32
    lr: float = 1e-4
    alpha: float = 1.0
    beta: float = 0.01
    beta_v: Optional[Sequence[float]] = None  # None: beta for every view
    dropout: float = 0.7
    l1: float = 0.0
    fusion: str = POE
    marginal_ib: bool = True
    seed: int = 0
    patience: int = 20
    latent_dim: int = 50
    encoder_hidden: tuple[int, ...] = (100, 100)
    predictor_hidden: tuple[int, ...] = (100, 100)
    selection: str = "total"  # or "joint"
    eval_samples: int = 0

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        if self.lr <= 0:
            raise ContractError("lr must be > 0")
        if self.batch_size < 1 or self.epochs < 1 or self.patience < 1:
            raise ContractError("batch_size, epochs and patience must be >= 1")
        if self.alpha < 0 or self.beta < 0 or self.l1 < 0:
            raise ContractError("alpha, beta and l1 must be >= 0")
        if self.beta_v is not None and min(self.beta_v) < 0:
            raise ContractError("beta_v entries must be >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ContractError("dropout must lie in [0, 1)")
        if self.fusion not in (POE, MOE):
            raise ContractError(f"fusion must be 'poe' or 'moe', got {self.fusion!r}")
        if self.selection not in ("total", "joint"):
            raise ContractError("selection must be 'total' or 'joint'")

    @property
    def effective_alpha(self) -> float:
        return self.alpha if self.marginal_ib else 0.0

    def dims_for(self, ds: MultiViewDataset, n_classes: Optional[int] = None) -> ModelDims:
        return ModelDims(
            ds.view_dims,
            self.latent_dim,
            n_classes or max(2, ds.n_classes),
            tuple(self.encoder_hidden),
            tuple(self.predictor_hidden),
        )


@dataclass
class EpochRecord:
    epoch: int
    train: LossBreakdown
    val: LossBreakdown
    val_auroc: float


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)
    selected_epoch: int = 0
    selected_params: Optional[DeepIMVParams] = None

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_total", "val_total", "val_auroc", "selected"])
        for r in self.records:
            w.writerow([r.epoch, repr(r.train.total), repr(r.val.total), repr(r.val_auroc), int(r.epoch == self.selected_epoch)])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(self.to_csv())


def _check_dataset(ds: MultiViewDataset, name: str, n_classes: int) -> None:
    if ds.n == 0:
        raise ContractError(f"{name} set is empty")
    if not ds.mask.any(axis=1).all():
        raise ContractError(f"{name} set has a sample with no observed views")
    if ds.labels.min() < 0 or ds.labels.max() >= n_classes:
        raise ContractError(f"{name} set labels outside [0, {n_classes})")


def _average(parts: list[tuple[LossBreakdown, int]]) -> LossBreakdown:
    n = sum(k for _, k in parts)
    first = parts[0][0]
    V = len(first.ce_views)

    def avg(get):
        return sum(get(b) * k for b, k in parts) / n

    return LossBreakdown(
        avg(lambda b: b.ce_joint),
        avg(lambda b: b.kl_joint),
        [avg(lambda b, v=v: b.ce_views[v]) for v in range(V)],
        [avg(lambda b, v=v: b.kl_views[v]) for v in range(V)],
        first.alpha,
        first.beta,
        first.beta_views,
        n,
    )


def evaluate_validation(params: DeepIMVParams, ds: MultiViewDataset, config: TrainConfig) -> tuple[LossBreakdown, float]:
    """Eval-mode loss on the whole set and AUROC of the joint prediction."""
    if ds.n == 0:
        raise ContractError("empty evaluation set")
    fr = forward(params, ds.batch(), config.fusion, EVAL)
    rep, _ = total_loss(params, fr, ds.labels, config.effective_alpha, config.beta, config.beta_v, need_grad=False)
    try:
        score = auroc_from_probs(fr.joint_probs, ds.labels)
    except ContractError:
        score = float("nan")
    return rep, score


def train_step(params: DeepIMVParams, opt: Adam, batch, labels, config: TrainConfig, rng) -> LossBreakdown:
    fr = forward(params, batch, config.fusion, TRAIN, rng, config.dropout)
    rep, grads = total_loss(params, fr, labels, config.effective_alpha, config.beta, config.beta_v)
    if not np.isfinite(rep.total):
        raise NumericError("non-finite training loss")
    opt.step(params.flat, grads.flat, config.lr, config.l1)
    return rep


def train_deepimv(
    config: TrainConfig,
    train: MultiViewDataset,
    val: MultiViewDataset,
    params: Optional[DeepIMVParams] = None,
    n_classes: Optional[int] = None,
) -> tuple[DeepIMVParams, TrainHistory]:
    """Shuffled mini-batch Adam on the total loss; returns the validation-best snapshot.

    Stops after ``patience`` epochs without improvement of the validation
    criterion (total loss, or joint loss when ``selection == 'joint'``).
    """
    dims = config.dims_for(train, n_classes)
    _check_dataset(train, "training", dims.n_classes)
    _check_dataset(val, "validation", dims.n_classes)
    rng = make_rng(config.seed)
    if params is None:
        params = init_params(dims, rng)
    opt = Adam(params.size)
    batch = train.batch()
    history = TrainHistory()
    best, best_val, since = params.copy(), np.inf, 0
    for epoch in range(1, config.epochs + 1):
        perm = rng.permutation(train.n)
        parts = []
        for b, start in enumerate(range(0, train.n, config.batch_size)):
            idx = perm[start : start + config.batch_size]
            try:
                rep = train_step(params, opt, batch.take(idx), train.labels[idx], config, rng)
            except NumericError as exc:
                raise NumericError(f"epoch {epoch}, batch {b}: {exc}") from exc
            parts.append((rep, idx.size))
        val_rep, val_auc = evaluate_validation(params, val, config)
        if not np.isfinite(val_rep.total):
            raise NumericError(f"epoch {epoch}: non-finite validation loss")
        history.records.append(EpochRecord(epoch, _average(parts), val_rep, val_auc))
        crit = val_rep.total if config.selection == "total" else val_rep.joint
        if crit < best_val:
            best_val, best, since = crit, params.copy(), 0
            history.selected_epoch = epoch
        else:
            since += 1
            if since >= config.patience:
                break
    history.selected_params = best
    return best, history


# ---------------------------------------------------------------- gradient check


@dataclass
class GradCheckReport:
    max_rel_error: float
    max_abs_error: float
    n_params: int
    worst_param: str

    @property
    def passed(self) -> bool:
        return self.max_rel_error < 1e-4


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def grad_check(
    config: TrainConfig,
    ds: MultiViewDataset,
    params: Optional[DeepIMVParams] = None,
    h: float = 1e-5,
    mode: str = TRAIN,
) -> GradCheckReport:
    """Compare the analytic total-loss gradient with central differences.

    Dropout masks and latent noise are drawn once and replayed for every
    perturbed evaluation.
    """
    dims = config.dims_for(ds)
    rng = make_rng(config.seed)
    if params is None:
        params = init_params(dims, rng)
    if params.size > 2000:
        raise ContractError(f"gradient check limited to 2000 parameters, model has {params.size}")
    batch = ds.batch()
    fr = forward(params, batch, config.fusion, mode, rng, config.dropout)
    rep, grads = total_loss(params, fr, ds.labels, config.effective_alpha, config.beta, config.beta_v)
    noise = fr.noise if mode == TRAIN else None

    def loss_at(flat):
        p = DeepIMVParams(dims, flat)
        f = forward(p, batch, config.fusion, mode, dropout_rate=config.dropout, noise=noise)
        return total_loss(p, f, ds.labels, config.effective_alpha, config.beta, config.beta_v, need_grad=False)[0].total

    numeric = np.empty(params.size)
    flat = params.flat.copy()
    for i in range(params.size):
        orig = flat[i]
        flat[i] = orig + h
        up = loss_at(flat)
        flat[i] = orig - h
        down = loss_at(flat)
        flat[i] = orig
        numeric[i] = (up - down) / (2 * h)
    rel = relative_error(grads.flat, numeric)
    worst = int(np.argmax(rel))
    offset, name = 0, ""
    for n, shape, _ in params.layout:
        size = int(np.prod(shape))
        if worst < offset + size:
            name = f"{n}[{worst - offset}]"
            break
        offset += size
    return GradCheckReport(float(rel.max()), float(np.abs(grads.flat - numeric).max()), params.size, name)


def tiny_gradcheck_setup(seed: int = 0) -> tuple[TrainConfig, MultiViewDataset]:
    """Built-in 2-view, D=3, C=2 instance with partial missingness, used by the CLI and tests."""
    rng = make_rng(seed + 1000)
    n = 8
    views = [rng.standard_normal((n, 4)), rng.standard_normal((n, 3))]
    mask = np.ones((n, 2), dtype=bool)
    mask[1, 1] = False
    mask[2, 0] = False
    labels = np.array([0, 1] * (n // 2))
    cfg = TrainConfig(
        latent_dim=3, encoder_hidden=(6,), predictor_hidden=(5,), dropout=0.3,
        alpha=0.7, beta=0.3, seed=seed,
    )
    return cfg, MultiViewDataset(views, mask, labels).with_mask(mask)
