"""Base1 (mean-imputed concatenation) and Base2 (per-view ensemble) classifiers."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..data import MeanImputer, MultiViewDataset
from ..errors import ContractError, NumericError
from ..losses import _nll, _nll_logit_grad
from ..numerics import EVAL, TRAIN, Adam, MlpParams, init_mlp, make_rng, mlp_apply, mlp_backprop, softmax
from ..metrics import auroc_from_probs
from .report import MetricsReport


@dataclass
class MlpClassifier:
    params: MlpParams

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        logits, _ = mlp_apply(self.params, X, EVAL)
        return softmax(logits)


def _flat_views(params: MlpParams) -> tuple[np.ndarray, MlpParams]:
    """Copy params into one flat vector and return views into it."""
    arrays = params.arrays()
    flat = np.concatenate([a.ravel() for a in arrays])
    views, offset = [], 0
    for a in arrays:
        views.append(flat[offset : offset + a.size].reshape(a.shape))
        offset += a.size
    return flat, MlpParams(views[0::2], views[1::2])


def fit_mlp_classifier(
    X: np.ndarray,
    y: np.ndarray,
    X_val: np.ndarray,
    y_val: np.ndarray,
    hidden: tuple[int, ...],
    n_classes: int,
    config,
    rng: np.random.Generator,
) -> tuple[MlpClassifier, list[float]]:
    """Cross-entropy MLP with Adam, dropout and validation early stopping (same rules as DeepIMV)."""
    init = init_mlp((X.shape[1], *hidden, n_classes), rng)
    flat, params = _flat_views(init)
    opt = Adam(flat.size)
    best, best_val, since, trace = flat.copy(), np.inf, 0, []
    n = X.shape[0]
    for epoch in range(config.epochs):
        perm = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = perm[start : start + config.batch_size]
            logits, cache = mlp_apply(params, X[idx], TRAIN, config.dropout, rng)
            g_logits = _nll_logit_grad(softmax(logits), y[idx]) / idx.size
            grads, _ = mlp_backprop(cache, g_logits)
            g = np.concatenate([a.ravel() for a in grads.arrays()])
            opt.step(flat, g, config.lr, config.l1)
        val_logits, _ = mlp_apply(params, X_val, EVAL)
        val_loss = float(_nll(softmax(val_logits), y_val).mean())
        if not np.isfinite(val_loss):
            raise NumericError(f"baseline epoch {epoch + 1}: non-finite validation loss")
        trace.append(val_loss)
        if val_loss < best_val:
            best_val, best, since = val_loss, flat.copy(), 0
        else:
            since += 1
            if since >= config.patience:
                break
    return MlpClassifier(MlpParams(*_split(best, init))), trace


def _split(flat: np.ndarray, like: MlpParams):
    ws, bs, offset = [], [], 0
    for w, b in zip(like.weights, like.biases):
        ws.append(flat[offset : offset + w.size].reshape(w.shape).copy())
        offset += w.size
        bs.append(flat[offset : offset + b.size].copy())
        offset += b.size
    return ws, bs


@dataclass
class Base1Model:
    imputer: MeanImputer
    clf: MlpClassifier

    def predict_proba(self, ds: MultiViewDataset) -> np.ndarray:
        return self.clf.predict_proba(self.imputer.transform(ds))


@dataclass
class Base2Model:
    classifiers: list[MlpClassifier]

    def predict_proba(self, ds: MultiViewDataset) -> np.ndarray:
        """Mean of the class distributions of each sample's observed views."""
        acc = None
        for v, clf in enumerate(self.classifiers):
            rows = np.flatnonzero(ds.mask[:, v])
            if rows.size == 0:
                continue
            p = clf.predict_proba(ds.views[v][rows])
            if acc is None:
                acc = np.zeros((ds.n, p.shape[1]))
            acc[rows] += p
        return acc / ds.mask.sum(axis=1, keepdims=True)


def _n_classes(*sets: MultiViewDataset) -> int:
    return max(2, max(s.n_classes for s in sets))


def train_base1(config, train: MultiViewDataset, val: MultiViewDataset, test: Optional[MultiViewDataset] = None):
    """Concatenate views (missing blocks filled with training means) and fit one MLP.

    Hidden widths are the DeepIMV encoder widths times the number of views.
    """
    imputer = MeanImputer().fit(train)
    C = _n_classes(train, val)
    hidden = tuple(h * train.n_views for h in config.encoder_hidden)
    clf, trace = fit_mlp_classifier(
        imputer.transform(train), train.labels, imputer.transform(val), val.labels,
        hidden, C, config, make_rng(config.seed),
    )
    model = Base1Model(imputer, clf)
    return model, _report("base1", model, val, test, trace)


def train_base2(config, train: MultiViewDataset, val: MultiViewDataset, test: Optional[MultiViewDataset] = None):
    """One MLP per view, each fitted on the samples that observe that view."""
    C = _n_classes(train, val)
    rng = make_rng(config.seed)
    clfs, traces = [], []
    for v in range(train.n_views):
        tr = np.flatnonzero(train.mask[:, v])
        va = np.flatnonzero(val.mask[:, v])
        if tr.size == 0:
            raise ContractError(f"view {v} is observed by no training sample")
        if va.size:
            X_val, y_val = val.views[v][va], val.labels[va]
        else:
            # no validation coverage: early-stop on the training rows instead
            X_val, y_val = train.views[v][tr], train.labels[tr]
        clf, trace = fit_mlp_classifier(
            train.views[v][tr], train.labels[tr], X_val, y_val,
            tuple(config.predictor_hidden), C, config, rng,
        )
        clfs.append(clf)
        traces.append(trace[-1])
    model = Base2Model(clfs)
    return model, _report("base2", model, val, test, traces)


def _report(name: str, model, val: MultiViewDataset, test: Optional[MultiViewDataset], trace) -> MetricsReport:
    rep = MetricsReport(["method", "split"])
    for split, ds in (("validation", val), ("test", test)):
        if ds is None:
            continue
        try:
            score = auroc_from_probs(model.predict_proba(ds), ds.labels)
        except ContractError:
            continue
        rep.add({"method": name, "split": split}, [score])
    rep.extras["final_val_loss"] = trace[-1] if trace else float("nan")
    return rep
