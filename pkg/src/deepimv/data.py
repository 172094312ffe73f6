"""Multi-view datasets: CSV I/O, synthetic generation, missingness, splits, preprocessing."""

from __future__ import annotations

import csv
import hashlib
import logging
import math
import os
import warnings
from dataclasses import dataclass, field
from itertools import combinations
from typing import Optional, Sequence

import numpy as np

from .errors import ContractError, LoadError, ShapeError
from .model import Batch
from .numerics import jacobi_eigh, make_rng

log = logging.getLogger(__name__)


@dataclass
class MultiViewDataset:
    """V view matrices (N x d_v), an (N, V) availability mask and integer labels.

    Rows of unobserved views are stored as zeros and must never be read.
    """

    views: list[np.ndarray]
    mask: np.ndarray
    labels: np.ndarray
    ids: Optional[list[str]] = None

    def __post_init__(self) -> None:
        self.views = [np.asarray(x, dtype=np.float64) for x in self.views]
        self.mask = np.asarray(self.mask, dtype=bool)
        self.labels = np.asarray(self.labels, dtype=int)
        n = self.labels.shape[0]
        if self.mask.shape != (n, len(self.views)):
            raise ShapeError(f"mask shape {self.mask.shape} != ({n}, {len(self.views)})")
        for v, x in enumerate(self.views):
            if x.ndim != 2 or x.shape[0] != n:
                raise ShapeError(f"view {v} shape {x.shape} inconsistent with {n} samples")
        empty = np.flatnonzero(~self.mask.any(axis=1))
        if empty.size:
            raise ContractError(f"sample {int(empty[0])} has no observed views")
        if self.ids is None:
            self.ids = [str(i) for i in range(n)]

    @property
    def n(self) -> int:
        return self.labels.shape[0]

    @property
    def n_views(self) -> int:
        return len(self.views)

    @property
    def view_dims(self) -> tuple[int, ...]:
        return tuple(x.shape[1] for x in self.views)

    @property
    def n_classes(self) -> int:
        return int(self.labels.max()) + 1 if self.n else 0

    def subset(self, idx) -> "MultiViewDataset":
        idx = np.asarray(idx)
        idx = np.flatnonzero(idx) if idx.dtype == bool else idx.astype(int)
        return MultiViewDataset([x[idx] for x in self.views], self.mask[idx], self.labels[idx], [self.ids[i] for i in idx])

    def with_mask(self, mask: np.ndarray) -> "MultiViewDataset":
        mask = np.asarray(mask, dtype=bool)
        views = [np.where(mask[:, [v]], x, 0.0) for v, x in enumerate(self.views)]
        return MultiViewDataset(views, mask, self.labels.copy(), list(self.ids))

    def batch(self) -> Batch:
        return Batch(self.views, self.mask)


# ---------------------------------------------------------------- CSV I/O


def _read_csv(path: str) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise LoadError(f"{path}: empty file")
    return rows[0], rows[1:]


def _parse_float(cell: str, path: str, line: int) -> float:
    cell = cell.strip()
    if cell == "" or cell.lower() in ("na", "nan"):
        return math.nan
    try:
        return float(cell)
    except ValueError:
        raise LoadError(f"{path}: row {line}: non-numeric field {cell!r}") from None


def load_dataset(directory: str) -> MultiViewDataset:
    """Read view_1.csv..view_V.csv, labels.csv and optional mask.csv, joined on the id column.

    A view is missing for a sample when mask.csv says so, or (without a mask
    file) when the sample's row is absent or entirely empty. Remaining gaps
    inside observed rows are filled with the column mean over observed samples.
    """
    label_path = os.path.join(directory, "labels.csv")
    if not os.path.exists(label_path):
        raise LoadError(f"{label_path}: not found")
    header, rows = _read_csv(label_path)
    ids, labels = [], []
    for i, row in enumerate(rows, start=2):
        if not row:
            continue
        if len(row) < 2:
            raise LoadError(f"{label_path}: row {i}: expected id,label")
        try:
            labels.append(int(float(row[1])))
        except ValueError:
            raise LoadError(f"{label_path}: row {i}: non-numeric label {row[1]!r}") from None
        ids.append(row[0])
    if len(set(ids)) != len(ids):
        raise LoadError(f"{label_path}: duplicate ids")
    index = {sid: k for k, sid in enumerate(ids)}
    n = len(ids)

    view_paths = []
    v = 1
    while os.path.exists(os.path.join(directory, f"view_{v}.csv")):
        view_paths.append(os.path.join(directory, f"view_{v}.csv"))
        v += 1
    if not view_paths:
        raise LoadError(f"{directory}: no view_1.csv found")
    V = len(view_paths)

    views, present = [], np.zeros((n, V), dtype=bool)
    for v, path in enumerate(view_paths):
        header, rows = _read_csv(path)
        d = len(header) - 1
        x = np.full((n, d), math.nan)
        for i, row in enumerate(rows, start=2):
            if not row:
                continue
            sid = row[0]
            if sid not in index:
                raise LoadError(f"{path}: row {i}: unknown id {sid!r}")
            if len(row) - 1 != d:
                raise LoadError(f"{path}: row {i}: expected {d} values, got {len(row) - 1}")
            vals = [_parse_float(c, path, i) for c in row[1:]]
            x[index[sid]] = vals
            present[index[sid], v] = not all(math.isnan(a) for a in vals)
        views.append(x)

    mask_path = os.path.join(directory, "mask.csv")
    if os.path.exists(mask_path):
        header, rows = _read_csv(mask_path)
        if len(header) != V + 1:
            raise LoadError(f"{mask_path}: expected {V} view columns, got {len(header) - 1}")
        mask = np.zeros((n, V), dtype=bool)
        for i, row in enumerate(rows, start=2):
            if not row:
                continue
            if row[0] not in index:
                raise LoadError(f"{mask_path}: row {i}: unknown id {row[0]!r}")
            try:
                mask[index[row[0]]] = [int(c) != 0 for c in row[1:]]
            except ValueError:
                raise LoadError(f"{mask_path}: row {i}: mask entries must be 0/1") from None
        lost = mask & ~present
        if lost.any():
            k, v = np.argwhere(lost)[0]
            raise LoadError(f"{mask_path}: sample {ids[k]!r} marks view {v + 1} observed but it has no data")
    else:
        mask = present

    for k in np.flatnonzero(~mask.any(axis=1)):
        raise LoadError(f"{directory}: sample {ids[k]!r} has zero observed views")

    for v in range(V):
        x = views[v]
        obs = mask[:, v]
        block = x[obs]
        if block.size:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)  # all-NaN columns
                col_mean = np.nan_to_num(np.nanmean(block, axis=0))
            gaps = np.isnan(block)
            block[gaps] = np.take(col_mean, np.nonzero(gaps)[1])
            x[obs] = block
        x[~obs] = 0.0
    return MultiViewDataset(views, mask, np.array(labels), ids)


def save_dataset(ds: MultiViewDataset, directory: str) -> None:
    """Write the dataset in the layout ``load_dataset`` reads, including mask.csv."""
    os.makedirs(directory, exist_ok=True)
    for v, x in enumerate(ds.views):
        with open(os.path.join(directory, f"view_{v + 1}.csv"), "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["id"] + [f"f{j + 1}" for j in range(x.shape[1])])
            for k in range(ds.n):
                if ds.mask[k, v]:
                    w.writerow([ds.ids[k]] + [repr(float(a)) for a in x[k]])
    with open(os.path.join(directory, "labels.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "label"])
        for k in range(ds.n):
            w.writerow([ds.ids[k], int(ds.labels[k])])
    with open(os.path.join(directory, "mask.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["id"] + [f"view_{v + 1}" for v in range(ds.n_views)])
        for k in range(ds.n):
            w.writerow([ds.ids[k]] + [int(b) for b in ds.mask[k]])


# ---------------------------------------------------------------- kernel PCA


@dataclass
class KernelPCA:
    """Fitted polynomial kernel PCA; ``transform`` maps new rows with the training centering."""

    X_fit: np.ndarray
    degree: int
    c: float
    eigenvalues: np.ndarray
    alphas: np.ndarray  # eigenvectors scaled by 1/sqrt(eigenvalue)
    K_col_mean: np.ndarray
    K_mean: float

    def kernel(self, A: np.ndarray, B: np.ndarray) -> np.ndarray:
        return (A @ B.T + self.c) ** self.degree

    def transform(self, X: np.ndarray) -> np.ndarray:
        K = self.kernel(np.asarray(X, dtype=np.float64), self.X_fit)
        Kc = K - K.mean(axis=1, keepdims=True) - self.K_col_mean[None, :] + self.K_mean
        return Kc @ self.alphas


def kernel_pca_polynomial(
    X: np.ndarray, degree: int = 3, c: float = 1.0, k: int = 100
) -> tuple[np.ndarray, KernelPCA]:
    """Project rows of X onto the top-k components of the centered polynomial Gram matrix.

    Scores are ``Kc @ v_i / sqrt(lambda_i)``. ``k`` is reduced, with a warning,
    to the number of positive eigenvalues.
    """
    X = np.asarray(X, dtype=np.float64)
    N = X.shape[0]
    if N < 2:
        raise ContractError("kernel PCA needs at least 2 samples")
    if k < 1 or k > N:
        raise ContractError(f"k must lie in [1, {N}], got {k}")
    K = (X @ X.T + c) ** degree
    col_mean = K.mean(axis=0)
    K_mean = float(K.mean())
    Kc = K - col_mean[None, :] - col_mean[:, None] + K_mean
    Kc = 0.5 * (Kc + Kc.T)
    lam, vecs = jacobi_eigh(Kc)
    positive = int(np.sum(lam > 1e-10 * max(lam[0], 1e-300)))
    if k > positive:
        log.warning("kernel PCA: only %d positive eigenvalues, reducing k from %d", positive, k)
        k = positive
    if k == 0:
        raise ContractError("centered kernel matrix has no positive eigenvalues")
    lam, vecs = lam[:k], vecs[:, :k]
    proj = KernelPCA(X.copy(), degree, float(c), lam, vecs / np.sqrt(lam), col_mean, K_mean)
    return Kc @ proj.alphas, proj


# ---------------------------------------------------------------- synthesis


@dataclass
class SynthConfig:
    n_samples: int = 2000
    n_views: int = 4
    n_factors: int = 8
    view_dims: Optional[Sequence[int]] = None  # default: 20 per view
    subsets: Optional[Sequence[Sequence[int]]] = None  # default: contiguous disjoint chunks
    weights: Optional[Sequence[float]] = None  # label direction; normalized, default uniform
    noise: float = 0.5
    label_flip: float = 0.05
    seed: int = 0

    def resolved(self) -> tuple[list[int], list[list[int]], np.ndarray]:
        V, k = self.n_views, self.n_factors
        dims = list(self.view_dims) if self.view_dims is not None else [20] * V
        if self.subsets is not None:
            subsets = [sorted(int(i) for i in s) for s in self.subsets]
        else:
            subsets = [list(a) for a in np.array_split(np.arange(k), V)]
        w = np.ones(k) if self.weights is None else np.asarray(self.weights, dtype=np.float64)
        if len(dims) != V or len(subsets) != V:
            raise ContractError("view_dims and subsets need one entry per view")
        if any(len(s) == 0 for s in subsets):
            raise ContractError("every view needs a nonempty factor subset")
        if any(i < 0 or i >= k for s in subsets for i in s):
            raise ContractError("factor index out of range")
        covered = set(i for s in subsets for i in s)
        if not set(np.flatnonzero(w)) <= covered:
            raise ContractError("factor subsets must cover every label-relevant factor")
        if w.shape != (k,) or not np.any(w):
            raise ContractError("weights need n_factors entries, not all zero")
        if not 0.0 <= self.label_flip < 0.5 or self.noise < 0 or self.n_samples < 1:
            raise ContractError("invalid noise, label_flip or n_samples")
        return dims, subsets, w / np.linalg.norm(w)


def synthesize_dataset(cfg: SynthConfig) -> MultiViewDataset:
    """Complete-view synthetic data whose views see complementary latent factors.

    Factors t ~ N(0, I_k); label 1[w.t > 0] flipped with probability
    ``label_flip``; view v = tanh(A_v t[subset_v]) + noise * N(0, 1).
    """
    dims, subsets, w = cfg.resolved()
    rng = make_rng(cfg.seed)
    mixers = [rng.standard_normal((d, len(s))) * (2.0 / math.sqrt(len(s))) for d, s in zip(dims, subsets)]
    t = rng.standard_normal((cfg.n_samples, cfg.n_factors))
    y = (t @ w > 0).astype(int)
    flip = rng.random(cfg.n_samples) < cfg.label_flip
    y = np.where(flip, 1 - y, y)
    views = [np.tanh(t[:, s] @ A.T) + cfg.noise * rng.standard_normal((cfg.n_samples, A.shape[0])) for A, s in zip(mixers, subsets)]
    mask = np.ones((cfg.n_samples, cfg.n_views), dtype=bool)
    return MultiViewDataset(views, mask, y)


# ---------------------------------------------------------------- missingness and splits


def missing_patterns(n_views: int) -> list[tuple[bool, ...]]:
    """The 2^V - 2 nonempty proper subsets of views, as boolean tuples."""
    pats = []
    for size in range(1, n_views):
        for combo in combinations(range(n_views), size):
            pats.append(tuple(v in combo for v in range(n_views)))
    return pats


def apply_missingness(ds: MultiViewDataset, rate: float, rng: np.random.Generator) -> MultiViewDataset:
    """Give floor(N*rate) random samples a uniformly drawn incomplete view pattern."""
    if ds.n_views < 2:
        raise ContractError("missingness needs at least two views")
    if not 0.0 <= rate <= 1.0:
        raise ContractError(f"rate must lie in [0, 1], got {rate}")
    n_inc = int(math.floor(ds.n * rate))
    if n_inc == 0:
        return ds.with_mask(ds.mask.copy())
    pats = np.array(missing_patterns(ds.n_views))
    chosen = rng.choice(ds.n, size=n_inc, replace=False)
    which = rng.integers(0, len(pats), size=n_inc)
    mask = ds.mask.copy()
    mask[chosen] = pats[which]
    # samples that already lacked views keep only views present in both
    new = mask & ds.mask
    fix = ~new.any(axis=1)
    new[fix] = ds.mask[fix]
    return ds.with_mask(new)


def split_dataset(
    ds: MultiViewDataset, fractions: Sequence[float] = (0.64, 0.16, 0.20), rng: Optional[np.random.Generator] = None
) -> tuple[MultiViewDataset, MultiViewDataset, MultiViewDataset]:
    """Random train/validation/test partition; sizes are rounded, the test split takes the remainder."""
    fr = [float(f) for f in fractions]
    if len(fr) != 3 or min(fr) <= 0 or abs(sum(fr) - 1.0) > 1e-9:
        raise ContractError("fractions must be three positive numbers summing to 1")
    rng = rng if rng is not None else make_rng(0)
    perm = rng.permutation(ds.n)
    n_train = int(round(ds.n * fr[0]))
    n_val = int(round(ds.n * fr[1]))
    parts = (perm[:n_train], perm[n_train : n_train + n_val], perm[n_train + n_val :])
    for name, p in zip(("train", "validation", "test"), parts):
        if p.size == 0:
            raise ContractError(f"{name} split would be empty")
    return tuple(ds.subset(np.sort(p)) for p in parts)


def split_indices_hash(*splits: MultiViewDataset) -> str:
    """Stable fingerprint of split membership, used to verify paired comparisons."""
    h = hashlib.sha256()
    for s in splits:
        h.update(",".join(s.ids).encode())
        h.update(b"|")
    return h.hexdigest()


# ---------------------------------------------------------------- labels and imputation


def quartile_binarize(values) -> np.ndarray:
    """Label 1 for values strictly above the nearest-rank 75th percentile."""
    x = np.asarray(values, dtype=np.float64)
    if x.size < 4:
        raise ContractError("need at least 4 values")
    rank = math.ceil(0.75 * x.size)
    threshold = np.sort(x)[rank - 1]
    return (x > threshold).astype(int)


@dataclass
class MeanImputer:
    """Per-view column means over observed samples, fitted once and reused."""

    means: list[np.ndarray] = field(default_factory=list)

    def fit(self, ds: MultiViewDataset) -> "MeanImputer":
        self.means = []
        for v, x in enumerate(ds.views):
            obs = ds.mask[:, v]
            if not obs.any():
                raise ContractError(f"view {v} is observed by no training sample")
            self.means.append(x[obs].mean(axis=0))
        return self

    def transform(self, ds: MultiViewDataset) -> np.ndarray:
        blocks = []
        for v, x in enumerate(ds.views):
            obs = ds.mask[:, [v]]
            blocks.append(np.where(obs, x, self.means[v][None, :]))
        return np.concatenate(blocks, axis=1)


def mean_impute(ds: MultiViewDataset, reference: Optional[MultiViewDataset] = None) -> np.ndarray:
    """Concatenate all views, filling missing blocks with column means of ``reference`` (default: ``ds``)."""
    return MeanImputer().fit(reference if reference is not None else ds).transform(ds)
