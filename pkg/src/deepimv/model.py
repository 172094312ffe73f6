"""The DeepIMV network: per-view Gaussian encoders, expert fusion, view-specific and joint predictors."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ContractError, LoadError, ShapeError
from .gaussian import (
    LOG_VAR_MAX,
    LOG_VAR_MIN,
    DiagGaussian,
    GaussianMixture,
    clamp_log_var,
    moe_combine,
    poe_combine,
)
from .numerics import EVAL, TRAIN, MlpCache, MlpParams, mlp_apply, mlp_backprop, softmax, xavier_init

POE = "poe"
MOE = "moe"
SCHEMA_VERSION = 1

GROUPS = ("theta", "phi", "psi")


@dataclass(frozen=True)
class ModelDims:
    view_dims: tuple[int, ...]
    latent_dim: int = 50
    n_classes: int = 2
    encoder_hidden: tuple[int, ...] = (100, 100)
    predictor_hidden: tuple[int, ...] = (100, 100)

    def __post_init__(self) -> None:
        object.__setattr__(self, "view_dims", tuple(int(d) for d in self.view_dims))
        object.__setattr__(self, "encoder_hidden", tuple(int(h) for h in self.encoder_hidden))
        object.__setattr__(self, "predictor_hidden", tuple(int(h) for h in self.predictor_hidden))
        if not self.view_dims or min(self.view_dims) < 1:
            raise ContractError("need at least one view with positive dimension")
        if self.latent_dim < 1 or self.n_classes < 2:
            raise ContractError("latent_dim >= 1 and n_classes >= 2 required")
        if any(h < 1 for h in self.encoder_hidden + self.predictor_hidden):
            raise ContractError("hidden widths must be positive")

    @property
    def n_views(self) -> int:
        return len(self.view_dims)

    def to_dict(self) -> dict:
        return {
            "view_dims": list(self.view_dims),
            "latent_dim": self.latent_dim,
            "n_classes": self.n_classes,
            "encoder_hidden": list(self.encoder_hidden),
            "predictor_hidden": list(self.predictor_hidden),
        }


def _mlp_layout(prefix: str, sizes: Sequence[int], group: str) -> list[tuple[str, tuple[int, ...], str]]:
    out = []
    for k, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        out.append((f"{prefix}.layer{k}.weight", (b, a), group))
        out.append((f"{prefix}.layer{k}.bias", (b,), group))
    return out


def param_layout(dims: ModelDims) -> list[tuple[str, tuple[int, ...], str]]:
    """Ordered (name, shape, group) entries of the flat parameter vector.

    Each encoder's last layer stacks the mean head (rows ``:D``) over the
    log-variance head (rows ``D:``).
    """
    D, C = dims.latent_dim, dims.n_classes
    layout = []
    for v, d in enumerate(dims.view_dims):
        layout += _mlp_layout(f"encoder{v}", (d, *dims.encoder_hidden, 2 * D), "theta")
    for v in range(dims.n_views):
        layout += _mlp_layout(f"view_predictor{v}", (D, *dims.predictor_hidden, C), "phi")
    layout += _mlp_layout("joint_predictor", (D, *dims.predictor_hidden, C), "psi")
    return layout


class DeepIMVParams:
    """All trainable parameters stored in one flat float64 vector.

    ``encoders``, ``view_predictors`` and ``joint_predictor`` are MlpParams
    whose arrays are views into ``flat``, so optimizers can update the
    vector in place.
    """

    def __init__(self, dims: ModelDims, flat: Optional[np.ndarray] = None):
        self.dims = dims
        self.layout = param_layout(dims)
        size = sum(int(np.prod(shape)) for _, shape, _ in self.layout)
        if flat is None:
            flat = np.zeros(size)
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (size,):
            raise ShapeError(f"flat parameter vector has shape {flat.shape}, expected ({size},)")
        self.flat = flat
        self.named: dict[str, np.ndarray] = {}
        self.group_slices: dict[str, slice] = {}
        offset = 0
        for name, shape, group in self.layout:
            n = int(np.prod(shape))
            self.named[name] = flat[offset : offset + n].reshape(shape)
            start = self.group_slices.get(group, slice(offset, offset)).start
            self.group_slices[group] = slice(start, offset + n)
            offset += n
        V = dims.n_views
        self.encoders = [self._mlp(f"encoder{v}") for v in range(V)]
        self.view_predictors = [self._mlp(f"view_predictor{v}") for v in range(V)]
        self.joint_predictor = self._mlp("joint_predictor")

    def _mlp(self, prefix: str) -> MlpParams:
        ws, bs = [], []
        k = 0
        while f"{prefix}.layer{k}.weight" in self.named:
            ws.append(self.named[f"{prefix}.layer{k}.weight"])
            bs.append(self.named[f"{prefix}.layer{k}.bias"])
            k += 1
        return MlpParams(ws, bs)

    @property
    def size(self) -> int:
        return self.flat.size

    def group(self, name: str) -> np.ndarray:
        """View of the flat vector for 'theta' (encoders), 'phi' (view predictors) or 'psi'."""
        return self.flat[self.group_slices[name]]

    def copy(self) -> "DeepIMVParams":
        return DeepIMVParams(self.dims, self.flat.copy())

    def zeros_like(self) -> "DeepIMVParams":
        return DeepIMVParams(self.dims)

    def mean_head(self, v: int) -> tuple[np.ndarray, np.ndarray]:
        D = self.dims.latent_dim
        enc = self.encoders[v]
        return enc.weights[-1][:D], enc.biases[-1][:D]

    def log_var_head(self, v: int) -> tuple[np.ndarray, np.ndarray]:
        D = self.dims.latent_dim
        enc = self.encoders[v]
        return enc.weights[-1][D:], enc.biases[-1][D:]


def init_params(dims: ModelDims, rng: np.random.Generator) -> DeepIMVParams:
    """Xavier-uniform weights, zero biases. The two encoder heads are initialized as separate layers."""
    params = DeepIMVParams(dims)
    D = dims.latent_dim
    for name, shape, _ in params.layout:
        if not name.endswith(".weight"):
            continue
        arr = params.named[name]
        if name.startswith("encoder") and arr.shape[0] == 2 * D and name.endswith(f"layer{len(dims.encoder_hidden)}.weight"):
            arr[:D] = xavier_init(shape[1], D, rng)
            arr[D:] = xavier_init(shape[1], D, rng)
        else:
            arr[...] = xavier_init(shape[1], shape[0], rng)
    return params


@dataclass
class Batch:
    """View matrices (rows of masked views are never read) plus an (N, V) boolean mask."""

    views: list[np.ndarray]
    mask: np.ndarray

    def __post_init__(self) -> None:
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.ndim != 2 or self.mask.shape[1] != len(self.views):
            raise ShapeError(f"mask shape {self.mask.shape} does not match {len(self.views)} views")
        n = self.mask.shape[0]
        for v, x in enumerate(self.views):
            if x.ndim != 2 or x.shape[0] != n:
                raise ShapeError(f"view {v} has shape {x.shape}, expected ({n}, d)")

    @property
    def n(self) -> int:
        return self.mask.shape[0]

    def take(self, idx) -> "Batch":
        return Batch([x[idx] for x in self.views], self.mask[idx])

    def with_mask(self, mask: np.ndarray) -> "Batch":
        return Batch(self.views, mask)


@dataclass
class Noise:
    """Random draws of one train-mode forward pass; replaying them freezes the noise."""

    encoder_masks: list[Optional[list]]
    view_eps: list[Optional[np.ndarray]]
    view_pred_masks: list[Optional[list]]
    joint_eps: Optional[np.ndarray]
    joint_pred_masks: Optional[list]
    moe_choice: Optional[np.ndarray] = None


@dataclass
class ForwardResult:
    """Outputs of one forward pass.

    Per-view entries (``rows``, ``marginals``, ``view_probs``, ``z_views``)
    are restricted to the samples that observe view v; they are None when no
    sample in the batch observes it.
    """

    mode: str
    fusion: str
    rows: list[np.ndarray]
    marginals: list[Optional[DiagGaussian]]
    joint: DiagGaussian
    view_probs: list[Optional[np.ndarray]]
    joint_probs: np.ndarray
    z_views: list[Optional[np.ndarray]]
    z_joint: np.ndarray
    noise: Noise
    mixture: Optional[GaussianMixture] = None
    mask: Optional[np.ndarray] = None
    # internals for backward
    raw_log_vars: list[Optional[np.ndarray]] = field(default_factory=list)
    encoder_caches: list[Optional[MlpCache]] = field(default_factory=list)
    view_pred_caches: list[Optional[MlpCache]] = field(default_factory=list)
    joint_pred_cache: Optional[MlpCache] = None


def _check_mask(mask: np.ndarray) -> None:
    empty = np.flatnonzero(~mask.any(axis=1))
    if empty.size:
        raise ContractError(f"no observed views for sample {int(empty[0])}")


def encode_view(
    params: DeepIMVParams,
    v: int,
    x_v: np.ndarray,
    mode: str = EVAL,
    dropout_rate: float = 0.0,
    rng: Optional[np.random.Generator] = None,
    masks=None,
) -> tuple[DiagGaussian, np.ndarray, MlpCache]:
    """Encoder trunk plus the two heads; returns the posterior, the unclamped log-variance and the cache."""
    x_v = np.asarray(x_v, dtype=np.float64)
    if x_v.ndim != 2 or x_v.shape[1] != params.dims.view_dims[v]:
        raise ShapeError(f"view {v} input has shape {x_v.shape}, expected (n, {params.dims.view_dims[v]})")
    out, cache = mlp_apply(params.encoders[v], x_v, mode, dropout_rate, rng, masks)
    D = params.dims.latent_dim
    raw = out[:, D:]
    return DiagGaussian(out[:, :D], clamp_log_var(raw)), raw, cache


def _full(n: int, rows: np.ndarray, values: np.ndarray, fill: float = 0.0) -> np.ndarray:
    out = np.full((n, values.shape[1]), fill)
    out[rows] = values
    return out


def joint_posterior(
    marginals: Sequence[Optional[DiagGaussian]],
    mask: np.ndarray,
    fusion: str = POE,
    prior: Optional[DiagGaussian] = None,
):
    """Fuse full-batch marginals (N, D) according to ``mask``.

    Rows where a view is masked are ignored whatever they contain. Returns a
    DiagGaussian for PoE and a per-row GaussianMixture for MoE.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim == 1:
        mask = mask[None, :]
    _check_mask(mask)
    present = [v for v in range(mask.shape[1]) if mask[:, v].any()]
    experts = []
    for v in range(mask.shape[1]):
        g = marginals[v]
        if g is None:
            if v in present:
                raise ContractError(f"view {v} is observed but has no marginal")
            continue
        mean = np.where(mask[:, v][:, None], np.atleast_2d(g.mean), 0.0)
        lv = np.where(mask[:, v][:, None], np.atleast_2d(g.log_var), 0.0)
        experts.append((v, DiagGaussian(mean, lv)))
    if fusion == POE:
        dim = experts[0][1].dim
        if prior is None:
            prior = DiagGaussian.standard(dim)
        return poe_combine(prior, [e for _, e in experts], mask[:, [v for v, _ in experts]])
    if fusion == MOE:
        weights = mask[:, [v for v, _ in experts]].T.astype(float)
        weights /= weights.sum(axis=0, keepdims=True)
        return moe_combine([e for _, e in experts], weights)
    raise ContractError(f"unknown fusion {fusion!r}")


def forward(
    params: DeepIMVParams,
    batch: Batch,
    fusion: str = POE,
    mode: str = EVAL,
    rng: Optional[np.random.Generator] = None,
    dropout_rate: float = 0.0,
    noise: Optional[Noise] = None,
) -> ForwardResult:
    """Run encoders, fusion and all predictors.

    In train mode latents are sampled (and dropout applied) from ``rng``, or
    replayed from ``noise``; in eval mode latents are posterior means.
    """
    if mode not in (TRAIN, EVAL):
        raise ContractError(f"mode must be 'train' or 'eval', got {mode!r}")
    if fusion not in (POE, MOE):
        raise ContractError(f"unknown fusion {fusion!r}")
    if batch.n == 0:
        raise ContractError("empty batch")
    dims = params.dims
    if len(batch.views) != dims.n_views:
        raise ShapeError(f"batch has {len(batch.views)} views, model expects {dims.n_views}")
    mask = batch.mask
    _check_mask(mask)
    train = mode == TRAIN
    if train and noise is None and rng is None:
        raise ContractError("train mode needs an rng or recorded noise")
    n, V, D = batch.n, dims.n_views, dims.latent_dim
    drop = dropout_rate if train else 0.0

    rec = Noise([None] * V, [None] * V, [None] * V, None, None)
    rows, marginals, raws, enc_caches = [], [], [], []
    view_probs, z_views, pred_caches = [], [], []
    full_means, full_lvs = [], []
    for v in range(V):
        r = np.flatnonzero(mask[:, v])
        rows.append(r)
        if r.size == 0:
            for lst in (marginals, raws, enc_caches, view_probs, z_views, pred_caches):
                lst.append(None)
            full_means.append(None)
            full_lvs.append(None)
            continue
        q, raw, cache = encode_view(
            params, v, batch.views[v][r], mode, drop, rng, noise.encoder_masks[v] if noise else None
        )
        rec.encoder_masks[v] = cache.masks
        if train:
            eps = noise.view_eps[v] if noise else rng.standard_normal(q.mean.shape)
            z = q.mean + eps * q.std
            rec.view_eps[v] = eps
        else:
            z = q.mean
        logits, pcache = mlp_apply(
            params.view_predictors[v], z, mode, drop, rng, noise.view_pred_masks[v] if noise else None
        )
        rec.view_pred_masks[v] = pcache.masks
        marginals.append(q)
        raws.append(raw)
        enc_caches.append(cache)
        z_views.append(z)
        view_probs.append(softmax(logits))
        pred_caches.append(pcache)
        full_means.append(_full(n, r, q.mean))
        full_lvs.append(_full(n, r, q.log_var))

    full = [None if m is None else DiagGaussian(m, l) for m, l in zip(full_means, full_lvs)]
    fused = joint_posterior(full, mask, fusion)
    mixture = None
    if fusion == POE:
        joint = fused
        if train:
            eps = noise.joint_eps if noise else rng.standard_normal((n, D))
            z_joint = joint.mean + eps * joint.std
            rec.joint_eps = eps
        else:
            z_joint = joint.mean
    else:
        mixture = fused
        joint = mixture.moment_match()
        if train:
            if noise is not None:
                choice = noise.moe_choice
            else:
                # uniform over each row's observed views
                counts = mask.sum(axis=1)
                pick = np.floor(rng.random(n) * counts).astype(int)
                order = np.cumsum(mask, axis=1) - 1
                choice = np.argmax(mask & (order == pick[:, None]), axis=1)
            eps = noise.joint_eps if noise else rng.standard_normal((n, D))
            means = np.stack([full_means[v] if full_means[v] is not None else np.zeros((n, D)) for v in range(V)])
            lvs = np.stack([full_lvs[v] if full_lvs[v] is not None else np.zeros((n, D)) for v in range(V)])
            sel_mean = means[choice, np.arange(n)]
            sel_lv = lvs[choice, np.arange(n)]
            z_joint = sel_mean + eps * np.exp(0.5 * sel_lv)
            rec.joint_eps = eps
            rec.moe_choice = choice
        else:
            z_joint = joint.mean
    logits, jcache = mlp_apply(params.joint_predictor, z_joint, mode, drop, rng, noise.joint_pred_masks if noise else None)
    rec.joint_pred_masks = jcache.masks
    return ForwardResult(
        mode=mode,
        fusion=fusion,
        rows=rows,
        marginals=marginals,
        joint=joint,
        view_probs=view_probs,
        joint_probs=softmax(logits),
        z_views=z_views,
        z_joint=z_joint,
        noise=rec,
        mixture=mixture,
        mask=mask.copy(),
        raw_log_vars=raws,
        encoder_caches=enc_caches,
        view_pred_caches=pred_caches,
        joint_pred_cache=jcache,
    )


@dataclass
class UpstreamGrads:
    """Loss gradients with respect to forward outputs (logits and posterior parameters)."""

    joint_logits: Optional[np.ndarray] = None
    joint_mean: Optional[np.ndarray] = None
    joint_log_var: Optional[np.ndarray] = None
    view_logits: list = field(default_factory=list)
    view_mean: list = field(default_factory=list)
    view_log_var: list = field(default_factory=list)


def _add(a: Optional[np.ndarray], b: Optional[np.ndarray]) -> Optional[np.ndarray]:
    if b is None:
        return a
    return b.copy() if a is None else a + b


def backward(params: DeepIMVParams, fr: ForwardResult, up: UpstreamGrads) -> DeepIMVParams:
    """Backpropagate upstream gradients through predictors, sampling, fusion and encoders."""
    grads = params.zeros_like()
    dims = params.dims
    V, D = dims.n_views, dims.latent_dim
    mask = fr.mask
    n = mask.shape[0]
    train = fr.mode == TRAIN

    d_mean_v: list[Optional[np.ndarray]] = [None] * V
    d_lv_v: list[Optional[np.ndarray]] = [None] * V

    # joint path
    d_jm = up.joint_mean
    d_jlv = up.joint_log_var
    if up.joint_logits is not None:
        g, dz = mlp_backprop(fr.joint_pred_cache, up.joint_logits)
        _accumulate(grads.joint_predictor, g)
        if fr.fusion == POE:
            d_jm = _add(d_jm, dz)
            if train:
                d_jlv = _add(d_jlv, dz * fr.noise.joint_eps * 0.5 * fr.joint.std)
        elif train:
            choice = fr.noise.moe_choice
            for v in range(V):
                sel = np.flatnonzero(choice == v)
                if sel.size == 0:
                    continue
                pos = np.searchsorted(fr.rows[v], sel)
                q = fr.marginals[v]
                dm = np.zeros((fr.rows[v].size, D))
                dl = np.zeros((fr.rows[v].size, D))
                dm[pos] = dz[sel]
                dl[pos] = dz[sel] * fr.noise.joint_eps[sel] * 0.5 * q.std[pos]
                d_mean_v[v] = _add(d_mean_v[v], dm)
                d_lv_v[v] = _add(d_lv_v[v], dl)
        else:
            d_jm = _add(d_jm, dz)

    if d_jm is not None or d_jlv is not None:
        d_jm = np.zeros((n, D)) if d_jm is None else d_jm
        d_jlv = np.zeros((n, D)) if d_jlv is None else d_jlv
        m = fr.joint.mean
        if fr.fusion == POE:
            inv_prec = np.exp(fr.joint.log_var)  # 1 / total precision
            for v in range(V):
                r = fr.rows[v]
                if r.size == 0:
                    continue
                q = fr.marginals[v]
                w = np.exp(-q.log_var) * inv_prec[r]
                d_mean_v[v] = _add(d_mean_v[v], d_jm[r] * w)
                d_lv_v[v] = _add(d_lv_v[v], w * (d_jlv[r] - d_jm[r] * (q.mean - m[r])))
        else:
            counts = mask.sum(axis=1)
            d_var = d_jlv * np.exp(-fr.joint.log_var)
            for v in range(V):
                r = fr.rows[v]
                if r.size == 0:
                    continue
                q = fr.marginals[v]
                a = (1.0 / counts[r])[:, None]
                d_mean_v[v] = _add(d_mean_v[v], a * d_jm[r] + d_var[r] * a * 2.0 * (q.mean - m[r]))
                d_lv_v[v] = _add(d_lv_v[v], d_var[r] * a * q.var)

    # view-specific paths
    for v in range(V):
        if fr.rows[v].size == 0:
            continue
        q = fr.marginals[v]
        if v < len(up.view_logits) and up.view_logits[v] is not None:
            g, dz = mlp_backprop(fr.view_pred_caches[v], up.view_logits[v])
            _accumulate(grads.view_predictors[v], g)
            d_mean_v[v] = _add(d_mean_v[v], dz)
            if train:
                d_lv_v[v] = _add(d_lv_v[v], dz * fr.noise.view_eps[v] * 0.5 * q.std)
        if v < len(up.view_mean):
            d_mean_v[v] = _add(d_mean_v[v], up.view_mean[v])
            d_lv_v[v] = _add(d_lv_v[v], up.view_log_var[v])
        if d_mean_v[v] is None and d_lv_v[v] is None:
            continue
        dm = np.zeros_like(q.mean) if d_mean_v[v] is None else d_mean_v[v]
        dl = np.zeros_like(q.mean) if d_lv_v[v] is None else d_lv_v[v]
        raw = fr.raw_log_vars[v]
        dl = dl * ((raw > LOG_VAR_MIN) & (raw < LOG_VAR_MAX))
        g, _ = mlp_backprop(fr.encoder_caches[v], np.concatenate([dm, dl], axis=1))
        _accumulate(grads.encoders[v], g)
    return grads


def _accumulate(target: MlpParams, g: MlpParams) -> None:
    for t, s in zip(target.arrays(), g.arrays()):
        t += s


def predict_proba(
    params: DeepIMVParams,
    batch: Batch,
    fusion: str = POE,
    n_samples: int = 0,
    rng: Optional[np.random.Generator] = None,
) -> np.ndarray:
    """Joint class probabilities from an eval-mode pass.

    With ``n_samples > 0`` the joint latent is sampled that many times and the
    predicted distributions are averaged (no dropout); otherwise the posterior
    mean is used. For two classes, column 1 is the positive-class score.
    """
    fr = forward(params, batch, fusion, EVAL)
    if n_samples <= 0:
        return fr.joint_probs
    if rng is None:
        raise ContractError("Monte Carlo prediction needs an rng")
    acc = np.zeros_like(fr.joint_probs)
    for _ in range(n_samples):
        # MoE draws from the moment-matched Gaussian
        z = fr.joint.mean + rng.standard_normal(fr.joint.mean.shape) * fr.joint.std
        logits, _ = mlp_apply(params.joint_predictor, z)
        acc += softmax(logits)
    return acc / n_samples


def save_params(params: DeepIMVParams, path) -> None:
    doc = {
        "schema": SCHEMA_VERSION,
        "dims": params.dims.to_dict(),
        "arrays": {name: arr.tolist() for name, arr in params.named.items()},
    }
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)
    os.replace(tmp, path)


def load_params(path) -> DeepIMVParams:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise LoadError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("schema") != SCHEMA_VERSION:
        raise LoadError(f"checkpoint {path}: unsupported schema {doc.get('schema') if isinstance(doc, dict) else None!r}")
    try:
        d = doc["dims"]
        dims = ModelDims(
            tuple(d["view_dims"]), int(d["latent_dim"]), int(d["n_classes"]),
            tuple(d["encoder_hidden"]), tuple(d["predictor_hidden"]),
        )
        arrays = doc["arrays"]
    except (KeyError, TypeError, ValueError, ContractError) as exc:
        raise LoadError(f"checkpoint {path}: malformed dims: {exc}") from exc
    params = DeepIMVParams(dims)
    if set(arrays) != set(params.named):
        raise LoadError(f"checkpoint {path}: parameter names do not match dims")
    for name, target in params.named.items():
        try:
            arr = np.asarray(arrays[name], dtype=np.float64)
        except (TypeError, ValueError) as exc:
            raise LoadError(f"checkpoint {path}: {name}: {exc}") from exc
        if arr.shape != target.shape:
            raise LoadError(f"checkpoint {path}: {name} has shape {arr.shape}, expected {target.shape}")
        target[...] = arr
    return params
