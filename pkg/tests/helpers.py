"""Small models and batches shared by the tests."""

import numpy as np

from deepimv.model import Batch, ModelDims, init_params
from deepimv.numerics import make_rng


def small_model(seed=0, view_dims=(4, 3, 5), latent=3, classes=2, enc=(6,), pred=(5,)):
    dims = ModelDims(tuple(view_dims), latent, classes, tuple(enc), tuple(pred))
    params = init_params(dims, make_rng(seed))
    # non-zero biases so every code path carries signal
    params.flat += 0.05 * make_rng(seed + 99).standard_normal(params.size) * (params.flat == 0)
    return params


def random_batch(params, n=6, seed=1, mask=None):
    rng = make_rng(seed)
    views = [rng.standard_normal((n, d)) for d in params.dims.view_dims]
    if mask is None:
        V = params.dims.n_views
        mask = rng.random((n, V)) < 0.6
        mask[np.arange(n), rng.integers(0, V, n)] = True
    mask = np.asarray(mask, dtype=bool)
    views = [np.where(mask[:, [v]], x, 0.0) for v, x in enumerate(views)]
    return Batch(views, mask)


def random_labels(n, classes=2, seed=2):
    return make_rng(seed).integers(0, classes, n)


def fd_gradient(params, loss_at, h=1e-5):
    """Central differences of ``loss_at(flat)`` over every parameter."""
    flat = params.flat.copy()
    out = np.empty(flat.size)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = loss_at(flat)
        flat[i] = orig - h
        down = loss_at(flat)
        flat[i] = orig
        out[i] = (up - down) / (2 * h)
    return out


def max_rel_error(a, b, floor=1e-6):
    return float((np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)).max())
