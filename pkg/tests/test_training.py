import math
from dataclasses import replace

import numpy as np
import pytest

from deepimv.data import MultiViewDataset, SynthConfig, split_dataset, synthesize_dataset
from deepimv.errors import ContractError
from deepimv.losses import total_loss
from deepimv.metrics import auroc_from_probs
from deepimv.model import EVAL, TRAIN, forward, init_params, predict_proba
from deepimv.numerics import Adam, make_rng
from deepimv.training import (
    TrainConfig,
    evaluate_validation,
    grad_check,
    tiny_gradcheck_setup,
    train_deepimv,
    train_step,
)

FAST = dict(lr=3e-3, dropout=0.1, latent_dim=4, encoder_hidden=(8,), predictor_hidden=(8,), batch_size=32, patience=5)


def separable(n=200, seed=0):
    rng = make_rng(seed)
    y = np.arange(n) % 2
    s = 2 * y - 1.0
    v1 = rng.standard_normal((n, 3)) + 1.5 * s[:, None]
    v2 = rng.standard_normal((n, 2)) + 1.5 * s[:, None]
    mask = np.ones((n, 2), dtype=bool)
    mask[rng.random(n) < 0.2, 0] = False
    return MultiViewDataset([v1, v2], mask, y).with_mask(mask)


@pytest.fixture(scope="module")
def splits():
    tr, va, _ = split_dataset(separable(), (0.6, 0.2, 0.2), make_rng(0))
    return tr, va


def test_config_validation():
    for bad in (dict(lr=0), dict(batch_size=0), dict(alpha=-1), dict(patience=0), dict(dropout=1.0), dict(fusion="sum")):
        with pytest.raises(ContractError):
            TrainConfig(**bad)
    cfg = TrainConfig()
    assert (cfg.lr, cfg.alpha, cfg.beta, cfg.dropout, cfg.patience, cfg.epochs) == (1e-4, 1.0, 0.01, 0.7, 20, 500)


def test_training_is_deterministic(splits):
    tr, va = splits
    cfg = TrainConfig(epochs=6, **FAST)
    p1, h1 = train_deepimv(cfg, tr, va)
    p2, h2 = train_deepimv(cfg, tr, va)
    assert h1.to_csv() == h2.to_csv()
    assert np.array_equal(p1.flat, p2.flat)


def test_alpha_zero_freezes_view_predictors(splits):
    tr, va = splits
    cfg = TrainConfig(epochs=3, alpha=0.0, **FAST)
    init = init_params(cfg.dims_for(tr), make_rng(cfg.seed))
    params, hist = train_deepimv(cfg, tr, va, params=init.copy())
    assert np.array_equal(params.group("phi"), init.group("phi"))
    assert not np.array_equal(params.group("theta"), init.group("theta"))


def test_separable_run_learns(splits):
    tr, va = splits
    cfg = TrainConfig(epochs=50, **{**FAST, "patience": 50})
    _, hist = train_deepimv(cfg, tr, va)
    first, last = hist.records[0], hist.records[-1]
    assert last.epoch == 50
    assert last.train.total < first.train.total
    assert max(r.val_auroc for r in hist.records) > 0.9


def test_selected_snapshot_minimizes_validation_loss(splits):
    tr, va = splits
    cfg = TrainConfig(epochs=25, **{**FAST, "lr": 2e-2, "patience": 4})
    params, hist = train_deepimv(cfg, tr, va)
    best = min(hist.records, key=lambda r: r.val.total)
    assert hist.selected_epoch == best.epoch
    rep, _ = evaluate_validation(params, va, cfg)
    assert rep.total == best.val.total
    assert len(hist.records) <= 25


def test_history_csv_layout(splits):
    tr, va = splits
    _, hist = train_deepimv(TrainConfig(epochs=2, **FAST), tr, va)
    lines = hist.to_csv().splitlines()
    assert lines[0] == "epoch,train_total,val_total,val_auroc,selected"
    assert len(lines) == 3 and sum(int(l.rsplit(",", 1)[1]) for l in lines[1:]) == 1


def test_evaluate_validation_composition(splits):
    tr, va = splits
    cfg = TrainConfig(**FAST)
    params = init_params(cfg.dims_for(tr), make_rng(1))
    rep, score = evaluate_validation(params, va, cfg)
    again = evaluate_validation(params, va, cfg)
    assert (rep.total, score) == (again[0].total, again[1])
    assert score == auroc_from_probs(predict_proba(params, va.batch(), cfg.fusion), va.labels)
    ref, _ = total_loss(params, forward(params, va.batch(), cfg.fusion, EVAL), va.labels, cfg.alpha, cfg.beta, need_grad=False)
    assert rep.total == ref.total


def test_evaluate_validation_perfect_separation():
    ds = separable(40)
    cfg = TrainConfig(**FAST)
    params = init_params(cfg.dims_for(ds), make_rng(0))
    params.flat[:] = 0.0
    # route the sign of view 2's first feature straight to the class logits
    enc = params.encoders[1]
    enc.weights[0][0, 0] = 1.0
    enc.weights[1][0, 0] = 1.0
    jp = params.joint_predictor
    jp.weights[0][0, 0] = 1.0
    jp.weights[1][1, 0] = 1.0
    pure = ds.with_mask(np.tile([False, True], (40, 1)))
    pure.views[1][:, 0] = np.where(pure.labels == 1, 2.0, -2.0)
    _, score = evaluate_validation(params, pure, cfg)
    assert score == 1.0


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_initial_loss_smoke_bound(seed):
    from deepimv.data import apply_missingness

    tr = apply_missingness(synthesize_dataset(SynthConfig(n_samples=400, seed=seed)), 0.5, make_rng(seed))
    cfg = TrainConfig()
    params = init_params(cfg.dims_for(tr), make_rng(seed))
    fr = forward(params, tr.batch(), cfg.fusion, EVAL)
    rep, _ = total_loss(params, fr, tr.labels, 1.0, 0.0, need_grad=False)
    v_bar = tr.mask.sum(axis=1).mean()
    assert rep.total == pytest.approx((1 + v_bar) * math.log(2), rel=0.2)


def test_nan_in_masked_features_keeps_training_finite(splits):
    tr, va = splits
    poisoned = MultiViewDataset([np.where(tr.mask[:, [v]], x, np.nan) for v, x in enumerate(tr.views)], tr.mask, tr.labels, tr.ids)
    cfg = TrainConfig(epochs=2, **FAST)
    p1, h1 = train_deepimv(cfg, tr, va)
    p2, h2 = train_deepimv(cfg, poisoned, va)
    assert np.array_equal(p1.flat, p2.flat) and h1.to_csv() == h2.to_csv()


def test_train_step_updates_all_groups(splits):
    tr, _ = splits
    cfg = TrainConfig(**FAST)
    params = init_params(cfg.dims_for(tr), make_rng(0))
    before = params.copy()
    train_step(params, Adam(params.size), tr.batch().take(np.arange(16)), tr.labels[:16], cfg, make_rng(1))
    for g in ("theta", "phi", "psi"):
        assert not np.array_equal(params.group(g), before.group(g))


def test_rejects_bad_sets(splits):
    tr, va = splits
    cfg = TrainConfig(epochs=1, **FAST)
    with pytest.raises(ContractError):
        train_deepimv(cfg, tr.subset([]), va)
    bad = MultiViewDataset(va.views, va.mask, np.full(va.n, 5))
    with pytest.raises(ContractError):
        train_deepimv(cfg, tr, bad, n_classes=2)


# ---------------------------------------------------------------- gradient check


def test_builtin_gradcheck_passes_and_is_deterministic():
    cfg, ds = tiny_gradcheck_setup()
    a, b = grad_check(cfg, ds), grad_check(cfg, ds)
    assert a.passed and a.max_rel_error < 1e-4
    assert a == b


@pytest.mark.parametrize("fusion", ["poe", "moe"])
@pytest.mark.parametrize("mode", [TRAIN, EVAL])
def test_gradcheck_all_fusions_and_modes(fusion, mode):
    cfg, ds = tiny_gradcheck_setup(seed=3)
    assert grad_check(replace(cfg, fusion=fusion), ds, mode=mode).max_rel_error < 1e-4


def test_zero_loss_configuration_has_tiny_gradients():
    cfg, ds = tiny_gradcheck_setup()
    cfg = replace(cfg, alpha=0.0, beta=0.0, dropout=0.0)
    params = init_params(cfg.dims_for(ds), make_rng(0))
    jp = params.joint_predictor
    jp.weights[-1][:] = 0.0
    jp.biases[-1][:] = 0.0
    # a huge label-dependent bias is impossible without inputs, so use single-class labels
    one = MultiViewDataset(ds.views, ds.mask, np.zeros(ds.n, int))
    jp.biases[-1][0] = 60.0
    fr = forward(params, one.batch(), cfg.fusion, EVAL)
    rep, g = total_loss(params, fr, one.labels, 0.0, 0.0, need_grad=True)
    assert rep.total < 1e-20 and np.abs(g.flat).max() < 1e-20


def test_gradcheck_parameter_limit():
    ds = synthesize_dataset(SynthConfig(n_samples=10, seed=0))
    with pytest.raises(ContractError):
        grad_check(TrainConfig(), ds)
