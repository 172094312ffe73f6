import csv
import math
import os

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from deepimv.data import (
    MultiViewDataset,
    SynthConfig,
    apply_missingness,
    kernel_pca_polynomial,
    load_dataset,
    mean_impute,
    missing_patterns,
    quartile_binarize,
    save_dataset,
    split_dataset,
    synthesize_dataset,
)
from deepimv.errors import ContractError, LoadError
from deepimv.numerics import make_rng


def _write(path, rows):
    with open(path, "w", newline="") as fh:
        csv.writer(fh).writerows(rows)


@pytest.fixture
def data_dir(tmp_path):
    _write(tmp_path / "labels.csv", [["id", "y"], ["a", 0], ["b", 1], ["c", 1]])
    _write(tmp_path / "view_1.csv", [["id", "x1", "x2"], ["a", 1, 2], ["b", 3, 4], ["c", 5, 6]])
    _write(tmp_path / "view_2.csv", [["id", "z"], ["a", 7], ["c", 9]])
    return tmp_path


# ---------------------------------------------------------------- loading


def test_load_complete_views_without_mask(data_dir):
    os.remove(data_dir / "view_2.csv")
    ds = load_dataset(str(data_dir))
    assert ds.mask.all() and ds.view_dims == (2,)
    assert ds.ids == ["a", "b", "c"] and list(ds.labels) == [0, 1, 1]


def test_absent_row_marks_view_missing(data_dir):
    ds = load_dataset(str(data_dir))
    assert ds.mask.tolist() == [[True, True], [True, False], [True, True]]
    assert ds.views[1][1, 0] == 0.0


def test_nan_cell_gets_observed_column_mean(data_dir):
    _write(data_dir / "view_1.csv", [["id", "x1", "x2"], ["a", 1, 2], ["b", "", 4], ["c", 5, "NaN"]])
    ds = load_dataset(str(data_dir))
    assert ds.views[0][1, 0] == (1 + 5) / 2
    assert ds.views[0][2, 1] == (2 + 4) / 2


def test_mask_file_overrides_presence(data_dir):
    _write(data_dir / "mask.csv", [["id", "v1", "v2"], ["a", 1, 0], ["b", 1, 0], ["c", 0, 1]])
    ds = load_dataset(str(data_dir))
    assert ds.mask.tolist() == [[True, False], [True, False], [False, True]]
    assert np.all(ds.views[1][0] == 0) and np.all(ds.views[0][2] == 0)


def test_load_errors_name_file_and_row(data_dir):
    _write(data_dir / "view_1.csv", [["id", "x1", "x2"], ["a", 1, 2], ["b", "oops", 4]])
    with pytest.raises(LoadError, match=r"view_1\.csv: row 3"):
        load_dataset(str(data_dir))
    _write(data_dir / "view_1.csv", [["id", "x1", "x2"], ["zz", 1, 2]])
    with pytest.raises(LoadError, match="unknown id"):
        load_dataset(str(data_dir))


def test_sample_without_views_is_a_load_error(data_dir):
    _write(data_dir / "view_1.csv", [["id", "x1", "x2"], ["a", 1, 2], ["c", 5, 6]])
    _write(data_dir / "view_2.csv", [["id", "z"], ["a", 7]])
    with pytest.raises(LoadError, match="'b' has zero observed views"):
        load_dataset(str(data_dir))


def test_save_load_round_trip_is_exact(tmp_path):
    ds = apply_missingness(synthesize_dataset(SynthConfig(n_samples=40, n_views=3, seed=2)), 0.5, make_rng(0))
    save_dataset(ds, str(tmp_path))
    back = load_dataset(str(tmp_path))
    assert np.array_equal(back.mask, ds.mask) and np.array_equal(back.labels, ds.labels)
    assert all(np.array_equal(a, b) for a, b in zip(back.views, ds.views))


# ---------------------------------------------------------------- kernel PCA


def test_linear_kernel_reproduces_pca_up_to_sign():
    X = make_rng(0).standard_normal((30, 4))
    scores, _ = kernel_pca_polynomial(X, degree=1, c=0.0, k=3)
    Xc = X - X.mean(axis=0)
    _, _, vt = np.linalg.svd(Xc, full_matrices=False)
    ref = Xc @ vt[:3].T
    for j in range(3):
        sign = np.sign(ref[:, j] @ scores[:, j])
        assert np.allclose(scores[:, j], sign * ref[:, j], atol=1e-8)


def test_duplicate_rows_project_identically():
    X = make_rng(1).standard_normal((8, 3))
    X[5] = X[2]
    scores, _ = kernel_pca_polynomial(X, degree=2, k=4)
    assert np.allclose(scores[5], scores[2], atol=1e-12)


def test_scores_reconstruct_centered_gram():
    X = make_rng(2).standard_normal((5, 3))
    scores, proj = kernel_pca_polynomial(X, degree=2, c=1.0, k=4)
    K = (X @ X.T + 1.0) ** 2
    J = np.eye(5) - 1 / 5
    Kc = J @ K @ J
    # 5 centered points span at most 4 directions, so k = 4 is full rank
    recon = scores @ scores.T
    assert np.abs(recon - Kc).max() < 1e-6


@given(st.integers(0, 2**31), st.integers(4, 15))
def test_out_of_sample_matches_in_sample(seed, n):
    X = make_rng(seed).standard_normal((n, 3))
    scores, proj = kernel_pca_polynomial(X, degree=3, c=1.0, k=min(n - 1, 5))
    assert np.abs(proj.transform(X) - scores).max() < 1e-8


def test_kernel_pca_shrinks_k_with_warning(caplog):
    X = make_rng(3).standard_normal((6, 2))
    scores, _ = kernel_pca_polynomial(X, degree=1, c=0.0, k=5)
    assert scores.shape == (6, 2)
    assert "reducing k" in caplog.text


# ---------------------------------------------------------------- synthesis


def test_synthesis_is_reproducible():
    a = synthesize_dataset(SynthConfig(n_samples=50, seed=4))
    b = synthesize_dataset(SynthConfig(n_samples=50, seed=4))
    assert all(np.array_equal(x, y) for x, y in zip(a.views, b.views)) and np.array_equal(a.labels, b.labels)


def test_label_prior_near_half():
    ds = synthesize_dataset(SynthConfig(n_samples=2000, seed=0))
    assert abs(ds.labels.mean() - 0.5) <= 0.03


def test_aligned_factor_single_view_is_learnable():
    from deepimv.evaluation.baselines import fit_mlp_classifier
    from deepimv.metrics import auroc_from_probs
    from deepimv.training import TrainConfig

    w = np.zeros(8)
    w[0] = 1.0
    ds = synthesize_dataset(SynthConfig(n_samples=2000, noise=0.0, label_flip=0.0, weights=w, seed=1))
    tr, va, te = split_dataset(ds, rng=make_rng(0))
    cfg = TrainConfig(epochs=60, lr=3e-3, dropout=0.0, batch_size=64, patience=10)
    clf, _ = fit_mlp_classifier(tr.views[0], tr.labels, va.views[0], va.labels, (32,), 2, cfg, make_rng(0))
    assert auroc_from_probs(clf.predict_proba(te.views[0]), te.labels) > 0.95


def test_synthesis_rejects_uncovered_factors():
    with pytest.raises(ContractError):
        synthesize_dataset(SynthConfig(n_views=2, n_factors=4, subsets=[[0], [1]]))


# ---------------------------------------------------------------- missingness


def test_rate_zero_leaves_dataset_unchanged():
    ds = synthesize_dataset(SynthConfig(n_samples=30, seed=0))
    out = apply_missingness(ds, 0.0, make_rng(0))
    assert out.mask.all() and all(np.array_equal(a, b) for a, b in zip(out.views, ds.views))


def test_rate_one_two_views_single_view_each():
    ds = synthesize_dataset(SynthConfig(n_samples=40, n_views=2, n_factors=4, seed=0))
    out = apply_missingness(ds, 1.0, make_rng(1))
    assert np.all(out.mask.sum(axis=1) == 1)


def test_pattern_frequencies_uniform():
    ds = synthesize_dataset(SynthConfig(n_samples=1000, n_views=3, n_factors=6, seed=0))
    out = apply_missingness(ds, 0.6, make_rng(2))
    inc = out.mask[~out.mask.all(axis=1)]
    assert len(inc) == 600
    for pat in missing_patterns(3):
        assert abs(np.mean(np.all(inc == pat, axis=1)) - 1 / 6) < 0.05


@given(st.integers(2, 5), st.floats(0, 1), st.integers(0, 2**31))
def test_missingness_never_empties_a_sample(V, rate, seed):
    ds = synthesize_dataset(SynthConfig(n_samples=25, n_views=V, n_factors=V, seed=0))
    out = apply_missingness(ds, rate, make_rng(seed))
    assert out.mask.any(axis=1).all()
    assert (~out.mask.all(axis=1)).sum() == math.floor(25 * rate)
    assert len(missing_patterns(V)) == 2**V - 2


# ---------------------------------------------------------------- splits


def _ds(n):
    return MultiViewDataset([np.arange(n, dtype=float)[:, None]], np.ones((n, 1), bool), np.arange(n) % 2)


def test_default_split_sizes():
    assert [s.n for s in split_dataset(_ds(100), rng=make_rng(0))] == [64, 16, 20]


@given(st.integers(5, 300), st.integers(0, 2**31))
def test_split_is_a_partition(n, seed):
    parts = split_dataset(_ds(n), rng=make_rng(seed))
    ids = [i for p in parts for i in p.ids]
    assert sorted(ids, key=int) == [str(i) for i in range(n)]


def test_split_reproducible_and_rejects_empty():
    a = split_dataset(_ds(50), rng=make_rng(3))
    b = split_dataset(_ds(50), rng=make_rng(3))
    assert [p.ids for p in a] == [p.ids for p in b]
    with pytest.raises(ContractError):
        split_dataset(_ds(2), rng=make_rng(0))


# ---------------------------------------------------------------- quartiles and imputation


def test_quartile_examples():
    assert quartile_binarize(np.arange(1, 9)).tolist() == [0] * 6 + [1, 1]
    assert quartile_binarize(np.ones(7)).tolist() == [0] * 7


@given(st.integers(4, 200), st.integers(0, 2**31))
def test_quartile_positive_count(n, seed):
    x = make_rng(seed).permutation(n).astype(float)
    assert quartile_binarize(x).sum() == n // 4


def test_mean_impute_examples():
    rng = make_rng(0)
    views = [rng.standard_normal((5, 2)), rng.standard_normal((5, 3))]
    full = MultiViewDataset(views, np.ones((5, 2), bool), np.zeros(5, int))
    assert np.array_equal(mean_impute(full), np.hstack(views))
    mask = np.ones((5, 2), bool)
    mask[3, 1] = False
    part = full.with_mask(mask)
    out = mean_impute(part)
    assert out.shape == (5, 5)
    assert np.allclose(out[3, 2:], views[1][[0, 1, 2, 4]].mean(axis=0), atol=1e-15)


def test_mean_impute_unobserved_view_is_an_error():
    mask = np.array([[True, False], [True, False]])
    ds = MultiViewDataset([np.ones((2, 1)), np.zeros((2, 1))], mask, np.array([0, 1]))
    with pytest.raises(ContractError):
        mean_impute(ds)
