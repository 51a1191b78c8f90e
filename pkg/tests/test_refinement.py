import numpy as np
import pytest

from ecglin import augmentation as A, features as F, refinement as R


def _matrix(n=300, seed=0, informative=(5, 40, 150)):
    """Random 197-column matrix whose labels depend on a few columns."""
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 3, n)
    x = rng.normal(size=(n, len(A.AUG_REGISTRY)))
    for j in informative:
        x[:, j] += 2.0 * y
    miss = rng.random(x.shape) < 0.02
    labels = [("N", "S", "V")[i] for i in y]
    refs = [F.BeatRef("r", i, 100 * i) for i in range(n)]
    return F.FeatureMatrix(A.AUG_REGISTRY.names, x, miss, refs, labels, A.AUG_REGISTRY_VERSION)


# ---- impute / standardize ----------------------------------------------------


def test_median_imputation():
    v = np.array([[1.0], [0.0], [3.0]])
    m = np.array([[False], [True], [False]])
    s = R.fit_scaler(v, m)
    assert s.medians[0] == 2.0
    z = s.transform(v, m)
    assert z[1, 0] == pytest.approx((2.0 - s.means[0]) / s.stds[0])


def test_standardized_fit_rows():
    fm = _matrix()
    fit = np.arange(200)
    s = R.fit_scaler(fm.values, fm.missing, fit)
    z = s.transform(fm.values[fit], fm.missing[fit])
    np.testing.assert_allclose(z.mean(axis=0), 0, atol=1e-9)
    np.testing.assert_allclose(z.std(axis=0), 1, atol=1e-9)


def test_test_rows_use_train_statistics():
    fm = _matrix()
    s = R.fit_scaler(fm.values, fm.missing, np.arange(200))
    test = fm.values[200:]
    z = s.transform(test, fm.missing[200:])
    expected = (np.where(fm.missing[200:], s.medians, test) - s.means) / s.stds
    np.testing.assert_allclose(z, expected)


def test_constant_and_all_missing_columns(caplog):
    v = np.column_stack([np.full(10, 4.0), np.arange(10.0), np.zeros(10)])
    m = np.zeros_like(v, dtype=bool)
    m[:, 2] = True
    s = R.fit_scaler(v, m)
    z = s.transform(v, m)
    assert s.constant[0] and not z[:, 0].any() and not z[:, 2].any()
    assert "missing on every fit row" in caplog.text


# ---- MI ---------------------------------------------------------------------


def test_mi_independent_column_small():
    rng = np.random.default_rng(0)
    y = rng.integers(0, 5, 2000)
    vals = [R.mutual_information(rng.normal(size=2000), rng.permutation(y)) for _ in range(5)]
    assert max(vals) < 0.05


def test_mi_of_label_is_label_entropy():
    y = np.repeat(np.arange(5), 200)
    assert R.mutual_information(y.astype(float), y) == pytest.approx(R.entropy_nats(y), abs=1e-9)


def test_mi_nonnegative_and_constant():
    rng = np.random.default_rng(1)
    y = rng.integers(0, 3, 100)
    for _ in range(20):
        assert R.mutual_information(rng.normal(size=100), y) >= 0
    assert R.mutual_information(np.ones(100), y) == 0.0
    with pytest.raises(ValueError):
        R.mutual_information(np.arange(10.0), np.zeros(10))


# ---- RFE --------------------------------------------------------------------


def test_rfe_identity_when_at_target():
    x = np.random.default_rng(0).normal(size=(60, 50))
    y = ["N", "V"] * 30
    np.testing.assert_array_equal(R.rfe_select(x, y, 50), np.arange(50))


def test_rfe_keeps_planted_feature_and_is_reproducible():
    rng = np.random.default_rng(2)
    y = rng.integers(0, 3, 300)
    x = rng.normal(size=(300, 100))
    x[:, 37] = y + 0.05 * rng.normal(size=300)
    labels = [("N", "S", "V")[i] for i in y]
    keep = R.rfe_select(x, labels, 50)
    assert len(keep) == 50 and 37 in keep
    np.testing.assert_array_equal(keep, R.rfe_select(x, labels, 50))


def test_rfe_too_few_columns(caplog):
    x = np.random.default_rng(0).normal(size=(20, 10))
    assert len(R.rfe_select(x, ["N", "V"] * 10, 50)) == 10
    assert "only 10 columns" in caplog.text


# ---- PCA --------------------------------------------------------------------


def test_pca_line():
    t = np.linspace(-1, 1, 50)
    p = R.fit_pca(np.column_stack([t, 2 * t, np.zeros(50), np.zeros(50), np.zeros(50)]), 5)
    assert p.variance_ratios[0] == pytest.approx(1.0)
    assert np.all(p.variance_ratios[1:] == 0) and p.padded[1:].all()


def test_pca_matches_eigensolve():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(200, 50)) @ rng.normal(size=(50, 50))
    p = R.fit_pca(x, 5)
    cov = np.cov(x, rowvar=False)
    lam, vec = np.linalg.eigh(cov)
    lam, vec = lam[::-1], vec[:, ::-1]
    np.testing.assert_allclose(p.variance_ratios, lam[:5] / lam.sum(), rtol=1e-10)
    scores = p.transform(x)
    for i in range(5):
        ref = (x - x.mean(axis=0)) @ vec[:, i]
        sign = np.sign(ref @ scores[:, i])
        np.testing.assert_allclose(scores[:, i], sign * ref, atol=1e-8)
    np.testing.assert_allclose(p.basis @ p.basis.T, np.eye(5), atol=1e-8)
    assert np.all(np.diff(p.variance_ratios) <= 0) and p.variance_ratios.sum() <= 1
    for v in p.basis:
        assert v[np.argmax(np.abs(v))] > 0


# ---- full refinement ------------------------------------------------------------


def test_fit_refinement_dimensions_and_json(tmp_path):
    fm = _matrix()
    st = R.fit_refinement(fm, np.arange(240))
    assert len(st.mi_top) == 100 and len(st.selected) == 50
    assert set(st.selected) <= set(st.mi_top)
    assert {fm.columns[5], fm.columns[40], fm.columns[150]} <= set(st.selected)
    out = st.transform(fm)
    assert out.n_cols == 202 and out.columns[-5:] == list(R.PCA_NAMES)
    assert out.columns == R.FINAL_REGISTRY.names
    st.save(tmp_path / "refinement.json")
    back = R.RefinementState.load(tmp_path / "refinement.json")
    np.testing.assert_array_equal(back.transform(fm).values, out.values)


def test_transform_rejects_other_columns():
    fm = _matrix()
    st = R.fit_refinement(fm)
    bad = F.FeatureMatrix(fm.columns[::-1], fm.values, fm.missing, fm.beat_refs, fm.labels)
    with pytest.raises(ValueError):
        st.transform(bad)


# ---- SMOTE-ENN ---------------------------------------------------------------


def test_smote_convexity():
    rng = np.random.default_rng(0)
    x = np.vstack([rng.normal(0, 1, (40, 2)), rng.normal(6, 1, (8, 2))])
    y = ["N"] * 40 + ["V"] * 8
    xs, ys, parents, _ = R.smote(x, y, seed=1)
    assert ys.count("V") == 40
    syn = np.nonzero(parents[:, 0] >= 0)[0]
    assert len(syn) == 32
    for i in syn:
        a, b = x[parents[i, 0]], x[parents[i, 1]]
        assert y[parents[i, 0]] == y[parents[i, 1]] == ys[i]
        d = b - a
        t = np.dot(xs[i] - a, d) / np.dot(d, d)
        assert 0 <= t <= 1
        assert np.linalg.norm(a + t * d - xs[i]) < 1e-9


def test_smote_enn_balanced_fixed_point():
    rng = np.random.default_rng(1)
    x = np.vstack([rng.normal(0, 0.3, (30, 3)), rng.normal(10, 0.3, (30, 3)), rng.normal(-10, 0.3, (30, 3))])
    y = ["N"] * 30 + ["S"] * 30 + ["V"] * 30
    xb, yb, rep, src = R.smote_enn(x, y, seed=0)
    assert rep.synthetic == 0 and rep.removed == 0
    np.testing.assert_array_equal(xb, x)
    np.testing.assert_array_equal(src, np.arange(90))


def test_smote_enn_deterministic_and_singleton(caplog):
    rng = np.random.default_rng(2)
    x = np.vstack([rng.normal(0, 1, (50, 4)), rng.normal(3, 1, (10, 4)), rng.normal(-3, 1, (1, 4))])
    y = ["N"] * 50 + ["S"] * 10 + ["Q"]
    a = R.smote_enn(x, y, seed=5)
    b = R.smote_enn(x, y, seed=5)
    np.testing.assert_array_equal(a[0], b[0])
    assert a[1] == b[1]
    assert a[2].duplicated_classes == ["Q"] and "one sample" in caplog.text
    assert a[2].after_smote == {"N": 50, "S": 50, "Q": 50}


def test_enn_removes_mislabeled_point():
    x = np.array([[0.0], [0.1], [0.2], [0.15], [5.0], [5.1], [5.2]])
    y = ["N", "N", "N", "V", "V", "V", "V"]
    keep = R.enn(x, y)
    assert not keep[3] and keep[[0, 1, 2, 4, 5, 6]].all()


def test_knn_indices_bruteforce():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(50, 7))
    nn = R.knn_indices(x, x, 3, exclude_self=True)
    d = np.linalg.norm(x[:, None] - x[None], axis=2)
    np.fill_diagonal(d, np.inf)
    np.testing.assert_array_equal(nn, np.argsort(d, axis=1, kind="stable")[:, :3])
