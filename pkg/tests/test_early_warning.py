import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp
from scipy.stats import skew

from tempheno.errors import ConfigError, DataError
from tempheno.early_warning import (
    LogisticModel,
    STATISTICS,
    TrainConfig,
    WINDOWS,
    _augment,
    average_precision,
    evaluate,
    extract_features,
    feature_names,
    loss_and_grad,
    run_early_warning,
    stratified_split,
    train,
    window_length,
)


def brute_auprc(y, s):
    y = np.asarray(y, bool)
    total, prev_r = 0.0, 0.0
    for t in sorted(set(s.tolist()), reverse=True):
        called = s >= t
        tp = np.sum(called & y)
        p, r = tp / called.sum(), tp / y.sum()
        total += (r - prev_r) * p
        prev_r = r
    return total


def stats(values, name):
    """Features of a single-variable series as a {window: {stat: value}} dict."""
    f = extract_features(np.asarray(values, float)[None, None, :], len(values))[0]
    f = f.reshape(len(WINDOWS), len(STATISTICS))
    return {w: dict(zip(STATISTICS, row)) for (w, _, _), row in zip(WINDOWS, f)}


class TestFeatures:
    def test_window_lengths(self):
        assert window_length(12, 10) == 1
        assert window_length(12, 25) == 3
        assert window_length(12, 50) == 6
        assert window_length(24, 10) == 2
        assert window_length(48, 10) == 5  # 4.8 rounds up
        assert window_length(120, 25) == 30
        assert window_length(5, 10) == 1  # 0.5 rounds half up
        assert window_length(1, 10) == 1

    def test_small_series(self):
        f = stats([1.0, 2.0, 3.0, 4.0], "x")["full"]
        assert f["max"] == 4 and f["min"] == 1 and f["mean"] == 2.5
        assert f["std"] == pytest.approx(np.sqrt(1.25), abs=1e-15)
        assert f["skew"] == 0.0

    def test_constant_series(self):
        for w in stats([3.0] * 12, "x").values():
            assert w["std"] == 0.0 and w["skew"] == 0.0 and w["mean"] == 3.0

    def test_windows_select_ends(self):
        f = stats(np.arange(12.0), "x")
        assert f["first10"]["max"] == 0.0 and f["last10"]["min"] == 11.0
        assert f["first25"]["max"] == 2.0 and f["last50"]["min"] == 6.0

    @given(hnp.arrays(float, 20, elements=st.floats(-100, 100)))
    def test_matches_scipy_skew(self, x):
        f = stats(x, "x")["full"]
        if np.ptp(x) == 0:
            assert f["skew"] == 0.0
        elif np.var(x) > 1e-6:
            assert f["skew"] == pytest.approx(skew(x), abs=1e-7)

    def test_ignores_hours_after_horizon(self, rng):
        v = rng.normal(size=(4, 2, 48))
        w = v.copy()
        w[:, :, 24:] = rng.normal(size=(4, 2, 24)) * 100
        assert np.array_equal(extract_features(v, 24), extract_features(w, 24))

    def test_shape_and_names(self, rng):
        f = extract_features(rng.normal(size=(3, 2, 30)), 12)
        names = feature_names(["a", "b"])
        assert f.shape == (3, 70) and len(names) == 70 and names[0] == "a__full__max"

    def test_errors(self, rng):
        v = rng.normal(size=(2, 1, 10))
        with pytest.raises(DataError):
            extract_features(v, 11)
        v[0, 0, 0] = np.nan
        with pytest.raises(DataError):
            extract_features(v, 5)


def finite_diff(W, Xa, Y, l2, h=1e-6):
    g = np.zeros_like(W)
    for idx in np.ndindex(*W.shape):
        Wp, Wm = W.copy(), W.copy()
        Wp[idx] += h
        Wm[idx] -= h
        g[idx] = (loss_and_grad(Wp, Xa, Y, l2)[0] - loss_and_grad(Wm, Xa, Y, l2)[0]) / (2 * h)
    return g


class TestLogistic:
    @pytest.mark.parametrize("seed", range(5))
    def test_gradient(self, seed):
        rng = np.random.default_rng(seed)
        Xa = _augment(rng.normal(size=(15, 4)))
        Y = np.eye(3)[rng.integers(0, 3, size=15)]
        W = rng.normal(size=(3, 5))
        _, g = loss_and_grad(W, Xa, Y, 0.1)
        ref = finite_diff(W, Xa, Y, 0.1)
        assert np.linalg.norm(g - ref) <= 1e-4 * np.linalg.norm(ref)

    def test_zero_iterations_uniform(self, rng):
        X = rng.normal(size=(12, 3))
        model = train(X, np.arange(12) % 3, TrainConfig(iters=0))
        assert np.allclose(model.predict_proba(X), 1 / 3)

    def test_separable(self, rng):
        y = np.repeat([0, 1, 2], 20)
        X = rng.normal(size=(60, 2)) * 0.1 + np.eye(3)[y][:, :2] * 5 + (y == 2)[:, None] * -5
        model = train(X, y)
        assert np.mean(model.predict(X) == y) == 1.0

    def test_bias_not_penalized(self):
        W = np.ones((2, 3))
        Xa = _augment(np.zeros((4, 2)))
        Y = np.eye(2)[[0, 1, 0, 1]]
        _, g0 = loss_and_grad(W, Xa, Y, 0.0)
        _, g1 = loss_and_grad(W, Xa, Y, 1.0)
        assert np.array_equal(g0[:, -1], g1[:, -1])
        assert np.allclose(g1[:, :-1] - g0[:, :-1], 1.0)

    def test_roundtrip(self, rng):
        X = rng.normal(size=(10, 3))
        model = train(X, np.arange(10) % 2, TrainConfig(iters=20))
        back = LogisticModel.from_dict(model.to_dict())
        assert np.array_equal(back.predict_proba(X), model.predict_proba(X))

    def test_needs_two_classes(self, rng):
        with pytest.raises(DataError):
            train(rng.normal(size=(4, 2)), np.zeros(4))

    def test_config_errors(self, rng):
        with pytest.raises(ConfigError) as err:
            train(rng.normal(size=(4, 2)), np.arange(4) % 2, TrainConfig(lr=0, iters=-1, l2=-1))
        assert len(err.value.problems) == 3


class TestMetrics:
    @pytest.mark.parametrize("seed", range(30))
    def test_auprc_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 21))
        y = rng.integers(0, 2, size=n)
        y[0] = 1
        # coarse scores force ties
        s = np.round(rng.uniform(size=n), 1)
        assert abs(average_precision(y, s) - brute_auprc(y, s)) <= 1e-12

    @pytest.mark.parametrize("seed", range(10))
    def test_auprc_matches_sklearn(self, seed):
        metrics = pytest.importorskip("sklearn.metrics")
        rng = np.random.default_rng(seed)
        y = rng.integers(0, 2, size=20)
        y[0] = 1
        s = np.round(rng.uniform(size=20), 1)
        assert abs(average_precision(y, s) - metrics.average_precision_score(y, s)) <= 1e-12

    def test_auprc_perfect_and_no_positives(self):
        assert average_precision([0, 1, 1], [0.1, 0.8, 0.9]) == 1.0
        with pytest.raises(DataError):
            average_precision([0, 0], [0.1, 0.2])

    def _fixed_model(self, classes=(0, 1, 2)):
        k = len(classes)
        # feature j is the logit of class j
        W = np.hstack([np.eye(k), np.zeros((k, 1))])
        return LogisticModel(W, np.asarray(classes), np.zeros(k), np.ones(k))

    def test_macro_metrics(self):
        model = self._fixed_model()
        X = np.eye(3)[[0, 0, 1, 2, 2]] * 5
        y = np.array([0, 1, 1, 2, 2])
        r = evaluate(model, X, y)
        assert r.accuracy == pytest.approx(0.8)
        assert r.per_class["precision"] == pytest.approx([0.5, 1.0, 1.0])
        assert r.per_class["recall"] == pytest.approx([1.0, 0.5, 1.0])
        assert r.precision == pytest.approx(2.5 / 3) and r.recall == pytest.approx(2.5 / 3)
        assert np.allclose(r.confusion.sum(axis=1), 1.0)

    def test_absent_class_excluded(self):
        model = self._fixed_model()
        X = np.eye(3)[[0, 1]] * 5
        r = evaluate(model, X, np.array([0, 1]))
        assert r.precision == 1.0 and r.recall == 1.0 and r.auprc == 1.0

    @given(st.permutations(list(range(8))))
    def test_reorder_invariance(self, perm):
        rng = np.random.default_rng(0)
        model = self._fixed_model()
        X = rng.normal(size=(8, 3))
        y = np.arange(8) % 3
        a, b = evaluate(model, X, y), evaluate(model, X[perm], y[perm])
        assert a.accuracy == b.accuracy and a.precision == b.precision
        assert a.recall == b.recall and a.auprc == pytest.approx(b.auprc, abs=1e-15)


class TestSplitAndRun:
    def test_stratified(self, rng):
        y = np.repeat([0, 1, 2], [10, 20, 30])
        tr, te = stratified_split(y, 0.2, rng)
        assert np.bincount(y[te]).tolist() == [2, 4, 6]
        assert np.intersect1d(tr, te).size == 0 and tr.size + te.size == 60

    def test_split_impossible(self, rng):
        with pytest.raises(DataError, match="class sizes"):
            stratified_split(np.array([0, 0, 0, 1]), 0.2, rng)

    def test_deterministic(self, rng):
        v = rng.normal(size=(40, 2, 24))
        y = np.arange(40) % 2
        v[y == 1] += 1.0
        a = run_early_warning(v, y, horizons=(12, 24), seed=3)
        b = run_early_warning(v, y, horizons=(12, 24), seed=3)
        assert np.array_equal(a[12].test_idx, b[12].test_idx)
        assert a[24].report.accuracy == b[24].report.accuracy
        assert np.array_equal(a[12].test_idx, a[24].test_idx)

    def test_bad_fraction(self, rng):
        with pytest.raises(ConfigError):
            run_early_warning(rng.normal(size=(10, 1, 12)), np.arange(10) % 2, test_fraction=1.0)
