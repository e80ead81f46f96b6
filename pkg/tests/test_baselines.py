import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from canopy.baselines import (ForestParams, fit_linear, fit_power, fit_random_forest, grid_search_oob,
                              load_baseline, oob_error, oob_predictions, predict_power, save_baseline,
                              tree_oob_errors)
from canopy.baselines.forest import RandomForestModel, Tree
from canopy.baselines.power import PowerModel

import oracles


class TestLinear:
    def test_planted(self, rng):
        X = np.zeros((40, 27))
        X[:, 0] = rng.normal(size=40)
        m = fit_linear(X, 3 * X[:, 0] + 1)
        np.testing.assert_allclose(m.weights, np.r_[3.0, np.zeros(26)], atol=1e-8)
        assert m.bias == pytest.approx(1.0, abs=1e-8)

    def test_constant_target(self, rng):
        X = rng.normal(size=(60, 27))
        m = fit_linear(X, np.full(60, 4.5))
        np.testing.assert_allclose(m.weights, 0.0, atol=1e-10)
        assert m.bias == pytest.approx(4.5, abs=1e-10)

    def test_too_few_rows(self, rng):
        with pytest.raises(ValueError):
            fit_linear(rng.normal(size=(28, 27)), rng.normal(size=28))

    def test_rank_deficient(self, rng):
        X = rng.normal(size=(50, 27))
        X[:, 1] = X[:, 0]
        X[:, 2] = X[:, 0]
        # duplicated columns are rescued by the jitter; the fit stays finite
        m = fit_linear(X, rng.normal(size=50))
        assert np.all(np.isfinite(m.weights))

    def test_local_optimality(self, rng):
        X, y = rng.normal(size=(100, 27)), rng.normal(size=100)
        m = fit_linear(X, y)
        best = oracles.mse(m.predict(X), y)
        for _ in range(1000):
            w = m.weights + rng.normal(scale=1e-3, size=27)
            b = m.bias + rng.normal(scale=1e-3)
            assert oracles.mse(X @ w + b, y) >= best

    @given(st.integers(0, 2 ** 31))
    def test_residual_orthogonality(self, seed):
        g = np.random.default_rng(seed)
        X = g.normal(size=(80, 27)) * g.uniform(0.1, 10, 27)
        y = g.normal(size=80) * 5
        m = fit_linear(X, y)
        r = y - m.predict(X)
        A = np.column_stack([X, np.ones(80)])
        assert np.abs(A.T @ r).max() <= 1e-6 * np.linalg.norm(y)

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_normal_equations(self, seed):
        g = np.random.default_rng(seed)
        X, y = g.normal(size=(120, 27)), g.normal(size=120)
        w, b = oracles.normal_equation_ols(X, y)
        m = fit_linear(X, y)
        np.testing.assert_allclose(m.weights, w, atol=1e-8)
        assert m.bias == pytest.approx(b, abs=1e-8)


class TestPower:
    W = np.array([2.0, 1.1, 0.4, 0.3])

    def test_predict_examples(self):
        Z = np.array([[3.0, 7.0, 0.5]])
        assert predict_power(np.array([1.0, 0, 0, 0]), Z)[0] == 1.0
        assert predict_power(np.array([2.0, 1, 0, 0]), Z)[0] == 6.0
        assert predict_power(np.array([2.0, 1, 0, 0.5]), np.array([[3.0, 7.0, 0.0]]))[0] == 0.0
        assert predict_power(np.array([2.0, 1, 0, 0.0]), np.array([[3.0, 7.0, 0.0]]))[0] == 6.0

    def test_accepts_full_feature_rows(self, rng):
        from canopy.features import IDX_AG_MEAN, IDX_AG_P95, IDX_IR
        X = rng.uniform(1, 5, size=(4, 27))
        np.testing.assert_array_equal(predict_power(self.W, X),
                                      predict_power(self.W, X[:, [IDX_AG_MEAN, IDX_AG_P95, IDX_IR]]))

    def test_noiseless_recovery(self, rng):
        Z, y = oracles.power_rows(rng, self.W, 500)
        m = fit_power(Z, y)
        np.testing.assert_allclose(m.w, self.W, rtol=1e-3)

    def test_noisy_recovery(self, rng):
        Z, y = oracles.power_rows(rng, self.W, 500, noise=0.05)
        np.testing.assert_allclose(fit_power(Z, y).w, self.W, rtol=0.05)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_least_squares_optimum(self, seed):
        from scipy.optimize import least_squares
        g = np.random.default_rng(seed)
        Z, y = oracles.power_rows(g, self.W, 500, noise=0.05)
        ref = least_squares(lambda p: p[0] * Z[:, 0] ** p[1] * Z[:, 1] ** p[2] * Z[:, 2] ** p[3] - y,
                            self.W, xtol=1e-15, ftol=1e-15, gtol=1e-15).x
        np.testing.assert_allclose(fit_power(Z, y).w, ref, rtol=1e-6)

    def test_constant_model(self, rng):
        Z, y = oracles.power_rows(rng, self.W, 50)
        m = fit_power(Z, y, free=(True, False, False, False))
        np.testing.assert_array_equal(m.w[1:], 0.0)
        assert m.w[0] == pytest.approx(y.mean(), rel=1e-9)

    def test_zero_targets_allowed(self, rng):
        Z, y = oracles.power_rows(rng, self.W, 60)
        y[:5] = 0.0
        assert np.all(np.isfinite(fit_power(Z, y).w))

    def test_too_few_positive(self, rng):
        Z, y = oracles.power_rows(rng, self.W, 9)
        with pytest.raises(ValueError):
            fit_power(Z, y)

    def test_lm_monotone(self, rng):
        Z, y = oracles.power_rows(rng, self.W, 200, noise=0.2)
        h = fit_power(Z, y).history
        assert all(b <= a for a, b in zip(h, h[1:]))
        assert fit_power(Z, y).w[0] > 0


class TestForest:
    def test_depth_zero_is_subsample_mean(self, rng):
        X, y = rng.normal(size=(30, 5)), rng.normal(size=30)
        m = fit_random_forest(X, y, ForestParams(1.0, 0.5, 0, 1), n_trees=3, seed=1)
        for t, bag in zip(m.trees, m.in_bag):
            assert t.value.shape == (1,)
            assert t.value[0] == pytest.approx(y[bag].mean(), rel=1e-12)

    def test_memorises(self, rng):
        X, y = rng.normal(size=(20, 4)), rng.permutation(20).astype(float)
        m = fit_random_forest(X, y, ForestParams(1.0, 1.0, None, 1), n_trees=1)
        np.testing.assert_array_equal(m.predict(X), y)

    def test_min_leaf_too_large(self, rng):
        with pytest.raises(ValueError):
            fit_random_forest(rng.normal(size=(5, 2)), rng.normal(size=5), ForestParams(min_leaf=5))

    def test_invariants(self, rng):
        X, y = oracles.friedman1(rng, 300)
        p = ForestParams(0.6, 0.5, 6, 4)
        m = fit_random_forest(X, y, p, n_trees=10, seed=3)
        for t in m.trees:
            leaves = t.feature < 0
            assert np.all(t.n_samples[leaves] >= 4)
            assert t.depth <= 6
        assert m.in_bag.sum(axis=1).tolist() == [150] * 10

    def test_no_oob_rows(self, rng):
        X, y = rng.normal(size=(20, 3)), rng.normal(size=20)
        m = fit_random_forest(X, y, ForestParams(1.0, 1.0, 3, 1), n_trees=4)
        assert math.isnan(m.oob_error)
        with pytest.raises(ValueError, match="no OOB rows"):
            oob_error(m, X, y)

    def test_disjoint_halves(self):
        X = np.arange(8, dtype=float)[:, None]
        y = X[:, 0] * 2
        stump = [Tree(np.array([-1]), np.array([0.0]), np.array([-1]), np.array([-1]),
                      np.array([v]), np.array([4]), 0) for v in (1.0, 9.0)]
        in_bag = np.zeros((2, 8), bool)
        in_bag[0, :4] = True
        in_bag[1, 4:] = True
        m = RandomForestModel(stump, ForestParams(), [0, 1], in_bag, n_features=1)
        pred, cnt = oob_predictions(m, X)
        np.testing.assert_array_equal(pred, [9.0] * 4 + [1.0] * 4)
        np.testing.assert_array_equal(cnt, 1)

    def test_oob_brute_force(self, rng):
        X, y = oracles.friedman1(rng, 50)
        m = fit_random_forest(X, y, ForestParams(0.5, 0.4, 5, 2), n_trees=25, seed=2)
        per_row = []
        for i in range(50):
            preds = [t.predict(X[i:i + 1])[0] for t, bag in zip(m.trees, m.in_bag) if not bag[i]]
            if preds:
                per_row.append((math.fsum(preds) / len(preds) - y[i]) ** 2)
        assert m.oob_error == pytest.approx(np.mean(per_row), rel=1e-12)

    def test_tree_order_bit_identical(self, rng):
        X, y = oracles.friedman1(rng, 80)
        m = fit_random_forest(X, y, ForestParams(0.5, 0.5, 4, 2), n_trees=12, seed=0)
        perm = rng.permutation(12)
        shuffled = RandomForestModel([m.trees[i] for i in perm], m.params, m.seeds, m.in_bag[perm])
        np.testing.assert_array_equal(shuffled.predict(X), m.predict(X))

    def test_row_order_invariance(self, rng):
        X, y = oracles.friedman1(rng, 80)
        p = ForestParams(0.5, 0.5, 4, 2)
        a = fit_random_forest(X, y, p, n_trees=8, seed=5)
        perm = rng.permutation(80)
        b = fit_random_forest(X[perm], y[perm], p, n_trees=8, seed=5)
        np.testing.assert_array_equal(a.predict(X), b.predict(X))
        assert a.oob_error == pytest.approx(b.oob_error, rel=1e-12)

    def test_threads_deterministic(self, rng):
        X, y = oracles.friedman1(rng, 100)
        a = fit_random_forest(X, y, ForestParams(0.5, 0.5, 4, 2), n_trees=8, seed=5, threads=1)
        b = fit_random_forest(X, y, ForestParams(0.5, 0.5, 4, 2), n_trees=8, seed=5, threads=4)
        np.testing.assert_array_equal(a.predict(X), b.predict(X))

    def test_ensemble_not_worse_than_best_tree(self):
        for seed in range(3):
            X, y = oracles.friedman1(np.random.default_rng(seed), 300)
            m = fit_random_forest(X, y, ForestParams(0.9, 0.2, 11, 6), n_trees=50, seed=seed)
            assert m.oob_error <= np.nanmin(tree_oob_errors(m, X, y))


class TestGridSearch:
    def test_single_cell(self, rng):
        X, y = oracles.friedman1(rng, 60)
        grid = {"feature_ratio": [0.5], "sample_ratio": [0.5], "max_depth": [3], "min_leaf": [2]}
        best, table = grid_search_oob(X, y, grid, n_trees=5)
        assert best == ForestParams(0.5, 0.5, 3, 2)
        assert len(table) == 1

    def test_table_shape(self, rng):
        X, y = oracles.friedman1(rng, 60)
        grid = {"feature_ratio": [0.5, 1.0], "sample_ratio": [0.3, 0.6, 0.9], "max_depth": [2, None],
                "min_leaf": [1, 4]}
        _, table = grid_search_oob(X, y, grid, n_trees=3)
        assert len(table) == 2 * 3 * 2 * 2

    def test_planted_cell(self, rng):
        X, y = oracles.deep_interaction(rng, 400)
        grid = {"feature_ratio": [1.0], "sample_ratio": [0.5], "max_depth": [1, 2, 3, None],
                "min_leaf": [1, 32]}
        best, _ = grid_search_oob(X, y, grid, n_trees=20, seed=0)
        assert (best.max_depth, best.min_leaf) == (None, 1)


class TestPersistence:
    @pytest.mark.parametrize("kind", ["linear", "power", "rf"])
    def test_roundtrip(self, tmp_path, rng, kind):
        X, y = oracles.friedman1(rng, 120, d=27)
        X[:, [13, 22, 26]] = np.abs(X[:, [13, 22, 26]]) + 0.1
        y = np.abs(y) + 1
        fit = {"linear": lambda: fit_linear(X, y), "power": lambda: fit_power(X, y),
               "rf": lambda: fit_random_forest(X, y, ForestParams(0.5, 0.5, 4, 2), 5, 0)}[kind]
        models = {"agb": fit(), "volume": fit()}
        save_baseline(tmp_path / "m.cnpy", kind, models)
        k2, back = load_baseline(tmp_path / "m.cnpy")
        assert k2 == kind
        for t in models:
            np.testing.assert_array_equal(back[t].predict(X), models[t].predict(X))
        assert isinstance(back["agb"], type(models["agb"]))

    def test_unknown_kind(self, tmp_path):
        with pytest.raises(ValueError):
            save_baseline(tmp_path / "m.cnpy", "svm", {"agb": PowerModel(np.ones(4))})
