import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import spearmanr

from readmit.data import FeatureSpec, SyntheticConfig, generate_synthetic
from readmit.explain import (BRUTE_FORCE_LIMIT, ShapMatrix, beeswarm_export, brute_shapley, forest_shap,
                             ranking_from_beeswarm, summary_ranking, tree_shap, tree_value_function)
from readmit.learner import ForestParams, RandomForestModel, Tree, fit_forest
from readmit.plots import beeswarm, lane_order

from .oracles import random_tree


def _leaf(v=0.3, cover=10.0, p=3):
    return Tree.from_arrays([-1], [0.0], [-1], [-1], [cover], [v], p)


def _stump(f=0, p=3):
    # covers 3 and 1, leaves 0.0 and 1.0
    return Tree.from_arrays([f, -1, -1], [0.5, 0, 0], [1, -1, -1], [2, -1, -1],
                            [4.0, 3.0, 1.0], [0.25, 0.0, 1.0], p)


class TestValueFunction:
    def test_full_set_is_prediction(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            t = random_tree(rng)
            x = rng.normal(size=8)
            assert tree_value_function(t, x, range(8)) == t.predict(x[None, :])[0]

    def test_empty_set_is_base(self):
        rng = np.random.default_rng(1)
        t = random_tree(rng)
        assert tree_value_function(t, np.zeros(8), []) == pytest.approx(t.expected_value, abs=1e-15)

    def test_stump(self):
        assert tree_value_function(_stump(), np.zeros(3), []) == 0.25


class TestBruteForce:
    def test_single_leaf(self):
        assert (brute_shapley(_leaf(), np.zeros(3)) == 0).all()

    def test_stump_single_player(self):
        x = np.array([1.0, 0.0, 0.0])
        phi = brute_shapley(_stump(), x)
        assert phi[0] == pytest.approx(1.0 - 0.25) and phi[1] == phi[2] == 0.0

    def test_depth_two_by_hand(self):
        # root on f0 (<= 0), left child on f1, right leaf; covers 6 = (2 + 2) + 2
        t = Tree.from_arrays([0, 1, -1, -1, -1], [0.0, 0.0, 0, 0, 0], [1, 2, -1, -1, -1], [4, 3, -1, -1, -1],
                             [6.0, 4.0, 2.0, 2.0, 2.0], [0.0, 0.5, 0.0, 1.0, 0.6], 2)
        x = np.array([-1.0, 1.0])
        v = {(): (2 * 0.0 + 2 * 1.0 + 2 * 0.6) / 6, (0,): 0.5, (1,): (4 * 1.0 + 2 * 0.6) / 6, (0, 1): 1.0}
        phi0 = 0.5 * (v[(0,)] - v[()]) + 0.5 * (v[(0, 1)] - v[(1,)])
        phi1 = 0.5 * (v[(1,)] - v[()]) + 0.5 * (v[(0, 1)] - v[(0,)])
        assert np.allclose(brute_shapley(t, x), [phi0, phi1], atol=1e-15)

    def test_budget(self):
        n = BRUTE_FORCE_LIMIT + 1
        # a chain using n distinct features
        feature = list(range(n)) + [-1] * (n + 1)
        m = 2 * n + 1
        f, l, r = [], [], []
        idx = 0
        for i in range(n):
            f.append(i)
            l.append(idx + 1)
            r.append(idx + 2)
            f.append(-1)
            l.append(-1)
            r.append(-1)
            idx += 2
        f.append(-1)
        l.append(-1)
        r.append(-1)
        # rebuild as preorder: internal, leaf, internal, leaf, ...
        left = [i + 2 if f[i] >= 0 else -1 for i in range(m)]
        right = [i + 1 if f[i] >= 0 else -1 for i in range(m)]
        cover = [float(n - i // 2 + 1) if f[i] >= 0 else 1.0 for i in range(m)]
        t = Tree.from_arrays(f, np.zeros(m), left, right, cover, np.zeros(m), n)
        assert len(t.used_features()) == n
        with pytest.raises(ValueError, match="limited"):
            brute_shapley(t, np.zeros(n))


class TestTreeShap:
    def test_single_leaf_zero(self):
        assert (tree_shap(_leaf(), np.zeros(3)) == 0).all()

    @given(st.integers(0, 100_000))
    @settings(max_examples=60, deadline=None)
    def test_matches_oracle(self, seed):
        rng = np.random.default_rng(seed)
        t = random_tree(rng, max_depth=int(rng.integers(1, 6)), n_features=int(rng.integers(1, 9)))
        x = rng.normal(size=t.n_features)
        phi = tree_shap(t, x)
        assert np.max(np.abs(phi - brute_shapley(t, x))) < 1e-9
        assert phi.sum() == pytest.approx(t.predict(x[None, :])[0] - t.expected_value, abs=1e-12)

    def test_null_player(self):
        rng = np.random.default_rng(3)
        t = random_tree(rng, n_features=8)
        unused = sorted(set(range(8)) - set(t.used_features()))
        phi = tree_shap(t, rng.normal(size=8))
        assert all(phi[j] == 0.0 for j in unused)

    def test_symmetry(self):
        # f0 then f1 on the left, f1 then f0 on the right, equal covers and mirrored leaves
        t = Tree.from_arrays(
            [0, 1, -1, -1, 1, -1, -1], [0.0, 0.0, 0, 0, 0.0, 0, 0], [1, 2, -1, -1, 5, -1, -1],
            [4, 3, -1, -1, 6, -1, -1], [8.0, 4, 2, 2, 4, 2, 2], [0.5, 0.5, 0.0, 1.0, 0.5, 1.0, 0.0], 2)
        for x in ([1.0, 1.0], [-1.0, -1.0]):
            phi = tree_shap(t, np.array(x))
            assert phi[0] == pytest.approx(phi[1], abs=1e-15)

    def test_bad_shape(self):
        with pytest.raises(ValueError):
            tree_shap(_leaf(p=3), np.zeros(2))


def _forest(n=400, seed=0, n_trees=20):
    cfg = SyntheticConfig(n, (FeatureSpec("g", coefficient=3.0), FeatureSpec("h", coefficient=-3.0)),
                          noise_count=3, seed=seed)
    table, _ = generate_synthetic(cfg)
    X, y, names = table.feature_matrix()
    return fit_forest(X, y, ForestParams(n_trees=n_trees, seed=seed), names, threads=4), X


class TestForestShap:
    def test_single_tree(self):
        rng = np.random.default_rng(0)
        t = random_tree(rng, n_features=4)
        model = RandomForestModel((t,), ForestParams(n_trees=1), ("a", "b", "c", "d"))
        X = rng.normal(size=(5, 4))
        s = forest_shap(model, X)
        assert np.allclose(s.values, np.array([tree_shap(t, x) for x in X]), atol=0, rtol=0)
        assert s.base_value == t.expected_value

    def test_linearity_and_local_accuracy(self):
        model, X = _forest()
        s = forest_shap(model, X[:50], threads=3)
        per_tree = np.mean([[tree_shap(t, x) for x in X[:50]] for t in model.trees], axis=0)
        assert np.max(np.abs(s.values - per_tree)) < 1e-12
        assert s.local_accuracy_error(model.predict_proba(X[:50])) < 1e-9

    def test_threads_bitwise(self):
        model, X = _forest(n_trees=8)
        a = forest_shap(model, X, threads=1)
        b = forest_shap(model, X, threads=4)
        assert np.array_equal(a.values, b.values)

    def test_direction(self):
        model, X = _forest(1500, seed=2, n_trees=30)
        s = forest_shap(model, X, threads=4)
        assert spearmanr(X[:, 0], s.values[:, 0])[0] > 0.5
        assert spearmanr(X[:, 1], s.values[:, 1])[0] < -0.5

    def test_dimension_mismatch(self):
        model, _ = _forest(n_trees=2)
        with pytest.raises(ValueError):
            forest_shap(model, np.zeros((2, 3)))

    def test_csv_roundtrip(self):
        model, X = _forest(n_trees=4)
        s = forest_shap(model, X[:10])
        back = ShapMatrix.from_csv(s.to_csv())
        assert np.array_equal(back.values, s.values) and back.base_value == s.base_value
        assert back.feature_names == s.feature_names


class TestRanking:
    def test_one_nonzero_column(self):
        v = np.zeros((4, 3))
        v[:, 2] = [1, -1, 2, 0]
        r = summary_ranking(ShapMatrix(v, 0.0, ["c", "b", "a"]))
        assert r.names == ["a", "b", "c"] and r.items[1][1] == 0.0

    def test_top_k(self):
        s = ShapMatrix(np.ones((2, 3)), 0.0, ["x", "y", "z"])
        assert len(summary_ranking(s, 20).items) == 3
        assert summary_ranking(s, 2).names == ["x", "y"]

    @given(st.integers(0, 10_000))
    @settings(max_examples=30, deadline=None)
    def test_non_increasing_and_reingest(self, seed):
        rng = np.random.default_rng(seed)
        n, p = int(rng.integers(1, 30)), int(rng.integers(1, 8))
        s = ShapMatrix(rng.normal(size=(n, p)) * rng.random(p), 0.1, [f"f{j}" for j in range(p)])
        r = summary_ranking(s, None)
        vals = [v for _, v in r.items]
        assert all(a >= b for a, b in zip(vals, vals[1:]))
        text = beeswarm_export(s, rng.normal(size=(n, p)), top_k=None)
        assert len(text.strip().splitlines()) == 1 + n * p
        assert ranking_from_beeswarm(text).items == r.items

    def test_beeswarm_raw_column(self):
        s = ShapMatrix(np.array([[0.1, -0.2]]), 0.0, ["a", "b"])
        text = beeswarm_export(s, np.array([[1.0, 2.0]]), raw={"a": np.array([50.0])})
        lines = text.splitlines()
        assert lines[0] == "feature,row,value,attribution,raw_value"
        assert lines[1] == "b,0,2.0,-0.2," and lines[2] == "a,0,1.0,0.1,50.0"

    def test_svg_lane_order(self):
        model, X = _forest(n_trees=6)
        s = forest_shap(model, X[:80])
        ranking = summary_ranking(s)
        idx = [s.feature_names.index(n) for n in ranking.names]
        svg = beeswarm(ranking.names, X[:80, idx], s.values[:80][:, idx])
        assert lane_order(svg) == ranking.names
        assert svg == beeswarm(ranking.names, X[:80, idx], s.values[:80][:, idx])
