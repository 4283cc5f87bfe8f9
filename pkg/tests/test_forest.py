import numpy as np
import pytest
from scipy import stats

from helpers import (oracle_fit_tree, oracle_tree_predict, tree_to_nested,
                     trees_equal)
from modmap import forest
from modmap.errors import LeakageError, ValidationError
from modmap.featurize import FeatureLayout
from modmap.forest import (DecisionTree, ForestHyperparams,
                           balanced_weights, evaluate, fit_forest, fit_tree, gini,
                           grid_search, load_model, predict, save_model)
from modmap.forest.forest import _tree_rng

LAYOUT = FeatureLayout("full", 1, 2)


def single_tree_hyper(d, max_depth=None):
    return ForestHyperparams(n_trees=1, max_depth=max_depth, bootstrap=False,
                             balanced=False, features_per_split=d)


class TestBalancedWeights:
    def test_imbalanced(self):
        w = balanced_weights([True] * 6 + [False] * 2)
        assert w[0] == pytest.approx(8 / 12)
        assert w[-1] == pytest.approx(2.0)
        assert w[:6].sum() == pytest.approx(w[6:].sum())

    def test_balanced_input(self):
        assert balanced_weights([True, False, True, False]).tolist() == [1.0] * 4

    def test_single_class_errors(self):
        with pytest.raises(ValidationError):
            balanced_weights([True, True])


class TestGini:
    def test_symmetric(self):
        assert gini([2, 2]) == pytest.approx(0.5)

    def test_pure(self):
        assert gini([4, 0]) == 0.0

    def test_three_one(self):
        assert gini([3, 1]) == pytest.approx(0.375)

    def test_all_zero_errors(self):
        with pytest.raises(ValueError):
            gini([0, 0])


class TestFitTree:
    def test_separable_pair(self):
        X = np.array([[0.1], [0.9]])
        y = np.array([0.0, 1.0])
        w = np.ones(2)
        tree = fit_tree(X, y, w, 1, 1, np.random.default_rng(0))
        assert tree.feature[0] == 0
        assert tree.threshold[0] == pytest.approx(0.5)
        posts = tree.leaf_posteriors()
        assert posts[tree.left[0]] == 0.0 and posts[tree.right[0]] == 1.0

    def test_identical_features_leaf(self):
        X = np.ones((5, 2))
        y = np.array([1.0, 1.0, 1.0, 0.0, 0.0])
        tree = fit_tree(X, y, np.ones(5), None, 2, np.random.default_rng(0))
        assert tree.n_nodes == 1
        assert tree.leaf_posteriors()[0] == pytest.approx(0.6)

    @pytest.mark.parametrize("trial", range(20))
    def test_matches_exhaustive_oracle(self, trial):
        rng = np.random.default_rng(1000 + trial)
        n = int(rng.integers(2, 33))
        d = int(rng.integers(1, 3))
        X = np.round(rng.random((n, d)), 3)
        y = rng.integers(0, 2, n).astype(bool)
        if y.all() or not y.any():
            y[0] = not y[0]
        w = np.ones(n)
        depth = int(rng.integers(1, 3))
        tree = fit_tree(X, y.astype(float), w, depth, d, np.random.default_rng(0))
        oracle = oracle_fit_tree(X, y, w, depth)
        assert trees_equal(tree_to_nested(tree), oracle)

    def test_unlimited_depth_memorizes(self):
        rng = np.random.default_rng(5)
        X = rng.random((60, 3))
        y = rng.integers(0, 2, 60).astype(float)
        tree = fit_tree(X, y, np.ones(60), None, 3, np.random.default_rng(0))
        assert np.array_equal(tree.scores(X) >= 0.5, y.astype(bool))

    def test_every_split_decreases_weighted_gini(self):
        rng = np.random.default_rng(9)
        X = rng.random((80, 4))
        y = rng.integers(0, 2, 80).astype(float)
        w = rng.random(80) + 0.5
        tree = fit_tree(X, y, w, None, 4, np.random.default_rng(1))
        for node in range(tree.n_nodes):
            if tree.feature[node] < 0:
                continue
            def wg(i):
                tot = tree.w_pos[i] + tree.w_neg[i]
                return tot * gini([tree.w_pos[i], tree.w_neg[i]])
            assert wg(tree.left[node]) + wg(tree.right[node]) < wg(node)


class TestForest:
    def make_data(self, n=120, d=6, seed=0):
        rng = np.random.default_rng(seed)
        X = rng.random((n, d))
        y = (X[:, 0] + 0.3 * rng.random(n)) > 0.6
        return X, y

    def test_single_tree_no_bootstrap_equals_fit_tree(self):
        X, y = self.make_data()
        hyper = single_tree_hyper(X.shape[1], max_depth=4)
        model = fit_forest(X, y, hyper, 7, LAYOUT)
        direct = fit_tree(X, y.astype(float), np.ones(len(y)), 4, X.shape[1],
                          _tree_rng(7, 0))
        assert tree_to_nested(model.trees[0]) == tree_to_nested(direct)

    def test_determinism_bit_identical(self, tmp_path):
        X, y = self.make_data()
        hyper = ForestHyperparams(n_trees=10, max_depth=6)
        a, b = (fit_forest(X, y, hyper, 42, LAYOUT) for _ in range(2))
        pa, pb = tmp_path / "a.json", tmp_path / "b.json"
        save_model(a, pa)
        save_model(b, pb)
        assert pa.read_bytes() == pb.read_bytes()

    def test_schedule_independence(self, monkeypatch):
        X, y = self.make_data()
        hyper = ForestHyperparams(n_trees=8, max_depth=4)
        monkeypatch.setenv("MODMAP_THREADS", "1")
        serial = fit_forest(X, y, hyper, 3, LAYOUT)
        monkeypatch.setenv("MODMAP_THREADS", "4")
        parallel = fit_forest(X, y, hyper, 3, LAYOUT)
        for ta, tb in zip(serial.trees, parallel.trees):
            assert tree_to_nested(ta) == tree_to_nested(tb)

    def test_model_round_trip(self, tmp_path):
        X, y = self.make_data()
        model = fit_forest(X, y, ForestHyperparams(n_trees=3, max_depth=3), 1, LAYOUT,
                           modality_name="image")
        path = tmp_path / "m.json"
        save_model(model, path)
        loaded = load_model(path)
        assert loaded.modality_name == "image"
        assert loaded.hyper == model.hyper
        _, sa = predict(model, X)
        _, sb = predict(loaded, X)
        assert np.array_equal(sa, sb)

    def test_bootstrap_uniformity_chi_square(self):
        n = 50
        counts = np.zeros(n)
        for t in range(400):
            idx = _tree_rng(123, t).integers(0, n, size=n)
            counts += np.bincount(idx, minlength=n)
        assert stats.chisquare(counts).pvalue > 0.001

    def test_monotone_rescaling_invariance(self):
        X, y = self.make_data(n=80, d=3, seed=2)
        hyper = ForestHyperparams(n_trees=5, max_depth=4, features_per_split=3)
        base, _ = predict(fit_forest(X, y, hyper, 11, LAYOUT), X)
        X2 = X.copy()
        X2[:, 1] = np.exp(3.0 * X2[:, 1])  # strictly monotone rescaling
        rescaled, _ = predict(fit_forest(X2, y, hyper, 11, LAYOUT), X2)
        assert np.array_equal(base, rescaled)


class TestPredict:
    def test_pure_leaf_scores_one(self):
        X = np.zeros((4, 2))
        y = np.ones(4, dtype=bool)
        model = fit_forest(X, y, ForestHyperparams(n_trees=1, bootstrap=False,
                                                   balanced=False), 0, LAYOUT)
        _, scores = predict(model, X)
        assert scores.tolist() == [1.0] * 4

    def test_tie_score_is_positive_label(self):
        pure = lambda p: DecisionTree(
            feature=np.array([-1], dtype=np.int32), threshold=np.zeros(1),
            left=np.array([-1], dtype=np.int32), right=np.array([-1], dtype=np.int32),
            w_neg=np.array([1.0 - p]), w_pos=np.array([p]), max_depth=None)
        model = forest.RandomForestModel(trees=[pure(1.0), pure(0.0)],
                                         hyper=ForestHyperparams(n_trees=2),
                                         seed=0, layout=LAYOUT, modality_name="m",
                                         n_features=2)
        labels, scores = predict(model, np.zeros((1, 2)))
        assert scores[0] == 0.5 and labels[0]

    def test_two_tree_average_matches_manual_traversal(self):
        rng = np.random.default_rng(4)
        X = rng.random((30, 2))
        y = X[:, 0] > 0.5
        model = fit_forest(X, y, ForestHyperparams(n_trees=2, max_depth=2,
                                                   bootstrap=False, balanced=False,
                                                   features_per_split=2), 5, LAYOUT)
        _, scores = predict(model, X)
        manual = np.zeros(30)
        for tree in model.trees:
            nested = tree_to_nested(tree)
            manual += np.array([oracle_tree_predict(nested, x) for x in X])
        assert np.allclose(scores, manual / 2, atol=1e-12)

    def test_layout_mismatch(self):
        X = np.zeros((4, 2))
        model = fit_forest(X, np.array([1, 1, 0, 0], dtype=bool),
                           ForestHyperparams(n_trees=1), 0, LAYOUT)
        with pytest.raises(ValueError, match="feature width"):
            predict(model, np.zeros((1, 3)))


class TestEvaluate:
    def test_counts(self):
        X = np.zeros((4, 2))
        y = np.array([True, True, True, False])
        model = fit_forest(X[:3], y[:3].astype(bool) | True,
                           ForestHyperparams(n_trees=1, bootstrap=False,
                                             balanced=False), 0, LAYOUT)
        result = evaluate(model, X, y)
        assert result.accuracy == pytest.approx(0.75)
        assert result.majority_baseline == pytest.approx(0.75)
        assert sum(map(sum, result.confusion)) == 4

    def test_perfect(self):
        rng = np.random.default_rng(8)
        X = rng.random((40, 2))
        y = X[:, 0] > 0.5
        model = fit_forest(X, y, single_tree_hyper(2), 0, LAYOUT)
        assert evaluate(model, X, y).accuracy == 1.0

    def test_majority_tie_convention(self):
        X = np.zeros((2, 2))
        y = np.array([True, False])
        model = fit_forest(np.random.default_rng(0).random((4, 2)),
                           np.array([1, 0, 1, 0], dtype=bool),
                           ForestHyperparams(n_trees=1), 0, LAYOUT)
        result = evaluate(model, X, y)
        assert result.majority_baseline == 0.5 and result.majority_tie

    def test_empty_set(self):
        model = fit_forest(np.zeros((2, 2)), np.array([True, False]),
                           ForestHyperparams(n_trees=1), 0, LAYOUT)
        with pytest.raises(ValueError):
            evaluate(model, np.zeros((0, 2)), np.zeros(0, dtype=bool))


class TestGridSearch:
    def make_sets(self):
        rng = np.random.default_rng(6)
        X = rng.random((100, 4))
        y = X[:, 1] > 0.5
        return (X[:70], y[:70], [f"t{i}" for i in range(70)],
                X[70:], y[70:], [f"v{i}" for i in range(30)])

    def test_single_point(self):
        Xt, yt, ti, Xv, yv, vi = self.make_sets()
        grid = [ForestHyperparams(n_trees=5, max_depth=3)]
        model, board = grid_search(Xt, yt, ti, Xv, yv, vi, grid, 0, LAYOUT)
        assert model.hyper == grid[0] and len(board) == 1

    def test_argmax(self):
        Xt, yt, ti, Xv, yv, vi = self.make_sets()
        grid = [ForestHyperparams(n_trees=1, max_depth=1, features_per_split=1),
                ForestHyperparams(n_trees=20, max_depth=6)]
        model, board = grid_search(Xt, yt, ti, Xv, yv, vi, grid, 0, LAYOUT)
        accs = [p.val_accuracy for p in board]
        assert model.hyper == grid[int(np.argmax(accs))]

    def test_leaderboard_matches_standalone(self):
        Xt, yt, ti, Xv, yv, vi = self.make_sets()
        grid = [ForestHyperparams(n_trees=5, max_depth=2),
                ForestHyperparams(n_trees=10, max_depth=4)]
        _, board = grid_search(Xt, yt, ti, Xv, yv, vi, grid, 9, LAYOUT)
        for point in board:
            model = fit_forest(Xt, yt, point.hyper, 9, LAYOUT)
            assert evaluate(model, Xv, yv).accuracy == point.val_accuracy

    def test_overlap_is_leakage(self):
        Xt, yt, ti, Xv, yv, vi = self.make_sets()
        with pytest.raises(LeakageError):
            grid_search(Xt, yt, ti, Xv, yv, ti[:30],
                        [ForestHyperparams(n_trees=1)], 0, LAYOUT)
