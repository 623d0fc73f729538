import json

import numpy as np
import pytest

from probcell import (
    CoordSet,
    FeatureSpec,
    classify_proposals,
    load_model,
    save_model,
    train_forest,
    train_mlp,
)
from probcell.classifier import init_mlp, mlp_loss_and_grads
from probcell.errors import DimensionMismatch, NonFiniteLoss, SingleClass

from conftest import vol
from oracles import central_difference_gradient, exhaustive_best_split


def separable_1d(rng, n=60):
    neg = rng.uniform(-2.0, -0.2, size=(n // 2, 1))
    pos = rng.uniform(0.2, 2.0, size=(n // 2, 1))
    X = np.vstack([neg, pos])
    y = np.concatenate([np.zeros(n // 2), np.ones(n // 2)])
    return X, y


class TestForestTraining:
    def test_separable_data_memorized(self, rng):
        X, y = separable_1d(rng)
        model = train_forest(X, y, seed=7, n_trees=32)
        p = model.predict_proba(X)
        assert np.array_equal(p >= 0.5, y == 1)
        assert np.all((p <= 0.05) | (p >= 0.95))

    def test_contradictory_duplicates_predict_half(self, rng):
        base = rng.random((25, 3))
        X = np.vstack([base, base])
        y = np.concatenate([np.zeros(25), np.ones(25)])
        model = train_forest(X, y, seed=3)
        p = model.predict_proba(base)
        assert np.all(np.abs(p - 0.5) <= 0.1)

    def test_single_class_rejected(self, rng):
        with pytest.raises(SingleClass):
            train_forest(rng.random((10, 2)), np.ones(10), seed=0)

    def test_deterministic_given_seed(self, rng):
        X = rng.random((40, 6))
        y = (X[:, 0] + 0.3 * rng.random(40) > 0.5).astype(int)
        p1 = train_forest(X, y, seed=11, n_trees=16).predict_proba(X)
        p2 = train_forest(X, y, seed=11, n_trees=16).predict_proba(X)
        assert np.array_equal(p1, p2)


def _assert_tree_matches_oracle(tree, X, y, node=0, idx=None):
    idx = np.arange(len(y)) if idx is None else idx
    labels = y[idx]
    if tree.feature[node] < 0:
        # leaf is legitimate when pure, too small, or unsplittable
        pure = labels.min() == labels.max()
        assert pure or idx.size < 2 or exhaustive_best_split(X[idx], labels) is None
        assert tree.n_total[node] == idx.size
        return
    best = exhaustive_best_split(X[idx], labels)
    assert best is not None
    _, want_f, want_thr = best
    assert tree.feature[node] == want_f
    assert tree.threshold[node] == pytest.approx(want_thr, rel=1e-12)
    go_left = X[idx, tree.feature[node]] <= tree.threshold[node]
    _assert_tree_matches_oracle(tree, X, y, tree.left[node], idx[go_left])
    _assert_tree_matches_oracle(tree, X, y, tree.right[node], idx[~go_left])


class TestGiniOracle:
    def test_single_tree_matches_exhaustive_splits(self, rng):
        for trial in range(25):
            n = int(rng.integers(4, 9))
            X = rng.random((n, 2))
            y = rng.integers(0, 2, size=n)
            if y.min() == y.max():
                y[0] = 1 - y[0]
            model = train_forest(X, y, seed=trial, n_trees=1, bootstrap=False)
            _assert_tree_matches_oracle(model.trees[0], X, y.astype(np.float64))


class TestForestPrediction:
    def test_single_tree_leaf_fraction(self, rng):
        X = np.array([[0.0], [1.0], [2.0], [3.0]])
        y = np.array([0, 0, 1, 1])
        model = train_forest(X, y, seed=1, n_trees=1, bootstrap=False)
        p = model.predict_proba(np.array([[0.5], [2.5]]))
        assert np.array_equal(p, [0.0, 1.0])

    def test_unanimous_trees_give_exact_one(self, rng):
        X, y = separable_1d(rng)
        model = train_forest(X, y, seed=5, n_trees=16)
        p = model.predict_proba(np.array([[5.0]]))  # deep in the positive region
        assert p[0] == 1.0

    def test_dimension_mismatch(self, rng):
        X, y = separable_1d(rng)
        model = train_forest(X, y, seed=0, n_trees=4)
        with pytest.raises(DimensionMismatch):
            model.predict_proba(rng.random((3, 2)))

    def test_monotone_feature_transform_invariance(self, rng):
        X = rng.random((30, 3))
        y = (X[:, 1] > 0.5).astype(int)
        X2 = X.copy()
        X2[:, 1] = np.exp(3.0 * X2[:, 1])  # strictly monotone
        test = rng.random((10, 3))
        test2 = test.copy()
        test2[:, 1] = np.exp(3.0 * test2[:, 1])
        p1 = train_forest(X, y, seed=2, n_trees=8).predict_proba(test)
        p2 = train_forest(X2, y, seed=2, n_trees=8).predict_proba(test2)
        assert np.allclose(p1, p2)


class TestMlp:
    def test_separable_clusters_perfect_heldout(self, rng):
        n = 80
        X = np.vstack([
            rng.normal(-2.0, 0.3, size=(n, 2)),
            rng.normal(2.0, 0.3, size=(n, 2)),
        ])
        y = np.concatenate([np.zeros(n), np.ones(n)])
        model = train_mlp(X, y, seed=0, epochs=40, hidden=(16, 8))
        holdout = np.vstack([
            rng.normal(-2.0, 0.3, size=(20, 2)),
            rng.normal(2.0, 0.3, size=(20, 2)),
        ])
        want = np.concatenate([np.zeros(20), np.ones(20)])
        acc = np.mean((model.predict_proba(holdout) >= 0.5) == (want == 1))
        assert acc == 1.0

    def test_zero_epochs_returns_initialized_model(self, rng):
        X = rng.random((50, 4))
        y = rng.integers(0, 2, size=50)
        y[0], y[1] = 0, 1
        means = []
        for seed in range(10):
            model = train_mlp(X, y, seed=seed, epochs=0)
            means.append(model.predict_proba(X).mean())
        assert abs(np.mean(means) - 0.5) < 0.1  # untrained logistic output
        model = train_mlp(X, y, seed=9, epochs=0)
        ref = init_mlp(4, seed=9)
        for a, b in zip(model.weights, ref.weights):
            assert np.array_equal(a, b)

    def test_gradients_match_finite_differences(self, rng):
        worst = 0.0
        for seed in range(20):
            g = np.random.default_rng(seed)
            model = init_mlp(3, seed=seed, hidden=(5, 4))
            X = g.normal(size=(6, 3))
            y = g.integers(0, 2, size=6).astype(float)
            _, grad_w, grad_b = mlp_loss_and_grads(model, X, y)
            for k in range(len(model.weights)):
                def f_w(v, k=k):
                    model.weights[k] = v
                    return mlp_loss_and_grads(model, X, y)[0]
                w0 = model.weights[k].copy()
                fd = central_difference_gradient(f_w, w0.copy(), h=1e-6)
                model.weights[k] = w0
                rel = np.linalg.norm(fd - grad_w[k]) / max(np.linalg.norm(grad_w[k]), 1e-12)
                worst = max(worst, rel)
        assert worst < 1e-4

    def test_nonfinite_loss_guard(self, rng):
        X = rng.random((20, 2))
        X[3, 1] = np.nan
        y = np.concatenate([np.zeros(10), np.ones(10)])
        with pytest.raises(NonFiniteLoss):
            train_mlp(X, y, seed=0, epochs=2, hidden=(4,))

    def test_single_class_rejected(self, rng):
        with pytest.raises(SingleClass):
            train_mlp(rng.random((10, 2)), np.zeros(10), seed=0)


class TestSerialization:
    def test_forest_round_trip_bit_identical(self, rng, tmp_path):
        X = rng.random((40, 5))
        y = (X[:, 2] > 0.4).astype(int)
        model = train_forest(X, y, seed=4, n_trees=8)
        save_model(model, tmp_path / "forest.json")
        back = load_model(tmp_path / "forest.json")
        test = rng.random((25, 5))
        assert np.array_equal(model.predict_proba(test), back.predict_proba(test))
        payload = json.loads((tmp_path / "forest.json").read_text())
        assert payload["format"] == "probcell-forest" and payload["version"] == 1

    def test_mlp_round_trip_bit_identical(self, rng, tmp_path):
        X = rng.random((30, 3))
        y = (X[:, 0] > 0.5).astype(int)
        model = train_mlp(X, y, seed=4, epochs=3, hidden=(6, 4))
        save_model(model, tmp_path / "mlp.json")
        back = load_model(tmp_path / "mlp.json")
        test = rng.random((12, 3))
        assert np.array_equal(model.predict_proba(test), back.predict_proba(test))


class TestClassifyProposals:
    def test_empty_proposals(self, rng):
        X, y = separable_1d(rng)
        model = train_forest(X, y, seed=0, n_trees=4)
        out = classify_proposals(model, [("dm", vol(rng.random((8, 8, 8))))], CoordSet.empty())
        assert len(out) == 0

    def test_feature_width_contract(self, rng):
        maps3 = [
            ("dm", vol(rng.random((12, 12, 12)))),
            ("u_a", vol(rng.random((12, 12, 12)))),
            ("u_e", vol(rng.random((12, 12, 12)))),
        ]
        proposals = CoordSet(rng.random((6, 3)) * 8 + 2)
        from probcell import extract_features

        X = extract_features([maps3[0]], proposals, FeatureSpec())  # dm-only, d = 56
        y = np.array([0, 1] * 3)
        model = train_forest(X, y, seed=0, n_trees=4)
        with pytest.raises(DimensionMismatch):
            classify_proposals(model, maps3, proposals)  # d = 168 vs 56

    def test_probabilities_attached(self, rng):
        maps = [("dm", vol(rng.random((12, 12, 12))))]
        proposals = CoordSet(rng.random((6, 3)) * 8 + 2, dm_value=rng.random(6))
        X_train = rng.random((30, 56))
        y_train = np.array([0, 1] * 15)
        model = train_forest(X_train, y_train, seed=0, n_trees=4)
        out = classify_proposals(model, maps, proposals)
        assert len(out) == 6
        assert out.p is not None and np.all((out.p >= 0) & (out.p <= 1))
        assert np.array_equal(out.dm_value, proposals.dm_value)


class TestMoreDataHelps:
    def test_brier_does_not_degrade_with_more_data(self):
        briers = {100: [], 2000: []}
        for seed in range(10):
            g = np.random.default_rng(1000 + seed)

            def make(n):
                y = g.integers(0, 2, size=n)
                X = g.normal(0, 1, size=(n, 4))
                X[:, 0] += 1.2 * (2 * y - 1)  # overlapping informative feature
                return X, y

            X_test, y_test = make(1500)
            for n in (100, 2000):
                X, y = make(n)
                model = train_forest(X, y, seed=seed, n_trees=24)
                p = model.predict_proba(X_test)
                briers[n].append(float(np.mean((p - y_test) ** 2)))
        assert np.median(briers[2000]) <= np.median(briers[100]) + 0.02
