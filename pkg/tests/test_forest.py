import numpy as np
import pytest

from metastack.errors import DataError
from metastack.features import SynthSpec, generate_synthetic, impute_marker
from metastack.forest import (
    DecisionTree,
    ForestModel,
    ForestParams,
    ParamGrid,
    FULL_GRID,
    REDUCED_GRID,
    grid_search,
    predict_proba,
    stratified_fold_ids,
    train_forest,
    train_tree,
)
from metastack.metrics import confusion, mcc


def walk_tree(node, x):
    """Independent pure-Python traversal oracle over the TreeNode view."""
    while not node.is_leaf:
        node = node.left if x[node.column] <= node.threshold else node.right
    counts = np.asarray(node.class_counts, dtype=float)
    return counts / counts.sum()


def gini(counts):
    total = sum(counts)
    return 1.0 - sum((c / total) ** 2 for c in counts)


def exhaustive_best_gain(X, y, n_classes=2):
    """Brute-force scan of every (feature, threshold) split; returns best
    impurity decrease in weighted-Gini units."""
    m = len(y)
    parent = gini(np.bincount(y, minlength=n_classes).tolist()) * m
    best = 0.0
    for f in range(X.shape[1]):
        for thr in np.unique(X[:, f]):
            mask = X[:, f] <= thr
            if mask.all() or not mask.any():
                continue
            left = np.bincount(y[mask], minlength=n_classes).tolist()
            right = np.bincount(y[~mask], minlength=n_classes).tolist()
            child = gini(left) * sum(left) + gini(right) * sum(right)
            best = max(best, parent - child)
    return best


def split_gain(X, y, feature, threshold, n_classes=2):
    m = len(y)
    parent = gini(np.bincount(y, minlength=n_classes).tolist()) * m
    mask = X[:, feature] <= threshold
    left = np.bincount(y[mask], minlength=n_classes).tolist()
    right = np.bincount(y[~mask], minlength=n_classes).tolist()
    return parent - gini(left) * sum(left) - gini(right) * sum(right)


def manual_tree(class_counts_by_leaf, feature=0, threshold=0.0):
    """Tiny hand-built tree: one split, two leaves (or a single leaf)."""
    if len(class_counts_by_leaf) == 1:
        counts = np.array([class_counts_by_leaf[0]], dtype=np.int64)
        return DecisionTree(
            np.array([-1], dtype=np.int32),
            np.array([0.0]),
            np.array([-1], dtype=np.int32),
            np.array([-1], dtype=np.int32),
            counts,
            counts.shape[1],
        )
    left, right = class_counts_by_leaf
    counts = np.array([np.add(left, right), left, right], dtype=np.int64)
    return DecisionTree(
        np.array([feature, -1, -1], dtype=np.int32),
        np.array([threshold, 0.0, 0.0]),
        np.array([1, -1, -1], dtype=np.int32),
        np.array([2, -1, -1], dtype=np.int32),
        counts,
        counts.shape[1],
    )


class TestTrainTree:
    def test_two_point_split(self):
        params = ForestParams(1, 1, features_per_split="all", bootstrap=False)
        tree = train_tree(np.array([[0.0], [1.0]]), np.array([0, 1]), params)
        root = tree.root
        assert not root.is_leaf
        assert 0.0 < root.threshold < 1.0
        assert root.left.class_counts == (1, 0)
        assert root.right.class_counts == (0, 1)

    def test_pure_labels_single_leaf(self):
        params = ForestParams(1, 5, features_per_split="all", bootstrap=False)
        tree = train_tree(np.array([[0.0], [1.0], [2.0]]), np.array([1, 1, 1]), params)
        assert tree.root.is_leaf
        assert tree.depth() == 0

    def test_separable_data_perfect_accuracy(self):
        rng = np.random.default_rng(0)
        X = rng.normal(size=(50, 2))
        y = (X[:, 1] > 0.2).astype(np.int64)
        if len(np.unique(y)) < 2:
            pytest.skip("degenerate draw")
        params = ForestParams(1, 4, features_per_split="all", bootstrap=False)
        tree = train_tree(X, y, params)
        preds = [int(np.argmax(walk_tree(tree.root, x))) for x in X]
        assert preds == y.tolist()
        # root split must match the exhaustive-scan optimum
        root = tree.root
        got = split_gain(X, y, root.column, root.threshold)
        assert got == pytest.approx(exhaustive_best_gain(X, y), abs=1e-9)

    def test_chosen_splits_are_scan_optimal_with_ties(self):
        rng = np.random.default_rng(3)
        for trial in range(25):
            X = np.round(rng.normal(size=(40, 3)), 1)  # heavy value ties
            y = rng.integers(0, 2, 40).astype(np.int64)
            if len(np.unique(y)) < 2:
                continue
            params = ForestParams(
                1, 1, features_per_split="all", bootstrap=False, seed=trial
            )
            tree = train_tree(X, y, params)
            best = exhaustive_best_gain(X, y)
            if tree.root.is_leaf:
                assert best <= 1e-9
            else:
                got = split_gain(X, y, tree.root.column, tree.root.threshold)
                assert got == pytest.approx(best, abs=1e-9)

    def test_empty_input_rejected(self):
        with pytest.raises(DataError):
            train_tree(np.empty((0, 2)), np.array([]), ForestParams(1, 1))

    def test_accepted_splits_have_nonnegative_gain(self, small_plant):
        _, ds, parts = small_plant
        X = ds.values[:, parts[0].column_indices]
        params = ForestParams(1, 6, seed=4, bootstrap=False, features_per_split="all")
        tree = train_tree(X, ds.labels, params)

        def check(node, X_node, y_node):
            if node.is_leaf:
                return
            gain = split_gain(X_node, y_node, node.column, node.threshold)
            assert gain >= -1e-9
            mask = X_node[:, node.column] <= node.threshold
            check(node.left, X_node[mask], y_node[mask])
            check(node.right, X_node[~mask], y_node[~mask])

        check(tree.root, X, ds.labels)


class TestForest:
    def test_single_row_reproduces_label(self):
        model = train_forest(
            np.array([[1.0, 2.0]]), np.array([1]), ForestParams(1, 3, seed=0),
            classes=("a", "b"),
        )
        assert predict_proba(model, [1.0, 2.0]).tolist() == [0.0, 1.0]

    def test_same_seed_same_predictions(self, small_plant):
        _, ds, _ = small_plant
        params = ForestParams(10, 8, seed=77)
        a = train_forest(ds.values, ds.labels, params, classes=ds.classes)
        b = train_forest(ds.values, ds.labels, params, classes=ds.classes)
        probe = ds.values[:50]
        assert np.array_equal(a.predict_proba_matrix(probe), b.predict_proba_matrix(probe))
        assert a.digest() == b.digest()

    def test_planted_signal_learnable(self):
        spec = SynthSpec(
            unit_feature_counts=(8, 8),
            n_items=1500,
            visit_probabilities=(1.0, 1.0),
            signal_strength=0.9,
            class_prior=0.3,
            seed=17,
        )
        ds = impute_marker(generate_synthetic(spec))
        model = train_forest(
            ds.values, ds.labels, ForestParams(100, 25, seed=3), classes=ds.classes
        )
        preds = model.predict_labels(ds.values)
        assert mcc(confusion(ds.labels, preds, ds.classes)) > 0.5

    def test_probability_vector_sums_to_one(self, small_plant):
        _, ds, _ = small_plant
        model = train_forest(ds.values, ds.labels, ForestParams(15, 10, seed=5), classes=ds.classes)
        probs = model.predict_proba_matrix(ds.values[:100])
        assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-9)

    def test_proba_equals_mean_of_tree_walk_oracle(self, small_plant):
        _, ds, _ = small_plant
        model = train_forest(ds.values, ds.labels, ForestParams(7, 6, seed=9), classes=ds.classes)
        roots = [t.root for t in model.trees]
        for i in range(0, 60, 7):
            x = ds.values[i]
            expected = np.mean([walk_tree(r, x) for r in roots], axis=0)
            got = predict_proba(model, x)
            assert np.allclose(got, expected, atol=1e-12)

    def test_pure_votes_and_tie_break(self):
        pure = manual_tree([(3, 0), (0, 2)])
        model = ForestModel(ForestParams(1, 1), ("a", "b"), 1, [pure])
        assert predict_proba(model, [-1.0]).tolist() == [1.0, 0.0]

        t1 = manual_tree([(1, 0)])
        t2 = manual_tree([(0, 1)])
        model = ForestModel(ForestParams(2, 1), ("a", "b"), 1, [t1, t2])
        probs = predict_proba(model, [0.0])
        assert probs.tolist() == [0.5, 0.5]
        assert int(np.argmax(probs)) == 0  # tie resolves to the lowest index

    def test_deeper_never_hurts_training_accuracy(self, small_plant):
        _, ds, _ = small_plant
        accs = []
        for depth in (1, 2, 4, 8, 16):
            params = ForestParams(
                1, depth, features_per_split="all", bootstrap=False, seed=1
            )
            model = train_forest(ds.values, ds.labels, params, classes=ds.classes)
            accs.append((model.predict_labels(ds.values) == ds.labels).mean())
        assert all(b >= a - 1e-12 for a, b in zip(accs, accs[1:]))

    def test_width_mismatch_rejected(self, small_plant):
        _, ds, _ = small_plant
        model = train_forest(ds.values, ds.labels, ForestParams(2, 3, seed=0), classes=ds.classes)
        with pytest.raises(DataError):
            predict_proba(model, [0.0, 1.0])

    def test_serialization_round_trip(self, small_plant):
        _, ds, _ = small_plant
        model = train_forest(ds.values, ds.labels, ForestParams(5, 6, seed=2), classes=ds.classes)
        text = model.to_json()
        back = ForestModel.from_json(text)
        assert back.to_json() == text
        probe = ds.values[:40]
        assert np.array_equal(
            back.predict_proba_matrix(probe), model.predict_proba_matrix(probe)
        )

    def test_prefix_and_depth_views_match_standalone_training(self, small_plant):
        _, ds, _ = small_plant
        X, y = ds.values, ds.labels
        big = train_forest(X, y, ForestParams(20, 12, seed=31), classes=ds.classes)
        for n_est, depth in ((10, 5), (20, 12), (5, 12), (10, 12)):
            direct = train_forest(
                X, y, ForestParams(n_est, depth, seed=31), classes=ds.classes
            )
            view = big.proba_at_cuts(X[:80], [n_est], depth_cap=depth)[0]
            assert np.array_equal(view, direct.predict_proba_matrix(X[:80]))

    def test_class_weights_shift_decisions(self, small_plant):
        _, ds, _ = small_plant
        plain = train_forest(ds.values, ds.labels, ForestParams(10, 8, seed=3), classes=ds.classes)
        weighted = train_forest(
            ds.values,
            ds.labels,
            ForestParams(10, 8, seed=3, class_weights=(1.0, 10.0)),
            classes=ds.classes,
        )
        p_plain = plain.predict_labels(ds.values).mean()
        p_weighted = weighted.predict_labels(ds.values).mean()
        assert p_weighted > p_plain  # upweighting the rare class predicts it more

    def test_params_validation(self):
        with pytest.raises(DataError):
            ForestParams(0, 1)
        with pytest.raises(DataError):
            ForestParams(1, 0)
        with pytest.raises(DataError):
            ForestParams(1, 1, features_per_split=9).resolve_mtry(4)
        assert ForestParams(1, 1).resolve_mtry(64) == 8
        assert ForestParams(1, 1, features_per_split="all").resolve_mtry(5) == 5


class TestStratifiedFolds:
    def test_every_item_in_one_fold_and_balanced(self):
        y = np.array([0] * 70 + [1] * 30)
        folds = stratified_fold_ids(y, 3, seed=5)
        assert len(folds) == 100
        for f in range(3):
            members = y[folds == f]
            assert abs((members == 1).mean() - 0.3) < 0.08

    def test_deterministic(self):
        y = np.array([0, 1] * 50)
        assert np.array_equal(stratified_fold_ids(y, 4, 9), stratified_fold_ids(y, 4, 9))


class TestGridSearch:
    def test_single_cell_wins(self, small_plant):
        _, ds, _ = small_plant
        grid = ParamGrid(n_estimators=(5,), max_depth=(3,))
        result = grid_search(grid, ds.values, ds.labels, seed=1, classes=ds.classes)
        assert result.best.n_estimators == 5
        assert result.best.max_depth == 3
        assert len(result.table) == 1

    def test_full_grid_shape(self, small_plant):
        _, ds, _ = small_plant
        result = grid_search(
            FULL_GRID, ds.values[:150], ds.labels[:150], seed=2, classes=ds.classes
        )
        assert len(result.table) == 25
        assert {c.n_estimators for c in result.table} == {25, 50, 100, 200, 300}
        assert {c.max_depth for c in result.table} == {25, 50, 100, 200, 300}
        best_cell = result.cell(result.best.n_estimators, result.best.max_depth)
        assert best_cell.mean_metric == max(c.mean_metric for c in result.table)

    def test_tie_break_prefers_fewer_estimators_then_depth(self):
        # all-identical metrics: a one-class fold zeroes every cell
        y = np.zeros(40, dtype=np.int64)
        y[:2] = 1  # two positives land in distinct folds; folds see 1 positive each
        X = np.random.default_rng(0).normal(size=(40, 3))
        grid = ParamGrid(n_estimators=(10, 5), max_depth=(7, 2))
        with pytest.warns(UserWarning):
            result = grid_search(grid, X, y, seed=3, classes=("a", "b"))
        assert (result.best.n_estimators, result.best.max_depth) == (5, 2)

    def test_single_class_fold_scores_zero_with_warning(self):
        y = np.zeros(30, dtype=np.int64)
        y[0] = 1
        X = np.random.default_rng(1).normal(size=(30, 2))
        grid = ParamGrid(n_estimators=(4,), max_depth=(2,))
        with pytest.warns(UserWarning):
            result = grid_search(grid, X, y, seed=1, classes=("a", "b"))
        assert result.warnings
        assert any(m == 0.0 for m in result.cell(4, 2).fold_metrics)

    def test_matches_per_cell_training(self, small_plant):
        # the shared-forest evaluation must equal training each cell separately
        _, ds, _ = small_plant
        X, y = ds.values[:300], ds.labels[:300]
        grid = ParamGrid(n_estimators=(5, 10), max_depth=(3, 6))
        result = grid_search(grid, X, y, seed=11, classes=ds.classes)
        folds = stratified_fold_ids(y, 2, 11)
        from metastack.forest import _derive_fold_seed

        for cell in result.table:
            for f, metric in enumerate(cell.fold_metrics):
                train_idx = np.flatnonzero(folds != f)
                val_idx = np.flatnonzero(folds == f)
                model = train_forest(
                    X[train_idx],
                    y[train_idx],
                    ForestParams(
                        cell.n_estimators,
                        cell.max_depth,
                        seed=_derive_fold_seed(11, f),
                    ),
                    classes=ds.classes,
                )
                preds = model.predict_labels(X[val_idx])
                expected = mcc(confusion(y[val_idx], preds, ds.classes))
                assert metric == pytest.approx(expected, abs=1e-12)
