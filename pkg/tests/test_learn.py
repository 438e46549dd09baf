import math

import numpy as np
import pytest

from ct_triage.errors import (
    ConfigError,
    DegenerateData,
    EmptyNode,
    NonFiniteFeature,
    SchemaMismatch,
    SingleClassData,
)
from ct_triage.learn import (
    DecisionTree,
    Ensemble,
    Member,
    ModelParams,
    TrainSet,
    TreeParams,
    best_split,
    boost_round,
    choose_threshold,
    classify,
    ensemble_proba,
    ensemble_scores,
    fit_adaboost,
    fit_random_forest,
    fit_tree,
    gini_impurity,
    load_model,
    save_model,
    train_model,
    tree_predict,
)
from ct_triage.models import FeatureSchema, FeatureSpec
from ct_triage.phantom import generate_feature_corpus


def leaf(covid: bool, n_features: int = 1) -> DecisionTree:
    return DecisionTree(
        feature=np.array([-1]),
        threshold=np.array([0.0]),
        left=np.array([-1]),
        right=np.array([-1]),
        value=np.array([[0.0, 1.0] if covid else [1.0, 0.0]]),
        importance=np.zeros(n_features),
    )


def exhaustive_split(X, y, w):
    """Every (feature, midpoint) candidate scored directly; same tie rule as the learner."""
    parent = gini_impurity((w[y == 0].sum(), w[y == 1].sum()))
    total = w.sum()
    candidates = []
    for f in range(X.shape[1]):
        values = np.unique(X[:, f])
        for a, b in zip(values[:-1], values[1:]):
            t = (a + b) / 2.0
            left = X[:, f] <= t
            child = 0.0
            for side in (left, ~left):
                weight = w[side].sum()
                child += weight * gini_impurity((w[side & (y == 0)].sum(), w[side & (y == 1)].sum()))
            candidates.append((f, t, parent - child / total))
    if not candidates:
        return None
    best = max(c[2] for c in candidates)
    return next(c for c in candidates if c[2] >= best - 1e-12)


def walk(tree, row):
    node = 0
    while not tree.is_leaf(node):
        node = tree.left[node] if row[tree.feature[node]] <= tree.threshold[node] else tree.right[node]
    return node


class TestGini:
    def test_values(self):
        assert gini_impurity((1.0, 1.0)) == pytest.approx(0.5)
        assert gini_impurity((3.0, 0.0)) == 0.0
        assert gini_impurity((1.0, 3.0)) == pytest.approx(0.375)

    def test_empty_node(self):
        with pytest.raises(EmptyNode):
            gini_impurity((0.0, 0.0))


class TestBestSplit:
    @pytest.mark.parametrize("seed", range(8))
    def test_matches_exhaustive_search(self, seed):
        rng = np.random.default_rng(seed)
        X = rng.integers(0, 6, size=(30, 4)).astype(float)
        y = rng.integers(0, 2, size=30)
        w = rng.random(30) + 0.1
        w /= w.sum()
        found = best_split(X, y, w, range(4))
        expected = exhaustive_split(X, y, w)
        assert found.feature == expected[0]
        assert found.threshold == pytest.approx(expected[1])
        assert found.decrease == pytest.approx(expected[2], abs=1e-12)

    def test_duplicate_columns_prefer_lowest_index(self):
        x = np.array([0.0, 1.0, 2.0, 3.0])
        X = np.column_stack([x, x])
        y = np.array([0, 0, 1, 1])
        split = best_split(X, y, np.full(4, 0.25), [1, 0])
        assert split.feature == 0
        assert split.threshold == 1.5
        assert split.decrease == pytest.approx(0.5)

    def test_constant_columns_have_no_split(self):
        X = np.ones((4, 2))
        assert best_split(X, np.array([0, 1, 0, 1]), np.full(4, 0.25), [0, 1]) is None

    def test_threshold_between_adjacent_floats(self):
        a = 1.0
        b = np.nextafter(1.0, 2.0)
        X = np.array([[a], [a], [b], [b]])
        y = np.array([0, 0, 1, 1])
        split = best_split(X, y, np.full(4, 0.25), [0])
        assert split.threshold == a
        assert np.all((X[:, 0] <= split.threshold) == (y == 0))


class TestFitTree:
    @pytest.fixture
    def noisy(self):
        rng = np.random.default_rng(42)
        X = rng.normal(size=(60, 5))
        y = (X[:, 1] + 0.5 * rng.normal(size=60) > 0).astype(int)
        return TrainSet(X, y)

    def test_separable_stump(self):
        data = TrainSet(np.array([[0.0], [1.0], [2.0], [3.0]]), np.array([0, 0, 1, 1]))
        tree = fit_tree(data, TreeParams(max_depth=1))
        assert tree.n_nodes == 3
        assert (tree.feature[0], tree.threshold[0]) == (0, 1.5)
        assert tree.predict(data.X).tolist() == [0, 0, 1, 1]
        assert tree.importance.tolist() == pytest.approx([0.5])

    def test_depth_limit(self, noisy):
        for depth in (1, 2, 3):
            assert fit_tree(noisy, TreeParams(max_depth=depth)).depth() <= depth

    def test_stopping_rules(self, noisy):
        assert fit_tree(noisy, TreeParams(min_samples_split=61)).n_nodes == 1
        assert fit_tree(noisy, TreeParams(min_impurity_decrease=1.0)).n_nodes == 1

    def test_pure_node_is_leaf(self):
        data = TrainSet(np.arange(6.0)[:, None], np.array([0, 0, 0, 1, 1, 1]))
        tree = fit_tree(data, TreeParams(max_depth=4))
        assert tree.n_nodes == 3

    def test_allowed_features(self, noisy):
        tree = fit_tree(noisy, TreeParams(max_depth=3), allowed_features=[0, 3])
        used = set(tree.feature[tree.feature >= 0].tolist())
        assert used <= {0, 3}
        assert tree.n_features == 5
        assert tree.importance[[1, 2, 4]].tolist() == [0.0, 0.0, 0.0]

    def test_apply_matches_manual_walk(self, noisy):
        tree = fit_tree(noisy, TreeParams(max_depth=3))
        leaves = tree.apply(noisy.X)
        assert leaves.tolist() == [walk(tree, row) for row in noisy.X]
        assert all(tree.is_leaf(node) for node in leaves)

    def test_importance_ledger(self, noisy):
        tree = fit_tree(noisy, TreeParams(max_depth=2))
        expected = np.zeros(5)
        root = tree.value[0].sum()
        for node in range(tree.n_nodes):
            if tree.is_leaf(node):
                continue
            parent = gini_impurity(tree.value[node])
            children = sum(
                tree.value[c].sum() * gini_impurity(tree.value[c]) for c in (tree.left[node], tree.right[node])
            )
            expected[tree.feature[node]] += (parent * tree.value[node].sum() - children) / root
        assert tree.importance == pytest.approx(expected, abs=1e-12)

    def test_monotone_transform_keeps_structure(self, noisy):
        transformed = noisy.X.copy()
        transformed[:, 1] = np.exp(transformed[:, 1])
        transformed[:, 3] = transformed[:, 3] ** 3 + 10.0
        tree = fit_tree(noisy, TreeParams(max_depth=3))
        again = fit_tree(TrainSet(transformed, noisy.y), TreeParams(max_depth=3))
        assert again.feature.tolist() == tree.feature.tolist()
        assert again.left.tolist() == tree.left.tolist()
        assert again.apply(transformed).tolist() == tree.apply(noisy.X).tolist()
        assert np.array_equal(again.predict(transformed), tree.predict(noisy.X))

    def test_serialized_tree_predicts_the_same(self, noisy):
        tree = fit_tree(noisy, TreeParams(max_depth=3))
        again = DecisionTree.from_dict(tree.to_dict())
        assert np.array_equal(again.predict_proba(noisy.X), tree.predict_proba(noisy.X))

    def test_tree_predict(self):
        data = TrainSet(np.array([[0.0], [1.0], [2.0], [3.0]]), np.array([0, 0, 1, 1]))
        tree = fit_tree(data, TreeParams(max_depth=1))
        assert tree_predict(tree, [2.5]) == ("covid", 1.0)
        assert tree_predict(tree, [0.2]).label == "other"
        with pytest.raises(SchemaMismatch):
            tree_predict(tree, [1.0, 2.0])


class TestTrainSet:
    def test_rejections(self):
        with pytest.raises(DegenerateData):
            TrainSet(np.zeros((0, 3)), np.zeros(0))
        with pytest.raises(NonFiniteFeature):
            TrainSet(np.array([[np.nan]]), np.array([1]))
        with pytest.raises(DegenerateData):
            TrainSet(np.zeros((2, 1)), np.array([0, 2]))
        with pytest.raises(DegenerateData):
            TrainSet(np.zeros((2, 1)), np.array([0, 1]), np.array([0.0, 0.0]))

    def test_weights_normalized(self):
        data = TrainSet(np.zeros((4, 1)), np.array([0, 1, 0, 1]), np.array([1.0, 1.0, 2.0, 4.0]))
        assert data.sample_weight.sum() == pytest.approx(1.0)
        assert data.sample_weight[3] == pytest.approx(0.5)


class TestAdaBoost:
    def test_single_round_weight_update(self):
        data = TrainSet(np.array([[0.0], [1.0], [2.0], [3.0]]), np.array([0, 1, 0, 1]))
        step = boost_round(data, TreeParams(max_depth=1), 1.0)
        assert step.accepted
        assert step.error == pytest.approx(0.25)
        assert step.alpha == pytest.approx(math.log(3.0))
        missed = step.tree.predict(data.X) != data.y
        manual = data.sample_weight * np.where(missed, 3.0, 1.0)
        assert step.weights == pytest.approx(manual / manual.sum())
        assert step.weights.sum() == pytest.approx(1.0)

    def test_learning_rate_scales_alpha(self):
        data = TrainSet(np.array([[0.0], [1.0], [2.0], [3.0]]), np.array([0, 1, 0, 1]))
        assert boost_round(data, TreeParams(max_depth=1), 0.5).alpha == pytest.approx(0.5 * math.log(3.0))

    def test_perfect_first_round_stops(self):
        data = TrainSet(np.array([[0.0], [1.0], [2.0], [3.0]]), np.array([0, 0, 1, 1]))
        model = fit_adaboost(data, ModelParams(n_estimators=10, max_depth=1))
        assert len(model.members) == 1
        assert model.members[0].weight == pytest.approx(math.log((1 - 1e-10) / 1e-10))

    def test_useless_first_round_is_rejected(self):
        data = TrainSet(np.zeros((4, 1)), np.array([0, 1, 0, 1]))
        with pytest.raises(DegenerateData):
            fit_adaboost(data, ModelParams(n_estimators=10, learning_rate=0.7, max_depth=1))

    def test_weights_stay_normalized_every_round(self):
        rng = np.random.default_rng(5)
        X = rng.normal(size=(60, 3))
        y = (X[:, 0] + 0.5 * rng.normal(size=60) > 0).astype(int)
        weights = None
        for _ in range(15):
            step = boost_round(TrainSet(X, y, weights), TreeParams(max_depth=1), 1.0)
            if not step.accepted:
                break
            assert step.error < 0.5
            assert np.all(step.weights > 0)
            assert step.weights.sum() == pytest.approx(1.0, abs=1e-12)
            if step.error == 0.0:
                break
            weights = step.weights

    def test_member_weights_positive(self):
        rng = np.random.default_rng(1)
        X = rng.normal(size=(80, 4))
        y = (X[:, 0] * X[:, 1] > 0).astype(int)
        model = fit_adaboost(TrainSet(X, y), ModelParams(n_estimators=20, max_depth=2))
        assert 1 <= len(model.members) <= 20
        assert np.all(model.weights > 0)
        scores = ensemble_scores(model, X)
        assert np.all((scores >= 0) & (scores <= 1))

    def test_seed_does_not_change_boosting(self):
        rng = np.random.default_rng(2)
        X = rng.normal(size=(50, 3))
        y = (X[:, 1] > 0.2).astype(int)
        params = ModelParams(n_estimators=6, max_depth=1)
        a = fit_adaboost(TrainSet(X, y), params, seed=0)
        b = fit_adaboost(TrainSet(X, y), params, seed=99)
        assert np.array_equal(a.weights, b.weights)
        assert np.array_equal(ensemble_scores(a, X), ensemble_scores(b, X))

    def test_single_class_rejected(self):
        with pytest.raises(SingleClassData):
            fit_adaboost(TrainSet(np.zeros((3, 1)), np.ones(3, dtype=int)), ModelParams())


class TestEnsembleScores:
    def test_weighted_vote(self):
        model = Ensemble(
            "adaboost-dt",
            [Member(leaf(True), 2.0), Member(leaf(False), 1.0), Member(leaf(True), 1.0)],
            learning_rate=1.0,
            n_features=1,
            schema_version="1",
        )
        assert ensemble_proba(model, [0.0]) == pytest.approx(0.75)
        assert classify(model, np.zeros((2, 1))).tolist() == [1, 1]

    def test_width_mismatch(self):
        model = Ensemble("adaboost-dt", [Member(leaf(True), 1.0)], 1.0, 1, "1")
        with pytest.raises(SchemaMismatch):
            ensemble_scores(model, np.zeros((2, 3)))

    def test_empty_ensemble_rejected(self):
        with pytest.raises(DegenerateData):
            Ensemble("rf", [], 1.0, 1, "1")


class TestRandomForest:
    @pytest.fixture
    def data(self):
        rng = np.random.default_rng(3)
        X = rng.normal(size=(50, 9))
        y = (X[:, 2] > 0).astype(int)
        return TrainSet(X, y)

    def test_same_seed_same_forest(self, data):
        params = ModelParams(model="rf", n_estimators=8, max_depth=3)
        a = fit_random_forest(data, params, seed=5)
        b = fit_random_forest(data, params, seed=5)
        assert np.array_equal(ensemble_scores(a, data.X), ensemble_scores(b, data.X))
        assert all(m.weight == 1.0 for m in a.members)

    def test_scores_are_mean_leaf_probability(self, data):
        model = fit_random_forest(data, ModelParams(model="rf", n_estimators=4, max_depth=2), seed=0)
        manual = np.mean([m.tree.predict_proba(data.X) for m in model.members], axis=0)
        assert ensemble_scores(model, data.X) == pytest.approx(manual)

    def test_restricted_features(self, data):
        model = fit_random_forest(
            data, ModelParams(model="rf", n_estimators=5, max_depth=3), seed=0, allowed_features=[0, 1]
        )
        for member in model.members:
            assert set(member.tree.feature[member.tree.feature >= 0].tolist()) <= {0, 1}


class TestThreshold:
    def test_separable(self):
        assert choose_threshold([0.9, 0.9, 0.1, 0.1], [1, 1, 0, 0]) == pytest.approx(0.5)

    def test_identical_scores(self):
        assert choose_threshold([0.4, 0.4, 0.4], [1, 0, 1]) == 0.0

    def test_ties_go_to_smallest(self):
        assert choose_threshold([0.2, 0.4, 0.6, 0.8], [0, 1, 0, 1]) == pytest.approx(0.3)

    def test_single_class(self):
        with pytest.raises(SingleClassData):
            choose_threshold([0.1, 0.2], [1, 1])


class TestTrainModel:
    @pytest.fixture(scope="class")
    def table(self):
        return generate_feature_corpus(60, 0.5, 9, "OpacityStats")

    def test_masked_groups_never_split(self, table):
        model = train_model(table.X, table.y, ModelParams(n_estimators=10), 0, table.schema, ["OpacityStats"])
        masked = set(table.schema.indices_for_groups(["OpacityStats"]).tolist())
        for member in model.members:
            assert not masked & set(member.tree.feature.tolist())
        assert model.masked_groups == ("OpacityStats",)
        assert model.schema_version == "1"

    def test_threshold_set_from_training_scores(self, table):
        model = train_model(table.X, table.y, ModelParams(n_estimators=10), 0, table.schema)
        scores = ensemble_scores(model, table.X)
        assert model.threshold == choose_threshold(scores, table.y)
        assert (classify(model, table.X) == table.y).mean() > 0.9

    def test_save_and_load(self, tmp_path, table):
        model = train_model(table.X, table.y, ModelParams(model="rf", n_estimators=5), 3, table.schema)
        save_model(model, tmp_path / "model.json", {"config": {"seed": 3}})
        loaded = load_model(tmp_path / "model.json", table.schema)
        assert loaded.kind == "rf"
        assert loaded.threshold == model.threshold
        assert np.array_equal(ensemble_scores(loaded, table.X), ensemble_scores(model, table.X))

    def test_schema_mismatch_on_load(self, tmp_path, table):
        model = train_model(table.X, table.y, ModelParams(n_estimators=3), 0, table.schema)
        save_model(model, tmp_path / "model.json")
        other = FeatureSchema((FeatureSpec("a", "G"),), "2")
        with pytest.raises(SchemaMismatch):
            load_model(tmp_path / "model.json", other)


class TestModelParams:
    def test_validation(self):
        with pytest.raises(ConfigError):
            ModelParams(model="svm")
        with pytest.raises(ConfigError):
            ModelParams(n_estimators=0)
        with pytest.raises(ConfigError):
            ModelParams(learning_rate=0.0)
        with pytest.raises(ConfigError):
            ModelParams(max_depth=0)
        with pytest.raises(ConfigError):
            ModelParams.from_dict({"depth": 2})

    def test_dict_form(self):
        params = ModelParams.from_dict({"model": "rf", "n_estimators": 7})
        assert params.to_dict()["n_estimators"] == 7
        assert params.tree == TreeParams(2, 2, 0.0)
