"""
Weighted-Gini CART trees and the two ensembles built from them.

Labels are integers: 1 = covid, 0 = other. Trees send a row left iff
value <= threshold. Every model records the schema version and the feature
groups that were masked out while fitting; masked columns are never looked at.
"""

import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .errors import (
    ConfigError,
    DegenerateData,
    EmptyNode,
    NonFiniteFeature,
    SchemaMismatch,
    SingleClassData,
)
from .models import CLASS_LABELS, FeatureSchema
from .utils import PathLike, read_json, write_json

logger = logging.getLogger(__name__)

MODEL_KINDS = ("adaboost-dt", "rf")

# near-equal split gains / Youden indices resolve by position, not by rounding noise
_TIE_TOLERANCE = 1e-12
# smallest weighted error used when computing a member weight
_MIN_ERROR = 1e-10


@dataclass(frozen=True)
class TreeParams:
    max_depth: int = 2
    min_samples_split: int = 2
    min_impurity_decrease: float = 0.0

    def __post_init__(self):
        if int(self.max_depth) < 1:
            raise ConfigError(f"max_depth must be >= 1, got {self.max_depth}")
        if int(self.min_samples_split) < 2:
            raise ConfigError(f"min_samples_split must be >= 2, got {self.min_samples_split}")
        if self.min_impurity_decrease < 0:
            raise ConfigError(f"min_impurity_decrease must be >= 0, got {self.min_impurity_decrease}")


@dataclass(frozen=True)
class ModelParams:
    model: str = "adaboost-dt"
    n_estimators: int = 50
    learning_rate: float = 1.0
    max_depth: int = 2
    min_samples_split: int = 2
    min_impurity_decrease: float = 0.0
    features_per_split: Optional[int] = None
    bootstrap: bool = True

    def __post_init__(self):
        if self.model not in MODEL_KINDS:
            raise ConfigError(f"model must be one of {MODEL_KINDS}, got {self.model!r}")
        if int(self.n_estimators) < 1:
            raise ConfigError(f"n_estimators must be >= 1, got {self.n_estimators}")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.features_per_split is not None and int(self.features_per_split) < 1:
            raise ConfigError(f"features_per_split must be >= 1, got {self.features_per_split}")
        self.tree

    @property
    def tree(self) -> TreeParams:
        return TreeParams(int(self.max_depth), int(self.min_samples_split), float(self.min_impurity_decrease))

    @classmethod
    def from_dict(cls, payload: Dict[str, object]) -> "ModelParams":
        known = {f.name for f in fields(cls)}
        unknown = set(payload) - known
        if unknown:
            raise ConfigError(f"Unknown model parameter(s): {sorted(unknown)}")
        return cls(**payload)

    def to_dict(self) -> Dict[str, object]:
        return asdict(self)


@dataclass
class TrainSet:
    X: np.ndarray
    y: np.ndarray
    sample_weight: Optional[np.ndarray] = None

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        if self.X.ndim != 2 or self.X.shape[0] == 0:
            raise DegenerateData(f"Training data needs at least one row, got shape {self.X.shape}")
        if not np.all(np.isfinite(self.X)):
            row, col = np.argwhere(~np.isfinite(self.X))[0]
            raise NonFiniteFeature(f"Row {row}, feature {col} is not finite")
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.y.shape != (self.X.shape[0],) or not np.isin(self.y, (0, 1)).all():
            raise DegenerateData("Labels must be a 0/1 vector with one entry per row")
        if self.sample_weight is None:
            w = np.full(len(self.y), 1.0 / len(self.y))
        else:
            w = np.asarray(self.sample_weight, dtype=np.float64)
            if w.shape != self.y.shape or np.any(w < 0) or not w.sum() > 0:
                raise DegenerateData("Sample weights must be nonnegative with a positive sum")
            w = w / w.sum()
        self.sample_weight = w

    @property
    def n_features(self) -> int:
        return self.X.shape[1]

    def has_both_classes(self) -> bool:
        return bool(np.any(self.y == 1) and np.any(self.y == 0))


def gini_impurity(totals: Sequence[float]) -> float:
    """1 - p0^2 - p1^2 for a pair of weighted class totals."""
    w0, w1 = float(totals[0]), float(totals[1])
    total = w0 + w1
    if total <= 0:
        raise EmptyNode("Gini impurity of an empty node is undefined")
    p0, p1 = w0 / total, w1 / total
    return 1.0 - p0 * p0 - p1 * p1


@dataclass
class DecisionTree:
    """
    Array-backed binary tree. Node 0 is the root; leaves have feature == -1.
    `value[i]` holds the weighted (other, covid) totals of the training rows that
    reached node i; `importance` is the per-feature sum of
    (node weight fraction x impurity decrease) over the tree's splits.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    importance: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    @property
    def n_features(self) -> int:
        return len(self.importance)

    def is_leaf(self, node: int) -> bool:
        return self.feature[node] < 0

    def depth(self) -> int:
        depths = np.zeros(self.n_nodes, dtype=int)
        for node in range(self.n_nodes):
            if not self.is_leaf(node):
                depths[self.left[node]] = depths[node] + 1
                depths[self.right[node]] = depths[node] + 1
        return int(depths.max())

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf index reached by every row."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.n_features:
            raise SchemaMismatch(f"Rows have {X.shape[1]} features, tree expects {self.n_features}")
        nodes = np.zeros(len(X), dtype=np.intp)
        active = ~self._leaf_mask()[nodes]
        while active.any():
            rows = np.flatnonzero(active)
            current = nodes[rows]
            go_left = X[rows, self.feature[current]] <= self.threshold[current]
            nodes[rows] = np.where(go_left, self.left[current], self.right[current])
            active[rows] = ~self._leaf_mask()[nodes[rows]]
        return nodes

    def _leaf_mask(self) -> np.ndarray:
        return self.feature < 0

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        """Weighted covid fraction of the leaf each row lands in."""
        leaves = self.value[self.apply(X)]
        return leaves[:, 1] / leaves.sum(axis=1)

    def predict(self, X: np.ndarray) -> np.ndarray:
        return (self.predict_proba(X) >= 0.5).astype(np.int64)

    def to_dict(self) -> Dict[str, list]:
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.tolist(),
            "importance": self.importance.tolist(),
        }

    @classmethod
    def from_dict(cls, payload: Dict[str, list]) -> "DecisionTree":
        return cls(
            feature=np.asarray(payload["feature"], dtype=np.intp),
            threshold=np.asarray(payload["threshold"], dtype=np.float64),
            left=np.asarray(payload["left"], dtype=np.intp),
            right=np.asarray(payload["right"], dtype=np.intp),
            value=np.asarray(payload["value"], dtype=np.float64).reshape(-1, 2),
            importance=np.asarray(payload["importance"], dtype=np.float64),
        )


class TreePrediction(NamedTuple):
    label: str
    covid_probability: float


def tree_predict(tree: DecisionTree, x: Sequence[float]) -> TreePrediction:
    row = np.asarray(x, dtype=np.float64)
    if row.ndim != 1 or row.size != tree.n_features:
        raise SchemaMismatch(f"Row has {row.size} features, tree expects {tree.n_features}")
    p = float(tree.predict_proba(row[None, :])[0])
    return TreePrediction(CLASS_LABELS[1] if p >= 0.5 else CLASS_LABELS[0], p)


class _Split(NamedTuple):
    feature: int
    threshold: float
    decrease: float


def _candidate_splits(X, y, w, feature_indices, parent_impurity):
    """Yield (feature, thresholds, decreases) for every feature with at least one cut."""
    total = w.sum()
    for f in feature_indices:
        order = np.argsort(X[:, f], kind="mergesort")
        xs = X[order, f]
        cut = np.flatnonzero(xs[:-1] < xs[1:])
        if cut.size == 0:
            continue
        ws, ys = w[order], y[order]
        left1 = np.cumsum(np.where(ys == 1, ws, 0.0))[cut]
        left0 = np.cumsum(np.where(ys == 0, ws, 0.0))[cut]
        right1 = np.maximum(ws[ys == 1].sum() - left1, 0.0)
        right0 = np.maximum(ws[ys == 0].sum() - left0, 0.0)
        wl, wr = left0 + left1, right0 + right1
        with np.errstate(invalid="ignore", divide="ignore"):
            gini_l = np.where(wl > 0, 1.0 - (left0 / wl) ** 2 - (left1 / wl) ** 2, 0.0)
            gini_r = np.where(wr > 0, 1.0 - (right0 / wr) ** 2 - (right1 / wr) ** 2, 0.0)
        decrease = parent_impurity - (wl * gini_l + wr * gini_r) / total
        thresholds = (xs[cut] + xs[cut + 1]) / 2.0
        # midpoint of adjacent floats can round up onto the right value
        thresholds = np.where(thresholds >= xs[cut + 1], xs[cut], thresholds)
        yield f, thresholds, decrease


def best_split(X, y, w, feature_indices) -> Optional[_Split]:
    """
    Exhaustive (feature, midpoint) search maximizing the weighted Gini decrease.
    Near-ties go to the lowest feature index, then the lowest threshold.
    """
    totals = (w[y == 0].sum(), w[y == 1].sum())
    parent = gini_impurity(totals)
    candidates = list(_candidate_splits(X, y, w, sorted(feature_indices), parent))
    if not candidates:
        return None
    best = max(float(dec.max()) for _, _, dec in candidates)
    for f, thresholds, decrease in candidates:
        hits = np.flatnonzero(decrease >= best - _TIE_TOLERANCE)
        if hits.size:
            i = hits[0]
            return _Split(int(f), float(thresholds[i]), max(float(decrease[i]), 0.0))
    return None


def fit_tree(
    data: TrainSet,
    params: TreeParams,
    allowed_features: Optional[Sequence[int]] = None,
    max_features: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> DecisionTree:
    """
    Grow a CART tree greedily on weighted data.

    Args:
        data: rows, 0/1 labels and sample weights
        params: depth / split-size / impurity-decrease stopping rules
        allowed_features: column indices the tree may split on (default: all)
        max_features: per-split random feature subset size (random forest)
        rng: generator used for the feature subsets

    Returns:
        Fitted DecisionTree indexed against the full column set of data.X
    """
    X, y, w = data.X, data.y, data.sample_weight
    allowed = np.arange(data.n_features) if allowed_features is None else np.asarray(allowed_features, dtype=np.intp)
    if max_features is not None and rng is None:
        rng = np.random.default_rng(0)
    root_weight = w.sum()

    feature: List[int] = []
    threshold: List[float] = []
    left: List[int] = []
    right: List[int] = []
    value: List[Tuple[float, float]] = []
    importance = np.zeros(data.n_features, dtype=np.float64)

    def new_node(totals):
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(totals)
        return len(feature) - 1

    def grow(idx: np.ndarray, depth: int) -> int:
        wi, yi = w[idx], y[idx]
        totals = (float(wi[yi == 0].sum()), float(wi[yi == 1].sum()))
        node = new_node(totals)
        if depth >= params.max_depth or len(idx) < params.min_samples_split:
            return node
        if totals[0] <= 0 or totals[1] <= 0:
            return node

        candidates = allowed
        if max_features is not None and max_features < len(allowed):
            candidates = np.sort(rng.choice(allowed, size=max_features, replace=False))
        split = best_split(X[idx], yi, wi, candidates)
        if split is None or split.decrease < params.min_impurity_decrease:
            return node

        importance[split.feature] += (wi.sum() / root_weight) * split.decrease
        go_left = X[idx, split.feature] <= split.threshold
        feature[node] = split.feature
        threshold[node] = split.threshold
        left[node] = grow(idx[go_left], depth + 1)
        right[node] = grow(idx[~go_left], depth + 1)
        return node

    grow(np.arange(len(y)), 0)
    return DecisionTree(
        feature=np.asarray(feature, dtype=np.intp),
        threshold=np.asarray(threshold, dtype=np.float64),
        left=np.asarray(left, dtype=np.intp),
        right=np.asarray(right, dtype=np.intp),
        value=np.asarray(value, dtype=np.float64).reshape(-1, 2),
        importance=importance,
    )


@dataclass
class Member:
    tree: DecisionTree
    weight: float


@dataclass
class Ensemble:
    kind: str
    members: List[Member]
    learning_rate: float
    n_features: int
    schema_version: str
    threshold: float = 0.5
    masked_groups: Tuple[str, ...] = ()
    params: Dict[str, object] = field(default_factory=dict)

    def __post_init__(self):
        if not self.members:
            raise DegenerateData("An ensemble needs at least one member")
        if not 0.0 <= self.threshold <= 1.0:
            raise ConfigError(f"threshold must lie in [0, 1], got {self.threshold}")

    @property
    def weights(self) -> np.ndarray:
        return np.array([m.weight for m in self.members], dtype=np.float64)

    def to_dict(self) -> Dict[str, object]:
        return {
            "kind": self.kind,
            "schema_version": self.schema_version,
            "n_features": self.n_features,
            "masked_groups": list(self.masked_groups),
            "learning_rate": self.learning_rate,
            "threshold": self.threshold,
            "params": self.params,
            "members": [{"weight": m.weight, "tree": m.tree.to_dict()} for m in self.members],
        }

    @classmethod
    def from_dict(cls, payload: Dict[str, object]) -> "Ensemble":
        return cls(
            kind=str(payload["kind"]),
            members=[Member(DecisionTree.from_dict(m["tree"]), float(m["weight"])) for m in payload["members"]],
            learning_rate=float(payload["learning_rate"]),
            n_features=int(payload["n_features"]),
            schema_version=str(payload["schema_version"]),
            threshold=float(payload["threshold"]),
            masked_groups=tuple(payload.get("masked_groups", ())),
            params=dict(payload.get("params", {})),
        )


class BoostRound(NamedTuple):
    tree: DecisionTree
    error: float
    alpha: float
    weights: np.ndarray
    accepted: bool


def boost_round(
    data: TrainSet,
    tree_params: TreeParams,
    learning_rate: float,
    allowed_features: Optional[Sequence[int]] = None,
) -> BoostRound:
    """
    One discrete boosting round: fit on the current weights, compute the weighted
    error and member weight alpha = learning_rate * ln((1 - err) / err), then
    multiply the weights of misclassified rows by exp(alpha) and renormalize.
    """
    tree = fit_tree(data, tree_params, allowed_features)
    missed = tree.predict(data.X) != data.y
    error = float(data.sample_weight[missed].sum())
    if error >= 0.5:
        return BoostRound(tree, error, 0.0, data.sample_weight, False)
    alpha = learning_rate * math.log((1.0 - max(error, _MIN_ERROR)) / max(error, _MIN_ERROR))
    weights = data.sample_weight * np.exp(alpha * missed)
    weights /= weights.sum()
    return BoostRound(tree, error, alpha, weights, True)


def _require_both_classes(data: TrainSet) -> None:
    if not data.has_both_classes():
        raise SingleClassData("Fitting an ensemble needs both covid and other cases")


def fit_adaboost(
    data: TrainSet,
    params: ModelParams,
    seed: int = 0,
    allowed_features: Optional[Sequence[int]] = None,
    schema_version: str = "",
    masked_groups: Sequence[str] = (),
) -> Ensemble:
    """
    Discrete two-class boosting. Rounds are deterministic, so `seed` is unused; it keeps
    the signature shared with fit_random_forest.

    Raises:
        DegenerateData: the first round already has weighted error >= 0.5
    """
    _require_both_classes(data)
    weights = data.sample_weight
    members: List[Member] = []
    for t in range(params.n_estimators):
        step = boost_round(TrainSet(data.X, data.y, weights), params.tree, params.learning_rate, allowed_features)
        if not step.accepted:
            if not members:
                raise DegenerateData(
                    f"First boosting round has weighted error {step.error:.3f} >= 0.5; no feature separates the classes"
                )
            logger.debug("Boosting stopped at round %d: error %.3f >= 0.5", t, step.error)
            break
        members.append(Member(step.tree, step.alpha))
        logger.debug("Round %d: error %.4f, alpha %.4f", t, step.error, step.alpha)
        if step.error == 0.0:
            break
        weights = step.weights
    return Ensemble(
        kind="adaboost-dt",
        members=members,
        learning_rate=float(params.learning_rate),
        n_features=data.n_features,
        schema_version=schema_version,
        masked_groups=tuple(masked_groups),
        params=params.to_dict(),
    )


def fit_random_forest(
    data: TrainSet,
    params: ModelParams,
    seed: int = 0,
    allowed_features: Optional[Sequence[int]] = None,
    schema_version: str = "",
    masked_groups: Sequence[str] = (),
) -> Ensemble:
    _require_both_classes(data)
    rng = np.random.default_rng(seed)
    n = len(data.y)
    allowed = np.arange(data.n_features) if allowed_features is None else np.asarray(allowed_features, dtype=np.intp)
    max_features = params.features_per_split or max(1, math.ceil(math.sqrt(len(allowed))))
    members: List[Member] = []
    for _ in range(params.n_estimators):
        if params.bootstrap:
            rows = rng.integers(0, n, size=n)
            sample = TrainSet(data.X[rows], data.y[rows])
        else:
            sample = TrainSet(data.X, data.y)
        tree = fit_tree(sample, params.tree, allowed, max_features=max_features, rng=rng)
        members.append(Member(tree, 1.0))
    return Ensemble(
        kind="rf",
        members=members,
        learning_rate=float(params.learning_rate),
        n_features=data.n_features,
        schema_version=schema_version,
        masked_groups=tuple(masked_groups),
        params=params.to_dict(),
    )


def ensemble_scores(model: Ensemble, X: np.ndarray) -> np.ndarray:
    """COVID-19 score in [0, 1] for every row."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != model.n_features:
        raise SchemaMismatch(f"Rows have {X.shape[1]} features, model expects {model.n_features}")
    weights = model.weights
    if model.kind == "rf":
        probabilities = np.stack([m.tree.predict_proba(X) for m in model.members])
        return probabilities.mean(axis=0)
    votes = np.stack([m.tree.predict(X) for m in model.members]).astype(np.float64)
    total = weights.sum()
    if total <= 0:
        return votes.mean(axis=0)
    return np.clip(weights @ votes / total, 0.0, 1.0)


def ensemble_proba(model: Ensemble, x: Sequence[float]) -> float:
    row = np.asarray(x, dtype=np.float64)
    if row.ndim != 1:
        raise SchemaMismatch("ensemble_proba scores a single row")
    return float(ensemble_scores(model, row[None, :])[0])


def classify(model: Ensemble, X: np.ndarray) -> np.ndarray:
    """1 (covid) where the score reaches the model's operating threshold."""
    return (ensemble_scores(model, X) >= model.threshold).astype(np.int64)


def _confusion_at(scores: np.ndarray, labels: np.ndarray, t: float) -> Tuple[int, int, int, int]:
    predicted = scores >= t
    tp = int(np.count_nonzero(predicted & (labels == 1)))
    fp = int(np.count_nonzero(predicted & (labels == 0)))
    tn = int(np.count_nonzero(~predicted & (labels == 0)))
    fn = int(np.count_nonzero(~predicted & (labels == 1)))
    return tp, fp, tn, fn


def threshold_candidates(scores: Sequence[float]) -> np.ndarray:
    distinct = np.unique(np.asarray(scores, dtype=np.float64))
    midpoints = (distinct[:-1] + distinct[1:]) / 2.0
    return np.unique(np.concatenate([[0.0, 1.0], midpoints]))


def choose_threshold(scores: Sequence[float], labels: Sequence[int]) -> float:
    """
    Operating point maximizing Youden's J = sensitivity + specificity - 1 over
    0, 1 and the midpoints between adjacent distinct scores; ties go to the
    smallest threshold.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    positives = int(np.count_nonzero(labels == 1))
    negatives = int(np.count_nonzero(labels == 0))
    if positives == 0 or negatives == 0:
        raise SingleClassData("Choosing a threshold needs both classes")
    candidates = threshold_candidates(scores)
    youden = np.empty(len(candidates))
    for i, t in enumerate(candidates):
        tp, fp, tn, fn = _confusion_at(scores, labels, t)
        youden[i] = tp / positives + tn / negatives - 1.0
    best = youden.max()
    return float(candidates[np.flatnonzero(youden >= best - _TIE_TOLERANCE)[0]])


def train_model(
    X: np.ndarray,
    y: np.ndarray,
    params: ModelParams,
    seed: int,
    schema: FeatureSchema,
    masked_groups: Sequence[str] = (),
) -> Ensemble:
    """Fit the configured ensemble and set its threshold from the training scores."""
    allowed = schema.active_indices(masked_groups)
    data = TrainSet(X, y)
    fit = fit_adaboost if params.model == "adaboost-dt" else fit_random_forest
    model = fit(data, params, seed, allowed, schema.version, masked_groups)
    model.threshold = choose_threshold(ensemble_scores(model, data.X), data.y)
    return model


def save_model(model: Ensemble, path: PathLike, provenance: Optional[dict] = None) -> None:
    payload = model.to_dict()
    payload["provenance"] = provenance or {}
    write_json(path, payload)


def load_model(path: PathLike, schema: Optional[FeatureSchema] = None) -> Ensemble:
    model = Ensemble.from_dict(read_json(path))
    if schema is not None:
        check_schema(model, schema)
    return model


def check_schema(model: Ensemble, schema: FeatureSchema) -> None:
    if model.schema_version != schema.version or model.n_features != len(schema):
        raise SchemaMismatch(
            f"Model was trained on schema {model.schema_version} ({model.n_features} features), "
            f"data uses schema {schema.version} ({len(schema)} features)"
        )
