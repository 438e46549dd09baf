"""
Cross-validation, metrics, grid search, group ablation, Gini importance and KDE.

Every fold/cell is an independent job; results are merged back in fold/cell index
order so the worker count never changes an output.
"""

import itertools
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import integrate, stats

from .constants import GROUP_ABLATION_LABELS, MODEL_LABELS
from .errors import ConfigError, EmptyInput, FoldLeakage, SingleClassData, TooFewPerClass
from .features import FeatureTable
from .learn import Ensemble, ModelParams, ensemble_scores, train_model
from .models import CLASS_LABELS, FeatureSchema
from .utils import PathLike, atomic_write_text, derive_seed, format_mean_std, run_ordered, write_json, write_meta_sidecar

logger = logging.getLogger(__name__)

METRIC_NAMES = ("sensitivity", "specificity", "precision", "f1", "accuracy", "auc")

TABLE_COLUMNS = [
    ("Sensitivity", "sensitivity"),
    ("Specificity", "specificity"),
    ("Precision", "precision"),
    ("F1", "f1"),
    ("Accuracy", "accuracy"),
    ("AUC", "auc"),
]

GRID_KEYS = ("n_estimators", "learning_rate", "max_depth", "min_samples_split")

_MIN_BANDWIDTH = 1e-3


def _label_codes(labels: Sequence) -> np.ndarray:
    """Accept 0/1 codes or class names; returns 1 for covid, 0 for other."""
    values = list(labels)
    if values and isinstance(values[0], str):
        return np.array([CLASS_LABELS.index(v) for v in values], dtype=np.int64)
    return np.asarray(values, dtype=np.int64)


def _check_both_classes(labels: np.ndarray, what: str) -> Tuple[int, int]:
    positives = int(np.count_nonzero(labels == 1))
    negatives = int(np.count_nonzero(labels == 0))
    if positives == 0 or negatives == 0:
        raise SingleClassData(f"{what} needs both covid and other cases")
    return positives, negatives


@dataclass(frozen=True)
class FoldSplit:
    k: int
    assignment: np.ndarray
    seed: int

    def test_indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == fold)

    def train_indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.assignment != fold)

    def folds(self) -> List[Tuple[np.ndarray, np.ndarray]]:
        return [(self.train_indices(f), self.test_indices(f)) for f in range(self.k)]

    def fold_sizes(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.k)


def stratified_kfold(labels: Sequence, k: int, seed: int) -> FoldSplit:
    """
    Shuffle each class with the seed and deal its members round-robin into k folds.
    One counter runs across classes so fold sizes also differ by at most one.
    """
    if k < 2:
        raise ConfigError(f"k must be >= 2, got {k}")
    codes = np.asarray(list(labels))
    if codes.size == 0:
        raise EmptyInput("Cannot split an empty set of cases")
    rng = np.random.default_rng(seed)
    assignment = np.full(len(codes), -1, dtype=np.int64)
    counter = 0
    for cls in np.unique(codes):
        members = np.flatnonzero(codes == cls)
        if len(members) < k:
            raise TooFewPerClass(f"Class {cls!r} has {len(members)} case(s), fewer than k={k}")
        for i in rng.permutation(members):
            assignment[i] = counter % k
            counter += 1
    return FoldSplit(k, assignment, int(seed))


def roc_auc(scores: Sequence[float], labels: Sequence) -> float:
    """Mann-Whitney AUC; tied (positive, negative) pairs count one half."""
    scores = np.asarray(scores, dtype=np.float64)
    y = _label_codes(labels)
    positives, negatives = _check_both_classes(y, "roc_auc")
    ranks = stats.rankdata(scores)
    rank_sum = ranks[y == 1].sum()
    return float((rank_sum - positives * (positives + 1) / 2.0) / (positives * negatives))


@dataclass(frozen=True)
class Metrics:
    tp: int
    fp: int
    tn: int
    fn: int
    sensitivity: float
    specificity: float
    precision: float
    f1: float
    accuracy: float
    auc: float
    precision_undefined: bool = False

    def to_dict(self) -> Dict[str, object]:
        return {
            "tp": self.tp,
            "fp": self.fp,
            "tn": self.tn,
            "fn": self.fn,
            **{name: getattr(self, name) for name in METRIC_NAMES},
            "precision_undefined": self.precision_undefined,
        }


def compute_metrics(scores: Sequence[float], labels: Sequence, threshold: float) -> Metrics:
    scores = np.asarray(scores, dtype=np.float64)
    y = _label_codes(labels)
    _check_both_classes(y, "compute_metrics")
    predicted = scores >= threshold
    tp = int(np.count_nonzero(predicted & (y == 1)))
    fp = int(np.count_nonzero(predicted & (y == 0)))
    tn = int(np.count_nonzero(~predicted & (y == 0)))
    fn = int(np.count_nonzero(~predicted & (y == 1)))

    sensitivity = tp / (tp + fn)
    specificity = tn / (tn + fp)
    precision_undefined = tp + fp == 0
    precision = 0.0 if precision_undefined else tp / (tp + fp)
    f1 = 0.0 if precision + sensitivity == 0 else 2 * precision * sensitivity / (precision + sensitivity)
    accuracy = (tp + tn) / (tp + fp + tn + fn)
    return Metrics(tp, fp, tn, fn, sensitivity, specificity, precision, f1, accuracy, roc_auc(scores, y), precision_undefined)


@dataclass
class EvalReport:
    folds: List[Metrics]
    thresholds: List[float]
    params: ModelParams
    k: int
    seed: int
    masked_groups: Tuple[str, ...] = ()
    models: List[Ensemble] = field(default_factory=list, repr=False, compare=False)

    def values(self, metric: str) -> np.ndarray:
        return np.array([getattr(m, metric) for m in self.folds], dtype=np.float64)

    def mean(self) -> Dict[str, float]:
        return {name: float(self.values(name).mean()) for name in METRIC_NAMES}

    def std(self) -> Dict[str, float]:
        """Sample standard deviation (n - 1) across folds."""
        if len(self.folds) < 2:
            return {name: 0.0 for name in METRIC_NAMES}
        return {name: float(self.values(name).std(ddof=1)) for name in METRIC_NAMES}

    def selection_score(self) -> float:
        mean = self.mean()
        return mean["auc"] + mean["sensitivity"]

    def table_row(self, label: str) -> Dict[str, str]:
        """Model label followed by a 'mean±std' cell per metric."""
        mean, std = self.mean(), self.std()
        row = {"Model": label}
        for heading, name in TABLE_COLUMNS:
            row[heading] = format_mean_std(mean[name], std[name])
        return row

    def to_dict(self) -> Dict[str, object]:
        return {
            "params": self.params.to_dict(),
            "k": self.k,
            "seed": self.seed,
            "masked_groups": list(self.masked_groups),
            "folds": [dict(m.to_dict(), fold=i, threshold=t) for i, (m, t) in enumerate(zip(self.folds, self.thresholds))],
            "mean": self.mean(),
            "std": self.std(),
            "row": self.table_row(MODEL_LABELS.get(self.params.model, self.params.model)),
        }

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for i, (m, t) in enumerate(zip(self.folds, self.thresholds)):
            rows.append({"fold": str(i), "threshold": t, "tp": m.tp, "fp": m.fp, "tn": m.tn, "fn": m.fn,
                         **{name: getattr(m, name) for name in METRIC_NAMES}})
        for tag, summary in (("mean", self.mean()), ("std", self.std())):
            rows.append({"fold": tag, **summary})
        return pd.DataFrame(rows, columns=["fold", "threshold", "tp", "fp", "tn", "fn", *METRIC_NAMES])


@dataclass
class _FoldResult:
    metrics: Metrics
    threshold: float
    model: Ensemble


def cross_validate(
    table: FeatureTable,
    params: ModelParams,
    k: int,
    seed: int,
    masked_groups: Sequence[str] = (),
    max_workers: Optional[int] = 1,
) -> EvalReport:
    """
    k-fold CV: per fold, fit on train, pick the operating threshold on TRAIN scores,
    and score the held-out fold with that threshold.
    """
    y = table.y
    split = stratified_kfold(y, k, seed)

    def run_fold(fold: int) -> _FoldResult:
        train, test = split.train_indices(fold), split.test_indices(fold)
        shared = np.intersect1d(train, test)
        if shared.size:
            raise FoldLeakage(f"Fold {fold}: {shared.size} case(s) are in both the train and test sides")
        model = train_model(table.X[train], y[train], params, derive_seed(seed, fold), table.schema, masked_groups)
        metrics = compute_metrics(ensemble_scores(model, table.X[test]), y[test], model.threshold)
        logger.debug("Fold %d: auc %.4f sensitivity %.4f threshold %.4f", fold, metrics.auc, metrics.sensitivity, model.threshold)
        return _FoldResult(metrics, model.threshold, model)

    results = run_ordered(run_fold, range(k), max_workers)
    return EvalReport(
        folds=[r.metrics for r in results],
        thresholds=[r.threshold for r in results],
        params=params,
        k=k,
        seed=int(seed),
        masked_groups=tuple(masked_groups),
        models=[r.model for r in results],
    )


@dataclass
class GridCell:
    index: int
    params: ModelParams
    report: EvalReport

    @property
    def score(self) -> float:
        return self.report.selection_score()


@dataclass
class GridResult:
    cells: List[GridCell]

    def ranked(self) -> List[GridCell]:
        """Best first by mean AUC + mean sensitivity, then mean AUC, then grid order."""
        return sorted(self.cells, key=lambda c: (-round(c.score, 12), -round(c.report.mean()["auc"], 12), c.index))

    @property
    def best(self) -> GridCell:
        return self.ranked()[0]

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for rank, cell in enumerate(self.ranked(), start=1):
            mean, std = cell.report.mean(), cell.report.std()
            row = {"rank": rank, **{key: getattr(cell.params, key) for key in GRID_KEYS}}
            row.update({f"mean_{name}": mean[name] for name in METRIC_NAMES})
            row["selection_score"] = cell.score
            row.update({heading: format_mean_std(mean[name], std[name]) for heading, name in TABLE_COLUMNS})
            rows.append(row)
        return pd.DataFrame(rows)

    def to_dict(self) -> Dict[str, object]:
        return {
            "best": self.best.params.to_dict(),
            "cells": [
                {"rank": rank, "selection_score": cell.score, "report": cell.report.to_dict()}
                for rank, cell in enumerate(self.ranked(), start=1)
            ],
        }


def expand_grid(grid: Dict[str, Sequence], base: ModelParams) -> List[ModelParams]:
    unknown = set(grid) - set(GRID_KEYS)
    if unknown:
        raise ConfigError(f"Unknown grid key(s) {sorted(unknown)}; expected {list(GRID_KEYS)}")
    axes = [list(grid.get(key, [getattr(base, key)])) for key in GRID_KEYS]
    if any(len(values) == 0 for values in axes):
        raise ConfigError("Every grid axis needs at least one value")
    return [replace(base, **dict(zip(GRID_KEYS, combo))) for combo in itertools.product(*axes)]


def grid_search(
    table: FeatureTable,
    grid: Dict[str, Sequence],
    k: int,
    seed: int,
    base: Optional[ModelParams] = None,
    masked_groups: Sequence[str] = (),
    max_workers: Optional[int] = 1,
) -> GridResult:
    """Cross-validate every grid combination; cells run in parallel, folds inside a cell run in order."""
    candidates = expand_grid(grid, base or ModelParams())
    logger.info("Grid search over %d configuration(s)", len(candidates))

    def run_cell(index: int) -> GridCell:
        params = candidates[index]
        report = cross_validate(table, params, k, seed, masked_groups, max_workers=1)
        logger.debug("Cell %d %s: score %.4f", index, params, report.selection_score())
        return GridCell(index, params, report)

    return GridResult(run_ordered(run_cell, range(len(candidates)), max_workers))


def refine_grid(params: ModelParams, deltas: Dict[str, float]) -> Dict[str, List]:
    """
    Fine grid around a gross winner: for each key in `deltas`, the winner's value
    and value ± delta (dropping values outside the parameter's valid range).
    """
    lower = {"n_estimators": 1, "learning_rate": 0.0, "max_depth": 1, "min_samples_split": 2}
    grid: Dict[str, List] = {}
    for key in GRID_KEYS:
        value = getattr(params, key)
        if key not in deltas:
            grid[key] = [value]
            continue
        delta = deltas[key]
        neighbours = [value - delta, value, value + delta]
        if key == "learning_rate":
            values = sorted({round(float(v), 12) for v in neighbours if v > lower[key]})
        else:
            values = sorted({int(round(v)) for v in neighbours if v >= lower[key]})
        grid[key] = values
    unknown = set(deltas) - set(GRID_KEYS)
    if unknown:
        raise ConfigError(f"Unknown refinement key(s) {sorted(unknown)}")
    return grid


@dataclass
class AblationResult:
    full: EvalReport
    without: Dict[str, EvalReport]

    def rows(self) -> List[Dict[str, str]]:
        model_label = MODEL_LABELS.get(self.full.params.model, self.full.params.model)
        rows = [self.full.table_row(model_label)]
        for group, report in self.without.items():
            rows.append(report.table_row(GROUP_ABLATION_LABELS.get(group, f"W/O {group}")))
        return rows

    def auc_drop(self, group: str) -> float:
        return self.full.mean()["auc"] - self.without[group].mean()["auc"]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows(), columns=["Model"] + [heading for heading, _ in TABLE_COLUMNS])

    def to_dict(self) -> Dict[str, object]:
        return {
            "rows": self.rows(),
            "full": self.full.to_dict(),
            "without": {group: report.to_dict() for group, report in self.without.items()},
        }


def ablation(
    table: FeatureTable,
    k: int,
    seed: int,
    params: ModelParams,
    groups: Optional[Sequence[str]] = None,
    max_workers: Optional[int] = 1,
) -> AblationResult:
    """Cross-validate the full schema and the schema with each feature group removed in turn."""
    groups = list(groups or table.schema.groups)
    masks: List[Tuple[str, ...]] = [()] + [(g,) for g in groups]

    def run_mask(index: int) -> EvalReport:
        logger.info("Ablation run %d/%d: masked %s", index + 1, len(masks), list(masks[index]) or "nothing")
        return cross_validate(table, params, k, seed, masks[index], max_workers=1)

    reports = run_ordered(run_mask, range(len(masks)), max_workers)
    return AblationResult(reports[0], dict(zip(groups, reports[1:])))


@dataclass
class ImportanceReport:
    feature_ids: List[str]
    per_fold: np.ndarray
    no_split_folds: List[int] = field(default_factory=list)

    @property
    def mean(self) -> np.ndarray:
        return self.per_fold.mean(axis=0)

    def ranked(self) -> List[Tuple[str, float]]:
        """(feature, mean importance) in descending order; ties keep schema order."""
        mean = self.mean
        order = np.argsort(-mean, kind="mergesort")
        return [(self.feature_ids[i], float(mean[i])) for i in order]

    def top(self, n: int = 10) -> List[Tuple[str, float]]:
        return self.ranked()[:n]

    def to_frame(self, schema: Optional[FeatureSchema] = None) -> pd.DataFrame:
        rows = []
        for rank, (fid, value) in enumerate(self.ranked(), start=1):
            row = {"rank": rank, "feature_id": fid, "importance": value}
            if schema is not None:
                row["group"] = schema.features[schema.index(fid)].group
            rows.append(row)
        return pd.DataFrame(rows)

    def to_dict(self) -> Dict[str, object]:
        return {
            "ranked": [{"feature_id": fid, "importance": value} for fid, value in self.ranked()],
            "top10": [fid for fid, _ in self.top(10)],
            "no_split_folds": self.no_split_folds,
            "per_fold": self.per_fold,
        }


def model_importance(model: Ensemble) -> np.ndarray:
    """Member-weight-weighted mean of the tree ledgers, normalized to sum 1 (zeros if no split)."""
    weights = model.weights
    ledgers = np.stack([m.tree.importance for m in model.members])
    total_weight = weights.sum()
    combined = weights @ ledgers / total_weight if total_weight > 0 else ledgers.mean(axis=0)
    total = combined.sum()
    return combined / total if total > 0 else np.zeros_like(combined)


def gini_importance(models: Sequence[Ensemble], schema: FeatureSchema) -> ImportanceReport:
    """Mean decrease in impurity per feature, averaged over per-fold normalized vectors."""
    if not models:
        raise EmptyInput("gini_importance needs at least one model")
    vectors, no_split = [], []
    for i, model in enumerate(models):
        if model.n_features != len(schema):
            raise ConfigError(f"Model {i} has {model.n_features} features, schema has {len(schema)}")
        vector = model_importance(model)
        if not vector.any():
            logger.warning("Model %d has no splits; its importance vector is all zeros", i)
            no_split.append(i)
        vectors.append(vector)
    return ImportanceReport(schema.feature_ids, np.stack(vectors), no_split)


@dataclass
class KdeCurve:
    feature_id: str
    label: str
    x: np.ndarray
    density: np.ndarray
    bandwidth: float

    def integral(self) -> float:
        return float(integrate.trapezoid(self.density, self.x))

    def mode(self) -> float:
        return float(self.x[int(np.argmax(self.density))])

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"x": self.x, "density": self.density, "class": self.label, "feature_id": self.feature_id})


def silverman_bandwidth(values: np.ndarray) -> float:
    n = len(values)
    sigma = float(np.std(values, ddof=1)) if n > 1 else 0.0
    spread = float(stats.iqr(values)) / 1.34
    return max(0.9 * min(sigma, spread) * n ** (-0.2), _MIN_BANDWIDTH)


def kde(
    values: Sequence[float],
    grid_points: int = 201,
    bandwidth: Optional[float] = None,
    feature_id: str = "",
    label: str = "",
) -> KdeCurve:
    """
    Gaussian-kernel density on a uniform grid over [-4h, 1 + 4h] (widened if a value
    falls outside [0, 1]). The point count is raised until the step is at most h/2
    and kept odd so x = 0.5 lies on the grid.
    """
    v = np.asarray(values, dtype=np.float64).ravel()
    v = v[np.isfinite(v)]
    if v.size == 0:
        raise EmptyInput("kde needs at least one finite value")
    h = float(bandwidth) if bandwidth is not None else silverman_bandwidth(v)
    if not h > 0:
        raise ConfigError(f"bandwidth must be > 0, got {bandwidth}")

    lo = min(0.0, float(v.min())) - 4 * h
    hi = max(1.0, float(v.max())) + 4 * h
    n = max(int(grid_points), int(math.ceil((hi - lo) / (h / 2))) + 1)
    if n % 2 == 0:
        n += 1
    x = np.linspace(lo, hi, n)
    density = stats.norm.pdf((x[:, None] - v[None, :]) / h).sum(axis=1) / (v.size * h)
    return KdeCurve(feature_id, label, x, density, h)


def kde_curves(table: FeatureTable, feature_ids: Sequence[str], grid_points: int = 201) -> List[KdeCurve]:
    """One curve per (feature, class) after min-max normalization over both classes pooled."""
    unknown = [fid for fid in feature_ids if fid not in table.schema.feature_ids]
    if unknown:
        raise ConfigError(f"Unknown KDE feature {unknown[0]!r}")
    curves: List[KdeCurve] = []
    for fid in feature_ids:
        column = table.column(fid)
        lo, hi = float(column.min()), float(column.max())
        normalized = (column - lo) / (hi - lo) if hi > lo else np.zeros_like(column)
        for label in CLASS_LABELS:
            members = normalized[[lab == label for lab in table.labels]]
            if members.size == 0:
                logger.warning("No %s cases for feature %s; skipping its curve", label, fid)
                continue
            curves.append(kde(members, grid_points, feature_id=fid, label=label))
    return curves


def write_frame(frame: pd.DataFrame, path: PathLike, provenance: Optional[dict] = None) -> None:
    atomic_write_text(path, frame.to_csv(index=False, lineterminator="\n"))
    write_meta_sidecar(path, provenance)


def write_report(payload: Dict[str, object], frame: pd.DataFrame, json_path: PathLike, csv_path: PathLike,
                 provenance: Optional[dict] = None) -> None:
    """JSON document plus its flat CSV table, both carrying the provenance block."""
    write_json(json_path, dict(payload, provenance=provenance or {}))
    write_frame(frame, csv_path, provenance)


def write_kde_curves(curves: Sequence[KdeCurve], path: PathLike, provenance: Optional[dict] = None) -> None:
    if curves:
        frame = pd.concat([c.to_frame() for c in curves], ignore_index=True)
    else:
        frame = pd.DataFrame(columns=["x", "density", "class", "feature_id"])
    write_frame(frame, path, provenance)
