"""
End-to-end run: extract -> cross-validate -> grid search -> ablation -> importance + KDE.

Stages communicate through files in the output directory. A run that finds
`features.csv` (or a grid winner in `grid.json`) from an earlier run reuses it
when the settings recorded with it match the current ones.
Failures are re-raised as StageError tagged with the stage name.
"""

import logging
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence

from . import evaluation
from .config import RunConfig
from .constants import MODEL_LABELS
from .errors import ConfigError, StageError, TriageError
from .features import FeatureTable, extract_many, read_feature_table, write_feature_table
from .learn import ModelParams, save_model, train_model
from .utils import read_json, to_jsonable
from .volume_io import read_manifest_entries

logger = logging.getLogger(__name__)

FEATURES_FILE = "features.csv"
MODEL_FILE = "model.json"

# settings a cached output depends on; a mismatch forces the stage to run again
FEATURE_KEYS = ("manifest", "extract")
GRID_KEYS = FEATURE_KEYS + ("features", "grid", "refine", "folds", "seed", "mask_groups", "params")


@contextmanager
def stage(name: str) -> Iterator[None]:
    logger.info("Stage %s", name)
    try:
        yield
    except StageError:
        raise
    except TriageError as e:
        raise StageError(name, e) from e


@dataclass
class PipelineResult:
    out_dir: Path
    table: FeatureTable
    report: evaluation.EvalReport
    params: ModelParams
    grid: Optional[evaluation.GridResult] = None
    ablation: Optional[evaluation.AblationResult] = None
    importance: Optional[evaluation.ImportanceReport] = None
    files: List[Path] = field(default_factory=list)


def _output_dir(config: RunConfig) -> Path:
    if not config.out:
        raise ConfigError("An output directory (--out) is required")
    return Path(config.out)


def _stale_keys(recorded: dict, config: RunConfig, keys: Sequence[str]) -> List[str]:
    """
    Keys whose value recorded with a cached output differs from this run's.
    Keys this run leaves unset (None) are not compared.
    """
    current = to_jsonable(config.provenance())
    before = recorded.get("config", {})
    stale = [k for k in keys if current["config"].get(k) is not None and before.get(k) != current["config"][k]]
    if recorded.get("schema_version") != current["schema_version"]:
        stale.append("schema_version")
    return stale


def load_or_extract(config: RunConfig, out_dir: Path, files: List[Path]) -> FeatureTable:
    """Feature table from --features, from an earlier run with the same extraction settings, or extracted from --manifest."""
    if config.features:
        return read_feature_table(config.features)
    cached = out_dir / FEATURES_FILE
    if cached.exists():
        meta = cached.with_suffix(".meta.json")
        stale = _stale_keys(read_json(meta).get("provenance", {}), config, FEATURE_KEYS) if meta.exists() else ["provenance"]
        if not stale:
            logger.info("Reusing %s", cached)
            return read_feature_table(cached)
        logger.info("Not reusing %s: %s changed", cached, ", ".join(stale))
        if not config.manifest:
            raise ConfigError(f"{cached} was written with different settings ({', '.join(stale)}); pass --manifest to re-extract")
    if not config.manifest:
        raise ConfigError("Either --features or --manifest is required")
    entries = read_manifest_entries(config.manifest)
    vectors = extract_many(entries, config.extract, config.jobs)
    table = FeatureTable.from_vectors(vectors)
    write_feature_table(table, cached, config.provenance())
    files.append(cached)
    return table


def _cached_grid_winner(path: Path, config: RunConfig) -> Optional[ModelParams]:
    if not path.exists():
        return None
    payload = read_json(path)
    if "best" not in payload:
        return None
    stale = _stale_keys(payload.get("provenance", {}), config, GRID_KEYS)
    if stale:
        logger.info("Not reusing %s: %s changed", path, ", ".join(stale))
        return None
    return ModelParams.from_dict(payload["best"])


def run_grid(config: RunConfig, table: FeatureTable, out_dir: Path, files: List[Path]) -> evaluation.GridResult:
    provenance = config.provenance()
    result = evaluation.grid_search(
        table, config.grid, config.folds, config.seed, config.params, config.mask_groups, config.jobs
    )
    evaluation.write_report(result.to_dict(), result.to_frame(), out_dir / "grid.json", out_dir / "grid.csv", provenance)
    files += [out_dir / "grid.json", out_dir / "grid.csv"]
    if config.refine:
        fine_grid = evaluation.refine_grid(result.best.params, config.refine)
        logger.info("Refining around %s with %s", result.best.params, fine_grid)
        fine = evaluation.grid_search(
            table, fine_grid, config.folds, config.seed, result.best.params, config.mask_groups, config.jobs
        )
        evaluation.write_report(
            fine.to_dict(), fine.to_frame(), out_dir / "grid_fine.json", out_dir / "grid_fine.csv", provenance
        )
        files += [out_dir / "grid_fine.json", out_dir / "grid_fine.csv"]
        result = fine
    return result


def run_end_to_end(config: RunConfig) -> PipelineResult:
    """
    Run every stage with one resolved configuration.

    Returns:
        PipelineResult with the in-memory reports and the list of files written
    """
    out_dir = _output_dir(config)
    provenance = config.provenance()
    files: List[Path] = []

    with stage("extract"):
        table = load_or_extract(config, out_dir, files)
        logger.info("Feature table: %d cases x %d features", len(table), len(table.schema))

    params = config.params
    grid = None
    if config.with_grid:
        with stage("grid"):
            cached = _cached_grid_winner(out_dir / ("grid_fine.json" if config.refine else "grid.json"), config)
            if cached is not None:
                logger.info("Reusing grid winner %s", cached)
                params = cached
            else:
                grid = run_grid(config, table, out_dir, files)
                params = grid.best.params

    with stage("evaluate"):
        report = evaluation.cross_validate(table, params, config.folds, config.seed, config.mask_groups, config.jobs)
        evaluation.write_report(
            report.to_dict(), report.to_frame(), out_dir / "evaluation.json", out_dir / "evaluation.csv", provenance
        )
        files += [out_dir / "evaluation.json", out_dir / "evaluation.csv"]
        label = MODEL_LABELS.get(params.model, params.model)
        mean = report.mean()
        logger.info("%s: AUC %.3f, sensitivity %.3f", label, mean["auc"], mean["sensitivity"])

    with stage("train"):
        model = train_model(table.X, table.y, params, config.seed, table.schema, config.mask_groups)
        save_model(model, out_dir / MODEL_FILE, provenance)
        files.append(out_dir / MODEL_FILE)

    ablation_result = None
    if config.with_ablation:
        with stage("ablation"):
            ablation_result = evaluation.ablation(table, config.folds, config.seed, params, max_workers=config.jobs)
            evaluation.write_report(
                ablation_result.to_dict(),
                ablation_result.to_frame(),
                out_dir / "ablation.json",
                out_dir / "ablation.csv",
                provenance,
            )
            files += [out_dir / "ablation.json", out_dir / "ablation.csv"]

    with stage("importance"):
        importance = evaluation.gini_importance(report.models, table.schema)
        evaluation.write_report(
            importance.to_dict(),
            importance.to_frame(table.schema),
            out_dir / "importance.json",
            out_dir / "importance.csv",
            provenance,
        )
        files += [out_dir / "importance.json", out_dir / "importance.csv"]

    with stage("kde"):
        curves = evaluation.kde_curves(table, config.kde_features, config.kde_grid_points)
        evaluation.write_kde_curves(curves, out_dir / "kde.csv", provenance)
        files.append(out_dir / "kde.csv")

    logger.info("Wrote %d file(s) to %s", len(files), out_dir)
    return PipelineResult(out_dir, table, report, params, grid, ablation_result, importance, files)


def summary(result: PipelineResult) -> Dict[str, object]:
    """Short machine-readable digest of a run."""
    return {
        "cases": len(result.table),
        "params": result.params.to_dict(),
        "mean": result.report.mean(),
        "top_features": [fid for fid, _ in result.importance.top(10)] if result.importance else [],
        "files": sorted(p.name for p in result.files),
    }
