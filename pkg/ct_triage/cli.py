"""
`triage` command line: one subcommand per pipeline stage.

Exit codes: 0 success, 1 data or configuration error, 2 usage error.
Diagnostics and progress go to standard error; standard output carries data only.
"""

import argparse
import logging
import sys
import time
from pathlib import Path
from typing import Callable, Dict, List, Optional

from . import evaluation, phantom
from .config import RunConfig, resolve_config
from .errors import ConfigError, TriageError
from .features import FeatureTable, extract_many, read_feature_table, write_feature_table
from .learn import MODEL_KINDS, save_model, train_model
from .pipeline import run_end_to_end, run_grid, summary
from .utils import dumps_json
from .volume_io import load_case, read_manifest_entries, validate_case

_FLAG_KEYS = (
    "manifest",
    "features",
    "out",
    "seed",
    "folds",
    "jobs",
    "model",
    "n_estimators",
    "learning_rate",
    "max_depth",
    "min_samples_split",
    "mask_group",
    "n",
    "mix",
    "refine",
    "kde_features",
    "with_grid",
    "with_ablation",
    "verbose",
)

_handler: Optional[logging.Handler] = None


def say(message: str) -> None:
    print(message, file=sys.stderr)


def configure_logging(verbose: bool) -> None:
    """Route the package's log records to the current standard error."""
    global _handler
    package_logger = logging.getLogger("ct_triage")
    if _handler is not None:
        package_logger.removeHandler(_handler)
    _handler = logging.StreamHandler(sys.stderr)
    _handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    package_logger.addHandler(_handler)
    package_logger.setLevel(logging.DEBUG if verbose else logging.INFO)


def parse_refine(values: Optional[List[str]]) -> Optional[Dict[str, float]]:
    """'key=delta' pairs from repeated --refine flags."""
    if not values:
        return None
    deltas = {}
    for item in values:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"--refine expects KEY=DELTA, got {item!r}")
        try:
            deltas[key.strip().replace("-", "_")] = float(raw)
        except ValueError as e:
            raise ConfigError(f"--refine delta for {key!r} is not a number: {raw!r}") from e
    return deltas


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--manifest", type=str, help="Case manifest or corpus manifest JSON")
    parser.add_argument("--features", type=str, help="Feature table CSV")
    parser.add_argument("--out", type=str, help="Output directory")
    parser.add_argument("--config", type=str, help="JSON config file (flags take precedence)")
    parser.add_argument("--seed", type=int, help="Random seed (default: 1234)")
    parser.add_argument("--folds", type=int, help="Cross-validation folds (default: 5)")
    parser.add_argument("--jobs", type=int, help="Worker threads for per-case, per-fold and per-cell work")
    parser.add_argument("--model", choices=MODEL_KINDS, help="Ensemble kind")
    parser.add_argument("--n-estimators", dest="n_estimators", type=int, help="Ensemble size")
    parser.add_argument("--learning-rate", dest="learning_rate", type=float, help="Boosting shrinkage")
    parser.add_argument("--max-depth", dest="max_depth", type=int, help="Maximum tree depth")
    parser.add_argument("--min-samples-split", dest="min_samples_split", type=int, help="Minimum cases per split")
    parser.add_argument(
        "--mask-group",
        dest="mask_group",
        action="append",
        help="Feature group to leave out (repeatable), e.g. --mask-group OpacityTexture",
    )
    parser.add_argument("--verbose", action="store_true", default=None, help="Debug logging")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="triage",
        description="Clinical CT features, boosted decision trees and their evaluation for COVID-19 triage.",
    )
    commands = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = commands.add_parser("phantom", help="Generate a synthetic corpus with ground truth")
    _add_common(p)
    p.add_argument("--n", type=int, help="Number of cases (default: 200)")
    p.add_argument("--mix", type=float, help="Fraction of covid-like cases (default: 0.58)")

    for name, text in (
        ("validate", "Check case bundles and print validation reports"),
        ("extract", "Extract the feature table from a manifest"),
        ("train", "Fit a model on a feature table"),
        ("evaluate", "Cross-validate a model on a feature table"),
        ("ablate", "Cross-validate with each feature group removed"),
        ("importance", "Mean Gini importance across folds"),
    ):
        _add_common(commands.add_parser(name, help=text))

    p = commands.add_parser("grid", help="Grid search over ensemble parameters")
    _add_common(p)
    p.add_argument("--refine", action="append", metavar="KEY=DELTA", help="Second, finer pass around the winner")

    p = commands.add_parser("kde", help="Per-class KDE curves of selected features")
    _add_common(p)
    p.add_argument("--kde-feature", dest="kde_features", action="append", help="Feature id (repeatable)")

    p = commands.add_parser("pipeline", help="Run every stage end to end")
    _add_common(p)
    p.add_argument("--grid", dest="with_grid", action="store_true", default=None, help="Include the grid search")
    p.add_argument("--refine", action="append", metavar="KEY=DELTA", help="Refinement pass for the grid search")
    p.add_argument("--ablation", dest="with_ablation", action="store_true", default=None, help="Include the ablation")
    return parser


def flags_from(args: argparse.Namespace) -> Dict[str, object]:
    flags = {key: getattr(args, key, None) for key in _FLAG_KEYS}
    flags["refine"] = parse_refine(flags["refine"])
    return {k: v for k, v in flags.items() if v is not None}


def _out_dir(config: RunConfig) -> Path:
    if not config.out:
        raise ConfigError("An output directory (--out) is required")
    return Path(config.out)


def _table(config: RunConfig) -> FeatureTable:
    if not config.features:
        raise ConfigError("A feature table (--features) is required")
    table = read_feature_table(config.features)
    say(f"📁 Loaded {len(table)} case(s) from {config.features}")
    return table


def cmd_phantom(config: RunConfig, args) -> int:
    out = _out_dir(config)
    say(f"⚙️  Generating {config.n} phantom case(s), mix={config.mix}, seed={config.seed}")
    corpus = phantom.generate_corpus(config.n, config.mix, config.seed, cfg=config.extract, max_workers=config.jobs)
    manifest = phantom.write_corpus(corpus, out, config.provenance())
    say(f"✓ Wrote {len(corpus.bundles)} case(s) and ground truth; manifest {manifest}")
    return 0


def cmd_validate(config: RunConfig, args) -> int:
    if not config.manifest:
        raise ConfigError("A manifest (--manifest) is required")
    reports = [validate_case(load_case(entry)) for entry in read_manifest_entries(config.manifest)]
    sys.stdout.write(dumps_json({"reports": [r.to_dict() for r in reports]}))
    bad = [r.case_id for r in reports if not r.ok]
    if bad:
        say(f"✗ {len(bad)} of {len(reports)} case(s) have violations: {', '.join(bad)}")
        return 1
    say(f"✓ {len(reports)} case(s) valid")
    return 0


def cmd_extract(config: RunConfig, args) -> int:
    if not config.manifest:
        raise ConfigError("A manifest (--manifest) is required")
    entries = read_manifest_entries(config.manifest)
    out = _out_dir(config)
    say(f"📁 Extracting features for {len(entries)} case(s)")
    table = FeatureTable.from_vectors(extract_many(entries, config.extract, config.jobs))
    write_feature_table(table, out / "features.csv", config.provenance())
    say(f"✓ Saved {out / 'features.csv'}")
    return 0


def cmd_train(config: RunConfig, args) -> int:
    table = _table(config)
    out = _out_dir(config)
    model = train_model(table.X, table.y, config.params, config.seed, table.schema, config.mask_groups)
    save_model(model, out / "model.json", config.provenance())
    say(f"✓ Saved {out / 'model.json'} ({len(model.members)} member(s), threshold {model.threshold:.3f})")
    return 0


def cmd_evaluate(config: RunConfig, args) -> int:
    table = _table(config)
    out = _out_dir(config)
    report = evaluation.cross_validate(table, config.params, config.folds, config.seed, config.mask_groups, config.jobs)
    evaluation.write_report(
        report.to_dict(), report.to_frame(), out / "evaluation.json", out / "evaluation.csv", config.provenance()
    )
    row = report.to_dict()["row"]
    say("📊 " + "  ".join(f"{k}: {v}" for k, v in row.items()))
    return 0


def cmd_grid(config: RunConfig, args) -> int:
    table = _table(config)
    out = _out_dir(config)
    result = run_grid(config, table, out, [])
    say(f"✓ Best configuration: {result.best.params.to_dict()} (score {result.best.score:.3f})")
    return 0


def cmd_ablate(config: RunConfig, args) -> int:
    table = _table(config)
    out = _out_dir(config)
    result = evaluation.ablation(table, config.folds, config.seed, config.params, max_workers=config.jobs)
    evaluation.write_report(result.to_dict(), result.to_frame(), out / "ablation.json", out / "ablation.csv", config.provenance())
    for row in result.rows():
        say(f"📊 {row['Model']}: AUC {row['AUC']}, sensitivity {row['Sensitivity']}")
    return 0


def cmd_importance(config: RunConfig, args) -> int:
    table = _table(config)
    out = _out_dir(config)
    report = evaluation.cross_validate(table, config.params, config.folds, config.seed, config.mask_groups, config.jobs)
    importance = evaluation.gini_importance(report.models, table.schema)
    evaluation.write_report(
        importance.to_dict(), importance.to_frame(table.schema), out / "importance.json", out / "importance.csv",
        config.provenance(),
    )
    for rank, (fid, value) in enumerate(importance.top(10), start=1):
        say(f"  {rank:2d}. {fid}: {value:.4f}")
    return 0


def cmd_kde(config: RunConfig, args) -> int:
    table = _table(config)
    out = _out_dir(config)
    curves = evaluation.kde_curves(table, config.kde_features, config.kde_grid_points)
    evaluation.write_kde_curves(curves, out / "kde.csv", config.provenance())
    say(f"✓ Saved {len(curves)} curve(s) to {out / 'kde.csv'}")
    return 0


def cmd_pipeline(config: RunConfig, args) -> int:
    result = run_end_to_end(config)
    sys.stdout.write(dumps_json(summary(result)))
    say(f"🎉 Pipeline complete: {len(result.files)} file(s) in {result.out_dir}")
    return 0


COMMANDS: Dict[str, Callable[[RunConfig, argparse.Namespace], int]] = {
    "phantom": cmd_phantom,
    "validate": cmd_validate,
    "extract": cmd_extract,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "grid": cmd_grid,
    "ablate": cmd_ablate,
    "importance": cmd_importance,
    "kde": cmd_kde,
    "pipeline": cmd_pipeline,
}


def dispatch(argv: Optional[List[str]] = None) -> int:
    """Parse `argv`, run the subcommand and return its exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code in (0, None) else 2
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2

    configure_logging(bool(args.verbose))
    start = time.time()
    try:
        config = resolve_config(flags_from(args), args.config)
        code = COMMANDS[args.command](config, args)
    except TriageError as e:
        say(f"✗ {type(e).__name__}: {e}")
        return 1
    say(f"⏱️  {args.command} finished in {time.time() - start:.2f} seconds")
    return code


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
