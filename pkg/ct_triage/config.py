"""
Run configuration: defaults < environment (TRIAGE_*) < JSON config file < flags.

The merged RunConfig is resolved once, before any stage runs, and its
provenance block is written into every output file.
"""

import logging
import os
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any, Callable, Dict, Mapping, Optional, Tuple

from .constants import DEFAULT_FOLDS, DEFAULT_KDE_FEATURES, DEFAULT_SEED, SCHEMA_VERSION, resolve_group
from .errors import ConfigError
from .features import ExtractConfig
from .learn import ModelParams
from .utils import PathLike, get_version, read_json

logger = logging.getLogger(__name__)

ENV_PREFIX = "TRIAGE_"

DEFAULT_GRID: Dict[str, list] = {
    "n_estimators": [25, 50, 100],
    "learning_rate": [0.5, 1.0],
    "max_depth": [1, 2],
    "min_samples_split": [2],
}

_MODEL_KEYS = {f.name for f in fields(ModelParams)}

# env name suffix -> (config key, parser)
_ENV_KEYS: Dict[str, Tuple[str, Callable[[str], Any]]] = {
    "SEED": ("seed", int),
    "FOLDS": ("folds", int),
    "JOBS": ("jobs", int),
    "MODEL": ("model", str),
    "N_ESTIMATORS": ("n_estimators", int),
    "LEARNING_RATE": ("learning_rate", float),
    "MAX_DEPTH": ("max_depth", int),
    "MIN_SAMPLES_SPLIT": ("min_samples_split", int),
    "OUT": ("out", str),
}

# settings that change how a run executes but never what it writes
_EXECUTION_KEYS = ("jobs", "verbose")


@dataclass(frozen=True)
class RunConfig:
    seed: int = DEFAULT_SEED
    folds: int = DEFAULT_FOLDS
    jobs: int = 1
    out: Optional[str] = None
    manifest: Optional[str] = None
    features: Optional[str] = None
    mask_groups: Tuple[str, ...] = ()
    params: ModelParams = field(default_factory=ModelParams)
    extract: ExtractConfig = field(default_factory=ExtractConfig)
    grid: Dict[str, list] = field(default_factory=lambda: {k: list(v) for k, v in DEFAULT_GRID.items()})
    refine: Dict[str, float] = field(default_factory=dict)
    kde_features: Tuple[str, ...] = tuple(DEFAULT_KDE_FEATURES)
    kde_grid_points: int = 201
    n: int = 200
    mix: float = 0.58
    with_grid: bool = False
    with_ablation: bool = False
    verbose: bool = False

    def __post_init__(self):
        if self.folds < 2:
            raise ConfigError(f"folds must be >= 2, got {self.folds}")
        if self.jobs < 1:
            raise ConfigError(f"jobs must be >= 1, got {self.jobs}")
        if self.seed < 0:
            raise ConfigError(f"seed must be a nonnegative integer, got {self.seed}")
        if self.kde_grid_points < 3:
            raise ConfigError(f"kde_grid_points must be >= 3, got {self.kde_grid_points}")
        try:
            groups = tuple(dict.fromkeys(resolve_group(g) for g in self.mask_groups))
        except KeyError as e:
            raise ConfigError(str(e.args[0])) from e
        object.__setattr__(self, "mask_groups", groups)

    def to_dict(self) -> Dict[str, Any]:
        payload = asdict(self)
        payload["params"] = self.params.to_dict()
        payload["extract"] = self.extract.to_dict()
        return payload

    def provenance(self) -> Dict[str, Any]:
        """Resolved settings plus schema and package versions, minus execution-only knobs."""
        config = self.to_dict()
        for key in _EXECUTION_KEYS:
            config.pop(key, None)
        return {"config": config, "schema_version": SCHEMA_VERSION, "package_version": get_version()}


def env_overrides(environ: Optional[Mapping[str, str]] = None) -> Dict[str, Any]:
    environ = os.environ if environ is None else environ
    values: Dict[str, Any] = {}
    for suffix, (key, parse) in _ENV_KEYS.items():
        raw = environ.get(ENV_PREFIX + suffix)
        if raw is None or raw == "":
            continue
        try:
            values[key] = parse(raw)
        except ValueError as e:
            raise ConfigError(f"{ENV_PREFIX}{suffix}={raw!r} is not a valid {parse.__name__}") from e
    return values


def file_overrides(path: Optional[PathLike]) -> Dict[str, Any]:
    if path is None:
        return {}
    payload = read_json(path)
    if not isinstance(payload, dict):
        raise ConfigError(f"Config file {path} must hold a JSON object")
    return dict(payload)


def _merge(layers) -> Dict[str, Any]:
    merged: Dict[str, Any] = {}
    for layer in layers:
        for key, value in layer.items():
            if value is None:
                continue
            if key in ("extract", "grid", "refine") and isinstance(value, dict):
                merged[key] = {**merged.get(key, {}), **value}
            else:
                merged[key] = value
    return merged


def resolve_config(
    flags: Optional[Dict[str, Any]] = None,
    config_path: Optional[PathLike] = None,
    environ: Optional[Mapping[str, str]] = None,
) -> RunConfig:
    """
    Merge every configuration layer into one RunConfig.

    Args:
        flags: command-line values; None entries mean "not given"
        config_path: optional JSON config file
        environ: environment mapping (default: os.environ)

    Returns:
        Fully resolved RunConfig
    """
    merged = _merge([env_overrides(environ), file_overrides(config_path), flags or {}])
    if "mask_group" in merged:
        merged["mask_groups"] = merged.pop("mask_group")

    run_keys = {f.name for f in fields(RunConfig)} - {"params", "extract"}
    model_values = {k: merged.pop(k) for k in list(merged) if k in _MODEL_KEYS}
    extract_values = merged.pop("extract", {})
    unknown = set(merged) - run_keys
    if unknown:
        raise ConfigError(f"Unknown configuration key(s): {sorted(unknown)}")

    try:
        params = ModelParams.from_dict(model_values)
        extract = ExtractConfig.from_dict(extract_values)
        for key in ("mask_groups", "kde_features"):
            if key in merged:
                merged[key] = tuple(merged[key])
        config = RunConfig(params=params, extract=extract, **merged)
    except TypeError as e:
        raise ConfigError(str(e)) from e
    logger.debug("Resolved configuration: %s", config.to_dict())
    return config


def with_params(config: RunConfig, params: ModelParams) -> RunConfig:
    return replace(config, params=params)
