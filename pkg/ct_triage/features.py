"""
Clinical feature extraction from a validated case bundle.

Features fall into four groups: lungs statistics (structure volumes and HU
windows), opacity statistics (abnormal volume, pos_ratio, activation sums),
opacity texture (GGO/consolidation volumes and dominance) and shape & location
(focal GGO, laterality, peripheral ratio). Volumes are in cm^3, ratios in percent
of the enclosing structure, pos_ratio and dominance are fractions in [0, 1].
"""

import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
from scipy import ndimage

from .constants import (
    ANATOMICAL_STRUCTURES,
    FEATURE_SCHEMA,
    HU_WINDOWS,
    TEXTURE_CLASSES,
)
from .errors import (
    ConfigError,
    ExtractionRejected,
    MissingFile,
    NonFiniteFeature,
    SchemaMismatch,
)
from .models import CANONICAL_ORIENTATION, CLASS_LABELS, BinaryMask, CaseBundle, FeatureSchema
from . import morphology
from .utils import PathLike, atomic_write_text, read_json, run_ordered, write_meta_sidecar
from .volume_io import CaseEntry, load_case, reorient_case, validate_case

logger = logging.getLogger(__name__)

Partial = Dict[str, float]


@dataclass(frozen=True)
class ExtractConfig:
    shell_depth_mm: float = 15.0
    bronchial_margin_mm: float = 10.0
    roundedness_min: float = 0.5
    laterality_min_cm3: float = 1.0
    connectivity: int = 26
    hilar_radius_mm: float = 25.0
    focal_max_diameter_mm: float = 30.0

    def __post_init__(self):
        if self.connectivity not in (6, 26):
            raise ConfigError(f"connectivity must be 6 or 26, got {self.connectivity}")
        if self.shell_depth_mm <= 0:
            raise ConfigError(f"shell_depth_mm must be > 0, got {self.shell_depth_mm}")
        for name in ("bronchial_margin_mm", "laterality_min_cm3", "hilar_radius_mm", "focal_max_diameter_mm"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if not 0.0 <= self.roundedness_min <= 1.0:
            raise ConfigError(f"roundedness_min must lie in [0, 1], got {self.roundedness_min}")

    @classmethod
    def from_dict(cls, payload: Dict[str, object]) -> "ExtractConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(payload) - known
        if unknown:
            raise ConfigError(f"Unknown extraction config keys: {sorted(unknown)}")
        try:
            return cls(**payload)
        except TypeError as e:
            raise ConfigError(str(e)) from e

    @classmethod
    def from_json(cls, path: PathLike) -> "ExtractConfig":
        return cls.from_dict(read_json(path))

    def to_dict(self) -> Dict[str, object]:
        return asdict(self)


@dataclass(frozen=True)
class FeatureVector:
    schema: FeatureSchema
    values: np.ndarray
    case_id: str
    label: Optional[str] = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.shape != (len(self.schema),):
            raise SchemaMismatch(
                f"Feature vector has {values.size} values, schema {self.schema.version} expects {len(self.schema)}"
            )
        values = values.view()
        values.flags.writeable = False
        object.__setattr__(self, "values", values)

    def __getitem__(self, feature_id: str) -> float:
        return float(self.values[self.schema.index(feature_id)])

    def as_dict(self) -> Dict[str, float]:
        return dict(zip(self.schema.feature_ids, self.values.tolist()))


class CaseGeometry:
    """
    Structure and abnormality masks shared by the four feature groups. extract_features
    builds one per case; callers of the group functions may pass their own.
    """

    def __init__(self, bundle: CaseBundle):
        self.header = bundle.volume.header
        self.voxel_cm3 = self.header.voxel_volume_cm3
        lungs_labels = bundle.lungs.voxels
        lobes_labels = bundle.lobes.voxels
        self.lungs = lungs_labels > 0
        self.structures: Dict[str, np.ndarray] = {}
        for token, lung_values, lobe_values in ANATOMICAL_STRUCTURES:
            mask = np.isin(lungs_labels, lung_values)
            if lobe_values:
                mask &= np.isin(lobes_labels, lobe_values)
            self.structures[token] = mask
        self.structure_counts = {t: int(np.count_nonzero(m)) for t, m in self.structures.items()}
        self.abnormal = (bundle.abnormality.voxels > 0) & self.lungs
        self.abnormal_count = int(np.count_nonzero(self.abnormal))


def _geometry(bundle: CaseBundle, geometry: Optional[CaseGeometry]) -> CaseGeometry:
    return geometry if geometry is not None else CaseGeometry(bundle)


def _ratio(part: int, whole: int) -> float:
    return 100.0 * part / whole if whole else 0.0


def hu_window_mask(hu: np.ndarray, window: str) -> np.ndarray:
    lower, upper, lower_inclusive = HU_WINDOWS[window]
    above = hu >= lower if lower_inclusive else hu > lower
    return above & (hu <= upper)


def lung_statistics(bundle: CaseBundle, geometry: Optional[CaseGeometry] = None) -> Partial:
    geo = _geometry(bundle, geometry)
    hu = bundle.volume.voxels
    out: Partial = {}
    for token, count in geo.structure_counts.items():
        out[f"{token}_volume"] = count * geo.voxel_cm3
    for window in HU_WINDOWS:
        in_window = hu_window_mask(hu, window)
        for token, mask in geo.structures.items():
            k = int(np.count_nonzero(mask & in_window))
            out[f"{token}_{window}_hu_volume"] = k * geo.voxel_cm3
            out[f"{token}_{window}_hu_ratio"] = _ratio(k, geo.structure_counts[token])
    return out


def opacity_statistics(
    bundle: CaseBundle,
    cfg: Optional[ExtractConfig] = None,
    geometry: Optional[CaseGeometry] = None,
) -> Partial:
    cfg = cfg or ExtractConfig()
    geo = _geometry(bundle, geometry)
    out: Partial = {}
    for token, mask in geo.structures.items():
        k = int(np.count_nonzero(mask & geo.abnormal))
        out[f"{token}_opacity_volume"] = k * geo.voxel_cm3
        out[f"{token}_opacity_ratio"] = _ratio(k, geo.structure_counts[token])

    lung_slices = int(np.count_nonzero(geo.lungs.any(axis=(0, 1))))
    abnormal_slices = int(np.count_nonzero(geo.abnormal.any(axis=(0, 1))))
    out["pos_ratio"] = abnormal_slices / lung_slices if lung_slices else 0.0

    activation = bundle.activation.voxels.astype(np.float64)
    out["activation_sum"] = float(activation.sum())

    weighted = 0.0
    if geo.abnormal_count:
        components = morphology.connected_components(BinaryMask(geo.header, geo.abnormal), cfg.connectivity)
        ids = np.arange(1, components.count + 1)
        sums = ndimage.sum_labels(activation, components.labels, ids)
        for size, total in zip(components.sizes, sums):
            volume = size * geo.voxel_cm3
            weighted += volume * (total / size)
    out["activation_volume_weighted"] = float(weighted)
    return out


def texture_features(bundle: CaseBundle, geometry: Optional[CaseGeometry] = None) -> Partial:
    geo = _geometry(bundle, geometry)
    texture = bundle.texture.voxels
    out: Partial = {}
    class_counts: Dict[str, int] = {}
    for name, value in TEXTURE_CLASSES.items():
        class_mask = (texture == value) & geo.lungs
        class_counts[name] = int(np.count_nonzero(class_mask))
        for token, mask in geo.structures.items():
            label = "total" if token == "lungs" else token
            k = int(np.count_nonzero(mask & class_mask))
            out[f"{name}_{label}_volume"] = k * geo.voxel_cm3
            out[f"{name}_{label}_ratio"] = _ratio(k, geo.structure_counts[token])
    for name, count in class_counts.items():
        out[f"{name}_dominance"] = count / geo.abnormal_count if geo.abnormal_count else 0.0
    return out


def focal_ggo_present(bundle: CaseBundle, cfg: ExtractConfig, geometry: Optional[CaseGeometry] = None) -> bool:
    """True when some GGO component is both small (axial diameter) and rounded."""
    geo = _geometry(bundle, geometry)
    ggo = (bundle.texture.voxels == TEXTURE_CLASSES["GGO"]) & geo.lungs
    if not ggo.any():
        return False
    components = morphology.connected_components(BinaryMask(geo.header, ggo), cfg.connectivity)
    for component_id, voxels in components.all_voxels():
        diameter = morphology.max_axial_diameter(voxels, geo.header)
        if diameter >= cfg.focal_max_diameter_mm:
            continue
        score = morphology.roundedness(voxels, geo.header)
        if score >= cfg.roundedness_min:
            logger.debug(
                "Focal GGO component %d: diameter %.1f mm, roundedness %.2f", component_id, diameter, score
            )
            return True
    return False


def shape_location_features(
    bundle: CaseBundle,
    cfg: Optional[ExtractConfig] = None,
    geometry: Optional[CaseGeometry] = None,
) -> Partial:
    cfg = cfg or ExtractConfig()
    geo = _geometry(bundle, geometry)
    out: Partial = {"focal_GGO": 1.0 if focal_ggo_present(bundle, cfg, geo) else 0.0}

    left = np.count_nonzero(geo.abnormal & geo.structures["left_lung"]) * geo.voxel_cm3
    right = np.count_nonzero(geo.abnormal & geo.structures["right_lung"]) * geo.voxel_cm3
    left_positive = left > cfg.laterality_min_cm3
    right_positive = right > cfg.laterality_min_cm3
    both = left_positive and right_positive
    out["unilateral_left"] = 1.0 if left_positive and not both else 0.0
    out["unilateral_right"] = 1.0 if right_positive and not both else 0.0
    out["bilateral"] = 1.0 if both else 0.0

    peripheral = 0.0
    if geo.abnormal_count:
        bronchial = None
        if bundle.bronchial is not None:
            bronchial = BinaryMask.from_label_map(bundle.bronchial)
        shell = morphology.peripheral_shell(
            BinaryMask(geo.header, geo.lungs),
            cfg.shell_depth_mm,
            bronchial=bronchial,
            bronchial_margin_mm=cfg.bronchial_margin_mm,
            hilar_radius_mm=cfg.hilar_radius_mm,
        )
        peripheral = _ratio(int(np.count_nonzero(geo.abnormal & shell.bits)), geo.abnormal_count)
    out["peripheral_ratio"] = peripheral
    return out


def extract_features(
    bundle: CaseBundle,
    cfg: Optional[ExtractConfig] = None,
    schema: FeatureSchema = FEATURE_SCHEMA,
) -> FeatureVector:
    """Validate the bundle and concatenate the four feature groups in schema order."""
    cfg = cfg or ExtractConfig()
    if bundle.volume.header.orientation != CANONICAL_ORIENTATION:
        bundle = reorient_case(bundle, CANONICAL_ORIENTATION)
    report = validate_case(bundle)
    if not report.ok:
        raise ExtractionRejected(bundle.case_id, report)
    for note in report.notes:
        logger.warning("Case %s: %s (%d voxels)", bundle.case_id, note.kind, note.count)

    geo = CaseGeometry(bundle)
    for token, count in geo.structure_counts.items():
        if count == 0:
            logger.warning("Case %s: structure %s is empty; its features are set to 0", bundle.case_id, token)

    values: Partial = {}
    values.update(lung_statistics(bundle, geo))
    values.update(opacity_statistics(bundle, cfg, geo))
    values.update(texture_features(bundle, geo))
    values.update(shape_location_features(bundle, cfg, geo))

    missing = [fid for fid in schema.feature_ids if fid not in values]
    if missing:
        raise SchemaMismatch(f"Extraction produced no value for {missing[0]!r}")
    vector = np.array([values[fid] for fid in schema.feature_ids], dtype=np.float64)
    if not np.all(np.isfinite(vector)):
        bad = schema.feature_ids[int(np.flatnonzero(~np.isfinite(vector))[0])]
        raise NonFiniteFeature(f"Case {bundle.case_id}: feature {bad!r} is not finite")
    return FeatureVector(schema, vector, bundle.case_id, bundle.label)


def extract_many(
    cases: Sequence[Union[CaseBundle, CaseEntry]],
    cfg: Optional[ExtractConfig] = None,
    max_workers: Optional[int] = None,
) -> List[FeatureVector]:
    """
    Extract features for many cases in parallel.

    Args:
        cases: in-memory bundles or manifest entries (loaded inside the worker)
        cfg: extraction settings shared by all cases
        max_workers: maximum number of worker threads (default: auto-detect)

    Returns:
        Feature vectors in the order of `cases`
    """
    cfg = cfg or ExtractConfig()

    def extract_single(case):
        bundle = load_case(case) if isinstance(case, CaseEntry) else case
        return extract_features(bundle, cfg)

    return run_ordered(extract_single, cases, max_workers)


@dataclass
class FeatureTable:
    """Cases × features matrix with ids and optional labels, in schema column order."""

    schema: FeatureSchema
    case_ids: List[str]
    labels: List[str]
    X: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64).reshape(len(self.case_ids), len(self.schema))
        if len(self.labels) != len(self.case_ids):
            raise SchemaMismatch("labels and case_ids differ in length")

    def __len__(self) -> int:
        return len(self.case_ids)

    @classmethod
    def from_vectors(cls, vectors: Sequence[FeatureVector]) -> "FeatureTable":
        schema = vectors[0].schema if vectors else FEATURE_SCHEMA
        for v in vectors:
            if v.schema.version != schema.version:
                raise SchemaMismatch(f"Mixed schema versions {v.schema.version} and {schema.version}")
        X = np.vstack([v.values for v in vectors]) if vectors else np.zeros((0, len(schema)))
        return cls(schema, [v.case_id for v in vectors], [v.label or "" for v in vectors], X)

    @property
    def y(self) -> np.ndarray:
        """1 for covid, 0 for other; every case must be labelled."""
        unlabeled = [cid for cid, label in zip(self.case_ids, self.labels) if label not in CLASS_LABELS]
        if unlabeled:
            raise SchemaMismatch(f"Case {unlabeled[0]!r} has no class label")
        return np.array([CLASS_LABELS.index(label) for label in self.labels], dtype=np.int64)

    def subset(self, indices: Iterable[int]) -> "FeatureTable":
        idx = np.asarray(list(indices), dtype=np.intp)
        return FeatureTable(
            self.schema,
            [self.case_ids[i] for i in idx],
            [self.labels[i] for i in idx],
            self.X[idx],
        )

    def column(self, feature_id: str) -> np.ndarray:
        return self.X[:, self.schema.index(feature_id)]

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.X, columns=self.schema.feature_ids)
        frame.insert(0, "label", self.labels)
        frame.insert(0, "case_id", self.case_ids)
        return frame


def write_feature_table(table: FeatureTable, path: PathLike, provenance: Optional[dict] = None) -> None:
    atomic_write_text(path, table.to_frame().to_csv(index=False, lineterminator="\n"))
    meta = dict(provenance or {})
    meta.setdefault("schema_version", table.schema.version)
    write_meta_sidecar(path, meta)


def read_feature_table(path: PathLike, schema: FeatureSchema = FEATURE_SCHEMA) -> FeatureTable:
    path = Path(path)
    if not path.exists():
        raise MissingFile(f"Feature table not found: {path}")
    meta_path = path.with_suffix(".meta.json")
    if meta_path.exists():
        version = read_json(meta_path).get("provenance", {}).get("schema_version")
        if version is not None and str(version) != schema.version:
            raise SchemaMismatch(f"{path} was written with schema {version}, expected {schema.version}")

    frame = pd.read_csv(path, dtype={"case_id": str, "label": str}, keep_default_na=False)
    expected = ["case_id", "label"] + schema.feature_ids
    missing = [c for c in expected if c not in frame.columns]
    if missing:
        raise SchemaMismatch(f"{path} is missing column {missing[0]!r}")
    extra = [c for c in frame.columns if c not in expected]
    if extra:
        logger.warning("%s: ignoring unknown columns %s", path, extra)

    try:
        X = frame[schema.feature_ids].apply(pd.to_numeric, errors="raise").to_numpy(dtype=np.float64)
    except (ValueError, TypeError) as e:
        raise SchemaMismatch(f"{path} has a non-numeric feature value: {e}") from e
    if not np.all(np.isfinite(X)):
        row, col = np.argwhere(~np.isfinite(X))[0]
        raise NonFiniteFeature(f"{path}: case {frame['case_id'].iloc[row]!r} feature {schema.feature_ids[col]!r}")
    labels = [str(v).strip() for v in frame["label"].tolist()]
    bad = [v for v in labels if v not in CLASS_LABELS + ("",)]
    if bad:
        raise SchemaMismatch(f"{path} has unknown label {bad[0]!r}")
    return FeatureTable(schema, frame["case_id"].astype(str).tolist(), labels, X)
