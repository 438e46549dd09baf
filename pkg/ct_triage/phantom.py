"""
Synthetic case bundles with known feature values.

A phantom is two ellipsoidal lungs split into lobes, plus ellipsoidal lesions of
a given texture rasterized inside one lung. covid-like cases carry several small
peripheral GGO spheres spread over both lungs; other-like cases carry one
central consolidation in a single lung. The ground-truth sheet is computed by
direct per-voxel counting on the generated grids and does not go through the
feature or morphology modules.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree
from scipy.spatial.distance import pdist

from .constants import ANATOMICAL_STRUCTURES, DEFAULT_SEED, FEATURE_SCHEMA, HU_WINDOWS, TEXTURE_CLASSES
from .errors import ConfigError, LesionOutsideLungs
from .features import ExtractConfig, FeatureTable, FeatureVector, write_feature_table
from .models import ActivationMap, CaseBundle, FeatureSchema, LabelMap, Volume
from .utils import PathLike, derive_seed, run_ordered, write_json
from .volume_io import case_manifest, save_case

logger = logging.getLogger(__name__)

PHANTOM_KINDS = ("covid_like", "other_like")
KIND_LABELS = {"covid_like": "covid", "other_like": "other"}
LUNG_VALUES = {"left": 1, "right": 2}

DEFAULT_DIMS = (64, 48, 40)
DEFAULT_SPACING_MM = (2.0, 2.0, 2.0)

AIR_TISSUE_HU = 40
LUNG_HU = -860
HU_LIMITS = (-1024, 3071)

# distance kept between a peripheral lesion and the pleura along its direction
_PERIPHERAL_MARGIN_MM = 1.0
_DISTANCE_EPS = 1e-9

# features whose ground truth is a morphology-derived quantity, with their tolerance
MORPHOLOGY_TOLERANCES = {"peripheral_ratio": 2.0}
# float sums whose summation order differs between extraction and the oracle
SUMMED_FEATURES = ("activation_sum", "activation_volume_weighted")


@dataclass(frozen=True)
class LungSpec:
    side: str
    center_mm: Tuple[float, float, float]
    radii_mm: Tuple[float, float, float]

    def contains(self, point_mm: Sequence[float]) -> bool:
        offset = (np.asarray(point_mm) - np.asarray(self.center_mm)) / np.asarray(self.radii_mm)
        return float((offset**2).sum()) <= 1.0

    def surface_distance(self, direction: Sequence[float]) -> float:
        """Distance from the centre to the surface along a unit direction."""
        d = np.asarray(direction, dtype=np.float64)
        return float(1.0 / np.sqrt(((d / np.asarray(self.radii_mm)) ** 2).sum()))


@dataclass(frozen=True)
class LesionSpec:
    texture: str
    lung: str
    center_mm: Tuple[float, float, float]
    radii_mm: Tuple[float, float, float]
    hu: int
    activation: float = 0.8
    peripheral: bool = False

    def __post_init__(self):
        if self.texture not in TEXTURE_CLASSES:
            raise ConfigError(f"texture must be one of {list(TEXTURE_CLASSES)}, got {self.texture!r}")
        if self.lung not in LUNG_VALUES:
            raise ConfigError(f"lung must be 'left' or 'right', got {self.lung!r}")
        if any(r <= 0 for r in self.radii_mm):
            raise ConfigError(f"Lesion radii must be > 0, got {self.radii_mm}")
        if self.activation < 0:
            raise ConfigError(f"activation must be >= 0, got {self.activation}")

    @property
    def analytic_volume_cm3(self) -> float:
        a, b, c = self.radii_mm
        return 4.0 / 3.0 * math.pi * a * b * c / 1000.0


@dataclass(frozen=True)
class PhantomSpec:
    kind: str
    lungs: Tuple[LungSpec, LungSpec]
    lesions: Tuple[LesionSpec, ...]
    seed: int
    case_id: str = "phantom"
    dims: Tuple[int, int, int] = DEFAULT_DIMS
    spacing_mm: Tuple[float, float, float] = DEFAULT_SPACING_MM
    noise_hu: float = 20.0

    def __post_init__(self):
        if self.kind not in PHANTOM_KINDS:
            raise ConfigError(f"kind must be one of {PHANTOM_KINDS}, got {self.kind!r}")
        if self.noise_hu < 0:
            raise ConfigError(f"noise_hu must be >= 0, got {self.noise_hu}")

    @property
    def label(self) -> str:
        return KIND_LABELS[self.kind]

    def lung(self, side: str) -> LungSpec:
        return next(lung for lung in self.lungs if lung.side == side)


@dataclass(frozen=True)
class PhantomRanges:
    """Jitter ranges used when drawing random specs for a corpus."""

    ggo_count: Tuple[int, int] = (4, 6)
    ggo_radius_mm: Tuple[float, float] = (5.5, 7.0)
    ggo_hu: Tuple[int, int] = (-800, -500)
    consolidation_radii_mm: Tuple[Tuple[float, float], ...] = ((6.0, 8.0), (8.0, 10.0), (8.0, 10.0))
    consolidation_hu: Tuple[int, int] = (-100, 0)
    central_offset_mm: float = 4.0
    activation: Tuple[float, float] = (0.3, 1.0)
    lung_radius_jitter_mm: float = 2.0
    noise_hu: Tuple[float, float] = (10.0, 30.0)


@dataclass
class GroundTruth:
    case_id: str
    label: str
    values: Dict[str, float]
    tolerances: Dict[str, float]
    # voxel volume of each lesion after clipping to its lung
    lesion_volumes_cm3: List[float] = field(default_factory=list)
    analytic_volumes_cm3: List[float] = field(default_factory=list)

    def vector(self, schema: FeatureSchema = FEATURE_SCHEMA) -> FeatureVector:
        return FeatureVector(schema, [self.values[fid] for fid in schema.feature_ids], self.case_id, self.label)

    def mismatches(self, vector: FeatureVector) -> List[Tuple[str, float, float, float]]:
        """(feature, expected, actual, tolerance) for every feature outside its tolerance."""
        out = []
        for fid, expected in self.values.items():
            actual = vector[fid]
            tolerance = self.tolerances.get(fid, 0.0)
            if abs(actual - expected) > tolerance:
                out.append((fid, expected, actual, tolerance))
        return out


def _default_lungs() -> Tuple[LungSpec, LungSpec]:
    return (
        LungSpec("left", (32.0, 48.0, 40.0), (26.0, 40.0, 34.0)),
        LungSpec("right", (96.0, 48.0, 40.0), (26.0, 40.0, 34.0)),
    )


def _lateral_sign(side: str) -> float:
    return -1.0 if side == "left" else 1.0


def peripheral_center(lung: LungSpec, direction: Sequence[float], radius_mm: float) -> Tuple[float, float, float]:
    """Centre of a sphere touching (minus a margin) the pleura of `lung` along `direction`."""
    d = np.asarray(direction, dtype=np.float64)
    d = d / np.linalg.norm(d)
    reach = lung.surface_distance(d) - radius_mm - _PERIPHERAL_MARGIN_MM
    return tuple(float(c) for c in np.asarray(lung.center_mm) + d * reach)


def default_spec(kind: str, seed: int = DEFAULT_SEED, case_id: Optional[str] = None) -> PhantomSpec:
    """
    The reference phantoms: covid_like has 4 peripheral GGO spheres (2 per lung);
    other_like has one central consolidation ellipsoid in the right lung.
    """
    lungs = _default_lungs()
    by_side = {lung.side: lung for lung in lungs}
    if kind == "covid_like":
        lesions = []
        for side in ("left", "right"):
            for dy, dz in ((-0.35, -0.3), (0.35, 0.3)):
                direction = (_lateral_sign(side), dy, dz)
                centre = peripheral_center(by_side[side], direction, 6.0)
                lesions.append(LesionSpec("GGO", side, centre, (6.0, 6.0, 6.0), -650, 0.8, peripheral=True))
    elif kind == "other_like":
        right = by_side["right"]
        lesions = [LesionSpec("consolidation", "right", right.center_mm, (7.0, 9.0, 9.0), -50, 0.9)]
    else:
        raise ConfigError(f"kind must be one of {PHANTOM_KINDS}, got {kind!r}")
    return PhantomSpec(kind, lungs, tuple(lesions), int(seed), case_id or f"{kind}_{seed}")


def random_spec(kind: str, seed: int, ranges: Optional[PhantomRanges] = None, case_id: Optional[str] = None) -> PhantomSpec:
    """Draw a phantom of the given kind with lesion counts, sizes and positions jittered."""
    ranges = ranges or PhantomRanges()
    rng = np.random.default_rng(seed)
    jitter = ranges.lung_radius_jitter_mm
    lungs = tuple(
        replace(lung, radii_mm=tuple(float(r + rng.uniform(-jitter, jitter)) for r in lung.radii_mm))
        for lung in _default_lungs()
    )
    by_side = {lung.side: lung for lung in lungs}
    lesions: List[LesionSpec] = []

    if kind == "covid_like":
        count = int(rng.integers(ranges.ggo_count[0], ranges.ggo_count[1] + 1))
        first = "left" if rng.random() < 0.5 else "right"
        order = [first, "right" if first == "left" else "left"]
        slots = (-0.45, 0.45, 0.0)
        for i in range(count):
            side = order[i % 2]
            slot = slots[(i // 2) % len(slots)]
            direction = (_lateral_sign(side), slot + rng.uniform(-0.1, 0.1), rng.uniform(-0.4, 0.4))
            radius = float(rng.uniform(*ranges.ggo_radius_mm))
            lesions.append(
                LesionSpec(
                    "GGO",
                    side,
                    peripheral_center(by_side[side], direction, radius),
                    (radius, radius, radius),
                    int(rng.integers(ranges.ggo_hu[0], ranges.ggo_hu[1] + 1)),
                    float(rng.uniform(*ranges.activation)),
                    peripheral=True,
                )
            )
    elif kind == "other_like":
        side = "left" if rng.random() < 0.5 else "right"
        lung = by_side[side]
        offset = rng.uniform(-ranges.central_offset_mm, ranges.central_offset_mm, size=3)
        radii = tuple(float(rng.uniform(lo, hi)) for lo, hi in ranges.consolidation_radii_mm)
        lesions.append(
            LesionSpec(
                "consolidation",
                side,
                tuple(float(c) for c in np.asarray(lung.center_mm) + offset),
                radii,
                int(rng.integers(ranges.consolidation_hu[0], ranges.consolidation_hu[1] + 1)),
                float(rng.uniform(*ranges.activation)),
            )
        )
    else:
        raise ConfigError(f"kind must be one of {PHANTOM_KINDS}, got {kind!r}")

    noise = float(rng.uniform(*ranges.noise_hu))
    return PhantomSpec(kind, lungs, tuple(lesions), int(seed), case_id or f"{kind}_{seed}", noise_hu=noise)


def _axes_mm(dims, spacing):
    return [np.arange(n, dtype=np.float64) * s for n, s in zip(dims, spacing)]


def _ellipsoid(dims, spacing, center, radii) -> np.ndarray:
    x, y, z = _axes_mm(dims, spacing)
    return (
        ((x[:, None, None] - center[0]) / radii[0]) ** 2
        + ((y[None, :, None] - center[1]) / radii[1]) ** 2
        + ((z[None, None, :] - center[2]) / radii[2]) ** 2
    ) <= 1.0


def _lobe_labels(spec: PhantomSpec, lungs: np.ndarray) -> np.ndarray:
    """Left lung: lobes 1-2, right lung: lobes 3-5, split by slightly tilted axial planes."""
    _, y, z = _axes_mm(spec.dims, spec.spacing_mm)
    lobes = np.zeros(spec.dims, dtype=np.uint8)
    for lung in spec.lungs:
        cy, cz, rz = lung.center_mm[1], lung.center_mm[2], lung.radii_mm[2]
        height = z[None, None, :] - 0.15 * (y[None, :, None] - cy)
        inside = lungs == LUNG_VALUES[lung.side]
        if lung.side == "left":
            lobe = np.where(height < cz, 1, 2)
        else:
            lobe = np.where(height < cz - 0.3 * rz, 3, np.where(height < cz + 0.25 * rz, 4, 5))
        lobes[inside] = np.broadcast_to(lobe, spec.dims)[inside]
    return lobes


def rasterize(spec: PhantomSpec) -> CaseBundle:
    """Build the CaseBundle of a phantom spec (no ground truth)."""
    dims, spacing = spec.dims, spec.spacing_mm
    lungs = np.zeros(dims, dtype=np.uint8)
    for lung in spec.lungs:
        lungs[_ellipsoid(dims, spacing, lung.center_mm, lung.radii_mm)] = LUNG_VALUES[lung.side]

    rng = np.random.default_rng(spec.seed)
    hu = np.where(lungs > 0, LUNG_HU, AIR_TISSUE_HU).astype(np.float64)
    abnormality = np.zeros(dims, dtype=np.uint8)
    texture = np.zeros(dims, dtype=np.uint8)
    activation = np.zeros(dims, dtype=np.float32)

    for i, lesion in enumerate(spec.lesions):
        lung = spec.lung(lesion.lung)
        if not lung.contains(lesion.center_mm):
            raise LesionOutsideLungs(f"{spec.case_id}: lesion {i} centre {lesion.center_mm} is outside the {lesion.lung} lung")
        blob = _ellipsoid(dims, spacing, lesion.center_mm, lesion.radii_mm)
        region = blob & (lungs == LUNG_VALUES[lesion.lung])
        if not region.any():
            logger.warning("%s: lesion %d covers no voxel centre", spec.case_id, i)
        elif region.sum() < blob.sum():
            logger.debug("%s: lesion %d is clipped by the %s lung", spec.case_id, i, lesion.lung)
        hu[region] = lesion.hu
        abnormality[region] = 1
        texture[region] = TEXTURE_CLASSES[lesion.texture]
        activation[region] = lesion.activation

    if spec.noise_hu > 0:
        hu += rng.normal(0.0, spec.noise_hu, size=dims)
    hu = np.clip(np.rint(hu), *HU_LIMITS).astype(np.int16)

    return CaseBundle(
        case_id=spec.case_id,
        volume=Volume.from_array(hu, spacing),
        lungs=LabelMap.from_array(lungs, spacing, "lungs"),
        lobes=LabelMap.from_array(_lobe_labels(spec, lungs), spacing, "lobes"),
        abnormality=LabelMap.from_array(abnormality, spacing, "abnormality"),
        texture=LabelMap.from_array(texture, spacing, "texture"),
        activation=ActivationMap.from_array(activation, spacing),
        label=spec.label,
    )


def _shell_oracle(lungs: np.ndarray, spacing, depth_mm: float, hilar_radius_mm: float) -> np.ndarray:
    """
    Peripheral shell by nearest-neighbour search: a lung voxel is in the shell when a
    non-lung point (inside the grid or on the layer just outside it) lies within
    depth_mm. Only non-lung points face-adjacent to the lungs can be nearest.
    """
    padded = np.pad(lungs, 1, constant_values=False)
    touching = np.zeros_like(padded)
    for axis in range(3):
        for step in (-1, 1):
            touching |= np.roll(padded, step, axis=axis)
    border = np.argwhere(touching & ~padded) - 1
    inside = np.argwhere(lungs)
    scale = np.asarray(spacing, dtype=np.float64)
    distance, _ = cKDTree(border * scale).query(inside * scale)
    shell = np.zeros_like(lungs)
    near = inside[distance <= depth_mm + _DISTANCE_EPS]
    shell[tuple(near.T)] = True

    cx, cy = (inside[:, :2] * scale[:2]).mean(axis=0)
    x = np.arange(lungs.shape[0]) * scale[0] - cx
    y = np.arange(lungs.shape[1]) * scale[1] - cy
    cylinder = (x[:, None] ** 2 + y[None, :] ** 2) <= hilar_radius_mm**2 + _DISTANCE_EPS
    return shell & ~cylinder[:, :, None]


def _focal_oracle(ggo: np.ndarray, spacing, cfg: ExtractConfig) -> bool:
    """Brute force: every in-slice voxel pair for the diameter, covariance for roundedness."""
    connectivity = 1 if cfg.connectivity == 6 else 3
    labels, count = ndimage.label(ggo, structure=ndimage.generate_binary_structure(3, connectivity))
    scale = np.asarray(spacing, dtype=np.float64)
    for component in range(1, count + 1):
        voxels = np.argwhere(labels == component)
        diameter = 0.0
        for z in np.unique(voxels[:, 2]):
            in_slice = voxels[voxels[:, 2] == z][:, :2] * scale[:2]
            if len(in_slice) > 1:
                diameter = max(diameter, float(pdist(in_slice).max()))
        diameter += float(np.hypot(scale[0], scale[1]))
        if diameter >= cfg.focal_max_diameter_mm:
            continue
        points = voxels * scale
        cov = np.cov(points, rowvar=False, bias=True) if len(points) > 1 else np.zeros((3, 3))
        eigenvalues, eigenvectors = np.linalg.eigh(cov)
        axes = np.maximum(np.sqrt(5.0 * np.clip(eigenvalues, 0.0, None)), 0.5 * (np.abs(eigenvectors) * scale[:, None]).sum(axis=0))
        if axes.min() / axes.max() >= cfg.roundedness_min:
            return True
    return False


def ground_truth(bundle: CaseBundle, cfg: Optional[ExtractConfig] = None, lesions: Sequence[LesionSpec] = ()) -> GroundTruth:
    """Expected value of every schema feature, counted voxel by voxel on the bundle's grids."""
    cfg = cfg or ExtractConfig()
    header = bundle.header
    cm3 = header.voxel_volume_cm3
    hu = bundle.volume.voxels.astype(np.int64)
    lung_labels = bundle.lungs.voxels
    lobe_labels = bundle.lobes.voxels
    lungs = lung_labels > 0
    abnormal = lungs & (bundle.abnormality.voxels == 1)
    n_abnormal = int(abnormal.sum())
    values: Dict[str, float] = {}

    def pct(k, n):
        return 100.0 * k / n if n else 0.0

    def lesion_voxels(lesion: LesionSpec) -> int:
        blob = _ellipsoid(header.dims, header.spacing_mm, lesion.center_mm, lesion.radii_mm)
        return int((blob & (lung_labels == LUNG_VALUES[lesion.lung])).sum())

    for token, lung_values, lobe_values in ANATOMICAL_STRUCTURES:
        region = np.isin(lung_labels, lung_values)
        if lobe_values:
            region = region & np.isin(lobe_labels, lobe_values)
        n = int(region.sum())
        values[f"{token}_volume"] = n * cm3
        for window, (lower, upper, lower_inclusive) in HU_WINDOWS.items():
            low_ok = (hu >= lower) if lower_inclusive else (hu > lower)
            k = int((region & low_ok & (hu <= upper)).sum())
            values[f"{token}_{window}_hu_volume"] = k * cm3
            values[f"{token}_{window}_hu_ratio"] = pct(k, n)
        k = int((region & abnormal).sum())
        values[f"{token}_opacity_volume"] = k * cm3
        values[f"{token}_opacity_ratio"] = pct(k, n)
        name = "total" if token == "lungs" else token
        for texture, code in TEXTURE_CLASSES.items():
            k = int((region & lungs & (bundle.texture.voxels == code)).sum())
            values[f"{texture}_{name}_volume"] = k * cm3
            values[f"{texture}_{name}_ratio"] = pct(k, n)

    lung_slices = {int(z) for z in np.argwhere(lungs)[:, 2]}
    abnormal_slices = {int(z) for z in np.argwhere(abnormal)[:, 2]}
    values["pos_ratio"] = len(abnormal_slices) / len(lung_slices) if lung_slices else 0.0

    activation = bundle.activation.voxels.astype(np.float64)
    values["activation_sum"] = float(activation.sum())
    values["activation_volume_weighted"] = float(activation[abnormal].sum()) * cm3

    for texture, code in TEXTURE_CLASSES.items():
        k = int((lungs & (bundle.texture.voxels == code)).sum())
        values[f"{texture}_dominance"] = k / n_abnormal if n_abnormal else 0.0

    ggo = lungs & (bundle.texture.voxels == TEXTURE_CLASSES["GGO"])
    values["focal_GGO"] = 1.0 if ggo.any() and _focal_oracle(ggo, header.spacing_mm, cfg) else 0.0

    left = int((abnormal & (lung_labels == 1)).sum()) * cm3 > cfg.laterality_min_cm3
    right = int((abnormal & (lung_labels == 2)).sum()) * cm3 > cfg.laterality_min_cm3
    values["unilateral_left"] = float(left and not right)
    values["unilateral_right"] = float(right and not left)
    values["bilateral"] = float(left and right)

    if n_abnormal:
        shell = _shell_oracle(lungs, header.spacing_mm, cfg.shell_depth_mm, cfg.hilar_radius_mm)
        values["peripheral_ratio"] = pct(int((abnormal & shell).sum()), n_abnormal)
    else:
        values["peripheral_ratio"] = 0.0

    tolerances = dict(MORPHOLOGY_TOLERANCES)
    for fid in SUMMED_FEATURES:
        tolerances[fid] = 1e-9 * max(1.0, abs(values[fid]))
    return GroundTruth(
        bundle.case_id,
        bundle.label or "",
        values,
        tolerances,
        [lesion_voxels(lesion) * cm3 for lesion in lesions],
        [lesion.analytic_volume_cm3 for lesion in lesions],
    )


def generate_case(spec: PhantomSpec, cfg: Optional[ExtractConfig] = None) -> Tuple[CaseBundle, GroundTruth]:
    bundle = rasterize(spec)
    return bundle, ground_truth(bundle, cfg, spec.lesions)


@dataclass
class Corpus:
    bundles: List[CaseBundle]
    truths: List[GroundTruth]
    seed: int

    @property
    def labels(self) -> List[str]:
        return [b.label or "" for b in self.bundles]

    def truth_table(self, schema: FeatureSchema = FEATURE_SCHEMA) -> FeatureTable:
        return FeatureTable.from_vectors([t.vector(schema) for t in self.truths])


def corpus_kinds(n: int, class_mix: float, seed: int) -> List[str]:
    """round(n * mix) covid-like cases (at least one of each class when 0 < mix < 1), in seeded order."""
    if n < 2:
        raise ConfigError(f"A corpus needs n >= 2, got {n}")
    if not 0.0 <= class_mix <= 1.0:
        raise ConfigError(f"class_mix must lie in [0, 1], got {class_mix}")
    n_covid = int(math.floor(n * class_mix + 0.5))
    if 0.0 < class_mix < 1.0:
        n_covid = min(max(n_covid, 1), n - 1)
    kinds = np.array(["covid_like"] * n_covid + ["other_like"] * (n - n_covid))
    return np.random.default_rng(seed).permutation(kinds).tolist()


def generate_corpus(
    n: int,
    class_mix: float,
    seed: int = DEFAULT_SEED,
    ranges: Optional[PhantomRanges] = None,
    cfg: Optional[ExtractConfig] = None,
    max_workers: Optional[int] = None,
) -> Corpus:
    """
    Generate n random phantoms; case i uses seed + i, so the result does not depend
    on the worker count.
    """
    kinds = corpus_kinds(n, class_mix, seed)

    def generate_single(index: int) -> Tuple[CaseBundle, GroundTruth]:
        spec = random_spec(kinds[index], derive_seed(seed, index), ranges, case_id=f"phantom_{index:04d}")
        return generate_case(spec, cfg)

    results = run_ordered(generate_single, range(n), max_workers)
    logger.info("Generated %d phantom cases (%d covid-like)", n, kinds.count("covid_like"))
    return Corpus([b for b, _ in results], [t for _, t in results], int(seed))


def write_corpus(corpus: Corpus, directory: PathLike, provenance: Optional[dict] = None) -> Path:
    """
    Write every bundle, the corpus manifest `corpus.manifest.json` and
    `ground_truth.csv` (feature-table columns).

    Returns:
        Path of the corpus manifest
    """
    directory = Path(directory)
    cases = []
    for bundle in corpus.bundles:
        save_case(bundle, directory / "cases", write_manifest=False)
        cases.append(case_manifest(bundle, prefix="cases/"))
    manifest_path = directory / "corpus.manifest.json"
    write_json(manifest_path, {"cases": cases, "provenance": provenance or {}})
    write_feature_table(corpus.truth_table(), directory / "ground_truth.csv", provenance)
    return manifest_path


def generate_feature_corpus(
    n: int,
    class_mix: float,
    seed: int,
    signal_group: str,
    schema: FeatureSchema = FEATURE_SCHEMA,
    shift: float = 4.0,
) -> FeatureTable:
    """
    Feature table where only the columns of `signal_group` depend on the class
    (covid rows shifted by `shift` standard deviations); all other columns are
    class-independent noise.
    """
    if signal_group not in schema.groups:
        raise ConfigError(f"Unknown feature group {signal_group!r}")
    kinds = corpus_kinds(n, class_mix, seed)
    rng = np.random.default_rng(derive_seed(seed, n))
    X = rng.normal(0.0, 1.0, size=(n, len(schema)))
    covid = np.array([k == "covid_like" for k in kinds])
    signal = schema.indices_for_groups([signal_group])
    X[np.ix_(covid, signal)] += shift
    labels = [KIND_LABELS[k] for k in kinds]
    return FeatureTable(schema, [f"synthetic_{i:04d}" for i in range(n)], labels, X)


def lesion_features(schema: FeatureSchema = FEATURE_SCHEMA) -> List[str]:
    """
    Feature ids that the phantom generator moves with lesion kind, size or placement.
    Structure volumes and the low HU window (lesions sit well above -950 HU) depend only
    on the lung jitter and the noise.
    """
    anatomy = set()
    for token, _, _ in ANATOMICAL_STRUCTURES:
        anatomy.update({f"{token}_volume", f"{token}_low_hu_volume", f"{token}_low_hu_ratio"})
    return [fid for fid in schema.feature_ids if fid not in anatomy]
