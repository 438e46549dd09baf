"""
Loading, saving, reorienting and validating CT grids and case bundles.

On disk every grid is a pair of files sharing one stem: `<stem>.json` holds the
header (dims, spacing_mm, orientation, dtype) and `<stem>.raw` holds the voxels
as little-endian values in X-fastest order (index = x + X*(y + Y*z)). In memory
grids are numpy arrays indexed [x, y, z], so the raw order is Fortran order.
"""

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from .errors import HeaderParseError, InvalidOrientationCode, MissingFile, SizeMismatch
from .models import (
    CANONICAL_ORIENTATION,
    DTYPES,
    ORIENTATION_PAIRS,
    ActivationMap,
    BinaryMask,
    CaseBundle,
    LabelMap,
    Volume,
    VolumeHeader,
    check_orientation,
)
from .constants import HU_CLIP_RANGE
from .utils import PathLike, atomic_write_bytes, dumps_json, read_json, atomic_write_text

logger = logging.getLogger(__name__)

CASE_ROLES: Tuple[str, ...] = (
    "volume",
    "lungs",
    "lobes",
    "abnormality",
    "texture",
    "activation",
    "bronchial",
)
REQUIRED_ROLES = CASE_ROLES[:-1]

GridLike = Union[Volume, LabelMap, ActivationMap, BinaryMask]


def _grid_paths(path: PathLike) -> Tuple[Path, Path]:
    path = Path(path)
    if path.suffix in (".json", ".raw"):
        path = path.with_suffix("")
    return path.with_name(path.name + ".json"), path.with_name(path.name + ".raw")


def read_header(path: PathLike) -> VolumeHeader:
    json_path, _ = _grid_paths(path)
    if not json_path.exists():
        raise MissingFile(f"Header file not found: {json_path}")
    try:
        with open(json_path, "r", encoding="utf-8") as f:
            payload = json.load(f)
        return VolumeHeader(
            dims=tuple(payload["dims"]),
            spacing_mm=tuple(payload["spacing_mm"]),
            orientation=payload["orientation"],
            dtype=payload["dtype"],
        )
    except (ValueError, KeyError, TypeError, InvalidOrientationCode) as e:
        raise HeaderParseError(f"Cannot parse header {json_path}: {e}") from e


def _read_grid(path: PathLike) -> Tuple[VolumeHeader, np.ndarray]:
    header = read_header(path)
    _, raw_path = _grid_paths(path)
    if not raw_path.exists():
        raise MissingFile(f"Raw voxel file not found: {raw_path}")
    raw = raw_path.read_bytes()
    dtype = DTYPES[header.dtype]
    expected = header.voxel_count * dtype.itemsize
    if len(raw) != expected:
        raise SizeMismatch(
            f"{raw_path} holds {len(raw)} bytes, expected {expected} for dims {header.dims} {header.dtype}"
        )
    voxels = np.frombuffer(raw, dtype=dtype).reshape(header.dims, order="F")
    return header, voxels


def load_volume(path: PathLike) -> Volume:
    header, voxels = _read_grid(path)
    return Volume(header, voxels)


def load_label_map(path: PathLike, role: str) -> LabelMap:
    header, voxels = _read_grid(path)
    if header.dtype != "uint8":
        raise HeaderParseError(f"Label map {path} must be uint8, header says {header.dtype}")
    return LabelMap(header, voxels, role)


def load_activation_map(path: PathLike) -> ActivationMap:
    header, voxels = _read_grid(path)
    if header.dtype != "float32":
        raise HeaderParseError(f"Activation map {path} must be float32, header says {header.dtype}")
    return ActivationMap(header, voxels)


def _voxels_of(grid: GridLike) -> np.ndarray:
    return grid.bits if isinstance(grid, BinaryMask) else grid.voxels


def save_grid(grid: GridLike, path: PathLike) -> None:
    """Write the header + raw pair for any grid type; `_read_grid` inverts it exactly."""
    header = grid.header
    json_path, raw_path = _grid_paths(path)
    voxels = np.asarray(_voxels_of(grid), dtype=DTYPES[header.dtype])
    atomic_write_bytes(raw_path, voxels.tobytes(order="F"))
    atomic_write_text(json_path, dumps_json(header.to_dict()))


def save_volume(volume: Volume, path: PathLike) -> None:
    save_grid(volume, path)


def reorient(grid: GridLike, target: str) -> GridLike:
    """
    Permute and flip axes so that the grid's orientation code becomes `target`.

    Args:
        grid: Volume, LabelMap, ActivationMap or BinaryMask
        target: 3-letter orientation code, e.g. "RAI" or "LPS"

    Returns:
        A grid of the same type with orientation == target
    """
    header = grid.header
    source = header.orientation
    target = check_orientation(target)
    if source == target:
        return grid

    perm: List[int] = []
    flips: List[bool] = []
    for letter in target:
        pair = next(p for p in ORIENTATION_PAIRS if letter in p)
        j = next(i for i, s in enumerate(source) if s in pair)
        perm.append(j)
        flips.append(source[j] != letter)

    voxels = np.transpose(_voxels_of(grid), perm)
    for axis, flip in enumerate(flips):
        if flip:
            voxels = np.flip(voxels, axis=axis)
    voxels = np.ascontiguousarray(voxels)

    new_header = replace(
        header,
        dims=tuple(header.dims[j] for j in perm),
        spacing_mm=tuple(header.spacing_mm[j] for j in perm),
        orientation=target,
    )
    if isinstance(grid, BinaryMask):
        return replace(grid, header=new_header, bits=voxels)
    return replace(grid, header=new_header, voxels=voxels)


def clip_normalize(volume: Volume) -> Volume:
    """Clamp HU to [-1000, 0] and map linearly onto [0, 1] as float32."""
    lo, hi = HU_CLIP_RANGE
    hu = volume.voxels.astype(np.float64)
    normalized = (np.clip(hu, lo, hi) - lo) / float(hi - lo)
    return Volume(volume.header.with_dtype("float32"), normalized.astype(np.float32))


def reorient_case(bundle: CaseBundle, target: str = CANONICAL_ORIENTATION) -> CaseBundle:
    changes = {role: reorient(grid, target) for role, grid in bundle.members()}
    return replace(bundle, **changes)


@dataclass(frozen=True)
class Violation:
    kind: str
    detail: str = ""
    count: int = 0

    def to_dict(self) -> dict:
        return {"kind": self.kind, "detail": self.detail, "count": self.count}


@dataclass
class ValidationReport:
    case_id: str
    violations: List[Violation] = field(default_factory=list)
    notes: List[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def kinds(self) -> List[str]:
        return [v.kind for v in self.violations]

    def to_dict(self) -> dict:
        return {
            "case_id": self.case_id,
            "ok": self.ok,
            "violations": [v.to_dict() for v in self.violations],
            "notes": [n.to_dict() for n in self.notes],
        }


def validate_case(bundle: CaseBundle) -> ValidationReport:
    """
    Check that a bundle is usable for feature extraction.

    Violations (blocking): grid mismatches, illegal labels, invalid activations,
    empty lungs, texture outside abnormality, non-HU volume.
    Notes (non-blocking): abnormality or lobe voxels outside the lungs.
    """
    report = ValidationReport(bundle.case_id)
    reference = bundle.volume.header

    aligned: Dict[str, bool] = {}
    for role, grid in bundle.members():
        header = grid.header
        ok = True
        if header.dims != reference.dims:
            report.violations.append(Violation("DimsMismatch", f"{role}: {header.dims} != {reference.dims}"))
            ok = False
        if header.spacing_mm != reference.spacing_mm:
            report.violations.append(
                Violation("SpacingMismatch", f"{role}: {header.spacing_mm} != {reference.spacing_mm}")
            )
        if header.orientation != reference.orientation:
            report.violations.append(
                Violation("OrientationMismatch", f"{role}: {header.orientation} != {reference.orientation}")
            )
        aligned[role] = ok

    if reference.dtype != "int16":
        report.violations.append(Violation("VolumeNotHU", f"volume dtype is {reference.dtype}, expected int16"))

    for role, grid in bundle.members():
        if isinstance(grid, LabelMap):
            illegal = grid.illegal_voxel_count()
            if illegal:
                report.violations.append(Violation("IllegalLabel", f"{role}", illegal))

    activation = bundle.activation.voxels
    bad_activation = int(np.count_nonzero(~np.isfinite(activation) | (activation < 0)))
    if bad_activation:
        report.violations.append(Violation("InvalidActivation", "activation", bad_activation))

    lungs = bundle.lungs.voxels > 0
    if not lungs.any():
        report.violations.append(Violation("EmptyLungs", "lungs mask has no voxels"))

    if aligned.get("texture") and aligned.get("abnormality"):
        outside = int(np.count_nonzero((bundle.texture.voxels > 0) & (bundle.abnormality.voxels == 0)))
        if outside:
            report.violations.append(
                Violation("TextureOutsideAbnormality", "texture voxels without abnormality", outside)
            )

    if aligned.get("lungs") and aligned.get("abnormality"):
        stray = int(np.count_nonzero((bundle.abnormality.voxels > 0) & ~lungs))
        if stray:
            report.notes.append(Violation("AbnormalityOutsideLungs", "ignored by feature extraction", stray))
    if aligned.get("lungs") and aligned.get("lobes"):
        stray = int(np.count_nonzero((bundle.lobes.voxels > 0) & ~lungs))
        if stray:
            report.notes.append(Violation("LobeOutsideLungs", "ignored by feature extraction", stray))

    return report


@dataclass(frozen=True)
class CaseEntry:
    """One case manifest plus the directory its file stems are relative to."""

    manifest: Dict[str, object]
    base_dir: Path

    @property
    def case_id(self) -> str:
        return str(self.manifest["case_id"])

    @property
    def label(self) -> Optional[str]:
        label = self.manifest.get("label")
        return str(label) if label else None


def read_manifest_entries(path: PathLike) -> List[CaseEntry]:
    """Read a single-case manifest or a corpus manifest ({"cases": [...]})."""
    path = Path(path)
    payload = read_json(path)
    if not isinstance(payload, dict):
        raise HeaderParseError(f"Manifest {path} must be a JSON object")
    entries = payload["cases"] if "cases" in payload else [payload]
    result = []
    for entry in entries:
        missing = [role for role in REQUIRED_ROLES if role not in entry]
        if "case_id" not in entry or missing:
            raise HeaderParseError(f"Manifest entry in {path} is missing {missing or ['case_id']}")
        result.append(CaseEntry(dict(entry), path.parent))
    return result


def load_case(source: Union[PathLike, CaseEntry]) -> CaseBundle:
    """Load every grid named by a case manifest and reorient all of them to RAI."""
    if not isinstance(source, CaseEntry):
        entries = read_manifest_entries(source)
        if len(entries) != 1:
            raise HeaderParseError(f"{source} describes {len(entries)} cases, expected one")
        source = entries[0]
    manifest, base = source.manifest, source.base_dir

    def stem(role: str) -> Path:
        return base / str(manifest[role])

    bronchial = None
    if manifest.get("bronchial"):
        bronchial = load_label_map(stem("bronchial"), "bronchial")

    bundle = CaseBundle(
        case_id=source.case_id,
        volume=load_volume(stem("volume")),
        lungs=load_label_map(stem("lungs"), "lungs"),
        lobes=load_label_map(stem("lobes"), "lobes"),
        abnormality=load_label_map(stem("abnormality"), "abnormality"),
        texture=load_label_map(stem("texture"), "texture"),
        activation=load_activation_map(stem("activation")),
        bronchial=bronchial,
        label=source.label,
    )
    logger.debug("Loaded case %s with dims %s", bundle.case_id, bundle.header.dims)
    return reorient_case(bundle, CANONICAL_ORIENTATION)


def case_manifest(bundle: CaseBundle, prefix: str = "") -> Dict[str, object]:
    manifest: Dict[str, object] = {"case_id": bundle.case_id}
    for role, _ in bundle.members():
        manifest[role] = f"{prefix}{bundle.case_id}_{role}"
    manifest["label"] = bundle.label or ""
    return manifest


def save_case(bundle: CaseBundle, directory: PathLike, write_manifest: bool = True) -> Path:
    """
    Write every grid of the bundle as `<case_id>_<role>.{json,raw}` in `directory`.

    Returns:
        Path of the case manifest `<case_id>.manifest.json`
    """
    directory = Path(directory)
    for role, grid in bundle.members():
        save_grid(grid, directory / f"{bundle.case_id}_{role}")
    manifest_path = directory / f"{bundle.case_id}.manifest.json"
    if write_manifest:
        atomic_write_text(manifest_path, dumps_json(case_manifest(bundle)))
    return manifest_path
