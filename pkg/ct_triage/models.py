import numpy as np
from dataclasses import dataclass, field, replace
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

from .errors import HeaderParseError, InvalidOrientationCode

DTYPES: Dict[str, np.dtype] = {
    "int16": np.dtype("<i2"),
    "uint8": np.dtype("u1"),
    "float32": np.dtype("<f4"),
}
""" Dict[str, np.dtype]: on-disk dtype names and their little-endian numpy dtypes. """

ORIENTATION_PAIRS: Tuple[str, str, str] = ("RL", "AP", "IS")

CANONICAL_ORIENTATION = "RAI"

LABEL_SETS: Dict[str, Tuple[int, ...]] = {
    "lungs": (0, 1, 2),
    "lobes": (0, 1, 2, 3, 4, 5),
    "abnormality": (0, 1),
    "texture": (0, 1, 2),
    "bronchial": (0, 1),
}
""" Dict[str, Tuple[int, ...]]: legal voxel values per label-map role. """

CLASS_LABELS: Tuple[str, str] = ("other", "covid")


def check_orientation(code: str) -> str:
    """Return the upper-cased code, or raise if it is not one letter per axis pair."""
    if not isinstance(code, str):
        raise InvalidOrientationCode(f"Orientation must be a string, got {code!r}")
    code = code.upper().rstrip("+")
    if len(code) != 3:
        raise InvalidOrientationCode(f"Orientation {code!r} must have 3 letters")
    for pair in ORIENTATION_PAIRS:
        if sum(letter in pair for letter in code) != 1:
            raise InvalidOrientationCode(
                f"Orientation {code!r} needs exactly one letter from {{{pair[0]},{pair[1]}}}"
            )
    return code


@dataclass(frozen=True)
class VolumeHeader:
    dims: Tuple[int, int, int]
    spacing_mm: Tuple[float, float, float]
    orientation: str = CANONICAL_ORIENTATION
    dtype: str = "int16"

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing_mm)
        if len(dims) != 3 or any(d < 1 for d in dims):
            raise HeaderParseError(f"dims must be 3 positive integers, got {self.dims}")
        if len(spacing) != 3 or not all(np.isfinite(s) and s > 0 for s in spacing):
            raise HeaderParseError(
                f"spacing_mm must be 3 positive reals, got {self.spacing_mm}"
            )
        if self.dtype not in DTYPES:
            raise HeaderParseError(
                f"dtype must be one of {sorted(DTYPES)}, got {self.dtype!r}"
            )
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing_mm", spacing)
        object.__setattr__(self, "orientation", check_orientation(self.orientation))

    @property
    def voxel_count(self) -> int:
        return self.dims[0] * self.dims[1] * self.dims[2]

    @property
    def voxel_volume_mm3(self) -> float:
        return self.spacing_mm[0] * self.spacing_mm[1] * self.spacing_mm[2]

    @property
    def voxel_volume_cm3(self) -> float:
        return self.voxel_volume_mm3 / 1000.0

    def same_grid(self, other: "VolumeHeader") -> bool:
        """True when dims, spacing and orientation agree (dtype may differ)."""
        return (
            self.dims == other.dims
            and self.spacing_mm == other.spacing_mm
            and self.orientation == other.orientation
        )

    def with_dtype(self, dtype: str) -> "VolumeHeader":
        return replace(self, dtype=dtype)

    def to_dict(self) -> dict:
        return {
            "dims": list(self.dims),
            "spacing_mm": list(self.spacing_mm),
            "orientation": self.orientation,
            "dtype": self.dtype,
        }


def _frozen_array(voxels: np.ndarray, header: VolumeHeader) -> np.ndarray:
    array = np.asarray(voxels, dtype=DTYPES[header.dtype])
    if array.shape != header.dims:
        raise HeaderParseError(
            f"Voxel grid shape {array.shape} does not match header dims {header.dims}"
        )
    array = array.view()
    array.flags.writeable = False
    return array


@dataclass(frozen=True)
class Volume:
    """CT grid indexed [x, y, z]; HU (int16) or normalized intensity (float32)."""

    header: VolumeHeader
    voxels: np.ndarray = field(repr=False)

    def __post_init__(self):
        object.__setattr__(self, "voxels", _frozen_array(self.voxels, self.header))

    @classmethod
    def from_array(
        cls, array: np.ndarray, spacing_mm: Sequence[float], orientation: str = CANONICAL_ORIENTATION
    ) -> "Volume":
        dtype = "float32" if np.asarray(array).dtype.kind == "f" else "int16"
        header = VolumeHeader(np.shape(array), tuple(spacing_mm), orientation, dtype)
        return cls(header, array)


@dataclass(frozen=True)
class LabelMap:
    header: VolumeHeader
    voxels: np.ndarray = field(repr=False)
    role: str = "lungs"

    def __post_init__(self):
        if self.role not in LABEL_SETS:
            raise HeaderParseError(f"Unknown label-map role {self.role!r}")
        if self.header.dtype != "uint8":
            object.__setattr__(self, "header", self.header.with_dtype("uint8"))
        object.__setattr__(self, "voxels", _frozen_array(self.voxels, self.header))

    @classmethod
    def from_array(
        cls, array: np.ndarray, spacing_mm: Sequence[float], role: str,
        orientation: str = CANONICAL_ORIENTATION,
    ) -> "LabelMap":
        header = VolumeHeader(np.shape(array), tuple(spacing_mm), orientation, "uint8")
        return cls(header, array, role)

    def illegal_voxel_count(self) -> int:
        legal = np.isin(self.voxels, LABEL_SETS[self.role])
        return int(legal.size - np.count_nonzero(legal))


@dataclass(frozen=True)
class ActivationMap:
    header: VolumeHeader
    voxels: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.header.dtype != "float32":
            object.__setattr__(self, "header", self.header.with_dtype("float32"))
        object.__setattr__(self, "voxels", _frozen_array(self.voxels, self.header))

    @classmethod
    def from_array(
        cls, array: np.ndarray, spacing_mm: Sequence[float], orientation: str = CANONICAL_ORIENTATION
    ) -> "ActivationMap":
        header = VolumeHeader(np.shape(array), tuple(spacing_mm), orientation, "float32")
        return cls(header, array)


@dataclass(frozen=True)
class BinaryMask:
    header: VolumeHeader
    bits: np.ndarray = field(repr=False)

    def __post_init__(self):
        bits = np.asarray(self.bits, dtype=bool)
        if bits.shape != self.header.dims:
            raise HeaderParseError(
                f"Mask shape {bits.shape} does not match header dims {self.header.dims}"
            )
        bits = bits.view()
        bits.flags.writeable = False
        object.__setattr__(self, "bits", bits)
        if self.header.dtype != "uint8":
            object.__setattr__(self, "header", self.header.with_dtype("uint8"))

    @classmethod
    def from_label_map(cls, label_map: LabelMap, values: Optional[Sequence[int]] = None) -> "BinaryMask":
        """Mask of voxels whose label is in `values` (any nonzero label when omitted)."""
        if values is None:
            bits = label_map.voxels > 0
        else:
            bits = np.isin(label_map.voxels, list(values))
        return cls(label_map.header, bits)

    def count(self) -> int:
        return int(np.count_nonzero(self.bits))

    def is_empty(self) -> bool:
        return not self.bits.any()


Grid = (Volume, LabelMap, ActivationMap, BinaryMask)


@dataclass(frozen=True)
class CaseBundle:
    case_id: str
    volume: Volume
    lungs: LabelMap
    lobes: LabelMap
    abnormality: LabelMap
    texture: LabelMap
    activation: ActivationMap
    bronchial: Optional[LabelMap] = None
    label: Optional[str] = None

    def __post_init__(self):
        if self.label not in (None,) + CLASS_LABELS:
            raise HeaderParseError(
                f"Case {self.case_id!r} label must be one of {CLASS_LABELS}, got {self.label!r}"
            )

    def members(self) -> Iterator[Tuple[str, object]]:
        """Yield (role, grid) for every grid present in the bundle, in manifest order."""
        yield "volume", self.volume
        yield "lungs", self.lungs
        yield "lobes", self.lobes
        yield "abnormality", self.abnormality
        yield "texture", self.texture
        yield "activation", self.activation
        if self.bronchial is not None:
            yield "bronchial", self.bronchial

    @property
    def header(self) -> VolumeHeader:
        return self.volume.header


@dataclass(frozen=True)
class FeatureSpec:
    feature_id: str
    group: str
    kind: str = "continuous"


@dataclass(frozen=True)
class FeatureSchema:
    features: Tuple[FeatureSpec, ...]
    version: str

    def __post_init__(self):
        ids = [f.feature_id for f in self.features]
        if len(set(ids)) != len(ids):
            raise ValueError("Feature ids must be unique")

    def __len__(self) -> int:
        return len(self.features)

    @property
    def feature_ids(self) -> List[str]:
        return [f.feature_id for f in self.features]

    @property
    def groups(self) -> List[str]:
        seen: List[str] = []
        for f in self.features:
            if f.group not in seen:
                seen.append(f.group)
        return seen

    def index(self, feature_id: str) -> int:
        for i, f in enumerate(self.features):
            if f.feature_id == feature_id:
                return i
        raise KeyError(feature_id)

    def indices_for_groups(self, groups: Sequence[str]) -> np.ndarray:
        wanted = set(groups)
        return np.array([i for i, f in enumerate(self.features) if f.group in wanted], dtype=np.intp)

    def active_indices(self, masked_groups: Sequence[str]) -> np.ndarray:
        """Column indices left after removing every feature of the masked groups."""
        masked = set(masked_groups)
        unknown = masked - set(self.groups)
        if unknown:
            raise KeyError(f"Unknown feature group(s): {sorted(unknown)}")
        return np.array([i for i, f in enumerate(self.features) if f.group not in masked], dtype=np.intp)
