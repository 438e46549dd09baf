"""
3-D binary-mask geometry in physical (mm) units.

Distances are Euclidean distances between voxel centres scaled by the per-axis
spacing, so anisotropic grids are handled without resampling.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial.distance import pdist

from .errors import EmptyComponent, EmptyLungs, NegativeRadius
from .models import BinaryMask, VolumeHeader

logger = logging.getLogger(__name__)

# absorbs float rounding when a distance lands exactly on the radius
_DISTANCE_EPS = 1e-9


@dataclass(frozen=True)
class ComponentSet:
    labels: np.ndarray
    count: int
    sizes: np.ndarray

    def voxels(self, component_id: int) -> np.ndarray:
        """(N, 3) integer voxel indices of one component, in X-fastest linear order."""
        coords = np.argwhere(self.labels.transpose(2, 1, 0) == component_id)
        return coords[:, ::-1]

    def all_voxels(self):
        """Yield (component_id, (N, 3) indices) for every component in id order."""
        if self.count == 0:
            return
        objects = ndimage.find_objects(self.labels)
        for component_id, box in enumerate(objects, start=1):
            sub = self.labels[box] == component_id
            coords = np.argwhere(sub.transpose(2, 1, 0))[:, ::-1]
            offset = np.array([s.start for s in box])
            yield component_id, coords + offset


@dataclass(frozen=True)
class StructuringElement:
    radius_mm: float
    offsets: np.ndarray

    def as_kernel(self) -> np.ndarray:
        """Boolean kernel centred on the zero offset."""
        reach = np.abs(self.offsets).max(axis=0) if len(self.offsets) else np.zeros(3, int)
        kernel = np.zeros(tuple(2 * reach + 1), dtype=bool)
        kernel[tuple((self.offsets + reach).T)] = True
        return kernel


def structuring_element(radius_mm: float, spacing_mm: Sequence[float]) -> StructuringElement:
    """Integer offsets o with |o * spacing| <= radius_mm (always contains the zero offset)."""
    if radius_mm < 0:
        raise NegativeRadius(f"radius_mm must be >= 0, got {radius_mm}")
    spacing = np.asarray(spacing_mm, dtype=np.float64)
    reach = np.floor(radius_mm / spacing + _DISTANCE_EPS).astype(int)
    axes = [np.arange(-r, r + 1) for r in reach]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    dist2 = ((grid * spacing) ** 2).sum(axis=1)
    offsets = grid[dist2 <= radius_mm**2 + _DISTANCE_EPS]
    return StructuringElement(float(radius_mm), offsets)


def _structure(connectivity: int) -> np.ndarray:
    if connectivity == 6:
        return ndimage.generate_binary_structure(3, 1)
    if connectivity == 26:
        return ndimage.generate_binary_structure(3, 3)
    raise ValueError(f"connectivity must be 6 or 26, got {connectivity}")


def connected_components(mask: BinaryMask, connectivity: int = 26) -> ComponentSet:
    """
    Label connected true voxels.

    Ids are 1..k ordered by decreasing voxel count; ties go to the component whose
    first voxel comes earliest in X-fastest linear order.
    """
    raw, count = ndimage.label(mask.bits, structure=_structure(connectivity))
    if count == 0:
        return ComponentSet(raw.astype(np.int32), 0, np.zeros(0, dtype=np.int64))

    flat = raw.ravel(order="F")
    sizes = np.bincount(flat, minlength=count + 1)[1:]
    _, first_index = np.unique(flat, return_index=True)
    first_index = first_index[1:] if flat[first_index[0]] == 0 else first_index
    order = np.lexsort((first_index, -sizes))

    relabel = np.zeros(count + 1, dtype=np.int32)
    relabel[order + 1] = np.arange(1, count + 1, dtype=np.int32)
    labels = relabel[raw]
    return ComponentSet(labels, int(count), sizes[order].astype(np.int64))


def _check_radius(radius_mm: float) -> None:
    if radius_mm < 0:
        raise NegativeRadius(f"radius_mm must be >= 0, got {radius_mm}")


def dilate(mask: BinaryMask, radius_mm: float) -> BinaryMask:
    """True wherever some input-true voxel centre lies within radius_mm."""
    _check_radius(radius_mm)
    if radius_mm == 0 or mask.is_empty():
        return mask
    distance = ndimage.distance_transform_edt(~mask.bits, sampling=mask.header.spacing_mm)
    return BinaryMask(mask.header, distance <= radius_mm + _DISTANCE_EPS)


def erode(mask: BinaryMask, radius_mm: float) -> BinaryMask:
    """
    True where every voxel centre within radius_mm is input-true.
    Voxels outside the grid count as false.
    """
    _check_radius(radius_mm)
    if radius_mm == 0 or mask.is_empty():
        return mask
    padded = np.pad(mask.bits, 1, mode="constant", constant_values=False)
    distance = ndimage.distance_transform_edt(padded, sampling=mask.header.spacing_mm)
    inner = distance[1:-1, 1:-1, 1:-1] > radius_mm + _DISTANCE_EPS
    return BinaryMask(mask.header, inner & mask.bits)


def hilar_proxy(lungs: BinaryMask, radius_mm: float) -> BinaryMask:
    """Cylinder of radius_mm along the Z axis through the in-plane centroid of the lungs."""
    header = lungs.header
    sx, sy, _ = header.spacing_mm
    coords = np.argwhere(lungs.bits)
    cx = coords[:, 0].mean() * sx
    cy = coords[:, 1].mean() * sy
    x = np.arange(header.dims[0]) * sx - cx
    y = np.arange(header.dims[1]) * sy - cy
    disc = (x[:, None] ** 2 + y[None, :] ** 2) <= radius_mm**2 + _DISTANCE_EPS
    cylinder = np.broadcast_to(disc[:, :, None], header.dims)
    return BinaryMask(header, cylinder)


def peripheral_shell(
    lungs: BinaryMask,
    depth_mm: float,
    bronchial: Optional[BinaryMask] = None,
    bronchial_margin_mm: float = 10.0,
    hilar_radius_mm: float = 25.0,
) -> BinaryMask:
    """
    Sub-pleural shell of the lungs: lungs minus their erosion by depth_mm, with the
    bronchial neighbourhood removed (or the hilar cylinder proxy when no bronchial
    mask is available).
    """
    if depth_mm <= 0:
        raise NegativeRadius(f"depth_mm must be > 0, got {depth_mm}")
    if lungs.is_empty():
        raise EmptyLungs("Cannot build a peripheral shell from an empty lungs mask")

    shell = lungs.bits & ~erode(lungs, depth_mm).bits
    if bronchial is not None:
        excluded = dilate(bronchial, bronchial_margin_mm).bits
    else:
        excluded = hilar_proxy(lungs, hilar_radius_mm).bits
    return BinaryMask(lungs.header, shell & ~excluded)


def _in_plane_extremes(points: np.ndarray) -> np.ndarray:
    """Per-row min/max x of 2-D integer points; every convex-hull vertex is among them."""
    order = np.lexsort((points[:, 0], points[:, 1]))
    pts = points[order]
    rows, start = np.unique(pts[:, 1], return_index=True)
    end = np.append(start[1:], len(pts)) - 1
    return np.unique(np.concatenate([pts[start], pts[end]]), axis=0)


def max_axial_diameter(component: np.ndarray, header: VolumeHeader) -> float:
    """
    Largest in-plane distance (mm) between voxel centres over all axial slices,
    plus one in-plane voxel diagonal so a single voxel has a nonzero diameter.
    """
    component = np.asarray(component)
    if component.size == 0:
        raise EmptyComponent("max_axial_diameter needs at least one voxel")
    sx, sy, _ = header.spacing_mm
    scale = np.array([sx, sy])
    best = 0.0
    for z in np.unique(component[:, 2]):
        points = component[component[:, 2] == z][:, :2]
        if len(points) < 2:
            continue
        candidates = _in_plane_extremes(points) * scale
        if len(candidates) >= 2:
            best = max(best, float(pdist(candidates).max()))
    return best + float(np.hypot(sx, sy))


def roundedness(component: np.ndarray, header: VolumeHeader) -> float:
    """
    Smallest over largest principal semi-axis of the voxel-centre cloud.

    Semi-axes come from the covariance eigenvalues (a solid ellipsoid has variance
    a^2 / 5 along each axis), each floored at half a voxel extent along that axis.
    """
    component = np.asarray(component)
    if component.size == 0:
        raise EmptyComponent("roundedness needs at least one voxel")
    spacing = np.asarray(header.spacing_mm, dtype=np.float64)
    points = component.astype(np.float64) * spacing
    if len(points) > 1:
        cov = np.cov(points, rowvar=False, bias=True)
    else:
        cov = np.zeros((3, 3))
    eigenvalues, eigenvectors = np.linalg.eigh(cov)
    semi_axes = np.sqrt(5.0 * np.clip(eigenvalues, 0.0, None))
    floors = 0.5 * (np.abs(eigenvectors) * spacing[:, None]).sum(axis=0)
    semi_axes = np.maximum(semi_axes, floors)
    return float(semi_axes.min() / semi_axes.max())
