"""Core voxel-grid value types and grid/canonical coordinate mapping.

All volumes are dense cubic grids. TSDF values are signed distances in
voxel units, clamped to +-truncation (negative = inside / occluded,
positive = observed free space). Values are stored as float32 (the file
format is 32-bit); heavier numerics upstream run in float64 and cast on
construction. Instances are immutable after construction and safe to
share across workers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "GridSpec",
    "TsdfVolume",
    "FeatureVolume",
    "MaskVolume",
    "occupancy",
    "canonical_to_grid",
    "grid_to_canonical",
]


def _as_vec3(v) -> tuple[float, float, float]:
    a = np.asarray(v, dtype=np.float64).reshape(-1)
    if a.size == 1:
        a = np.repeat(a, 3)
    if a.size != 3:
        raise ValueError(f"expected scalar or 3-vector, got shape {a.shape}")
    return (float(a[0]), float(a[1]), float(a[2]))


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class GridSpec:
    """Cubic voxel grid: `edge` voxels per axis spanning a canonical box.

    Voxel centers are placed so that voxel 0 sits on the lower box corner
    and voxel edge-1 on the upper corner; the voxel size in canonical
    units is (origin_max - origin_min) / (edge - 1) per axis.
    """

    edge: int
    origin_min: tuple[float, float, float] = (-0.5, -0.5, -0.5)
    origin_max: tuple[float, float, float] = (0.5, 0.5, 0.5)
    truncation: float = 3.0

    def __post_init__(self):
        object.__setattr__(self, "origin_min", _as_vec3(self.origin_min))
        object.__setattr__(self, "origin_max", _as_vec3(self.origin_max))
        if self.edge < 2 or not _is_pow2(self.edge):
            raise ValueError(f"edge must be a power of two >= 2, got {self.edge}")
        if not all(lo < hi for lo, hi in zip(self.origin_min, self.origin_max)):
            raise ValueError("origin_min must be < origin_max componentwise")
        if not self.truncation > 0:
            raise ValueError("truncation must be positive")

    @property
    def voxel_size(self) -> np.ndarray:
        """Canonical units per voxel step, per axis."""
        lo = np.array(self.origin_min)
        hi = np.array(self.origin_max)
        return (hi - lo) / (self.edge - 1)

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.edge, self.edge, self.edge)

    def voxel_centers(self) -> np.ndarray:
        """Canonical coordinates of all voxel centers, shape (edge^3, 3)."""
        axes = [
            np.linspace(self.origin_min[i], self.origin_max[i], self.edge)
            for i in range(3)
        ]
        g = np.meshgrid(*axes, indexing="ij")
        return np.stack([a.reshape(-1) for a in g], axis=-1)


def _freeze(arr: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(arr, dtype=np.float32)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class TsdfVolume:
    """Signed truncated distance field on a GridSpec, in voxel units."""

    spec: GridSpec
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        vals = _freeze(self.values)
        if vals.shape != self.spec.shape:
            raise ValueError(f"values shape {vals.shape} != grid {self.spec.shape}")
        t = np.float32(self.spec.truncation)
        if not np.all(np.abs(vals) <= t):
            raise ValueError("TSDF values exceed +-truncation")
        object.__setattr__(self, "values", vals)


@dataclass(frozen=True)
class FeatureVolume:
    """Per-voxel feature vectors, values shape (channels, edge, edge, edge)."""

    spec: GridSpec
    channels: int
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        vals = _freeze(self.values)
        expect = (self.channels,) + self.spec.shape
        if self.channels < 1:
            raise ValueError("channels must be positive")
        if vals.shape != expect:
            raise ValueError(f"values shape {vals.shape} != {expect}")
        if not np.all(np.isfinite(vals)):
            raise ValueError("feature values must be finite")
        object.__setattr__(self, "values", vals)


@dataclass(frozen=True)
class MaskVolume:
    """Per-voxel weights in [0, 1]; binary masks hold only {0, 1}."""

    spec: GridSpec
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        vals = _freeze(self.values)
        if vals.shape != self.spec.shape:
            raise ValueError(f"values shape {vals.shape} != grid {self.spec.shape}")
        if vals.min(initial=0.0) < 0.0 or vals.max(initial=0.0) > 1.0:
            raise ValueError("mask entries must lie in [0, 1]")
        object.__setattr__(self, "values", vals)

    @property
    def is_binary(self) -> bool:
        return bool(np.all((self.values == 0.0) | (self.values == 1.0)))


def occupancy(vol: TsdfVolume) -> MaskVolume:
    """Binary occupancy mask: 1 exactly where the TSDF value is <= 0."""
    return MaskVolume(vol.spec, (vol.values <= 0.0).astype(np.float32))


def canonical_to_grid(p, spec: GridSpec) -> np.ndarray:
    """Map canonical-space points to continuous grid coordinates.

    p_grid = (edge - 1) * (p - origin_min) / (origin_max - origin_min),
    so the lower box corner maps to 0 and the upper corner to edge-1.
    Points outside the box come back out of [0, edge-1]; callers clip or
    discard. Accepts a single 3-vector or an (..., 3) array.
    """
    p = np.asarray(p, dtype=np.float64)
    lo = np.array(spec.origin_min)
    hi = np.array(spec.origin_max)
    return (spec.edge - 1) * (p - lo) / (hi - lo)


def grid_to_canonical(p_grid, spec: GridSpec) -> np.ndarray:
    """Inverse of canonical_to_grid."""
    p_grid = np.asarray(p_grid, dtype=np.float64)
    lo = np.array(spec.origin_min)
    hi = np.array(spec.origin_max)
    return lo + p_grid * (hi - lo) / (spec.edge - 1)
