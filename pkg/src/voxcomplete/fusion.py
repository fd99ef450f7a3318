"""Multi-view back-projection, trilinear splatting, and feature fusion.

Per view: every valid depth pixel back-projects to canonical space as

    x_can(q) = (depth(q) * K^-1 [u, w, 1]^T - t) @ R^T

(row-vector convention, implemented literally; camera JSON files document
it so external data must conform). Patch centers are means of their valid
pixels' back-projections; each patch feature is splatted onto the eight
surrounding voxel centers with trilinear weights, out-of-grid neighbors
dropped without renormalization. Per-view featurizations are normalized
by accumulated weight, filtered to voxels inside the reference surface
(TSDF <= 0), and fused across views by weighted averaging. Coverage masks
record which voxels received any splatted weight from a given view.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .volumes import FeatureVolume, GridSpec, MaskVolume, TsdfVolume, canonical_to_grid

__all__ = [
    "CameraParams",
    "ViewObservation",
    "SplatAccumulator",
    "back_project",
    "patch_center",
    "trilinear_weights",
    "splat_view",
    "normalize_view",
    "tsdf_filter",
    "fuse_views",
    "coverage_mask",
    "incomplete_target",
    "save_camera",
    "load_camera",
    "FUSION_EPS",
]

FUSION_EPS = 1e-8


@dataclass(frozen=True)
class CameraParams:
    """Pinhole camera: intrinsics K, rotation R (orthonormal), translation t."""

    intrinsics: np.ndarray
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        k = np.asarray(self.intrinsics, dtype=np.float64).reshape(3, 3)
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if abs(np.linalg.det(k)) < 1e-12:
            raise ValueError("intrinsics matrix is not invertible")
        if abs(np.linalg.det(r) - 1.0) > 1e-6 or np.abs(r @ r.T - np.eye(3)).max() > 1e-6:
            raise ValueError("rotation must be orthonormal with determinant 1")
        for name, a in (("intrinsics", k), ("rotation", r), ("translation", t)):
            a.flags.writeable = False
            object.__setattr__(self, name, a)


@dataclass(frozen=True)
class ViewObservation:
    """One rendered view: depth raster, patch feature raster, camera.

    depth is (H, W) with 0 marking invalid pixels; patch_features is
    (C, H_p, W_p) with H = H_p * patch_size, W = W_p * patch_size.
    """

    camera: CameraParams
    depth: np.ndarray = field(repr=False)
    patch_features: np.ndarray = field(repr=False)
    patch_size: int = 8

    def __post_init__(self):
        depth = np.ascontiguousarray(self.depth, dtype=np.float64)
        feats = np.ascontiguousarray(self.patch_features, dtype=np.float64)
        if depth.ndim != 2 or feats.ndim != 3:
            raise ValueError("depth must be (H, W); patch_features (C, H_p, W_p)")
        h, w = depth.shape
        _, hp, wp = feats.shape
        if h != hp * self.patch_size or w != wp * self.patch_size:
            raise ValueError(
                f"raster {h}x{w} incompatible with {hp}x{wp} patches of size {self.patch_size}"
            )
        if depth.min(initial=0.0) < 0.0:
            raise ValueError("depth values must be >= 0 (0 = invalid)")
        if not np.all(np.isfinite(feats)):
            raise ValueError("patch features must be finite")
        depth.flags.writeable = False
        feats.flags.writeable = False
        object.__setattr__(self, "depth", depth)
        object.__setattr__(self, "patch_features", feats)

    @property
    def n_patches(self) -> int:
        return self.patch_features.shape[1] * self.patch_features.shape[2]

    @property
    def channels(self) -> int:
        return self.patch_features.shape[0]


@dataclass
class SplatAccumulator:
    """Running feature and weight sums for one view (float64)."""

    spec: GridSpec
    feature_sum: np.ndarray
    weight_sum: np.ndarray

    @classmethod
    def zeros(cls, spec: GridSpec, channels: int) -> "SplatAccumulator":
        g = spec.edge
        return cls(spec, np.zeros((channels, g, g, g)), np.zeros((g, g, g)))


def back_project(q, depth: float, cam: CameraParams) -> np.ndarray:
    """Canonical 3D point of pixel q = (u, w) at the given depth."""
    if depth <= 0:
        raise ValueError("back_project needs depth > 0")
    u, w = float(q[0]), float(q[1])
    q_tilde = np.array([u, w, 1.0])
    k_inv = np.linalg.inv(cam.intrinsics)
    return (depth * (k_inv @ q_tilde) - cam.translation) @ cam.rotation.T


def _pixel_grid(h: int, w: int):
    ww, uu = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    return uu, ww  # u = column, w = row


def _back_project_raster(view: ViewObservation) -> tuple[np.ndarray, np.ndarray]:
    """All-pixel back-projection: (H, W, 3) points and an (H, W) valid mask."""
    h, w = view.depth.shape
    uu, ww = _pixel_grid(h, w)
    rays = np.stack([uu, ww, np.ones_like(uu)], axis=-1)  # (H, W, 3) homogeneous
    k_inv = np.linalg.inv(view.camera.intrinsics)
    cam_pts = view.depth[..., None] * (rays @ k_inv.T)
    pts = (cam_pts - view.camera.translation) @ view.camera.rotation.T
    return pts, view.depth > 0


def patch_center(view: ViewObservation, i: int) -> np.ndarray | None:
    """Mean canonical point of patch i's valid pixels; None if all invalid."""
    hp, wp = view.patch_features.shape[1:]
    if not 0 <= i < hp * wp:
        raise IndexError(f"patch index {i} out of range for {hp}x{wp} patches")
    ps = view.patch_size
    r, c = divmod(i, wp)
    pts, valid = _back_project_raster(view)
    block = (slice(r * ps, (r + 1) * ps), slice(c * ps, (c + 1) * ps))
    m = valid[block]
    if not m.any():
        return None
    return pts[block][m].mean(axis=0)


def _all_patch_centers(view: ViewObservation):
    """Vectorized patch centers: (P, 3) array plus validity flags."""
    hp, wp = view.patch_features.shape[1:]
    ps = view.patch_size
    pts, valid = _back_project_raster(view)
    h, w = view.depth.shape
    pts_b = pts.reshape(hp, ps, wp, ps, 3)
    val_b = valid.reshape(hp, ps, wp, ps)
    counts = val_b.sum(axis=(1, 3))  # (hp, wp)
    sums = (pts_b * val_b[:, :, :, :, None]).sum(axis=(1, 3))
    with np.errstate(invalid="ignore"):
        centers = sums / counts[..., None]
    return centers.reshape(-1, 3), (counts > 0).reshape(-1)


def trilinear_weights(p_grid, spec: GridSpec):
    """Up to 8 (voxel index, weight) pairs for a continuous grid point.

    Weights are (1-|dx|)(1-|dy|)(1-|dz|) against the surrounding integer
    corners; zero-weight and out-of-grid corners are dropped, and the
    remaining weights are NOT renormalized.
    """
    p = np.asarray(p_grid, dtype=np.float64).reshape(3)
    base = np.floor(p).astype(np.int64)
    frac = p - base
    out = []
    for corner in range(8):
        off = np.array([(corner >> 2) & 1, (corner >> 1) & 1, corner & 1])
        idx = base + off
        w = float(np.prod(np.where(off == 1, frac, 1.0 - frac)))
        if w <= 0.0:
            continue
        if np.any(idx < 0) or np.any(idx >= spec.edge):
            continue
        out.append(((int(idx[0]), int(idx[1]), int(idx[2])), w))
    return out


def splat_view(view: ViewObservation, spec: GridSpec) -> SplatAccumulator:
    """Accumulate every patch feature into its 8 neighboring voxels."""
    acc = SplatAccumulator.zeros(spec, view.channels)
    feats = view.patch_features.reshape(view.channels, -1).T  # (P, C)
    centers, ok = _all_patch_centers(view)
    for i in np.nonzero(ok)[0]:
        p_grid = canonical_to_grid(centers[i], spec)
        for (ix, iy, iz), w in trilinear_weights(p_grid, spec):
            acc.feature_sum[:, ix, iy, iz] += w * feats[i]
            acc.weight_sum[ix, iy, iz] += w
    return acc


def normalize_view(acc: SplatAccumulator, eps: float = FUSION_EPS) -> FeatureVolume:
    """Per-view voxel features: feature_sum / (weight_sum + eps)."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    out = acc.feature_sum / (acc.weight_sum[None] + eps)
    return FeatureVolume(acc.spec, acc.feature_sum.shape[0], out.astype(np.float32))


def tsdf_filter(feat: FeatureVolume, weights: np.ndarray, gt: TsdfVolume):
    """Zero features and weights outside the reference surface (TSDF > 0)."""
    if feat.spec.shape != gt.spec.shape or weights.shape != gt.spec.shape:
        raise ValueError("tsdf_filter: shape mismatch")
    inside = (gt.values <= 0.0).astype(np.float64)
    filtered = FeatureVolume(feat.spec, feat.channels, feat.values * inside[None].astype(np.float32))
    return filtered, np.asarray(weights, dtype=np.float64) * inside


def fuse_views(per_view, eps: float = FUSION_EPS) -> FeatureVolume:
    """Weighted average across views of (FeatureVolume, weight field) pairs."""
    per_view = list(per_view)
    if not per_view:
        raise ValueError("fuse_views needs at least one view")
    spec = per_view[0][0].spec
    channels = per_view[0][0].channels
    num = np.zeros((channels,) + spec.shape)
    den = np.zeros(spec.shape)
    for feat, wt in per_view:
        if feat.spec.shape != spec.shape or feat.channels != channels:
            raise ValueError("fuse_views: inconsistent view shapes")
        wt = np.asarray(wt, dtype=np.float64)
        num += wt[None] * feat.values
        den += wt
    return FeatureVolume(spec, channels, (num / (den[None] + eps)).astype(np.float32))


def coverage_mask(acc: SplatAccumulator) -> MaskVolume:
    """Binary mask of voxels that received any splatted weight."""
    return MaskVolume(acc.spec, (acc.weight_sum > 0.0).astype(np.float32))


def incomplete_target(fgt: FeatureVolume, cov: MaskVolume) -> FeatureVolume:
    """Zero fused features outside the coverage mask."""
    if fgt.spec.shape != cov.spec.shape:
        raise ValueError("incomplete_target: shape mismatch")
    return FeatureVolume(fgt.spec, fgt.channels, fgt.values * cov.values[None])


def save_camera(path, cam: CameraParams, patch_size: int, width: int, height: int) -> None:
    """Camera JSON: K and R row-major, plus raster geometry."""
    obj = {
        "K": [float(v) for v in cam.intrinsics.reshape(-1)],
        "R": [float(v) for v in cam.rotation.reshape(-1)],
        "t": [float(v) for v in cam.translation],
        "patch_size": int(patch_size),
        "width": int(width),
        "height": int(height),
    }
    with open(path, "w") as f:
        json.dump(obj, f, indent=1)


def load_camera(path):
    """Returns (CameraParams, patch_size, width, height)."""
    with open(path) as f:
        obj = json.load(f)
    cam = CameraParams(
        np.array(obj["K"], dtype=np.float64).reshape(3, 3),
        np.array(obj["R"], dtype=np.float64).reshape(3, 3),
        np.array(obj["t"], dtype=np.float64),
    )
    return cam, int(obj["patch_size"]), int(obj["width"]), int(obj["height"])
