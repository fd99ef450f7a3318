"""Procedural ground truth: analytic TSDFs, a virtual scanner, and a
deterministic part-semantic teacher.

Shapes are unions (pointwise min of signed distances) of labeled
primitives inside the canonical box. The scanner sphere-traces one view
to a depth raster and integrates it into a partial TSDF: observed free
space is positive, the band around an observed surface carries the
signed distance, and everything behind a surface (or outside the
frustum) collapses to -truncation, the occluded-interior convention.
The teacher assigns each part label a fixed unit-norm embedding drawn
from a seeded generator; embeddings are re-drawn (deterministically)
until all pairs satisfy |cos| < 0.5, and rendered views carry per-patch
means of the hit labels' embeddings.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from . import fusion as fu
from .volumes import FeatureVolume, GridSpec, MaskVolume, TsdfVolume
from .vxl_io import KIND_FEATURE, write_raster, write_volume

__all__ = [
    "Sphere",
    "Box",
    "Cylinder",
    "ShapeProgram",
    "TeacherOracle",
    "analytic_tsdf",
    "virtual_scan",
    "render_teacher_view",
    "build_sample",
    "generate_dataset",
    "fibonacci_cameras",
    "look_at_camera",
    "default_intrinsics",
]

PART_LABELS = ("sphere", "box", "cylinder")


@dataclass(frozen=True)
class Sphere:
    center: tuple
    radius: float
    label: str = "sphere"

    def sdf(self, p: np.ndarray) -> np.ndarray:
        return np.linalg.norm(p - np.asarray(self.center), axis=-1) - self.radius


@dataclass(frozen=True)
class Box:
    center: tuple
    half_extents: tuple
    label: str = "box"

    def sdf(self, p: np.ndarray) -> np.ndarray:
        q = np.abs(p - np.asarray(self.center)) - np.asarray(self.half_extents)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(q.max(axis=-1), 0.0)
        return outside + inside


@dataclass(frozen=True)
class Cylinder:
    """Capped cylinder along one coordinate axis."""

    axis: int
    center: tuple
    radius: float
    half_height: float
    label: str = "cylinder"

    def sdf(self, p: np.ndarray) -> np.ndarray:
        rel = p - np.asarray(self.center)
        along = rel[..., self.axis]
        radial = np.delete(rel, self.axis, axis=-1)
        d_r = np.linalg.norm(radial, axis=-1) - self.radius
        d_h = np.abs(along) - self.half_height
        outside = np.sqrt(np.maximum(d_r, 0.0) ** 2 + np.maximum(d_h, 0.0) ** 2)
        inside = np.minimum(np.maximum(d_r, d_h), 0.0)
        return outside + inside


@dataclass(frozen=True)
class ShapeProgram:
    """Union-of-primitives shape; distances compose by pointwise min."""

    primitives: tuple

    def __post_init__(self):
        if len(self.primitives) == 0:
            raise ValueError("a shape program needs at least one primitive")

    def sdf(self, p: np.ndarray) -> np.ndarray:
        return np.min(self.member_sdf(p), axis=0)

    def member_sdf(self, p: np.ndarray) -> np.ndarray:
        return np.stack([prim.sdf(p) for prim in self.primitives], axis=0)

    def nearest_part(self, p: np.ndarray) -> np.ndarray:
        """Index of the closest primitive at each point."""
        return np.argmin(self.member_sdf(p), axis=0)

    @property
    def labels(self):
        return tuple(prim.label for prim in self.primitives)


class TeacherOracle:
    """Label -> fixed unit-norm embedding, deterministic given the seed.

    Embeddings are drawn for the whole label universe up front; if any
    pair has |cosine| >= 0.5 the draw is retried with an internal salt,
    so regeneration is itself deterministic.
    """

    def __init__(self, seed: int, feat_dim: int = 16, labels=PART_LABELS, max_cos: float = 0.5):
        self.seed = int(seed)
        self.feat_dim = int(feat_dim)
        self.labels = tuple(labels)
        for salt in range(1000):
            rng = np.random.default_rng([self.seed, 0x7EAC, salt])
            vecs = rng.normal(size=(len(self.labels), feat_dim))
            vecs /= np.linalg.norm(vecs, axis=1, keepdims=True)
            gram = np.abs(vecs @ vecs.T - np.eye(len(self.labels)))
            if gram.max() < max_cos:
                break
        else:
            raise RuntimeError("could not draw separated embeddings")
        self._table = {lab: vecs[i] for i, lab in enumerate(self.labels)}

    def embedding(self, label: str) -> np.ndarray:
        return self._table[label]


def analytic_tsdf(prog: ShapeProgram, spec: GridSpec) -> TsdfVolume:
    """Exact union signed distance at voxel centers, in voxel units, clamped."""
    centers = spec.voxel_centers().reshape(spec.shape + (3,))
    vs = float(spec.voxel_size.mean())
    vals = np.clip(prog.sdf(centers) / vs, -spec.truncation, spec.truncation)
    return TsdfVolume(spec, vals.astype(np.float32))


def default_intrinsics(width: int, height: int) -> np.ndarray:
    f = 0.75 * width
    return np.array(
        [[f, 0.0, (width - 1) / 2.0], [0.0, f, (height - 1) / 2.0], [0.0, 0.0, 1.0]]
    )


def look_at_camera(eye, intrinsics: np.ndarray) -> fu.CameraParams:
    """Camera at `eye` looking at the canonical origin."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = -eye / np.linalg.norm(eye)
    up_w = np.array([0.0, 0.0, 1.0])
    if abs(fwd @ up_w) > 0.98:
        up_w = np.array([0.0, 1.0, 0.0])
    right = np.cross(up_w, fwd)
    right /= np.linalg.norm(right)
    up = np.cross(fwd, right)
    world_to_cam = np.stack([right, up, fwd])
    return fu.CameraParams(intrinsics, world_to_cam.T, -world_to_cam @ eye)


def fibonacci_cameras(n_views: int, radius: float = 1.6, width: int = 64, height: int = 64):
    """Object-centered cameras on a Fibonacci sphere."""
    k = default_intrinsics(width, height)
    golden = (1.0 + 5.0**0.5) / 2.0
    cams = []
    for i in range(n_views):
        z = 1.0 - 2.0 * (i + 0.5) / n_views
        r = np.sqrt(max(0.0, 1.0 - z * z))
        theta = 2.0 * np.pi * i / golden
        eye = radius * np.array([r * np.cos(theta), r * np.sin(theta), z])
        cams.append(look_at_camera(eye, k))
    return cams


def _ray_march(prog: ShapeProgram, cam: fu.CameraParams, width: int, height: int,
               max_depth: float = 6.0, hit_eps: float = 1e-4, max_steps: int = 192):
    """Sphere-trace all pixels; returns (depth, part_index) rasters.

    depth is the z-parameter multiplying K^-1 [u, w, 1]; 0 marks misses.
    part_index is -1 on misses.
    """
    uu, ww = np.meshgrid(np.arange(width, dtype=np.float64), np.arange(height, dtype=np.float64))
    uu, ww = uu.reshape(-1), ww.reshape(-1)
    rays = np.stack([uu, ww, np.ones_like(uu)], axis=-1)
    k_inv = np.linalg.inv(cam.intrinsics)
    v = rays @ k_inv.T  # (P, 3) direction per unit depth, camera frame
    v_norm = np.linalg.norm(v, axis=-1)
    r, t = cam.rotation, cam.translation
    origin = r @ (-t)
    dirs = v @ r.T  # point(d) = origin + d * dirs

    d = np.full(uu.shape, 1e-4)
    active = np.ones(uu.shape, dtype=bool)
    hit = np.zeros(uu.shape, dtype=bool)
    for _ in range(max_steps):
        if not active.any():
            break
        pts = origin + d[active, None] * dirs[active]
        s = prog.sdf(pts)
        newly_hit = s < hit_eps
        idx = np.nonzero(active)[0]
        hit[idx[newly_hit]] = True
        step = np.maximum(s, hit_eps) / v_norm[active]
        d[active] = d[active] + np.where(newly_hit, 0.0, step)
        still = ~newly_hit & (d[active] <= max_depth)
        active[idx] = still
    depth = np.where(hit, d, 0.0).reshape(height, width)
    part = np.full(uu.shape, -1, dtype=np.int64)
    if hit.any():
        pts = origin + d[hit, None] * dirs[hit]
        part[hit] = prog.nearest_part(pts)
    return depth, part.reshape(height, width)


def virtual_scan(prog: ShapeProgram, cam: fu.CameraParams, spec: GridSpec,
                 width: int = 64, height: int = 64):
    """Single-view partial TSDF plus the scanner's depth raster."""
    depth, _ = _ray_march(prog, cam, width, height)
    centers = spec.voxel_centers()  # (G^3, 3)
    y = centers @ cam.rotation + cam.translation  # world -> camera (R^T x + t)
    z = y[:, 2]
    hom = y @ cam.intrinsics.T
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.rint(hom[:, 0] / hom[:, 2]).astype(np.int64)
        w = np.rint(hom[:, 1] / hom[:, 2]).astype(np.int64)
    in_frustum = (z > 0) & (u >= 0) & (u < width) & (w >= 0) & (w < height)
    vals = np.full(centers.shape[0], -spec.truncation)
    ui = np.clip(u, 0, width - 1)
    wi = np.clip(w, 0, height - 1)
    pix_depth = depth[wi, ui]
    vs = float(spec.voxel_size.mean())
    observed = in_frustum & (pix_depth > 0)
    free = in_frustum & (pix_depth == 0)
    vals[free] = spec.truncation
    vals[observed] = np.clip(
        (pix_depth[observed] - z[observed]) / vs, -spec.truncation, spec.truncation
    )
    partial = TsdfVolume(spec, vals.reshape(spec.shape).astype(np.float32))
    return partial, depth


def render_teacher_view(prog: ShapeProgram, cam: fu.CameraParams, oracle: TeacherOracle,
                        patch_size: int = 8, width: int = 64, height: int = 64) -> fu.ViewObservation:
    """Depth raster plus per-patch mean part embeddings for one view."""
    depth, part = _ray_march(prog, cam, width, height)
    c = oracle.feat_dim
    table = np.zeros((len(prog.primitives) + 1, c))
    for i, lab in enumerate(prog.labels):
        table[i] = oracle.embedding(lab)
    pix_feat = table[part]  # (H, W, C); misses hit the zero row (-1)
    hp, wp = height // patch_size, width // patch_size
    valid = (depth > 0).reshape(hp, patch_size, wp, patch_size)
    feat_b = pix_feat.reshape(hp, patch_size, wp, patch_size, c)
    counts = valid.sum(axis=(1, 3))
    sums = (feat_b * valid[..., None]).sum(axis=(1, 3))
    patch_feats = np.where(counts[..., None] > 0, sums / np.maximum(counts[..., None], 1), 0.0)
    return fu.ViewObservation(cam, depth, patch_feats.transpose(2, 0, 1), patch_size)


def fuse_teacher_views(views, gt: TsdfVolume, eps: float = fu.FUSION_EPS):
    """Appendix-style fusion of rendered views against a reference TSDF.

    Returns (fused features, validity mask, per-view raw accumulators).
    """
    per_view = []
    accs = []
    total_w = np.zeros(gt.spec.shape)
    for view in views:
        acc = fu.splat_view(view, gt.spec)
        accs.append(acc)
        g_v = fu.normalize_view(acc, eps)
        g_f, w_f = fu.tsdf_filter(g_v, acc.weight_sum, gt)
        per_view.append((g_f, w_f))
        total_w += w_f
    fused = fu.fuse_views(per_view, eps)
    validity = MaskVolume(gt.spec, (total_w > 0).astype(np.float32))
    return fused, validity, accs


def build_sample(prog: ShapeProgram, spec: GridSpec, oracle: TeacherOracle,
                 n_views: int = 20, input_view: int = 0, width: int = 64,
                 height: int = 64, patch_size: int = 8):
    """Full data record for one shape.

    Returns a dict with partial/gt TSDFs, fused and coverage-limited
    teacher features, the validity mask, and the rendered views.
    """
    if n_views < 1:
        raise ValueError("need at least one view")
    cams = fibonacci_cameras(n_views, width=width, height=height)
    gt = analytic_tsdf(prog, spec)
    views = [
        render_teacher_view(prog, cam, oracle, patch_size, width, height) for cam in cams
    ]
    fused, validity, accs = fuse_teacher_views(views, gt)
    partial, _ = virtual_scan(prog, cams[input_view], spec, width, height)
    cov = fu.coverage_mask(accs[input_view])
    inc = fu.incomplete_target(fused, cov)
    return {
        "partial": partial,
        "gt": gt,
        "dino_gt": fused,
        "dino_inc": inc,
        "mask": validity,
        "views": views,
        "coverage": cov,
    }


# --------------------------------------------------------------------------
# Dataset generation
# --------------------------------------------------------------------------

TRAIN_COMBOS = (
    ("sphere",),
    ("box",),
    ("cylinder",),
    ("sphere", "box"),
    ("sphere", "cylinder"),
)
UNSEEN_COMBOS = (
    ("box", "cylinder"),
    ("sphere", "box", "cylinder"),
)


def _sample_primitive(kind: str, rng: np.random.Generator):
    center = tuple(rng.uniform(-0.18, 0.18, size=3))
    if kind == "sphere":
        return Sphere(center, float(rng.uniform(0.12, 0.3)))
    if kind == "box":
        return Box(center, tuple(rng.uniform(0.1, 0.26, size=3)))
    if kind == "cylinder":
        return Cylinder(
            int(rng.integers(0, 3)),
            center,
            float(rng.uniform(0.1, 0.2)),
            float(rng.uniform(0.14, 0.3)),
        )
    raise ValueError(f"unknown primitive kind {kind!r}")


def sample_program(rng: np.random.Generator, combos=TRAIN_COMBOS) -> ShapeProgram:
    combo = combos[int(rng.integers(0, len(combos)))]
    return ShapeProgram(tuple(_sample_primitive(kind, rng) for kind in combo))


def _save_views(sample_dir: str, views) -> None:
    vdir = os.path.join(sample_dir, "views")
    os.makedirs(vdir, exist_ok=True)
    for i, view in enumerate(views):
        h, w = view.depth.shape
        fu.save_camera(os.path.join(vdir, f"view_{i:02d}.json"), view.camera, view.patch_size, w, h)
        write_raster(os.path.join(vdir, f"view_{i:02d}_depth.vxl"), view.depth[None].astype(np.float32), KIND_FEATURE)
        write_raster(os.path.join(vdir, f"view_{i:02d}_feat.vxl"), view.patch_features[:, None].astype(np.float32), KIND_FEATURE)


def generate_dataset(out_dir: str, n_samples: int, seed: int, n_views: int = 20,
                     edge: int = 32, truncation: float = 3.0, feat_dim: int = 16,
                     splits=(0.8, 0.1, 0.1), width: int = 64, height: int = 64,
                     patch_size: int = 8, save_views: bool = False) -> list[dict]:
    """Write n_samples sample directories, a manifest, and a dataset sidecar.

    Train and val-seen samples draw from TRAIN_COMBOS; val-unseen samples
    use primitive combinations never seen in training. Deterministic for
    a fixed seed, including file bytes.
    """
    os.makedirs(out_dir, exist_ok=True)
    spec = GridSpec(edge, truncation=truncation)
    oracle = TeacherOracle(seed, feat_dim)
    n_train = int(round(splits[0] * n_samples))
    n_seen = int(round(splits[1] * n_samples))
    manifest = []
    for i in range(n_samples):
        if i < n_train:
            split, combos = "train", TRAIN_COMBOS
        elif i < n_train + n_seen:
            split, combos = "val-seen", TRAIN_COMBOS
        else:
            split, combos = "val-unseen", UNSEEN_COMBOS
        rng = np.random.default_rng([seed, i])
        prog = sample_program(rng, combos)
        input_view = int(rng.integers(0, n_views))
        sample = build_sample(prog, spec, oracle, n_views, input_view, width, height, patch_size)
        sid = f"sample_{i:04d}"
        sdir = os.path.join(out_dir, sid)
        os.makedirs(sdir, exist_ok=True)
        files = {}
        for key in ("partial", "gt", "dino_gt", "dino_inc", "mask"):
            rel = os.path.join(sid, f"{key}.vxl")
            write_volume(os.path.join(out_dir, rel), sample[key])
            files[key] = rel
        if save_views:
            _save_views(sdir, sample["views"])
        manifest.append({"id": sid, "files": files, "split": split})
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=1)
    with open(os.path.join(out_dir, "dataset.json"), "w") as f:
        json.dump(
            {
                "edge": edge,
                "truncation": truncation,
                "feat_dim": feat_dim,
                "n_views": n_views,
                "seed": seed,
                "patch_size": patch_size,
                "raster": [height, width],
            },
            f,
            indent=1,
        )
    return manifest


def load_manifest(path: str):
    with open(path) as f:
        manifest = json.load(f)
    base = os.path.dirname(os.path.abspath(path))
    return manifest, base
