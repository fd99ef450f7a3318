"""Completion metrics: occupancy IoU, Chamfer distance, normalized l1."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .volumes import TsdfVolume, occupancy

__all__ = ["iou", "chamfer", "l1_error", "EvalReport"]


def _check_specs(pred: TsdfVolume, gt: TsdfVolume):
    if pred.spec.shape != gt.spec.shape:
        raise ValueError(f"spec mismatch: {pred.spec.shape} vs {gt.spec.shape}")


def iou(pred: TsdfVolume, gt: TsdfVolume) -> float:
    """Occupancy intersection-over-union; an empty union counts as 1."""
    _check_specs(pred, gt)
    p = occupancy(pred).values > 0
    g = occupancy(gt).values > 0
    union = np.logical_or(p, g).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p, g).sum() / union)


def _occupied_points(vol: TsdfVolume) -> np.ndarray:
    return np.argwhere(vol.values <= 0.0).astype(np.float64)


def chamfer(pred: TsdfVolume, gt: TsdfVolume) -> float:
    """Symmetric mean nearest-neighbor distance between occupied voxel
    centers, in voxel units."""
    _check_specs(pred, gt)
    p = _occupied_points(pred)
    g = _occupied_points(gt)
    if len(p) == 0 or len(g) == 0:
        raise ValueError("chamfer needs at least one occupied voxel on each side")
    d_pg = cKDTree(g).query(p)[0]
    d_gp = cKDTree(p).query(g)[0]
    return float(0.5 * (d_pg.mean() + d_gp.mean()))


def l1_error(pred: TsdfVolume, gt: TsdfVolume) -> float:
    """Mean absolute TSDF difference, values normalized by truncation."""
    _check_specs(pred, gt)
    t = gt.spec.truncation
    return float(np.abs(pred.values / t - gt.values / t).mean())


@dataclass
class EvalReport:
    """Per-sample metrics plus per-split aggregates."""

    config: dict = field(default_factory=dict)
    samples: list = field(default_factory=list)

    def add(self, sample_id: str, split: str, cd: float, iou_val: float, l1: float) -> None:
        if not (0.0 <= iou_val <= 1.0) or cd < 0 or l1 < 0:
            raise ValueError("metric out of range")
        self.samples.append(
            {"id": sample_id, "split": split, "cd": cd, "iou": iou_val, "l1": l1}
        )

    def aggregates(self) -> dict:
        out = {}
        splits = sorted({s["split"] for s in self.samples})
        for split in splits + ["all"]:
            rows = [s for s in self.samples if split == "all" or s["split"] == split]
            if not rows:
                continue
            out[split] = {
                "count": len(rows),
                "cd": float(np.mean([r["cd"] for r in rows])),
                "iou": float(np.mean([r["iou"] for r in rows])),
                "l1": float(np.mean([r["l1"] for r in rows])),
            }
        return out

    def to_json(self) -> str:
        return json.dumps(
            {"config": self.config, "aggregates": self.aggregates(), "samples": self.samples},
            indent=1,
        )

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=["id", "split", "cd", "iou", "l1"])
        writer.writeheader()
        for row in self.samples:
            writer.writerow(row)
        return buf.getvalue()
