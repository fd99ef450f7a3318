"""PCA projection of feature volumes into RGB for inspection.

A basis can be fit on one set of (features, mask) pairs and applied to
others, so predicted and reference volumes share an embedding and are
directly comparable. Components beyond the feature rank are padded with
a flat 0.5 channel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .volumes import FeatureVolume, MaskVolume

__all__ = ["PcaBasis", "fit_pca", "pca_colorize"]

_RANK_TOL = 1e-10


@dataclass(frozen=True)
class PcaBasis:
    mean: np.ndarray       # (C,)
    components: np.ndarray  # (3, C); zero rows beyond the rank
    rank: int


def _masked_voxels(feat: FeatureVolume, mask: MaskVolume) -> np.ndarray:
    if feat.spec.shape != mask.spec.shape:
        raise ValueError("feature/mask shape mismatch")
    sel = mask.values > 0
    return feat.values.reshape(feat.channels, -1)[:, sel.reshape(-1)].T.astype(np.float64)


def fit_pca(pairs) -> PcaBasis:
    """Top-3 principal directions of the pooled masked voxel features."""
    rows = [_masked_voxels(f, m) for f, m in pairs]
    x = np.concatenate(rows, axis=0)
    if x.shape[0] < 3:
        raise ValueError("need at least 3 masked voxels to fit a PCA basis")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / max(1, x.shape[0] - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    rank = int((evals > _RANK_TOL * max(1.0, float(evals[0]))).sum()) if evals[0] > 0 else 0
    rank = min(rank, 3)
    comps = np.zeros((3, x.shape[1]))
    comps[:rank] = evecs[:, :rank].T
    return PcaBasis(mean, comps, rank)


def apply_pca(basis: PcaBasis, feat: FeatureVolume, mask: MaskVolume) -> np.ndarray:
    """(3, G, G, G) RGB volume in [0, 1]; voxels outside the mask are 0.

    Each recovered component is min-max normalized over the masked voxels;
    components beyond the basis rank render as flat 0.5.
    """
    sel = mask.values > 0
    flat_sel = sel.reshape(-1)
    x = feat.values.reshape(feat.channels, -1).T.astype(np.float64)
    proj = (x - basis.mean) @ basis.components.T  # (V, 3)
    rgb = np.zeros((3,) + feat.spec.shape)
    rgb_flat = rgb.reshape(3, -1)
    for c in range(3):
        if c >= basis.rank:
            rgb_flat[c, flat_sel] = 0.5
            continue
        vals = proj[flat_sel, c]
        lo, hi = vals.min(), vals.max()
        rgb_flat[c, flat_sel] = (vals - lo) / (hi - lo) if hi > lo else 0.5
    return rgb


def pca_colorize(feat: FeatureVolume, mask: MaskVolume, basis: PcaBasis | None = None) -> np.ndarray:
    """Fit (unless a shared basis is supplied) and project one volume."""
    if basis is None:
        basis = fit_pca([(feat, mask)])
    return apply_pca(basis, feat, mask)
