"""Metrics against brute-force oracles; PCA colorization properties."""

import numpy as np
import pytest

from voxcomplete import metrics, viz
from voxcomplete.volumes import FeatureVolume, GridSpec, MaskVolume, TsdfVolume


def vol_from_occupied(spec, occupied_idx):
    vals = np.full(spec.shape, 3.0, np.float32)
    for idx in occupied_idx:
        vals[idx] = -1.0
    return TsdfVolume(spec, vals)


def test_iou_examples():
    spec = GridSpec(8)
    a = vol_from_occupied(spec, [(0, 0, 0), (1, 1, 1), (2, 2, 2), (3, 3, 3)])
    assert metrics.iou(a, a) == 1.0
    b = vol_from_occupied(spec, [(5, 5, 5)])
    assert metrics.iou(a, b) == 0.0
    c = vol_from_occupied(spec, [(0, 0, 0), (1, 1, 1)])
    assert metrics.iou(c, a) == pytest.approx(0.5)
    empty = vol_from_occupied(spec, [])
    assert metrics.iou(empty, empty) == 1.0  # empty union counts as 1


def test_iou_symmetry():
    rng = np.random.default_rng(0)
    spec = GridSpec(8)
    a = TsdfVolume(spec, np.clip(rng.normal(size=(8,) * 3), -3, 3).astype(np.float32))
    b = TsdfVolume(spec, np.clip(rng.normal(size=(8,) * 3), -3, 3).astype(np.float32))
    assert metrics.iou(a, b) == metrics.iou(b, a)


def test_chamfer_examples():
    spec = GridSpec(8)
    a = vol_from_occupied(spec, [(1, 1, 1), (4, 4, 4)])
    assert metrics.chamfer(a, a) == 0.0
    b = vol_from_occupied(spec, [(1, 1, 3)])
    c = vol_from_occupied(spec, [(1, 1, 1)])
    assert metrics.chamfer(b, c) == pytest.approx(2.0)
    with pytest.raises(ValueError):
        metrics.chamfer(vol_from_occupied(spec, []), a)


def test_chamfer_matches_brute_force_oracle():
    rng = np.random.default_rng(1)
    spec = GridSpec(16)
    for _ in range(5):
        a = TsdfVolume(spec, np.where(rng.random((16,) * 3) < 0.02, -1.0, 3.0).astype(np.float32))
        b = TsdfVolume(spec, np.where(rng.random((16,) * 3) < 0.02, -1.0, 3.0).astype(np.float32))
        if (a.values <= 0).sum() == 0 or (b.values <= 0).sum() == 0:
            continue
        pa = np.argwhere(a.values <= 0).astype(float)
        pb = np.argwhere(b.values <= 0).astype(float)
        d = np.linalg.norm(pa[:, None] - pb[None], axis=-1)
        ref = 0.5 * (d.min(axis=1).mean() + d.min(axis=0).mean())
        assert metrics.chamfer(a, b) == pytest.approx(ref, abs=1e-9)
        assert metrics.chamfer(a, b) == metrics.chamfer(b, a)


def test_l1_examples():
    spec = GridSpec(8)
    a = TsdfVolume(spec, np.zeros((8,) * 3, np.float32))
    assert metrics.l1_error(a, a) == 0.0
    b = TsdfVolume(spec, np.full((8,) * 3, 3.0, np.float32))
    assert metrics.l1_error(b, a) == pytest.approx(1.0)  # off by truncation everywhere
    rng = np.random.default_rng(2)
    x = np.clip(rng.normal(size=(8,) * 3), -3, 3).astype(np.float32)
    y = np.clip(rng.normal(size=(8,) * 3), -3, 3).astype(np.float32)
    got = metrics.l1_error(TsdfVolume(spec, x), TsdfVolume(spec, y))
    assert got == pytest.approx(float(np.abs(x / 3 - y / 3).mean()), rel=1e-6)


def test_spec_mismatch_rejected():
    a = TsdfVolume(GridSpec(8), np.zeros((8,) * 3, np.float32))
    b = TsdfVolume(GridSpec(16), np.zeros((16,) * 3, np.float32))
    with pytest.raises(ValueError):
        metrics.iou(a, b)
    with pytest.raises(ValueError):
        metrics.l1_error(a, b)


def test_eval_report_aggregates_and_csv():
    rep = metrics.EvalReport(config={"run": "x"})
    rep.add("s1", "train", 1.0, 0.5, 0.1)
    rep.add("s2", "val", 3.0, 0.7, 0.3)
    agg = rep.aggregates()
    assert agg["all"]["count"] == 2
    assert agg["all"]["cd"] == pytest.approx(2.0)
    assert agg["val"]["iou"] == pytest.approx(0.7)
    assert "id,split,cd,iou,l1" in rep.to_csv()
    with pytest.raises(ValueError):
        rep.add("bad", "train", -1.0, 0.5, 0.1)


def _mask_all(spec):
    return MaskVolume(spec, np.ones(spec.shape, np.float32))


def test_pca_constant_features_degenerate_path():
    spec = GridSpec(4)
    feat = FeatureVolume(spec, 5, np.full((5, 4, 4, 4), 2.0, np.float32))
    rgb = viz.pca_colorize(feat, _mask_all(spec))
    assert rgb.shape == (3, 4, 4, 4)
    assert np.all(rgb == 0.5)  # rank-0: every channel pads at 0.5


def test_pca_recovers_orthogonal_axes():
    rng = np.random.default_rng(3)
    spec = GridSpec(4)
    # features live exactly on 3 orthogonal axes with distinct variances
    scores = rng.normal(size=(64, 3)) * np.array([4.0, 2.0, 1.0])
    basis_true = np.eye(5)[:3]  # axes 0,1,2 of a 5-dim space
    x = scores @ basis_true
    feat = FeatureVolume(spec, 5, x.T.reshape(5, 4, 4, 4).astype(np.float32))
    basis = viz.fit_pca([(feat, _mask_all(spec))])
    assert basis.rank == 3
    # eigen-decomposition oracle on the same sample covariance: each
    # component matches the corresponding eigenvector up to sign
    x32 = x.astype(np.float32).astype(np.float64)  # storage precision
    cov = np.cov(x32.T)
    evals, evecs = np.linalg.eigh(cov)
    top = evecs[:, np.argsort(evals)[::-1][:3]].T
    overlap = np.abs(np.sum(basis.components * top, axis=1))
    assert np.allclose(overlap, 1.0, atol=1e-6)
    # components carry the top eigenvalues as projected variances
    proj_var = np.var(x32 @ basis.components.T, axis=0, ddof=1)
    assert np.allclose(proj_var, np.sort(evals)[::-1][:3], rtol=1e-6)
    # and the recovered directions live in the generating subspace
    assert np.abs(basis.components @ basis_true.T).max() > 0.9


def test_pca_shared_fit_equals_joint_projection():
    rng = np.random.default_rng(4)
    spec = GridSpec(4)
    fa = FeatureVolume(spec, 6, rng.normal(size=(6, 4, 4, 4)).astype(np.float32))
    fb = FeatureVolume(spec, 6, rng.normal(size=(6, 4, 4, 4)).astype(np.float32))
    mask = _mask_all(spec)
    shared = viz.fit_pca([(fa, mask), (fb, mask)])
    rgb_shared = viz.apply_pca(shared, fa, mask)
    rgb_again = viz.apply_pca(shared, fa, mask)
    assert np.array_equal(rgb_shared, rgb_again)
    assert rgb_shared.min() >= 0.0 and rgb_shared.max() <= 1.0


def test_pca_rotation_invariance_up_to_sign():
    rng = np.random.default_rng(5)
    spec = GridSpec(4)
    x = rng.normal(size=(64, 6)) * np.array([5, 3, 2, 0.5, 0.2, 0.1])
    q, _ = np.linalg.qr(rng.normal(size=(6, 6)))
    fa = FeatureVolume(spec, 6, x.T.reshape(6, 4, 4, 4).astype(np.float32))
    fb = FeatureVolume(spec, 6, (x @ q.T).T.reshape(6, 4, 4, 4).astype(np.float32))
    mask = _mask_all(spec)
    rgb_a = viz.apply_pca(viz.fit_pca([(fa, mask)]), fa, mask)
    rgb_b = viz.apply_pca(viz.fit_pca([(fb, mask)]), fb, mask)
    for c in range(3):
        direct = np.abs(rgb_a[c] - rgb_b[c]).max()
        flipped = np.abs(rgb_a[c] - (1.0 - rgb_b[c])).max()
        assert min(direct, flipped) < 1e-4


def test_pca_needs_enough_voxels():
    spec = GridSpec(4)
    feat = FeatureVolume(spec, 4, np.zeros((4, 4, 4, 4), np.float32))
    mask = MaskVolume(spec, np.zeros((4, 4, 4), np.float32))
    with pytest.raises(ValueError):
        viz.fit_pca([(feat, mask)])
