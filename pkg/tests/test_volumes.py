import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from voxcomplete.volumes import (
    FeatureVolume,
    GridSpec,
    MaskVolume,
    TsdfVolume,
    canonical_to_grid,
    grid_to_canonical,
    occupancy,
)


def test_gridspec_validation():
    GridSpec(32)
    with pytest.raises(ValueError):
        GridSpec(12)  # not a power of two
    with pytest.raises(ValueError):
        GridSpec(1)
    with pytest.raises(ValueError):
        GridSpec(8, origin_min=(0.5, -0.5, -0.5), origin_max=(0.5, 0.5, 0.5))
    with pytest.raises(ValueError):
        GridSpec(8, truncation=0.0)


def test_tsdf_bounds_checked():
    spec = GridSpec(4, truncation=2.0)
    TsdfVolume(spec, np.full((4, 4, 4), 2.0, np.float32))
    with pytest.raises(ValueError):
        TsdfVolume(spec, np.full((4, 4, 4), 2.5, np.float32))
    with pytest.raises(ValueError):
        TsdfVolume(spec, np.zeros((4, 4, 2), np.float32))


def test_volumes_are_immutable():
    spec = GridSpec(4)
    vol = TsdfVolume(spec, np.zeros((4, 4, 4), np.float32))
    with pytest.raises(ValueError):
        vol.values[0, 0, 0] = 1.0


def test_feature_volume_shape_and_finiteness():
    spec = GridSpec(4)
    FeatureVolume(spec, 3, np.zeros((3, 4, 4, 4), np.float32))
    with pytest.raises(ValueError):
        FeatureVolume(spec, 2, np.zeros((3, 4, 4, 4), np.float32))
    bad = np.zeros((3, 4, 4, 4), np.float32)
    bad[0, 0, 0, 0] = np.inf
    with pytest.raises(ValueError):
        FeatureVolume(spec, 3, bad)


def test_mask_volume_range():
    spec = GridSpec(4)
    m = MaskVolume(spec, np.full((4, 4, 4), 0.5, np.float32))
    assert not m.is_binary
    assert MaskVolume(spec, np.ones((4, 4, 4), np.float32)).is_binary
    with pytest.raises(ValueError):
        MaskVolume(spec, np.full((4, 4, 4), 1.5, np.float32))


def test_occupancy_examples():
    spec = GridSpec(8)
    t = spec.truncation
    assert occupancy(TsdfVolume(spec, np.full((8,) * 3, t, np.float32))).values.sum() == 0
    assert occupancy(TsdfVolume(spec, np.full((8,) * 3, -t, np.float32))).values.sum() == 8**3
    vals = np.full((8,) * 3, 3.0, np.float32)
    vals[1, 2, 3] = 0.0  # boundary is inclusive
    mask = occupancy(TsdfVolume(spec, vals))
    assert mask.values.sum() == 1
    assert mask.values[1, 2, 3] == 1


def test_occupancy_sign_partition_property():
    rng = np.random.default_rng(0)
    spec = GridSpec(8)
    vol = TsdfVolume(spec, np.clip(rng.normal(size=(8,) * 3), -3, 3).astype(np.float32))
    mask = occupancy(vol).values
    assert np.array_equal(mask == 1.0, vol.values <= 0.0)


def test_canonical_to_grid_corners_and_center():
    spec = GridSpec(32)
    assert np.allclose(canonical_to_grid((-0.5, -0.5, -0.5), spec), (0, 0, 0))
    assert np.allclose(canonical_to_grid((0.5, 0.5, 0.5), spec), (31, 31, 31))
    assert np.allclose(canonical_to_grid((0.0, 0.0, 0.0), spec), (15.5, 15.5, 15.5))


@settings(max_examples=50, deadline=None)
@given(
    st.tuples(*[st.floats(-0.5, 0.5, allow_nan=False) for _ in range(3)]),
    st.sampled_from([2, 8, 32]),
)
def test_canonical_grid_inverse_property(p, edge):
    spec = GridSpec(edge)
    back = grid_to_canonical(canonical_to_grid(np.array(p), spec), spec)
    assert np.abs(back - np.array(p)).max() < 1e-12


def test_canonical_to_grid_monotone_affine():
    spec = GridSpec(16)
    a = canonical_to_grid((0.1, 0.0, 0.0), spec)
    b = canonical_to_grid((0.2, 0.0, 0.0), spec)
    assert b[0] > a[0]
    # out-of-box points land out of range rather than clipping
    assert canonical_to_grid((0.7, 0.0, 0.0), spec)[0] > spec.edge - 1
