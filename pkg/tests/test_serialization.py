"""Hilbert order and chunk rearrangement tests.

The independent oracle transcodes in the opposite direction (coords ->
sequence index via the published axes-to-transpose algorithm) and must
invert the build for every cell; edge 2 is additionally pinned to the
hand-derived Gray-code path of this variant.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from voxcomplete.serialization import (
    ChunkLayout,
    chunkify,
    chunkify_array,
    hilbert_build,
    hilbert_index_of,
    serialize,
    deserialize,
    unchunkify,
    unchunkify_array,
)
from voxcomplete.volumes import FeatureVolume, GridSpec

EDGE2_ORDER = [
    (0, 0, 0), (0, 0, 1), (0, 1, 1), (0, 1, 0),
    (1, 1, 0), (1, 1, 1), (1, 0, 1), (1, 0, 0),
]


def test_edge2_matches_frozen_table():
    fwd = hilbert_build(2).forward
    assert [tuple(c) for c in fwd] == EDGE2_ORDER


@pytest.mark.parametrize("edge", [2, 4, 8, 16, 32])
def test_bijection_and_unit_steps(edge):
    order = hilbert_build(edge)
    assert len(np.unique(order.forward_flat)) == edge**3
    steps = np.abs(np.diff(order.forward, axis=0)).sum(axis=1)
    assert np.all(steps == 1)
    assert tuple(order.forward[0]) == (0, 0, 0)


@pytest.mark.parametrize("edge", [2, 4, 8])
def test_independent_transcode_oracle(edge):
    order = hilbert_build(edge)
    back = hilbert_index_of(order.forward, edge)
    assert np.array_equal(back, np.arange(edge**3))


def test_forward_inverse_composition_edge4():
    order = hilbert_build(4)
    assert np.array_equal(order.inverse_flat[order.forward_flat], np.arange(64))
    assert np.array_equal(order.forward_flat[order.inverse_flat], np.arange(64))


def test_non_power_of_two_rejected():
    with pytest.raises(ValueError):
        hilbert_build(12)
    with pytest.raises(ValueError):
        hilbert_build(1)


def _adjacent_pair_gaps(seq_of_voxel, edge):
    """|sequence position difference| over all face-adjacent voxel pairs."""
    seq = seq_of_voxel.reshape(edge, edge, edge).astype(np.int64)
    gaps = []
    for axis in range(3):
        a = np.moveaxis(seq, axis, 0)
        gaps.append(np.abs(a[1:] - a[:-1]).reshape(-1))
    return np.concatenate(gaps)


def test_hilbert_locality_distribution_beats_raster():
    # The gap distribution of the Hilbert order stochastically dominates
    # raster's except in a thin far tail: median and 90th percentile are
    # far smaller, and walking the sequence moves Manhattan distance 1
    # per step where raster averages ~2. (The plain mean is NOT smaller:
    # see the acceptance module, where the literal spec gate is scored.)
    edge = 32
    h = _adjacent_pair_gaps(hilbert_build(edge).inverse_flat, edge)
    r = _adjacent_pair_gaps(np.arange(edge**3), edge)
    assert np.median(h) < np.median(r)
    assert np.percentile(h, 90) < np.percentile(r, 90)


def test_hilbert_walk_stays_local_raster_walk_does_not():
    edge = 32
    order = hilbert_build(edge)
    h_steps = np.abs(np.diff(order.forward, axis=0)).sum(axis=1)
    coords = np.stack(np.unravel_index(np.arange(edge**3), (edge,) * 3), axis=1)
    r_steps = np.abs(np.diff(coords, axis=0)).sum(axis=1)
    assert h_steps.mean() < r_steps.mean()
    assert h_steps.max() == 1


def _random_volume(rng, channels, edge):
    spec = GridSpec(edge)
    vals = rng.normal(size=(channels, edge, edge, edge)).astype(np.float32)
    return FeatureVolume(spec, channels, vals)


def test_serialize_constant_volume():
    spec = GridSpec(4)
    vol = FeatureVolume(spec, 2, np.full((2, 4, 4, 4), 5.0, np.float32))
    seq = serialize(vol, hilbert_build(4))
    assert seq.shape == (64, 2)
    assert np.all(seq == 5.0)


def test_serialize_roundtrip_and_gather_oracle():
    rng = np.random.default_rng(0)
    vol = _random_volume(rng, 3, 8)
    order = hilbert_build(8)
    seq = serialize(vol, order)
    # naive gather oracle
    flat = vol.values.reshape(3, -1)
    for s in [0, 1, 17, 300, 511]:
        c0, c1, c2 = order.forward[s]
        assert np.array_equal(seq[s], flat[:, (c0 * 8 + c1) * 8 + c2])
    back = deserialize(seq, order, vol)
    assert back.values.tobytes() == vol.values.tobytes()


def test_serialize_edge_mismatch():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        serialize(_random_volume(rng, 2, 8), hilbert_build(4))


def test_chunk_shape_example():
    # C=1, G=4, R=2 folds to (1*2^3) x 2^3
    rng = np.random.default_rng(1)
    vol = _random_volume(rng, 1, 4)
    out = chunkify(vol, 2)
    assert out.values.shape == (8, 2, 2, 2)
    assert out.channels == 8


def test_chunk_layout_bookkeeping():
    lay = ChunkLayout(32, 4)
    assert lay.chunks_per_axis == 8
    assert lay.token_dim_in(16) == 16 * 64
    with pytest.raises(ValueError):
        ChunkLayout(32, 5)


def test_chunk_constant_volume_tokens():
    spec = GridSpec(4)
    vol = FeatureVolume(spec, 2, np.full((2, 4, 4, 4), 3.25, np.float32))
    out = chunkify(vol, 2)
    assert np.all(out.values == 3.25)


def test_chunk_channel_layout_is_channel_major():
    # voxel (z, y, x) of chunk-local offset (lz, ly, lx) lands at token
    # channel c*R^3 + lz*R^2 + ly*R + lx
    vol_vals = np.arange(2 * 4 * 4 * 4, dtype=np.float32).reshape(2, 4, 4, 4)
    out = chunkify_array(vol_vals, 2)
    for c in range(2):
        for lz in range(2):
            for ly in range(2):
                for lx in range(2):
                    tok = ((c * 2 + lz) * 2 + ly) * 2 + lx
                    assert out[tok, 1, 0, 1] == vol_vals[c, 2 + lz, ly, 2 + lx]


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from([(1, 4, 2), (3, 8, 2), (2, 8, 4)]))
def test_chunk_roundtrip_property(seed, shape):
    channels, edge, chunk = shape
    rng = np.random.default_rng(seed)
    vals = rng.normal(size=(channels, edge, edge, edge)).astype(np.float32)
    back = unchunkify_array(chunkify_array(vals, chunk), chunk, channels)
    assert back.tobytes() == vals.tobytes()


def test_unchunkify_volume_wrapper():
    rng = np.random.default_rng(2)
    vol = _random_volume(rng, 3, 8)
    back = unchunkify(chunkify(vol, 2), 2, 3)
    assert back.values.tobytes() == vol.values.tobytes()
    with pytest.raises(ValueError):
        chunkify(vol, 3)
