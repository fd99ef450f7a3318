"""Hilbert-curve voxel ordering and chunk rearrangements.

The 3D Hilbert variant is the Butz/Skilling bit transcode with axis
order (axis0, axis1, axis2) and entry cell (0, 0, 0): consecutive
sequence positions always sit at Manhattan distance 1, which is what
makes the downstream sequence operators local. Orders are built once
per edge and cached; they are immutable and freely shareable.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .volumes import FeatureVolume, _is_pow2

__all__ = [
    "HilbertOrder",
    "hilbert_build",
    "serialize",
    "deserialize",
    "ChunkLayout",
    "chunkify",
    "unchunkify",
]


def _transpose_to_axes(x: np.ndarray, bits: int) -> np.ndarray:
    """Skilling transpose -> grid coords, vectorized over columns.

    x has shape (3, n) and is consumed; returns the coordinate array.
    """
    n_dims = 3
    top = 2 << (bits - 1)
    # Gray decode.
    t = x[n_dims - 1] >> 1
    for i in range(n_dims - 1, 0, -1):
        x[i] ^= x[i - 1]
    x[0] ^= t
    # Undo excess work.
    q = 2
    while q != top:
        p = q - 1
        for i in range(n_dims - 1, -1, -1):
            hi = (x[i] & q) != 0
            swap = np.where(hi, 0, (x[0] ^ x[i]) & p)
            x[0] = np.where(hi, x[0] ^ p, x[0] ^ swap)
            x[i] ^= swap
        q <<= 1
    return x


def _axes_to_transpose(x: np.ndarray, bits: int) -> np.ndarray:
    """Inverse of _transpose_to_axes (grid coords -> Skilling transpose)."""
    n_dims = 3
    q = 1 << (bits - 1)
    while q > 1:
        p = q - 1
        for i in range(n_dims):
            hi = (x[i] & q) != 0
            swap = np.where(hi, 0, (x[0] ^ x[i]) & p)
            x[0] = np.where(hi, x[0] ^ p, x[0] ^ swap)
            x[i] ^= swap
        q >>= 1
    # Gray encode.
    for i in range(1, n_dims):
        x[i] ^= x[i - 1]
    t = np.zeros_like(x[0])
    q = 1 << (bits - 1)
    while q > 1:
        t ^= np.where((x[n_dims - 1] & q) != 0, q - 1, 0)
        q >>= 1
    for i in range(n_dims):
        x[i] ^= t
    return x


def _unpack_index(h: np.ndarray, bits: int) -> np.ndarray:
    """Split interleaved Hilbert indices into the (3, n) transpose form.

    Bit layout: index bit ((bits-1-j)*3 + (2-i)) holds bit (bits-1-j) of
    transpose row i, i.e. the index reads x0,x1,x2 bits MSB-first.
    """
    out = np.zeros((3, h.size), dtype=np.int64)
    for j in range(bits):
        for i in range(3):
            src = (bits - 1 - j) * 3 + (2 - i)
            out[i] |= ((h >> src) & 1) << (bits - 1 - j)
    return out


def _pack_index(x: np.ndarray, bits: int) -> np.ndarray:
    """Inverse of _unpack_index."""
    h = np.zeros(x.shape[1], dtype=np.int64)
    for j in range(bits):
        for i in range(3):
            dst = (bits - 1 - j) * 3 + (2 - i)
            h |= ((x[i] >> (bits - 1 - j)) & 1) << dst
    return h


@dataclass(frozen=True)
class HilbertOrder:
    """Bijection between sequence index and voxel coordinate for one edge.

    forward[s] = (c0, c1, c2) of sequence position s; inverse[c0,c1,c2] = s.
    forward_flat / inverse_flat express the same bijection on C-order
    flattened voxel indices, which is what serialization uses directly.
    """

    edge: int
    forward: np.ndarray
    inverse: np.ndarray
    forward_flat: np.ndarray
    inverse_flat: np.ndarray


@lru_cache(maxsize=None)
def hilbert_build(edge: int) -> HilbertOrder:
    """Build the Hilbert order for a power-of-two edge (>= 2)."""
    if edge < 2 or not _is_pow2(edge):
        raise ValueError(f"edge must be a power of two >= 2, got {edge}")
    bits = int(edge).bit_length() - 1
    idx = np.arange(edge**3, dtype=np.int64)
    coords = _transpose_to_axes(_unpack_index(idx, bits), bits)
    forward = np.ascontiguousarray(coords.T)
    forward_flat = (forward[:, 0] * edge + forward[:, 1]) * edge + forward[:, 2]
    inverse_flat = np.empty_like(forward_flat)
    inverse_flat[forward_flat] = idx
    inverse = inverse_flat.reshape(edge, edge, edge)
    for a in (forward, forward_flat, inverse_flat, inverse):
        a.flags.writeable = False
    return HilbertOrder(edge, forward, inverse, forward_flat, inverse_flat)


def hilbert_index_of(coords: np.ndarray, edge: int) -> np.ndarray:
    """Sequence indices of (n, 3) grid coordinates (coords -> index path)."""
    bits = int(edge).bit_length() - 1
    x = np.ascontiguousarray(np.asarray(coords, dtype=np.int64).T).copy()
    return _pack_index(_axes_to_transpose(x, bits), bits)


def serialize(vol: FeatureVolume, order: HilbertOrder) -> np.ndarray:
    """Flatten a feature volume into an (edge^3, C) Hilbert-ordered sequence."""
    if order.edge != vol.spec.edge:
        raise ValueError(f"order edge {order.edge} != volume edge {vol.spec.edge}")
    flat = vol.values.reshape(vol.channels, -1)
    return np.ascontiguousarray(flat[:, order.forward_flat].T)


def deserialize(seq: np.ndarray, order: HilbertOrder, vol_like: FeatureVolume) -> FeatureVolume:
    """Exact inverse of serialize; vol_like supplies spec and channels."""
    seq = np.asarray(seq)
    c = vol_like.channels
    g = order.edge
    if seq.shape != (g**3, c):
        raise ValueError(f"sequence shape {seq.shape} != ({g**3}, {c})")
    flat = np.empty((c, g**3), dtype=seq.dtype)
    flat[:, order.forward_flat] = seq.T
    return FeatureVolume(vol_like.spec, c, flat.reshape(c, g, g, g))


@dataclass(frozen=True)
class ChunkLayout:
    """Shape bookkeeping for folding R^3 blocks into channels."""

    edge: int
    chunk: int

    def __post_init__(self):
        if self.edge % self.chunk != 0:
            raise ValueError(f"chunk {self.chunk} does not divide edge {self.edge}")

    @property
    def chunks_per_axis(self) -> int:
        return self.edge // self.chunk

    def token_dim_in(self, channels: int) -> int:
        return channels * self.chunk**3


def chunkify_array(values: np.ndarray, chunk: int) -> np.ndarray:
    """(C, G, G, G) -> (C*R^3, G/R, G/R, G/R).

    Token channel layout is (original channel, local z, local y, local x)
    with the original channel major; downstream residual sums rely on
    this exact ordering.
    """
    c, g = values.shape[0], values.shape[1]
    if g % chunk != 0:
        raise ValueError(f"chunk {chunk} does not divide edge {g}")
    b = g // chunk
    v = values.reshape(c, b, chunk, b, chunk, b, chunk)
    v = v.transpose(0, 2, 4, 6, 1, 3, 5)
    return np.ascontiguousarray(v.reshape(c * chunk**3, b, b, b))


def unchunkify_array(values: np.ndarray, chunk: int, channels: int) -> np.ndarray:
    """Exact inverse of chunkify_array."""
    cr, b = values.shape[0], values.shape[1]
    if cr != channels * chunk**3:
        raise ValueError(f"channel count {cr} != {channels} * {chunk}^3")
    v = values.reshape(channels, chunk, chunk, chunk, b, b, b)
    v = v.transpose(0, 4, 1, 5, 2, 6, 3)
    return np.ascontiguousarray(v.reshape(channels, b * chunk, b * chunk, b * chunk))


def chunkify(vol: FeatureVolume, chunk: int) -> FeatureVolume:
    """Fold each chunk^3 neighborhood into channels (volume-level wrapper)."""
    out = chunkify_array(vol.values, chunk)
    b = vol.spec.edge // chunk
    from .volumes import GridSpec

    spec = GridSpec(b, vol.spec.origin_min, vol.spec.origin_max, vol.spec.truncation)
    return FeatureVolume(spec, out.shape[0], out)


def unchunkify(vol: FeatureVolume, chunk: int, channels: int) -> FeatureVolume:
    """Inverse of chunkify (volume-level wrapper)."""
    out = unchunkify_array(vol.values, chunk, channels)
    g = vol.spec.edge * chunk
    from .volumes import GridSpec

    spec = GridSpec(g, vol.spec.origin_min, vol.spec.origin_max, vol.spec.truncation)
    return FeatureVolume(spec, channels, out)
