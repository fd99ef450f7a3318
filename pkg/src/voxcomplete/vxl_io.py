"""VXL1 binary volume format: reader, writer, and format errors.

Layout (all integers little-endian uint32):

    bytes 0-3   magic b"VXL1"
    uint32      kind        0 = TSDF, 1 = feature, 2 = mask
    uint32      channels
    uint32      D, H, W     three uint32 extents
    uint32      dtype code  0 = little-endian float32
    payload     channels*D*H*W float32, channel-major then D, H, W
                (width fastest)

Round trips are bit-exact. Depth and patch-feature rasters reuse the
format with D = 1, so D/H/W need not be cubic at this layer; the typed
load helpers enforce cubic grids where the caller expects a volume.
"""

from __future__ import annotations

import os
import struct

import numpy as np

from .volumes import FeatureVolume, GridSpec, MaskVolume, TsdfVolume

__all__ = [
    "VolumeFormatError",
    "BadMagicError",
    "DimensionMismatchError",
    "TruncatedPayloadError",
    "KIND_TSDF",
    "KIND_FEATURE",
    "KIND_MASK",
    "write_volume",
    "write_raster",
    "read_volume",
    "read_raw",
]

MAGIC = b"VXL1"
KIND_TSDF = 0
KIND_FEATURE = 1
KIND_MASK = 2
_DTYPE_F32 = 0
_HEADER = struct.Struct("<6I")  # kind, channels, D, H, W, dtype


class VolumeFormatError(Exception):
    """Base class for VXL1 format violations."""


class BadMagicError(VolumeFormatError):
    """File does not start with the VXL1 magic bytes."""


class DimensionMismatchError(VolumeFormatError):
    """Header fields are inconsistent (zero extents, kind/channel clash,
    unknown kind or dtype code, or shape differs from what the caller
    required)."""


class TruncatedPayloadError(VolumeFormatError):
    """Payload holds fewer (or more) bytes than the header declares."""


def _encode(kind: int, values: np.ndarray) -> bytes:
    vals = np.ascontiguousarray(values, dtype="<f4")
    if vals.ndim == 3:
        vals = vals[None]
    c, d, h, w = vals.shape
    header = MAGIC + _HEADER.pack(kind, c, d, h, w, _DTYPE_F32)
    return header + vals.tobytes()


def write_raster(path, values: np.ndarray, kind: int = KIND_FEATURE) -> None:
    """Write a raw (C,D,H,W) or (D,H,W) float array; no cubic constraint."""
    data = _encode(kind, values)
    with open(path, "wb") as f:
        f.write(data)


def write_volume(path, vol) -> None:
    """Write a TsdfVolume / FeatureVolume / MaskVolume, bit-exact."""
    if isinstance(vol, TsdfVolume):
        write_raster(path, vol.values, KIND_TSDF)
    elif isinstance(vol, FeatureVolume):
        write_raster(path, vol.values, KIND_FEATURE)
    elif isinstance(vol, MaskVolume):
        write_raster(path, vol.values, KIND_MASK)
    else:
        raise TypeError(f"not a volume type: {type(vol)!r}")


def read_raw(path):
    """Read any VXL1 file.

    Returns (kind, values) with values shaped (channels, D, H, W),
    float32, writeable copy.
    """
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise BadMagicError(f"{path}: missing VXL1 magic")
    if len(blob) < 4 + _HEADER.size:
        raise TruncatedPayloadError(f"{path}: header cut short")
    kind, c, d, h, w, dtype = _HEADER.unpack_from(blob, 4)
    if dtype != _DTYPE_F32:
        raise DimensionMismatchError(f"{path}: unknown dtype code {dtype}")
    if kind not in (KIND_TSDF, KIND_FEATURE, KIND_MASK):
        raise DimensionMismatchError(f"{path}: unknown kind {kind}")
    if min(c, d, h, w) < 1:
        raise DimensionMismatchError(f"{path}: zero extent in header")
    if kind in (KIND_TSDF, KIND_MASK) and c != 1:
        raise DimensionMismatchError(f"{path}: kind {kind} requires channels=1")
    n = c * d * h * w
    payload = blob[4 + _HEADER.size :]
    if len(payload) != 4 * n:
        raise TruncatedPayloadError(
            f"{path}: header declares {4 * n} payload bytes, found {len(payload)}"
        )
    vals = np.frombuffer(payload, dtype="<f4").reshape(c, d, h, w).copy()
    return kind, vals


def _cubic_spec(shape, truncation: float, origin) -> GridSpec:
    d, h, w = shape
    if not (d == h == w):
        raise DimensionMismatchError(f"volume is not cubic: {shape}")
    return GridSpec(edge=d, origin_min=origin[0], origin_max=origin[1], truncation=truncation)


def read_volume(path, truncation: float = 3.0, origin=((-0.5,) * 3, (0.5,) * 3)):
    """Read a VXL1 file into the matching typed volume.

    The file carries no grid metadata beyond extents, so truncation and
    the canonical box are supplied by the caller (defaults match the
    dataset convention).
    """
    kind, vals = read_raw(path)
    spec = _cubic_spec(vals.shape[1:], truncation, origin)
    if kind == KIND_TSDF:
        return TsdfVolume(spec, vals[0])
    if kind == KIND_MASK:
        return MaskVolume(spec, vals[0])
    return FeatureVolume(spec, vals.shape[0], vals)


def atomic_write_bytes(path, data: bytes) -> None:
    """Write-temp-then-rename so concurrent readers never see partial files."""
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)
