"""voxcomplete: TSDF shape completion with distilled semantic voxel
features and Hilbert-serialized state-space operators, at desk scale."""

__version__ = "0.1.0"

from .volumes import FeatureVolume, GridSpec, MaskVolume, TsdfVolume, occupancy

__all__ = [
    "GridSpec",
    "TsdfVolume",
    "FeatureVolume",
    "MaskVolume",
    "occupancy",
    "__version__",
]
