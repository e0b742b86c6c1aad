"""Point cloud and voxel grid containers used throughout the pipeline."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

NO_INSTANCE = -1

# Semantic class ids. Siliques (seed pods) are the positive class and the
# unit of instance segmentation; everything else (stem, tillers) is class 0.
NON_SILIQUE = 0
SILIQUE = 1


@dataclass
class LabeledCloud:
    """N points with coordinates and optional semantic / instance labels.

    coords are float64 meters, shape (N, 3). ``sem`` and ``inst`` are int64
    arrays of length N when present. Instance id -1 marks points that belong
    to no instance (all non-silique points).
    """

    coords: np.ndarray
    sem: np.ndarray | None = None
    inst: np.ndarray | None = None
    id: str = ""

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        if self.coords.ndim != 2 or self.coords.shape[1] != 3:
            raise ValueError(f"coords must have shape (N, 3), got {self.coords.shape}")
        if not np.isfinite(self.coords).all():
            raise ValueError("coords contain non-finite values")
        if self.sem is not None:
            self.sem = np.asarray(self.sem, dtype=np.int64)
            if self.sem.shape != (len(self),):
                raise ValueError("sem length does not match coords")
        if self.inst is not None:
            self.inst = np.asarray(self.inst, dtype=np.int64)
            if self.inst.shape != (len(self),):
                raise ValueError("inst length does not match coords")

    def __len__(self) -> int:
        return self.coords.shape[0]

    def select(self, indices: np.ndarray, id_suffix: str = "") -> "LabeledCloud":
        """Sub-cloud at the given point indices (labels sliced along)."""
        return LabeledCloud(
            coords=self.coords[indices],
            sem=None if self.sem is None else self.sem[indices],
            inst=None if self.inst is None else self.inst[indices],
            id=self.id + id_suffix,
        )


@dataclass
class VoxelGrid:
    """Axis-aligned voxel grid: min corner, per-axis voxel size and extent."""

    origin: np.ndarray
    voxel_size: np.ndarray
    extent: np.ndarray = field(default=None)  # integer voxel counts per axis

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        self.voxel_size = np.asarray(self.voxel_size, dtype=np.float64).reshape(3)
        if not (self.voxel_size > 0).all():
            raise ValueError("voxel_size must be positive component-wise")
        if self.extent is None:
            raise ValueError("extent is required")
        self.extent = np.asarray(self.extent, dtype=np.int64).reshape(3)
        if not (self.extent >= 1).all():
            raise ValueError("extent must be >= 1 component-wise")

    @property
    def max_corner(self) -> np.ndarray:
        return self.origin + self.voxel_size * self.extent

    @classmethod
    def fit(cls, coords: np.ndarray, voxel_size, padding: float = 1e-6) -> "VoxelGrid":
        """Grid covering ``coords`` with the min corner padded outward so that
        every point lies strictly inside [origin, origin + size * extent)."""
        coords = np.asarray(coords, dtype=np.float64)
        if coords.size == 0:
            raise ValueError("cannot fit a grid to an empty cloud")
        voxel_size = np.asarray(voxel_size, dtype=np.float64).reshape(3)
        origin = coords.min(axis=0) - padding
        span = coords.max(axis=0) - origin
        extent = np.floor(span / voxel_size).astype(np.int64) + 1
        return cls(origin=origin, voxel_size=voxel_size, extent=extent)
