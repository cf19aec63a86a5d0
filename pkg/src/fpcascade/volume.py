"""Scalar voxel grid with spacing and modality tag."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidVolume


class Modality(str, enum.Enum):
    PET_SUV = "PET_SUV"
    CT_HU = "CT_HU"
    MASK = "MASK"
    PROB = "PROB"


@dataclass(frozen=True, eq=False)
class Volume3D:
    """A 3D volume indexed ``[x, y, z]`` in stored voxel order.

    Voxels are held as float64 regardless of the on-disk datatype.
    MASK volumes must be exactly {0, 1}; PROB volumes must lie in [0, 1].
    """

    voxels: np.ndarray
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)
    modality: Modality = Modality.PET_SUV
    extents: tuple[int, int, int] = field(init=False)

    def __post_init__(self):
        vox = np.asarray(self.voxels, dtype=np.float64)
        if vox.ndim != 3:
            raise InvalidVolume(f"expected 3D voxels, got shape {vox.shape}")
        spacing = tuple(float(s) for s in self.spacing_mm)
        if len(spacing) != 3 or not all(s > 0 and np.isfinite(s) for s in spacing):
            raise InvalidVolume(f"spacing must be three positive reals, got {self.spacing_mm}")
        modality = Modality(self.modality)
        if modality is Modality.MASK and not np.isin(vox, (0.0, 1.0)).all():
            raise InvalidVolume("MASK volume contains values outside {0, 1}")
        if modality is Modality.PROB and not ((vox >= 0.0) & (vox <= 1.0)).all():
            raise InvalidVolume("PROB volume contains values outside [0, 1]")
        vox = np.ascontiguousarray(vox)
        vox.setflags(write=False)
        object.__setattr__(self, "voxels", vox)
        object.__setattr__(self, "spacing_mm", spacing)
        object.__setattr__(self, "modality", modality)
        object.__setattr__(self, "extents", tuple(int(n) for n in vox.shape))

    @property
    def voxel_volume_ml(self) -> float:
        sx, sy, sz = self.spacing_mm
        return sx * sy * sz / 1000.0

    def with_voxels(self, voxels, modality: Modality | None = None) -> "Volume3D":
        """Same geometry, new content."""
        return Volume3D(voxels, self.spacing_mm, modality or self.modality)

    def same_geometry(self, other: "Volume3D") -> bool:
        return self.extents == other.extents and self.spacing_mm == other.spacing_mm

    def __eq__(self, other):
        if not isinstance(other, Volume3D):
            return NotImplemented
        return (
            self.modality == other.modality
            and self.spacing_mm == other.spacing_mm
            and np.array_equal(self.voxels, other.voxels)
        )

    __hash__ = None
