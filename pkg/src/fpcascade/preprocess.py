"""Intensity windowing, standardisation, axial cropping and augmentation.

Per study the pipeline runs crop -> window -> min-max -> standardise.
PET is standardised with statistics of the whole training corpus, CT with
the statistics of the study itself.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import (
    DegenerateWindow,
    EmptyCorpus,
    PatchTooLarge,
    PreprocessError,
    ZeroStd,
)
from .volume import Modality, Volume3D

SUV_WINDOW = (0.0, 14.25)
HU_WINDOW = (-800.0, 400.0)


@dataclass(frozen=True)
class PreprocessConfig:
    suv_window: tuple[float, float] = SUV_WINDOW
    hu_window: tuple[float, float] = HU_WINDOW
    patch_xy: int = 224
    pet_dataset_stats: tuple[float, float] | None = None
    # Offset of the crop window from the centered position, (dx, dy).
    crop_offset: tuple[int, int] = (0, 0)

    def __post_init__(self):
        for name in ("suv_window", "hu_window"):
            low, high = getattr(self, name)
            if not high > low:
                raise DegenerateWindow(f"{name} needs high > low, got {(low, high)}")
        if self.patch_xy < 8 or self.patch_xy % 2:
            raise PreprocessError(f"patch_xy must be even and >= 8, got {self.patch_xy}")
        if self.pet_dataset_stats is not None and not self.pet_dataset_stats[1] > 0:
            raise ZeroStd("pet_dataset_stats.std must be positive")


@dataclass(eq=False)
class SlicePair:
    """One axial training slice.

    ``prior`` optionally carries the first-stage probability map for the
    same slice; it is transformed together with the images.
    """

    pet: np.ndarray
    ct: np.ndarray
    mask: np.ndarray
    prior: np.ndarray | None = None
    has_tumor: bool = field(init=False)

    def __post_init__(self):
        shapes = {self.pet.shape, self.ct.shape, self.mask.shape}
        if self.prior is not None:
            shapes.add(self.prior.shape)
        if len(shapes) != 1 or self.pet.ndim != 2:
            raise PreprocessError(f"slice grids must share one 2D shape, got {shapes}")
        self.has_tumor = bool(np.any(self.mask))


def window_minmax(v: Volume3D, window: tuple[float, float]) -> Volume3D:
    low, high = float(window[0]), float(window[1])
    if not high > low:
        raise DegenerateWindow(f"window needs high > low, got {(low, high)}")
    out = (np.clip(v.voxels, low, high) - low) / (high - low)
    return v.with_voxels(out)


def volume_stats(voxels: np.ndarray) -> tuple[float, float]:
    """Mean and population std with compensated summation."""
    flat = np.asarray(voxels, dtype=np.float64).ravel()
    if flat.size == 0:
        raise EmptyCorpus("no voxels to summarise")
    mean = math.fsum(flat) / flat.size
    var = math.fsum((flat - mean) ** 2) / flat.size
    return mean, math.sqrt(var)


def standardize(v: Volume3D, stats: tuple[float, float] | None = None) -> Volume3D:
    """(x - mean) / std.  Without ``stats`` the volume's own statistics are used."""
    mean, std = volume_stats(v.voxels) if stats is None else stats
    # Constant inputs leave a float residue in the two-pass std.
    if not std > 1e-12 * max(1.0, abs(mean)):
        raise ZeroStd(f"standard deviation is {std}")
    return v.with_voxels((v.voxels - mean) / std)


def crop_axial(v: Volume3D, patch_xy: int, offset: tuple[int, int] = (0, 0)) -> Volume3D:
    nx, ny, _ = v.extents
    if patch_xy > min(nx, ny):
        raise PatchTooLarge(f"patch {patch_xy} exceeds axial extents {(nx, ny)}")
    x0 = (nx - patch_xy) // 2 + offset[0]
    y0 = (ny - patch_xy) // 2 + offset[1]
    if not (0 <= x0 <= nx - patch_xy and 0 <= y0 <= ny - patch_xy):
        raise PatchTooLarge(f"crop offset {offset} moves the patch outside the volume")
    return v.with_voxels(v.voxels[x0:x0 + patch_xy, y0:y0 + patch_xy, :])


def uncrop_axial(v: Volume3D, extents: tuple[int, int, int],
                 offset: tuple[int, int] = (0, 0)) -> Volume3D:
    """Zero-pad a centered crop back to ``extents``; inverse of :func:`crop_axial` on the patch."""
    px, py, pz = v.extents
    nx, ny, nz = extents
    if pz != nz or px > nx or py > ny:
        raise PatchTooLarge(f"patch {v.extents} does not fit extents {extents}")
    x0 = (nx - px) // 2 + offset[0]
    y0 = (ny - py) // 2 + offset[1]
    out = np.zeros(extents)
    out[x0:x0 + px, y0:y0 + py, :] = v.voxels
    return v.with_voxels(out)


def compute_dataset_stats(corpus: list[Volume3D]) -> tuple[float, float]:
    """Mean and population std over every voxel of every volume.

    The two passes use exactly rounded sums, so the result does not depend
    on the order or chunking of the corpus.
    """
    if not corpus:
        raise EmptyCorpus("dataset statistics need at least one volume")
    count = sum(v.voxels.size for v in corpus)
    mean = math.fsum(math.fsum(v.voxels.ravel()) for v in corpus) / count
    var = math.fsum(math.fsum(((v.voxels - mean) ** 2).ravel()) for v in corpus) / count
    return mean, math.sqrt(var)


def normalize_pet(pet: Volume3D, cfg: PreprocessConfig) -> Volume3D:
    """Crop + window + min-max, before dataset standardisation."""
    return window_minmax(crop_axial(pet, cfg.patch_xy, cfg.crop_offset), cfg.suv_window)


def preprocess_study(pet: Volume3D, ct: Volume3D, cfg: PreprocessConfig) -> tuple[Volume3D, Volume3D]:
    """Full per-study pipeline; returns network-ready (pet, ct)."""
    if cfg.pet_dataset_stats is None:
        raise PreprocessError("pet_dataset_stats must be computed before preprocessing")
    if pet.extents != ct.extents:
        raise PreprocessError(f"PET {pet.extents} and CT {ct.extents} extents differ")
    pet_n = standardize(normalize_pet(pet, cfg), cfg.pet_dataset_stats)
    ct_c = crop_axial(ct, cfg.patch_xy, cfg.crop_offset)
    ct_n = standardize(window_minmax(ct_c, cfg.hu_window))
    return pet_n, ct_n


def crop_mask(gt: Volume3D, cfg: PreprocessConfig) -> Volume3D:
    return crop_axial(gt, cfg.patch_xy, cfg.crop_offset)


def corpus_key(ids: list[str], cfg: PreprocessConfig) -> str:
    payload = json.dumps(
        {"ids": list(ids), "suv": list(cfg.suv_window), "patch": cfg.patch_xy,
         "offset": list(cfg.crop_offset)},
        sort_keys=True,
    )
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def cached_dataset_stats(pets: dict[str, Volume3D], cfg: PreprocessConfig,
                         cache_dir) -> tuple[float, float]:
    """PET corpus statistics, cached in a JSON sidecar keyed by corpus hash."""
    key = corpus_key(sorted(pets), cfg)
    path = Path(cache_dir) / f"pet_stats_{key}.json"
    if path.exists():
        d = json.loads(path.read_text())
        return float(d["mean"]), float(d["std"])
    mean, std = compute_dataset_stats([normalize_pet(pets[k], cfg) for k in sorted(pets)])
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps({"key": key, "mean": mean, "std": std}, indent=2))
    return mean, std


# augmentation --------------------------------------------------------------

@dataclass(frozen=True)
class AugmentDraw:
    """A concrete augmentation: quarter turns in {0,1,2,3}, flip axis or None."""

    rot_k: int = 0
    flip_axis: int | None = None

    @classmethod
    def sample(cls, rng: np.random.Generator, p_rotate: float = 0.5,
               p_flip: float = 0.5) -> "AugmentDraw":
        # Fixed draw order keeps training reproducible.
        u_rot, u_flip = rng.random(2)
        k = int(rng.integers(1, 4))
        axis = int(rng.integers(0, 2))
        return cls(k if u_rot < p_rotate else 0, axis if u_flip < p_flip else None)


def apply_draw(grid: np.ndarray, draw: AugmentDraw) -> np.ndarray:
    out = np.rot90(grid, draw.rot_k, axes=(-2, -1))
    if draw.flip_axis is not None:
        out = np.flip(out, axis=grid.ndim - 2 + draw.flip_axis)
    return np.ascontiguousarray(out)


def augment(s: SlicePair, draw: AugmentDraw) -> SlicePair:
    if s.pet.shape[0] != s.pet.shape[1]:
        raise PreprocessError(f"augmentation needs square slices, got {s.pet.shape}")
    return replace(
        s,
        pet=apply_draw(s.pet, draw),
        ct=apply_draw(s.ct, draw),
        mask=apply_draw(s.mask, draw),
        prior=None if s.prior is None else apply_draw(s.prior, draw),
    )


def study_slices(pet: Volume3D, ct: Volume3D, gt: Volume3D,
                 prior: Volume3D | None = None) -> list[SlicePair]:
    """Split preprocessed volumes into axial SlicePairs along z."""
    if not (pet.extents == ct.extents == gt.extents):
        raise PreprocessError("study volumes must share extents")
    if gt.modality is not Modality.MASK:
        raise PreprocessError("ground truth must be a MASK volume")
    out = []
    for z in range(pet.extents[2]):
        out.append(SlicePair(
            pet.voxels[:, :, z].copy(),
            ct.voxels[:, :, z].copy(),
            gt.voxels[:, :, z].copy(),
            None if prior is None else prior.voxels[:, :, z].copy(),
        ))
    return out
