"""Synthetic PET/CT studies with analytic tumor ground truth.

Each study is a body cylinder with background uptake, Gaussian tumor
blobs, and hot decoy blobs that are not tumors: a brain-like blob near the
top of the volume (inside a bone shell on CT) and a bladder-like blob at
the bottom centre (fluid density on CT).  Ground truth marks tumor voxels
whose blob profile reaches half its peak, i.e. the ellipsoid
``sum(((x - c) / r)^2) <= 2 ln 2``.

Centers and radii are in voxel units.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import SpecInvalid
from .volume import Modality, Volume3D

HALF_PEAK_R2 = 2.0 * math.log(2.0)
TUMOR_PEAK = (4.0, 14.0)
DECOY_PEAK = (6.0, 14.0)
DECOY_KINDS = ("brain", "bladder")

BODY_HU = 40.0
AIR_HU = -1000.0
BONE_HU = 700.0
FLUID_HU = 5.0
BACKGROUND_SUV = 1.0
OUTSIDE_SUV = 0.05


@dataclass(frozen=True)
class Blob:
    center: tuple[float, float, float]
    radii: tuple[float, float, float]
    peak: float
    kind: str = "tumor"

    def r2(self, grid) -> np.ndarray:
        return sum(((g - c) / r) ** 2 for g, c, r in zip(grid, self.center, self.radii))

    def profile(self, grid) -> np.ndarray:
        return self.peak * np.exp(-0.5 * self.r2(grid))

    def half_peak_mask(self, grid) -> np.ndarray:
        return self.r2(grid) <= HALF_PEAK_R2


@dataclass(frozen=True)
class PhantomSpec:
    extents: tuple[int, int, int] = (32, 32, 24)
    spacing_mm: tuple[float, float, float] = (4.0, 4.0, 4.0)
    tumors: tuple[Blob, ...] = ()
    decoys: tuple[Blob, ...] = ()
    noise_sigma: float = 0.1
    ct_noise_sigma: float = 10.0
    bone_shell: bool = True
    seed: int = 0
    study_id: str = "study"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        d = dict(d)
        d["tumors"] = tuple(Blob(tuple(b["center"]), tuple(b["radii"]), b["peak"], b["kind"])
                            for b in d.get("tumors", ()))
        d["decoys"] = tuple(Blob(tuple(b["center"]), tuple(b["radii"]), b["peak"], b["kind"])
                            for b in d.get("decoys", ()))
        for key in ("extents", "spacing_mm"):
            d[key] = tuple(d[key])
        return cls(**d)


def _grid(extents):
    return np.meshgrid(*(np.arange(n, dtype=np.float64) for n in extents), indexing="ij")


def validate_spec(spec: PhantomSpec) -> None:
    if len(spec.extents) != 3 or min(spec.extents) < 1:
        raise SpecInvalid(f"bad extents {spec.extents}")
    if min(spec.spacing_mm) <= 0:
        raise SpecInvalid(f"spacing must be positive, got {spec.spacing_mm}")
    if spec.noise_sigma < 0 or spec.ct_noise_sigma < 0:
        raise SpecInvalid("noise levels must be >= 0")
    for b in spec.tumors + spec.decoys:
        if not all(0 <= c <= n - 1 for c, n in zip(b.center, spec.extents)):
            raise SpecInvalid(f"blob center {b.center} outside extents {spec.extents}")
        if min(b.radii) <= 0:
            raise SpecInvalid(f"blob radii must be positive, got {b.radii}")
    for b in spec.tumors:
        if b.kind != "tumor" or not TUMOR_PEAK[0] <= b.peak <= TUMOR_PEAK[1]:
            raise SpecInvalid(f"tumor peak {b.peak} outside {TUMOR_PEAK}")
    for b in spec.decoys:
        if b.kind not in DECOY_KINDS or not DECOY_PEAK[0] <= b.peak <= DECOY_PEAK[1]:
            raise SpecInvalid(f"decoy {b.kind} peak {b.peak} invalid")
    if spec.tumors and spec.decoys:
        grid = _grid(spec.extents)
        tumor = np.zeros(spec.extents, bool)
        for b in spec.tumors:
            tumor |= b.half_peak_mask(grid)
        for b in spec.decoys:
            if (tumor & b.half_peak_mask(grid)).any():
                raise SpecInvalid(f"decoy at {b.center} overlaps a tumor")


def generate_phantom(spec: PhantomSpec) -> tuple[Volume3D, Volume3D, Volume3D]:
    """Return (pet, ct, gt) volumes; deterministic in ``spec.seed``."""
    validate_spec(spec)
    rng = np.random.default_rng(spec.seed)
    nx, ny, nz = spec.extents
    grid = _grid(spec.extents)
    gx, gy, _ = grid

    body = ((gx - (nx - 1) / 2) / (0.45 * nx)) ** 2 + ((gy - (ny - 1) / 2) / (0.40 * ny)) ** 2 <= 1.0
    pet = np.where(body, BACKGROUND_SUV, OUTSIDE_SUV)
    ct = np.where(body, BODY_HU, AIR_HU)
    for b in spec.tumors + spec.decoys:
        pet = pet + b.profile(grid)
    for b in spec.decoys:
        inside = b.half_peak_mask(grid)
        if b.kind == "brain" and spec.bone_shell:
            r2 = b.r2(grid)
            ct = np.where((r2 > HALF_PEAK_R2) & (r2 <= 2.0 * HALF_PEAK_R2), BONE_HU, ct)
        elif b.kind == "bladder":
            ct = np.where(inside, FLUID_HU, ct)
    if spec.noise_sigma > 0:
        pet = pet + rng.normal(0.0, spec.noise_sigma, spec.extents)
    pet = np.maximum(pet, 0.0)
    if spec.ct_noise_sigma > 0:
        ct = ct + rng.normal(0.0, spec.ct_noise_sigma, spec.extents)

    gt = np.zeros(spec.extents)
    for b in spec.tumors:
        gt[b.half_peak_mask(grid)] = 1.0

    # float32 storage keeps NIfTI round trips exact
    pet = pet.astype(np.float32).astype(np.float64)
    ct = ct.astype(np.float32).astype(np.float64)
    return (
        Volume3D(pet, spec.spacing_mm, Modality.PET_SUV),
        Volume3D(ct, spec.spacing_mm, Modality.CT_HU),
        Volume3D(gt, spec.spacing_mm, Modality.MASK),
    )


# corpora -------------------------------------------------------------------

_MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    """One splitmix64 output for state ``x``."""
    z = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def study_seed(corpus_seed: int, index: int) -> int:
    return splitmix64((corpus_seed + index * 0x9E3779B97F4A7C15) & _MASK64) >> 1


def _random_spec(rng, study_id, seed, extents, spacing, healthy, noise_sigma,
                 max_tumors) -> PhantomSpec:
    nx, ny, nz = extents
    decoys = [Blob(
        (rng.uniform(0.4, 0.6) * (nx - 1), rng.uniform(0.4, 0.6) * (ny - 1), nz - 1 - 0.12 * nz),
        (rng.uniform(0.14, 0.18) * nx, rng.uniform(0.14, 0.18) * ny, rng.uniform(0.07, 0.09) * nz),
        float(rng.uniform(*DECOY_PEAK)), "brain")]
    if rng.random() < 0.6:
        decoys.append(Blob(
            ((nx - 1) / 2 + rng.uniform(-1, 1), (ny - 1) / 2 + rng.uniform(-1, 1), 0.12 * nz),
            (rng.uniform(0.09, 0.12) * nx, rng.uniform(0.09, 0.12) * ny, rng.uniform(0.05, 0.07) * nz),
            float(rng.uniform(*DECOY_PEAK)), "bladder"))

    tumors = []
    if not healthy:
        n_tumors = int(rng.integers(1, max_tumors + 1))
        attempts = 0
        grid = _grid(extents)
        while len(tumors) < n_tumors and attempts < 200:
            attempts += 1
            cand = Blob(
                (rng.uniform(0.25, 0.75) * (nx - 1), rng.uniform(0.25, 0.75) * (ny - 1),
                 rng.uniform(0.32, 0.68) * (nz - 1)),
                tuple(float(r) for r in rng.uniform(1.2, 2.6, 3)),
                float(rng.uniform(5.0, TUMOR_PEAK[1])))
            m = cand.half_peak_mask(grid)
            if not m.any():
                continue
            # keep blobs well apart so decoys and tumors stay disjoint
            if any((m & (b.r2(grid) <= 4 * HALF_PEAK_R2)).any() for b in tumors + decoys):
                continue
            tumors.append(cand)
        if not tumors:
            raise SpecInvalid(f"could not place a tumor in {study_id}")
    return PhantomSpec(tuple(extents), tuple(spacing), tuple(tumors), tuple(decoys),
                       noise_sigma, 10.0, True, seed, study_id)


@dataclass
class Study:
    study_id: str
    pet: Volume3D
    ct: Volume3D
    gt: Volume3D
    spec: PhantomSpec = field(repr=False)

    @property
    def healthy(self) -> bool:
        return not self.gt.voxels.any()


def make_corpus(n_studies: int, mix: float, seed: int,
                extents=(32, 32, 24), spacing=(4.0, 4.0, 4.0),
                noise_sigma: float = 0.1, max_tumors: int = 3) -> tuple[list[Study], dict]:
    """Reproducible corpus; ``floor(n * mix)`` studies are healthy.

    Every study carries a brain-like decoy; most also carry a bladder-like one.
    """
    if not 0.0 <= mix <= 1.0:
        raise SpecInvalid(f"mix must lie in [0, 1], got {mix}")
    n_healthy = math.floor(n_studies * mix)
    picker = np.random.default_rng(study_seed(seed, n_studies))
    healthy = set(picker.permutation(n_studies)[:n_healthy].tolist())
    specs = []
    for i in range(n_studies):
        s = study_seed(seed, i)
        rng = np.random.default_rng(s)
        specs.append(_random_spec(rng, f"study{i:03d}", s, extents, spacing,
                                  i in healthy, noise_sigma, max_tumors))
    manifest = {
        "format": "fpcascade-phantom-manifest",
        "version": 1,
        "seed": seed,
        "n_studies": n_studies,
        "mix": mix,
        "studies": [sp.to_dict() for sp in specs],
    }
    return corpus_from_manifest(manifest), manifest


def corpus_from_manifest(manifest: dict) -> list[Study]:
    out = []
    for d in manifest["studies"]:
        spec = PhantomSpec.from_dict(d)
        pet, ct, gt = generate_phantom(spec)
        out.append(Study(spec.study_id, pet, ct, gt, spec))
    return out


def write_manifest(manifest: dict, path) -> None:
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def read_manifest(path) -> dict:
    return json.loads(Path(path).read_text())
