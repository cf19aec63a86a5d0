"""Two-stage inference and ensemble fusion.

Stage one (GSM) gives a probability map per axial slice, thresholded at
0.5 inclusive.  Stage two (LRM) reads PET, CT and both first-stage maps
and outputs a refined probability.  Several cascades and an optional
external probability map are fused on probabilities, then thresholded once.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import EmptyModelList, ExtentMismatch, MisalignedInputs, ShapeMismatch
from .networks import THRESHOLD, forward_segment, make_gsm_input
from .volume import Modality, Volume3D

DEFAULT_EXTERNAL_WEIGHT = 0.35


def binarize(prob: np.ndarray) -> np.ndarray:
    return (np.asarray(prob) >= THRESHOLD).astype(np.float64)


def _slices_first(v: Volume3D) -> np.ndarray:
    # (x, y, z) -> (z, x, y): one network sample per axial slice
    return np.moveaxis(v.voxels, 2, 0)


def _volume_from_slices(arr: np.ndarray, like: Volume3D, modality: Modality) -> Volume3D:
    return Volume3D(np.moveaxis(arr, 0, 2), like.spacing_mm, modality)


def _clip_prob(p):
    return np.clip(p, 0.0, 1.0)


def infer_global(gsm, pet: Volume3D, ct: Volume3D) -> tuple[Volume3D, Volume3D]:
    """Slice-wise first-stage forward; returns (prob, binary) volumes."""
    if not pet.same_geometry(ct):
        raise ShapeMismatch(f"PET {pet.extents} and CT {ct.extents} are not aligned")
    x = make_gsm_input(_slices_first(pet), _slices_first(ct))
    prob = _clip_prob(forward_segment(gsm, x))
    prob_v = _volume_from_slices(prob, pet, Modality.PROB)
    return prob_v, prob_v.with_voxels(binarize(prob_v.voxels), Modality.MASK)


def lrm_input_volume(pet: Volume3D, ct: Volume3D, prob: Volume3D, binary: Volume3D) -> np.ndarray:
    """Validated (Z, 5, X, Y) second-stage input stack."""
    vols = (pet, ct, prob, binary)
    if not all(v.same_geometry(pet) for v in vols):
        raise MisalignedInputs("study volumes and first-stage maps must share geometry")
    p, b = prob.voxels, binary.voxels
    if not np.isin(b, (0.0, 1.0)).all() or not np.array_equal(b, binarize(p)):
        raise MisalignedInputs("binary channel is not the thresholded probability channel")
    parts = [_slices_first(v) for v in (pet, pet, ct, prob, binary)]
    return np.stack(parts, axis=1)


def refine_local(lrm, pet: Volume3D, ct: Volume3D, prob: Volume3D, binary: Volume3D) -> Volume3D:
    x = lrm_input_volume(pet, ct, prob, binary)
    out = _clip_prob(forward_segment(lrm, x))
    return _volume_from_slices(out, pet, Modality.PROB)


def ensemble_fuse(cv_probs, external=None, w_ext: float = DEFAULT_EXTERNAL_WEIGHT) -> np.ndarray:
    """``w_ext * external + (1 - w_ext) * mean(cv_probs)``, voxelwise.

    Without an external map the plain mean is returned.
    """
    maps = [np.asarray(getattr(p, "voxels", p), dtype=np.float64) for p in cv_probs]
    if not maps:
        raise EmptyModelList("fusion needs at least one cross-validation map")
    if not 0.0 <= w_ext <= 1.0:
        raise ValueError(f"w_ext must lie in [0, 1], got {w_ext}")
    shape = maps[0].shape
    if any(m.shape != shape for m in maps):
        raise ExtentMismatch("cross-validation maps differ in extents")
    mean = np.mean(np.stack(maps), axis=0) if len(maps) > 1 else maps[0].copy()
    if external is None:
        return mean
    ext = np.asarray(getattr(external, "voxels", external), dtype=np.float64)
    if ext.shape != shape:
        raise ExtentMismatch(f"external map {ext.shape} differs from {shape}")
    fused = w_ext * ext + (1.0 - w_ext) * mean
    # keep the convex-combination bounds exact under rounding
    lo = np.minimum(np.min(np.stack(maps), axis=0), ext)
    hi = np.maximum(np.max(np.stack(maps), axis=0), ext)
    return np.clip(fused, lo, hi)


def fusion_weights(k: int, has_external: bool, w_ext: float = DEFAULT_EXTERNAL_WEIGHT) -> list[float]:
    if k < 1:
        raise EmptyModelList("fusion needs at least one cross-validation model")
    if not has_external:
        return [1.0 / k] * k
    return [(1.0 - w_ext) / k] * k + [w_ext]


@dataclass
class CascadeModel:
    model_id: str
    gsm: object
    lrm: object


@dataclass
class StudyPrediction:
    prob: Volume3D
    binary: Volume3D
    provenance: list = field(default_factory=list)
    stages: dict = field(default_factory=dict)

    def provenance_json(self) -> str:
        return json.dumps({"models": [{"model_id": m, "weight": w} for m, w in self.provenance],
                           "threshold": THRESHOLD, "threshold_inclusive": True},
                          indent=2, sort_keys=True) + "\n"


def run_cascade(model: CascadeModel, pet: Volume3D, ct: Volume3D) -> dict:
    g_prob, g_bin = infer_global(model.gsm, pet, ct)
    r_prob = refine_local(model.lrm, pet, ct, g_prob, g_bin)
    return {"global_prob": g_prob, "global_binary": g_bin, "refined_prob": r_prob}


def segment_study(models: list[CascadeModel], pet: Volume3D, ct: Volume3D,
                  external: Volume3D | None = None,
                  w_ext: float = DEFAULT_EXTERNAL_WEIGHT) -> StudyPrediction:
    """Run every cascade, fuse with the optional external map, threshold once."""
    if not models:
        raise EmptyModelList("segment_study needs at least one cascade model")
    stages = {m.model_id: run_cascade(m, pet, ct) for m in models}
    probs = [stages[m.model_id]["refined_prob"] for m in models]
    if external is not None and not external.same_geometry(pet):
        raise ExtentMismatch("external probability map is not aligned with the study")
    fused = _clip_prob(ensemble_fuse(probs, external, w_ext))
    weights = fusion_weights(len(models), external is not None, w_ext)
    ids = [m.model_id for m in models] + (["external"] if external is not None else [])
    if not math.isclose(math.fsum(weights), 1.0, rel_tol=0, abs_tol=1e-15):
        raise ValueError(f"fusion weights sum to {math.fsum(weights)}")
    prob_v = pet.with_voxels(fused, Modality.PROB)
    return StudyPrediction(prob_v, prob_v.with_voxels(binarize(fused), Modality.MASK),
                           list(zip(ids, weights)), stages)


def write_prediction(pred: StudyPrediction, out_dir, study_id: str) -> dict:
    from .nifti import write_volume

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "mask": out / f"{study_id}_pred.nii",
        "prob": out / f"{study_id}_prob.nii",
        "provenance": out / f"{study_id}_provenance.json",
    }
    write_volume(pred.binary, paths["mask"])
    write_volume(pred.prob, paths["prob"])
    paths["provenance"].write_text(pred.provenance_json())
    return paths
