"""End-to-end helpers shared by the command line and the cascade experiments."""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

from . import metrics
from .cascade import CascadeModel, infer_global, segment_study
from .errors import CheckpointError, ConfigInvalid
from .networks import NetConfig, build_gsm, build_lrm
from .nifti import read_volume, write_volume
from .phantom import read_manifest, write_manifest
from .preprocess import (
    PreprocessConfig,
    compute_dataset_stats,
    crop_mask,
    normalize_pet,
    preprocess_study,
    study_slices,
)
from .trainer import TrainPlan, train
from .volume import Modality, Volume3D

MANIFEST_NAME = "manifest.json"


@dataclass
class PreparedStudy:
    study_id: str
    pet: Volume3D
    ct: Volume3D
    gt: Volume3D


def fit_pet_stats(studies, cfg: PreprocessConfig) -> PreprocessConfig:
    stats = compute_dataset_stats([normalize_pet(s.pet, cfg) for s in studies])
    return replace(cfg, pet_dataset_stats=stats)


def prepare(studies, cfg: PreprocessConfig) -> list[PreparedStudy]:
    out = []
    for s in studies:
        pet, ct = preprocess_study(s.pet, s.ct, cfg)
        out.append(PreparedStudy(s.study_id, pet, ct, crop_mask(s.gt, cfg)))
    return out


def gsm_slices(prepared: list[PreparedStudy]) -> list:
    return [sl for s in prepared for sl in study_slices(s.pet, s.ct, s.gt)]


def lrm_slices(gsm, prepared: list[PreparedStudy]) -> list:
    """Training slices carrying the first-stage probability as prior."""
    out = []
    for s in prepared:
        prob, _ = infer_global(gsm, s.pet, s.ct)
        out.extend(study_slices(s.pet, s.ct, s.gt, prior=prob))
    return out


def train_gsm(prepared, net_cfg: NetConfig, plan: TrainPlan, init_state=None, log=None):
    net = build_gsm(net_cfg, seed=plan.seed)
    if init_state is not None:
        unmatched = net.load_state(init_state)
        if unmatched:
            raise CheckpointError(f"pretrained parameters not in the GSM: {unmatched}")
    result = train(net, replace(plan, module_kind="GSM"), gsm_slices(prepared), log=log)
    return net, result


def train_lrm(gsm, prepared, net_cfg: NetConfig, plan: TrainPlan, log=None):
    net = build_lrm(net_cfg, seed=plan.seed + 1)
    result = train(net, replace(plan, module_kind="LRM"), lrm_slices(gsm, prepared), log=log)
    return net, result


@dataclass
class StageComparison:
    gsm: metrics.CohortSummary
    cascade: metrics.CohortSummary
    gsm_reports: list
    cascade_reports: list


def compare_stages(model: CascadeModel, prepared: list[PreparedStudy],
                   connectivity: int = metrics.DEFAULT_CONNECTIVITY) -> StageComparison:
    """Metrics of the first stage alone versus the full cascade on ``prepared``."""
    g_reports, c_reports = [], []
    for s in prepared:
        pred = segment_study([model], s.pet, s.ct)
        stage = pred.stages[model.model_id]
        gt = s.gt.voxels.astype(bool)
        g_reports.append(metrics.evaluate_study(
            s.study_id, stage["global_binary"].voxels.astype(bool), gt, s.gt.spacing_mm,
            connectivity))
        c_reports.append(metrics.evaluate_study(
            s.study_id, pred.binary.voxels.astype(bool), gt, s.gt.spacing_mm, connectivity))
    return StageComparison(metrics.summarize(g_reports, "gsm"),
                           metrics.summarize(c_reports, "cascade"), g_reports, c_reports)


def split_ids(ids: list[str], n_test: int) -> tuple[list[str], list[str]]:
    """Last ``n_test`` ids form the test split."""
    if n_test < 0 or n_test > len(ids):
        raise ConfigInvalid(f"n_test={n_test} outside [0, {len(ids)}]")
    return list(ids[:len(ids) - n_test]), list(ids[len(ids) - n_test:])


def fold_ids(train_ids: list[str], n_folds: int, fold: int) -> list[str]:
    """Training ids of one cross-validation fold (all ids when n_folds == 1)."""
    if n_folds <= 1:
        return list(train_ids)
    if not 0 <= fold < n_folds:
        raise ConfigInvalid(f"fold {fold} outside [0, {n_folds})")
    return [sid for i, sid in enumerate(train_ids) if i % n_folds != fold]



# corpus directories -----------------------------------------------------------

@dataclass
class RawStudy:
    study_id: str
    pet: Volume3D
    ct: Volume3D
    gt: Volume3D


def study_paths(corpus_dir, study_id: str) -> dict:
    base = Path(corpus_dir)
    return {"pet": base / f"{study_id}_pet.nii", "ct": base / f"{study_id}_ct.nii",
            "gt": base / f"{study_id}_gt.nii"}


def write_corpus(studies, manifest: dict, corpus_dir) -> None:
    """NIfTI triplets plus ``manifest.json`` in ``corpus_dir``."""
    Path(corpus_dir).mkdir(parents=True, exist_ok=True)
    write_manifest(manifest, Path(corpus_dir) / MANIFEST_NAME)
    for s in studies:
        paths = study_paths(corpus_dir, s.study_id)
        write_volume(s.pet, paths["pet"])
        write_volume(s.ct, paths["ct"])
        write_volume(s.gt, paths["gt"])


def corpus_ids(corpus_dir) -> list[str]:
    return [d["study_id"] for d in read_manifest(Path(corpus_dir) / MANIFEST_NAME)["studies"]]


def load_studies(corpus_dir, ids: list[str]) -> list[RawStudy]:
    out = []
    for sid in ids:
        paths = study_paths(corpus_dir, sid)
        out.append(RawStudy(sid, read_volume(paths["pet"], Modality.PET_SUV),
                            read_volume(paths["ct"], Modality.CT_HU),
                            read_volume(paths["gt"], Modality.MASK)))
    return out
