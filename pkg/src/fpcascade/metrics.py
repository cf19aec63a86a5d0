"""Lesion segmentation metrics: Dice, false positive / negative volume, ranking.

A predicted connected component is a false positive when it shares no
voxel with the ground truth; a ground-truth component is a false negative
when it shares no voxel with the prediction.  Volumes are in millilitres.
Healthy studies (empty ground truth) only get FPV.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.stats import rankdata

from .errors import ExtentMismatch, HealthyCase, TooFewSubmissions

DEFAULT_CONNECTIVITY = 26
_RANK = {6: 1, 18: 2, 26: 3}
WEIGHTS = (0.5, 0.25, 0.25)
REPORT_COLUMNS = ("study_id", "healthy", "dice", "fpv_ml", "fnv_ml", "connectivity")


@dataclass(frozen=True)
class ComponentLabeling:
    labels: np.ndarray
    count: int
    connectivity: int


def _binary(a) -> np.ndarray:
    a = np.asarray(a)
    if a.dtype != bool:
        if not np.isin(a, (0, 1)).all():
            raise ValueError("mask must be binary")
        a = a.astype(bool)
    return a


def _pair(pred, gt):
    p, g = _binary(pred), _binary(gt)
    if p.shape != g.shape:
        raise ExtentMismatch(f"prediction {p.shape} and ground truth {g.shape} differ")
    return p, g


def structure(connectivity: int) -> np.ndarray:
    if connectivity not in _RANK:
        raise ValueError(f"connectivity must be 6, 18 or 26, got {connectivity}")
    return ndimage.generate_binary_structure(3, _RANK[connectivity])


def connected_components(mask, connectivity: int = DEFAULT_CONNECTIVITY) -> ComponentLabeling:
    """Label 3D components; labels are numbered by first voxel in C (lexicographic) order."""
    m = _binary(mask)
    if m.ndim != 3:
        raise ValueError(f"mask must be 3D, got shape {m.shape}")
    labels, count = ndimage.label(m, structure=structure(connectivity))
    if count:
        flat = labels.ravel()
        nz = flat[flat > 0]
        _, first = np.unique(nz, return_index=True)
        order = np.argsort(first)  # order[i] = old label index visited i-th
        remap = np.zeros(count + 1, dtype=labels.dtype)
        remap[order + 1] = np.arange(1, count + 1)
        labels = remap[labels]
    return ComponentLabeling(labels, int(count), connectivity)


def dice_score(pred, gt) -> float:
    p, g = _pair(pred, gt)
    if not g.any():
        raise HealthyCase("Dice is undefined for an empty ground truth")
    return 2.0 * np.count_nonzero(p & g) / (np.count_nonzero(p) + np.count_nonzero(g))


def _unmatched_volume(source, other, connectivity) -> int:
    """Voxel count of components of ``source`` with no voxel in ``other``."""
    lab = connected_components(source, connectivity)
    if lab.count == 0:
        return 0
    sizes = np.bincount(lab.labels.ravel(), minlength=lab.count + 1)
    hit = np.zeros(lab.count + 1, dtype=bool)
    hit[np.unique(lab.labels[other])] = True
    hit[0] = True
    return int(sizes[~hit].sum())


def false_positive_voxels(pred, gt, connectivity: int = DEFAULT_CONNECTIVITY) -> int:
    p, g = _pair(pred, gt)
    return _unmatched_volume(p, g, connectivity)


def false_negative_voxels(pred, gt, connectivity: int = DEFAULT_CONNECTIVITY) -> int:
    p, g = _pair(pred, gt)
    if not g.any():
        raise HealthyCase("FNV is undefined for an empty ground truth")
    return _unmatched_volume(g, p, connectivity)


def voxel_ml(spacing) -> float:
    sx, sy, sz = spacing
    return sx * sy * sz / 1000.0


def false_positive_volume(pred, gt, spacing, connectivity: int = DEFAULT_CONNECTIVITY) -> float:
    return false_positive_voxels(pred, gt, connectivity) * voxel_ml(spacing)


def false_negative_volume(pred, gt, spacing, connectivity: int = DEFAULT_CONNECTIVITY) -> float:
    return false_negative_voxels(pred, gt, connectivity) * voxel_ml(spacing)


@dataclass(frozen=True)
class MetricsReport:
    study_id: str
    healthy: bool
    dice: float | None
    fpv_ml: float
    fnv_ml: float | None
    connectivity: int = DEFAULT_CONNECTIVITY

    def row(self) -> list:
        fmt = lambda v: "" if v is None else repr(float(v))  # noqa: E731
        return [self.study_id, int(self.healthy), fmt(self.dice), fmt(self.fpv_ml),
                fmt(self.fnv_ml), self.connectivity]


def evaluate_study(study_id: str, pred, gt, spacing,
                   connectivity: int = DEFAULT_CONNECTIVITY) -> MetricsReport:
    p, g = _pair(pred, gt)
    fpv = false_positive_volume(p, g, spacing, connectivity)
    if not g.any():
        return MetricsReport(study_id, True, None, fpv, None, connectivity)
    return MetricsReport(study_id, False, dice_score(p, g), fpv,
                         false_negative_volume(p, g, spacing, connectivity), connectivity)


@dataclass(frozen=True)
class CohortSummary:
    submission_id: str
    mean_dice: float
    mean_fpv_ml: float
    mean_fnv_ml: float
    n_studies: int
    n_healthy: int


def summarize(reports: list[MetricsReport], submission_id: str = "submission") -> CohortSummary:
    """Cohort means; Dice and FNV average over non-healthy studies only."""
    sick = [r for r in reports if not r.healthy]
    nan = float("nan")
    return CohortSummary(
        submission_id,
        math.fsum(r.dice for r in sick) / len(sick) if sick else nan,
        math.fsum(r.fpv_ml for r in reports) / len(reports) if reports else nan,
        math.fsum(r.fnv_ml for r in sick) / len(sick) if sick else nan,
        len(reports),
        len(reports) - len(sick),
    )


def reports_csv(reports: list[MetricsReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in reports:
        w.writerow(r.row())
    return buf.getvalue()


SUMMARY_COLUMNS = ("submission_id", "mean_dice", "mean_fpv_ml", "mean_fnv_ml",
                   "n_studies", "n_healthy")


def summary_csv(summaries: list[CohortSummary]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_COLUMNS)
    for s in summaries:
        w.writerow([s.submission_id, repr(s.mean_dice), repr(s.mean_fpv_ml),
                    repr(s.mean_fnv_ml), s.n_studies, s.n_healthy])
    return buf.getvalue()


def read_summary_csv(text: str) -> list[CohortSummary]:
    rows = list(csv.DictReader(io.StringIO(text)))
    return [CohortSummary(r["submission_id"], float(r["mean_dice"]), float(r["mean_fpv_ml"]),
                          float(r["mean_fnv_ml"]), int(r["n_studies"]), int(r["n_healthy"]))
            for r in rows]


# ranking ---------------------------------------------------------------------

@dataclass(frozen=True)
class RankedEntry:
    position: int
    submission_id: str
    score: float
    rank_dice: float
    rank_fpv: float
    rank_fnv: float


def rank_aggregate(cohort: list[CohortSummary], weights=WEIGHTS) -> list[RankedEntry]:
    """Weighted-rank leaderboard.

    Per metric, rank 1 is best (highest Dice, lowest FPV/FNV) and ties share
    the average rank.  Score = 0.5 r_dice + 0.25 r_fpv + 0.25 r_fnv, lower is
    better; score ties go to the better Dice rank, then the submission id.
    """
    if len(cohort) < 2:
        raise TooFewSubmissions("ranking needs at least two submissions")
    r_dice = rankdata([-s.mean_dice for s in cohort], method="average")
    r_fpv = rankdata([s.mean_fpv_ml for s in cohort], method="average")
    r_fnv = rankdata([s.mean_fnv_ml for s in cohort], method="average")
    wd, wp, wn = weights
    rows = []
    for i, s in enumerate(cohort):
        score = wd * r_dice[i] + wp * r_fpv[i] + wn * r_fnv[i]
        rows.append((score, r_dice[i], s.submission_id, r_fpv[i], r_fnv[i]))
    rows.sort(key=lambda t: (t[0], t[1], t[2]))
    return [RankedEntry(pos + 1, sid, float(score), float(rd), float(rp), float(rn))
            for pos, (score, rd, sid, rp, rn) in enumerate(rows)]


def leaderboard_csv(entries: list[RankedEntry]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("position", "submission_id", "score", "rank_dice", "rank_fpv", "rank_fnv"))
    for e in entries:
        w.writerow([e.position, e.submission_id, repr(e.score), repr(e.rank_dice),
                    repr(e.rank_fpv), repr(e.rank_fnv)])
    return buf.getvalue()
