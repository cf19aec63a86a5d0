"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line.

Lines are printed as each test finishes and repeated in the terminal summary.
"""

import itertools
import math
import time

import numpy as np
import pytest
import yaml

from fpcascade.cascade import CascadeModel, ensemble_fuse, fusion_weights, segment_study
from fpcascade.cli import main
from fpcascade.engine import gradient_check
from fpcascade.losses import loss_gsm, loss_lrm
from fpcascade.metrics import (
    CohortSummary,
    dice_score,
    false_negative_voxels,
    false_positive_voxels,
    rank_aggregate,
)
from fpcascade.networks import NetConfig, build_gsm, build_lrm
from fpcascade.nifti import decode_volume, encode_volume
from fpcascade.phantom import make_corpus
from fpcascade.pipeline import compare_stages, fit_pet_stats, prepare, train_gsm, train_lrm
from fpcascade.preprocess import PreprocessConfig, preprocess_study, window_minmax
from fpcascade.trainer import AdamWConfig, TrainPlan
from fpcascade.volume import Modality, Volume3D

from oracles import average_ranks, loss_gsm_oracle, loss_lrm_oracle, metrics_oracle

RESULTS = []


def report(n, name, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {n} ({name}): {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


def test_c1_gradient_check():
    t0 = time.time()
    worst, checked = 0.0, []
    rng = np.random.default_rng(11)
    for builder, ch in ((build_gsm, 3), (build_lrm, 5)):
        net = builder(NetConfig(4, 2), seed=11)
        inputs = {"image": rng.normal(size=(2, ch, 8, 8)),
                  "target": (rng.random((2, 1, 8, 8)) > 0.7).astype(float)}
        res = gradient_check(net, inputs, n_coords=80, h=1e-4, rng=rng)
        worst = max(worst, res.max_rel_error)
        checked.append(res.checked)
    elapsed = time.time() - t0
    ok = worst < 1e-4 and min(checked) >= 50 and elapsed < 120
    report(1, "autodiff soundness", ok,
           f"max rel err {worst:.2e} over {checked} coords (GSM, LRM), {elapsed:.1f}s")


def test_c2_loss_oracle():
    rng = np.random.default_rng(12)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(1, 257))
        p = rng.random(n)
        g = (rng.random(n) < rng.random()).astype(float)
        for fn, oracle in ((loss_gsm, loss_gsm_oracle), (loss_lrm, loss_lrm_oracle)):
            a, b = fn(p, g).total, oracle(p, g)
            worst = max(worst, abs(a - b) / max(abs(b), 1e-300))
    anchors = (round(loss_gsm([0.5], [1.0]).total, 4), round(loss_lrm([0.5], [0.0]).total, 4),
               round(loss_lrm([0.5], [1.0]).total, 4))
    ok = worst <= 1e-10 and anchors == (-0.1069, 0.9431, 0.9431)
    report(2, "loss oracle", ok, f"max rel diff {worst:.1e} on 1000 vectors, anchors {anchors}")


def test_c3_metrics_oracle():
    rng = np.random.default_rng(13)
    mismatches = 0
    for _ in range(500):
        shape = tuple(int(n) for n in rng.integers(1, 7, 3))
        pred = rng.random(shape) < rng.random()
        gt = rng.random(shape) < rng.random() * 0.7
        for conn in (6, 18, 26):
            dice, fp, fn = metrics_oracle(pred, gt, conn)
            mismatches += false_positive_voxels(pred, gt, conn) != fp
            if dice is not None:
                mismatches += false_negative_voxels(pred, gt, conn) != fn
                mismatches += dice_score(pred, gt) != dice
    report(3, "metrics oracle", mismatches == 0,
           f"{mismatches} mismatches on 500 pairs x 3 connectivities")


@pytest.fixture(scope="module")
def cascade_run():
    t0 = time.time()
    studies, _ = make_corpus(50, 0.2, seed=7, extents=(32, 32, 24))
    train, test = studies[:40], studies[40:]
    cfg = fit_pet_stats(train, PreprocessConfig(patch_xy=32))
    ptr, pte = prepare(train, cfg), prepare(test, cfg)
    net = NetConfig(8, 3)
    plan = TrainPlan(total_epochs=30, seed=7, optim=AdamWConfig(lr_max=1e-3))
    gsm, _ = train_gsm(ptr, net, plan)
    lrm, _ = train_lrm(gsm, ptr, net, plan)
    cmp = compare_stages(CascadeModel("m", gsm, lrm), pte)
    return cmp, test, time.time() - t0


def test_c4_cascade_direction(cascade_run):
    cmp, test, elapsed = cascade_run
    g, c = cmp.gsm, cmp.cascade
    decoys = sum(bool(s.spec.decoys) for s in test)
    ok = (c.mean_fpv_ml <= 0.7 * g.mean_fpv_ml
          and c.mean_dice >= g.mean_dice - 0.02
          and c.mean_fnv_ml <= 1.1 * g.mean_fnv_ml
          and decoys > 0 and elapsed < 1800)
    report(4, "cascade direction of effect", ok,
           f"FPV {g.mean_fpv_ml:.3f} -> {c.mean_fpv_ml:.3f} ml, "
           f"Dice {g.mean_dice:.4f} -> {c.mean_dice:.4f}, "
           f"FNV {g.mean_fnv_ml:.3f} -> {c.mean_fnv_ml:.3f} ml, "
           f"{decoys}/10 test studies with decoys, {elapsed:.0f}s")


def test_c5_ensemble_exactness():
    rng = np.random.default_rng(15)
    cv = [rng.random((4, 4, 3)) for _ in range(3)]
    ext = rng.random((4, 4, 3))
    out = ensemble_fuse(cv, ext, w_ext=0.35)
    # hand formula voxel by voxel
    err = max(abs(out[i] - (0.65 * sum(m[i] for m in cv) / 3 + 0.35 * ext[i]))
              for i in np.ndindex(out.shape))
    simple = ensemble_fuse([np.full((1, 1, 1), 0.2)], np.full((1, 1, 1), 0.8)).item()
    err = max(err, abs(simple - (0.65 * 0.2 + 0.35 * 0.8)))
    fixed = all(np.array_equal(ensemble_fuse([m] * k, m), m)
                for k in (1, 2, 3, 5) for m in (ext, cv[0]))
    pet = Volume3D(rng.normal(size=(8, 8, 2)), (2.0, 2.0, 2.0))
    ct = Volume3D(rng.normal(size=(8, 8, 2)), (2.0, 2.0, 2.0), Modality.CT_HU)
    cfg = NetConfig(2, 2)
    models = [CascadeModel(f"f{i}", build_gsm(cfg, i), build_lrm(cfg, i + 1)) for i in range(3)]
    pred = segment_study(models, pet, ct, pet.with_voxels(np.full((8, 8, 2), 0.5), Modality.PROB))
    sums = [math.fsum(w for _, w in pred.provenance)] + [
        math.fsum(fusion_weights(k, e)) for k in range(1, 8) for e in (False, True)]
    ok = err <= 1e-12 and fixed and all(s == 1.0 for s in sums)
    report(5, "ensemble exactness", ok,
           f"max voxel err {err:.1e}, fixed point {fixed}, weight sums {sorted(set(sums))}")


def _window_oracle(x, low, high):
    return (min(max(x, low), high) - low) / (high - low)


def test_c6_preprocessing_conformance():
    endpoints = [
        window_minmax(Volume3D(np.full((1, 1, 1), x)), w).voxels.item()
        for x, w in ((14.25, (0.0, 14.25)), (-800.0, (-800.0, 400.0)), (400.0, (-800.0, 400.0)),
                     (30.0, (0.0, 14.25)), (-1500.0, (-800.0, 400.0)))]
    rng = np.random.default_rng(16)
    worst = 0.0
    for trial in range(20):
        n, patch = 8 + 2 * (trial % 3), 8
        shape = (n, n, 2)
        pet = Volume3D(rng.uniform(-3.0, 20.0, shape))
        ct = Volume3D(rng.uniform(-1500.0, 1200.0, shape), modality=Modality.CT_HU)
        stats = (float(rng.uniform(0.1, 0.5)), float(rng.uniform(0.05, 0.3)))
        cfg = PreprocessConfig(patch_xy=patch, pet_dataset_stats=stats)
        p, c = preprocess_study(pet, ct, cfg)
        x0 = (n - patch) // 2
        idx = list(itertools.product(range(x0, x0 + patch), range(x0, x0 + patch), range(2)))
        ct_w = [_window_oracle(float(ct.voxels[i]), -800.0, 400.0) for i in idx]
        mean = math.fsum(ct_w) / len(ct_w)
        std = math.sqrt(math.fsum((v - mean) ** 2 for v in ct_w) / len(ct_w))
        for k, i in enumerate(idx):
            j = (i[0] - x0, i[1] - x0, i[2])
            want_p = (_window_oracle(float(pet.voxels[i]), 0.0, 14.25) - stats[0]) / stats[1]
            worst = max(worst, abs(p.voxels[j] - want_p), abs(c.voxels[j] - (ct_w[k] - mean) / std))
    ok = endpoints == [1.0, 0.0, 1.0, 1.0, 0.0] and worst <= 1e-12
    report(6, "preprocessing conformance", ok,
           f"endpoints {endpoints}, max abs err {worst:.1e} on 20 random volumes")


def test_c7_nifti_round_trip():
    rng = np.random.default_rng(17)
    dtypes = (np.uint8, np.int16, np.float32, np.float64)
    failures, combos = 0, set()
    for i in range(100):
        dtype, order = dtypes[i % 4], "<>"[(i // 4) % 2]
        shape = tuple(int(n) for n in rng.integers(1, 9, 3))
        if dtype is np.uint8:
            vals = rng.integers(0, 256, shape).astype(np.float64)
        elif dtype is np.int16:
            vals = rng.integers(-32768, 32768, shape).astype(np.float64)
        elif dtype is np.float32:
            vals = (rng.normal(size=shape) * 1e3).astype(np.float32).astype(np.float64)
        else:
            vals = rng.normal(size=shape) * 10.0 ** rng.integers(-30, 30)
        spacing = tuple(float(s) for s in rng.uniform(0.1, 8.0, 3).astype(np.float32))
        v = Volume3D(vals, spacing, Modality.CT_HU)
        back = decode_volume(encode_volume(v, dtype=dtype, byteorder=order), Modality.CT_HU)
        failures += (back.voxels.tobytes() != vals.tobytes() or back.spacing_mm != spacing)
        combos.add((dtype.__name__, order))
    ok = failures == 0 and len(combos) == 8
    report(7, "NIfTI round trip", ok, f"{failures} failures in 100 volumes over {len(combos)} "
                                      "dtype/byte-order combinations")


def _s(sid, dice, fpv, fnv):
    return CohortSummary(sid, dice, fpv, fnv, 10, 0)


def test_c8_ranking_rule():
    checks = []
    out = rank_aggregate([_s("b", 0.5, 2, 2), _s("a", 0.9, 1, 1)])
    checks.append([(e.submission_id, e.score) for e in out] == [("a", 1.0), ("b", 2.0)])
    out = rank_aggregate([_s("aa", 0.8, 1.0, 1.0), _s("zz", 0.9, 2.0, 2.0)])
    checks.append([(e.submission_id, e.score) for e in out] == [("zz", 1.5), ("aa", 1.5)])
    out = rank_aggregate([_s("b", 0.7, 1, 1), _s("a", 0.7, 1, 1)])
    checks.append([(e.submission_id, e.score) for e in out] == [("a", 1.5), ("b", 1.5)])
    rng = np.random.default_rng(18)
    cohort = [_s(f"s{i}", float(rng.integers(0, 3)) / 2, float(rng.integers(0, 3)),
                 float(rng.integers(0, 3))) for i in range(6)]
    rd = average_ranks([s.mean_dice for s in cohort], True)
    rp = average_ranks([s.mean_fpv_ml for s in cohort], False)
    rn = average_ranks([s.mean_fnv_ml for s in cohort], False)
    ref = rank_aggregate(cohort)
    by_id = {e.submission_id: e for e in ref}
    checks.append(all(by_id[s.submission_id].score == 0.5 * rd[i] + 0.25 * rp[i] + 0.25 * rn[i]
                      for i, s in enumerate(cohort)))
    perms = list(itertools.permutations(cohort))
    checks.append(all(rank_aggregate(list(p)) == ref for p in perms))
    report(8, "ranking rule", all(checks),
           f"hand examples {checks[:4]}, invariant over {len(perms)} permutations {checks[4]}")


def test_c9_cli_determinism(tmp_path):
    cfg = {"seed": 3,
           "corpus": {"n_studies": 8, "n_test": 2, "extents": [16, 16, 12]},
           "preprocess": {"patch_xy": 16},
           "net": {"base_channels": 4, "depth": 2},
           "plan": {"total_epochs": 3},
           "paths": {"corpus_dir": str(tmp_path / "corpus"), "checkpoint_dir": str(tmp_path / "ckpt"),
                     "output_dir": str(tmp_path / "out")}}
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump(cfg))
    codes = [main(["phantom", "-c", str(path)])]
    runs = []
    for _ in range(2):
        codes.append(main(["train-gsm", "-c", str(path)]))
        runs.append([(tmp_path / "ckpt" / n).read_bytes()
                     for n in ("gsm_fold0.ckpt", "gsm_fold0_history.txt")])
        for f in (tmp_path / "ckpt").iterdir():
            f.unlink()
    ok = codes == [0, 0, 0] and runs[0] == runs[1]
    report(9, "train-gsm determinism", ok,
           f"exit codes {codes}, checkpoint identical {runs[0][0] == runs[1][0]}, "
           f"history identical {runs[0][1] == runs[1][1]}")
