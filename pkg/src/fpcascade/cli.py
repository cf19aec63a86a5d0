"""Command line front end: ``fpcascade <command> [-c config.yaml] [--set key=value ...]``.

Commands: phantom, pretrain, train-gsm, train-lrm, infer, evaluate, rank.
Exit status: 0 success, 2 config, 3 data, 4 numeric failure, 5 I/O.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import platform
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import scipy
import yaml

from . import __version__, metrics
from .cascade import CascadeModel, segment_study, write_prediction
from .engine import load_checkpoint, save_checkpoint
from .errors import CheckpointError, ConfigParse, FpcError
from .networks import NetConfig, build_gsm, build_lrm
from .nifti import read_volume
from .phantom import make_corpus
from .pipeline import (
    corpus_ids,
    fold_ids,
    load_studies,
    prepare,
    split_ids,
    study_paths,
    train_gsm,
    train_lrm,
    write_corpus,
)
from .preprocess import (
    PreprocessConfig,
    cached_dataset_stats,
    crop_axial,
    study_slices,
    uncrop_axial,
)
from .pretrain import pretrain_encoder, save_encoder
from .trainer import AdamWConfig, TrainPlan
from .volume import Modality

DEFAULTS = {
    "seed": 0,
    "corpus": {"n_studies": 50, "mix": 0.2, "extents": [32, 32, 24],
               "spacing_mm": [4.0, 4.0, 4.0], "noise_sigma": 0.1, "max_tumors": 3,
               "n_test": 10},
    "preprocess": {"patch_xy": 32, "suv_window": [0.0, 14.25], "hu_window": [-800.0, 400.0]},
    "net": {"base_channels": 8, "depth": 3},
    "plan": {"batch_size": 8, "total_epochs": 30, "lr_max": 1e-3, "beta1": 0.9,
             "beta2": 0.999, "eps": 1e-8, "weight_decay": 0.01, "augment": True,
             "stop_window": 10, "stop_tol": 1e-5, "init_encoder": False},
    "pretrain": {"epochs": 20, "lr_max": 1e-3, "batch_size": 8, "temperature": 0.1},
    "cv": {"n_folds": 1},
    "fusion": {"w_ext": 0.35, "external_dir": None},
    "metrics": {"connectivity": 26},
    "paths": {"corpus_dir": "corpus", "checkpoint_dir": "checkpoints", "output_dir": "output"},
}


# configuration -----------------------------------------------------------------

def _merge(base: dict, update: dict, prefix: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in update.items():
        path = f"{prefix}{key}"
        if key not in base:
            raise ConfigParse(f"unknown config key {path!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigParse(f"config key {path!r} must be a mapping")
            out[key] = _merge(base[key], value, path + ".")
        else:
            out[key] = value
    return out


def _override(cfg: dict, assignment: str) -> dict:
    if "=" not in assignment:
        raise ConfigParse(f"override {assignment!r} is not of the form key=value")
    dotted, raw = assignment.split("=", 1)
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigParse(f"cannot parse override value {raw!r}: {exc}") from None
    for part in reversed(dotted.split(".")):
        value = {part: value}
    return _merge(cfg, value)


def load_config(path=None, overrides=()) -> dict:
    """Defaults, then the YAML/JSON file, then ``key.sub=value`` overrides."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            data = yaml.safe_load(Path(path).read_text())
        except yaml.YAMLError as exc:
            raise ConfigParse(f"cannot parse {path}: {exc}") from None
        except OSError as exc:
            raise ConfigParse(f"cannot read config {path}: {exc}") from None
        if data is not None:
            if not isinstance(data, dict):
                raise ConfigParse(f"{path} must hold a mapping at top level")
            cfg = _merge(cfg, data)
    for item in overrides:
        cfg = _override(cfg, item)
    return cfg


def validate(cfg: dict) -> None:
    """Build every typed section once so bad values fail before any data is read."""
    net_config(cfg)
    preprocess_config(cfg)
    for kind in ("GSM", "LRM"):
        train_plan(cfg, kind, 0)
    _fold_range(cfg, None)
    if not 0.0 <= float(cfg["fusion"]["w_ext"]) <= 1.0:
        raise ConfigParse("fusion.w_ext must lie in [0, 1]")
    if cfg["metrics"]["connectivity"] not in (6, 18, 26):
        raise ConfigParse("metrics.connectivity must be 6, 18 or 26")


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def _typed(fn, section):
    try:
        return fn()
    except FpcError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigParse(f"invalid {section} settings: {exc}") from None


def net_config(cfg) -> NetConfig:
    return _typed(lambda: NetConfig(int(cfg["net"]["base_channels"]), int(cfg["net"]["depth"])),
                  "net")


def preprocess_config(cfg) -> PreprocessConfig:
    p = cfg["preprocess"]
    return _typed(lambda: PreprocessConfig(tuple(map(float, p["suv_window"])),
                                           tuple(map(float, p["hu_window"])),
                                           int(p["patch_xy"])), "preprocess")


def train_plan(cfg, kind: str, fold: int) -> TrainPlan:
    p = cfg["plan"]

    def build():
        optim = AdamWConfig(float(p["lr_max"]), float(p["beta1"]), float(p["beta2"]),
                            float(p["eps"]), float(p["weight_decay"]))
        return TrainPlan(kind, int(p["batch_size"]), int(p["total_epochs"]),
                         int(cfg["seed"]) + 100 * fold, optim, bool(p["augment"]), True,
                         int(p["stop_window"]), float(p["stop_tol"]))
    return _typed(build, "plan")


# shared steps -------------------------------------------------------------------

def _paths(cfg) -> dict:
    return {k: Path(v) for k, v in cfg["paths"].items()}


def _splits(cfg):
    ids = corpus_ids(_paths(cfg)["corpus_dir"])
    return split_ids(ids, int(cfg["corpus"]["n_test"]))


def _stats_config(cfg) -> PreprocessConfig:
    """Preprocessing with PET statistics of the whole training split (cached)."""
    paths = _paths(cfg)
    train_ids, _ = _splits(cfg)
    pcfg = preprocess_config(cfg)
    pets = {s.study_id: s.pet for s in load_studies(paths["corpus_dir"], train_ids)}
    return replace(pcfg, pet_dataset_stats=cached_dataset_stats(pets, pcfg, paths["checkpoint_dir"]))


def _fold_range(cfg, fold):
    n = int(cfg["cv"]["n_folds"])
    if n < 1:
        raise ConfigParse("cv.n_folds must be >= 1")
    if fold is not None:
        if not 0 <= fold < n:
            raise ConfigParse(f"fold {fold} outside [0, {n})")
        return [fold]
    return list(range(n))


def _ckpt(cfg, kind, fold) -> Path:
    return _paths(cfg)["checkpoint_dir"] / f"{kind}_fold{fold}.ckpt"


def _meta(cfg, kind, fold, pcfg) -> dict:
    return {"kind": kind, "fold": fold, "config_sha256": config_hash(cfg),
            "base_channels": int(cfg["net"]["base_channels"]), "depth": int(cfg["net"]["depth"]),
            "pet_dataset_stats": list(pcfg.pet_dataset_stats), "patch_xy": pcfg.patch_xy}


def _load_net(cfg, kind, fold):
    path = _ckpt(cfg, kind, fold)
    if not path.exists():
        raise CheckpointError(f"missing checkpoint {path}; run train-{kind} first")
    params, manifest = load_checkpoint(path)
    ncfg = net_config(cfg)
    meta = manifest["meta"]
    if (meta.get("base_channels"), meta.get("depth")) != (ncfg.base_channels, ncfg.depth):
        raise CheckpointError(f"{path} was trained with a different network configuration")
    net = (build_gsm if kind == "gsm" else build_lrm)(ncfg)
    net.load_state(params, strict=True)
    return net


def _history_writer(path):
    path.parent.mkdir(parents=True, exist_ok=True)
    fh = path.open("w")

    def log(rec):
        fh.write(rec.line() + "\n")
        fh.flush()
    return fh, log


# commands -------------------------------------------------------------------------

def cmd_phantom(cfg, args):
    c = cfg["corpus"]
    studies, manifest = make_corpus(int(c["n_studies"]), float(c["mix"]), int(cfg["seed"]),
                                    tuple(c["extents"]), tuple(map(float, c["spacing_mm"])),
                                    float(c["noise_sigma"]), int(c["max_tumors"]))
    write_corpus(studies, manifest, _paths(cfg)["corpus_dir"])
    healthy = sum(s.healthy for s in studies)
    return f"wrote {len(studies)} studies ({healthy} healthy) to {_paths(cfg)['corpus_dir']}"


def cmd_pretrain(cfg, args):
    paths = _paths(cfg)
    pcfg = _stats_config(cfg)
    train_ids, _ = _splits(cfg)
    prepared = prepare(load_studies(paths["corpus_dir"], train_ids), pcfg)
    slices = [sl for s in prepared for sl in study_slices(s.pet, s.ct, s.gt)]
    p = cfg["pretrain"]
    fh, log = _history_writer(paths["checkpoint_dir"] / "encoder_history.txt")
    with fh:
        res = pretrain_encoder(slices, net_config(cfg), int(p["epochs"]), int(cfg["seed"]),
                               int(p["batch_size"]), AdamWConfig(lr_max=float(p["lr_max"])),
                               float(p["temperature"]), log)
    save_encoder(res, paths["checkpoint_dir"] / "encoder.ckpt", net_config(cfg))
    return f"encoder saved to {paths['checkpoint_dir'] / 'encoder.ckpt'}"


def _train(cfg, args, kind):
    paths = _paths(cfg)
    pcfg = _stats_config(cfg)
    train_ids, _ = _splits(cfg)
    ncfg = net_config(cfg)
    done = []
    for fold in _fold_range(cfg, args.fold):
        ids = fold_ids(train_ids, int(cfg["cv"]["n_folds"]), fold)
        prepared = prepare(load_studies(paths["corpus_dir"], ids), pcfg)
        plan = train_plan(cfg, kind.upper(), fold)
        fh, log = _history_writer(paths["checkpoint_dir"] / f"{kind}_fold{fold}_history.txt")
        with fh:
            if kind == "gsm":
                init = None
                if cfg["plan"]["init_encoder"]:
                    enc = paths["checkpoint_dir"] / "encoder.ckpt"
                    if not enc.exists():
                        raise CheckpointError(f"missing {enc}; run pretrain first")
                    init, _ = load_checkpoint(enc)
                net, res = train_gsm(prepared, ncfg, plan, init, log)
            else:
                net, res = train_lrm(_load_net(cfg, "gsm", fold), prepared, ncfg, plan, log)
        meta = _meta(cfg, kind, fold, pcfg)
        meta["epochs_run"] = len(res.history)
        save_checkpoint(_ckpt(cfg, kind, fold), res.state, net.topology(), meta)
        done.append(f"{_ckpt(cfg, kind, fold)} ({len(res.history)} epochs, "
                    f"final loss {res.history[-1].loss:.6g})")
    return "\n".join(done)


def cmd_train_gsm(cfg, args):
    return _train(cfg, args, "gsm")


def cmd_train_lrm(cfg, args):
    return _train(cfg, args, "lrm")


def _split_ids(cfg, split):
    train_ids, test_ids = _splits(cfg)
    return {"train": train_ids, "test": test_ids, "all": train_ids + test_ids}[split]


def cmd_infer(cfg, args):
    paths = _paths(cfg)
    pcfg = _stats_config(cfg)
    models = [CascadeModel(f"fold{k}", _load_net(cfg, "gsm", k), _load_net(cfg, "lrm", k))
              for k in _fold_range(cfg, None)]
    ext_dir = cfg["fusion"]["external_dir"]
    out_dir = paths["output_dir"] / "predictions"
    studies = load_studies(paths["corpus_dir"], _split_ids(cfg, args.split))
    for study, prep in zip(studies, prepare(studies, pcfg)):
        external = None
        if ext_dir is not None:
            ext = read_volume(Path(ext_dir) / f"{study.study_id}_prob.nii", Modality.PROB)
            external = crop_axial(ext, pcfg.patch_xy, pcfg.crop_offset)
        pred = segment_study(models, prep.pet, prep.ct, external, float(cfg["fusion"]["w_ext"]))
        full = replace(pred,
                       prob=uncrop_axial(pred.prob, study.pet.extents, pcfg.crop_offset),
                       binary=uncrop_axial(pred.binary, study.pet.extents, pcfg.crop_offset))
        write_prediction(full, out_dir, study.study_id)
    return f"wrote {len(studies)} predictions to {out_dir}"


def cmd_evaluate(cfg, args):
    paths = _paths(cfg)
    pred_dir = Path(args.pred_dir) if args.pred_dir else paths["output_dir"] / "predictions"
    conn = int(cfg["metrics"]["connectivity"])
    reports = []
    for sid in _split_ids(cfg, args.split):
        gt = read_volume(study_paths(paths["corpus_dir"], sid)["gt"], Modality.MASK)
        pred = read_volume(pred_dir / f"{sid}_pred.nii", Modality.MASK)
        reports.append(metrics.evaluate_study(sid, pred.voxels, gt.voxels, gt.spacing_mm, conn))
    summary = metrics.summarize(reports, args.submission_id)
    out = paths["output_dir"]
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(metrics.reports_csv(reports))
    (out / "summary.csv").write_text(metrics.summary_csv([summary]))
    return (f"{summary.submission_id}: dice={summary.mean_dice:.4f} "
            f"fpv_ml={summary.mean_fpv_ml:.4f} fnv_ml={summary.mean_fnv_ml:.4f} "
            f"({summary.n_studies} studies, {summary.n_healthy} healthy)")


def cmd_rank(cfg, args):
    cohort = []
    for path in args.summaries:
        try:
            cohort.extend(metrics.read_summary_csv(Path(path).read_text()))
        except (KeyError, ValueError) as exc:
            raise ConfigParse(f"{path} is not a summary table: {exc}") from None
    entries = metrics.rank_aggregate(cohort)
    out = _paths(cfg)["output_dir"]
    out.mkdir(parents=True, exist_ok=True)
    text = metrics.leaderboard_csv(entries)
    (out / "leaderboard.csv").write_text(text)
    return text.rstrip()


COMMANDS = {
    "phantom": cmd_phantom,
    "pretrain": cmd_pretrain,
    "train-gsm": cmd_train_gsm,
    "train-lrm": cmd_train_lrm,
    "infer": cmd_infer,
    "evaluate": cmd_evaluate,
    "rank": cmd_rank,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fpcascade", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("-c", "--config", help="YAML or JSON config file")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE", help="dotted-path override, e.g. plan.total_epochs=5")
        if name in ("train-gsm", "train-lrm"):
            p.add_argument("--fold", type=int, help="train one fold only")
        if name in ("infer", "evaluate"):
            p.add_argument("--split", choices=("test", "train", "all"), default="test")
        if name == "evaluate":
            p.add_argument("--pred-dir", help="directory holding <id>_pred.nii files")
            p.add_argument("--submission-id", default="submission")
        if name == "rank":
            p.add_argument("summaries", nargs="+", help="summary.csv files to rank")
    return parser


def _write_run_log(cfg, command, status):
    out = _paths(cfg)["output_dir"]
    out.mkdir(parents=True, exist_ok=True)
    fields = {"command": command, "status": status, "config_sha256": config_hash(cfg),
              "seed": cfg["seed"], "fpcascade": __version__, "python": platform.python_version(),
              "numpy": np.__version__, "scipy": scipy.__version__}
    with (out / "run.log").open("a") as fh:
        fh.write(" ".join(f"{k}={v}" for k, v in fields.items()) + "\n")
        fh.write("config " + json.dumps(cfg, sort_keys=True) + "\n")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    cfg = None
    try:
        cfg = load_config(args.config, args.overrides)
        validate(cfg)
        message = COMMANDS[args.command](cfg, args)
    except FpcError as exc:
        status = exc.exit_code
        print(f"error [{exc.code}]: {exc}", file=sys.stderr)
    except OSError as exc:
        status = 5
        print(f"error [io]: {exc}", file=sys.stderr)
    else:
        status = 0
        if message:
            print(message)
    if cfg is not None:
        try:
            _write_run_log(cfg, args.command, status)
        except OSError as exc:
            print(f"error [io]: cannot write run log: {exc}", file=sys.stderr)
            status = status or 5
    return status


if __name__ == "__main__":
    sys.exit(main())
