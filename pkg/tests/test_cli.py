import json
import shutil

import pytest
import yaml

from fpcascade.cli import DEFAULTS, config_hash, load_config, main
from fpcascade.engine import load_checkpoint
from fpcascade.errors import ConfigParse
from fpcascade.metrics import read_summary_csv

TINY = {
    "corpus": {"n_studies": 6, "n_test": 3, "extents": [16, 16, 8]},
    "preprocess": {"patch_xy": 16},
    "net": {"base_channels": 2, "depth": 2},
    "plan": {"total_epochs": 2},
    "pretrain": {"epochs": 2},
}


def _workspace(root, extra=None):
    cfg = json.loads(json.dumps(TINY))
    cfg["paths"] = {"corpus_dir": str(root / "corpus"), "checkpoint_dir": str(root / "ckpt"),
                    "output_dir": str(root / "out")}
    for key, value in (extra or {}).items():
        cfg.setdefault(key, {}).update(value)
    path = root / "cfg.yaml"
    path.write_text(yaml.safe_dump(cfg))
    return str(path)


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = _workspace(root)
    for cmd in ("phantom", "train-gsm", "train-lrm", "infer"):
        assert main([cmd, "-c", cfg]) == 0
    return root, cfg


class TestConfig:
    def test_defaults(self):
        assert load_config() == DEFAULTS

    def test_file_and_override(self, tmp_path):
        p = tmp_path / "c.yaml"
        p.write_text("net: {depth: 2}\n")
        cfg = load_config(p, ["net.base_channels=4", "fusion.external_dir=ext"])
        assert cfg["net"] == {"base_channels": 4, "depth": 2}
        assert cfg["fusion"]["external_dir"] == "ext"
        assert cfg["plan"] == DEFAULTS["plan"]

    def test_json_accepted(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"seed": 5}))
        assert load_config(p)["seed"] == 5

    @pytest.mark.parametrize("text", ["plan: {bogus: 1}\n", "net: 3\n", "- a\n", "a: [1,\n"])
    def test_bad_files(self, tmp_path, text):
        p = tmp_path / "c.yaml"
        p.write_text(text)
        with pytest.raises(ConfigParse):
            load_config(p)

    @pytest.mark.parametrize("item", ["nokey", "plan.nope=1", "zzz=1"])
    def test_bad_overrides(self, item):
        with pytest.raises(ConfigParse):
            load_config(None, [item])

    def test_hash_ignores_key_order(self):
        a = {"x": 1, "y": {"b": 2, "a": 3}}
        b = {"y": {"a": 3, "b": 2}, "x": 1}
        assert config_hash(a) == config_hash(b)
        assert config_hash(a) != config_hash({"x": 2, "y": {"a": 3, "b": 2}})


class TestExitCodes:
    def test_unknown_key_is_config_error(self, tmp_path):
        assert main(["phantom", "-c", _workspace(tmp_path), "--set", "plan.bogus=1"]) == 2

    @pytest.mark.parametrize("item", ["net.depth=0", "plan.batch_size=x", "fusion.w_ext=1.5",
                                      "metrics.connectivity=8", "cv.n_folds=0"])
    def test_invalid_value_is_config_error(self, tmp_path, item):
        assert main(["train-gsm", "-c", _workspace(tmp_path), "--set", item]) == 2

    def test_missing_corpus_is_io_error(self, tmp_path):
        assert main(["train-gsm", "-c", _workspace(tmp_path)]) == 5

    def test_missing_checkpoint(self, tmp_path):
        cfg = _workspace(tmp_path)
        assert main(["phantom", "-c", cfg]) == 0
        assert main(["infer", "-c", cfg]) == 3

    def test_test_split_larger_than_corpus(self, tmp_path):
        cfg = _workspace(tmp_path)
        assert main(["phantom", "-c", cfg]) == 0
        assert main(["train-gsm", "-c", cfg, "--set", "corpus.n_test=9"]) == 2

    def test_fold_out_of_range(self, tmp_path):
        cfg = _workspace(tmp_path)
        assert main(["phantom", "-c", cfg]) == 0
        assert main(["train-gsm", "-c", cfg, "--fold", "3"]) == 2

    def test_rank_needs_two(self, tmp_path):
        p = tmp_path / "s.csv"
        p.write_text("submission_id,mean_dice,mean_fpv_ml,mean_fnv_ml,n_studies,n_healthy\n"
                     "a,0.5,1.0,1.0,3,0\n")
        assert main(["rank", str(p), "--set", f"paths.output_dir={tmp_path}"]) == 3


class TestPipeline:
    def test_infer_writes_masks_and_provenance(self, trained):
        root, _ = trained
        pred = root / "out" / "predictions"
        for sid in ("study003", "study004", "study005"):
            for suffix in ("_pred.nii", "_prob.nii", "_provenance.json"):
                assert (pred / f"{sid}{suffix}").exists()
        meta = json.loads((pred / "study003_provenance.json").read_text())
        assert meta["models"] == [{"model_id": "fold0", "weight": 1.0}]

    def test_history_and_meta(self, trained):
        root, _ = trained
        lines = (root / "ckpt" / "gsm_fold0_history.txt").read_text().splitlines()
        assert len(lines) == 2
        _, manifest = load_checkpoint(root / "ckpt" / "lrm_fold0.ckpt")
        assert manifest["meta"]["kind"] == "lrm" and manifest["meta"]["patch_xy"] == 16
        assert len(manifest["meta"]["pet_dataset_stats"]) == 2

    def test_evaluate_on_ground_truth(self, trained, tmp_path):
        root, cfg = trained
        for sid in ("study003", "study004", "study005"):
            shutil.copy(root / "corpus" / f"{sid}_gt.nii", tmp_path / f"{sid}_pred.nii")
        out = tmp_path / "eval"
        assert main(["evaluate", "-c", cfg, "--pred-dir", str(tmp_path), "--submission-id", "gt",
                     "--set", f"paths.output_dir={out}"]) == 0
        (s,) = read_summary_csv((out / "summary.csv").read_text())
        assert s.submission_id == "gt" and s.n_studies == 3
        assert s.mean_fpv_ml == 0.0
        assert s.mean_dice in (1.0, None) and s.mean_fnv_ml in (0.0, None)

    def test_evaluate_and_rank_identical(self, trained, tmp_path):
        root, cfg = trained
        for name in ("a", "b"):
            assert main(["evaluate", "-c", cfg, "--submission-id", name,
                         "--pred-dir", str(root / "out" / "predictions"),
                         "--set", f"paths.output_dir={tmp_path / name}"]) == 0
        assert main(["rank", str(tmp_path / "a" / "summary.csv"), str(tmp_path / "b" / "summary.csv"),
                     "--set", f"paths.output_dir={tmp_path}"]) == 0
        rows = (tmp_path / "leaderboard.csv").read_text().splitlines()[1:]
        assert [r.split(",")[1] for r in rows] == ["a", "b"]
        assert rows[0].split(",")[2] == rows[1].split(",")[2]

    def test_run_log(self, trained):
        root, _ = trained
        text = (root / "out" / "run.log").read_text()
        assert "command=train-gsm status=0" in text and "numpy=" in text
        assert "timestamp" not in text
        cfg = json.loads(text.splitlines()[1].removeprefix("config "))
        assert cfg["net"] == {"base_channels": 2, "depth": 2}

    def test_train_gsm_twice_is_bitwise(self, trained):
        root, cfg = trained
        names = ("gsm_fold0.ckpt", "gsm_fold0_history.txt")
        first = [(root / "ckpt" / n).read_bytes() for n in names]
        assert main(["train-gsm", "-c", cfg]) == 0
        assert [(root / "ckpt" / n).read_bytes() for n in names] == first

    def test_pretrain_then_init(self, tmp_path):
        cfg = _workspace(tmp_path, {"plan": {"init_encoder": True}})
        assert main(["phantom", "-c", cfg]) == 0
        assert main(["train-gsm", "-c", cfg]) == 3
        assert main(["pretrain", "-c", cfg]) == 0
        assert main(["train-gsm", "-c", cfg]) == 0
