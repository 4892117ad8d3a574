import csv
import json
import os

import numpy as np
import pytest

from tailforge.exceptions import ConfigError, RecordMismatchError
from tailforge.runner import (
    ExperimentConfig,
    config_from_dict,
    ensemble_runs,
    load_config,
    run_experiment,
    run_ladder,
    standard_config,
    validate_stages,
)
from tailforge.synthbench import gen_dataset

CONFIGS = os.path.join(os.path.dirname(__file__), os.pardir, "configs")


@pytest.fixture
def quick(tmp_path):
    return load_config(os.path.join(CONFIGS, "quick.json")).replace(out_dir=str(tmp_path / "run"))


class TestConfig:
    def test_defaults_roundtrip(self):
        cfg = ExperimentConfig()
        assert config_from_dict(cfg.to_dict()) == cfg

    def test_standard_roundtrip(self):
        cfg = standard_config()
        assert config_from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg

    def test_shipped_configs_load(self):
        for name in ("standard.json", "quick.json"):
            load_config(os.path.join(CONFIGS, name))

    def test_standard_file_matches_recipe(self):
        cfg = load_config(os.path.join(CONFIGS, "standard.json"))
        assert cfg.replace(stages=["train", "eval"], out_dir="x") == \
            standard_config().replace(stages=["train", "eval"], out_dir="x")

    @pytest.mark.parametrize("obj", [
        {"unknown": 1},
        {"optim": {"learning_rate": 0.1}},
        {"optim": {"batch_size": "64"}},
        {"optim": {"batch_size": 6.5}},
        {"cleaning": {"relabel_enabled": 1}},
        {"dataset": []},
        {"stages": ["train", "bogus"]},
        {"dataset": {"imbalance_ratio": 500, "max_count": 200}},
    ])
    def test_rejects(self, obj):
        with pytest.raises(ConfigError):
            config_from_dict(obj)

    def test_integral_float_accepted(self):
        assert config_from_dict({"optim": {"batch_size": 32.0}}).optim.batch_size == 32

    def test_missing_and_bad_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "nope.json")
        (tmp_path / "bad.json").write_text("{")
        with pytest.raises(ConfigError):
            load_config(tmp_path / "bad.json")

    def test_hash_changes_with_any_field(self):
        base = ExperimentConfig()
        assert base.config_hash() == ExperimentConfig().config_hash()
        changed = [
            base.replace(seed=1),
            base.replace(ensemble_k=5),
            base.replace(out_dir="elsewhere"),
            config_from_dict({"optim": {"momentum": 0.8}}),
            config_from_dict({"tta": {"enlarge_factor": 1.5}}),
        ]
        hashes = {c.config_hash() for c in changed}
        assert len(hashes) == len(changed) and base.config_hash() not in hashes


class TestStages:
    @pytest.mark.parametrize("stages", [
        ["train", "eval"],
        ["train", "clean", "highres_finetune", "retrain_classifier", "tau_norm", "tta_eval"],
        ["train", "eval", "clean", "eval"],
        ["train", "subset_finetune", "tau_norm"],
    ])
    def test_valid(self, stages):
        assert validate_stages(stages) == stages

    @pytest.mark.parametrize("stages, pair", [
        ([], None),
        (["tau_norm", "train"], "tau_norm"),
        (["train", "tau_norm", "retrain_classifier"], "retrain_classifier"),
        (["train", "retrain_classifier", "clean"], "clean"),
        (["train", "clean", "clean"], "clean"),
        (["train", "train"], "train"),
    ])
    def test_invalid(self, stages, pair):
        with pytest.raises(ConfigError, match=pair):
            validate_stages(stages)


class TestRunExperiment:
    def test_baseline_manifest(self, quick):
        m = run_experiment(quick.replace(stages=["train", "eval"]))
        assert [s["stage"] for s in m["stages"]] == ["train", "eval"]
        assert m["config_hash"] == quick.replace(stages=["train", "eval"]).config_hash()
        root = quick.out_dir
        on_disk = json.loads(open(os.path.join(root, "manifest.json")).read())
        assert on_disk == m
        for stage in m["stages"]:
            for rel in stage["artifacts"].values():
                assert os.path.exists(os.path.join(root, rel))
        assert os.path.exists(os.path.join(root, "model", "manifest.json"))
        timings = json.loads(open(os.path.join(root, "timings.json")).read())
        assert [t["stage"] for t in timings] == ["train", "eval"]

    def test_full_pipeline_artifacts(self, quick):
        m = run_experiment(quick)
        root = quick.out_dir
        assert [s["stage"] for s in m["stages"]] == quick.stages
        assert m["cleaning_history"]["kept"] == m["stages"][1]["kept"]
        assert 0 <= m["stages"][3]["tau"] <= 1
        for rel in ("stage01_clean/confidence_histogram.csv", "stage01_clean/cleaning_history.json",
                    "stage01_clean/drop_mask_round0.u8", "stage03_tau_norm/tau_curve.csv"):
            assert os.path.exists(os.path.join(root, rel))

    def test_deterministic_and_prefix_stable(self, quick, tmp_path):
        a = run_experiment(quick, write=False)
        b = run_experiment(quick.replace(out_dir=str(tmp_path / "b")), write=False)
        assert [s["report"] for s in a["stages"]] == [s["report"] for s in b["stages"]]
        short = run_experiment(quick.replace(stages=quick.stages[:3]), write=False)
        assert [s["report"] for s in short["stages"]] == [s["report"] for s in a["stages"][:3]]

    def test_highres_stage(self, quick):
        cfg = quick.replace(stages=["train", "highres_finetune", "tta_eval"])
        m = run_experiment(cfg, write=False)
        assert m["stages"][1]["resolution"] == 36

    def test_subset_finetune_stage(self, quick):
        m = run_experiment(quick.replace(stages=["train", "subset_finetune"]), write=False)
        assert m["stages"][1]["subset_size"] > 0


class TestEnsembleRuns:
    def test_copies_equal_single(self, quick, tmp_path):
        m = run_experiment(quick.replace(stages=["train", "eval"]))
        train, val = gen_dataset(quick.dataset)
        path = os.path.join(quick.out_dir, "manifest.json")
        rep = ensemble_runs([path, path], val.labels, train.class_counts)
        assert rep.to_dict() == m["stages"][-1]["report"]

    def test_mismatched_ids(self, quick, tmp_path):
        run_experiment(quick.replace(stages=["train", "eval"]))
        other = quick.replace(stages=["train", "eval"], out_dir=str(tmp_path / "other"))
        m2 = run_experiment(other)
        preds = os.path.join(other.out_dir, m2["artifacts"]["predictions"])
        lines = open(preds).read().splitlines()
        with open(preds, "w") as fh:
            fh.write("\n".join(lines[1:]) + "\n")
        train, val = gen_dataset(quick.dataset)
        with pytest.raises(RecordMismatchError):
            ensemble_runs([os.path.join(quick.out_dir, "manifest.json"),
                           os.path.join(other.out_dir, "manifest.json")],
                          val.labels, train.class_counts)

    def test_needs_two(self):
        with pytest.raises(ConfigError):
            ensemble_runs([{}], np.zeros(1), [1])


class TestLadder:
    def test_table(self, quick):
        table = run_ladder(quick)
        names = [r[0] for r in table]
        assert names == ["baseline", "+data_cleaning", "+iterative_cleaning",
                         "+retrain_classifier", "+tau_norm", "+tta", "+highres_finetune",
                         "+3_model_ensemble"]
        assert sum(r[2] for r in table) == pytest.approx(table[-1][1] - table[0][1], abs=1e-12)
        with open(os.path.join(quick.out_dir, "ladder.csv")) as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["stage", "top1", "delta"] and len(rows) == 9
        seeds = [json.load(open(os.path.join(quick.out_dir, f"full_seed{s}", "manifest.json")))
                 ["config"]["seed"] for s in (quick.seed, quick.seed + 1, quick.seed + 2)]
        assert seeds == [quick.seed, quick.seed + 1, quick.seed + 2]
