"""CLI verbs, exit codes, resumability, and byte-identical reruns.

Uses a deliberately tiny experiment so the full phase chain runs in
seconds; the desk-scale defaults are exercised by the acceptance suite.
"""

import json
from pathlib import Path

import pytest

from cactusnet.cli import main
from cactusnet.config import config_from_dict, load_config
from cactusnet.errors import ConfigError

TINY = {
    "manifest": "manifest.json",
    "dataset": {"type": "synthetic", "classes_per_family": 4, "per_class": 60,
                "image_side": 12, "seed": 5, "num_known": 2,
                "num_objective_unknown": 1, "num_nonobjective_unknown": 1},
    "architecture": {
        "input_shape": [12, 12, 1],
        "layers": [
            {"kind": "Conv2D", "filters": 4, "kernel": [3, 3]},
            {"kind": "ReLU"},
            {"kind": "MaxPool2D", "kernel": [2, 2], "stride": 2},
            {"kind": "Flatten"},
            {"kind": "Dense", "units": 16},
            {"kind": "ReLU"},
            {"kind": "Dense", "units": 8},
            {"kind": "ReLU"},
            {"kind": "Dense", "units": 2},
            {"kind": "Softmax"},
        ]},
    "taps": [2, 5, 7],
    "k": 2,
    "train_fraction": 2.0 / 3.0,
    "decision_depth": 1,
    "threshold_reference_tap": 5,
    "threshold_final_tap": 7,
    "train": {"base": {"learning_rate": 0.05, "epochs": 6, "batch_size": 16},
              "pair": {"learning_rate": 0.05, "epochs": 2, "batch_size": 16},
              "predictor": {"learning_rate": 0.02, "epochs": 8,
                            "batch_size": 16}},
    "heldout_classes": [2],
    "workers": 1,
    "master_seed": 9,
    "out_dir": "out",
}


def write_tiny_config(base: Path, **tweaks) -> Path:
    doc = json.loads(json.dumps(TINY))
    doc.update(tweaks)
    path = base / "config.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True))
    return path


def run(cfg_path, *argv):
    return main(["--config", str(cfg_path), *argv])


@pytest.fixture(scope="module")
def pipeline_dir(tmp_path_factory):
    """One full tiny pipeline, shared by the read-only assertions."""
    base = tmp_path_factory.mktemp("tiny")
    cfg = write_tiny_config(base)
    assert run(cfg, "prepare") == 0
    assert run(cfg, "train-base") == 0
    assert run(cfg, "measure") == 0
    assert run(cfg, "train-predictors") == 0
    stream = base / "stream.json"
    stream.write_text(json.dumps({"type": "mock",
                                  "apps": [0.99, 0.97, 0.2, 0.2, 0.99]}))
    assert run(cfg, "cactus-run", str(stream)) == 0
    assert run(cfg, "report") == 0
    return base


class TestPipelineOutputs:
    def test_expected_files_exist(self, pipeline_dir):
        out = pipeline_dir / "out"
        for name in ("base.ckpt", "base_metrics.csv", "records.csv",
                     "applicability.csv", "subset_curves.csv",
                     "measure_meta.json", "predictor_summary.json",
                     "predictor_eval.csv", "growth_log.jsonl",
                     "verdict_histogram.csv"):
            assert (out / name).is_file(), name
        assert (out / "tree" / "tree.json").is_file()
        assert (out / "report" / "curves.csv").is_file()

    def test_record_count_is_classes_by_probes_by_layers(self, pipeline_dir):
        rows = (pipeline_dir / "out" / "records.csv").read_text().splitlines()
        assert len(rows) - 1 == 4 * 2 * 3  # measured * k * taps

    def test_subset_curves_shape(self, pipeline_dir):
        rows = (pipeline_dir / "out" / "subset_curves.csv").read_text().splitlines()
        assert rows[0] == "subset,layer,mean_app"
        assert len(rows) - 1 == 3 * 3  # subsets * taps

    def test_predictor_summary_shape(self, pipeline_dir):
        doc = json.loads((pipeline_dir / "out" / "predictor_summary.json").read_text())
        assert [e["layer"] for e in doc["layers"]] == [2, 5, 7]
        for entry in doc["layers"]:
            assert set(entry) == {"layer", "train_mse", "heldout_mse"}

    def test_fidelity_table_has_one_row_per_heldout_class(self, pipeline_dir):
        rows = (pipeline_dir / "out" / "report" / "predictor_fidelity.csv"
                ).read_text().splitlines()
        assert rows[0] == "class,subset,actual_app,mean_predicted,abs_err"
        assert len(rows) - 1 == 1  # one held-out class in the tiny config

    def test_eval_csv_covers_every_layer(self, pipeline_dir):
        rows = (pipeline_dir / "out" / "predictor_eval.csv"
                ).read_text().splitlines()
        assert rows[0] == "class,subset,layer,actual_app,mean_predicted,abs_err"
        assert len(rows) - 1 == 1 * 3  # one held-out class, three taps

    def test_growth_log_is_json_lines(self, pipeline_dir):
        lines = (pipeline_dir / "out" / "growth_log.jsonl").read_text().splitlines()
        assert len(lines) == 1 + 5  # header + one decision per input
        for line in lines[1:]:
            assert "verdict" in json.loads(line)


class TestExitCodes:
    def test_missing_manifest_exits_2_no_partial_outputs(self, tmp_path):
        cfg = write_tiny_config(tmp_path)
        assert run(cfg, "train-base") == 2
        assert not (tmp_path / "out").exists()

    def test_missing_config_exits_2(self, tmp_path):
        assert main(["--config", str(tmp_path / "nope.json"), "train-base"]) == 2

    def test_invalid_json_config_exits_2(self, tmp_path):
        path = tmp_path / "config.json"
        path.write_text("{not json")
        assert main(["--config", str(path), "train-base"]) == 2

    def test_bad_decision_depth_exits_2(self, tmp_path):
        cfg = write_tiny_config(tmp_path, decision_depth=99)
        assert run(cfg, "prepare") == 2

    def test_measure_before_train_base_exits_2(self, tmp_path):
        cfg = write_tiny_config(tmp_path)
        assert run(cfg, "prepare") == 0
        assert run(cfg, "measure") == 2

    def test_leaky_heldout_exits_2(self, tmp_path):
        cfg = write_tiny_config(tmp_path, heldout_classes=[999])
        assert run(cfg, "prepare") == 0
        assert run(cfg, "train-base") == 0
        assert run(cfg, "measure") == 0
        assert run(cfg, "train-predictors") == 2

    def test_empty_stream_is_ok(self, tmp_path):
        cfg = write_tiny_config(tmp_path)
        for verb in ("prepare", "train-base", "measure", "train-predictors"):
            assert run(cfg, verb) == 0
        stream = tmp_path / "empty.json"
        stream.write_text(json.dumps({"type": "mock", "apps": []}))
        assert run(cfg, "cactus-run", str(stream)) == 0
        lines = (tmp_path / "out" / "growth_log.jsonl").read_text().splitlines()
        assert len(lines) == 1  # header only, no decisions


def test_module_entry_point(tmp_path):
    import subprocess
    import sys
    proc = subprocess.run(
        [sys.executable, "-m", "cactusnet", "--config",
         str(tmp_path / "missing.json"), "train-base"],
        capture_output=True, text=True)
    assert proc.returncode == 2
    assert "not found" in proc.stderr


class TestConfig:
    def test_env_override(self, tmp_path, monkeypatch):
        cfg_path = write_tiny_config(tmp_path)
        monkeypatch.setenv("CNL_MASTER_SEED", "123")
        cfg = load_config(cfg_path)
        assert cfg.master_seed == 123

    def test_cli_override_beats_env(self, tmp_path, monkeypatch):
        cfg_path = write_tiny_config(tmp_path)
        monkeypatch.setenv("CNL_MASTER_SEED", "123")
        cfg = load_config(cfg_path, cli_overrides={"master_seed": 7})
        assert cfg.master_seed == 7

    def test_bad_env_value_rejected(self, tmp_path, monkeypatch):
        cfg_path = write_tiny_config(tmp_path)
        monkeypatch.setenv("CNL_MASTER_SEED", "not-a-number")
        with pytest.raises(ConfigError):
            load_config(cfg_path)

    def test_default_document_validates(self):
        from cactusnet.config import default_config_dict
        config_from_dict(default_config_dict()).validate()


def run_full(base: Path, workers=1):
    cfg = write_tiny_config(base, workers=workers)
    for verb in ("prepare", "train-base", "measure", "train-predictors"):
        assert run(cfg, verb) == 0
    stream = base / "stream.json"
    stream.write_text(json.dumps({"type": "mock", "apps": [0.99, 0.2, 0.2]}))
    assert run(cfg, "cactus-run", str(stream)) == 0
    assert run(cfg, "report") == 0


COMPARED = ["out/base.ckpt", "out/base_metrics.csv", "out/records.csv",
            "out/applicability.csv", "out/subset_curves.csv",
            "out/measure_meta.json", "out/predictor_summary.json",
            "out/predictor_eval.csv", "out/predictor_tap02.ckpt",
            "out/growth_log.jsonl", "out/tree/tree.json",
            "out/verdict_histogram.csv", "out/report/curves.csv",
            "out/report/growth_summary.json", "manifest.json"]


class TestDeterminism:
    @pytest.mark.slow
    def test_reruns_are_byte_identical(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        a.mkdir(), b.mkdir()
        run_full(a, workers=1)
        run_full(b, workers=2)  # worker count must not change results
        for name in COMPARED:
            assert (a / name).read_bytes() == (b / name).read_bytes(), name

    def test_measure_resume_matches_uninterrupted(self, tmp_path):
        base = tmp_path / "r"
        base.mkdir()
        cfg = write_tiny_config(base)
        assert run(cfg, "prepare") == 0
        assert run(cfg, "train-base") == 0
        assert run(cfg, "measure") == 0
        records = base / "out" / "records.csv"
        full = records.read_bytes()
        # simulate an interrupted sweep: keep only the first 7 records
        lines = full.decode().splitlines(keepends=True)
        records.write_text("".join(lines[:8]))
        assert run(cfg, "measure") == 0
        assert records.read_bytes() == full

    def test_rerun_after_completion_is_idempotent(self, tmp_path):
        base = tmp_path / "i"
        base.mkdir()
        cfg = write_tiny_config(base)
        for verb in ("prepare", "train-base", "measure"):
            assert run(cfg, verb) == 0
        table = (base / "out" / "applicability.csv").read_bytes()
        assert run(cfg, "measure") == 0
        assert (base / "out" / "applicability.csv").read_bytes() == table
