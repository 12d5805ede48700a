import json
import os

import numpy as np
import pytest

from test_data import wav_bytes

from ser_forge.cli import main, model_config_from, resolve_config
from ser_forge.data import read_cache
from ser_forge.errors import InvalidConfigError

TINY_TRAIN = {
    "train": {"epochs": 2, "batch_size": 8, "folds": 3, "seed": 11},
    "data": {"n_per_class": 3, "seed": 5},
}


def write_config(tmp_path, overrides, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(overrides))
    return str(path)


def make_manifest(tmp_path, n=3, seconds=1.0):
    rng = np.random.default_rng(0)
    rows = ["utterance_id,wav_path,label"]
    labels = ["angry", "sadness", "happiness", "neutral"]
    for i in range(n):
        wav_path = tmp_path / f"utt{i}.wav"
        samples = (rng.uniform(-0.3, 0.3, int(16000 * seconds)) * 32767).astype(np.int16)
        wav_path.write_bytes(wav_bytes(samples.tolist()))
        rows.append(f"utt{i},{wav_path},{labels[i % 4]}")
    manifest = tmp_path / "manifest.csv"
    manifest.write_text("\n".join(rows) + "\n")
    return str(manifest)


class TestConfigResolution:
    def test_defaults_round_trip(self):
        config = resolve_config()
        assert config["train"]["epochs"] == 150
        assert config["train"]["learning_rate"] == 1e-4
        assert config["model"]["eca"] == "proposed"

    def test_unknown_key_rejected(self, tmp_path):
        path = write_config(tmp_path, {"train": {"epoch": 3}})
        with pytest.raises(InvalidConfigError, match="train.epoch"):
            resolve_config(path)

    def test_seed_override_wins(self, tmp_path):
        path = write_config(tmp_path, {"train": {"seed": 1}})
        assert resolve_config(path, seed=99)["train"]["seed"] == 99

    def test_paper_best_preset(self):
        config = resolve_config(preset="paper-best")
        assert config["model"]["scale_n"] == 4
        assert config["data"]["augmentation"] == "descending"
        assert config["data"]["source"] == "manifest"
        model_cfg = model_config_from(config)
        assert model_cfg.eca_placement == ((5, 7), (6, 7))
        target = config["reference_target"]
        assert (target["ua"], target["wa"], target["acc"]) == (80.28, 80.46, 80.37)

    def test_explicit_eca_list(self, tmp_path):
        path = write_config(tmp_path, {"model": {"eca": [[4, 3], [6, 5]]}})
        model_cfg = model_config_from(resolve_config(path))
        assert model_cfg.eca_placement == ((4, 3), (6, 5))


class TestPreprocessCommand:
    def test_writes_caches_and_summary(self, tmp_path, capsys):
        manifest = make_manifest(tmp_path, n=3)
        out = tmp_path / "cache"
        code = main(["preprocess", "--manifest", manifest, "--versions", "1,8",
                     "--out", str(out)])
        assert code == 0
        files = sorted(os.listdir(out))
        assert len(files) == 6
        spec = read_cache(out / files[0])
        assert spec.data.shape == (601, 64)
        captured = capsys.readouterr().out
        assert "stride 160 samples" in captured
        assert "preprocessed 6 spectrograms" in captured

    def test_rerun_skips_and_keeps_bytes(self, tmp_path, capsys):
        manifest = make_manifest(tmp_path, n=2)
        out = tmp_path / "cache"
        assert main(["preprocess", "--manifest", manifest, "--versions", "2",
                     "--out", str(out)]) == 0
        blobs = {name: (out / name).read_bytes() for name in os.listdir(out)}
        assert main(["preprocess", "--manifest", manifest, "--versions", "2",
                     "--out", str(out)]) == 0
        assert "skipped 2 existing" in capsys.readouterr().out
        for name, blob in blobs.items():
            assert (out / name).read_bytes() == blob

    def test_failures_reported_nonzero_exit(self, tmp_path, capsys):
        manifest = make_manifest(tmp_path, n=2)
        with open(manifest, "a") as fh:
            fh.write(f"ghost,{tmp_path}/missing.wav,angry\n")
        out = tmp_path / "cache"
        code = main(["preprocess", "--manifest", manifest, "--versions", "3",
                     "--out", str(out)])
        assert code == 2
        assert len(os.listdir(out)) == 2
        assert "FAILED ghost" in capsys.readouterr().err

    def test_env_var_cache_dir(self, tmp_path, monkeypatch, capsys):
        manifest = make_manifest(tmp_path, n=1)
        cache = tmp_path / "envcache"
        monkeypatch.setenv("SER_FORGE_CACHE_DIR", str(cache))
        assert main(["preprocess", "--manifest", manifest, "--versions", "5"]) == 0
        assert len(os.listdir(cache)) == 1

    def test_worker_count_does_not_change_bytes(self, tmp_path):
        manifest = make_manifest(tmp_path, n=3)
        single = tmp_path / "single"
        pooled = tmp_path / "pooled"
        assert main(["preprocess", "--manifest", manifest, "--versions", "4,6",
                     "--out", str(single), "--threads", "1"]) == 0
        assert main(["preprocess", "--manifest", manifest, "--versions", "4,6",
                     "--out", str(pooled), "--threads", "3"]) == 0
        assert sorted(os.listdir(single)) == sorted(os.listdir(pooled))
        for name in os.listdir(single):
            assert (single / name).read_bytes() == (pooled / name).read_bytes()


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory):
    tmp_path = tmp_path_factory.mktemp("train")
    config_path = tmp_path / "config.json"
    config_path.write_text(json.dumps(TINY_TRAIN))
    run_dir = tmp_path / "run"
    code = main(["train", "--config", str(config_path), "--out", str(run_dir),
                 "--threads", "1"])
    assert code == 0
    return run_dir


class TestTrainCommand:
    def test_artifacts_present(self, trained_run):
        names = set(os.listdir(trained_run))
        assert {"metrics.json", "run_manifest.json", "confusion_matrix.csv",
                "loss_curves.csv"} <= names
        assert {f"ckpt_fold{k}.bin" for k in range(3)} <= names

    def test_metrics_keys(self, trained_run):
        metrics = json.loads((trained_run / "metrics.json").read_text())
        for key in ("ua", "wa", "acc"):
            assert 0.0 <= metrics[key] <= 1.0
        assert len(metrics["per_fold"]) == 3

    def test_manifest_echoes_full_config(self, trained_run):
        manifest = json.loads((trained_run / "run_manifest.json").read_text())
        config = manifest["config"]
        assert config["train"]["learning_rate"] == 1e-4  # default echoed
        assert config["train"]["epochs"] == 2
        assert config["data"]["n_per_class"] == 3
        assert manifest["input_hash"]
        assert manifest["seed"] == 11

    def test_confusion_matrix_row_sums_are_supports(self, trained_run):
        rows = (trained_run / "confusion_matrix.csv").read_text().strip().splitlines()
        totals = 0
        for line in rows[1:]:
            totals += sum(int(v) for v in line.split(",")[1:])
        assert totals == 12  # every utterance tested exactly once

    def test_validation_error_before_compute(self, tmp_path):
        config = write_config(tmp_path, {"train": {"folds": 1}})
        assert main(["train", "--config", config, "--out", str(tmp_path / "x")]) == 1


class TestEvaluateCommand:
    def test_replay_matches(self, trained_run, capsys):
        assert main(["evaluate", "--run", str(trained_run)]) == 0
        out = capsys.readouterr().out
        assert "matches stored metrics.json" in out
        replay = json.loads((trained_run / "evaluation_metrics.json").read_text())
        stored = json.loads((trained_run / "metrics.json").read_text())
        assert all(replay[k] == stored[k] for k in ("ua", "wa", "acc"))

    def test_missing_run_dir(self, tmp_path):
        assert main(["evaluate", "--run", str(tmp_path / "nope")]) == 1


class TestReportCommand:
    def test_report_renders_figures_and_weights(self, trained_run, capsys):
        assert main(["report", "--run", str(trained_run)]) == 0
        out = capsys.readouterr().out
        assert "per-class recall" in out
        report_dir = trained_run / "report"
        assert (report_dir / "confusion_matrix.png").exists()
        assert (report_dir / "loss_curves.png").exists()
        assert (report_dir / "eca_channel_weights.csv").exists()
        assert (report_dir / "eca_weights_layer5.png").exists()
        assert (report_dir / "eca_weights_layer6.png").exists()

        rows = (report_dir / "eca_channel_weights.csv").read_text().strip().splitlines()
        assert rows[0] == "layer,class,channel,mean_score"
        scores = [float(line.split(",")[3]) for line in rows[1:]]
        assert all(0.0 < s < 1.0 for s in scores)

    def test_no_eca_run_notes_omission(self, tmp_path, capsys):
        overrides = {"model": {"eca": "none"},
                     "train": {"epochs": 1, "batch_size": 8, "folds": 3, "seed": 2},
                     "data": {"n_per_class": 2, "seed": 5}}
        config = write_config(tmp_path, overrides)
        run_dir = tmp_path / "run"
        assert main(["train", "--config", config, "--out", str(run_dir)]) == 0
        assert main(["report", "--run", str(run_dir)]) == 0
        out = capsys.readouterr().out
        assert "skipping channel-weight report" in out
        assert not (run_dir / "report" / "eca_channel_weights.csv").exists()

    def test_missing_artifacts_listed(self, tmp_path, capsys):
        run_dir = tmp_path / "empty"
        run_dir.mkdir()
        assert main(["report", "--run", str(run_dir)]) == 1
        err = capsys.readouterr().err
        assert "run_manifest.json" in err and "metrics.json" in err


class TestSweepCommand:
    def _grid(self, tmp_path):
        grid = {
            "base": {"train": {"epochs": 1, "batch_size": 8, "folds": 3, "seed": 3},
                     "data": {"n_per_class": 2, "seed": 6}},
            "scale_n": [1, 2],
            "eca": ["none"],
            "versions": [1, 8],
        }
        path = tmp_path / "grid.json"
        path.write_text(json.dumps(grid))
        return str(path)

    def test_report_rows_and_params(self, tmp_path):
        grid = self._grid(tmp_path)
        out = tmp_path / "sweep"
        assert main(["sweep", "--grid", grid, "--out", str(out)]) == 0
        lines = (out / "report.csv").read_text().strip().splitlines()
        assert lines[0] == "version,config,ua,wa,acc,params,seed,error"
        assert len(lines) == 5  # 2 scales x 2 versions
        assert [line.split(",")[0] for line in lines[1:]] == ["1", "1", "8", "8"]
        by_config = {line.split(",")[1]: line.split(",") for line in lines[1:]}
        assert int(by_config["n1"][5]) == 172132  # closed-form scale-1 total
        for line in lines[1:]:
            fields = line.split(",")
            assert fields[7] == ""  # no errors
            assert 0.0 <= float(fields[4]) <= 1.0

        long_lines = (out / "report_long.csv").read_text().strip().splitlines()
        assert len(long_lines) == 1 + 4 * 3
        assert (out / "sweep_acc.png").exists()
        manifest = json.loads((out / "sweep_manifest.json").read_text())
        assert manifest["base_config"]["train"]["epochs"] == 1
        assert len(manifest["points"]) == 4

    def test_resume_skips_completed_points(self, tmp_path):
        grid = self._grid(tmp_path)
        out = tmp_path / "sweep"
        assert main(["sweep", "--grid", grid, "--out", str(out)]) == 0
        point_files = sorted((out / "points").iterdir())
        stamps = {p.name: p.stat().st_mtime_ns for p in point_files}
        assert main(["sweep", "--grid", grid, "--out", str(out)]) == 0
        for p in sorted((out / "points").iterdir()):
            assert p.stat().st_mtime_ns == stamps[p.name]

    def test_missing_grid_file(self, tmp_path):
        assert main(["sweep", "--grid", str(tmp_path / "none.json")]) == 1
