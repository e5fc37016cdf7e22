"""End-to-end command-line tests: precedence rules and exit codes.

Exit code contract: 0 success, 1 usage error, 2 data error, 3 numerical
failure.
"""

import json

import pytest

from dfdeblur import cli, trainer
from dfdeblur.data import DatasetManifest


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("clids") / "ds"
    code = cli.main(["synth", "--count", "2", "--size", "32", "--seed", "3",
                     "--out", str(root)])
    assert code == 0
    return root


def run_config(dataset, tmp_path, **extra):
    lines = {
        "epochs": "2",
        "batch_size": "2",
        "width_scale": "0.0625",
        "eval_split": "train",
        "augment_flip": "false",
        "manifest": str(dataset),
        "out_dir": str(tmp_path / "run"),
    }
    lines.update({k: str(v) for k, v in extra.items()})
    path = tmp_path / "run.cfg"
    body = "# micro run\n" + "\n".join(f"{k} = {v}" for k, v in lines.items())
    path.write_text(body + "\n")
    return path


def logged_config(out_dir):
    records = trainer.RunLog.load(out_dir / "runlog.jsonl")
    return next(r for r in records if r["event"] == "config")["config"]


class TestParsing:
    def test_help_exits_zero(self, capsys):
        assert cli.main(["--help"]) == 0
        assert "synth" in capsys.readouterr().out

    def test_subcommand_help_lists_flags(self, capsys):
        assert cli.main(["synth", "--help"]) == 0
        out = capsys.readouterr().out
        for flag in ("--count", "--size", "--depth-range", "--focus-distance",
                     "--seed", "--out"):
            assert flag in out

    def test_unknown_flag_is_usage_error(self, capsys):
        assert cli.main(["synth", "--out", "x", "--frobnicate"]) == 1

    def test_missing_subcommand_is_usage_error(self):
        assert cli.main([]) == 1

    def test_unknown_config_key_is_usage_error(self, dataset, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("no_such_knob = 1\n")
        assert cli.main(["train", "--config", str(cfg)]) == 1
        assert "no_such_knob" in capsys.readouterr().err

    def test_malformed_config_line_is_usage_error(self, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("epochs 5\n")
        assert cli.main(["train", "--config", str(cfg)]) == 1

    def test_bad_value_type_is_usage_error(self, dataset, tmp_path):
        cfg = run_config(dataset, tmp_path, epochs="soon")
        assert cli.main(["train", "--config", str(cfg)]) == 1

    def test_missing_manifest_flag_is_usage_error(self, tmp_path):
        assert cli.main(["train", "--out", str(tmp_path)]) == 1


class TestPrecedence:
    def test_flags_beat_file(self, dataset, tmp_path):
        cfg = run_config(dataset, tmp_path, epochs="2")
        out = tmp_path / "override"
        assert cli.main(["train", "--config", str(cfg), "--epochs", "3",
                         "--out", str(out)]) == 0
        assert logged_config(out)["epochs"] == 3

    def test_env_beats_file_and_flags_beat_env(self, dataset, tmp_path, monkeypatch):
        cfg = run_config(dataset, tmp_path, epochs="2")
        monkeypatch.setenv("DFDEBLUR_EPOCHS", "4")
        out_env = tmp_path / "env"
        assert cli.main(["train", "--config", str(cfg), "--out", str(out_env)]) == 0
        assert logged_config(out_env)["epochs"] == 4
        out_flag = tmp_path / "flag"
        assert cli.main(["train", "--config", str(cfg), "--epochs", "5",
                         "--out", str(out_flag)]) == 0
        assert logged_config(out_flag)["epochs"] == 5

    def test_file_beats_defaults(self, dataset, tmp_path):
        cfg = run_config(dataset, tmp_path, batch_size="2")
        assert cli.main(["train", "--config", str(cfg)]) == 0
        assert logged_config(tmp_path / "run")["batch_size"] == 2


class TestSynth:
    def test_deterministic_output(self, tmp_path):
        for d in ("a", "b"):
            assert cli.main(["synth", "--count", "2", "--size", "32",
                             "--seed", "9", "--out", str(tmp_path / d)]) == 0
        a = (tmp_path / "a" / "manifest.txt").read_bytes()
        b = (tmp_path / "b" / "manifest.txt").read_bytes()
        assert a == b

    def test_rectangular_size(self, tmp_path):
        assert cli.main(["synth", "--count", "1", "--size", "32x64",
                         "--out", str(tmp_path / "r")]) == 0
        m = DatasetManifest.load(tmp_path / "r")
        from dfdeblur.data import load_sample
        s = load_sample(m, m.ids()[0])
        assert s.aif.shape == (3, 32, 64)

    def test_bad_size_is_usage_error(self, tmp_path):
        assert cli.main(["synth", "--size", "tiny", "--out", str(tmp_path)]) == 1

    def test_bad_depth_range_is_usage_error(self, tmp_path):
        assert cli.main(["synth", "--depth-range", "3.0,0.5",
                         "--out", str(tmp_path)]) == 1


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    base = tmp_path_factory.mktemp("trained")
    cfg = run_config(dataset, base)
    assert cli.main(["train", "--config", str(cfg)]) == 0
    return base / "run"


class TestTrainEvalInfer:
    def test_train_writes_artifacts(self, trained):
        assert (trained / "model.ckpt").exists()
        assert (trained / "runlog.jsonl").exists()
        assert (trained / "model.ckpt.config.json").exists()

    def test_eval_writes_table(self, dataset, trained, tmp_path, capsys):
        out = tmp_path / "eval"
        code = cli.main(["eval", "--checkpoint", str(trained / "model.ckpt"),
                         "--manifest", str(dataset), "--split", "train",
                         "--out", str(out)])
        assert code == 0
        lines = (out / "eval.csv").read_text().strip().splitlines()
        assert lines[0] == "split,rmse,abs_rel,delta1,delta2,delta3,psnr,ssim"
        report = json.loads((out / "report.json").read_text())
        assert report["sample_count"] == 2

    def test_eval_empty_split_is_data_error(self, dataset, trained, tmp_path):
        code = cli.main(["eval", "--checkpoint", str(trained / "model.ckpt"),
                         "--manifest", str(dataset), "--split", "val",
                         "--out", str(tmp_path / "e")])
        assert code == 2

    def test_eval_missing_checkpoint_is_data_error(self, dataset, tmp_path):
        code = cli.main(["eval", "--checkpoint", str(tmp_path / "nope.ckpt"),
                         "--manifest", str(dataset), "--split", "train",
                         "--out", str(tmp_path / "e")])
        assert code == 2

    def test_train_missing_dataset_is_data_error(self, tmp_path):
        code = cli.main(["train", "--manifest", str(tmp_path / "missing"),
                         "--out", str(tmp_path / "o"), "--epochs", "1"])
        assert code == 2

    def test_infer_end_to_end(self, dataset, trained, tmp_path, capsys):
        m = DatasetManifest.load(dataset)
        sid = m.ids("train")[0]
        image = dataset / m.entry(sid).image
        out = tmp_path / "infer"
        code = cli.main(["infer", "--checkpoint", str(trained / "model.ckpt"),
                         "--out", str(out), str(image)])
        assert code == 0
        produced = sorted(p.name for p in out.iterdir())
        assert produced == sorted([f"{image.stem}_deblurred.png",
                                   f"{image.stem}_depth.pfm",
                                   f"{image.stem}_depth.png"])

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_is_numerical_failure(self, dataset, tmp_path):
        cfg = run_config(dataset, tmp_path, learning_rate="1e12", epochs="30")
        assert cli.main(["train", "--config", str(cfg)]) == 3


class TestGradcheckCommand:
    def test_clean_run_exits_zero(self, capsys):
        assert cli.main(["gradcheck", "--instances", "1"]) == 0
        out = capsys.readouterr().out
        assert "gradient checks passed" in out

    def test_injected_bug_exits_three(self, capsys):
        assert cli.main(["gradcheck", "--instances", "1",
                         "--inject-bug", "relu"]) == 3
        assert "FAIL" in capsys.readouterr().out
