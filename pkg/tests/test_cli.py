import io
import json

import pandas as pd
import pytest
from click.testing import CliRunner

from main import cli


@pytest.fixture
def runner(monkeypatch, tmp_path):
    monkeypatch.chdir(tmp_path)
    monkeypatch.delenv("CIMT_SEED", raising=False)
    monkeypatch.delenv("CIMT_WORKDIR", raising=False)
    return CliRunner()


@pytest.fixture
def config_file(tmp_path, tiny_config):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(tiny_config()))
    return path


class TestGen:
    def test_dry_run_writes_nothing(self, runner, tmp_path, config_file):
        result = runner.invoke(cli, ["gen", "--config", str(config_file), "--out", str(tmp_path / "data"),
                                     "--dry-run"])
        assert result.exit_code == 0, result.output
        assert "Dry run" in result.output
        assert not (tmp_path / "data").exists()

    def test_writes_dataset_relative_to_workdir(self, runner, tmp_path, config_file):
        result = runner.invoke(cli, ["--workdir", str(tmp_path), "--seed", "3", "gen", "--config", str(config_file),
                                     "--out", "data"])
        assert result.exit_code == 0, result.output
        manifest = json.loads((tmp_path / "data" / "manifest.json").read_text())
        assert manifest["base_seed"] == 3
        assert len(manifest["samples"]) == 10

    def test_bad_config_exits_2(self, runner, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"train": {"epoch": 1}}))
        result = runner.invoke(cli, ["gen", "--config", str(path), "--out", str(tmp_path / "d")])
        assert result.exit_code == 2
        assert "unknown config key: train.epoch" in result.output


class TestTrainEval:
    def test_missing_dataset_exits_3(self, runner, tmp_path, config_file):
        result = runner.invoke(cli, ["train", "--config", str(config_file), "--data", str(tmp_path / "none"),
                                     "--out", str(tmp_path / "run")])
        assert result.exit_code == 3

    def test_eval_and_compare(self, runner, tmp_path, trained):
        for preset in ("cimt", "unet-s4c"):
            result = runner.invoke(cli, ["eval", "--checkpoint", str(trained[preset] / "checkpoint"),
                                         "--data", str(trained["data"]), "--out", str(tmp_path / preset)])
            assert result.exit_code == 0, result.output
            assert (tmp_path / preset / "report.json").exists()
            assert (tmp_path / preset / "roc.csv").exists()

        result = runner.invoke(cli, ["compare", "--report-a", str(tmp_path / "cimt"),
                                     "--report-b", str(tmp_path / "unet-s4c"), "--csv"])
        assert result.exit_code == 0, result.output
        table = pd.read_csv(io.StringIO(result.output))
        assert list(table["metric"]) == ["AUC", "Sensitivity", "Specificity"]

        result = runner.invoke(cli, ["compare", "--report-a", str(tmp_path / "cimt"),
                                     "--report-b", str(tmp_path / "cimt")])
        assert result.exit_code == 0, result.output
        assert "DeLong" in result.output

    def test_compare_unpaired_exits_6(self, runner, tmp_path, trained):
        a = runner.invoke(cli, ["eval", "--checkpoint", str(trained["cimt"] / "checkpoint"),
                                "--data", str(trained["data"]), "--split", "val", "--out", str(tmp_path / "a")])
        b = runner.invoke(cli, ["eval", "--checkpoint", str(trained["cimt"] / "checkpoint"),
                                "--data", str(trained["data"]), "--out", str(tmp_path / "b")])
        assert a.exit_code == b.exit_code == 0
        result = runner.invoke(cli, ["compare", "--report-a", str(tmp_path / "a"), "--report-b", str(tmp_path / "b")])
        assert result.exit_code == 6

    def test_resume_with_foreign_seed_exits_5(self, runner, tmp_path, trained):
        result = runner.invoke(cli, ["--seed", "99", "train", "--config", str(trained["config"]),
                                     "--data", str(trained["data"]), "--out", str(trained["cimt"]),
                                     "--preset", "cimt", "--resume"])
        assert result.exit_code == 5


class TestGradcheck:
    def test_unknown_preset_rejected_by_click(self, runner):
        assert runner.invoke(cli, ["gradcheck", "--preset", "resnet"]).exit_code == 2

    @pytest.mark.slow
    def test_all_presets_pass(self, runner):
        result = runner.invoke(cli, ["gradcheck"])
        assert result.exit_code == 0, result.output
        assert "FAIL" not in result.output
