"""Tests for the command-line interface."""

from pathlib import Path

import pytest
import yaml
from typer.testing import CliRunner

from caption_lens import __version__
from caption_lens.cli import app

runner = CliRunner()
pytestmark = pytest.mark.integration


@pytest.fixture
def config_file(temp_dir: Path, desk_config_dict: dict) -> Path:
    path = temp_dir / "run.yaml"
    path.write_text(yaml.safe_dump(desk_config_dict), encoding="utf-8")
    return path


@pytest.fixture
def checkpoint(config_file: Path, temp_dir: Path) -> Path:
    result = runner.invoke(app, ["train", "-c", str(config_file)])
    assert result.exit_code == 0, result.output
    return temp_dir / "out" / "test" / "checkpoints" / "xe_final.ckpt"


def test_version() -> None:
    result = runner.invoke(app, ["version"])
    assert result.exit_code == 0
    assert f"Caption Lens version {__version__}" in result.output


class TestConfigCommand:
    def test_show(self, config_file: Path) -> None:
        result = runner.invoke(app, ["config", "-c", str(config_file)])

        assert result.exit_code == 0
        assert "Name: test" in result.output
        assert "intra=gea" in result.output

    def test_init(self, temp_dir: Path) -> None:
        target = temp_dir / "fresh.yaml"
        result = runner.invoke(app, ["config", "--init", str(target)])

        assert result.exit_code == 0
        assert yaml.safe_load(target.read_text(encoding="utf-8"))["run_name"] == "get"

    def test_schema(self) -> None:
        result = runner.invoke(app, ["config", "--schema"])
        assert result.exit_code == 0
        assert '"properties"' in result.output

    def test_missing_file(self, temp_dir: Path) -> None:
        result = runner.invoke(app, ["config", "-c", str(temp_dir / "absent.yaml")])
        assert result.exit_code == 1
        assert "Config file not found" in result.output


class TestStages:
    def test_train(self, checkpoint: Path) -> None:
        assert checkpoint.exists()
        assert (checkpoint.parents[1] / "config.yaml").exists()

    def test_train_output_override(self, config_file: Path, temp_dir: Path) -> None:
        result = runner.invoke(
            app,
            ["train", "-c", str(config_file), "--out", str(temp_dir / "other"), "--seed", "3"],
        )

        assert result.exit_code == 0, result.output
        assert (temp_dir / "other" / "test" / "checkpoints" / "xe_final.ckpt").exists()

    def test_invalid_override(self, config_file: Path) -> None:
        result = runner.invoke(
            app,
            ["finetune", "--checkpoint", "x.ckpt", "-c", str(config_file), "--beam", "1"],
        )
        assert result.exit_code == 1
        assert "scst_beam" in result.output

    def test_finetune(self, config_file: Path, checkpoint: Path) -> None:
        result = runner.invoke(
            app, ["finetune", "--checkpoint", str(checkpoint), "-c", str(config_file)]
        )

        assert result.exit_code == 0, result.output
        assert (checkpoint.parent / "scst_final.ckpt").exists()

    def test_caption(self, config_file: Path, checkpoint: Path) -> None:
        result = runner.invoke(
            app,
            [
                "caption",
                "img0000",
                "img0003",
                "--checkpoint",
                str(checkpoint),
                "-c",
                str(config_file),
            ],
        )

        assert result.exit_code == 0, result.output
        assert "img0003" in result.output
        captions = checkpoint.parents[1] / "captions" / "captions.jsonl"
        assert len(captions.read_text(encoding="utf-8").splitlines()) == 2

    def test_caption_unknown_image(self, config_file: Path, checkpoint: Path) -> None:
        result = runner.invoke(
            app, ["caption", "img9999", "--checkpoint", str(checkpoint), "-c", str(config_file)]
        )
        assert result.exit_code == 1
        assert "not in the dataset" in result.output

    def test_eval(self, config_file: Path, checkpoint: Path) -> None:
        result = runner.invoke(
            app, ["eval", "--checkpoint", str(checkpoint), "-c", str(config_file), "--beam", "1"]
        )

        assert result.exit_code == 0, result.output
        assert "CIDEr-D on train" in result.output

    def test_eval_without_val_split(self, config_file: Path, checkpoint: Path) -> None:
        result = runner.invoke(
            app,
            ["eval", "--checkpoint", str(checkpoint), "-c", str(config_file), "--split", "val"],
        )
        assert result.exit_code == 1
        assert "only a train split" in result.output

    def test_attribute(self, config_file: Path, checkpoint: Path) -> None:
        result = runner.invoke(
            app,
            [
                "attribute",
                "img0001",
                "--checkpoint",
                str(checkpoint),
                "-c",
                str(config_file),
                "--steps",
                "2",
                "--rule",
                "midpoint",
            ],
        )

        assert result.exit_code == 0, result.output
        assert (checkpoint.parents[1] / "captions" / "attribution_img0001.csv").exists()

    def test_missing_checkpoint(self, config_file: Path, temp_dir: Path) -> None:
        result = runner.invoke(
            app,
            ["caption", "--checkpoint", str(temp_dir / "absent.ckpt"), "-c", str(config_file)],
        )
        assert result.exit_code == 1
        assert "absent.ckpt" in result.output


def test_make_synthetic(config_file: Path, temp_dir: Path) -> None:
    result = runner.invoke(
        app, ["make-synthetic", str(temp_dir / "data"), "-c", str(config_file)]
    )

    assert result.exit_code == 0, result.output
    assert "4 images" in result.output
    assert (temp_dir / "data" / "manifest.tsv").exists()
    assert len(list((temp_dir / "data" / "features").glob("*.getf"))) == 4


def test_ablate_unknown_axis(config_file: Path) -> None:
    result = runner.invoke(app, ["ablate", "--axis", "heads", "-c", str(config_file)])
    assert result.exit_code == 1
    assert "Unknown ablation axis" in result.output


def test_ablate_layers(config_file: Path, temp_dir: Path) -> None:
    result = runner.invoke(app, ["ablate", "-c", str(config_file)])

    assert result.exit_code == 0, result.output
    assert (temp_dir / "out" / "test" / "ablation.csv").exists()


@pytest.mark.slow
@pytest.mark.gradcheck
def test_gradcheck(config_file: Path) -> None:
    result = runner.invoke(app, ["gradcheck", "-c", str(config_file)])

    assert result.exit_code == 0, result.output
    assert "All gradients match" in result.output
