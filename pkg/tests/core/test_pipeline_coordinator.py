"""Tests for the pipeline coordinator stages on a tiny synthetic run."""

import json
from pathlib import Path

import pytest

from caption_lens.core.exceptions import CaptionLensError, CheckpointError, ConfigurationError
from caption_lens.core.pipeline_coordinator import (
    COMPONENT_AXIS,
    GRADCHECK_CONTROLLERS,
    GRADCHECK_FUSIONS,
    LAYER_AXIS,
    PipelineCoordinator,
)
from caption_lens.core.progress_tracker import ProgressTracker, StageStatus
from caption_lens.data.dataset import write_synthetic_dataset
from caption_lens.data.vocab import EOS_ID
from caption_lens.model.checkpoint import load_checkpoint
from caption_lens.utils.config import RunConfig, build_config, load_config


@pytest.fixture
def config(desk_config_dict: dict) -> RunConfig:
    return build_config(desk_config_dict)


@pytest.fixture
def coordinator(config: RunConfig) -> PipelineCoordinator:
    return PipelineCoordinator(config)


@pytest.fixture
def checkpoint(coordinator: PipelineCoordinator) -> Path:
    result = coordinator.train()
    assert result.checkpoint is not None
    return result.checkpoint


class TestSetup:
    def test_run_directory_layout(self, coordinator: PipelineCoordinator):
        run_dir = coordinator.prepare_run_dir()

        for sub in ("checkpoints", "logs", "captions"):
            assert (run_dir / sub).is_dir()
        assert load_config(run_dir / "config.yaml") == coordinator.config

    def test_synthetic_dataset_uses_config(self, coordinator: PipelineCoordinator):
        dataset = coordinator.synthetic_dataset()

        assert len(dataset) == 4
        assert dataset.max_len == coordinator.config.model.max_len + 1
        assert dataset.features.feature_dim == 8

    def test_synthetic_has_no_val_split(self, coordinator: PipelineCoordinator):
        with pytest.raises(ConfigurationError, match="only a train split"):
            coordinator.load_dataset("val")

    def test_invalid_config_rejected(self, desk_config_dict: dict, temp_dir: Path):
        desk_config_dict["data"] = {
            "source": "files",
            "captions_path": str(temp_dir / "missing.tsv"),
            "manifest_path": str(temp_dir / "missing_manifest.tsv"),
        }
        with pytest.raises(ConfigurationError) as excinfo:
            PipelineCoordinator(build_config(desk_config_dict))
        assert len(excinfo.value.violations) == 2


class TestStages:
    def test_train(self, coordinator: PipelineCoordinator, checkpoint: Path):
        run_dir = coordinator.run_dir

        assert checkpoint == run_dir / "checkpoints" / "xe_final.ckpt"
        assert (run_dir / "checkpoints" / "xe_step000002.ckpt").exists()
        assert (run_dir / "logs" / "xe_loss.jsonl").exists()
        _, metadata = load_checkpoint(checkpoint)
        assert metadata["model"]["d_model"] == 8
        assert metadata["step"] == 3

    def test_finetune(self, config: RunConfig, checkpoint: Path):
        result = PipelineCoordinator(config).finetune(checkpoint)

        assert result.stage == "scst"
        assert result.steps == 2
        assert result.checkpoint == config.run_dir / "checkpoints" / "scst_final.ckpt"

    def test_caption(self, coordinator: PipelineCoordinator, checkpoint: Path):
        run = coordinator.caption(checkpoint, ["img0002", "img0000"])

        assert [r.image_id for r in run.records] == ["img0002", "img0000"]
        assert run.score is None
        assert run.output_path == coordinator.run_dir / "captions" / "captions.jsonl"
        lines = run.output_path.read_text(encoding="utf-8").splitlines()
        assert json.loads(lines[0])["image_id"] == "img0002"
        for record in run.records:
            assert record.forced or record.tokens[-1] == EOS_ID

    def test_evaluate(self, coordinator: PipelineCoordinator, checkpoint: Path):
        run = coordinator.evaluate(checkpoint)

        assert run.score is not None
        assert run.score.count == 4
        assert 0.0 <= run.score.mean <= 10.0
        assert all(r.cider is not None for r in run.records)
        assert run.output_path.name == "eval_train.jsonl"

    def test_attribute(self, coordinator: PipelineCoordinator, checkpoint: Path):
        result, paths = coordinator.attribute(checkpoint, "img0001")

        assert result.image_id == "img0001"
        assert result.steps == 4
        assert all(EOS_ID != w.token_id for w in result.words)
        assert [p.suffix for p in paths] == [".json", ".csv"]
        assert all(p.exists() for p in paths)

    def test_restore_checks_vocabulary(
        self, desk_config_dict: dict, checkpoint: Path
    ):
        desk_config_dict["data"]["synthetic"]["vocab_size"] = 22
        with pytest.raises(CheckpointError, match="vocabulary"):
            PipelineCoordinator(build_config(desk_config_dict)).restore(checkpoint)

    def test_restore_checks_model(self, desk_config_dict: dict, checkpoint: Path):
        desk_config_dict["model"]["controller"] = "gac"
        with pytest.raises(CheckpointError) as excinfo:
            PipelineCoordinator(build_config(desk_config_dict)).restore(checkpoint)
        assert "controller" in excinfo.value.details["fields"]

    def test_missing_checkpoint(self, coordinator: PipelineCoordinator, temp_dir: Path):
        with pytest.raises(CaptionLensError, match="Checkpoint not found"):
            coordinator.caption(temp_dir / "absent.ckpt")


class TestFileSource:
    def test_train_and_evaluate_val(
        self, desk_config_dict: dict, synthetic_dataset, temp_dir: Path
    ):
        paths = write_synthetic_dataset(synthetic_dataset, temp_dir / "data")
        desk_config_dict["data"] = {
            "source": "files",
            "captions_path": str(paths["captions"]),
            "manifest_path": str(paths["manifest"]),
            "val_captions_path": str(paths["captions"]),
            "val_manifest_path": str(paths["manifest"]),
        }
        coordinator = PipelineCoordinator(build_config(desk_config_dict))

        checkpoint = coordinator.train().checkpoint
        run = coordinator.evaluate(checkpoint, "val")

        assert run.score is not None
        assert run.score.count == len(synthetic_dataset)
        assert run.output_path.name == "eval_val.jsonl"
        with pytest.raises(ConfigurationError):
            coordinator.load_dataset("test")


class TestGradcheckAndAblation:
    @pytest.mark.slow
    @pytest.mark.gradcheck
    def test_gradcheck_every_controller_and_fusion(self, coordinator: PipelineCoordinator):
        reports = coordinator.gradcheck()

        assert [label for label, _ in reports] == [
            f"{c}/{f}" for c in GRADCHECK_CONTROLLERS for f in GRADCHECK_FUSIONS
        ]
        for label, report in reports:
            assert report.passed, (label, report.failures)
            assert all(p.entries_checked <= 2 for p in report.parameters)

    @pytest.mark.gradcheck
    def test_gradcheck_writes_resolved_config(
        self, monkeypatch, coordinator: PipelineCoordinator, config: RunConfig
    ):
        monkeypatch.setattr(
            "caption_lens.core.pipeline_coordinator.GRADCHECK_CONTROLLERS", ("mac",)
        )
        monkeypatch.setattr(
            "caption_lens.core.pipeline_coordinator.GRADCHECK_FUSIONS", ("lstm",)
        )

        reports = coordinator.gradcheck()

        assert [label for label, _ in reports] == ["mac/lstm"]
        saved = load_config(config.run_dir / "config.yaml")
        assert saved.gradcheck == config.gradcheck
        assert saved.seed == config.seed

    def test_component_variants(self, coordinator: PipelineCoordinator):
        variants = dict(coordinator._variants("components"))
        assert set(variants) == {name for name, *_ in COMPONENT_AXIS}
        assert variants["g0+mac"].intra_layer == "g0"

    def test_ablate_layers(self, coordinator: PipelineCoordinator):
        tracker = ProgressTracker()
        coordinator.tracker = tracker

        rows, paths = coordinator.ablate("layers")

        assert [row.layers for row in rows] == list(LAYER_AXIS)
        assert all(row.steps == 3 for row in rows)
        assert all(0.0 <= row.cider <= 10.0 for row in rows)
        assert paths["json"].exists() and paths["csv"].exists()
        progress = tracker.get("ablate")
        assert progress is not None
        assert progress.status is StageStatus.COMPLETED
        assert progress.step == len(LAYER_AXIS)

    @pytest.mark.slow
    def test_ablate_components(self, coordinator: PipelineCoordinator):
        rows, _ = coordinator.ablate("components")
        assert [row.name for row in rows] == [name for name, *_ in COMPONENT_AXIS]

    def test_unknown_axis(self, coordinator: PipelineCoordinator):
        with pytest.raises(ConfigurationError, match="axis"):
            coordinator.ablate("heads")
