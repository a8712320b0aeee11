"""Tests for stage and sweep progress tracking."""

import logging
from unittest.mock import MagicMock

import pytest

from caption_lens.core.exceptions import ConfigurationError
from caption_lens.core.progress_tracker import (
    ProgressTracker,
    StageProgress,
    StageStatus,
    SweepProgress,
)


class TestStageProgress:
    def test_fraction_and_summary(self):
        progress = StageProgress("xe", "XE training", total_steps=4, step=1)
        progress.metrics["loss"] = 2.0
        assert progress.fraction == 0.25
        assert progress.summary() == "step 1/4 loss=2.0000"

    def test_eta_from_rate(self):
        progress = StageProgress("xe", "XE", total_steps=10, step=2, elapsed_seconds=4.0)
        assert progress.steps_per_second == 0.5
        assert progress.eta_seconds == 16.0

    def test_eta_unknown_before_first_step(self):
        progress = StageProgress("xe", "XE", total_steps=10)
        assert progress.steps_per_second is None
        assert progress.eta_seconds is None

    def test_eta_of_finished_stages(self):
        done = StageProgress("xe", "XE", total_steps=3, status=StageStatus.COMPLETED)
        failed = StageProgress("xe", "XE", total_steps=3, status=StageStatus.FAILED)
        assert done.eta_seconds == 0.0
        assert failed.eta_seconds is None


class TestProgressTracker:
    def test_start_operation(self):
        tracker = ProgressTracker()

        progress = tracker.start_operation("xe", "XE training", 5, {"stage": "xe"})

        assert tracker.get("xe") is progress
        assert progress.status is StageStatus.RUNNING
        assert progress.step == 0
        assert progress.total_steps == 5
        assert progress.details == {"stage": "xe"}

    def test_zero_steps_count_as_one(self):
        tracker = ProgressTracker()
        assert tracker.start_operation("op", "Op", 0).total_steps == 1

    def test_advance_records_step_and_metrics(self):
        tracker = ProgressTracker()
        tracker.start_operation("xe", "XE training", 4)

        tracker.advance("xe", 2, {"loss": 1.5})
        tracker.advance("xe", 3, {"lr": 0.1})

        progress = tracker.get("xe")
        assert progress is not None
        assert progress.step == 3
        assert progress.metrics == {"loss": 1.5, "lr": 0.1}

    def test_step_is_clamped(self):
        tracker = ProgressTracker()
        tracker.start_operation("op", "Op", 2)

        tracker.advance("op", 7)

        assert tracker.stages["op"].step == 2

    def test_complete_and_fail(self):
        tracker = ProgressTracker()
        tracker.start_operation("xe", "XE", 10)
        tracker.start_operation("scst", "SCST", 10)
        tracker.advance("scst", 4)

        tracker.complete_operation("xe", {"loss": 0.1})
        tracker.fail_operation("scst", "diverged")

        assert tracker.stages["xe"].status is StageStatus.COMPLETED
        assert tracker.stages["xe"].step == 10
        assert tracker.stages["xe"].metrics == {"loss": 0.1}
        assert tracker.stages["scst"].status is StageStatus.FAILED
        assert tracker.stages["scst"].step == 4
        assert tracker.stages["scst"].error == "diverged"

    def test_unknown_stage_is_ignored(self, caplog):
        tracker = ProgressTracker()
        with caplog.at_level(logging.WARNING, logger="caption_lens"):
            tracker.advance("missing", 1)
            tracker.complete_operation("missing")
            tracker.fail_operation("missing", "boom")
        assert tracker.stages == {}
        assert "unknown stage: missing" in caplog.text

    def test_listeners(self):
        tracker = ProgressTracker()
        listener = MagicMock()
        tracker.subscribe(listener)

        tracker.start_operation("op", "Op", 2)
        tracker.advance("op", 1)
        tracker.unsubscribe(listener)
        tracker.advance("op", 2)

        assert listener.call_count == 2
        assert listener.call_args.args[0].stage == "op"

    def test_failing_listener_does_not_break_tracking(self):
        tracker = ProgressTracker()
        tracker.subscribe(MagicMock(side_effect=RuntimeError("boom")))

        tracker.start_operation("op", "Op")
        tracker.advance("op", 1)

        assert tracker.stages["op"].step == 1


class TestSweepProgress:
    def test_each_run_is_one_step(self):
        tracker = ProgressTracker()
        sweep = SweepProgress(tracker, "ablate", "Ablation", ["L=2", "L=3"])

        with sweep.run("L=2"):
            pass
        assert tracker.stages["ablate"].step == 1
        assert tracker.stages["ablate"].status is StageStatus.RUNNING

        with sweep.run("L=3"):
            pass
        assert tracker.stages["ablate"].status is StageStatus.COMPLETED
        assert tracker.stages["ablate"].details == {"runs": ["L=2", "L=3"]}
        assert sweep.finished == ["L=2", "L=3"]

    def test_failing_run_fails_sweep(self):
        tracker = ProgressTracker()
        sweep = SweepProgress(tracker, "ablate", "Ablation", ["a", "b"])

        with pytest.raises(ConfigurationError), sweep.run("a"):
            raise ConfigurationError("Cannot train on an empty dataset", "data")

        progress = tracker.stages["ablate"]
        assert progress.status is StageStatus.FAILED
        assert progress.error is not None
        assert progress.error.startswith("a: ")
        assert sweep.finished == []

    def test_without_tracker(self):
        sweep = SweepProgress(None, "ablate", "Ablation", ["a"])
        with sweep.run("a"):
            pass
        assert sweep.finished == ["a"]
