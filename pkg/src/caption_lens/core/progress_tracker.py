"""Step-based progress of training stages and of sweeps over several runs."""

import logging
import time
from collections.abc import Callable, Iterator, Sequence
from contextlib import contextmanager
from dataclasses import dataclass, field
from enum import Enum
from typing import Any

logger = logging.getLogger(__name__)


class StageStatus(Enum):
    RUNNING = "running"
    COMPLETED = "completed"
    FAILED = "failed"


@dataclass
class StageProgress:
    """Snapshot of one stage, e.g. XE training, as listeners see it."""

    stage: str
    label: str
    total_steps: int
    step: int = 0
    status: StageStatus = StageStatus.RUNNING
    metrics: dict[str, float] = field(default_factory=dict)
    details: dict[str, Any] = field(default_factory=dict)
    error: str | None = None
    started_at: float = field(default_factory=time.monotonic)
    elapsed_seconds: float = 0.0

    @property
    def fraction(self) -> float:
        return min(1.0, self.step / self.total_steps)

    @property
    def steps_per_second(self) -> float | None:
        if self.step == 0 or self.elapsed_seconds <= 0.0:
            return None
        return self.step / self.elapsed_seconds

    @property
    def eta_seconds(self) -> float | None:
        """Seconds left at the current rate; None until a step has finished."""
        if self.status is not StageStatus.RUNNING:
            return 0.0 if self.status is StageStatus.COMPLETED else None
        rate = self.steps_per_second
        if rate is None:
            return None
        return max(0, self.total_steps - self.step) / rate

    def summary(self) -> str:
        metrics = " ".join(f"{k}={v:.4f}" for k, v in self.metrics.items())
        return f"step {self.step}/{self.total_steps} {metrics}".strip()


Listener = Callable[[StageProgress], None]


class ProgressTracker:
    """Keeps every stage of a run and pushes each change to its listeners.

    Training loops report finished optimiser steps through :meth:`advance`.
    A failing listener is logged and skipped; it never interrupts training.
    """

    def __init__(self) -> None:
        self.stages: dict[str, StageProgress] = {}
        self._listeners: list[Listener] = []

    def subscribe(self, listener: Listener) -> None:
        self._listeners.append(listener)

    def unsubscribe(self, listener: Listener) -> None:
        if listener in self._listeners:
            self._listeners.remove(listener)

    def get(self, stage: str) -> StageProgress | None:
        return self.stages.get(stage)

    def start_operation(
        self,
        stage: str,
        label: str,
        total_steps: int = 1,
        details: dict[str, Any] | None = None,
    ) -> StageProgress:
        """
        Register ``stage`` with ``total_steps`` expected steps.

        Starting a stage id again replaces the earlier snapshot.
        """
        progress = StageProgress(
            stage=stage,
            label=label,
            total_steps=max(1, total_steps),
            details=dict(details or {}),
        )
        self.stages[stage] = progress
        logger.debug(f"Started {label} ({progress.total_steps} steps)")
        self._publish(progress)
        return progress

    def _known(self, stage: str) -> StageProgress | None:
        progress = self.stages.get(stage)
        if progress is None:
            logger.warning(f"Progress reported for unknown stage: {stage}")
        return progress

    def advance(
        self, stage: str, step: int, metrics: dict[str, float] | None = None
    ) -> None:
        """Record that ``step`` steps of ``stage`` have finished."""
        progress = self._known(stage)
        if progress is None:
            return
        progress.step = max(0, min(step, progress.total_steps))
        progress.metrics.update(metrics or {})
        progress.elapsed_seconds = time.monotonic() - progress.started_at
        self._publish(progress)

    def complete_operation(
        self, stage: str, metrics: dict[str, float] | None = None
    ) -> None:
        progress = self._known(stage)
        if progress is None:
            return
        progress.status = StageStatus.COMPLETED
        progress.step = progress.total_steps
        progress.metrics.update(metrics or {})
        progress.elapsed_seconds = time.monotonic() - progress.started_at
        logger.info(f"{progress.label} finished in {progress.elapsed_seconds:.1f}s")
        self._publish(progress)

    def fail_operation(self, stage: str, error: str) -> None:
        progress = self._known(stage)
        if progress is None:
            return
        progress.status = StageStatus.FAILED
        progress.error = error
        progress.elapsed_seconds = time.monotonic() - progress.started_at
        logger.error(f"{progress.label} failed at step {progress.step}: {error}")
        self._publish(progress)

    def _publish(self, progress: StageProgress) -> None:
        for listener in self._listeners:
            try:
                listener(progress)
            except Exception as e:
                logger.error(f"Progress listener failed: {e}")


class SweepProgress:
    """A parent stage whose steps are whole runs, such as ablation variants.

    Without a tracker every call is a no-op::

        sweep = SweepProgress(tracker, "ablate", "Ablation", names)
        for name in names:
            with sweep.run(name):
                ...
    """

    def __init__(
        self,
        tracker: ProgressTracker | None,
        stage: str,
        label: str,
        runs: Sequence[str],
    ):
        self.tracker = tracker
        self.stage = stage
        self.finished: list[str] = []
        if tracker is not None:
            tracker.start_operation(stage, label, len(runs), {"runs": list(runs)})

    @contextmanager
    def run(self, name: str) -> Iterator[None]:
        """Count ``name`` as done on success; fail the whole sweep if it raises."""
        try:
            yield
        except Exception as e:
            if self.tracker is not None:
                self.tracker.fail_operation(self.stage, f"{name}: {e}")
            raise
        self.finished.append(name)
        if self.tracker is None:
            return
        self.tracker.advance(self.stage, len(self.finished))
        progress = self.tracker.get(self.stage)
        if progress is not None and len(self.finished) >= progress.total_steps:
            self.tracker.complete_operation(self.stage)
