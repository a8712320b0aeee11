"""Rich progress bars for training runs, fed by ProgressTracker listeners."""

from types import TracebackType

from rich.console import Console
from rich.progress import (
    BarColumn,
    MofNCompleteColumn,
    Progress,
    TaskID,
    TextColumn,
    TimeRemainingColumn,
)

from caption_lens.core.progress_tracker import (
    ProgressTracker,
    StageProgress,
    StageStatus,
)


class CLIProgressDisplay:
    """Render every stage of a tracker as one progress bar.

    Use as a context manager around the run::

        with CLIProgressDisplay(tracker, console):
            trainer.train_xe(dataset)
    """

    def __init__(self, tracker: ProgressTracker, console: Console | None = None):
        self.tracker = tracker
        self.progress = Progress(
            TextColumn("[progress.description]{task.description}"),
            BarColumn(),
            MofNCompleteColumn(),
            TimeRemainingColumn(),
            console=console or Console(),
        )
        self.tasks: dict[str, TaskID] = {}

    def __enter__(self) -> "CLIProgressDisplay":
        self.tracker.subscribe(self.on_update)
        self.progress.start()
        return self

    def __exit__(
        self,
        exc_type: type[BaseException] | None,
        exc: BaseException | None,
        traceback: TracebackType | None,
    ) -> None:
        self.progress.stop()
        self.tracker.unsubscribe(self.on_update)

    @staticmethod
    def describe(update: StageProgress) -> str:
        metrics = " ".join(f"{k}={v:.4f}" for k, v in update.metrics.items())
        if update.status is StageStatus.FAILED:
            return f"[red]✗ {update.label} failed[/red]"
        if update.status is StageStatus.COMPLETED:
            return f"[green]✓ {update.label}[/green] {metrics}".strip()
        return f"{update.label} {metrics}".strip()

    def on_update(self, update: StageProgress) -> None:
        task_id = self.tasks.get(update.stage)
        if task_id is None:
            task_id = self.progress.add_task(update.label, total=update.total_steps)
            self.tasks[update.stage] = task_id
        self.progress.update(
            task_id, completed=update.step, description=self.describe(update)
        )
