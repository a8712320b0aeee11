"""Command-line interface for Caption Lens."""

import json
import logging
from pathlib import Path

import typer
from rich.console import Console
from rich.panel import Panel
from rich.table import Table

from caption_lens.core.exceptions import CaptionLensError, get_user_friendly_message
from caption_lens.core.pipeline_coordinator import ABLATION_AXES, PipelineCoordinator
from caption_lens.core.progress_tracker import ProgressTracker
from caption_lens.data.dataset import write_synthetic_dataset
from caption_lens.reports.run_report import ablation_table
from caption_lens.utils.config import (
    RunConfig,
    create_default_config_file,
    get_config_schema,
    load_config,
    override_config,
)
from caption_lens.utils.progress_display import CLIProgressDisplay

console = Console()
app = typer.Typer(help="Caption Lens - global enhanced transformer image captioning")
logger = logging.getLogger("caption_lens")

ConfigOption = typer.Option(None, "--config", "-c", help="Configuration file path")
OutputOption = typer.Option(None, "--out", "-o", help="Output directory for runs")
SeedOption = typer.Option(None, "--seed", help="Seed for data, initialisation and dropout")
VerboseOption = typer.Option(False, "--verbose", "-v", help="Enable verbose output")
CheckpointOption = typer.Option(..., "--checkpoint", help="Checkpoint file to load")
BeamOption = typer.Option(None, "--beam", help="Beam width")


def _load(
    config_file: Path | None,
    output_dir: Path | None = None,
    seed: int | None = None,
    verbose: bool = False,
    **overrides: object,
) -> RunConfig:
    config = load_config(config_file)
    return override_config(
        config,
        output_dir=output_dir,
        seed=seed,
        **{"logging.level": "DEBUG" if verbose else None},
        **overrides,
    )


def _header(config: RunConfig, stage: str) -> None:
    console.print(
        Panel.fit(
            f"[bold blue]Caption Lens[/bold blue] [dim]{stage}[/dim]\n"
            f"[dim]run {config.run_name} → {config.run_dir}[/dim]",
            border_style="blue",
        )
    )


def _fail(error: CaptionLensError, verbose: bool = False) -> typer.Exit:
    console.print(f"[red]✗ {get_user_friendly_message(error)}[/red]")
    logger.error(f"{error}", exc_info=verbose)
    return typer.Exit(1)


@app.command()
def train(
    config_file: Path | None = ConfigOption,
    output_dir: Path | None = OutputOption,
    seed: int | None = SeedOption,
    verbose: bool = VerboseOption,
) -> None:
    """Cross-entropy training from scratch."""
    tracker = ProgressTracker()
    try:
        config = _load(config_file, output_dir, seed, verbose)
        _header(config, "XE training")
        with CLIProgressDisplay(tracker, console):
            result = PipelineCoordinator(config, tracker).train()
    except CaptionLensError as e:
        raise _fail(e, verbose) from e

    console.print(
        f"[green]✓[/green] {result.steps} steps, final loss {result.final:.4f} "
        f"({result.seconds:.1f}s)"
    )
    console.print(f"  Checkpoint: [bold]{result.checkpoint}[/bold]")


@app.command()
def finetune(
    checkpoint: Path = CheckpointOption,
    config_file: Path | None = ConfigOption,
    output_dir: Path | None = OutputOption,
    seed: int | None = SeedOption,
    beam: int | None = typer.Option(None, "--beam", help="Beams sampled per image"),
    verbose: bool = VerboseOption,
) -> None:
    """Self-critical fine-tuning of an XE checkpoint."""
    tracker = ProgressTracker()
    try:
        config = _load(config_file, output_dir, seed, verbose, **{"train.scst_beam": beam})
        _header(config, "SCST fine-tuning")
        with CLIProgressDisplay(tracker, console):
            result = PipelineCoordinator(config, tracker).finetune(checkpoint)
    except CaptionLensError as e:
        raise _fail(e, verbose) from e

    console.print(
        f"[green]✓[/green] {result.steps} steps ({result.skipped_steps} skipped), "
        f"final mean reward {result.final:.4f}"
    )
    console.print(f"  Checkpoint: [bold]{result.checkpoint}[/bold]")


@app.command()
def caption(
    image_ids: list[str] | None = typer.Argument(None, help="Images to caption (default: all)"),
    checkpoint: Path = CheckpointOption,
    config_file: Path | None = ConfigOption,
    output_dir: Path | None = OutputOption,
    beam: int | None = BeamOption,
    verbose: bool = VerboseOption,
) -> None:
    """Caption images with beam search."""
    try:
        config = _load(config_file, output_dir, None, verbose, **{"inference.beam_size": beam})
        run = PipelineCoordinator(config).caption(checkpoint, image_ids or None)
    except CaptionLensError as e:
        raise _fail(e, verbose) from e

    table = Table(title="Captions")
    table.add_column("Image", style="cyan")
    table.add_column("Caption")
    table.add_column("log p", justify="right")
    for record in run.records:
        flag = " [yellow](no EOS)[/yellow]" if record.forced else ""
        table.add_row(record.image_id, record.caption + flag, f"{record.log_prob:.3f}")
    console.print(table)
    console.print(f"[green]✓[/green] Captions saved to [bold]{run.output_path}[/bold]")


@app.command("eval")
def evaluate(
    checkpoint: Path = CheckpointOption,
    split: str = typer.Option("train", "--split", help="Split to score (train or val)"),
    config_file: Path | None = ConfigOption,
    output_dir: Path | None = OutputOption,
    beam: int | None = BeamOption,
    verbose: bool = VerboseOption,
) -> None:
    """Mean CIDEr-D of beam-search captions against the references."""
    try:
        config = _load(config_file, output_dir, None, verbose, **{"inference.beam_size": beam})
        run = PipelineCoordinator(config).evaluate(checkpoint, split)
    except CaptionLensError as e:
        raise _fail(e, verbose) from e

    if run.score is not None:
        console.print(
            f"[green]✓[/green] CIDEr-D on {split}: [bold]{run.score.mean:.4f}[/bold] "
            f"over {run.score.count} images"
        )
    console.print(f"  Captions: [bold]{run.output_path}[/bold]")


@app.command()
def gradcheck(
    config_file: Path | None = ConfigOption,
    seed: int | None = SeedOption,
    verbose: bool = VerboseOption,
) -> None:
    """Finite-difference check of every gradient of a tiny model."""
    try:
        config = _load(config_file, None, seed, verbose)
        reports = PipelineCoordinator(config).gradcheck()
    except CaptionLensError as e:
        raise _fail(e, verbose) from e

    table = Table(title="Gradient check")
    table.add_column("Controller/fusion", style="cyan")
    table.add_column("Parameters", justify="right")
    table.add_column("Max rel error", justify="right")
    table.add_column("Result")
    for label, report in reports:
        table.add_row(
            label,
            str(len(report.parameters)),
            f"{report.max_rel_error:.2e}",
            "[green]pass[/green]" if report.passed else "[red]FAIL[/red]",
        )
    console.print(table)

    failed = [(label, r) for label, r in reports if not r.passed]
    for label, report in failed:
        for check in report.failures:
            console.print(f"[red]✗ {label} {check.name}: {check.max_rel_error:.2e}[/red]")
    if failed:
        raise typer.Exit(1)
    console.print("[green]✓ All gradients match[/green]")


@app.command()
def attribute(
    image_id: str = typer.Argument(..., help="Image to caption and attribute"),
    checkpoint: Path = CheckpointOption,
    steps: int | None = typer.Option(None, "--steps", help="Integration steps"),
    rule: str | None = typer.Option(None, "--rule", help="right, midpoint, trapezoid or adaptive"),
    config_file: Path | None = ConfigOption,
    output_dir: Path | None = OutputOption,
    verbose: bool = VerboseOption,
) -> None:
    """Attribute each generated word to the image regions."""
    try:
        config = _load(
            config_file,
            output_dir,
            None,
            verbose,
            **{"inference.attribution_steps": steps, "inference.attribution_rule": rule},
        )
        result, paths = PipelineCoordinator(config).attribute(checkpoint, image_id)
    except CaptionLensError as e:
        raise _fail(e, verbose) from e

    table = Table(title=f"Region attribution for {image_id}")
    table.add_column("Word", style="cyan")
    table.add_column("Top region", justify="right")
    table.add_column("Attributions")
    table.add_column("Gap", justify="right")
    for word in result.words:
        table.add_row(
            word.word,
            str(word.top_region),
            " ".join(f"{a:+.3f}" for a in word.regions),
            f"{word.completeness_gap:.1e}",
        )
    console.print(table)
    for path in paths:
        console.print(f"[green]✓[/green] Saved [bold]{path}[/bold]")


@app.command()
def ablate(
    axis: str = typer.Option("layers", "--axis", help=f"One of: {', '.join(ABLATION_AXES)}"),
    config_file: Path | None = ConfigOption,
    output_dir: Path | None = OutputOption,
    seed: int | None = SeedOption,
    verbose: bool = VerboseOption,
) -> None:
    """Train and score model variants along one axis."""
    tracker = ProgressTracker()
    try:
        config = _load(config_file, output_dir, seed, verbose)
        _header(config, f"ablation over {axis}")
        with CLIProgressDisplay(tracker, console):
            rows, paths = PipelineCoordinator(config, tracker).ablate(axis)
    except CaptionLensError as e:
        raise _fail(e, verbose) from e

    console.print(ablation_table(rows, title=f"Ablation over {axis}"))
    for path in paths.values():
        console.print(f"[green]✓[/green] Saved [bold]{path}[/bold]")


@app.command("make-synthetic")
def make_synthetic(
    out_dir: Path = typer.Argument(..., help="Directory for features, manifest and captions"),
    config_file: Path | None = ConfigOption,
    seed: int | None = SeedOption,
) -> None:
    """Write the synthetic dataset to disk in the file formats."""
    try:
        config = _load(config_file, None, seed)
        dataset = PipelineCoordinator(config).synthetic_dataset()
        paths = write_synthetic_dataset(dataset, out_dir)
    except CaptionLensError as e:
        raise _fail(e) from e

    console.print(
        f"[green]✓[/green] {len(dataset)} images, {dataset.num_captions} captions, "
        f"{len(dataset.vocab)} tokens"
    )
    for name, path in paths.items():
        console.print(f"  {name}: [bold]{path}[/bold]")


@app.command()
def version() -> None:
    """Show version information."""
    from caption_lens import __version__

    console.print(f"Caption Lens version {__version__}")


@app.command()
def config(
    show_all: bool = typer.Option(False, "--all", help="Show all configuration options"),
    init: Path | None = typer.Option(None, "--init", help="Write a default config file"),
    schema: bool = typer.Option(False, "--schema", help="Print the JSON schema"),
    config_file: Path | None = ConfigOption,
) -> None:
    """Show current configuration."""
    if init:
        create_default_config_file(init)
        console.print(f"[green]✓[/green] Default config written to [bold]{init}[/bold]")
        return
    if schema:
        console.print_json(json.dumps(get_config_schema()))
        return

    try:
        config_obj = load_config(config_file)
    except CaptionLensError as e:
        raise _fail(e) from e
    if config_file:
        console.print(f"[blue]Using config file:[/blue] {config_file}")

    model = config_obj.model
    console.print("\n[bold]Run[/bold]")
    console.print(f"Name: {config_obj.run_name}")
    console.print(f"Directory: {config_obj.run_dir}")
    console.print(f"Seed: {config_obj.seed}")
    console.print("\n[bold]Model[/bold]")
    console.print(
        f"L={model.layers} d={model.d_model} h={model.heads} d_ff={model.d_ff} "
        f"intra={model.intra_layer} inter={model.inter_layer} controller={model.controller}"
    )

    if show_all:
        console.print_json(config_obj.model_dump_json())
    else:
        console.print("\n[dim]Use --all to see all configuration options[/dim]")


def main() -> None:
    """Entry point for the CLI."""
    app()


if __name__ == "__main__":
    app()
