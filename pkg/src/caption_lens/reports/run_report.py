"""Run outputs: line-delimited metric logs, caption and attribution records, ablation tables."""

import csv
import json
import logging
from collections.abc import Iterable, Sequence
from enum import Enum
from pathlib import Path
from typing import Any

from pydantic import BaseModel
from rich.table import Table

from caption_lens.analysis.attribution import AttributionResult

logger = logging.getLogger(__name__)


class ReportFormat(str, Enum):
    """Supported export formats."""

    JSON = "json"
    CSV = "csv"


class MetricLogWriter:
    """Append-only JSON-lines log, one record per training step."""

    def __init__(self, path: Path, truncate: bool = True):
        self.path = path
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if truncate:
            self.path.write_text("", encoding="utf-8")
        self.records_written = 0

    def write(self, record: dict[str, Any]) -> None:
        with open(self.path, "a", encoding="utf-8") as f:
            f.write(json.dumps(record, sort_keys=True) + "\n")
        self.records_written += 1


def read_metric_log(path: Path) -> list[dict[str, Any]]:
    """All records of a JSON-lines log, in order."""
    with open(path, encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


class CaptionRecord(BaseModel):
    """One decoded caption."""

    image_id: str
    caption: str
    tokens: list[int]
    log_prob: float
    forced: bool = False
    cider: float | None = None


def save_captions(records: Sequence[CaptionRecord], output_path: Path) -> Path:
    output_path.parent.mkdir(parents=True, exist_ok=True)
    with open(output_path, "w", encoding="utf-8") as f:
        for record in records:
            f.write(record.model_dump_json() + "\n")
    logger.info(f"Saved {len(records)} captions to {output_path}")
    return output_path


def save_attribution(
    result: AttributionResult,
    output_path: Path,
    format: ReportFormat = ReportFormat.JSON,
) -> Path:
    """
    Export attributions as the full nested JSON or as flat CSV records.

    Args:
        result: Attribution of one caption
        output_path: Destination file
        format: JSON or CSV

    Returns:
        The written path
    """
    output_path.parent.mkdir(parents=True, exist_ok=True)
    if format == ReportFormat.JSON:
        with open(output_path, "w", encoding="utf-8") as f:
            json.dump(result.model_dump(mode="json"), f, indent=2)
    elif format == ReportFormat.CSV:
        _write_csv(result.records(), output_path)
    else:
        raise ValueError(f"Unsupported export format: {format}")
    logger.info(f"Attribution exported to {output_path}")
    return output_path


class AblationRow(BaseModel):
    """One trained and evaluated model variant."""

    name: str
    layers: int
    intra_layer: str
    inter_layer: str
    controller: str
    steps: int
    final_loss: float
    cider: float
    seconds: float


def _write_csv(rows: Iterable[dict[str, Any]], output_path: Path) -> None:
    rows = list(rows)
    if not rows:
        logger.warning(f"No rows to export to {output_path}")
        output_path.write_text("", encoding="utf-8")
        return
    with open(output_path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)


def export_ablation(rows: Sequence[AblationRow], out_dir: Path) -> dict[str, Path]:
    """Write ``ablation.json`` and ``ablation.csv`` under ``out_dir``."""
    out_dir.mkdir(parents=True, exist_ok=True)
    json_path = out_dir / "ablation.json"
    csv_path = out_dir / "ablation.csv"
    dumped = [row.model_dump() for row in rows]
    with open(json_path, "w", encoding="utf-8") as f:
        json.dump(dumped, f, indent=2)
    _write_csv(dumped, csv_path)
    logger.info(f"Ablation results exported to {out_dir}")
    return {"json": json_path, "csv": csv_path}


def ablation_table(rows: Sequence[AblationRow], title: str = "Ablation") -> Table:
    table = Table(title=title)
    table.add_column("Variant", style="cyan")
    table.add_column("L", justify="right")
    table.add_column("Intra")
    table.add_column("Inter")
    table.add_column("Controller")
    table.add_column("Steps", justify="right")
    table.add_column("XE loss", justify="right")
    table.add_column("CIDEr-D", justify="right", style="green")
    for row in rows:
        table.add_row(
            row.name,
            str(row.layers),
            row.intra_layer,
            row.inter_layer,
            row.controller,
            str(row.steps),
            f"{row.final_loss:.4f}",
            f"{row.cider:.3f}",
        )
    return table
