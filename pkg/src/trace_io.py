"""Simulation output files and their analysis.

Formats:
    records.csv     stage, request_id, token_index, emit_time_s, latency_s, threshold_at_emit
    thresholds.csv  time_s, stage, threshold
    report.json     SimReport fields
    series csv      second, stage, p90_s, count

Floats are written with ``repr`` so a file read back reproduces the run's
values exactly.
"""

import csv
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from pydantic import BaseModel, Field

from .errors import TraceFormatError
from .salc import Stage
from .serve_sim import (
    SimReport,
    SimResult,
    StageSummary,
    ThresholdPoint,
    TokenLatencyRecord,
    p90_series,
    summarize_stage,
    violation_rate,
)

# Configure logging to stderr only (never stdout - corrupts JSON/CSV command output)
logging.basicConfig(stream=sys.stderr, level=logging.INFO)
logger = logging.getLogger("brownout-moe.trace_io")

RECORD_COLUMNS = ("stage", "request_id", "token_index", "emit_time_s", "latency_s", "threshold_at_emit")
THRESHOLD_COLUMNS = ("time_s", "stage", "threshold")
SERIES_COLUMNS = ("second", "stage", "p90_s", "count")


def write_records_csv(records: Sequence[TokenLatencyRecord], path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(RECORD_COLUMNS)
        for r in records:
            writer.writerow(
                [
                    r.stage.value,
                    r.request_id,
                    r.token_index,
                    repr(r.emit_time),
                    repr(r.latency),
                    repr(r.threshold_at_emit),
                ]
            )


def write_thresholds_csv(points: Sequence[ThresholdPoint], path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(THRESHOLD_COLUMNS)
        for p in points:
            writer.writerow([repr(p.time), p.stage.value, repr(p.threshold)])


def write_report_json(report: SimReport, path: Path) -> None:
    Path(path).write_text(report.model_dump_json(indent=2), encoding="utf-8")


def write_simulation_outputs(result: SimResult, out_dir: Path) -> Dict[str, Path]:
    """Write records.csv, thresholds.csv and report.json into ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "records": out_dir / "records.csv",
        "thresholds": out_dir / "thresholds.csv",
        "report": out_dir / "report.json",
    }
    write_records_csv(result.records, paths["records"])
    write_thresholds_csv(result.thresholds, paths["thresholds"])
    write_report_json(result.report, paths["report"])
    logger.info(f"Wrote {len(result.records)} records and {len(result.thresholds)} threshold points to {out_dir}")
    return paths


def _read_rows(path: Path, columns: Sequence[str]) -> List[tuple[int, List[str]]]:
    """Data rows with their 1-based line numbers; an empty file has none.

    Raises:
        TraceFormatError: If the header differs from ``columns``
    """
    rows: List[tuple[int, List[str]]] = []
    with open(path, newline="", encoding="utf-8") as handle:
        reader = csv.reader(handle)
        header = next(reader, None)
        if header is None:
            return rows
        if tuple(column.strip() for column in header) != tuple(columns):
            raise TraceFormatError(
                f"Unexpected header in {path}: {header}",
                [1],
                {"expected": list(columns)},
            )
        for row in reader:
            if row:
                rows.append((reader.line_num, row))
    return rows


def read_records_csv(path: Path) -> List[TokenLatencyRecord]:
    """Parse a records.csv file.

    Raises:
        TraceFormatError: Listing every malformed line
    """
    records: List[TokenLatencyRecord] = []
    bad: List[int] = []
    for line_number, row in _read_rows(path, RECORD_COLUMNS):
        try:
            if len(row) != len(RECORD_COLUMNS):
                raise ValueError("wrong column count")
            latency = float(row[4])
            if latency < 0:
                raise ValueError("negative latency")
            records.append(
                TokenLatencyRecord(
                    request_id=int(row[1]),
                    token_index=int(row[2]),
                    stage=Stage(row[0].strip()),
                    emit_time=float(row[3]),
                    latency=latency,
                    threshold_at_emit=float(row[5]),
                )
            )
        except ValueError:
            bad.append(line_number)
    if bad:
        raise TraceFormatError(
            f"{len(bad)} malformed record rows in {path}",
            bad,
            {"path": str(path), "first_bad_lines": bad[:10]},
        )
    return records


def read_thresholds_csv(path: Path) -> List[ThresholdPoint]:
    points: List[ThresholdPoint] = []
    bad: List[int] = []
    for line_number, row in _read_rows(path, THRESHOLD_COLUMNS):
        try:
            if len(row) != len(THRESHOLD_COLUMNS):
                raise ValueError("wrong column count")
            points.append(ThresholdPoint(float(row[0]), Stage(row[1].strip()), float(row[2])))
        except ValueError:
            bad.append(line_number)
    if bad:
        raise TraceFormatError(f"{len(bad)} malformed threshold rows in {path}", bad, {"path": str(path)})
    return points


class SeriesPoint(BaseModel):
    second: int
    stage: Stage
    p90_s: float
    count: int = Field(..., ge=1)


class AnalysisSummary(BaseModel):
    """What ``analyze`` reports for a records file."""

    records: int
    prefill_slo: float
    decode_slo: float
    prefill: StageSummary
    decode: StageSummary
    controller_mean_threshold: Optional[Dict[Stage, float]] = Field(
        None, description="Per-stage mean of thresholds.csv, when one was given"
    )


def mean_thresholds(points: Sequence[ThresholdPoint]) -> Dict[Stage, float]:
    """Unweighted mean controller threshold per stage (stages without points omitted)."""
    means: Dict[Stage, float] = {}
    for stage in Stage:
        values = [p.threshold for p in points if p.stage == stage]
        if values:
            means[stage] = sum(values) / len(values)
    return means


def analyze_records(
    records: Sequence[TokenLatencyRecord], prefill_slo: float, decode_slo: float
) -> AnalysisSummary:
    """Violation rates, percentiles, mean threshold and P90 oscillation per stage.

    Uses the same computations as the simulator report, so analysing a run's
    records.csv reproduces its report.json violation rates exactly.
    """
    rates = violation_rate(records, {Stage.PREFILL: prefill_slo, Stage.DECODE: decode_slo})
    return AnalysisSummary(
        records=len(records),
        prefill_slo=prefill_slo,
        decode_slo=decode_slo,
        prefill=summarize_stage(records, Stage.PREFILL, rates[Stage.PREFILL]),
        decode=summarize_stage(records, Stage.DECODE, rates[Stage.DECODE]),
    )


def latency_series(
    records: Sequence[TokenLatencyRecord], stages: Optional[Sequence[Stage]] = None
) -> List[SeriesPoint]:
    """Per-second P90 series for plotting, ordered by stage then second."""
    points: List[SeriesPoint] = []
    for stage in stages or list(Stage):
        for second, value, count in p90_series(records, stage):
            points.append(SeriesPoint(second=second, stage=stage, p90_s=value, count=count))
    return points


def write_series_csv(points: Sequence[SeriesPoint], path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(SERIES_COLUMNS)
        for p in points:
            writer.writerow([p.second, p.stage.value, repr(p.p90_s), p.count])
    logger.info(f"Wrote {len(points)} series points to {path}")
