"""Synthetic request traces: Poisson arrivals under a piecewise-constant rate.

A burst is expressed as a rate schedule (e.g. 1 RPS until t=75 s, then 2 RPS),
not as an injected backlog. Prompt and output lengths come from configurable
length distributions; only lengths are modelled, never token content.
"""

import csv
import logging
import math
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
from numpy.typing import NDArray
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .errors import OrderingError, ParameterError, TraceFormatError

# Configure logging to stderr only (never stdout - corrupts JSON/CSV command output)
logging.basicConfig(stream=sys.stderr, level=logging.INFO)
logger = logging.getLogger("brownout-moe.workload")

DEFAULT_MAX_SEQ_LEN = 2048
TRACE_COLUMNS = ("id", "arrival_time", "input_len", "output_len")


class Segment(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    start: float = Field(..., ge=0.0)
    end: float
    rps: float = Field(..., ge=0.0, description="Requests per second inside the segment")

    @model_validator(mode="after")
    def validate_span(self) -> "Segment":
        if self.end <= self.start:
            raise ValueError(f"segment end {self.end} must be after start {self.start}")
        return self


class RateSchedule(BaseModel):
    """Contiguous, non-overlapping constant-rate segments."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    segments: List[Segment] = Field(default_factory=list)

    @model_validator(mode="after")
    def validate_contiguous(self) -> "RateSchedule":
        for previous, current in zip(self.segments, self.segments[1:]):
            if not math.isclose(previous.end, current.start, rel_tol=0.0, abs_tol=1e-9):
                raise ValueError(
                    f"segments must be contiguous: [{previous.start}, {previous.end}) "
                    f"is followed by [{current.start}, {current.end})"
                )
        return self

    @classmethod
    def from_tuples(cls, segments: Sequence[Tuple[float, float, float]]) -> "RateSchedule":
        return cls(segments=[Segment(start=s, end=e, rps=r) for s, e, r in segments])

    @property
    def horizon(self) -> float:
        return self.segments[-1].end if self.segments else 0.0

    def expected_count(self) -> float:
        return sum((s.end - s.start) * s.rps for s in self.segments)


class LengthDistribution(BaseModel):
    """Token-length sampler; every sample lies in ``[1, max_len]``.

    Kinds and their parameters:
        constant: ``value``
        uniform: ``low``, ``high`` (inclusive)
        lognormal: ``median``, ``sigma``
        empirical: ``values`` inline or ``path`` to a file with one length per line
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    kind: Literal["constant", "uniform", "lognormal", "empirical"]
    value: Optional[int] = Field(None, ge=1)
    low: Optional[int] = Field(None, ge=1)
    high: Optional[int] = Field(None, ge=1)
    median: Optional[float] = Field(None, gt=0.0)
    sigma: Optional[float] = Field(None, ge=0.0)
    values: Optional[List[int]] = None
    path: Optional[str] = None
    max_len: int = Field(DEFAULT_MAX_SEQ_LEN, ge=1)

    @model_validator(mode="after")
    def validate_parameters(self) -> "LengthDistribution":
        """Each kind needs its own parameters."""
        if self.kind == "constant" and self.value is None:
            raise ValueError("constant lengths need 'value'")
        if self.kind == "uniform":
            if self.low is None or self.high is None:
                raise ValueError("uniform lengths need 'low' and 'high'")
            if self.low > self.high:
                raise ValueError(f"uniform low {self.low} exceeds high {self.high}")
        if self.kind == "lognormal" and (self.median is None or self.sigma is None):
            raise ValueError("lognormal lengths need 'median' and 'sigma'")
        if self.kind == "empirical":
            if not self.values and not self.path:
                raise ValueError("empirical lengths need 'values' or 'path'")
            if self.values and min(self.values) < 1:
                raise ValueError("empirical lengths must be positive")
        return self

    def empirical_values(self) -> List[int]:
        """Inline values, or the lengths read from ``path``.

        Raises:
            TraceFormatError: If a line of the file is not a positive integer
        """
        if self.values:
            return list(self.values)
        assert self.path is not None
        lengths: List[int] = []
        bad: List[int] = []
        with open(self.path, encoding="utf-8") as handle:
            for line_number, line in enumerate(handle, start=1):
                text = line.strip()
                if not text:
                    continue
                try:
                    length = int(text)
                except ValueError:
                    bad.append(line_number)
                    continue
                if length < 1:
                    bad.append(line_number)
                else:
                    lengths.append(length)
        if bad:
            raise TraceFormatError(f"Invalid lengths in {self.path}", bad, {"path": self.path})
        if not lengths:
            raise TraceFormatError(f"No lengths found in {self.path}", [], {"path": self.path})
        return lengths

    def sample(self, rng: np.random.Generator, n: int) -> NDArray[np.int64]:
        if self.kind == "constant":
            raw = np.full(n, float(self.value or 1))
        elif self.kind == "uniform":
            raw = rng.integers(self.low or 1, (self.high or 1) + 1, size=n).astype(np.float64)
        elif self.kind == "lognormal":
            raw = np.rint(rng.lognormal(math.log(self.median or 1.0), self.sigma or 0.0, size=n))
        else:
            raw = rng.choice(np.asarray(self.empirical_values(), dtype=np.float64), size=n)
        return np.clip(raw, 1, self.max_len).astype(np.int64)


ALPACA_INPUT_MEDIAN = 20.0
ALPACA_OUTPUT_MEDIAN = 60.0
# ShareGPT-style conversations relative to Alpaca-style instructions
SHAREGPT_INPUT_RATIO = 4.3
SHAREGPT_OUTPUT_RATIO = 13.7


def length_profile(
    name: str, sigma: float = 0.5, max_len: int = DEFAULT_MAX_SEQ_LEN
) -> Tuple[LengthDistribution, LengthDistribution]:
    """Input and output length distributions of a named profile.

    Raises:
        ParameterError: If the profile name is unknown
    """
    medians: Dict[str, Tuple[float, float]] = {
        "alpaca-like": (ALPACA_INPUT_MEDIAN, ALPACA_OUTPUT_MEDIAN),
        "sharegpt-like": (
            ALPACA_INPUT_MEDIAN * SHAREGPT_INPUT_RATIO,
            ALPACA_OUTPUT_MEDIAN * SHAREGPT_OUTPUT_RATIO,
        ),
    }
    if name not in medians:
        raise ParameterError(f"Unknown length profile '{name}'", "workload", {"known": sorted(medians)})
    input_median, output_median = medians[name]
    return (
        LengthDistribution(kind="lognormal", median=input_median, sigma=sigma, max_len=max_len),
        LengthDistribution(kind="lognormal", median=output_median, sigma=sigma, max_len=max_len),
    )


@dataclass(frozen=True)
class Request:
    id: int
    arrival_time: float
    input_len: int
    output_len: int

    def __post_init__(self) -> None:
        if self.input_len < 1 or self.output_len < 1:
            raise ParameterError(
                f"Request {self.id} needs positive lengths, got {self.input_len}/{self.output_len}",
                "workload",
            )
        if self.arrival_time < 0:
            raise ParameterError(f"Request {self.id} arrives before t=0", "workload")


def burst_schedule(base_rps: float, burst_at: float, horizon: float, factor: float = 2.0) -> RateSchedule:
    """Two segments: ``base_rps`` on ``[0, burst_at)``, ``factor * base_rps`` until ``horizon``.

    Raises:
        ParameterError: If ``burst_at`` is not strictly inside ``(0, horizon)``
    """
    if not 0.0 < burst_at < horizon:
        raise ParameterError(
            f"Burst time {burst_at} must lie inside (0, {horizon})",
            "workload",
            {"burst_at": burst_at, "horizon": horizon},
        )
    return RateSchedule.from_tuples([(0.0, burst_at, base_rps), (burst_at, horizon, base_rps * factor)])


def poisson_arrivals(schedule: RateSchedule, rng: np.random.Generator) -> NDArray[np.float64]:
    """Arrival times with exponential inter-arrivals at each segment's rate."""
    chunks: List[NDArray[np.float64]] = []
    for segment in schedule.segments:
        if segment.rps == 0:
            continue
        clock = segment.start
        while True:
            # draw a bit more than the expected remainder per round
            size = int(segment.rps * (segment.end - clock) * 1.2) + 16
            times = clock + np.cumsum(rng.exponential(1.0 / segment.rps, size))
            inside = times[times < segment.end]
            chunks.append(inside)
            if inside.size < size:
                break
            clock = float(times[-1])
    return np.concatenate(chunks) if chunks else np.zeros(0, dtype=np.float64)


def generate_trace(
    schedule: RateSchedule,
    in_dist: LengthDistribution,
    out_dist: LengthDistribution,
    seed: int,
    max_seq_len: int = DEFAULT_MAX_SEQ_LEN,
) -> List[Request]:
    """Seeded, time-ordered request trace.

    Arrivals, input lengths and output lengths use independent child streams
    of ``seed``. Output lengths are clamped so ``input_len + output_len`` never
    exceeds ``max_seq_len``.
    """
    if max_seq_len < 2:
        raise ParameterError(f"max_seq_len must be at least 2, got {max_seq_len}", "workload")
    arrival_seq, input_seq, output_seq = np.random.SeedSequence(seed).spawn(3)
    arrivals = poisson_arrivals(schedule, np.random.default_rng(arrival_seq))
    n = arrivals.size
    inputs = np.minimum(in_dist.sample(np.random.default_rng(input_seq), n), max_seq_len - 1)
    outputs = out_dist.sample(np.random.default_rng(output_seq), n)
    clamped = outputs > max_seq_len - inputs
    outputs = np.where(clamped, max_seq_len - inputs, outputs)
    if clamped.any():
        logger.warning(f"Clamped output length of {int(clamped.sum())} requests to max_seq_len={max_seq_len}")

    trace = [
        Request(i, float(arrivals[i]), int(inputs[i]), int(outputs[i]))
        for i in range(n)
    ]
    logger.info(f"Generated {n} requests over {schedule.horizon:g}s (expected {schedule.expected_count():.1f})")
    return trace


def write_trace_csv(requests: Sequence[Request], path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(TRACE_COLUMNS)
        for r in requests:
            writer.writerow([r.id, repr(r.arrival_time), r.input_len, r.output_len])
    logger.info(f"Wrote {len(requests)} requests to {path}")


def read_trace_csv(path: Path) -> List[Request]:
    """Load a trace written by ``write_trace_csv``.

    Raises:
        TraceFormatError: If the header is wrong or rows do not parse (line numbers reported)
        OrderingError: If arrival times go backwards
    """
    requests: List[Request] = []
    bad: List[int] = []
    with open(path, newline="", encoding="utf-8") as handle:
        reader = csv.reader(handle)
        header = next(reader, None)
        if header is None:
            return []
        if tuple(column.strip() for column in header) != TRACE_COLUMNS:
            raise TraceFormatError(f"Unexpected trace header {header}", [1], {"expected": list(TRACE_COLUMNS)})
        for row in reader:
            line_number = reader.line_num
            if not row:
                continue
            try:
                if len(row) != len(TRACE_COLUMNS):
                    raise ValueError("wrong column count")
                requests.append(Request(int(row[0]), float(row[1]), int(row[2]), int(row[3])))
            except ValueError:
                bad.append(line_number)
    if bad:
        raise TraceFormatError(f"Malformed trace rows in {path}", bad, {"path": str(path)})
    for previous, current in zip(requests, requests[1:]):
        if current.arrival_time < previous.arrival_time:
            raise OrderingError(
                f"Trace is not time-ordered at request {current.id}",
                "workload",
                {"path": str(path)},
            )
    return requests
