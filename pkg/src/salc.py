"""SLO-aware latency control of the brownout threshold.

Every engine iteration the controller looks at the P90 of the per-token
latencies observed in the last ``tw`` seconds and nudges the threshold:

- P90 below the warning line (``slo * warning_factor``): add ``increment``
- P90 above the SLO: multiply by ``shrink_ratio``
- otherwise: hold

The result is clamped to ``[threshold_floor, threshold_cap]``. One controller
instance runs per inference stage (prefill, decode).
"""

import logging
import math
import sys
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from threading import Lock
from typing import Deque, Iterable, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .errors import OrderingError, ParameterError

# Configure logging to stderr only (never stdout - corrupts JSON/CSV command output)
logging.basicConfig(stream=sys.stderr, level=logging.INFO)
logger = logging.getLogger("brownout-moe.salc")


class Stage(str, Enum):
    PREFILL = "prefill"
    DECODE = "decode"


class SalcParams(BaseModel):
    """Tuning knobs of the latency controller for one stage."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    slo: float = Field(..., gt=0.0, description="Per-token latency target in seconds")
    warning_factor: float = Field(0.8, gt=0.0, lt=1.0)
    tw: float = Field(1.0, gt=0.0, description="Look-back window in seconds")
    increment: float = Field(0.1, ge=0.0, description="Additive step when latency is low")
    shrink_ratio: float = Field(0.8, gt=0.0, lt=1.0, description="Multiplicative step when over SLO")
    threshold_floor: float = Field(0.0, ge=0.0, le=1.0)
    threshold_cap: float = Field(1.0, ge=0.0, le=1.0)

    @model_validator(mode="after")
    def validate_bounds(self) -> "SalcParams":
        """Floor must not exceed cap."""
        if self.threshold_floor > self.threshold_cap:
            raise ValueError(
                f"threshold_floor {self.threshold_floor} exceeds threshold_cap {self.threshold_cap}"
            )
        return self

    @property
    def warning_line(self) -> float:
        return self.slo * self.warning_factor


@dataclass
class LatencyWindow:
    """Time-ordered ``(timestamp, latency)`` samples.

    With ``horizon`` set, samples older than ``t - horizon`` are evicted on append.
    """

    samples: Deque[Tuple[float, float]] = field(default_factory=deque)
    horizon: Optional[float] = None

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def last_timestamp(self) -> Optional[float]:
        return self.samples[-1][0] if self.samples else None


@dataclass
class SalcState:
    threshold: float
    stage: Stage


def record_latency(w: LatencyWindow, t: float, v: float) -> None:
    """Append one latency sample.

    Raises:
        OrderingError: If ``t`` precedes the newest sample
        ParameterError: If ``v`` is negative
    """
    if w.samples and t < w.samples[-1][0]:
        raise OrderingError(
            f"Sample at t={t} precedes last sample at t={w.samples[-1][0]}",
            "salc",
        )
    if v < 0:
        raise ParameterError(f"Latency must be non-negative, got {v}", "salc")
    w.samples.append((t, v))
    if w.horizon is not None:
        cutoff = t - w.horizon
        while w.samples and w.samples[0][0] <= cutoff:
            w.samples.popleft()


def percentile(values: Iterable[float], q: float) -> Optional[float]:
    """Nearest-rank percentile (``q`` in (0, 100]); ``None`` for no values."""
    ordered = np.sort(np.fromiter(values, dtype=np.float64))
    if ordered.size == 0:
        return None
    rank = max(1, math.ceil(round(q * ordered.size / 100.0, 9)))
    return float(ordered[min(rank, ordered.size) - 1])


def window_values(w: LatencyWindow, now: float, tw: float) -> Sequence[float]:
    """Latencies with timestamp in ``(now - tw, now]``."""
    start = now - tw
    values = []
    for timestamp, latency in reversed(w.samples):
        if timestamp <= start:
            break
        if timestamp <= now:
            values.append(latency)
    return values


def p90(w: LatencyWindow, now: float, tw: float) -> Optional[float]:
    """P90 of the samples in ``(now - tw, now]``, or ``None`` when there are none."""
    if tw <= 0:
        raise ParameterError(f"Window length must be positive, got {tw}", "salc")
    return percentile(window_values(w, now, tw), 90)


def salc_update(state: SalcState, p: SalcParams, w: LatencyWindow, now: float) -> float:
    """One controller step; returns the new threshold (``state`` is not modified)."""
    latency = p90(w, now, p.tw)
    threshold = state.threshold
    if latency is not None:
        if latency < p.warning_line:
            threshold = threshold + p.increment
        elif latency > p.slo:
            threshold = threshold * p.shrink_ratio
    return min(max(threshold, p.threshold_floor), p.threshold_cap)


class SalcController:
    """Controller instance for one stage: owns its window and threshold.

    Usage:
        controller = SalcController(Stage.DECODE, params)
        controller.observe(emit_time, latency)
        threshold = controller.update(now)
    """

    def __init__(self, stage: Stage, params: SalcParams, initial_threshold: Optional[float] = None):
        self.stage = stage
        self.params = params
        start = params.threshold_cap if initial_threshold is None else initial_threshold
        self._state = SalcState(min(max(start, params.threshold_floor), params.threshold_cap), stage)
        self._window = LatencyWindow(horizon=params.tw)
        self._lock = Lock()

    @property
    def threshold(self) -> float:
        """Current threshold (thread-safe snapshot)."""
        with self._lock:
            return self._state.threshold

    @property
    def window(self) -> LatencyWindow:
        return self._window

    def observe(self, t: float, latency: float) -> None:
        with self._lock:
            record_latency(self._window, t, latency)

    def update(self, now: float) -> float:
        with self._lock:
            new = salc_update(self._state, self.params, self._window, now)
            if new != self._state.threshold:
                logger.debug(f"{self.stage.value} threshold {self._state.threshold:.3f} -> {new:.3f} at t={now:.3f}")
            self._state.threshold = new
            return new
