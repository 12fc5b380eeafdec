"""Discrete-event serving engine with continuous batching and brownout routing.

Each iteration admits waiting requests FCFS up to the batch cap, prefills
their prompts and decodes one token for every request already running. For
every MoE layer the batch's tokens are gated through a toy layer and routed by
the brownout router at the current threshold; the resulting plan statistics
drive a linear latency cost model that advances the clock. Per-token latencies
feed one SALC controller per stage.

Latency is modelled, never measured, so runs are deterministic given the
trace and the configuration.
"""

import logging
import math
import sys
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Deque, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .brownout_router import BrownoutConfig, PlanStats, plan_brownout, plan_stats
from .errors import ConsistencyError, OrderingError, ParameterError
from .moe_core import Activation, MoELayer, expert_assignments, route_tokens
from .salc import SalcController, SalcParams, Stage, percentile
from .workload import Request

# Configure logging to stderr only (never stdout - corrupts JSON/CSV command output)
logging.basicConfig(stream=sys.stderr, level=logging.INFO)
logger = logging.getLogger("brownout-moe.serve_sim")


class CostModel(BaseModel):
    """Linear iteration latency model (all values in seconds)."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    attn_per_token: float = Field(0.0, ge=0.0)
    moe_fixed: float = Field(0.0, ge=0.0, description="Fixed MoE cost per layer")
    expert_access_cost: float = Field(0.0, ge=0.0, description="Cost per accessed expert per layer")
    per_token_compute: float = Field(0.0, ge=0.0, description="Cost per processed (token, expert) visit")
    iteration_overhead: float = Field(0.0, ge=0.0)


class ControllerMode(str, Enum):
    OFF = "off"
    STATIC = "static"
    SALC = "salc"


class ControllerConfig(BaseModel):
    """Threshold control: ``off`` (always 1), ``static`` or ``salc``.

    SALC parameters per stage default to the stage SLO with standard knobs.
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    mode: ControllerMode = ControllerMode.OFF
    threshold: float = Field(1.0, ge=0.0, le=1.0, description="Fixed threshold for static mode")
    prefill: Optional[SalcParams] = None
    decode: Optional[SalcParams] = None


class ModelConfig(BaseModel):
    """Geometry of the toy MoE layer replicated across all layers."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    d: int = Field(16, ge=1)
    h: int = Field(32, ge=1)
    m: int = Field(16, ge=1)
    top_k: int = Field(2, ge=1)
    n_shared: int = Field(0, ge=0)
    gate_skew: float = Field(0.8, ge=0.0)
    activation: Activation = Activation.RELU
    layer_seed: int = 0

    @model_validator(mode="after")
    def validate_top_k(self) -> "ModelConfig":
        if self.top_k > self.m:
            raise ValueError(f"top_k={self.top_k} exceeds m={self.m}")
        return self


class SimConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    max_batch_size: int = Field(64, ge=1, description="Maximum running requests")
    max_seq_len: int = Field(2048, ge=2)
    prefill_slo: float = Field(0.25, gt=0.0)
    decode_slo: float = Field(0.15, gt=0.0)
    layers: int = Field(1, ge=1)
    cost: CostModel = Field(default_factory=CostModel)
    controller: ControllerConfig = Field(default_factory=ControllerConfig)
    brownout: BrownoutConfig = Field(default_factory=lambda: BrownoutConfig(way=1))
    model: ModelConfig = Field(default_factory=ModelConfig)
    seed: int = 0
    horizon: Optional[float] = Field(None, gt=0.0, description="Stop starting iterations after this time")

    @model_validator(mode="after")
    def validate_way(self) -> "SimConfig":
        if self.brownout.way > self.model.m:
            raise ValueError(f"brownout way {self.brownout.way} exceeds m={self.model.m}")
        return self

    def slo(self, stage: Stage) -> float:
        return self.prefill_slo if stage == Stage.PREFILL else self.decode_slo

    def salc_params(self, stage: Stage) -> SalcParams:
        configured = self.controller.prefill if stage == Stage.PREFILL else self.controller.decode
        return configured if configured is not None else SalcParams(slo=self.slo(stage))

    def build_layer(self) -> MoELayer:
        spec = self.model
        return MoELayer.random(
            d=spec.d,
            h=spec.h,
            m=spec.m,
            k=self.brownout.way,
            top_k=spec.top_k,
            n_shared=spec.n_shared,
            seed=spec.layer_seed,
            skew=spec.gate_skew,
            activation=spec.activation,
        )


@dataclass(frozen=True)
class TokenLatencyRecord:
    request_id: int
    token_index: int
    stage: Stage
    emit_time: float
    latency: float
    threshold_at_emit: float


@dataclass(frozen=True)
class ThresholdPoint:
    time: float
    stage: Stage
    threshold: float


@dataclass(frozen=True)
class IterationRecord:
    index: int
    start: float
    latency: float
    batch_tokens: int
    n_prefill: int
    n_decode: int
    threshold: float
    moe_latency: Tuple[float, ...]

    @property
    def total_moe_latency(self) -> float:
        return sum(self.moe_latency)


@dataclass
class RequestProgress:
    request: Request
    generated: int = 0
    last_emit: float = 0.0

    @property
    def finished(self) -> bool:
        return self.generated >= self.request.output_len


@dataclass
class EngineState:
    """Mutable engine: future arrivals, FCFS queue, running batch and controllers."""

    layer: MoELayer
    rng: np.random.Generator
    arrivals: Deque[Request] = field(default_factory=deque)
    waiting_queue: Deque[Request] = field(default_factory=deque)
    running_batch: List[RequestProgress] = field(default_factory=list)
    completed: List[RequestProgress] = field(default_factory=list)
    clock: float = 0.0
    controllers: Dict[Stage, SalcController] = field(default_factory=dict)
    thresholds: List[ThresholdPoint] = field(default_factory=list)
    iterations: List[IterationRecord] = field(default_factory=list)

    @classmethod
    def create(cls, trace: Sequence[Request], cfg: SimConfig, layer: Optional[MoELayer] = None) -> "EngineState":
        """Fresh engine for a time-ordered trace.

        Raises:
            OrderingError: If arrival times go backwards
            ParameterError: If a request does not fit in ``max_seq_len``
            ConsistencyError: If the layer does not match the brownout way
        """
        for previous, current in zip(trace, trace[1:]):
            if current.arrival_time < previous.arrival_time:
                raise OrderingError(
                    f"Trace is not time-ordered at request {current.id}",
                    "serve_sim",
                    {"previous": previous.arrival_time, "current": current.arrival_time},
                )
        oversize = [r.id for r in trace if r.input_len + r.output_len > cfg.max_seq_len]
        if oversize:
            raise ParameterError(
                f"{len(oversize)} requests exceed max_seq_len={cfg.max_seq_len}",
                "serve_sim",
                {"request_ids": oversize[:20]},
            )
        layer = layer if layer is not None else cfg.build_layer()
        if layer.group_way != cfg.brownout.way:
            raise ConsistencyError(
                f"Layer groups {layer.group_way} experts but brownout way is {cfg.brownout.way}",
                "serve_sim",
            )
        controllers: Dict[Stage, SalcController] = {}
        if cfg.controller.mode == ControllerMode.SALC:
            controllers = {stage: SalcController(stage, cfg.salc_params(stage)) for stage in Stage}
        return cls(layer=layer, rng=np.random.default_rng(cfg.seed), arrivals=deque(trace), controllers=controllers)

    @property
    def idle(self) -> bool:
        return not self.waiting_queue and not self.running_batch

    @property
    def drained(self) -> bool:
        return self.idle and not self.arrivals

    @property
    def next_start(self) -> float:
        """Time the next iteration would start (after an idle jump)."""
        if self.idle and self.arrivals and self.arrivals[0].arrival_time > self.clock:
            return self.arrivals[0].arrival_time
        return self.clock

    def stage_threshold(self, stage: Stage, cfg: SimConfig) -> float:
        if cfg.controller.mode == ControllerMode.SALC:
            return self.controllers[stage].threshold
        if cfg.controller.mode == ControllerMode.STATIC:
            return cfg.controller.threshold
        return 1.0

    def enqueue_arrivals(self) -> None:
        while self.arrivals and self.arrivals[0].arrival_time <= self.clock:
            self.waiting_queue.append(self.arrivals.popleft())


def moe_layer_latency(cost: CostModel, stats: PlanStats) -> float:
    return (
        cost.moe_fixed
        + stats.experts_accessed * cost.expert_access_cost
        + stats.processed_visits * cost.per_token_compute
    )


def iteration_latency(cost: CostModel, batch_tokens: int, per_layer_stats: Sequence[PlanStats]) -> float:
    """Modelled wall time of one engine iteration.

    Dropped visits carry no per-visit compute cost.
    """
    moe = sum(moe_layer_latency(cost, stats) for stats in per_layer_stats)
    return cost.iteration_overhead + batch_tokens * cost.attn_per_token + moe


def step(engine: EngineState, cfg: SimConfig) -> List[TokenLatencyRecord]:
    """Run one engine iteration and return the token records it emitted.

    An idle engine with future arrivals jumps its clock to the next arrival
    first; an engine with nothing left to do is left unchanged.
    """
    engine.enqueue_arrivals()
    if engine.idle:
        if not engine.arrivals:
            return []
        engine.clock = engine.arrivals[0].arrival_time
        engine.enqueue_arrivals()

    admitted: List[RequestProgress] = []
    while engine.waiting_queue and len(engine.running_batch) + len(admitted) < cfg.max_batch_size:
        admitted.append(RequestProgress(engine.waiting_queue.popleft()))
    decoding = engine.running_batch

    # a mixed iteration runs at the stricter of the two stage thresholds
    active = ([Stage.PREFILL] if admitted else []) + ([Stage.DECODE] if decoding else [])
    threshold = min(engine.stage_threshold(stage, cfg) for stage in active)
    routing = cfg.brownout.model_copy(update={"threshold": threshold})

    batch_tokens = sum(p.request.input_len for p in admitted) + len(decoding)
    layer = engine.layer
    per_layer: List[PlanStats] = []
    for _ in range(cfg.layers):
        hidden = engine.rng.standard_normal((batch_tokens, layer.d))
        batch = route_tokens(layer, hidden)
        plan = plan_brownout(expert_assignments(batch, layer.m), layer.m, routing)
        per_layer.append(plan_stats(plan, layer.m))

    start = engine.clock
    latency = iteration_latency(cfg.cost, batch_tokens, per_layer)
    engine.clock = start + latency
    now = engine.clock

    records: List[TokenLatencyRecord] = []
    for progress in admitted:
        records.append(
            TokenLatencyRecord(
                progress.request.id, 0, Stage.PREFILL, now, now - progress.request.arrival_time, threshold
            )
        )
        progress.generated = 1
        progress.last_emit = now
    for progress in decoding:
        records.append(
            TokenLatencyRecord(
                progress.request.id, progress.generated, Stage.DECODE, now, now - progress.last_emit, threshold
            )
        )
        progress.generated += 1
        progress.last_emit = now

    survivors: List[RequestProgress] = []
    for progress in (*decoding, *admitted):
        if progress.finished:
            engine.completed.append(progress)
        else:
            survivors.append(progress)
    engine.running_batch = survivors

    engine.iterations.append(
        IterationRecord(
            index=len(engine.iterations),
            start=start,
            latency=latency,
            batch_tokens=batch_tokens,
            n_prefill=len(admitted),
            n_decode=len(decoding),
            threshold=threshold,
            moe_latency=tuple(moe_layer_latency(cfg.cost, stats) for stats in per_layer),
        )
    )

    for record in records:
        if record.stage in engine.controllers:
            engine.controllers[record.stage].observe(record.emit_time, record.latency)
    for stage in Stage:
        if stage in engine.controllers:
            value = engine.controllers[stage].update(now)
        else:
            value = engine.stage_threshold(stage, cfg)
        engine.thresholds.append(ThresholdPoint(now, stage, value))

    logger.debug(
        f"Iteration {len(engine.iterations) - 1}: t={now:.4f} tokens={batch_tokens} "
        f"prefill={len(admitted)} decode={len(decoding)} threshold={threshold:.3f}"
    )
    return records


def violation_rate(records: Sequence[TokenLatencyRecord], slos: Mapping[Stage, float]) -> Dict[Stage, float]:
    """Per-stage fraction of tokens whose latency exceeds the stage SLO (0 when a stage has no tokens)."""
    rates: Dict[Stage, float] = {}
    for stage in Stage:
        latencies = [r.latency for r in records if r.stage == stage]
        over = sum(1 for v in latencies if v > slos[stage])
        rates[stage] = over / len(latencies) if latencies else 0.0
    return rates


def p90_series(records: Sequence[TokenLatencyRecord], stage: Stage) -> List[Tuple[int, float, int]]:
    """Per-second ``(second, P90, count)`` buckets of one stage, keyed by ``floor(emit_time)``."""
    buckets: Dict[int, List[float]] = {}
    for record in records:
        if record.stage == stage:
            buckets.setdefault(math.floor(record.emit_time), []).append(record.latency)
    series: List[Tuple[int, float, int]] = []
    for second in sorted(buckets):
        value = percentile(buckets[second], 90)
        assert value is not None
        series.append((second, value, len(buckets[second])))
    return series


class StageSummary(BaseModel):
    tokens: int = Field(..., ge=0)
    p50: Optional[float] = None
    p90: Optional[float] = None
    p99: Optional[float] = None
    mean_latency: Optional[float] = None
    violation_rate: float = Field(..., ge=0.0, le=1.0)
    mean_threshold: Optional[float] = None
    p90_oscillation: Optional[float] = Field(None, description="Std of the per-second P90 series")


def summarize_stage(records: Sequence[TokenLatencyRecord], stage: Stage, rate: float) -> StageSummary:
    """Percentiles, violation rate and threshold statistics of one stage's records."""
    latencies = [r.latency for r in records if r.stage == stage]
    if not latencies:
        return StageSummary(tokens=0, violation_rate=rate)
    series = [value for _, value, _ in p90_series(records, stage)]
    return StageSummary(
        tokens=len(latencies),
        p50=percentile(latencies, 50),
        p90=percentile(latencies, 90),
        p99=percentile(latencies, 99),
        mean_latency=float(np.mean(latencies)),
        violation_rate=rate,
        mean_threshold=float(np.mean([r.threshold_at_emit for r in records if r.stage == stage])),
        p90_oscillation=float(np.std(series)),
    )


class SimReport(BaseModel):
    """Throughput, latency percentiles and SLO attainment of one run."""

    throughput: float = Field(..., ge=0.0, description="Emitted tokens per second of makespan")
    prefill: StageSummary
    decode: StageSummary
    requests_total: int
    requests_completed: int
    requests_running: int
    requests_queued: int = Field(..., description="Waiting or not yet arrived when the run stopped")
    tokens_emitted: int
    iterations: int
    makespan: float
    mean_ttft: Optional[float] = None
    mean_tpot: Optional[float] = None

    def stage(self, stage: Stage) -> StageSummary:
        return self.prefill if stage == Stage.PREFILL else self.decode


@dataclass
class SimResult:
    report: SimReport
    records: List[TokenLatencyRecord]
    thresholds: List[ThresholdPoint]
    iterations: List[IterationRecord]


def build_report(
    trace: Sequence[Request], engine: EngineState, records: Sequence[TokenLatencyRecord], cfg: SimConfig
) -> SimReport:
    rates = violation_rate(records, {Stage.PREFILL: cfg.prefill_slo, Stage.DECODE: cfg.decode_slo})
    prefill = summarize_stage(records, Stage.PREFILL, rates[Stage.PREFILL])
    decode = summarize_stage(records, Stage.DECODE, rates[Stage.DECODE])
    makespan = engine.clock - trace[0].arrival_time if trace and engine.iterations else 0.0
    return SimReport(
        throughput=len(records) / makespan if makespan > 0 else 0.0,
        prefill=prefill,
        decode=decode,
        requests_total=len(trace),
        requests_completed=len(engine.completed),
        requests_running=len(engine.running_batch),
        requests_queued=len(engine.waiting_queue) + len(engine.arrivals),
        tokens_emitted=len(records),
        iterations=len(engine.iterations),
        makespan=makespan,
        mean_ttft=prefill.mean_latency,
        mean_tpot=decode.mean_latency,
    )


def run_simulation(trace: Sequence[Request], cfg: SimConfig, layer: Optional[MoELayer] = None) -> SimResult:
    """Replay a trace through the engine until it drains (or the horizon passes).

    Args:
        trace: Time-ordered requests
        cfg: Engine, cost, controller and brownout configuration
        layer: Toy MoE layer used for gating; built from ``cfg.model`` if omitted

    Returns:
        Report plus the full token, threshold and iteration traces
    """
    engine = EngineState.create(trace, cfg, layer)
    logger.info(
        f"Simulating {len(trace)} requests: controller={cfg.controller.mode.value} "
        f"way={cfg.brownout.way} strategy={cfg.brownout.strategy.value} layers={cfg.layers}"
    )
    records: List[TokenLatencyRecord] = []
    while not engine.drained:
        if cfg.horizon is not None and engine.next_start >= cfg.horizon:
            break
        records.extend(step(engine, cfg))

    report = build_report(trace, engine, records, cfg)
    if report.requests_running or report.requests_queued:
        logger.warning(
            f"Stopped at t={engine.clock:.2f}s with {report.requests_running} running and "
            f"{report.requests_queued} queued requests"
        )
    logger.info(
        f"Finished: {report.tokens_emitted} tokens in {report.makespan:.2f}s, "
        f"decode P90={report.decode.p90}, decode violations={report.decode.violation_rate:.3f}"
    )
    return SimResult(report, records, engine.thresholds, engine.iterations)


class SweepPoint(BaseModel):
    model_config = ConfigDict(frozen=True)

    way: int = Field(..., ge=1)
    threshold: float = Field(..., ge=0.0, le=1.0)


class SweepResult(BaseModel):
    way: int
    threshold: float
    throughput: float
    decode_p90: Optional[float]
    decode_violation_rate: float
    makespan: float


def _point_config(base: SimConfig, point: SweepPoint) -> SimConfig:
    data = base.model_dump()
    data["brownout"].update(way=point.way, threshold=point.threshold)
    data["controller"] = {"mode": ControllerMode.STATIC, "threshold": point.threshold}
    return SimConfig.model_validate(data)


def _run_point(trace: Sequence[Request], base: SimConfig, point: SweepPoint, layer: Optional[MoELayer]) -> SweepResult:
    point_layer = layer.with_group_way(point.way) if layer is not None else None
    report = run_simulation(trace, _point_config(base, point), point_layer).report
    return SweepResult(
        way=point.way,
        threshold=point.threshold,
        throughput=report.throughput,
        decode_p90=report.decode.p90,
        decode_violation_rate=report.decode.violation_rate,
        makespan=report.makespan,
    )


def sweep(
    trace: Sequence[Request],
    base_config: SimConfig,
    points: Sequence[SweepPoint],
    max_workers: int = 1,
    layer: Optional[MoELayer] = None,
) -> List[SweepResult]:
    """Independent static-threshold runs, one per ``(way, threshold)`` point.

    Runs share no state, so results equal sequential execution regardless of
    ``max_workers``. Results follow the order of ``points``.
    """
    def run(point: SweepPoint) -> SweepResult:
        return _run_point(trace, base_config, point, layer)

    if max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            return list(pool.map(run, points))
    return [run(point) for point in points]
