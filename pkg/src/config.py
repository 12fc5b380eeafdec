"""Process configuration and experiment documents.

Environment variables (optionally from a ``.env`` file):
    LOG_LEVEL             logging level for all ``brownout-moe.*`` loggers (INFO)
    DEBUG                 ``true`` forces DEBUG logging (false)
    BROWNOUT_OUTPUT_DIR   default output directory of ``simulate``/``sweep`` (./out)
    BROWNOUT_MAX_WORKERS  parallel workers for sweeps and distillation (1)

An experiment is one JSON document with the sections ``engine``, ``model``,
``cost``, ``controller``, ``brownout`` and ``workload``.
"""

import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .brownout_router import BrownoutConfig
from .errors import ParameterError
from .moe_core import LayerDocument, MoELayer
from .serve_sim import ControllerConfig, CostModel, ModelConfig, SimConfig
from .workload import (
    DEFAULT_MAX_SEQ_LEN,
    LengthDistribution,
    RateSchedule,
    Request,
    Segment,
    burst_schedule,
    generate_trace,
    length_profile,
    read_trace_csv,
)

# Configure logging to stderr only (never stdout - corrupts JSON/CSV command output)
logging.basicConfig(stream=sys.stderr, level=logging.INFO)
logger = logging.getLogger("brownout-moe.config")

# Load environment variables from .env file
load_dotenv()

ROOT_LOGGER = "brownout-moe"


def get_config() -> Dict[str, Any]:
    """Get configuration from environment variables.

    Raises:
        ParameterError: If a numeric variable does not parse or is out of range
    """
    raw_workers = os.getenv("BROWNOUT_MAX_WORKERS", "1")
    try:
        max_workers = int(raw_workers)
    except ValueError:
        raise ParameterError(
            f"BROWNOUT_MAX_WORKERS must be an integer, got '{raw_workers}'",
            "config",
            {"variable": "BROWNOUT_MAX_WORKERS"},
        ) from None
    if max_workers < 1:
        raise ParameterError(f"BROWNOUT_MAX_WORKERS must be >= 1, got {max_workers}", "config")
    return {
        "log_level": os.getenv("LOG_LEVEL", "INFO"),
        "debug": os.getenv("DEBUG", "false").lower() == "true",
        "output_dir": os.getenv("BROWNOUT_OUTPUT_DIR", "./out"),
        "max_workers": max_workers,
    }


def configure_logging(config: Dict[str, Any]) -> None:
    """Apply the configured level to every ``brownout-moe.*`` logger."""
    level_name = "DEBUG" if config.get("debug") else str(config.get("log_level") or "INFO").upper()
    level = getattr(logging, level_name, None)
    if not isinstance(level, int):
        logger.warning(f"Unknown LOG_LEVEL '{level_name}', using INFO")
        level = logging.INFO
    logging.getLogger(ROOT_LOGGER).setLevel(level)


class EngineSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    max_batch_size: int = Field(64, ge=1)
    max_seq_len: int = Field(DEFAULT_MAX_SEQ_LEN, ge=2)
    prefill_slo: float = Field(0.25, gt=0.0)
    decode_slo: float = Field(0.15, gt=0.0)
    layers: int = Field(1, ge=1)
    seed: int = 0
    horizon: Optional[float] = Field(None, gt=0.0)


class ModelSection(ModelConfig):
    layer_path: Optional[str] = Field(None, description="Layer JSON to load instead of generating one")


class BurstSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    base_rps: float = Field(..., ge=0.0)
    burst_at: float = Field(..., gt=0.0)
    horizon: float = Field(..., gt=0.0)
    factor: float = Field(2.0, gt=0.0)


class WorkloadSection(BaseModel):
    """Arrival schedule and length distributions, or a stored trace.

    Exactly one arrival source may be given (``segments``, ``burst`` or
    ``trace_path``); none at all yields an empty trace.
    """

    model_config = ConfigDict(extra="forbid")

    seed: int = 0
    segments: Optional[List[Segment]] = None
    burst: Optional[BurstSection] = None
    trace_path: Optional[str] = None
    profile: str = "alpaca-like"
    length_sigma: float = Field(0.5, ge=0.0)
    input_lengths: Optional[LengthDistribution] = None
    output_lengths: Optional[LengthDistribution] = None

    @model_validator(mode="after")
    def validate_source(self) -> "WorkloadSection":
        sources = [name for name in ("segments", "burst", "trace_path") if getattr(self, name) is not None]
        if len(sources) > 1:
            raise ValueError(f"workload needs at most one arrival source, got {sources}")
        return self

    def schedule(self) -> RateSchedule:
        if self.burst is not None:
            return burst_schedule(self.burst.base_rps, self.burst.burst_at, self.burst.horizon, self.burst.factor)
        return RateSchedule(segments=self.segments or [])

    def distributions(self, max_seq_len: int) -> Tuple[LengthDistribution, LengthDistribution]:
        profile_in, profile_out = length_profile(self.profile, self.length_sigma, max_seq_len)
        return self.input_lengths or profile_in, self.output_lengths or profile_out


class SimulationDocument(BaseModel):
    """Single JSON document describing one experiment."""

    model_config = ConfigDict(extra="forbid")

    engine: EngineSection = Field(default_factory=EngineSection)
    model: ModelSection = Field(default_factory=ModelSection)
    cost: CostModel = Field(default_factory=CostModel)
    controller: ControllerConfig = Field(default_factory=ControllerConfig)
    brownout: BrownoutConfig = Field(default_factory=lambda: BrownoutConfig(way=1))
    workload: WorkloadSection = Field(default_factory=WorkloadSection)

    def to_sim_config(self) -> SimConfig:
        return SimConfig(
            max_batch_size=self.engine.max_batch_size,
            max_seq_len=self.engine.max_seq_len,
            prefill_slo=self.engine.prefill_slo,
            decode_slo=self.engine.decode_slo,
            layers=self.engine.layers,
            cost=self.cost,
            controller=self.controller,
            brownout=self.brownout,
            model=ModelConfig(**self.model.model_dump(exclude={"layer_path"})),
            seed=self.engine.seed,
            horizon=self.engine.horizon,
        )


def resolve_path(base_dir: Optional[Path], value: str) -> Path:
    path = Path(value)
    if base_dir is not None and not path.is_absolute():
        return base_dir / path
    return path


def load_simulation_document(path: Path) -> SimulationDocument:
    """Read and validate an experiment document.

    Raises:
        OSError: If the file cannot be read
        json.JSONDecodeError: If the file is not JSON
        pydantic.ValidationError: If the document violates the schema
    """
    path = Path(path)
    with open(path, encoding="utf-8") as handle:
        data = json.load(handle)
    document = SimulationDocument.model_validate(data)
    logger.info(f"Loaded simulation document {path}")
    return document


def build_trace(document: SimulationDocument, base_dir: Optional[Path] = None) -> List[Request]:
    """Generate the document's workload, or load its stored trace."""
    workload = document.workload
    if workload.trace_path is not None:
        return read_trace_csv(resolve_path(base_dir, workload.trace_path))
    in_dist, out_dist = workload.distributions(document.engine.max_seq_len)
    if base_dir is not None:
        in_dist, out_dist = (_resolve_empirical(d, base_dir) for d in (in_dist, out_dist))
    return generate_trace(workload.schedule(), in_dist, out_dist, workload.seed, document.engine.max_seq_len)


def _resolve_empirical(dist: LengthDistribution, base_dir: Path) -> LengthDistribution:
    if dist.kind != "empirical" or dist.path is None:
        return dist
    return dist.model_copy(update={"path": str(resolve_path(base_dir, dist.path))})


def load_layer(path: Path) -> MoELayer:
    """Read a layer JSON file (see ``LayerDocument``)."""
    with open(path, encoding="utf-8") as handle:
        document = LayerDocument.model_validate_json(handle.read())
    return document.to_layer()


def save_layer(layer: MoELayer, path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(LayerDocument.from_layer(layer).model_dump_json(), encoding="utf-8")
    logger.info(f"Wrote layer to {path}")


def build_layer(document: SimulationDocument, base_dir: Optional[Path] = None) -> MoELayer:
    """The document's layer: loaded from ``model.layer_path`` or generated from ``model``.

    A loaded layer is regrouped when its way differs from ``brownout.way``.
    """
    if document.model.layer_path is None:
        return document.to_sim_config().build_layer()
    layer = load_layer(resolve_path(base_dir, document.model.layer_path))
    if layer.group_way != document.brownout.way:
        logger.info(f"Regrouping loaded layer from way {layer.group_way} to {document.brownout.way}")
    return layer.with_group_way(document.brownout.way)
