"""Toy numeric MoE layer with gating and the brownout forward pass.

The layer holds routed experts, optional shared experts and one united expert
per group of ``k`` consecutive routed experts. Everything is computed in
float64 so results can be compared against reference implementations exactly.

Hidden vectors are plain numpy arrays: a single token is a 1-D array of
length ``d`` and a batch is a 2-D ``(T, d)`` array.
"""

import logging
import math
import sys
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from numpy.typing import NDArray
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .brownout_router import ExpertAssignment, RoutingPlan, assignments_from_batch
from .errors import ConsistencyError, ParameterError, ShapeError

# Configure logging to stderr only (never stdout - corrupts JSON/CSV command output)
logging.basicConfig(stream=sys.stderr, level=logging.INFO)
logger = logging.getLogger("brownout-moe.moe_core")

FloatArray = NDArray[np.float64]
HiddenVector = FloatArray


class Activation(str, Enum):
    """Nonlinearity applied between the up and down projections."""

    RELU = "relu"
    LINEAR = "linear"
    GELU = "gelu"
    SILU = "silu"


def apply_activation(kind: Activation, z: FloatArray) -> FloatArray:
    if kind is Activation.RELU:
        return np.maximum(z, 0.0)
    if kind is Activation.LINEAR:
        return z
    if kind is Activation.GELU:
        return 0.5 * z * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (z + 0.044715 * z**3)))
    if kind is Activation.SILU:
        return z / (1.0 + np.exp(-z))
    raise ParameterError(f"Unsupported activation: {kind}", "moe_core")


def activation_derivative(kind: Activation, z: FloatArray) -> FloatArray:
    """Elementwise derivative of the activation at pre-activation ``z``."""
    if kind is Activation.RELU:
        return (z > 0.0).astype(np.float64)
    if kind is Activation.LINEAR:
        return np.ones_like(z)
    if kind is Activation.GELU:
        c = math.sqrt(2.0 / math.pi)
        inner = c * (z + 0.044715 * z**3)
        t = np.tanh(inner)
        return 0.5 * (1.0 + t) + 0.5 * z * (1.0 - t**2) * c * (1.0 + 3 * 0.044715 * z**2)
    if kind is Activation.SILU:
        s = 1.0 / (1.0 + np.exp(-z))
        return s * (1.0 + z * (1.0 - s))
    raise ParameterError(f"Unsupported activation: {kind}", "moe_core")


def _as_matrix(values: Any, name: str) -> FloatArray:
    arr = np.array(values, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be a 2-D matrix, got shape {arr.shape}", "moe_core")
    if not np.all(np.isfinite(arr)):
        raise ParameterError(f"{name} contains non-finite entries", "moe_core")
    return arr


def as_token_matrix(tokens: Any, d: Optional[int] = None) -> FloatArray:
    """Coerce a list of hidden vectors (or a single vector) into a ``(T, d)`` array."""
    arr = np.asarray(tokens, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1) if arr.size else arr.reshape(0, d or 0)
    if arr.ndim != 2:
        raise ShapeError(f"Token batch must be 2-D, got shape {arr.shape}", "moe_core")
    if d is not None and arr.shape[0] and arr.shape[1] != d:
        raise ShapeError(
            f"Token dimension {arr.shape[1]} does not match layer dimension {d}",
            "moe_core",
            {"expected": d, "actual": int(arr.shape[1])},
        )
    return arr


@dataclass(frozen=True)
class ExpertFFN:
    """Two-layer feed-forward expert: ``down · act(up · x)``.

    ``up_weights`` is stored ``d × h`` and ``down_weights`` ``h × d`` so a row
    batch ``X`` maps to ``act(X @ up) @ down``.
    """

    up_weights: FloatArray
    down_weights: FloatArray
    activation: Activation = Activation.RELU

    def __post_init__(self) -> None:
        up = _as_matrix(self.up_weights, "up_weights")
        down = _as_matrix(self.down_weights, "down_weights")
        if up.shape[1] != down.shape[0] or up.shape[0] != down.shape[1]:
            raise ShapeError(
                f"Inconsistent expert shapes: up {up.shape}, down {down.shape}",
                "moe_core",
            )
        object.__setattr__(self, "up_weights", up)
        object.__setattr__(self, "down_weights", down)
        object.__setattr__(self, "activation", Activation(self.activation))

    @property
    def d(self) -> int:
        return int(self.up_weights.shape[0])

    @property
    def h(self) -> int:
        return int(self.up_weights.shape[1])

    def copy(self) -> "ExpertFFN":
        return ExpertFFN(self.up_weights.copy(), self.down_weights.copy(), self.activation)


@dataclass(frozen=True)
class GateUnit:
    """Dot-product gate: one centroid per routed expert and a top-K width."""

    centroids: FloatArray
    top_k: int

    def __post_init__(self) -> None:
        centroids = _as_matrix(self.centroids, "centroids")
        if self.top_k < 1 or self.top_k > centroids.shape[0]:
            raise ParameterError(
                f"top_k must be in [1, {centroids.shape[0]}], got {self.top_k}",
                "moe_core",
            )
        object.__setattr__(self, "centroids", centroids)

    @property
    def m(self) -> int:
        return int(self.centroids.shape[0])

    @property
    def d(self) -> int:
        return int(self.centroids.shape[1])


@dataclass(frozen=True)
class TokenBatch:
    """Tokens plus their gate results (K expert ids and weights per token)."""

    tokens: FloatArray
    expert_ids: NDArray[np.int64]
    weights: FloatArray

    def __post_init__(self) -> None:
        if self.expert_ids.shape != self.weights.shape or self.expert_ids.shape[0] != self.tokens.shape[0]:
            raise ShapeError("Gate results do not match the token batch", "moe_core")

    def __len__(self) -> int:
        return int(self.tokens.shape[0])

    @property
    def top_k(self) -> int:
        return int(self.expert_ids.shape[1])

    def dense_weights(self, m: int) -> FloatArray:
        """Return the ``(T, m)`` gate-weight matrix ``g`` (zeros off the top-K support)."""
        g = np.zeros((len(self), m), dtype=np.float64)
        np.put_along_axis(g, self.expert_ids, self.weights, axis=1)
        return g


@dataclass(frozen=True)
class MoELayer:
    """Routed, shared and united experts behind one gate.

    ``united_bank[j]`` serves the routed experts ``j*k .. j*k+k-1``.
    """

    routed_experts: Tuple[ExpertFFN, ...]
    shared_experts: Tuple[ExpertFFN, ...]
    united_bank: Tuple[ExpertFFN, ...]
    gate: GateUnit
    group_way: int
    metadata: Dict[str, Any] = field(default_factory=dict, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "routed_experts", tuple(self.routed_experts))
        object.__setattr__(self, "shared_experts", tuple(self.shared_experts))
        object.__setattr__(self, "united_bank", tuple(self.united_bank))
        m = len(self.routed_experts)
        if m == 0 or m != self.gate.m:
            raise ShapeError(f"Gate has {self.gate.m} centroids for {m} routed experts", "moe_core")
        if self.group_way < 1 or self.group_way > m:
            raise ParameterError(f"group_way must be in [1, {m}], got {self.group_way}", "moe_core")
        if len(self.united_bank) != self.n_groups:
            raise ShapeError(
                f"United bank has {len(self.united_bank)} experts, expected {self.n_groups}",
                "moe_core",
            )
        shape = (self.gate.d, self.routed_experts[0].h)
        for expert in (*self.routed_experts, *self.shared_experts, *self.united_bank):
            if (expert.d, expert.h) != shape:
                raise ShapeError(f"Expert shape {(expert.d, expert.h)} differs from layer shape {shape}", "moe_core")

    @classmethod
    def build(
        cls,
        routed: Sequence[ExpertFFN],
        gate: GateUnit,
        group_way: int,
        shared: Sequence[ExpertFFN] = (),
        united: Optional[Sequence[ExpertFFN]] = None,
    ) -> "MoELayer":
        """Assemble a layer; an absent united bank starts as copies of each group's first expert."""
        if united is None or len(united) == 0:
            united = [routed[j * group_way].copy() for j in range(math.ceil(len(routed) / group_way))]
        return cls(tuple(routed), tuple(shared), tuple(united), gate, group_way)

    @classmethod
    def random(
        cls,
        d: int,
        h: int,
        m: int,
        k: int,
        top_k: int,
        n_shared: int = 0,
        seed: int = 0,
        skew: float = 0.0,
        activation: Activation = Activation.RELU,
    ) -> "MoELayer":
        """Seeded toy layer.

        Centroid norms decay as ``exp(-skew * i / m)`` so that, with standard
        normal tokens, expert popularity is long-tailed for ``skew > 0``.
        """
        rng = np.random.default_rng(seed)
        scales = np.exp(-skew * np.arange(m) / m)
        centroids = rng.standard_normal((m, d)) * scales[:, None]

        def make() -> ExpertFFN:
            return ExpertFFN(
                rng.standard_normal((d, h)) / math.sqrt(d),
                rng.standard_normal((h, d)) / math.sqrt(h),
                activation,
            )

        routed = [make() for _ in range(m)]
        shared = [make() for _ in range(n_shared)]
        return cls.build(routed, GateUnit(centroids, top_k), k, shared)

    @property
    def m(self) -> int:
        return len(self.routed_experts)

    @property
    def d(self) -> int:
        return self.gate.d

    @property
    def h(self) -> int:
        return self.routed_experts[0].h

    @property
    def n_groups(self) -> int:
        return math.ceil(self.m / self.group_way)

    def group_of(self, expert_id: int) -> int:
        return expert_id // self.group_way

    def group_members(self, group_id: int) -> List[int]:
        start = group_id * self.group_way
        return list(range(start, min(start + self.group_way, self.m)))

    def with_united_bank(self, bank: Sequence[ExpertFFN]) -> "MoELayer":
        return replace(self, united_bank=tuple(bank))

    def with_group_way(self, way: int) -> "MoELayer":
        """Same experts and gate grouped ``way`` at a time; the united bank is reset."""
        if way == self.group_way:
            return self
        return MoELayer.build(self.routed_experts, self.gate, way, self.shared_experts)


def gate_scores(x: HiddenVector, gate: GateUnit) -> FloatArray:
    """Affinity of token ``x`` to every routed expert: ``s_i = x · e_i``."""
    vec = np.asarray(x, dtype=np.float64)
    if vec.ndim != 1 or vec.shape[0] != gate.d:
        raise ShapeError(
            f"Token of shape {vec.shape} does not match centroid dimension {gate.d}",
            "moe_core",
        )
    return gate.centroids @ vec


def batch_gate_scores(tokens: FloatArray, gate: GateUnit) -> FloatArray:
    """Score matrix ``(T, m)`` for a batch of tokens."""
    return as_token_matrix(tokens, gate.d) @ gate.centroids.T


def top_k_softmax(scores: FloatArray, k: int) -> Tuple[NDArray[np.int64], FloatArray]:
    """Row-wise top-K selection with softmax over the selected scores.

    Ties go to the lower expert id (stable sort on negated scores).
    """
    scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    m = scores.shape[1]
    if k < 1 or k > m:
        raise ParameterError(f"K must be in [1, {m}], got {k}", "moe_core", {"K": k, "m": m})
    ids = np.argsort(-scores, axis=1, kind="stable")[:, :k]
    selected = np.take_along_axis(scores, ids, axis=1)
    shifted = np.exp(selected - selected.max(axis=1, keepdims=True))
    weights = shifted / shifted.sum(axis=1, keepdims=True)
    return ids.astype(np.int64), weights


def gate_weights(scores: FloatArray, K: int) -> FloatArray:
    """Sparse gate vector ``g``: softmax over the K largest scores, zero elsewhere.

    A selected score more than ~745 below the top underflows to weight 0, so the
    support can then be smaller than K. ``top_k_softmax`` still reports all K ids.
    """
    scores = np.asarray(scores, dtype=np.float64)
    ids, weights = top_k_softmax(scores.reshape(1, -1), K)
    g = np.zeros(scores.shape[0], dtype=np.float64)
    g[ids[0]] = weights[0]
    return g


def route_tokens(layer: MoELayer, tokens: Any) -> TokenBatch:
    """Gate a batch of tokens through the layer's gate unit."""
    matrix = as_token_matrix(tokens, layer.d)
    ids, weights = top_k_softmax(batch_gate_scores(matrix, layer.gate), layer.gate.top_k)
    return TokenBatch(matrix, ids, weights)


def expert_assignments(batch: TokenBatch, m: int) -> List[ExpertAssignment]:
    """Per-expert ``(id, cnt, token positions)`` for every (token, expert) visit in the batch."""
    return assignments_from_batch(batch.expert_ids, m)


def expert_forward(e: ExpertFFN, tokens: Any) -> FloatArray:
    """Apply one expert to a batch; row order is preserved."""
    matrix = as_token_matrix(tokens, e.d)
    return apply_activation(e.activation, matrix @ e.up_weights) @ e.down_weights


def _visit_weights(batch: TokenBatch) -> Dict[Tuple[int, int], float]:
    lookup: Dict[Tuple[int, int], float] = {}
    for t in range(len(batch)):
        for slot in range(batch.top_k):
            lookup[(int(batch.expert_ids[t, slot]), t)] = float(batch.weights[t, slot])
    return lookup


def _shared_sum(layer: MoELayer, tokens: FloatArray) -> FloatArray:
    out = tokens.copy()
    for expert in layer.shared_experts:
        out += expert_forward(expert, tokens)
    return out


def moe_forward(layer: MoELayer, batch: TokenBatch, plan: RoutingPlan) -> FloatArray:
    """Brownout MoE output for every token in the batch.

    ``h_t = x_t + Σ shared(x_t) + Σ p_it·routed_i(x_t) + Σ q_it·united_f(i)(x_t)``
    where ``p`` carries the gate weight for visits executed by original experts
    and ``q`` for visits delegated to a united expert. Dropped visits add nothing.
    Contributions are accumulated in ascending expert-id order.

    Raises:
        ConsistencyError: If the plan does not describe this batch's gating
    """
    if plan.m != layer.m or plan.way != layer.group_way:
        raise ConsistencyError(
            "Routing plan was built for a different layer geometry",
            "moe_core",
            {"plan_m": plan.m, "layer_m": layer.m, "plan_way": plan.way, "layer_way": layer.group_way},
        )
    weights = _visit_weights(batch)
    planned = plan.visits()
    if planned != set(weights):
        raise ConsistencyError(
            "Routing plan visits do not match the batch gate assignments",
            "moe_core",
            {"planned": len(planned), "gated": len(weights)},
        )

    tokens = batch.tokens
    out = _shared_sum(layer, tokens)

    # expert id -> (rows, outputs aligned with rows)
    contributions: Dict[int, Tuple[List[int], FloatArray]] = {}
    for assignment in plan.s1:
        rows = list(assignment.token_indices)
        if rows:
            expert = layer.routed_experts[assignment.expert_id]
            contributions[assignment.expert_id] = (rows, expert_forward(expert, tokens[rows]))
    for group in plan.s2_groups:
        merged = list(group.merged_token_indices)
        if group.is_united:
            executed = expert_forward(layer.united_bank[group.group_id], tokens[merged])
        else:
            executed = expert_forward(layer.routed_experts[group.executor_id], tokens[merged])
        offset = 0
        for member in group.members:
            count = len(member.token_indices)
            contributions[member.expert_id] = (list(member.token_indices), executed[offset : offset + count])
            offset += count

    for expert_id in sorted(contributions):
        rows, outputs = contributions[expert_id]
        for position, t in enumerate(rows):
            out[t] += weights[(expert_id, t)] * outputs[position]
    return out


def reference_forward(layer: MoELayer, batch: TokenBatch) -> FloatArray:
    """Standard top-K MoE forward without any brownout (all visits by originals)."""
    tokens = batch.tokens
    out = tokens.copy()
    for expert in layer.shared_experts:
        out += expert_forward(expert, tokens)
    for expert_id in range(layer.m):
        rows = [t for t in range(len(batch)) if expert_id in batch.expert_ids[t]]
        if not rows:
            continue
        outputs = expert_forward(layer.routed_experts[expert_id], tokens[rows])
        slots = [int(np.nonzero(batch.expert_ids[t] == expert_id)[0][0]) for t in rows]
        for position, (t, slot) in enumerate(zip(rows, slots)):
            out[t] += batch.weights[t, slot] * outputs[position]
    return out


class ExpertDocument(BaseModel):
    """Flat row-major weights of one expert."""

    model_config = ConfigDict(extra="forbid")

    up: List[float] = Field(..., description="d*h up-projection weights, row-major")
    down: List[float] = Field(..., description="h*d down-projection weights, row-major")


class LayerDocument(BaseModel):
    """JSON form of an MoE layer, shared by the distill and simulate commands."""

    model_config = ConfigDict(extra="forbid")

    d: int = Field(..., ge=1)
    h: int = Field(..., ge=1)
    m: int = Field(..., ge=1)
    k: int = Field(..., ge=1)
    n_shared: int = Field(0, ge=0)
    top_k: int = Field(..., ge=1)
    activation: Activation = Activation.RELU
    gate: List[float] = Field(..., description="m*d centroid matrix, row-major")
    routed: List[ExpertDocument]
    shared: List[ExpertDocument] = Field(default_factory=list)
    united: List[ExpertDocument] = Field(default_factory=list, description="Empty until distilled")

    @model_validator(mode="after")
    def validate_sizes(self) -> "LayerDocument":
        """Check every flat array against the declared geometry."""
        if self.k > self.m:
            raise ValueError(f"k={self.k} exceeds m={self.m}")
        if self.top_k > self.m:
            raise ValueError(f"top_k={self.top_k} exceeds m={self.m}")
        if len(self.gate) != self.m * self.d:
            raise ValueError(f"gate must have m*d={self.m * self.d} entries, got {len(self.gate)}")
        if len(self.routed) != self.m:
            raise ValueError(f"expected {self.m} routed experts, got {len(self.routed)}")
        if len(self.shared) != self.n_shared:
            raise ValueError(f"expected {self.n_shared} shared experts, got {len(self.shared)}")
        n_groups = math.ceil(self.m / self.k)
        if self.united and len(self.united) != n_groups:
            raise ValueError(f"expected 0 or {n_groups} united experts, got {len(self.united)}")
        for expert in (*self.routed, *self.shared, *self.united):
            if len(expert.up) != self.d * self.h or len(expert.down) != self.h * self.d:
                raise ValueError("expert weight arrays do not match d*h")
        return self

    def _expert(self, doc: ExpertDocument) -> ExpertFFN:
        return ExpertFFN(
            np.array(doc.up, dtype=np.float64).reshape(self.d, self.h),
            np.array(doc.down, dtype=np.float64).reshape(self.h, self.d),
            self.activation,
        )

    def to_layer(self) -> MoELayer:
        gate = GateUnit(np.array(self.gate, dtype=np.float64).reshape(self.m, self.d), self.top_k)
        layer = MoELayer.build(
            [self._expert(e) for e in self.routed],
            gate,
            self.k,
            [self._expert(e) for e in self.shared],
            [self._expert(e) for e in self.united] or None,
        )
        logger.info(f"Loaded layer d={self.d} h={self.h} m={self.m} k={self.k} top_k={self.top_k}")
        return layer

    @classmethod
    def from_layer(cls, layer: MoELayer, include_united: bool = True) -> "LayerDocument":
        def doc(e: ExpertFFN) -> ExpertDocument:
            return ExpertDocument(up=e.up_weights.ravel().tolist(), down=e.down_weights.ravel().tolist())

        return cls(
            d=layer.d,
            h=layer.h,
            m=layer.m,
            k=layer.group_way,
            n_shared=len(layer.shared_experts),
            top_k=layer.gate.top_k,
            activation=layer.routed_experts[0].activation,
            gate=layer.gate.centroids.ravel().tolist(),
            routed=[doc(e) for e in layer.routed_experts],
            shared=[doc(e) for e in layer.shared_experts],
            united=[doc(e) for e in layer.united_bank] if include_united else [],
        )
