"""Brownout routing: decide which experts run as originals, which are delegated.

Given per-expert token counts from the gate, the router sorts experts by load,
keeps the shortest prefix that covers ``threshold`` of all routed visits on the
original experts (set S1) and either drops the rest (full brownout) or hands
them, grouped by ``expert_id // way``, to the group's united expert (partial
brownout). A group with a single delegated member is executed by that member's
original expert instead.

The routing unit is a (token, expert) visit: with top-K gating a token appears
in K expert lists.
"""

import logging
import sys
from dataclasses import dataclass
from enum import Enum
from typing import Any, Dict, List, Sequence, Set, Tuple

import numpy as np
from numpy.typing import NDArray
from pydantic import BaseModel, ConfigDict, Field

from .errors import ConsistencyError, ParameterError

# Configure logging to stderr only (never stdout - corrupts JSON/CSV command output)
logging.basicConfig(stream=sys.stderr, level=logging.INFO)
logger = logging.getLogger("brownout-moe.router")

MAX_ORACLE_EXPERTS = 20


class BrownoutStrategy(str, Enum):
    ZERO = "zero"
    FULL = "full"
    PARTIAL = "partial"


class BrownoutConfig(BaseModel):
    """Brownout control surface: group way, threshold and drop/delegate switch."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    way: int = Field(..., ge=1, description="Original experts per united expert (k)")
    threshold: float = Field(1.0, ge=0.0, le=1.0, description="Share of visits kept on original experts")
    use_full_brownout: bool = Field(False, description="Drop below-threshold visits instead of delegating")

    @property
    def strategy(self) -> BrownoutStrategy:
        if self.threshold >= 1.0:
            return BrownoutStrategy.ZERO
        return BrownoutStrategy.FULL if self.use_full_brownout else BrownoutStrategy.PARTIAL


@dataclass(frozen=True)
class ExpertAssignment:
    """Visits routed to one original expert: ``(id, cnt, token positions)``."""

    expert_id: int
    token_count: int
    token_indices: Tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if self.token_count != len(self.token_indices):
            raise ConsistencyError(
                f"Expert {self.expert_id}: token_count {self.token_count} != {len(self.token_indices)} indices",
                "router",
            )
        if self.expert_id < 0:
            raise ParameterError(f"Negative expert id {self.expert_id}", "router")

    @classmethod
    def of_count(cls, expert_id: int, count: int) -> "ExpertAssignment":
        """Assignment with synthetic token positions ``0..count-1`` (for count-only inputs)."""
        return cls(expert_id, count, tuple(range(count)))


@dataclass(frozen=True)
class S2Group:
    """Delegated experts sharing one group, and who executes them."""

    group_id: int
    members: Tuple[ExpertAssignment, ...]

    @property
    def is_united(self) -> bool:
        return len(self.members) > 1

    @property
    def executor_id(self) -> int:
        """United expert id for a normal group, original expert id for a singleton."""
        return self.group_id if self.is_united else self.members[0].expert_id

    @property
    def executor_label(self) -> str:
        return f"UE{self.group_id}" if self.is_united else f"E{self.members[0].expert_id}"

    @property
    def member_expert_ids(self) -> List[int]:
        return [member.expert_id for member in self.members]

    @property
    def merged_token_indices(self) -> List[int]:
        return [t for member in self.members for t in member.token_indices]

    @property
    def token_count(self) -> int:
        return sum(member.token_count for member in self.members)


@dataclass(frozen=True)
class RoutingPlan:
    """Output of the brownout router for one layer and one batch."""

    s1: Tuple[ExpertAssignment, ...]
    s2_groups: Tuple[S2Group, ...]
    dropped: Tuple[ExpertAssignment, ...]
    coverage_target: float
    m: int
    way: int
    total_visits: int

    @property
    def dropped_token_indices(self) -> List[int]:
        return [t for assignment in self.dropped for t in assignment.token_indices]

    def visits(self) -> Set[Tuple[int, int]]:
        """Every (expert id, token position) pair the plan accounts for."""
        pairs: Set[Tuple[int, int]] = set()
        for assignment in (*self.s1, *self.dropped, *(m for g in self.s2_groups for m in g.members)):
            pairs.update((assignment.expert_id, t) for t in assignment.token_indices)
        return pairs

    def executor_ids(self) -> List[str]:
        return [f"E{a.expert_id}" for a in self.s1] + [g.executor_label for g in self.s2_groups]


class PlanStats(BaseModel):
    """Aggregate access and visit counts of a routing plan."""

    model_config = ConfigDict(frozen=True)

    experts_accessed: int = Field(..., ge=0)
    tokens_via_originals: int = Field(..., ge=0, description="Visits executed by original experts")
    tokens_via_united: int = Field(..., ge=0, description="Visits executed by united experts")
    tokens_dropped: int = Field(..., ge=0)
    access_fraction: float = Field(..., ge=0.0)

    @property
    def processed_visits(self) -> int:
        return self.tokens_via_originals + self.tokens_via_united

    @property
    def total_visits(self) -> int:
        return self.processed_visits + self.tokens_dropped


def assignments_from_batch(expert_ids: NDArray[np.int64], m: int) -> List[ExpertAssignment]:
    """Turn a ``(T, K)`` matrix of gate selections into per-expert assignments.

    Token positions inside each assignment are ascending.
    """
    ids = np.asarray(expert_ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= m):
        raise ConsistencyError(f"Gate selected expert ids outside [0, {m})", "router")
    flat = ids.ravel()
    positions = np.repeat(np.arange(ids.shape[0]), ids.shape[1] if ids.ndim == 2 else 1)
    order = np.argsort(flat, kind="stable")
    counts = np.bincount(flat, minlength=m)
    sorted_positions = positions[order].tolist()
    assignments: List[ExpertAssignment] = []
    start = 0
    for expert_id in range(m):
        count = int(counts[expert_id])
        assignments.append(ExpertAssignment(expert_id, count, tuple(sorted_positions[start : start + count])))
        start += count
    return assignments


def coverage_target(total: int, threshold: float) -> float:
    """Visits S1 must cover, ``total * threshold`` rounded to 9 decimals.

    The rounding keeps products such as ``25 * 0.28`` at exactly 7.
    """
    return round(total * threshold, 9)


def plan_brownout(assignments: Sequence[ExpertAssignment], m: int, config: BrownoutConfig) -> RoutingPlan:
    """Split experts into originals (S1) and delegated/dropped (S2).

    S1 is the shortest prefix of the load-sorted experts (count descending,
    lower id first on ties) whose cumulative visits reach ``T = S * threshold``.
    Experts with no visits belong to neither set.

    Args:
        assignments: One assignment per expert id ``0..m-1``
        m: Number of routed experts
        config: Brownout configuration

    Returns:
        The routing plan

    Raises:
        ConsistencyError: If assignments do not cover each expert id exactly once
        ParameterError: If ``config.way`` exceeds ``m``
    """
    if sorted(a.expert_id for a in assignments) != list(range(m)):
        raise ConsistencyError(
            f"Assignments must cover expert ids 0..{m - 1} exactly once",
            "router",
            {"ids": sorted(a.expert_id for a in assignments)},
        )
    if config.way > m:
        raise ParameterError(f"way {config.way} exceeds number of experts {m}", "router")

    total = sum(a.token_count for a in assignments)
    target = coverage_target(total, config.threshold)
    ranked = sorted(assignments, key=lambda a: (-a.token_count, a.expert_id))

    s1: List[ExpertAssignment] = []
    rest: List[ExpertAssignment] = []
    covered = 0
    for assignment in ranked:
        if assignment.token_count == 0:
            continue
        if covered < target:
            s1.append(assignment)
            covered += assignment.token_count
        else:
            rest.append(assignment)

    dropped: Tuple[ExpertAssignment, ...] = ()
    groups: List[S2Group] = []
    if config.use_full_brownout:
        dropped = tuple(sorted(rest, key=lambda a: a.expert_id))
    else:
        by_group: Dict[int, List[ExpertAssignment]] = {}
        for assignment in rest:
            by_group.setdefault(assignment.expert_id // config.way, []).append(assignment)
        for group_id in sorted(by_group):
            members = tuple(sorted(by_group[group_id], key=lambda a: a.expert_id))
            groups.append(S2Group(group_id, members))

    plan = RoutingPlan(tuple(s1), tuple(groups), dropped, target, m, config.way, total)
    logger.debug(f"Planned {len(s1)} originals, {len(groups)} delegated groups, {len(dropped)} dropped experts")
    return plan


def plan_stats(plan: RoutingPlan, m: int) -> PlanStats:
    """Executor and visit tallies for a plan.

    Singleton groups run on their original expert, so their visits count
    toward ``tokens_via_originals``.
    """
    via_originals = sum(a.token_count for a in plan.s1)
    via_united = 0
    for group in plan.s2_groups:
        if group.is_united:
            via_united += group.token_count
        else:
            via_originals += group.token_count
    accessed = len(plan.s1) + len(plan.s2_groups)
    return PlanStats(
        experts_accessed=accessed,
        tokens_via_originals=via_originals,
        tokens_via_united=via_united,
        tokens_dropped=sum(a.token_count for a in plan.dropped),
        access_fraction=accessed / m if m else 0.0,
    )


def minimal_cover_oracle(counts: Sequence[int], T: float) -> int:
    """Smallest number of experts whose counts sum to at least ``T`` (exhaustive).

    Raises:
        ParameterError: If more than 20 experts are given or ``T`` exceeds the total
    """
    if len(counts) > MAX_ORACLE_EXPERTS:
        raise ParameterError(
            f"Exhaustive cover search supports at most {MAX_ORACLE_EXPERTS} experts, got {len(counts)}",
            "router",
        )
    if T <= 0:
        return 0
    sums = np.zeros(1, dtype=np.float64)
    sizes = np.zeros(1, dtype=np.int64)
    for count in counts:
        sums = np.concatenate([sums, sums + count])
        sizes = np.concatenate([sizes, sizes + 1])
    feasible = sizes[sums >= T]
    if feasible.size == 0:
        raise ParameterError(f"No subset reaches T={T} (total {sum(counts)})", "router")
    return int(feasible.min())


def plan_to_dict(plan: RoutingPlan, stats: PlanStats) -> Dict[str, Any]:
    """JSON-ready rendering of a plan and its statistics."""
    return {
        "coverage_target": plan.coverage_target,
        "total_visits": plan.total_visits,
        "s1": [{"expert_id": a.expert_id, "token_count": a.token_count} for a in plan.s1],
        "s2_groups": [
            {
                "group_id": g.group_id,
                "executor": g.executor_label,
                "member_expert_ids": g.member_expert_ids,
                "token_count": g.token_count,
            }
            for g in plan.s2_groups
        ],
        "dropped": [{"expert_id": a.expert_id, "token_count": a.token_count} for a in plan.dropped],
        "executors": plan.executor_ids(),
        "stats": stats.model_dump(),
    }
