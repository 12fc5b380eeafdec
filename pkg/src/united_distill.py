"""Knowledge distillation of united experts.

Each group of ``k`` consecutive routed experts acts as the teacher for one
united expert (the student). The student minimises the mean squared distance
between its hidden-state output and every teacher's output, averaged over the
group and over tokens:

    L = mean_t (1/k) Σ_i ||H_u(x_t) - H_o^i(x_t)||²

Training is plain gradient descent with a fixed learning rate, starting from a
copy of the group's first original expert.
"""

import logging
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from typing import Any, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .errors import ParameterError, ShapeError, TrainingError
from .moe_core import (
    ExpertFFN,
    FloatArray,
    MoELayer,
    activation_derivative,
    apply_activation,
    as_token_matrix,
    expert_forward,
)

# Configure logging to stderr only (never stdout - corrupts JSON/CSV command output)
logging.basicConfig(stream=sys.stderr, level=logging.INFO)
logger = logging.getLogger("brownout-moe.distill")


class DistillConfig(BaseModel):
    """Optimizer settings for united-expert training."""

    model_config = ConfigDict(extra="forbid")

    learning_rate: float = Field(0.05, gt=0.0)
    epochs: int = Field(500, ge=1)
    batch_size: int = Field(64, ge=1)
    seed: int = 0
    tolerance: float = Field(0.0, ge=0.0, description="Stop once the loss falls below this value")


class DistillReport(BaseModel):
    """Loss history of one group's distillation."""

    group_id: int
    member_expert_ids: List[int]
    loss_curve: List[Tuple[int, float]]
    final_loss: float = Field(..., ge=0.0)
    lower_bound: float = Field(..., ge=0.0)
    epochs_run: int


def synthetic_tokens(n: int, d: int, seed: int) -> FloatArray:
    """Seeded standard-normal hidden states used as distillation inputs."""
    return np.random.default_rng(seed).standard_normal((n, d))


def _check_group(originals: Sequence[ExpertFFN], tokens: Any) -> FloatArray:
    if not originals:
        raise ParameterError("A group needs at least one original expert", "distill")
    matrix = as_token_matrix(tokens, originals[0].d)
    if matrix.shape[0] == 0:
        raise ParameterError("Distillation needs at least one token", "distill")
    for expert in originals:
        if (expert.d, expert.h) != (originals[0].d, originals[0].h):
            raise ShapeError("Experts in a group must share one shape", "distill")
    return matrix


def _teacher_outputs(originals: Sequence[ExpertFFN], tokens: FloatArray) -> FloatArray:
    return np.stack([expert_forward(expert, tokens) for expert in originals])


def _loss_from_outputs(student: FloatArray, teachers: FloatArray) -> float:
    per_token = ((student[None, :, :] - teachers) ** 2).sum(axis=2).mean(axis=0)
    return float(per_token.mean())


def group_loss(united: ExpertFFN, originals: Sequence[ExpertFFN], tokens: Any) -> float:
    """Per-token mean of the group MSE between the united expert and each original.

    Raises:
        ParameterError: If no tokens are given
    """
    matrix = _check_group(originals, tokens)
    return _loss_from_outputs(expert_forward(united, matrix), _teacher_outputs(originals, matrix))


def variance_lower_bound(originals: Sequence[ExpertFFN], tokens: Any) -> float:
    """Loss floor reached when the united expert outputs the teachers' pointwise mean."""
    matrix = _check_group(originals, tokens)
    teachers = _teacher_outputs(originals, matrix)
    return _loss_from_outputs(teachers.mean(axis=0), teachers)


def group_loss_gradient(
    united: ExpertFFN, originals: Sequence[ExpertFFN], tokens: Any
) -> Tuple[float, FloatArray, FloatArray]:
    """Loss and its gradient with respect to the united up and down weights."""
    matrix = _check_group(originals, tokens)
    teachers = _teacher_outputs(originals, matrix)
    return _loss_and_grad(united, teachers.mean(axis=0), teachers, matrix)


def _loss_and_grad(
    united: ExpertFFN, target_mean: FloatArray, teachers: FloatArray, tokens: FloatArray
) -> Tuple[float, FloatArray, FloatArray]:
    pre = tokens @ united.up_weights
    hidden = apply_activation(united.activation, pre)
    student = hidden @ united.down_weights
    loss = _loss_from_outputs(student, teachers)
    # dL/dy_t = (2/T) (y_t - mean_i H_o^i(x_t))
    grad_out = 2.0 * (student - target_mean) / tokens.shape[0]
    grad_down = hidden.T @ grad_out
    grad_pre = (grad_out @ united.down_weights.T) * activation_derivative(united.activation, pre)
    grad_up = tokens.T @ grad_pre
    return loss, grad_up, grad_down


def distill_group(
    originals: Sequence[ExpertFFN],
    training_tokens: Any,
    cfg: DistillConfig,
    group_id: int = 0,
    member_expert_ids: Optional[List[int]] = None,
) -> Tuple[ExpertFFN, DistillReport]:
    """Train one united expert for a group of originals.

    The lowest-loss weights seen during training are returned, so the final
    loss never exceeds the initial one.

    Raises:
        ParameterError: If no training tokens are given
        TrainingError: If the loss becomes non-finite
    """
    tokens = _check_group(originals, training_tokens)
    teachers = _teacher_outputs(originals, tokens)
    target_mean = teachers.mean(axis=0)
    lower_bound = _loss_from_outputs(target_mean, teachers)

    up = originals[0].up_weights.copy()
    down = originals[0].down_weights.copy()
    activation = originals[0].activation
    rng = np.random.default_rng(cfg.seed)
    n = tokens.shape[0]

    best_loss = _loss_from_outputs(expert_forward(ExpertFFN(up, down, activation), tokens), teachers)
    best = (up.copy(), down.copy())
    curve: List[Tuple[int, float]] = [(0, best_loss)]
    epochs_run = 0

    for epoch in range(1, cfg.epochs + 1):
        if best_loss <= cfg.tolerance:
            break
        order = rng.permutation(n) if cfg.batch_size < n else np.arange(n)
        for start in range(0, n, cfg.batch_size):
            rows = order[start : start + cfg.batch_size]
            _, grad_up, grad_down = _loss_and_grad(
                ExpertFFN(up, down, activation), target_mean[rows], teachers[:, rows], tokens[rows]
            )
            up = up - cfg.learning_rate * grad_up
            down = down - cfg.learning_rate * grad_down
            if not (np.all(np.isfinite(up)) and np.all(np.isfinite(down))):
                raise TrainingError(
                    f"Distillation of group {group_id} diverged at epoch {epoch}",
                    "distill",
                    {"learning_rate": cfg.learning_rate, "last_finite_loss": curve[-1][1], "epoch": epoch},
                )
        epochs_run = epoch
        loss = _loss_from_outputs(expert_forward(ExpertFFN(up, down, activation), tokens), teachers)
        if not math.isfinite(loss):
            raise TrainingError(
                f"Distillation of group {group_id} produced a non-finite loss at epoch {epoch}",
                "distill",
                {"learning_rate": cfg.learning_rate, "last_finite_loss": curve[-1][1], "epoch": epoch},
            )
        curve.append((epoch, loss))
        if loss < best_loss:
            best_loss = loss
            best = (up.copy(), down.copy())

    report = DistillReport(
        group_id=group_id,
        member_expert_ids=member_expert_ids if member_expert_ids is not None else list(range(len(originals))),
        loss_curve=curve,
        final_loss=best_loss,
        lower_bound=lower_bound,
        epochs_run=epochs_run,
    )
    logger.info(f"Group {group_id}: loss {curve[0][1]:.6g} -> {best_loss:.6g} (floor {lower_bound:.6g})")
    return ExpertFFN(best[0], best[1], activation), report


def distill_layer(
    layer: MoELayer, tokens: Any, cfg: DistillConfig, max_workers: int = 1
) -> Tuple[MoELayer, List[DistillReport]]:
    """Distill one united expert per index-contiguous group ``[jk, (j+1)k)``.

    Groups train independently; group ``j`` shuffles with seed ``cfg.seed + j``
    so results do not depend on ``max_workers``.
    """
    matrix = as_token_matrix(tokens, layer.d)

    def train(group_id: int) -> Tuple[ExpertFFN, DistillReport]:
        members = layer.group_members(group_id)
        group_cfg = cfg.model_copy(update={"seed": cfg.seed + group_id})
        return distill_group([layer.routed_experts[i] for i in members], matrix, group_cfg, group_id, members)

    groups = range(layer.n_groups)
    if max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            results = list(pool.map(train, groups))
    else:
        results = [train(group_id) for group_id in groups]

    logger.info(f"Distilled {len(results)} united experts (k={layer.group_way})")
    return layer.with_united_bank([united for united, _ in results]), [report for _, report in results]
