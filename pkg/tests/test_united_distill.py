"""Tests for united-expert distillation."""

import numpy as np
import pytest

from src.errors import ParameterError, TrainingError
from src.moe_core import Activation, ExpertFFN, MoELayer
from src.united_distill import (
    DistillConfig,
    distill_group,
    distill_layer,
    group_loss,
    group_loss_gradient,
    synthetic_tokens,
    variance_lower_bound,
)


def linear_group(k, d, seed):
    rng = np.random.default_rng(seed)
    return [ExpertFFN(np.eye(d), 0.5 * rng.standard_normal((d, d)), Activation.LINEAR) for _ in range(k)]


class TestGroupLoss:
    """Test the group loss and its floor."""

    def test_identical_experts_have_zero_loss(self):
        """Test a united copy of identical experts has zero loss."""
        expert = linear_group(1, 4, 0)[0]
        tokens = synthetic_tokens(32, 4, 1)
        assert group_loss(expert.copy(), [expert, expert.copy()], tokens) == 0.0

    def test_loss_is_order_invariant(self):
        """Test permuting the members or the tokens leaves the loss unchanged."""
        group = linear_group(3, 4, 2)
        united = linear_group(1, 4, 3)[0]
        tokens = synthetic_tokens(40, 4, 4)
        base = group_loss(united, group, tokens)

        assert group_loss(united, group[::-1], tokens) == pytest.approx(base, rel=1e-12)
        perm = np.random.default_rng(5).permutation(40)
        assert group_loss(united, group, tokens[perm]) == pytest.approx(base, rel=1e-12)

    def test_lower_bound_is_a_floor(self):
        """Test no united expert beats the teachers' pointwise mean."""
        group = linear_group(3, 4, 6)
        tokens = synthetic_tokens(64, 4, 7)
        floor = variance_lower_bound(group, tokens)
        assert floor > 0
        for seed in range(5):
            assert group_loss(linear_group(1, 4, 100 + seed)[0], group, tokens) >= floor

    def test_empty_tokens(self):
        """Test an empty token set raises ParameterError."""
        with pytest.raises(ParameterError, match="at least one token"):
            group_loss(linear_group(1, 4, 0)[0], linear_group(2, 4, 0), np.zeros((0, 4)))

    @pytest.mark.parametrize("activation", [Activation.SILU, Activation.LINEAR, Activation.GELU])
    def test_gradient_matches_finite_differences(self, activation):
        """Test the analytic gradient against central differences."""
        rng = np.random.default_rng(8)
        group = [ExpertFFN(rng.standard_normal((3, 5)), rng.standard_normal((5, 3)), activation) for _ in range(2)]
        united = ExpertFFN(rng.standard_normal((3, 5)), rng.standard_normal((5, 3)), activation)
        tokens = synthetic_tokens(16, 3, 9)

        _, grad_up, grad_down = group_loss_gradient(united, group, tokens)
        eps = 1e-6
        for name, analytic in (("up", grad_up), ("down", grad_down)):
            numeric = np.zeros_like(analytic)
            for index in np.ndindex(analytic.shape):
                weights = {"up": united.up_weights.copy(), "down": united.down_weights.copy()}
                weights[name][index] += eps
                plus = group_loss(ExpertFFN(weights["up"], weights["down"], activation), group, tokens)
                weights[name][index] -= 2 * eps
                minus = group_loss(ExpertFFN(weights["up"], weights["down"], activation), group, tokens)
                numeric[index] = (plus - minus) / (2 * eps)
            error = np.linalg.norm(numeric - analytic) / max(np.linalg.norm(analytic), 1e-12)
            assert error < 1e-4


class TestDistillGroup:
    """Test training one united expert."""

    def test_identical_experts_converge(self):
        """Test identical originals are distilled to a near-zero loss."""
        rng = np.random.default_rng(10)
        expert = ExpertFFN(rng.standard_normal((4, 4)), rng.standard_normal((4, 4)))
        tokens = synthetic_tokens(64, 4, 11)
        united, report = distill_group([expert, expert.copy()], tokens, DistillConfig(epochs=2000))

        assert report.final_loss < 1e-6
        assert group_loss(united, [expert, expert], tokens) < 1e-6

    def test_linear_experts_reach_the_floor(self):
        """Test linear experts are distilled to within 5% of the variance floor."""
        group = linear_group(2, 4, 12)
        tokens = synthetic_tokens(256, 4, 13)
        cfg = DistillConfig(learning_rate=0.1, epochs=2000, batch_size=256)
        _, report = distill_group(group, tokens, cfg)

        assert report.final_loss <= 1.05 * report.lower_bound
        assert report.final_loss >= report.lower_bound * (1 - 1e-9)

    def test_loss_never_ends_above_start(self):
        """Test the returned weights are the best seen."""
        rng = np.random.default_rng(14)
        group = [ExpertFFN(rng.standard_normal((4, 8)), rng.standard_normal((8, 4))) for _ in range(3)]
        _, report = distill_group(group, synthetic_tokens(128, 4, 15), DistillConfig(epochs=50))

        assert report.final_loss <= report.loss_curve[0][1]
        assert report.final_loss == min(loss for _, loss in report.loss_curve)
        assert report.epochs_run == 50

    def test_tolerance_stops_early(self):
        """Test training stops once the loss is under the tolerance."""
        group = linear_group(2, 4, 16)
        cfg = DistillConfig(learning_rate=0.1, epochs=500, batch_size=256, tolerance=1e6)
        _, report = distill_group(group, synthetic_tokens(64, 4, 17), cfg)
        assert report.epochs_run == 0
        assert len(report.loss_curve) == 1

    def test_divergence_raises(self):
        """Test an exploding learning rate raises TrainingError."""
        group = linear_group(2, 4, 18)
        cfg = DistillConfig(learning_rate=50.0, epochs=500, batch_size=256)
        with pytest.raises(TrainingError, match="group 0"):
            distill_group(group, synthetic_tokens(64, 4, 19), cfg)

    def test_no_experts(self):
        """Test an empty group is rejected."""
        with pytest.raises(ParameterError, match="at least one original"):
            distill_group([], synthetic_tokens(8, 4, 0), DistillConfig())


class TestDistillLayer:
    """Test distilling every group of a layer."""

    @pytest.mark.parametrize(("way", "sizes"), [(2, [2, 2, 2, 2]), (3, [3, 3, 2])])
    def test_group_partition(self, way, sizes):
        """Test m=8 splits into consecutive groups of the requested way."""
        layer = MoELayer.random(d=4, h=4, m=8, k=way, top_k=2, seed=20)
        distilled, reports = distill_layer(layer, synthetic_tokens(32, 4, 21), DistillConfig(epochs=5))

        assert [len(r.member_expert_ids) for r in reports] == sizes
        assert reports[-1].member_expert_ids == list(range(8 - sizes[-1], 8))
        assert len(distilled.united_bank) == len(sizes)
        assert all(a is b for a, b in zip(distilled.routed_experts, layer.routed_experts))

    def test_workers_do_not_change_results(self):
        """Test parallel training reproduces sequential training."""
        layer = MoELayer.random(d=4, h=4, m=6, k=2, top_k=2, seed=22)
        tokens = synthetic_tokens(96, 4, 23)
        cfg = DistillConfig(epochs=10, batch_size=16, seed=3)

        sequential, seq_reports = distill_layer(layer, tokens, cfg, max_workers=1)
        parallel, par_reports = distill_layer(layer, tokens, cfg, max_workers=3)

        assert [r.final_loss for r in seq_reports] == [r.final_loss for r in par_reports]
        for a, b in zip(sequential.united_bank, parallel.united_bank):
            np.testing.assert_array_equal(a.down_weights, b.down_weights)
