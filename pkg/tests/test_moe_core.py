"""Tests for the toy MoE layer.

Covers gate scoring and top-K weights, expert evaluation, the brownout
forward pass against the standard top-K forward, and the JSON layer document.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from pydantic import ValidationError

from src.brownout_router import BrownoutConfig, plan_brownout
from src.errors import ConsistencyError, ParameterError, ShapeError
from src.moe_core import (
    Activation,
    ExpertFFN,
    GateUnit,
    LayerDocument,
    MoELayer,
    expert_assignments,
    expert_forward,
    gate_scores,
    gate_weights,
    moe_forward,
    reference_forward,
    route_tokens,
    top_k_softmax,
)


def plan_for(layer, batch, threshold, full=False):
    config = BrownoutConfig(way=layer.group_way, threshold=threshold, use_full_brownout=full)
    return plan_brownout(expert_assignments(batch, layer.m), layer.m, config)


class TestGateScores:
    """Test the dot-product gate."""

    def test_scores_against_centroids(self):
        """Test s_i = x · e_i on a small example."""
        gate = GateUnit(np.array([[2.0, 0.0], [0.0, 3.0], [1.0, 1.0]]), top_k=2)
        np.testing.assert_array_equal(gate_scores(np.array([1.0, 0.0]), gate), [2.0, 0.0, 1.0])

    def test_zero_token(self):
        """Test a zero vector scores zero everywhere."""
        gate = GateUnit(np.array([[2.0, 0.0], [0.0, 3.0], [1.0, 1.0]]), top_k=2)
        np.testing.assert_array_equal(gate_scores(np.zeros(2), gate), [0.0, 0.0, 0.0])

    def test_single_expert(self):
        """Test m=1 yields one score."""
        gate = GateUnit(np.array([[2.0, 0.0]]), top_k=1)
        np.testing.assert_array_equal(gate_scores(np.array([1.0, 0.0]), gate), [2.0])

    def test_dimension_mismatch(self):
        """Test a token of the wrong width raises ShapeError."""
        gate = GateUnit(np.array([[2.0, 0.0]]), top_k=1)
        with pytest.raises(ShapeError):
            gate_scores(np.array([1.0, 0.0, 0.0]), gate)

    def test_top_k_out_of_range(self):
        """Test the gate refuses a top-K wider than m."""
        with pytest.raises(ParameterError, match="top_k"):
            GateUnit(np.array([[1.0, 0.0]]), top_k=2)


class TestGateWeights:
    """Test the sparse top-K softmax."""

    def test_top_two(self):
        """Test weights on the two largest scores only."""
        g = gate_weights(np.array([2.0, 1.0, 0.0]), 2)
        np.testing.assert_allclose(g, [0.7311, 0.2689, 0.0], atol=1e-4)

    def test_single_score(self):
        """Test a single expert gets the whole weight."""
        np.testing.assert_array_equal(gate_weights(np.array([5.0]), 1), [1.0])

    def test_uniform_scores(self):
        """Test equal scores give equal weights."""
        np.testing.assert_allclose(gate_weights(np.ones(3), 3), [1 / 3, 1 / 3, 1 / 3])

    def test_weights_sum_to_one(self):
        """Test the non-zero entries sum to one with exactly K of them."""
        rng = np.random.default_rng(3)
        for _ in range(50):
            scores = rng.standard_normal(8)
            g = gate_weights(scores, 3)
            assert np.count_nonzero(g) == 3
            assert g.sum() == pytest.approx(1.0)
            assert np.all(g >= 0)

    def test_ties_prefer_lower_id(self):
        """Test ties are broken toward the lower expert id."""
        g = gate_weights(np.array([1.0, 2.0, 2.0, 2.0]), 2)
        assert g[1] > 0 and g[2] > 0
        assert g[3] == 0.0

    def test_far_trailing_score_underflows(self):
        """Test a selected score far below the top gets weight 0 but keeps its id."""
        g = gate_weights(np.array([0.0, -1000.0, -2000.0]), 2)
        assert g.tolist() == [1.0, 0.0, 0.0]
        ids, weights = top_k_softmax(np.array([0.0, -1000.0, -2000.0]), 2)
        assert ids.tolist() == [[0, 1]]
        assert weights.tolist() == [[1.0, 0.0]]

    @settings(max_examples=200, deadline=None)
    @given(
        scores=st.lists(st.floats(min_value=-50, max_value=50), min_size=1, max_size=16),
        k_seed=st.integers(min_value=0, max_value=1000),
    )
    def test_support_is_the_top_k(self, scores, k_seed):
        """Test the support holds the K largest scores and weights follow score order."""
        k = 1 + k_seed % len(scores)
        g = gate_weights(np.array(scores), k)
        support = np.flatnonzero(g)
        assert len(support) == k
        assert g.sum() == pytest.approx(1.0)
        ranked = np.argsort(-np.array(scores), kind="stable")[:k]
        assert set(support) <= set(ranked.tolist())
        for i in ranked:
            for j in ranked:
                if scores[i] > scores[j]:
                    assert g[i] >= g[j]

    @pytest.mark.parametrize("k", [0, 4])
    def test_k_out_of_range(self, k):
        """Test K outside [1, m] raises ParameterError."""
        with pytest.raises(ParameterError, match="K must be"):
            gate_weights(np.array([2.0, 1.0, 0.0]), k)


class TestExpertForward:
    """Test single-expert evaluation."""

    def test_identity_expert(self):
        """Test identity projections with ReLU reproduce a positive token."""
        expert = ExpertFFN(np.eye(2), np.eye(2), Activation.RELU)
        np.testing.assert_array_equal(expert_forward(expert, np.array([1.0, 2.0]))[0], [1.0, 2.0])

    def test_zero_weights(self):
        """Test all-zero weights produce zero output."""
        expert = ExpertFFN(np.zeros((2, 3)), np.zeros((3, 2)))
        np.testing.assert_array_equal(expert_forward(expert, np.array([[1.0, 2.0], [3.0, 4.0]])), np.zeros((2, 2)))

    def test_batch_matches_rowwise(self):
        """Test evaluating a batch equals evaluating each row."""
        rng = np.random.default_rng(0)
        expert = ExpertFFN(rng.standard_normal((4, 6)), rng.standard_normal((6, 4)), Activation.GELU)
        tokens = rng.standard_normal((5, 4))
        batch = expert_forward(expert, tokens)
        for t in range(5):
            np.testing.assert_allclose(batch[t], expert_forward(expert, tokens[t])[0], rtol=1e-12)

    def test_inconsistent_shapes(self):
        """Test mismatched up/down shapes raise ShapeError."""
        with pytest.raises(ShapeError, match="Inconsistent"):
            ExpertFFN(np.zeros((2, 3)), np.zeros((2, 2)))


class TestMoELayer:
    """Test layer construction and grouping."""

    def test_groups_of_way(self):
        """Test consecutive experts share a group and the last group may be short."""
        layer = MoELayer.random(d=4, h=4, m=8, k=3, top_k=2, seed=1)
        assert layer.n_groups == 3
        assert layer.group_members(2) == [6, 7]
        assert layer.group_of(5) == 1
        assert len(layer.united_bank) == 3

    def test_with_group_way(self):
        """Test regrouping keeps experts and resizes the united bank."""
        layer = MoELayer.random(d=4, h=4, m=8, k=2, top_k=2, seed=1)
        regrouped = layer.with_group_way(4)
        assert regrouped.group_way == 4
        assert len(regrouped.united_bank) == 2
        assert all(a is b for a, b in zip(regrouped.routed_experts, layer.routed_experts))
        assert layer.with_group_way(2) is layer

    def test_invalid_group_way(self):
        """Test a way above m is rejected."""
        layer = MoELayer.random(d=4, h=4, m=4, k=2, top_k=2, seed=1)
        with pytest.raises(ParameterError, match="group_way"):
            MoELayer.build(layer.routed_experts, layer.gate, 5)

    def test_random_is_seeded(self):
        """Test the same seed gives the same layer."""
        a = MoELayer.random(d=4, h=4, m=4, k=2, top_k=2, seed=9)
        b = MoELayer.random(d=4, h=4, m=4, k=2, top_k=2, seed=9)
        np.testing.assert_array_equal(a.gate.centroids, b.gate.centroids)
        np.testing.assert_array_equal(a.routed_experts[3].down_weights, b.routed_experts[3].down_weights)


class TestMoEForward:
    """Test the brownout forward pass."""

    def test_zero_brownout_matches_reference(self):
        """Test threshold 1 reproduces the standard top-K forward bit for bit."""
        rng = np.random.default_rng(11)
        for instance in range(100):
            m = int(rng.integers(2, 9))
            layer = MoELayer.random(
                d=4, h=6, m=m, k=int(rng.integers(1, m + 1)), top_k=int(rng.integers(1, m + 1)),
                n_shared=int(rng.integers(0, 2)), seed=instance,
            )
            batch = route_tokens(layer, rng.standard_normal((int(rng.integers(1, 12)), 4)))
            out = moe_forward(layer, batch, plan_for(layer, batch, 1.0))
            np.testing.assert_array_equal(out, reference_forward(layer, batch))

    def test_full_brownout_threshold_zero_is_identity(self):
        """Test dropping every visit leaves the residual only."""
        layer = MoELayer.random(d=4, h=6, m=6, k=2, top_k=2, seed=5)
        tokens = np.random.default_rng(5).standard_normal((7, 4))
        batch = route_tokens(layer, tokens)
        out = moe_forward(layer, batch, plan_for(layer, batch, 0.0, full=True))
        np.testing.assert_array_equal(out, tokens)

    def test_united_copy_of_identical_experts(self):
        """Test delegation is exact when a group's experts and its united expert are the same."""
        rng = np.random.default_rng(2)
        expert = ExpertFFN(rng.standard_normal((4, 5)), rng.standard_normal((5, 4)))
        gate = GateUnit(rng.standard_normal((6, 4)), top_k=2)
        layer = MoELayer.build([expert.copy() for _ in range(6)], gate, 3)
        batch = route_tokens(layer, rng.standard_normal((10, 4)))

        partial = moe_forward(layer, batch, plan_for(layer, batch, 0.3))
        np.testing.assert_allclose(partial, reference_forward(layer, batch), rtol=1e-12, atol=1e-12)

    def test_permutation_equivariance(self):
        """Test permuting tokens permutes the outputs."""
        rng = np.random.default_rng(4)
        layer = MoELayer.random(d=4, h=6, m=6, k=2, top_k=2, n_shared=1, seed=4)
        tokens = rng.standard_normal((9, 4))
        perm = rng.permutation(9)

        batch = route_tokens(layer, tokens)
        permuted = route_tokens(layer, tokens[perm])
        out = moe_forward(layer, batch, plan_for(layer, batch, 0.5))
        out_perm = moe_forward(layer, permuted, plan_for(layer, permuted, 0.5))
        np.testing.assert_allclose(out_perm, out[perm], rtol=1e-12, atol=1e-12)

    def test_plan_for_other_batch(self):
        """Test a plan that does not match the batch raises ConsistencyError."""
        rng = np.random.default_rng(6)
        layer = MoELayer.random(d=4, h=4, m=4, k=2, top_k=1, seed=6)
        batch = route_tokens(layer, rng.standard_normal((5, 4)))
        other = route_tokens(layer, rng.standard_normal((8, 4)))
        with pytest.raises(ConsistencyError, match="do not match"):
            moe_forward(layer, batch, plan_for(layer, other, 1.0))

    def test_plan_for_other_geometry(self):
        """Test a plan built with another way is refused."""
        layer = MoELayer.random(d=4, h=4, m=4, k=2, top_k=1, seed=6)
        batch = route_tokens(layer, np.random.default_rng(6).standard_normal((5, 4)))
        plan = plan_brownout(expert_assignments(batch, 4), 4, BrownoutConfig(way=4, threshold=0.5))
        with pytest.raises(ConsistencyError, match="geometry"):
            moe_forward(layer, batch, plan)


class TestLayerDocument:
    """Test the JSON layer document."""

    def test_layer_round_trip(self):
        """Test a layer survives conversion to a document and back."""
        layer = MoELayer.random(d=3, h=4, m=5, k=2, top_k=2, n_shared=1, seed=8, activation=Activation.SILU)
        restored = LayerDocument.model_validate_json(LayerDocument.from_layer(layer).model_dump_json()).to_layer()

        assert restored.group_way == 2
        assert restored.routed_experts[0].activation is Activation.SILU
        np.testing.assert_array_equal(restored.gate.centroids, layer.gate.centroids)
        np.testing.assert_array_equal(restored.united_bank[2].up_weights, layer.united_bank[2].up_weights)

    def test_wrong_gate_size(self):
        """Test a gate array of the wrong length is rejected."""
        document = LayerDocument.from_layer(MoELayer.random(d=3, h=4, m=5, k=2, top_k=2, seed=8)).model_dump()
        document["gate"] = document["gate"][:-1]
        with pytest.raises(ValidationError, match="gate must have"):
            LayerDocument.model_validate(document)
