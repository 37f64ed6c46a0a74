import pytest
import sys
from pathlib import Path

import numpy as np

# Add project root to path
sys.path.insert(0, str(Path(__file__).parent.parent))

from asr.errors import ModelValidationError
from asr.structural_graph import (
    StructuralGraph,
    action,
    asr_by_dsep,
    asr_indices,
    cumulative_reward,
    d_separated,
    figure1_graph,
    indices_from_text,
    indices_to_text,
    observation,
    random_structural_graph,
    reward,
    state,
    unroll,
)


def _chain_graph(d_s: int) -> StructuralGraph:
    """s_d -> ... -> s_1 -> r, no self-loops"""
    s_to_s = np.zeros((d_s, d_s), dtype=int)
    for j in range(1, d_s):
        s_to_s[j, j - 1] = 1
    s_to_r = np.zeros(d_s, dtype=int)
    s_to_r[0] = 1
    return StructuralGraph(d_s=d_s, d_a=1, mask_s_to_s=s_to_s, mask_a_to_s=[[1] + [0] * (d_s - 1)],
                           mask_s_to_r=s_to_r, mask_a_to_r=[0], mask_s_to_o=[1] * d_s)


class TestAsrIndices:
    """Parent-closure characterization of the ASR"""

    def test_figure1(self):
        assert asr_indices(figure1_graph()) == frozenset({1, 2})
        assert indices_to_text(asr_indices(figure1_graph())) == "2,3"

    def test_no_reward_parents_is_empty(self):
        g = figure1_graph()
        data = g.to_dict()
        data["mask_s_to_r"] = [0, 0, 0]
        assert asr_indices(StructuralGraph.from_dict(data)) == frozenset()

    def test_chain_pulls_in_every_ancestor(self):
        assert asr_indices(_chain_graph(4)) == frozenset(range(4))

    def test_child_of_asr_dim_is_not_added(self):
        # s1 -> s2, only s1 rewards: s2 is a descendant, not a parent
        g = StructuralGraph(d_s=2, d_a=1, mask_s_to_s=[[1, 1], [0, 1]], mask_a_to_s=[[1, 1]],
                            mask_s_to_r=[1, 0], mask_a_to_r=[0], mask_s_to_o=[1, 1])
        assert asr_indices(g) == frozenset({0})


class TestDSeparation:
    """Unrolled network and the Bayes-ball query"""

    def setup_method(self):
        self.g = figure1_graph()
        self.dbn = unroll(self.g, T=5, gamma=0.9)

    def test_unrolled_structure(self):
        assert state(0, 1) in self.dbn
        assert cumulative_reward(2) in self.dbn
        assert (state(2, 1), state(1, 2)) in self.dbn.edges
        assert (action(0, 1), reward(2)) in self.dbn.edges
        assert (state(0, 3), observation(3)) in self.dbn.edges

    def test_gamma_zero_keeps_single_reward(self):
        dbn = unroll(self.g, T=5, gamma=0.0, reward_from=3)
        parents = set(dbn.graph.predecessors(cumulative_reward(3)))
        assert parents == {reward(3)}

    def test_directed_path_is_dependent(self):
        assert not d_separated(self.dbn, {state(1, 2)}, {cumulative_reward(2)}, set())

    def test_conditioning_on_parents_blocks(self):
        # s1 never reaches a reward; its only open trails run through observation colliders
        Z = {action(0, 1), action(0, 2), state(1, 1), state(2, 1)}
        dbn = unroll(self.g, T=5, gamma=0.9, reward_from=3)
        assert d_separated(dbn, {state(0, 2)}, {cumulative_reward(3)}, Z)
        assert not d_separated(dbn, {state(1, 2)}, {cumulative_reward(3)}, Z)

    def test_collider_opens_when_observed(self):
        # s1 and s3 at t=1 share the child o_1 only
        assert d_separated(self.dbn, {state(0, 1)}, {state(2, 1)}, set())
        assert not d_separated(self.dbn, {state(0, 1)}, {state(2, 1)}, {observation(1)})

    def test_unknown_node_rejected(self):
        with pytest.raises(ModelValidationError):
            d_separated(self.dbn, {state(0, 9)}, {cumulative_reward(2)}, set())

    def test_overlapping_sets_rejected(self):
        with pytest.raises(ModelValidationError):
            d_separated(self.dbn, {state(0, 1)}, {state(0, 1)}, set())

    def test_horizon_too_short(self):
        with pytest.raises(ModelValidationError):
            unroll(self.g, T=1, gamma=0.9)


class TestAgreement:
    """The fixpoint and the d-separation characterizations must match"""

    def test_figure1(self):
        assert asr_by_dsep(figure1_graph(), horizon=6) == frozenset({1, 2})

    def test_chain(self):
        g = _chain_graph(4)
        assert asr_by_dsep(g, horizon=g.d_s + 3) == asr_indices(g)

    def test_random_graphs(self):
        rng = np.random.default_rng(0)
        for k in range(200):
            d_s = 1 + k % 5
            g = random_structural_graph(d_s, 1, rng)
            assert asr_by_dsep(g, horizon=d_s + 3) == asr_indices(g), g.to_dict()

    def test_nonpositive_gamma_rejected(self):
        for gamma in (0.0, -0.5):
            with pytest.raises(ModelValidationError):
                asr_by_dsep(figure1_graph(), horizon=6, gamma=gamma)
        assert asr_by_dsep(figure1_graph(), horizon=6, gamma=0.5) == frozenset({1, 2})


class TestGraphIO:

    def test_dict_round_trip(self):
        g = figure1_graph()
        assert StructuralGraph.from_dict(g.to_dict()) == g

    def test_from_supports(self):
        g = StructuralGraph.from_supports(
            C_s_to_o=[[1.0, 0.0], [0.05, 0.0]],
            C_s_to_r=[0.0, 0.5],
            C_a_to_r=[0.2],
            C_s=[[0.8, 0.0], [0.3, 0.05]],
            C_a_to_s=[[0.0, 0.4]],
            threshold=0.1,
        )
        assert g.mask_s_to_s.tolist() == [[1, 0], [1, 0]]
        assert g.mask_s_to_o.tolist() == [1, 0]
        assert asr_indices(g) == frozenset({1})

    def test_non_binary_mask_rejected(self):
        data = figure1_graph().to_dict()
        data["mask_s_to_r"] = [0, 2, 1]
        with pytest.raises(ModelValidationError):
            StructuralGraph.from_dict(data)

    def test_wrong_shape_rejected(self):
        data = figure1_graph().to_dict()
        data["mask_a_to_s"] = [[1, 1]]
        with pytest.raises(ModelValidationError):
            StructuralGraph.from_dict(data)

    def test_index_text(self):
        assert indices_from_text("2,3", d_s=3) == frozenset({1, 2})
        assert indices_from_text("", d_s=3) == frozenset()
        with pytest.raises(ModelValidationError):
            indices_from_text("4", d_s=3)
        with pytest.raises(ModelValidationError):
            indices_from_text("a,b")


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
