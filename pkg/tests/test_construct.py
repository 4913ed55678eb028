import math

import numpy as np
import pytest

from dyspec.categorical import Categorical
from dyspec.construct import (
    CostParams,
    build_tree_fixed,
    build_tree_threshold,
    closed_form_values,
    draft_conditional_probs,
    estimate_latency,
    expected_accepted,
    expected_accepted_draft_approx,
    node_sampling_keys,
    path_weight_sum,
)
from dyspec.lm import LanguageModel, ModelPairSpec, make_model_pair
from dyspec.oracle import brute_force_optimal_subtree, realized_slot_tree
from dyspec.rng import derive_seed
from dyspec.token_tree import ROOT, TokenTree


class TableDraft(LanguageModel):
    """Draft stub with explicit per-context rows; unknown contexts uniform."""

    def __init__(self, vocab_size, rows=None):
        self.vocab_size = vocab_size
        self.temperature = 1.0
        self.rows = rows or {}

    def dist(self, context):
        row = self.rows.get(tuple(context))
        if row is None:
            row = [1.0 / self.vocab_size] * self.vocab_size
        return Categorical(row)

    def next_logits(self, context):
        return np.log(np.maximum(self.dist(context).probs, 1e-300))

    def with_temperature(self, temp):
        return self


def point_mass_draft(vocab=4):
    rows = {}
    probs = [0.0] * vocab
    probs[0] = 1.0
    draft = TableDraft(vocab)
    draft.dist = lambda context: Categorical(list(probs))
    return draft


def model_draft(seed, vocab=8, sigma=1.0):
    spec = ModelPairSpec(
        vocab_size=vocab, markov_order=1, target_seed=seed, noise_sigma=sigma
    )
    _, draft = make_model_pair(spec)
    return draft


class TestBuildTreeFixed:
    def test_budget_one_single_node(self):
        draft = TableDraft(4, {(): [0.4, 0.3, 0.2, 0.1]})
        tree = build_tree_fixed(draft, [], 1, seed=0)
        assert tree.size == 1
        node = tree.nodes[0]
        assert node.value == 1.0
        # the node's acceptance weight is the draft probability of its token
        assert node.accept_weight == pytest.approx(
            draft.dist([]).probs[node.token]
        )

    def test_forced_expansion_recurrence(self):
        # Root draft [0.5, 0.3, 0.2]; force token 0 first.  The sibling entry
        # (pushed before the child) wins the 0.5 tie, so the second node is
        # another sampling at the root position drawn from [0, 0.6, 0.4].
        draft = TableDraft(3, {(): [0.5, 0.3, 0.2]})
        forced = {((), 0): 0.3, ((), 1): 0.5}
        tree = build_tree_fixed(
            draft, [], 2, seed=0, uniform_fn=lambda tag, k: forced[(tag, k)]
        )
        first, second = tree.nodes
        assert (first.token, first.value) == (0, 1.0)
        assert first.accept_weight == pytest.approx(0.5)
        assert second.parent == ROOT
        assert second.sibling_index == 1
        assert second.value == pytest.approx(0.5)
        assert second.token == 1  # cdf of [0, 0.6, 0.4] at 0.5
        assert second.accept_weight == pytest.approx(0.5 * 0.6)

    def test_point_mass_draft_builds_chain(self):
        tree = build_tree_fixed(point_mass_draft(), [], 5, seed=3)
        assert tree.size == 5
        assert tree.depth() == 5
        assert all(n.value == 1.0 for n in tree.nodes)

    def test_budget_zero_rejected(self):
        with pytest.raises(ValueError):
            build_tree_fixed(TableDraft(2), [], 0, seed=0)

    def test_budget_exactness(self):
        for seed in range(10):
            tree = build_tree_fixed(model_draft(seed), [0], 24, seed=seed)
            assert tree.size == 24

    def test_budget_short_only_on_exhaustion(self):
        # vocab 2 point-mass rows exhaust sibling positions immediately but
        # the chain still fills the budget
        tree = build_tree_fixed(point_mass_draft(2), [], 10, seed=1)
        assert tree.size == 10

    def test_popped_values_non_increasing(self):
        for seed in range(10):
            tree = build_tree_fixed(model_draft(seed), [0], 32, seed=seed)
            values = [n.value for n in tree.nodes]
            assert all(a >= b - 1e-15 for a, b in zip(values, values[1:]))


class TestBuildTreeThreshold:
    def test_threshold_one_keeps_single_sampling(self):
        draft = TableDraft(3, {(): [0.5, 0.3, 0.2]})
        tree = build_tree_threshold(draft, [], 1.0, 16, seed=2)
        assert tree.size == 1

    def test_point_mass_chain_respects_cap(self):
        tree = build_tree_threshold(point_mass_draft(), [], 0.5, 4, seed=0)
        assert tree.size == 4
        assert tree.depth() == 4

    def test_invalid_params(self):
        draft = TableDraft(2)
        with pytest.raises(ValueError):
            build_tree_threshold(draft, [], 0.0, 4, seed=0)
        with pytest.raises(ValueError):
            build_tree_threshold(draft, [], 1.5, 4, seed=0)
        with pytest.raises(ValueError):
            build_tree_threshold(draft, [], 0.5, 0, seed=0)

    def test_matches_fixed_at_cutoff_value(self):
        for seed in range(20):
            draft = model_draft(seed, vocab=12)
            budget = 4 + seed % 12
            fixed = build_tree_fixed(draft, [1, 2], budget, seed=seed)
            cutoff = min(n.value for n in fixed.nodes)
            thresh = build_tree_threshold(draft, [1, 2], cutoff, fixed.size, seed=seed)
            assert node_sampling_keys(fixed) == node_sampling_keys(thresh)
            fixed_vals = sorted(n.value for n in fixed.nodes)
            thresh_vals = sorted(n.value for n in thresh.nodes)
            np.testing.assert_allclose(fixed_vals, thresh_vals, atol=1e-12)


class TestExpectedAccepted:
    def build_example(self):
        tree = TokenTree()
        tree.open_position(ROOT, Categorical([0.4, 0.4, 0.2]))
        a = tree.add_node(ROOT, 0, 1.0)
        b = tree.add_node(ROOT, 1, 0.6)
        tree.open_position(a, Categorical([0.5, 0.5, 0.0]))
        c = tree.add_node(a, 1, 0.4)
        return tree, a, b, c

    def test_chain_of_certain_acceptance(self):
        tree = TokenTree()
        tree.open_position(ROOT, Categorical([1.0, 0.0]))
        a = tree.add_node(ROOT, 0, 1.0)
        tree.open_position(a, Categorical([1.0, 0.0]))
        b = tree.add_node(a, 0, 1.0)
        assert expected_accepted(tree, {a: 1.0, b: 1.0}) == pytest.approx(2.0)

    def test_single_node(self):
        tree = TokenTree()
        tree.open_position(ROOT, Categorical([0.5, 0.5]))
        a = tree.add_node(ROOT, 0, 1.0)
        assert expected_accepted(tree, {a: 0.7}) == pytest.approx(0.7)

    def test_siblings_and_child(self):
        tree, a, b, c = self.build_example()
        got = expected_accepted(tree, {a: 0.5, b: 0.4, c: 0.8})
        assert got == pytest.approx(0.5 + (1 - 0.5) * 0.4 + 0.5 * 0.8)

    def test_out_of_range_rejected(self):
        tree, a, b, c = self.build_example()
        with pytest.raises(ValueError):
            expected_accepted(tree, {a: 1.2, b: 0.4, c: 0.8})

    def test_adding_a_node_strictly_increases(self):
        rng = np.random.default_rng(0)
        for seed in range(10):
            tree = build_tree_fixed(model_draft(seed), [0], 10, seed=seed)
            sd = {n.node_id: float(rng.uniform(0.05, 0.95)) for n in tree.nodes}
            before = expected_accepted(tree, sd)
            # extend some position that still has residual mass
            owner = next(
                o for o, p in tree.positions.items() if not p.residual.is_zero
            )
            state = tree.positions[owner]
            token = int(np.argmax(state.residual.probs))
            new = tree.add_node(owner, token, 0.1)
            sd[new] = 0.5
            assert expected_accepted(tree, sd) > before


class TestDraftApprox:
    def test_point_mass_chain(self):
        tree = build_tree_fixed(point_mass_draft(), [], 3, seed=0)
        assert expected_accepted_draft_approx(tree) == pytest.approx(3.0)

    def test_single_root_node_half(self):
        draft = TableDraft(2, {(): [0.5, 0.5]})
        tree = build_tree_fixed(draft, [], 1, seed=0)
        assert expected_accepted_draft_approx(tree) == pytest.approx(0.5)

    def test_identity_with_path_products(self):
        for seed in range(30):
            tree = build_tree_fixed(model_draft(seed), [0, 1], 16, seed=seed)
            approx = expected_accepted_draft_approx(tree)
            assert approx == pytest.approx(path_weight_sum(tree), abs=1e-9)

    def test_conditional_probs_match_positions(self):
        tree = build_tree_fixed(model_draft(5), [0], 12, seed=5)
        probs = draft_conditional_probs(tree)
        closed = closed_form_values(tree)
        for node in tree.nodes:
            assert node.accept_weight == pytest.approx(
                closed[node.node_id] * probs[node.node_id], abs=1e-9
            )


class TestEstimateLatency:
    def test_minimal_tree(self):
        costs = CostParams(draft_cost=1.0, target_cost=100.0, per_node_overhead=0.0)
        assert estimate_latency(1, 1, 1.0, costs, "greedy") == pytest.approx(101.0)

    def test_layered_saves_draft_calls(self):
        costs = CostParams(draft_cost=1.0, target_cost=100.0, per_node_overhead=0.0)
        greedy = estimate_latency(64, 8, 1.0, costs, "greedy")
        layered = estimate_latency(64, 8, 1.0, costs, "layered")
        assert greedy - layered == pytest.approx(64 - 8)

    def test_doubling_acceptance_halves_latency(self):
        costs = CostParams(per_node_overhead=0.5)
        for mode in ("greedy", "layered"):
            one = estimate_latency(32, 6, 1.5, costs, mode)
            two = estimate_latency(32, 6, 3.0, costs, mode)
            assert one == pytest.approx(2.0 * two)

    def test_invalid_inputs(self):
        costs = CostParams()
        with pytest.raises(ValueError):
            estimate_latency(0, 1, 1.0, costs)
        with pytest.raises(ValueError):
            estimate_latency(4, 5, 1.0, costs)
        with pytest.raises(ValueError):
            estimate_latency(4, 2, 0.0, costs)
        with pytest.raises(ValueError):
            estimate_latency(4, 2, 1.0, costs, "quantum")


class TestGreedyOptimalityOnSlotTrees:
    def test_fixed_build_total_matches_brute_force(self):
        for i in range(40):
            vocab = 2 + i % 3
            budget = 3 + i % 6
            draft = model_draft(100 + i, vocab=vocab)
            prefix = [i % vocab]
            seed = derive_seed(7, "slot-opt", i)
            tree = build_tree_fixed(draft, prefix, budget, seed)
            slots = realized_slot_tree(draft, prefix, seed, max_depth=budget)
            brute = brute_force_optimal_subtree(slots, tree.size)
            total = math.fsum(n.value for n in tree.nodes)
            assert brute.best_weight == pytest.approx(total, abs=1e-12)
