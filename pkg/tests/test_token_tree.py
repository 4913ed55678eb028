import json

import numpy as np
import pytest

from dyspec.categorical import Categorical
from dyspec.construct import build_tree_fixed, closed_form_values
from dyspec.lm import ModelPairSpec, make_model_pair
from dyspec.token_tree import ROOT, TokenTree


def fresh_tree(root_probs=(0.5, 0.3, 0.2)):
    tree = TokenTree(prefix_len=0)
    tree.open_position(ROOT, Categorical(list(root_probs)))
    return tree


def random_built_tree(seed, budget=12, vocab=8):
    spec = ModelPairSpec(
        vocab_size=vocab, markov_order=1, target_seed=seed, noise_sigma=1.0
    )
    _, draft = make_model_pair(spec)
    return build_tree_fixed(draft.with_temperature(0.6), [0, 1], budget, seed)


class TestAddNode:
    def test_first_node_at_root(self):
        tree = fresh_tree()
        nid = tree.add_node(ROOT, 0, 1.0)
        node = tree.node(nid)
        assert (nid, node.depth, node.sibling_index) == (0, 1, 0)

    def test_second_sampling_increments_sibling_index(self):
        tree = fresh_tree()
        tree.add_node(ROOT, 0, 1.0)
        nid = tree.add_node(ROOT, 1, 0.5)
        assert tree.node(nid).sibling_index == 1

    def test_child_depth(self):
        tree = fresh_tree()
        a = tree.add_node(ROOT, 0, 1.0)
        tree.open_position(a, Categorical([0.25, 0.75, 0.0]))
        c = tree.add_node(a, 1, 0.5)
        assert tree.node(c).depth == 2
        assert tree.node(c).sibling_index == 0

    def test_duplicate_token_rejected(self):
        tree = fresh_tree()
        tree.add_node(ROOT, 0, 1.0)
        with pytest.raises(ValueError):
            tree.add_node(ROOT, 0, 0.5)

    def test_residual_updates_on_add(self):
        tree = fresh_tree((0.5, 0.3, 0.2))
        tree.add_node(ROOT, 0, 1.0)
        np.testing.assert_allclose(
            tree.positions[ROOT].residual.probs, [0.0, 0.6, 0.4]
        )

    def test_accept_weight_is_value_times_residual_prob(self):
        tree = fresh_tree((0.5, 0.3, 0.2))
        tree.add_node(ROOT, 0, 1.0)
        nid = tree.add_node(ROOT, 1, 0.5)
        # second sampling: residual prob of token 1 was 0.6
        assert tree.node(nid).accept_weight == pytest.approx(0.5 * 0.6)


class TestAncestors:
    def test_root_level_node_is_its_own_path(self):
        tree = fresh_tree()
        a = tree.add_node(ROOT, 0, 1.0)
        assert tree.ancestors(a) == [a]

    def test_chain(self):
        tree = fresh_tree()
        a = tree.add_node(ROOT, 0, 1.0)
        tree.open_position(a, Categorical([0.0, 1.0, 0.0]))
        b = tree.add_node(a, 1, 0.5)
        tree.open_position(b, Categorical([1.0, 0.0, 0.0]))
        c = tree.add_node(b, 0, 0.25)
        assert tree.ancestors(c) == [a, b, c]
        assert tree.token_path(c) == [0, 1, 0]

    def test_siblings_do_not_share_ancestry(self):
        tree = fresh_tree()
        tree.add_node(ROOT, 0, 1.0)
        b = tree.add_node(ROOT, 1, 0.5)
        assert tree.ancestors(b) == [b]


class TestPreviousSiblings:
    def test_first_sampling_has_none(self):
        tree = fresh_tree()
        a = tree.add_node(ROOT, 0, 1.0)
        assert tree.previous_siblings(a) == []

    def test_order_preserved(self):
        tree = fresh_tree()
        a = tree.add_node(ROOT, 0, 1.0)
        b = tree.add_node(ROOT, 1, 0.5)
        c = tree.add_node(ROOT, 2, 0.2)
        assert tree.previous_siblings(c) == [a, b]
        assert tree.previous_siblings(b) == [a]


class TestInvariantsOnBuiltTrees:
    def test_residual_fold_invariant(self):
        for seed in range(10):
            random_built_tree(seed).check_residuals()

    def test_values_in_unit_interval_and_monotone(self):
        for seed in range(10):
            tree = random_built_tree(seed)
            for node in tree.nodes:
                assert 0.0 < node.value <= 1.0
                if node.parent != ROOT:
                    assert node.value <= tree.node(node.parent).value + 1e-12
                sibs = tree.previous_siblings(node.node_id)
                if sibs:
                    assert node.value < tree.node(sibs[-1]).value

    def test_value_recurrence_matches_closed_form(self):
        for seed in range(10):
            tree = random_built_tree(seed)
            closed = closed_form_values(tree)
            for node in tree.nodes:
                assert node.value == pytest.approx(closed[node.node_id], abs=1e-9)

    def test_node_count_matches_sampled_totals(self):
        tree = random_built_tree(3)
        total = sum(len(p.sampled) for p in tree.positions.values())
        assert total == len(tree.nodes)


class TestDumpFormat:
    def test_json_fields(self):
        tree = random_built_tree(1, budget=5)
        data = json.loads(tree.dumps())
        assert len(data) == 5
        assert set(data[0]) == {"id", "parent", "token", "sibling_index", "value"}
        assert [d["id"] for d in data] == list(range(5))
