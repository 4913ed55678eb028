"""Dynamic token-tree construction.

Two strategies build the same trees:

* :func:`build_tree_fixed` expands greedily, one sampling at a time, always
  popping the pending sampling with the highest estimated reach probability.
  Each expansion pushes two new pending samplings: the next sibling at the
  same position (reached if this token is rejected) and the first child of
  the new node (reached if it is accepted).

* :func:`build_tree_threshold` expands layer by layer, keeping every
  sampling whose estimated reach probability clears a threshold.  With the
  threshold set to the smallest value the greedy run kept, both algorithms
  realize the identical sampling set because every uniform draw is keyed by
  (seed, position path, sibling index) rather than by visit order.

:func:`expected_accepted` evaluates the expected number of accepted tokens
for a tree under arbitrary per-node acceptance probabilities, and
:func:`estimate_latency` is the decoding cost model used for benchmark
reporting.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

from .categorical import Categorical, remove_and_renorm, sample
from .lm import LanguageModel
from .rng import keyed_uniform
from .token_tree import ROOT, TokenTree

UniformFn = Callable[[Tuple[int, ...], int], float]


@dataclass
class HeapEntry:
    """A pending sampling: where it would happen and how likely it is reached."""

    value: float
    residual: Categorical
    position_owner: int
    position_tag: Tuple[int, ...]


@dataclass(frozen=True)
class CostParams:
    """Cost model constants: per-step model times and construction overhead."""

    draft_cost: float = 1.0
    target_cost: float = 2000.0
    per_node_overhead: float = 0.0

    def __post_init__(self):
        if self.draft_cost < 0 or self.target_cost < 0 or self.per_node_overhead < 0:
            raise ValueError("cost parameters must be non-negative")


def _construction_uniform(seed: int) -> UniformFn:
    def fn(tag: Tuple[int, ...], index: int) -> float:
        return keyed_uniform(seed, "construct", tag, index)

    return fn


def build_tree_fixed(
    draft: LanguageModel,
    prefix: Sequence[int],
    budget: int,
    seed: int,
    *,
    uniform_fn: Optional[UniformFn] = None,
) -> TokenTree:
    """Greedy best-first construction up to ``budget`` nodes.

    Every step pops the maximum-value pending sampling, draws a token from
    its residual, and pushes the sibling continuation (value scaled by the
    rejection probability) and the child position (value scaled by the
    sampled token's residual probability).  Exhausted residuals are dropped,
    so the tree can only fall short of the budget when every position ran
    out of support.  Ties in value break by push order, sibling entry first,
    matching the listing order of the greedy algorithm.
    """
    if budget < 1:
        raise ValueError("budget must be >= 1")
    uniform = uniform_fn or _construction_uniform(seed)
    prefix = list(prefix)

    tree = TokenTree(prefix_len=len(prefix))
    tree.open_position(ROOT, draft.dist(prefix))

    counter = 0
    heap: List[Tuple[float, int, HeapEntry]] = []

    def push(entry: HeapEntry) -> None:
        nonlocal counter
        heapq.heappush(heap, (-entry.value, counter, entry))
        counter += 1

    push(HeapEntry(1.0, tree.positions[ROOT].residual, ROOT, ()))

    while len(tree) < budget and heap:
        _, _, entry = heapq.heappop(heap)
        state = tree.positions[entry.position_owner]
        k = len(state.sampled)
        token = sample(state.residual, uniform(state.path, k))
        rate = state.residual[token]
        node_id = tree.add_node(entry.position_owner, token, entry.value)

        sibling_residual = tree.positions[entry.position_owner].residual
        if not sibling_residual.is_zero:
            push(
                HeapEntry(
                    entry.value * (1.0 - rate),
                    sibling_residual,
                    entry.position_owner,
                    entry.position_tag,
                )
            )
        child_dist = draft.dist(prefix + tree.token_path(node_id))
        child_state = tree.open_position(node_id, child_dist)
        push(HeapEntry(entry.value * rate, child_dist, node_id, child_state.path))

    return tree


def build_tree_threshold(
    draft: LanguageModel,
    prefix: Sequence[int],
    threshold: float,
    size_cap: int,
    seed: int,
    *,
    uniform_fn: Optional[UniformFn] = None,
) -> TokenTree:
    """Layer-by-layer construction keeping samplings with value >= threshold.

    Positions queue for the next layer only when the child entry clears the
    threshold, so the draft model is invoked once per kept node rather than
    once per heap operation.  Construction stops as soon as ``size_cap``
    nodes exist; within a layer, positions are processed in descending entry
    value so the cap discards the least valuable pending work first.
    """
    if not (0.0 < threshold <= 1.0):
        raise ValueError("threshold must be in (0, 1]")
    if size_cap < 1:
        raise ValueError("size_cap must be >= 1")
    uniform = uniform_fn or _construction_uniform(seed)
    prefix = list(prefix)

    tree = TokenTree(prefix_len=len(prefix))
    tree.open_position(ROOT, draft.dist(prefix))

    layer: List[Tuple[float, int]] = [(1.0, ROOT)]
    while layer and len(tree) < size_cap:
        layer.sort(key=lambda item: (-item[0], item[1]))
        next_layer: List[Tuple[float, int]] = []
        for value, owner in layer:
            state = tree.positions[owner]
            while value >= threshold and not state.residual.is_zero:
                if len(tree) >= size_cap:
                    return tree
                k = len(state.sampled)
                token = sample(state.residual, uniform(state.path, k))
                rate = state.residual[token]
                node_id = tree.add_node(owner, token, value)
                child_value = value * rate
                if child_value >= threshold:
                    child_dist = draft.dist(prefix + tree.token_path(node_id))
                    tree.open_position(node_id, child_dist)
                    next_layer.append((child_value, node_id))
                value *= 1.0 - rate
        layer = next_layer
    return tree


def node_sampling_keys(tree: TokenTree) -> set:
    """Set of (position path, sibling index, token) triples, for comparisons."""
    keys = set()
    for node in tree.nodes:
        state = tree.positions[node.parent]
        keys.add((state.path, node.sibling_index, node.token))
    return keys


def expected_accepted(tree: TokenTree, sd: Mapping[int, float]) -> float:
    """Expected number of accepted tokens given per-node acceptance probs.

    ``sd[node]`` is the probability the node's token passes verification
    given its branch is tested.  A branch is tested only after all ancestors
    were accepted and every earlier sibling along the way was rejected, so
    the reach probability threads through the tree exactly like the
    verification walk does.
    """
    for node in tree.nodes:
        p = sd[node.node_id]
        if not (0.0 <= p <= 1.0):
            raise ValueError(f"acceptance probability {p} outside [0, 1]")

    total = 0.0
    stack: List[Tuple[int, float]] = [(ROOT, 1.0)]
    while stack:
        owner, reach = stack.pop()
        state = tree.positions.get(owner)
        if state is None:
            continue
        for node_id in state.node_ids:
            p = sd[node_id]
            total += reach * p
            stack.append((node_id, reach * p))
            reach *= 1.0 - p
    return total


def draft_conditional_probs(tree: TokenTree) -> Dict[int, float]:
    """Residual draft probability each node was sampled at.

    This is the draft-model proxy for per-branch acceptance: the k-th
    sampling at a position is drawn from the draft distribution with the
    earlier k-1 tokens removed and renormalized.
    """
    probs: Dict[int, float] = {}
    for state in tree.positions.values():
        residual = state.draft_full
        for token, node_id in zip(state.sampled, state.node_ids):
            probs[node_id] = residual[token]
            residual = remove_and_renorm(residual, token)
    return probs


def expected_accepted_draft_approx(tree: TokenTree) -> float:
    """Expected accepted tokens with acceptance estimated by draft probs.

    Equals the sum over nodes of the product of full draft probabilities
    along each node's token path: the sibling rejection factors telescope
    against the residual renormalizations.
    """
    return expected_accepted(tree, draft_conditional_probs(tree))


def path_weight_sum(tree: TokenTree) -> float:
    """Sum over nodes of the product of full draft probabilities on the path.

    Independent closed form of :func:`expected_accepted_draft_approx`,
    computed from the stored draft snapshots rather than the construction
    recurrence.
    """
    weights: Dict[int, float] = {}
    total = 0.0
    for node in tree.nodes:
        parent_w = 1.0 if node.parent == ROOT else weights[node.parent]
        w = parent_w * tree.positions[node.parent].draft_full[node.token]
        weights[node.node_id] = w
        total += w
    return total


def closed_form_values(tree: TokenTree) -> Dict[int, float]:
    """Reach probability of each node from draft snapshots alone.

    Product of the full draft probabilities of the proper ancestors times
    one minus the summed full draft probabilities of the earlier siblings.
    Construction maintains the same quantity incrementally through the
    heap recurrence; the two must agree.
    """
    values: Dict[int, float] = {}
    path_products: Dict[int, float] = {}
    for node in tree.nodes:
        state = tree.positions[node.parent]
        parent_prod = 1.0 if node.parent == ROOT else path_products[node.parent]
        prior_mass = sum(state.draft_full[t] for t in state.sampled[: node.sibling_index])
        values[node.node_id] = parent_prod * (1.0 - prior_mass)
        path_products[node.node_id] = parent_prod * state.draft_full[node.token]
    return values


def estimate_latency(
    tree_size: int,
    tree_depth: int,
    accepted_per_step: float,
    costs: CostParams,
    mode: str = "greedy",
) -> float:
    """Modeled latency per generated token.

    Greedy construction calls the draft model once per node; layered
    construction batches draft calls per level, so the draft term scales
    with depth instead of size.  Heap maintenance contributes
    ``per_node_overhead * N * log2(N)`` either way.
    """
    if tree_size < 1:
        raise ValueError("tree_size must be >= 1")
    if not (1 <= tree_depth <= tree_size):
        raise ValueError("tree_depth must be in [1, tree_size]")
    if accepted_per_step <= 0:
        raise ValueError("accepted_per_step must be > 0")
    if mode not in ("greedy", "layered"):
        raise ValueError(f"unknown mode {mode!r}")
    overhead = costs.per_node_overhead * tree_size * math.log2(tree_size) if tree_size > 1 else 0.0
    draft_units = tree_size if mode == "greedy" else tree_depth
    step_cost = overhead + costs.target_cost + draft_units * costs.draft_cost
    return step_cost / accepted_per_step
