"""End-to-end generation loop and benchmark metrics.

One decoding step is: build a token tree from the current context, fetch
the target's distribution for every tree position in one logical batch,
verify, and append the accepted tokens plus the bonus.  The latency model
charges one target evaluation per step regardless of tree size (the premise
of tree speculation) and draft evaluations per node or per level depending
on the construction mode.

Baseline structures (single chain, k parallel chains, fixed-branching
static tree) are built through the same sampling machinery so that equal
budgets are genuinely comparable.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .construct import (
    CostParams,
    build_tree_fixed,
    build_tree_threshold,
    estimate_latency,
)
from .lm import LanguageModel, target_distributions_for_tree
from .rng import derive_seed, keyed_uniform
from .categorical import sample
from .token_tree import ROOT, TokenTree
from .verify import BranchTrace, VerifyResult, verify_tree

STRUCTURES = ("dynamic", "chain", "k_chains", "static_tree")


@dataclass(frozen=True)
class GenConfig:
    """One generation run: budget or threshold, temperatures, structure."""

    prefix_len: int = 128
    gen_len: int = 128
    budget: Optional[int] = None
    threshold: Optional[float] = None
    size_cap: Optional[int] = None
    draft_temp: float = 0.6
    target_temp: float = 0.6
    seed: int = 0
    structure: str = "dynamic"
    k: Optional[int] = None
    branching: Optional[Tuple[int, ...]] = None

    def __post_init__(self):
        if self.gen_len < 1:
            raise ValueError("gen_len must be >= 1")
        if (self.budget is None) == (self.threshold is None):
            raise ValueError("exactly one of budget/threshold must be set")
        if self.budget is not None and self.budget < 1:
            raise ValueError("budget must be >= 1")
        if self.threshold is not None:
            if not (0.0 < self.threshold <= 1.0):
                raise ValueError("threshold must be in (0, 1]")
            if self.size_cap is None or self.size_cap < 1:
                raise ValueError("threshold mode requires size_cap >= 1")
        if self.structure not in STRUCTURES:
            raise ValueError(f"unknown structure {self.structure!r}")
        if self.structure != "dynamic" and self.budget is None:
            raise ValueError("baseline structures require a budget")
        if self.structure == "k_chains" and (self.k is None or self.k < 1):
            raise ValueError("k_chains requires k >= 1")
        if self.structure == "static_tree" and not self.branching:
            raise ValueError("static_tree requires a branching vector")

    @property
    def latency_mode(self) -> str:
        """Draft-call accounting: one per node (greedy) or one per level."""
        if self.structure == "dynamic":
            return "greedy" if self.budget is not None else "layered"
        return "greedy" if self.structure == "chain" else "layered"


@dataclass
class StepMetrics:
    step: int
    tree_size: int
    tree_depth: int
    accepted: int
    modeled_latency: float

    def to_dict(self) -> dict:
        return {
            "step": self.step,
            "tree_size": self.tree_size,
            "tree_depth": self.tree_depth,
            "accepted": self.accepted,
            "modeled_latency": self.modeled_latency,
        }


@dataclass
class RunMetrics:
    steps: List[StepMetrics]
    mean_accepted: float
    mean_tree_size: float
    tokens_per_modeled_second: float
    branch_events: List[BranchTrace] = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {
            "accepted_includes_bonus": True,
            "num_steps": len(self.steps),
            "mean_accepted": self.mean_accepted,
            "mean_tree_size": self.mean_tree_size,
            "tokens_per_modeled_second": self.tokens_per_modeled_second,
            "steps": [s.to_dict() for s in self.steps],
        }

    @classmethod
    def from_steps(cls, steps: List[StepMetrics], events: List[BranchTrace]) -> "RunMetrics":
        total_accepted = sum(s.accepted for s in steps)
        total_cost = sum(s.modeled_latency * s.accepted for s in steps)
        return cls(
            steps=steps,
            mean_accepted=total_accepted / len(steps),
            mean_tree_size=sum(s.tree_size for s in steps) / len(steps),
            tokens_per_modeled_second=total_accepted / total_cost if total_cost > 0 else 0.0,
            branch_events=events,
        )


@dataclass
class StepOutcome:
    tree: TokenTree
    result: VerifyResult


def build_baseline_tree(
    structure: str,
    draft: LanguageModel,
    prefix: Sequence[int],
    budget: int,
    seed: int,
    *,
    k: Optional[int] = None,
    branching: Optional[Sequence[int]] = None,
) -> TokenTree:
    """Fixed-shape trees for comparison at equal budget.

    ``chain`` samples one token per level; ``k_chains`` takes k successive
    samplings at the prompt position and extends each into an independent
    chain; ``static_tree`` samples a fixed number of children per level
    without replacement.  All use the same keyed sampling as the dynamic
    builder, and positions stop early if their support runs out.
    """
    prefix = list(prefix)
    tree = TokenTree(prefix_len=len(prefix))
    tree.open_position(ROOT, draft.dist(prefix))

    def sample_next(owner: int, entry_value: float) -> Optional[Tuple[int, float]]:
        """One more sampling at a position; returns (node id, next sibling value)."""
        state = tree.positions[owner]
        if state.residual.is_zero:
            return None
        u = keyed_uniform(seed, "construct", state.path, len(state.sampled))
        token = sample(state.residual, u)
        rate = state.residual[token]
        node_id = tree.add_node(owner, token, entry_value)
        tree.open_position(node_id, draft.dist(prefix + tree.token_path(node_id)))
        return node_id, entry_value * (1.0 - rate)

    def extend_chain(head: int, steps: int) -> None:
        owner = head
        for _ in range(steps):
            got = sample_next(owner, tree.nodes[owner].accept_weight)
            if got is None:
                break
            owner = got[0]

    if structure == "chain":
        got = sample_next(ROOT, 1.0)
        if got is not None:
            extend_chain(got[0], budget - 1)
    elif structure == "k_chains":
        if not k or k < 1:
            raise ValueError("k_chains requires k >= 1")
        length = budget // k
        if length < 1:
            raise ValueError("budget too small for the requested chain count")
        entry = 1.0
        heads = []
        for _ in range(k):
            got = sample_next(ROOT, entry)
            if got is None:
                break
            heads.append(got[0])
            entry = got[1]
        for head in heads:
            extend_chain(head, length - 1)
    elif structure == "static_tree":
        if not branching:
            raise ValueError("static_tree requires a branching vector")
        total, level_size = 0, 1
        for b in branching:
            level_size *= b
            total += level_size
        if total > budget:
            raise ValueError(
                f"branching vector yields {total} nodes, exceeding budget {budget}"
            )
        frontier: List[Tuple[int, float]] = [(ROOT, 1.0)]
        for b in branching:
            nxt: List[Tuple[int, float]] = []
            for owner, entry in frontier:
                for _ in range(b):
                    got = sample_next(owner, entry)
                    if got is None:
                        break
                    node_id, entry = got
                    nxt.append((node_id, tree.nodes[node_id].accept_weight))
            frontier = nxt
    else:
        raise ValueError(f"unknown baseline structure {structure!r}")
    return tree


def build_tree_for_config(
    draft: LanguageModel, context: Sequence[int], config: GenConfig, seed: int
) -> TokenTree:
    if config.structure == "dynamic":
        if config.budget is not None:
            return build_tree_fixed(draft, context, config.budget, seed)
        return build_tree_threshold(
            draft, context, config.threshold, config.size_cap, seed
        )
    return build_baseline_tree(
        config.structure,
        draft,
        context,
        config.budget,
        seed,
        k=config.k,
        branching=config.branching,
    )


def generate_step(
    target: LanguageModel,
    draft: LanguageModel,
    context: Sequence[int],
    config: GenConfig,
    seed: int,
) -> StepOutcome:
    """One construct-verify round: the unit the generation loop repeats."""
    construct_seed = derive_seed(seed, "construct-step")
    verify_seed = derive_seed(seed, "verify-step")
    tree = build_tree_for_config(draft, context, config, construct_seed)
    dists = target_distributions_for_tree(target, context, tree)
    result = verify_tree(tree, dists, verify_seed)
    return StepOutcome(tree=tree, result=result)


def generate(
    target: LanguageModel,
    draft: LanguageModel,
    prompt: Sequence[int],
    config: GenConfig,
    costs: Optional[CostParams] = None,
) -> Tuple[List[int], RunMetrics]:
    """Generate ``config.gen_len`` tokens; returns them plus run metrics.

    Fully deterministic given the models and config seed.  The prompt must
    match the configured prefix length.
    """
    if len(prompt) != config.prefix_len:
        raise ValueError(
            f"prompt length {len(prompt)} does not match prefix_len {config.prefix_len}"
        )
    costs = costs or CostParams()
    target = target.with_temperature(config.target_temp)
    draft = draft.with_temperature(config.draft_temp)

    tokens = list(prompt)
    produced = 0
    steps: List[StepMetrics] = []
    events: List[BranchTrace] = []
    step_idx = 0
    while produced < config.gen_len:
        step_seed = derive_seed(config.seed, "step", step_idx)
        outcome = generate_step(target, draft, tokens, config, step_seed)
        accepted = outcome.result.num_accepted
        depth = outcome.tree.depth()
        assert 1 <= accepted <= depth + 1
        tokens.extend(outcome.result.accepted)
        produced += accepted
        steps.append(
            StepMetrics(
                step=step_idx,
                tree_size=outcome.tree.size,
                tree_depth=depth,
                accepted=accepted,
                modeled_latency=estimate_latency(
                    max(outcome.tree.size, 1),
                    max(depth, 1),
                    accepted,
                    costs,
                    config.latency_mode,
                ),
            )
        )
        events.extend(outcome.result.trace)
        step_idx += 1

    generated = tokens[config.prefix_len : config.prefix_len + config.gen_len]
    return generated, RunMetrics.from_steps(steps, events)


def make_prompt(target: LanguageModel, length: int, seed: int) -> List[int]:
    """Sample a prompt autoregressively from the target model."""
    tokens: List[int] = []
    for i in range(length):
        u = keyed_uniform(seed, "prompt", (), i)
        tokens.append(sample(target.dist(tokens), u))
    return tokens


def acceptance_vs_draft_bins(
    events: Sequence[BranchTrace], bin_count: int
) -> List[Tuple[float, float, float, int]]:
    """Bucket branch decisions by draft probability at sampling time.

    Returns ``(bin_lo, bin_hi, acceptance_rate, count)`` rows over
    equal-width bins of [0, 1]; empty bins report a rate of NaN.
    """
    if bin_count < 1:
        raise ValueError("bin_count must be >= 1")
    if not events:
        raise ValueError("no branch events to bin")
    edges = np.linspace(0.0, 1.0, bin_count + 1)
    accepted = np.zeros(bin_count, dtype=np.int64)
    totals = np.zeros(bin_count, dtype=np.int64)
    for ev in events:
        idx = min(int(ev.draft_prob * bin_count), bin_count - 1)
        totals[idx] += 1
        if ev.accepted:
            accepted[idx] += 1
    rows = []
    for i in range(bin_count):
        rate = accepted[i] / totals[i] if totals[i] else float("nan")
        rows.append((float(edges[i]), float(edges[i + 1]), rate, int(totals[i])))
    return rows


def bin_rank_correlation(rows: Sequence[Tuple[float, float, float, int]]) -> float:
    """Spearman correlation between bin index and acceptance rate."""
    from scipy import stats

    populated = [(i, r[2]) for i, r in enumerate(rows) if r[3] > 0]
    if len(populated) < 2:
        return float("nan")
    idx, rates = zip(*populated)
    if len(set(rates)) == 1:
        return float("nan")
    rho, _ = stats.spearmanr(idx, rates)
    return float(rho)
