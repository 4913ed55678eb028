"""Tree verification by multi-branch rejection sampling.

Starting at the prompt position, the branches sampled there are tested in
sampling order: branch ``y`` is accepted when a uniform draw falls below
``min(1, R[y]/D[y])``, where ``R`` starts as the target distribution and
``D`` as the position's original draft distribution.  Each rejection folds
the draft mass out of both: ``R <- norm(relu(R - D))`` and ``D`` drops the
rejected token.  An accepted branch descends the walk to its node; if no
branch survives, a corrective token is drawn from the final ``R``.

A bonus token is always emitted: from the residual after total rejection,
or from the raw target distribution at the deepest accepted node.  This
guarantees at least one token per verification pass and is counted in the
accepted-per-step metric (recorded as ``accepted_includes_bonus`` in all
run outputs, since it shifts that metric by one).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Mapping, Optional

from .categorical import Categorical, remove_and_renorm, residual_target, sample
from .rng import UniformStream
from .token_tree import ROOT, TokenTree


@dataclass(frozen=True)
class BranchTrace:
    """One accept/reject decision on a sampled branch."""

    node_id: int
    accepted: bool
    uniform: float
    threshold: float
    draft_prob: float

    def to_json_obj(self) -> dict:
        return {
            "node_id": self.node_id,
            "accepted": self.accepted,
            "uniform": self.uniform,
            "threshold": self.threshold,
            "draft_prob": self.draft_prob,
        }


@dataclass
class VerifyResult:
    """Accepted root-to-node path, bonus token, and per-branch trace."""

    accepted: List[int]
    accepted_node_ids: List[int]
    bonus_token: int
    bonus_from_residual: bool
    trace: List[BranchTrace]

    @property
    def num_accepted(self) -> int:
        """Tokens emitted this pass, bonus included."""
        return len(self.accepted)

    def trace_jsonl(self) -> str:
        import json

        return "\n".join(json.dumps(t.to_json_obj()) for t in self.trace)


def verify_tree(
    tree: TokenTree,
    target_dists: Mapping[int, Categorical],
    seed: int,
    *,
    uniform_fn: Optional[Callable[[], float]] = None,
) -> VerifyResult:
    """Walk the tree accepting or rejecting branches; always emits a bonus.

    ``target_dists`` must cover every position the walk can visit: the
    prompt position, and the position of every node (accepted leaves sample
    their bonus from the target there).  Uniform draws come from a stream
    keyed by ``seed`` in visit order, so results are reproducible.
    """
    if uniform_fn is None:
        stream = UniformStream(seed, "verify")
        uniform_fn = stream.next

    accepted_tokens: List[int] = []
    accepted_ids: List[int] = []
    trace: List[BranchTrace] = []
    owner = ROOT

    while True:
        state = tree.positions.get(owner)
        if state is None or not state.node_ids:
            # No samplings here: bonus from the raw target at this position.
            target = target_dists.get(owner)
            if target is None:
                raise KeyError(f"missing target distribution for position {owner}")
            bonus = sample(target, uniform_fn())
            accepted_tokens.append(bonus)
            return VerifyResult(accepted_tokens, accepted_ids, bonus, False, trace)

        target = target_dists.get(owner)
        if target is None:
            raise KeyError(f"missing target distribution for position {owner}")
        draft = state.draft_full
        residual = target

        descended = False
        for node_id, token in zip(state.node_ids, state.sampled):
            d_prob = draft[token]
            threshold = min(1.0, residual[token] / d_prob) if d_prob > 0 else 1.0
            u = uniform_fn()
            ok = u <= threshold
            trace.append(BranchTrace(node_id, ok, u, threshold, d_prob))
            if ok:
                accepted_tokens.append(token)
                accepted_ids.append(node_id)
                owner = node_id
                descended = True
                break
            residual = residual_target(residual, draft)
            # A rejection is only possible when R[y] < D[y] somewhere, so the
            # relu residual must retain mass; zero here means numerical drift.
            assert not residual.is_zero, "target residual vanished after a rejection"
            draft = remove_and_renorm(draft, token)
            if draft.is_zero:
                break

        if not descended:
            bonus = sample(residual, uniform_fn())
            accepted_tokens.append(bonus)
            return VerifyResult(accepted_tokens, accepted_ids, bonus, True, trace)


def true_branch_acceptance(
    tree: TokenTree, target_dists: Mapping[int, Categorical]
) -> Dict[int, float]:
    """Exact per-branch acceptance probability given the branch is tested.

    Replays the deterministic residual evolution of :func:`verify_tree` at
    every position: the k-th branch is tested only after branches 1..k-1
    were rejected, and by then both distributions have been folded the same
    way regardless of the uniforms drawn.
    """
    probs: Dict[int, float] = {}
    for owner, state in tree.positions.items():
        if not state.node_ids:
            continue
        target = target_dists.get(owner)
        if target is None:
            raise KeyError(f"missing target distribution for position {owner}")
        draft = state.draft_full
        residual = target
        for node_id, token in zip(state.node_ids, state.sampled):
            d_prob = draft[token]
            probs[node_id] = min(1.0, residual[token] / d_prob) if d_prob > 0 else 1.0
            residual = residual_target(residual, draft)
            draft = remove_and_renorm(draft, token)
            if residual.is_zero or draft.is_zero:
                # Remaining branches (none exist in well-formed trees) would
                # never be tested.
                for later in state.node_ids[state.node_ids.index(node_id) + 1 :]:
                    probs[later] = 0.0
                break
    return probs


def replay_trace(
    tree: TokenTree, target_dists: Mapping[int, Categorical], result: VerifyResult
) -> bool:
    """Recompute every trace threshold from scratch; True when all match."""
    expected = true_branch_acceptance(tree, target_dists)
    return all(
        abs(expected[t.node_id] - t.threshold) <= 1e-12
        and t.accepted == (t.uniform <= t.threshold)
        for t in result.trace
    )
