"""Speculative token tree.

Nodes record the order in which samplings happened: children of one parent
are successive samplings at the same position, and each position keeps the
original draft distribution alongside the residual left after the tokens
already drawn there.  Construction, verification, and mask analysis all
operate on this structure.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Dict, List, Tuple

from .categorical import Categorical, remove_and_renorm

# Sentinel parent/owner id for the prompt position.
ROOT = -1

RESIDUAL_TOL = 1e-9


@dataclass
class TreeNode:
    """One sampled token.

    ``value`` is the estimated probability that this sampling slot is reached
    during verification (the heap priority it was expanded at);
    ``accept_weight`` additionally multiplies in the sampled token's residual
    probability and is the node's contribution to the expected number of
    accepted tokens under the draft-probability proxy.
    """

    node_id: int
    parent: int
    token: int
    sibling_index: int
    depth: int
    value: float
    accept_weight: float


@dataclass
class PositionState:
    """Sampling state at one tree position (owned by a node or ROOT)."""

    owner: int
    draft_full: Categorical
    path: Tuple[int, ...]
    sampled: List[int] = field(default_factory=list)
    node_ids: List[int] = field(default_factory=list)
    residual: Categorical = None  # type: ignore[assignment]

    def __post_init__(self):
        if self.residual is None:
            self.residual = self.draft_full


class TokenTree:
    """Rooted tree of drafted tokens plus per-position sampling state."""

    def __init__(self, prefix_len: int = 0):
        self.prefix_len = prefix_len
        self.nodes: List[TreeNode] = []
        self.positions: Dict[int, PositionState] = {}

    def __len__(self) -> int:
        return len(self.nodes)

    @property
    def size(self) -> int:
        return len(self.nodes)

    def depth(self) -> int:
        return max((n.depth for n in self.nodes), default=0)

    def node(self, node_id: int) -> TreeNode:
        return self.nodes[node_id]

    def open_position(self, owner: int, draft_full: Categorical) -> PositionState:
        """Attach the draft distribution for the position owned by a node."""
        state = self.positions.get(owner)
        if state is not None:
            return state
        if owner == ROOT:
            path: Tuple[int, ...] = ()
        else:
            path = tuple(self.token_path(owner))
        state = PositionState(owner=owner, draft_full=draft_full, path=path)
        self.positions[owner] = state
        return state

    def add_node(self, owner: int, token: int, value: float) -> int:
        """Append the next sampling at a position; returns the new node id.

        The position must have been opened with its draft distribution.  A
        token may be sampled at most once per position, otherwise the
        residual bookkeeping (and verification) would break.
        """
        state = self.positions[owner]
        if token in state.sampled:
            raise ValueError(f"token {token} already sampled at position {owner}")
        if state.residual.is_zero:
            raise ValueError(f"position {owner} is exhausted")
        rate = state.residual[token]
        node_id = len(self.nodes)
        depth = 1 if owner == ROOT else self.nodes[owner].depth + 1
        node = TreeNode(
            node_id=node_id,
            parent=owner,
            token=token,
            sibling_index=len(state.sampled),
            depth=depth,
            value=value,
            accept_weight=value * rate,
        )
        self.nodes.append(node)
        state.sampled.append(token)
        state.node_ids.append(node_id)
        state.residual = remove_and_renorm(state.residual, token)
        return node_id

    def ancestors(self, node_id: int) -> List[int]:
        """Path of node ids from the root level down to the node itself."""
        path = []
        cur = node_id
        while cur != ROOT:
            path.append(cur)
            cur = self.nodes[cur].parent
        path.reverse()
        return path

    def previous_siblings(self, node_id: int) -> List[int]:
        """Earlier samplings at the same position, in sampling order."""
        node = self.nodes[node_id]
        return list(self.positions[node.parent].node_ids[: node.sibling_index])

    def token_path(self, node_id: int) -> List[int]:
        return [self.nodes[i].token for i in self.ancestors(node_id)]

    def children(self, node_id: int) -> List[int]:
        state = self.positions.get(node_id)
        return list(state.node_ids) if state is not None else []

    def parent_array(self) -> List[int]:
        """Parent id per node (ROOT mapped to -1), in creation order."""
        return [n.parent for n in self.nodes]

    def check_residuals(self, tol: float = RESIDUAL_TOL) -> None:
        """Assert each residual equals draft_full folded over the samplings."""
        import numpy as np

        for state in self.positions.values():
            acc = state.draft_full
            for token in state.sampled:
                acc = remove_and_renorm(acc, token)
            if acc.is_zero != state.residual.is_zero:
                raise AssertionError(f"residual flag drifted at position {state.owner}")
            if not acc.is_zero and np.max(np.abs(acc.probs - state.residual.probs)) > tol:
                raise AssertionError(f"residual drifted at position {state.owner}")

    def to_json_obj(self) -> list:
        return [
            {
                "id": n.node_id,
                "parent": n.parent,
                "token": n.token,
                "sibling_index": n.sibling_index,
                "value": n.value,
            }
            for n in self.nodes
        ]

    def dumps(self) -> str:
        return json.dumps(self.to_json_obj(), indent=None, separators=(",", ":"))
