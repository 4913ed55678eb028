"""Synthetic draft/target language-model pairs.

Real checkpoint pairs are replaced by order-n Markov table models whose
rows are drawn from a symmetric Dirichlet construction, plus a noisy wrapper
that perturbs the target's logits to produce a draft model at a controllable
divergence.  The draft/target gap (and hence acceptance behaviour) is tuned
entirely through ``noise_sigma``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Mapping, Sequence, Tuple

import numpy as np

from .categorical import Categorical, softmax_with_temperature
from .rng import derive_seed

TokenSeq = Sequence[int]


class LanguageModel:
    """Conditional next-token distribution, deterministic given its seed.

    Subclasses implement :meth:`next_logits` as a pure function of the
    context.  ``temperature`` is applied at query time by :meth:`dist`.
    Instances are immutable after construction and safe to query from
    multiple threads.
    """

    vocab_size: int
    temperature: float

    def next_logits(self, context: TokenSeq) -> np.ndarray:
        raise NotImplementedError

    def context_key(self, context: TokenSeq) -> Tuple[int, ...]:
        """Reduce a context to the key the model actually conditions on."""
        return tuple(context)

    def dist(self, context: TokenSeq) -> Categorical:
        key = self.context_key(context)
        cache = self._dist_cache()
        hit = cache.get(key)
        if hit is None:
            hit = softmax_with_temperature(self.next_logits(context), self.temperature)
            cache[key] = hit
        return hit

    def with_temperature(self, temp: float) -> "LanguageModel":
        raise NotImplementedError

    def _dist_cache(self) -> Dict[Tuple[int, ...], Categorical]:
        cache = getattr(self, "_dists", None)
        if cache is None:
            cache = {}
            object.__setattr__(self, "_dists", cache)
        return cache


@dataclass(frozen=True)
class ModelPairSpec:
    """Parameters of one synthetic draft/target pair."""

    vocab_size: int = 64
    markov_order: int = 2
    target_seed: int = 0
    noise_sigma: float = 0.5
    concentration: float = 0.02
    entropy_spread: float = 2.5
    draft_temp: float = 0.6
    target_temp: float = 0.6

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")
        if self.markov_order < 1:
            raise ValueError("markov_order must be >= 1")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.concentration <= 0:
            raise ValueError("concentration must be > 0")
        if self.entropy_spread < 0:
            raise ValueError("entropy_spread must be >= 0")

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "markov_order": self.markov_order,
            "target_seed": self.target_seed,
            "noise_sigma": self.noise_sigma,
            "concentration": self.concentration,
            "entropy_spread": self.entropy_spread,
            "draft_temp": self.draft_temp,
            "target_temp": self.target_temp,
        }


@dataclass(frozen=True)
class MarkovModel(LanguageModel):
    """Order-n table model with Dirichlet-drawn logit rows.

    A row is keyed by the last ``order`` context tokens (short contexts are
    left-padded with token 0) and generated lazily: logits are the log of a
    symmetric-Dirichlet sample, so temperature-1 softmax recovers the
    Dirichlet row exactly.  The per-row concentration is the configured
    value jittered on a log scale, so one model mixes near-deterministic
    contexts with flat ones the way natural text does; ``entropy_spread = 0``
    disables the jitter.  Rows are cached; the cache is an implementation
    detail and does not affect determinism.
    """

    vocab_size: int
    order: int
    seed: int
    concentration: float = 0.5
    temperature: float = 1.0
    entropy_spread: float = 3.0
    _rows: Dict[Tuple[int, ...], np.ndarray] = field(
        default_factory=dict, repr=False, compare=False
    )

    def context_key(self, context: TokenSeq) -> Tuple[int, ...]:
        ctx = tuple(context[-self.order:]) if len(context) >= self.order else tuple(context)
        if len(ctx) < self.order:
            ctx = (0,) * (self.order - len(ctx)) + ctx
        return ctx

    def next_logits(self, context: TokenSeq) -> np.ndarray:
        key = self.context_key(context)
        row = self._rows.get(key)
        if row is None:
            rng = np.random.default_rng(derive_seed(self.seed, "markov-row", *key))
            alpha = self.concentration * math.exp(
                rng.uniform(-self.entropy_spread, self.entropy_spread)
            )
            gammas = rng.standard_gamma(alpha, size=self.vocab_size)
            # log of the unnormalized Dirichlet sample; softmax normalizes.
            row = np.log(np.maximum(gammas, 1e-300))
            self._rows[key] = row
        return row

    def with_temperature(self, temp: float) -> "MarkovModel":
        return MarkovModel(
            vocab_size=self.vocab_size,
            order=self.order,
            seed=self.seed,
            concentration=self.concentration,
            temperature=temp,
            entropy_spread=self.entropy_spread,
            _rows=self._rows,
        )


# How strongly the draft's entropy rises with the noise scale.  Calibrated
# so that sigma 0.5 puts the draft/target overlap near what small/large
# model pairs realize in practice (~0.7-0.85 per context).
_FLATTEN_PER_SIGMA = 1.5


@dataclass(frozen=True)
class NoisyDraftModel(LanguageModel):
    """Weaker stand-in for a target model, divergence set by one knob.

    Two effects combine, both proportional to ``sigma`` so that ``sigma ==
    0`` reproduces the target exactly: the target's logits are flattened
    (a weaker model is less confident everywhere, so its tail is fatter
    and its top thinner), and per-(context, token) Gaussian noise scatters
    individual predictions, with confident tokens perturbed least.  This
    is what makes draft probability predictive of acceptance: the target
    systematically concentrates relative to the draft on the draft's own
    high-probability tokens, while zero-mean noise alone would leave
    acceptance independent of draft confidence.  Noise is keyed on the
    base model's context key, so an order-n target yields an order-n
    draft.
    """

    base: LanguageModel
    sigma: float
    seed: int
    temperature: float = 1.0
    _noise: Dict[Tuple[int, ...], np.ndarray] = field(
        default_factory=dict, repr=False, compare=False
    )

    @property
    def vocab_size(self) -> int:  # type: ignore[override]
        return self.base.vocab_size

    def context_key(self, context: TokenSeq) -> Tuple[int, ...]:
        return self.base.context_key(context)

    def next_logits(self, context: TokenSeq) -> np.ndarray:
        base_logits = self.base.next_logits(context)
        if self.sigma == 0.0:
            return base_logits
        key = self.context_key(context)
        perturbed = self._noise.get(key)
        if perturbed is None:
            rng = np.random.default_rng(derive_seed(self.seed, "draft-noise", *key))
            shifted = base_logits - base_logits.max()
            base_probs = np.exp(shifted)
            base_probs /= base_probs.sum()
            scale = self.sigma * (1.0 - base_probs)
            noise = rng.standard_normal(self.base.vocab_size) * scale
            flatten = 1.0 + _FLATTEN_PER_SIGMA * self.sigma
            perturbed = shifted / flatten + noise
            self._noise[key] = perturbed
        return perturbed

    def with_temperature(self, temp: float) -> "NoisyDraftModel":
        return NoisyDraftModel(
            base=self.base,
            sigma=self.sigma,
            seed=self.seed,
            temperature=temp,
            _noise=self._noise,
        )


def make_markov_lm(spec: ModelPairSpec) -> MarkovModel:
    """Build the target-side Markov model described by a pair spec."""
    return MarkovModel(
        vocab_size=spec.vocab_size,
        order=spec.markov_order,
        seed=spec.target_seed,
        concentration=spec.concentration,
        temperature=spec.target_temp,
        entropy_spread=spec.entropy_spread,
    )


def derive_draft(target: LanguageModel, noise_sigma: float, seed: int) -> NoisyDraftModel:
    """Perturb a target model into a draft at divergence set by noise_sigma."""
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be >= 0")
    return NoisyDraftModel(
        base=target, sigma=noise_sigma, seed=seed, temperature=target.temperature
    )


def make_model_pair(spec: ModelPairSpec) -> Tuple[MarkovModel, NoisyDraftModel]:
    """Target and draft models at the spec's respective temperatures."""
    target = make_markov_lm(spec)
    draft = derive_draft(target, spec.noise_sigma, derive_seed(spec.target_seed, "draft"))
    return target, draft.with_temperature(spec.draft_temp)


def kl_divergence(d: Categorical, t: Categorical) -> float:
    """KL(d || t) with 0*log(0) = 0; +inf when d has mass outside t's support."""
    if d.size != t.size:
        raise ValueError("distributions must share a vocabulary")
    mask = d.probs > 0.0
    if np.any(t.probs[mask] == 0.0):
        return math.inf
    p = d.probs[mask]
    q = t.probs[mask]
    return float(np.sum(p * np.log(p / q)))


def target_distributions_for_tree(
    target: LanguageModel, prefix: TokenSeq, tree
) -> Mapping[int, Categorical]:
    """Target next-token distribution for the root position and every node.

    Emulates one batched target pass over the token tree: the result has
    exactly ``len(tree.nodes) + 1`` entries, keyed by the position owner
    (ROOT for the prompt position, node id for each node's child position),
    each equal to a direct query on the linearized context.
    """
    from .token_tree import ROOT

    prefix = list(prefix)
    dists = {ROOT: target.dist(prefix)}
    for node in tree.nodes:
        dists[node.node_id] = target.dist(prefix + tree.token_path(node.node_id))
    return dists
