"""Label sampling strategies for frames annotated by several raters.

Strategies: ``vote`` (pixel majority), ``random`` (one rater, uniformly),
``mean`` (soft average) and ``combine:<f>`` (a fraction ``f`` of frames get
the vote label, the rest a random rater). Majority needs at least
``ceil((R + 1) / 2)`` votes out of R raters, which for 3 raters is 2.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

KINDS = ("vote", "random", "mean", "combination")


@dataclass(frozen=True)
class LabelStrategy:
    kind: str = "vote"
    vote_fraction: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown label strategy kind {self.kind!r}; expected one of {KINDS}")
        if not 0.0 <= self.vote_fraction <= 1.0:
            raise ValueError(f"vote_fraction must be in [0, 1], got {self.vote_fraction}")

    @classmethod
    def parse(cls, text: str) -> "LabelStrategy":
        """Parse ``vote | random | mean | combine:<fraction>``."""
        text = text.strip()
        if text in ("vote", "random", "mean"):
            return cls(text)
        if text.startswith("combine:"):
            try:
                frac = float(text.split(":", 1)[1])
            except ValueError:
                raise ValueError(f"bad combine fraction in {text!r}") from None
            return cls("combination", frac)
        raise ValueError(f"unknown label strategy {text!r}; expected vote, random, mean or combine:<fraction>")

    def __str__(self):
        if self.kind == "combination":
            return f"combine:{self.vote_fraction:g}"
        return self.kind


@dataclass
class SampledLabel:
    values: np.ndarray
    hard: bool
    source: str = ""  # "vote", "mean", or "rater<k>"


def _stack(masks) -> np.ndarray:
    masks = [np.asarray(m) for m in masks]
    if len(masks) < 1:
        raise ValueError("need at least one rater mask")
    shape = masks[0].shape
    for m in masks[1:]:
        if m.shape != shape:
            raise ValueError(f"rater mask shapes differ: {shape} vs {m.shape}")
    return np.stack(masks).astype(np.uint8)


def majority_votes_needed(n_raters: int) -> int:
    return math.ceil((n_raters + 1) / 2)


def sample_vote(masks) -> SampledLabel:
    stack = _stack(masks)
    votes = stack.sum(axis=0)
    values = (votes >= majority_votes_needed(len(stack))).astype(np.uint8)
    return SampledLabel(values, hard=True, source="vote")


def sample_random(masks, rng: np.random.Generator) -> SampledLabel:
    stack = _stack(masks)
    k = int(rng.integers(len(stack)))
    return SampledLabel(stack[k].copy(), hard=True, source=f"rater{k + 1}")


def sample_mean(masks) -> SampledLabel:
    stack = _stack(masks)
    return SampledLabel(stack.mean(axis=0, dtype=np.float64).astype(np.float32), hard=False, source="mean")


def frame_consensus_positive(masks, min_consensus_pixels: int = 1) -> bool:
    """Frame-level target: does the majority-vote mask have enough pixels?"""
    return int(sample_vote(masks).values.sum()) >= min_consensus_pixels


def combination_assignment(n: int, vote_fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Boolean array, True for the ``floor(vote_fraction * n)`` frames that get the vote label."""
    n_vote = int(math.floor(vote_fraction * n + 1e-9))
    assign = np.zeros(n, dtype=bool)
    assign[rng.permutation(n)[:n_vote]] = True
    return assign


def sample_combination(frames, vote_fraction: float, rng: np.random.Generator):
    """Label a collection of rater-mask triples with the vote/random mix.

    Returns ``(assignment, labels)`` where ``assignment[i]`` is True when
    frame i got the vote label.
    """
    frames = list(frames)
    if not frames:
        raise ValueError("sample_combination needs a non-empty frame collection")
    if not 0.0 <= vote_fraction <= 1.0:
        raise ValueError(f"vote_fraction must be in [0, 1], got {vote_fraction}")
    assign = combination_assignment(len(frames), vote_fraction, rng)
    labels = [sample_vote(m) if a else sample_random(m, rng) for m, a in zip(frames, assign)]
    return assign, labels


def sample_labels(strategy: LabelStrategy, frames, rng: np.random.Generator) -> list[SampledLabel]:
    frames = list(frames)
    if strategy.kind == "vote":
        return [sample_vote(m) for m in frames]
    if strategy.kind == "mean":
        return [sample_mean(m) for m in frames]
    if strategy.kind == "random":
        return [sample_random(m, rng) for m in frames]
    return sample_combination(frames, strategy.vote_fraction, rng)[1]


class LabelSampler:
    """Produces one training label per frame for every epoch.

    Random and combination draws are repeated each epoch unless
    ``freeze_sampling`` is set, in which case the first epoch's labels are
    reused.
    """

    def __init__(self, strategy: LabelStrategy, rater_masks, seed: int, freeze_sampling: bool = False):
        self.strategy = strategy
        self.rater_masks = list(rater_masks)
        self.seed = seed
        self.freeze_sampling = freeze_sampling
        self._frozen = None

    def labels_for_epoch(self, epoch: int) -> list[SampledLabel]:
        if self.freeze_sampling:
            if self._frozen is None:
                self._frozen = sample_labels(self.strategy, self.rater_masks, np.random.default_rng([self.seed, 0]))
            return self._frozen
        return sample_labels(self.strategy, self.rater_masks, np.random.default_rng([self.seed, epoch]))
