"""Scalar training signals: reward, group-relative advantages, GRPO objective
value, and the per-segment decomposition of the SFT negative log-likelihood.

Nothing here computes gradients; these are the values a trainer consumes or
logs, computed deterministically so they can be checked offline.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

DEFAULT_EPSILON = 0.2
DEFAULT_BETA = 0.04

SEGMENTS = ("format", "rationale", "answer")
_SEGMENT_ALIASES = {"f": "format", "r": "rationale", "y": "answer"}


class GroupTooSmall(ValueError):
    pass


class NonPositiveRatio(ValueError):
    pass


class NanInput(ValueError):
    pass


class LengthMismatch(ValueError):
    pass


@dataclass(frozen=True)
class RewardInput:
    format_correct: bool
    answer_correct: bool


def reward(inp: RewardInput) -> int:
    """2 when format and answer are both correct, 1 when exactly one is, else 0.

    The rationale segment never contributes.
    """
    return int(bool(inp.format_correct)) + int(bool(inp.answer_correct))


def group_advantages(rewards: Sequence[float]) -> np.ndarray:
    """Standardize rewards within a group: ``(r - mean) / std``.

    ``std`` is the population standard deviation. A zero-variance group gets
    all-zero advantages instead of a division error.
    """
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 1 or r.size < 2:
        raise GroupTooSmall(f"need a group of at least 2 rewards, got {r.size}")
    if not np.all(np.isfinite(r)):
        raise NanInput("rewards must be finite")
    # tested on the raw values: the float mean of identical rewards can be off by an ulp
    if np.all(r == r[0]):
        return np.zeros_like(r)
    d = r - r.mean()
    # rescale first so squaring cannot underflow or overflow; std is scale-equivariant
    d = d / np.max(np.abs(d))
    return d / d.std()


@dataclass(frozen=True)
class GroupBatch:
    rewards: tuple[float, ...]
    ratios: tuple[float, ...]
    kl_terms: tuple[float, ...]
    epsilon: float = DEFAULT_EPSILON
    beta: float = DEFAULT_BETA

    def __post_init__(self) -> None:
        for name in ("rewards", "ratios", "kl_terms"):
            object.__setattr__(self, name, tuple(float(x) for x in getattr(self, name)))
        g = len(self.rewards)
        if g < 2:
            raise GroupTooSmall(f"need a group of at least 2, got {g}")
        if len(self.ratios) != g or len(self.kl_terms) != g:
            raise LengthMismatch("rewards, ratios and kl_terms must have equal length")
        values = self.rewards + self.ratios + self.kl_terms + (self.epsilon, self.beta)
        if any(math.isnan(v) for v in values):
            raise NanInput("NaN in GRPO batch")
        if any(x <= 0 for x in self.ratios):
            raise NonPositiveRatio("importance ratios must be > 0")
        if any(k < 0 for k in self.kl_terms):
            raise ValueError("KL terms must be >= 0")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")


@dataclass(frozen=True)
class GrpoTerms:
    advantages: np.ndarray
    surrogate: np.ndarray  # min(ratio*A, clip(ratio)*A)
    clipped: np.ndarray  # True where the clipped branch is the min
    loss: float


def grpo_terms(batch: GroupBatch) -> GrpoTerms:
    adv = group_advantages(batch.rewards)
    ratio = np.asarray(batch.ratios)
    kl = np.asarray(batch.kl_terms)
    unclipped = ratio * adv
    clipped_ratio = np.clip(ratio, 1.0 - batch.epsilon, 1.0 + batch.epsilon)
    clipped = clipped_ratio * adv
    surrogate = np.minimum(unclipped, clipped)
    per_sample = surrogate - batch.beta * kl
    return GrpoTerms(
        advantages=adv,
        surrogate=surrogate,
        clipped=clipped < unclipped,
        loss=float(per_sample.mean()),
    )


def grpo_loss(batch: GroupBatch) -> float:
    """Group mean of ``min(ratio*A, clip(ratio, 1-eps, 1+eps)*A) - beta*kl``.

    Advantages are recomputed from ``batch.rewards``. The value is the
    objective exactly as written (larger is better for the policy); a trainer
    that minimizes should negate it.
    """
    return grpo_terms(batch).loss


def k3_kl(logp: Sequence[float], ref_logp: Sequence[float]) -> np.ndarray:
    """Per-token k3 estimate of KL(policy || ref): ``exp(d) - d - 1``, ``d = ref - logp``.

    Always >= 0.
    """
    d = np.asarray(ref_logp, dtype=np.float64) - np.asarray(logp, dtype=np.float64)
    return np.expm1(d) - d


@dataclass(frozen=True)
class SegmentedTokens:
    neg_log_probs: tuple[float, ...]
    segment_labels: tuple[str, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "neg_log_probs", tuple(float(x) for x in self.neg_log_probs))
        labels = tuple(_SEGMENT_ALIASES.get(x, x) for x in self.segment_labels)
        object.__setattr__(self, "segment_labels", labels)
        if len(self.neg_log_probs) != len(self.segment_labels):
            raise LengthMismatch("neg_log_probs and segment_labels differ in length")
        bad = set(self.segment_labels) - set(SEGMENTS)
        if bad:
            raise ValueError(f"unknown segment label(s) {sorted(bad)}")
        if any(not x >= 0 for x in self.neg_log_probs):
            raise ValueError("negative log-probabilities must be >= 0")


@dataclass(frozen=True)
class SegmentLossReport:
    format_loss: float
    rationale_loss: float
    answer_loss: float
    total: float
    token_counts: dict = field(default_factory=dict)
    # counts divided by the answer-segment count; None without answer tokens
    token_ratio: tuple[float, float, float] | None = None

    def to_dict(self) -> dict:
        return {
            "format_loss": self.format_loss,
            "rationale_loss": self.rationale_loss,
            "answer_loss": self.answer_loss,
            "total": self.total,
            "token_counts": dict(self.token_counts),
            "token_ratio": list(self.token_ratio) if self.token_ratio else None,
        }


def segment_loss_report(tokens: SegmentedTokens) -> SegmentLossReport:
    """Split the summed token NLL into format / rationale / answer parts.

    Summation order: each segment is summed with ``math.fsum`` (correctly
    rounded, order independent), then ``total = (format + rationale) + answer``.
    So the three parts add up to ``total`` with no tolerance, and ``total``
    agrees with any other summation of all tokens to rounding error.
    """
    parts = {s: [] for s in SEGMENTS}
    for nll, label in zip(tokens.neg_log_probs, tokens.segment_labels):
        parts[label].append(nll)
    lf, lr, ly = (math.fsum(parts[s]) for s in SEGMENTS)
    counts = {s: len(parts[s]) for s in SEGMENTS}
    ratio = None
    if counts["answer"]:
        a = counts["answer"]
        ratio = (counts["format"] / a, counts["rationale"] / a, 1.0)
    return SegmentLossReport(
        format_loss=lf,
        rationale_loss=lr,
        answer_loss=ly,
        total=lf + lr + ly,
        token_counts=counts,
        token_ratio=ratio,
    )


def label_tokens(
    offsets: Sequence[tuple[int, int]], spans: Sequence[tuple[int, int, str]]
) -> list[str]:
    """Assign each token (char offsets) the segment covering most of its characters.

    ``spans`` comes from :func:`dicekit.formats.segment_spans`; ``offsets`` from
    a tokenizer's offset mapping. Ties go to the earlier span.
    """
    labels = []
    for a, b in offsets:
        best, best_len = "format", -1
        for s, e, label in spans:
            overlap = min(b, e) - max(a, s)
            if overlap > best_len:
                best, best_len = label, overlap
        labels.append(best)
    return labels
