import math
import random

import numpy as np
import pytest
from hypothesis import assume, given, strategies as st

from dicekit.signals import (
    GroupBatch,
    GroupTooSmall,
    LengthMismatch,
    NanInput,
    NonPositiveRatio,
    RewardInput,
    SegmentedTokens,
    grpo_loss,
    grpo_terms,
    group_advantages,
    k3_kl,
    label_tokens,
    reward,
    segment_loss_report,
)

import oracles


@pytest.mark.parametrize(
    "fmt,ans,expected", [(True, True, 2), (True, False, 1), (False, True, 1), (False, False, 0)]
)
def test_reward_table(fmt, ans, expected):
    assert reward(RewardInput(fmt, ans)) == expected


def test_advantages_hand_case():
    assert group_advantages([2, 2, 0, 0]).tolist() == [1.0, 1.0, -1.0, -1.0]
    assert group_advantages([1, 1, 1, 1]).tolist() == [0.0] * 4


def test_advantages_errors():
    with pytest.raises(GroupTooSmall):
        group_advantages([1.0])
    with pytest.raises(NanInput):
        group_advantages([1.0, float("nan")])


rewards_st = st.lists(st.floats(-100, 100, allow_nan=False), min_size=2, max_size=64)


@given(rewards_st)
def test_advantages_match_oracle(rs):
    got = group_advantages(rs)
    want = oracles.advantages(rs)
    assert np.allclose(got, want, rtol=0, atol=1e-9)


@given(st.lists(st.floats(-10, 10, allow_nan=False), min_size=16, max_size=16))
def test_advantages_standardized(rs):
    assume(np.std(rs) > 1e-3)
    a = group_advantages(rs)
    assert abs(a.mean()) <= 1e-12
    assert abs(a.std() - 1) < 1e-9


@given(rewards_st, st.floats(-50, 50), st.floats(0.1, 10))
def test_advantages_shift_and_scale_invariant(rs, c, lam):
    assume(np.std(rs) > 1e-3)
    base = group_advantages(rs)
    assert np.allclose(group_advantages([r + c for r in rs]), base, atol=1e-9)
    assert np.allclose(group_advantages([r * lam for r in rs]), base, atol=1e-9)


def test_grpo_hand_cases():
    assert grpo_loss(GroupBatch([2, 0], [1, 1], [0, 0], epsilon=0.2, beta=0)) == 0
    t = grpo_terms(GroupBatch([2, 0], [2.0, 1.0], [0, 0], epsilon=0.2, beta=0))
    assert t.advantages.tolist() == [1.0, -1.0]
    assert t.surrogate[0] == pytest.approx(1.2, abs=1e-15)
    assert bool(t.clipped[0]) and not bool(t.clipped[1])


def test_flat_rewards_leave_only_kl():
    b = GroupBatch([1, 1, 1], [0.5, 1.3, 2.0], [0.1, 0.2, 0.6], beta=0.04)
    assert grpo_loss(b) == pytest.approx(-0.04 * 0.3, abs=1e-15)


def test_unit_ratios_without_kl_is_zero():
    rng = random.Random(1)
    for _ in range(100):
        g = rng.randint(2, 20)
        b = GroupBatch([rng.uniform(0, 2) for _ in range(g)], [1.0] * g, [0.0] * g, beta=0)
        assert abs(grpo_loss(b)) <= 1e-12


@pytest.mark.parametrize(
    "kwargs,err",
    [
        (dict(rewards=[1], ratios=[1], kl_terms=[0]), GroupTooSmall),
        (dict(rewards=[1, 0], ratios=[1], kl_terms=[0, 0]), LengthMismatch),
        (dict(rewards=[1, 0], ratios=[1, 0], kl_terms=[0, 0]), NonPositiveRatio),
        (dict(rewards=[1, float("nan")], ratios=[1, 1], kl_terms=[0, 0]), NanInput),
    ],
)
def test_batch_validation(kwargs, err):
    with pytest.raises(err):
        GroupBatch(**kwargs)


batches = st.integers(2, 16).flatmap(
    lambda g: st.builds(
        GroupBatch,
        rewards=st.lists(st.sampled_from([0.0, 1.0, 2.0]), min_size=g, max_size=g),
        ratios=st.lists(st.floats(0.3, 3.0), min_size=g, max_size=g),
        kl_terms=st.lists(st.floats(0, 1), min_size=g, max_size=g),
        epsilon=st.floats(0.05, 0.4),
        beta=st.floats(0, 0.1),
    )
)


@given(batches)
def test_grpo_matches_oracle(b):
    terms, loss = oracles.grpo_terms(b.rewards, b.ratios, b.kl_terms, b.epsilon, b.beta)
    got = grpo_terms(b)
    per = got.surrogate - b.beta * np.asarray(b.kl_terms)
    assert np.allclose(per, terms, rtol=1e-9, atol=1e-12)
    assert math.isclose(got.loss, loss, rel_tol=1e-9, abs_tol=1e-12)


@given(batches)
def test_clipped_surrogate_never_exceeds_unclipped_for_nonnegative_advantages(b):
    t = grpo_terms(b)
    unclipped = np.asarray(b.ratios) * t.advantages
    mask = t.advantages >= 0
    assert np.all(t.surrogate[mask] <= unclipped[mask] + 1e-15)


def test_k3_is_nonnegative_and_zero_at_equality():
    lp = np.log([0.2, 0.5, 0.9])
    assert np.allclose(k3_kl(lp, lp), 0)
    assert np.all(k3_kl(lp, np.log([0.3, 0.1, 0.95])) >= 0)


def test_segment_hand_case():
    r = segment_loss_report(SegmentedTokens([1, 2, 3, 4], ["f", "r", "r", "y"]))
    assert (r.format_loss, r.rationale_loss, r.answer_loss, r.total) == (1, 5, 4, 10)


def test_single_segment():
    r = segment_loss_report(SegmentedTokens([0.5, 0.25], ["rationale", "rationale"]))
    assert r.format_loss == 0 and r.answer_loss == 0 and r.total == r.rationale_loss == 0.75
    assert r.token_ratio is None


def test_token_ratio():
    k = 2
    labels = ["format"] * 25 * k + ["rationale"] * 135 * k + ["answer"] * k
    r = segment_loss_report(SegmentedTokens([0.1] * len(labels), labels))
    assert r.token_ratio == (25.0, 135.0, 1.0)


def test_segment_validation():
    with pytest.raises(LengthMismatch):
        SegmentedTokens([1.0], ["f", "r"])
    with pytest.raises(ValueError):
        SegmentedTokens([-1.0], ["f"])
    with pytest.raises(ValueError):
        SegmentedTokens([1.0], ["q"])


@given(
    st.lists(
        st.tuples(st.floats(0, 1e6, allow_nan=False), st.sampled_from(["format", "rationale", "answer"])),
        max_size=200,
    )
)
def test_decomposition_identity(pairs):
    nlls = [p[0] for p in pairs]
    labels = [p[1] for p in pairs]
    r = segment_loss_report(SegmentedTokens(nlls, labels))
    assert r.format_loss + r.rationale_loss + r.answer_loss == r.total
    assert math.isclose(r.total, math.fsum(nlls), rel_tol=1e-12, abs_tol=1e-12)
    ref = oracles.segment_sums(nlls, labels)
    assert (r.format_loss, r.rationale_loss, r.answer_loss) == (ref["format"], ref["rationale"], ref["answer"])


def test_label_tokens_majority_overlap():
    spans = [(0, 10, "format"), (10, 20, "rationale"), (20, 25, "answer")]
    offsets = [(0, 4), (8, 14), (18, 21), (21, 25)]
    assert label_tokens(offsets, spans) == ["format", "rationale", "rationale", "answer"]
