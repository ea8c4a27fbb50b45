"""
Training signals
================

The numbers a trainer needs: the format/answer reward, group-relative
advantages, the clipped GRPO objective and the per-segment SFT loss split.
"""

import numpy as np

from dicekit.signals import (
    GroupBatch,
    RewardInput,
    SegmentedTokens,
    grpo_terms,
    group_advantages,
    k3_kl,
    reward,
    segment_loss_report,
)

# the reward ignores the rationale: one point each for format and answer
for fmt in (True, False):
    for ans in (True, False):
        print(f"format={fmt!s:5} answer={ans!s:5} -> {reward(RewardInput(fmt, ans))}")

# advantages are standardized within a group (population std)
print(group_advantages([2, 2, 0, 0]))
print(group_advantages([1, 1, 1, 1]))  # a flat group teaches nothing

# the objective clips each ratio to [1-eps, 1+eps] on the unfavourable side
rng = np.random.default_rng(0)
logp = np.log(rng.uniform(0.2, 0.9, size=4))
ref_logp = logp + rng.normal(0, 0.1, size=4)
batch = GroupBatch(
    rewards=[2, 1, 1, 0],
    ratios=[1.5, 1.0, 0.9, 0.5],
    kl_terms=k3_kl(logp, ref_logp),
)
t = grpo_terms(batch)
print("advantages", np.round(t.advantages, 4))
print("surrogate ", np.round(t.surrogate, 4))
print("clipped   ", t.clipped)
print("objective ", round(t.loss, 6))

# per-segment loss: format tokens, rationale tokens and answer tokens
labels = ["format"] * 6 + ["rationale"] * 30 + ["answer"] * 2 + ["format"] * 4
nll = rng.exponential(0.5, size=len(labels))
r = segment_loss_report(SegmentedTokens(nll, labels))
print({k: round(v, 4) for k, v in r.to_dict().items() if k.endswith("loss") or k == "total"})
print("tokens per answer token:", r.token_ratio)
assert r.format_loss + r.rationale_loss + r.answer_loss == r.total
