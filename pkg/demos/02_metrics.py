"""
Scoring structured outputs
==========================

Exact-match answers need a canonical form first. After that, format and
content accuracy are simple counts, and comparing the free-form LLM answer
with the refined structured answer gives four consistency rates.
"""

from dicekit import Sample, canonicalize_answer, default_spec, evaluate
from dicekit.metrics import FreeformExtractor, consistency_report, judge

# canonical forms: separators, dollar signs, boxes and fractions go away
for raw in ["1,234", "$18.00", "\\boxed{\\frac{1}{2}}", "2/6", "42."]:
    print(f"{raw!r:26} -> {canonicalize_answer(raw, 'numeric-qa')!r}")
print(canonicalize_answer("Yes", "boolean-qa"), canonicalize_answer("(b)", "multiple-choice"))

# judge one output: (format valid, extracted answer, content correct)
spec = default_spec("numeric-qa", "xml")
sample = Sample("q1", "What is 2 + 2?", "4", "numeric-qa")
good = "<response>\n<reasoning>2+2=4</reasoning>\n<answer>4.0</answer>\n</response>"
for text in (good, "It is 4."):
    o = judge(text, sample, spec)
    print(o.format_valid, o.extracted_answer, o.content_correct)

# a small evaluation: 3 of 4 well formed, 2 of 4 right
samples = [Sample(f"q{i}", "q", "4", "numeric-qa") for i in range(4)]
texts = [
    good,
    good.replace("4.0", "4"),
    good.replace("4.0", "5"),
    "no structure",
]
report = evaluate(zip(samples, texts), spec)
print(report.table())

# free-form LLM answers are judged with a pluggable extractor
ext = FreeformExtractor()
print(ext.extract("so she pays $1,200.\n#### 1200", "numeric-qa"))
print(ext.extract("Thinking again, the answer is (C).", "multiple-choice"))

# consistency between the LLM's answer and the refined answer
llm_right = [True, True, True, False, False]
slm_right = [True, True, False, True, False]
print(consistency_report(llm_right, slm_right).table())
