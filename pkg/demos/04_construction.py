"""
Building an adaptation dataset offline
======================================

The construction loop against a scripted mock: an LLM answers freely, a
small model analyzes each answer and writes a structured one, wrong rows get
a second try with the reference answer as a hint, and whatever still fails
is dropped.
"""

import json
import tempfile
from pathlib import Path

from dicekit import Sample, default_spec
from dicekit.builder import ConstructionConfig, construct
from dicekit.gateway import BackendConfig, ScriptedMock
from dicekit.scripting import script_construction

spec = default_spec("numeric-qa", "json")
cfg = ConstructionConfig(
    llm=BackendConfig(model_name="big-llm"),
    slm=BackendConfig(model_name="small-lm"),
    spec=spec,
    responses_per_sample=3,
)

sample = Sample("s1", "A pen costs 2 dollars. What do 9 pens cost?", "18", "numeric-qa")


def js(reasoning, answer):
    return json.dumps({"reasoning": reasoning, "answer": answer})


# script every model call this run will make
mock = ScriptedMock()
script_construction(
    mock,
    cfg,
    sample,
    llm_outputs=["9 * 2 = 18 dollars.", "9 + 2 = 11.", "It costs 18."],
    # first pass: right, wrong, and right but not in the template
    stage1=[js("9 pens at 2 dollars is 18.", "18"), js("The response adds.", "11"), "18 dollars"],
    # second pass with the hint, only for the two rejects
    stage2=[None, js("It should multiply: 9 * 2 = 18.", "18"), js("Same as the response.", "11")],
)

with tempfile.TemporaryDirectory() as tmp:
    out = Path(tmp) / "dataset.jsonl"
    stats = construct([sample], cfg, mock, mock, out, stats_path=Path(tmp) / "stats.json")
    print(stats.summary())
    for line in out.read_text().splitlines():
        row = json.loads(line)
        print(row["response_index"], row["provenance"], row["target_text"].replace("\n", " "))
