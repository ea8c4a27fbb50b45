"""Regenerate the CLI fixture files.

    python3 tests/fixtures/make_fixtures.py

Outputs are committed; tests compare against them, so rerun this only when
a fixture is meant to change, and re-check the hand counts noted below.
"""

import json
import sys
from pathlib import Path

HERE = Path(__file__).parent
sys.path.insert(0, str(HERE.parent))

import builder_fixture as fx  # noqa: E402
from dicekit.builder import default_llm_recipe, default_slm_recipe  # noqa: E402
from dicekit.data import Sample, write_jsonl, write_samples  # noqa: E402
from dicekit.gateway import BackendConfig, ScriptedMock  # noqa: E402
from dicekit.scripting import script_construction, script_inference  # noqa: E402

CLI = HERE / "cli"

INFER_SAMPLES = [
    Sample("test-001", "Sara reads 5 pages a day for 6 days. How many pages?", "30", "numeric-qa"),
    Sample("test-002", "A pen costs 2 dollars. What do 9 pens cost?", "18", "numeric-qa"),
]
INFER_OUTPUTS = [
    ("5 pages times 6 days is 30 pages. The answer is 30.", fx.xml("5 * 6 = 30 pages.", "30")),
    ("9 pens at 2 dollars is 18 dollars. The answer is 18.", fx.xml("9 * 2 = 18.", "$18")),
]

# consistency / evaluate fixture, ten rows:
#   LLM right on rows 1-8; SLM right on rows 1-7 and 9; row 10's SLM text is prose
#   -> CCR 0.7, CER 0.1 (row 8), ECR 0.1 (row 9), EER 0.1 (row 10)
#   -> F-Acc 0.9, C-Acc 0.8
CONS_SAMPLES = [Sample(f"c{i:02d}", f"What is {i} times 3?", str(3 * i), "numeric-qa") for i in range(1, 11)]


def _cons_prediction(i):
    gold = 3 * i
    llm_answer = gold if i <= 8 else gold + 1
    if i == 10:
        structured = f"I think it is {gold + 1}."
    else:
        slm_answer = gold if (i <= 7 or i == 9) else gold - 1
        structured = fx.xml(f"{i} times 3.", str(slm_answer))
    return {
        "sample_id": f"c{i:02d}",
        "status": "ok",
        "llm_output": f"{i} * 3 = {llm_answer}. The answer is {llm_answer}.",
        "structured_output": structured,
        "error": None,
    }


def _backend(name):
    return {"model_name": name, "concurrency_limit": 1}


def main():
    CLI.mkdir(exist_ok=True)
    write_samples(CLI / "construct_samples.jsonl", fx.SAMPLES)
    write_samples(CLI / "infer_samples.jsonl", INFER_SAMPLES)
    write_samples(CLI / "consistency_samples.jsonl", CONS_SAMPLES)
    write_jsonl(CLI / "consistency_predictions.jsonl", [_cons_prediction(i) for i in range(1, 11)])

    cfg = fx.config(concurrency=1)
    mock = ScriptedMock()
    for s in fx.SAMPLES:
        script_construction(mock, cfg, s, fx.LLM_OUTPUTS[s.id], fx.STAGE1[s.id], fx.STAGE2[s.id])
    llm, slm = BackendConfig("llm-mock"), BackendConfig("slm-mock")
    for s, (y_o, structured) in zip(INFER_SAMPLES, INFER_OUTPUTS):
        script_inference(mock, llm, slm, default_llm_recipe(), default_slm_recipe(fx.SPEC), s, y_o, structured)
    mock.save(CLI / "mock_script.json")

    config = {
        "seed": 0,
        "task": "numeric-qa",
        "format": "xml",
        "llm": _backend("llm-mock"),
        "slm": _backend("slm-mock"),
        "construct": {
            "samples": "construct_samples.jsonl",
            "output": "out/dataset.jsonl",
            "stats": "out/stats.json",
            "checkpoint_dir": "out/checkpoints",
        },
        "infer": {"samples": "infer_samples.jsonl", "output": "out/predictions.jsonl"},
        "evaluate": {
            "samples": "consistency_samples.jsonl",
            "predictions": "consistency_predictions.jsonl",
            "output": "out/eval.json",
        },
        "consistency": {
            "samples": "consistency_samples.jsonl",
            "predictions": "consistency_predictions.jsonl",
            "output": "out/consistency.json",
        },
        "signals": {"input": "signals_in.jsonl", "output": "out/signals.jsonl"},
        "latency": {"samples": "infer_samples.jsonl", "runs": 5, "output": "out/latency.json"},
    }
    (CLI / "run.json").write_text(json.dumps(config, indent=2) + "\n", encoding="utf-8")
    write_jsonl(
        CLI / "signals_in.jsonl",
        [
            {"rewards": [2, 2, 0, 0], "ratios": [1, 1, 1, 1], "kl_terms": [0, 0, 0, 0], "beta": 0},
            {"reward_inputs": [[True, True], [True, False], [False, False]], "ratios": [1.5, 1.0, 0.5], "kl_terms": [0.01, 0.02, 0.03]},
            {"neg_log_probs": [1, 2, 3, 4], "segment_labels": ["f", "r", "r", "y"]},
        ],
    )


if __name__ == "__main__":
    main()
