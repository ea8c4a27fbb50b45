import json

import pytest

import builder_fixture as fx
from conftest import FIXTURES
from dicekit.builder import (
    Checkpoint,
    ConstructionConfig,
    ConstructionStats,
    accept,
    assemble,
    construct,
    generate_llm_outputs,
    stage1,
    stage2,
)
from dicekit.data import Sample, read_examples
from dicekit.formats import default_spec, parse
from dicekit.gateway import BackendConfig, BackendError, Gateway, ScriptedMock
from dicekit.scripting import script_llm

GOLDEN = FIXTURES / "golden" / "dataset.jsonl"


def _samples(n, prefix="q"):
    return [Sample(f"{prefix}{i:02d}", f"What is {i} + {i}?", str(2 * i), "numeric-qa") for i in range(n)]


def _llm_only_mock(cfg, samples, k):
    m = ScriptedMock()
    for s in samples:
        script_llm(m, cfg.llm, cfg.llm_recipe, s, [f"{s.id} output {j}" for j in range(k)])
    return m


def test_three_samples_five_responses_give_fifteen_rows():
    cfg = fx.config()
    samples = _samples(3)
    rows = generate_llm_outputs(samples, cfg, Gateway(cfg.llm, _llm_only_mock(cfg, samples, 5)))
    assert len(rows) == 15
    assert [(r.sample.id, r.response_index) for r in rows[:6]] == [
        ("q00", 0), ("q00", 1), ("q00", 2), ("q00", 3), ("q00", 4), ("q01", 0)
    ]


def test_single_response_row():
    cfg = fx.config(responses=1)
    samples = _samples(1)
    rows = generate_llm_outputs(samples, cfg, Gateway(cfg.llm, _llm_only_mock(cfg, samples, 1)))
    assert len(rows) == 1 and rows[0].llm_output == "q00 output 0"


def test_llm_failure_at_row_8_resumes_from_checkpoint(tmp_path):
    cfg = fx.config(concurrency=1, responses=1)
    samples = _samples(10)
    script = _llm_only_mock(cfg, samples, 1)
    cp_path = tmp_path / "llm.jsonl"
    flaky = fx.FailAfter(script, fail_at=8)
    with pytest.raises(BackendError):
        generate_llm_outputs(samples, cfg, Gateway(cfg.llm, flaky), Checkpoint(cp_path))
    cp = Checkpoint(cp_path)
    assert len(cp) == 7 and "q06" in cp and "q07" not in cp
    script.reset()
    rerun = fx.FailAfter(script, fail_at=10**9)
    rows = generate_llm_outputs(samples, cfg, Gateway(cfg.llm, rerun), cp)
    assert len(rows) == 10 and rerun.calls == 3


def test_stage_counts():
    cfg = fx.config()
    mock = fx.mock(cfg)
    rows = generate_llm_outputs(fx.SAMPLES, cfg, Gateway(cfg.llm, mock))
    slm = Gateway(cfg.slm, mock)
    kept1, rejected = stage1(rows, cfg, slm)
    assert len(kept1) == 6 and len(rejected) == 4
    assert {(r.sample.id, r.response_index) for r in rejected} == {
        ("gsm-001", 2), ("gsm-001", 4), ("gsm-002", 3), ("gsm-002", 4)
    }
    kept2, discarded = stage2(rejected, cfg, slm)
    assert len(kept2) == 3 and len(discarded) == 1
    assert all(e.provenance.value == "stage1" for e in kept1)
    assert all(e.provenance.value == "stage2" for e in kept2)


def test_accept_filter():
    s = fx.SAMPLES[0]
    assert accept(fx.xml("ok", "7"), s, fx.SPEC).answer == "7"
    assert accept(fx.xml("ok", "7.0"), s, fx.SPEC).answer == "7"  # target carries gold
    assert accept("7", s, fx.SPEC) is None
    assert accept(fx.xml("ok", "8"), s, fx.SPEC) is None
    assert accept(fx.xml("", "7"), s, fx.SPEC) is None


def test_accept_multiple_choice_target_uses_gold_label_and_text():
    spec = default_spec("multiple-choice", "json")
    s = Sample("m", "Capital of Italy?", "B", "multiple-choice", {"A": "Paris", "B": "Rome"})
    rec = accept('{"reasoning": "r", "option": "b", "answer": "rome"}', s, spec)
    assert (rec.option_label, rec.answer) == ("B", "Rome")
    assert accept('{"reasoning": "r", "option": "A", "answer": "Rome"}', s, spec) is None


def test_construct_matches_golden(tmp_path):
    out = tmp_path / "q.jsonl"
    stats = construct(fx.SAMPLES, fx.config(), fx.mock(), fx.mock(), out, stats_path=tmp_path / "stats.json")
    assert (stats.n_stage1_kept, stats.n_stage2_kept, stats.n_discarded) == (6, 3, 1)
    assert stats.n_stage2_attempted == 4
    assert stats.retention == 0.9
    assert out.read_bytes() == GOLDEN.read_bytes()
    saved = json.loads((tmp_path / "stats.json").read_text())
    assert saved["retention"] == 0.9
    assert "retention:          0.9000" in (tmp_path / "stats.txt").read_text()


def test_every_target_answer_is_gold_and_text_reparses(tmp_path):
    out = tmp_path / "q.jsonl"
    construct(fx.SAMPLES, fx.config(), fx.mock(), fx.mock(), out)
    lines = [json.loads(line) for line in out.read_text(encoding="utf-8").splitlines()]
    rows = read_examples(out)
    for row, raw in zip(rows, lines):
        assert row.target.answer == row.gold_answer
        assert parse(raw["target_text"], fx.SPEC).record == row.target


def test_construct_is_deterministic_across_concurrency(tmp_path):
    outs = []
    for conc in (1, 4, 8):
        cfg = fx.config(concurrency=conc)
        out = tmp_path / f"q{conc}.jsonl"
        construct(fx.SAMPLES, cfg, fx.mock(cfg), fx.mock(cfg), out)
        outs.append(out.read_bytes())
    assert outs[0] == outs[1] == outs[2]


@pytest.mark.parametrize("fail_at", [2, 3, 8, 11, 13])
def test_interrupted_construction_resumes_byte_identical(tmp_path, fail_at):
    cfg = fx.config(concurrency=1)
    out = tmp_path / "q.jsonl"
    cps = tmp_path / "cp"
    mock = fx.mock(cfg)
    # one shared call counter across both roles: 2 LLM calls, 10 stage-1, 4 stage-2
    flaky = fx.FailAfter(mock, fail_at)
    with pytest.raises(BackendError):
        construct(fx.SAMPLES, cfg, flaky, flaky, out, checkpoint_dir=cps)
    assert not out.exists()
    mock.reset()
    construct(fx.SAMPLES, cfg, mock, mock, out, checkpoint_dir=cps)
    assert out.read_bytes() == GOLDEN.read_bytes()
    # only the unfinished units were requested again
    assert len(mock.calls) == 16 - (fail_at - 1)
    assert not any(cps.iterdir())


def test_stage1_checkpoint_holds_seven_rows_after_failure_at_row_8(tmp_path):
    cfg = fx.config(concurrency=1)
    cps = tmp_path / "cp"
    flaky = fx.FailAfter(fx.mock(cfg), fail_at=2 + 8)  # two LLM calls, then stage-1 row 8
    with pytest.raises(BackendError):
        construct(fx.SAMPLES, cfg, flaky, flaky, tmp_path / "q.jsonl", checkpoint_dir=cps)
    assert len(Checkpoint(cps / "stage1.jsonl")) == 7


def test_torn_checkpoint_line_is_redone(tmp_path):
    p = tmp_path / "cp.jsonl"
    cp = Checkpoint(p)
    cp.put("a", 1)
    with open(p, "a") as fh:
        fh.write('{"key": "b", "val')
    again = Checkpoint(p)
    assert "a" in again and "b" not in again


def test_keep_stage2_off(tmp_path):
    cfg = ConstructionConfig(
        llm=fx.config().llm, slm=fx.config().slm, spec=fx.SPEC, keep_stage2=False
    )
    stats = construct(fx.SAMPLES, cfg, fx.mock(cfg), fx.mock(cfg), tmp_path / "q.jsonl")
    assert (stats.n_stage1_kept, stats.n_stage2_attempted, stats.n_stage2_kept, stats.n_discarded) == (6, 0, 0, 4)
    assert stats.retention == 0.6


def test_empty_result_warns(tmp_path, caplog):
    out = tmp_path / "q.jsonl"
    stats = assemble([], fx.SPEC, out, n_input=1, n_attempted=5, n_stage2_attempted=5)
    assert out.read_bytes() == b""
    assert stats.retention == 0 and stats.n_discarded == 5
    assert any("empty dataset" in r.getMessage() for r in caplog.records)


def test_stats_partition_is_enforced():
    with pytest.raises(ValueError):
        ConstructionStats(1, 10, 6, 4, 3, 2)
    assert ConstructionStats(2, 10, 6, 4, 3, 1).retention == 0.9


def test_task_mismatch_rejected(tmp_path):
    bad = [Sample("b", "yes?", "true", "boolean-qa")]
    with pytest.raises(ValueError):
        construct(bad, fx.config(), ScriptedMock(), ScriptedMock(), tmp_path / "q.jsonl")


def test_slm_recipe_mode_enforced():
    from dicekit.gateway import PromptRecipe

    with pytest.raises(ValueError):
        ConstructionConfig(
            llm=BackendConfig(model_name="a"), slm=BackendConfig(model_name="b"), spec=fx.SPEC,
            slm_recipe=PromptRecipe(),
        )
