"""Build the structured chain-of-thought adaptation dataset.

Pipeline: sample free-form LLM outputs for every question, ask the SLM to
analyze each output and answer in the required format, keep rows whose
answer matches the gold label (stage 1), retry the rest with the gold answer
as a hint (stage 2), discard what still fails, and write the survivors with
their formatted targets.

Every model call is checkpointed per unit, so an interrupted run resumes
where it stopped and produces the same file as an uninterrupted one.
"""

from __future__ import annotations

import json
import logging
import os
import threading
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Sequence

from .data import (
    AdaptationExample,
    Provenance,
    Sample,
    StructuredRecord,
    TaskKind,
    write_examples,
)
from .formats import FormatSpec, parse, render, template_skeleton
from .gateway import SLM_ANALYZE, Backend, BackendConfig, Gateway, PromptRecipe
from .metrics import UncanonicalizableAnswer, canonicalize_answer

log = logging.getLogger("dicekit.builder")


def default_llm_recipe() -> PromptRecipe:
    return PromptRecipe(
        system_text="Answer the question. Think step by step, then state the final answer.",
    )


def default_slm_recipe(spec: FormatSpec) -> PromptRecipe:
    system = (
        "You are given a question and a response written by another model. "
        "First analyze whether the response is correct, then give the final answer. "
        f"Reply in {spec.format_kind.value.upper()} using exactly this template:\n"
        f"{template_skeleton(spec)}"
    )
    return PromptRecipe(system_text=system, mode=SLM_ANALYZE)


@dataclass(frozen=True)
class ConstructionConfig:
    llm: BackendConfig
    slm: BackendConfig
    spec: FormatSpec
    responses_per_sample: int = 5
    keep_stage2: bool = True
    seed: int = 0
    llm_recipe: PromptRecipe | None = None
    slm_recipe: PromptRecipe | None = None

    def __post_init__(self) -> None:
        if self.responses_per_sample < 1:
            raise ValueError("responses_per_sample must be >= 1")
        if self.llm_recipe is None:
            object.__setattr__(self, "llm_recipe", default_llm_recipe())
        if self.slm_recipe is None:
            object.__setattr__(self, "slm_recipe", default_slm_recipe(self.spec))
        if self.slm_recipe.mode != SLM_ANALYZE:
            raise ValueError("the SLM recipe must use slm-analyze mode")


@dataclass(frozen=True)
class LLMRow:
    sample: Sample
    response_index: int
    llm_output: str

    @property
    def key(self) -> str:
        return f"{self.sample.id}\t{self.response_index}"


@dataclass(frozen=True)
class ConstructionStats:
    n_input: int
    n_attempted: int
    n_stage1_kept: int
    n_stage2_attempted: int
    n_stage2_kept: int
    n_discarded: int

    def __post_init__(self) -> None:
        if self.n_stage1_kept + self.n_stage2_kept + self.n_discarded != self.n_attempted:
            raise ValueError("stage counts do not partition the attempted rows")

    @property
    def retention(self) -> float:
        if not self.n_attempted:
            return 0.0
        return (self.n_stage1_kept + self.n_stage2_kept) / self.n_attempted

    def to_dict(self) -> dict[str, Any]:
        return {
            "n_input": self.n_input,
            "n_attempted": self.n_attempted,
            "n_stage1_kept": self.n_stage1_kept,
            "n_stage2_attempted": self.n_stage2_attempted,
            "n_stage2_kept": self.n_stage2_kept,
            "n_discarded": self.n_discarded,
            "retention": self.retention,
        }

    def summary(self) -> str:
        return "\n".join(
            [
                f"samples:            {self.n_input}",
                f"rows attempted:     {self.n_attempted}",
                f"kept in stage 1:    {self.n_stage1_kept}",
                f"retried in stage 2: {self.n_stage2_attempted}",
                f"kept in stage 2:    {self.n_stage2_kept}",
                f"discarded:          {self.n_discarded}",
                f"retention:          {self.retention:.4f}",
            ]
        )


class Checkpoint:
    """Append-only JSONL of finished work units, keyed by string.

    ``path=None`` keeps everything in memory.
    """

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path is not None else None
        self._done: dict[str, Any] = {}
        self._lock = threading.Lock()
        if self.path is not None and self.path.exists():
            with open(self.path, encoding="utf-8") as fh:
                for line in fh:
                    try:
                        entry = json.loads(line)
                    except json.JSONDecodeError:
                        # a torn last line from a crash mid-write; redo that unit
                        continue
                    self._done[entry["key"]] = entry["value"]

    def __contains__(self, key: str) -> bool:
        return key in self._done

    def __len__(self) -> int:
        return len(self._done)

    def get(self, key: str) -> Any:
        return self._done[key]

    def put(self, key: str, value: Any) -> None:
        with self._lock:
            self._done[key] = value
            if self.path is None:
                return
            with open(self.path, "a", encoding="utf-8", newline="\n") as fh:
                fh.write(json.dumps({"key": key, "value": value}, ensure_ascii=False) + "\n")
                fh.flush()
                os.fsync(fh.fileno())

    def remove(self) -> None:
        if self.path is not None and self.path.exists():
            self.path.unlink()


def generate_llm_outputs(
    samples: Sequence[Sample],
    config: ConstructionConfig,
    gateway: Gateway,
    checkpoint: Checkpoint | None = None,
) -> list[LLMRow]:
    """``responses_per_sample`` free-form outputs per sample, one row each."""
    checkpoint = checkpoint if checkpoint is not None else Checkpoint()
    k = config.responses_per_sample

    def run(sample: Sample) -> list[str]:
        if sample.id in checkpoint:
            return checkpoint.get(sample.id)
        outputs = gateway.complete(config.llm_recipe, sample.question, n=k)
        if len(outputs) != k:
            raise RuntimeError(f"{sample.id}: expected {k} completions, got {len(outputs)}")
        checkpoint.put(sample.id, outputs)
        return outputs

    rows = []
    for sample, outputs in zip(samples, gateway.map(run, list(samples))):
        rows.extend(LLMRow(sample, i, text) for i, text in enumerate(outputs))
    return rows


def _gold_target(record: StructuredRecord, sample: Sample, spec: FormatSpec) -> StructuredRecord:
    if sample.task is TaskKind.MULTIPLE_CHOICE:
        return StructuredRecord(
            reasoning=record.reasoning,
            answer=sample.options[sample.gold_answer],
            option_label=sample.gold_answer,
            format_kind=spec.format_kind,
        )
    return StructuredRecord(
        reasoning=record.reasoning, answer=sample.gold_answer, format_kind=spec.format_kind
    )


def accept(completion: str, sample: Sample, spec: FormatSpec) -> StructuredRecord | None:
    """Filter one SLM completion: the training target if it is usable, else None.

    Usable means the text parses under ``spec`` (so the rationale is
    non-empty) and its answer equals the gold answer after canonicalization;
    multiple-choice compares option labels. The target keeps the SLM's
    rationale and carries the gold answer.
    """
    report = parse(completion, spec)
    if not report.valid:
        return None
    record = report.record
    if sample.task is TaskKind.MULTIPLE_CHOICE:
        ok = record.option_label == sample.gold_answer
    else:
        try:
            ok = canonicalize_answer(record.answer, sample.task) == canonicalize_answer(
                sample.gold_answer, sample.task
            )
        except UncanonicalizableAnswer:
            ok = False
    return _gold_target(record, sample, spec) if ok else None


def hint_text(sample: Sample) -> str:
    if sample.task is TaskKind.MULTIPLE_CHOICE:
        return f"{sample.gold_answer}. {sample.options[sample.gold_answer]}"
    return sample.gold_answer


def _run_stage(
    rows: Sequence[LLMRow],
    config: ConstructionConfig,
    gateway: Gateway,
    checkpoint: Checkpoint,
    provenance: Provenance,
) -> tuple[list[AdaptationExample], list[LLMRow]]:
    def run(row: LLMRow) -> str:
        if row.key in checkpoint:
            return checkpoint.get(row.key)
        recipe = config.slm_recipe
        if provenance is Provenance.STAGE2:
            recipe = replace(recipe, hint=hint_text(row.sample))
        completion = gateway.complete(recipe, row.sample.question, context=row.llm_output, n=1)[0]
        checkpoint.put(row.key, completion)
        return completion

    kept, rejected = [], []
    for row, completion in zip(rows, gateway.map(run, list(rows))):
        target = accept(completion, row.sample, config.spec)
        if target is None:
            rejected.append(row)
            continue
        kept.append(
            AdaptationExample(
                sample_id=row.sample.id,
                response_index=row.response_index,
                question=row.sample.question,
                llm_output=row.llm_output,
                target=target,
                provenance=provenance,
                gold_answer=row.sample.gold_answer,
                task=row.sample.task,
            )
        )
    return kept, rejected


def stage1(
    rows: Sequence[LLMRow],
    config: ConstructionConfig,
    gateway: Gateway,
    checkpoint: Checkpoint | None = None,
) -> tuple[list[AdaptationExample], list[LLMRow]]:
    """SLM analyzes each LLM output without a hint. Returns (kept, rejected)."""
    cp = checkpoint if checkpoint is not None else Checkpoint()
    return _run_stage(rows, config, gateway, cp, Provenance.STAGE1)


def stage2(
    rejected_rows: Sequence[LLMRow],
    config: ConstructionConfig,
    gateway: Gateway,
    checkpoint: Checkpoint | None = None,
) -> tuple[list[AdaptationExample], list[LLMRow]]:
    """Retry stage-1 rejects with the gold answer as a hint. Returns (kept, discarded)."""
    cp = checkpoint if checkpoint is not None else Checkpoint()
    return _run_stage(rejected_rows, config, gateway, cp, Provenance.STAGE2)


def assemble(
    kept_rows: Sequence[AdaptationExample],
    spec: FormatSpec,
    out_path: str | Path,
    *,
    n_input: int,
    n_attempted: int,
    n_stage2_attempted: int,
    stats_path: str | Path | None = None,
) -> ConstructionStats:
    """Write the dataset (sorted by sample id, response index) and its stats.

    With ``stats_path`` the stats go there as JSON and a plain-text summary
    goes next to it with a ``.txt`` suffix.
    """
    rows = sorted(kept_rows, key=lambda r: (r.sample_id, r.response_index))
    n1 = sum(r.provenance is Provenance.STAGE1 for r in rows)
    n2 = len(rows) - n1
    stats = ConstructionStats(
        n_input=n_input,
        n_attempted=n_attempted,
        n_stage1_kept=n1,
        n_stage2_attempted=n_stage2_attempted,
        n_stage2_kept=n2,
        n_discarded=n_attempted - n1 - n2,
    )
    if not rows:
        log.warning("no rows survived filtering; writing an empty dataset")
    write_examples(out_path, rows, render_target=lambda rec: render(rec, spec))
    if stats_path is not None:
        stats_path = Path(stats_path)
        tmp = stats_path.with_name(stats_path.name + ".tmp")
        tmp.write_text(json.dumps(stats.to_dict(), indent=2) + "\n", encoding="utf-8")
        os.replace(tmp, stats_path)
        stats_path.with_suffix(".txt").write_text(stats.summary() + "\n", encoding="utf-8")
    return stats


def construct(
    samples: Sequence[Sample],
    config: ConstructionConfig,
    llm_backend: Backend,
    slm_backend: Backend,
    out_path: str | Path,
    stats_path: str | Path | None = None,
    checkpoint_dir: str | Path | None = None,
) -> ConstructionStats:
    """Run the whole construction and write the dataset.

    With ``checkpoint_dir`` every finished model call is recorded there; a
    rerun after a failure skips recorded work. Checkpoints are removed once
    the dataset has been written.
    """
    bad = [s.id for s in samples if s.task is not config.spec.task]
    if bad:
        raise ValueError(f"samples {bad[:5]} do not match the template's task {config.spec.task.value}")
    if checkpoint_dir is not None:
        Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
        cps = [Checkpoint(Path(checkpoint_dir) / f"{name}.jsonl") for name in ("llm", "stage1", "stage2")]
    else:
        cps = [Checkpoint(), Checkpoint(), Checkpoint()]
    llm = Gateway(config.llm, llm_backend, seed=config.seed)
    slm = Gateway(config.slm, slm_backend, seed=config.seed)

    rows = generate_llm_outputs(samples, config, llm, cps[0])
    kept1, rejected = stage1(rows, config, slm, cps[1])
    kept2: list[AdaptationExample] = []
    n2_attempted = 0
    if config.keep_stage2 and rejected:
        n2_attempted = len(rejected)
        kept2, _ = stage2(rejected, config, slm, cps[2])
    stats = assemble(
        kept1 + kept2,
        config.spec,
        out_path,
        n_input=len(samples),
        n_attempted=len(rows),
        n_stage2_attempted=n2_attempted,
        stats_path=stats_path,
    )
    for cp in cps:
        cp.remove()
    log.info("construction finished", extra=stats.to_dict())
    return stats
