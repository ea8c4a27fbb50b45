"""Domain types and the JSONL serialization contract.

Every file the toolkit reads or writes is UTF-8 JSONL with ``\\n`` line
endings, one object per line. Field names match the dataclass attributes.
"""

from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Mapping

OPTION_LABELS = ("A", "B", "C", "D", "E")

# C0 controls other than tab/newline/CR, lone surrogates and the two
# non-characters cannot survive XML or YAML serialization.
_FORBIDDEN_CHARS = re.compile(
    "[\x00-\x08\x0b\x0c\x0e-\x1f\ud800-\udfff\ufffe\uffff]"
)


class TaskKind(str, Enum):
    NUMERIC_QA = "numeric-qa"
    BOOLEAN_QA = "boolean-qa"
    MULTIPLE_CHOICE = "multiple-choice"


class FormatKind(str, Enum):
    XML = "xml"
    JSON = "json"
    YAML = "yaml"


class Provenance(str, Enum):
    STAGE1 = "stage1"
    STAGE2 = "stage2"


class DataError(ValueError):
    """Base class for malformed data files and invariant violations."""


class SchemaError(DataError):
    def __init__(self, line: int, field: str, detail: str = ""):
        self.line = line
        self.field = field
        self.detail = detail
        msg = f"schema error at line {line}: field {field!r}"
        super().__init__(f"{msg} ({detail})" if detail else msg)


class DuplicateIdError(DataError):
    def __init__(self, sample_id: str, line: int | None = None):
        self.sample_id = sample_id
        self.line = line
        super().__init__(f"duplicate id {sample_id!r}" + (f" at line {line}" if line else ""))


class InvariantViolation(DataError):
    pass


def check_text(value: str, name: str) -> None:
    if not isinstance(value, str):
        raise InvariantViolation(f"{name} must be a string, got {type(value).__name__}")
    bad = _FORBIDDEN_CHARS.search(value)
    if bad:
        raise InvariantViolation(f"{name} contains unserializable character {bad.group()!r}")


@dataclass(frozen=True)
class Sample:
    id: str
    question: str
    gold_answer: str
    task: TaskKind
    options: Mapping[str, str] | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "task", TaskKind(self.task))
        if not self.id:
            raise InvariantViolation("sample id must be non-empty")
        if not self.gold_answer or not self.gold_answer.strip():
            raise InvariantViolation(f"sample {self.id}: gold_answer must be non-empty")
        if self.task is TaskKind.MULTIPLE_CHOICE:
            if not self.options:
                raise InvariantViolation(f"sample {self.id}: multiple-choice needs options")
            bad = [k for k in self.options if k not in OPTION_LABELS]
            if bad:
                raise InvariantViolation(f"sample {self.id}: option labels must be A-E, got {bad}")
            if self.gold_answer not in self.options:
                raise InvariantViolation(
                    f"sample {self.id}: gold label {self.gold_answer!r} not among options"
                )
            object.__setattr__(self, "options", dict(self.options))
        elif self.options:
            raise InvariantViolation(f"sample {self.id}: options only allowed for multiple-choice")
        else:
            object.__setattr__(self, "options", None)

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {
            "id": self.id,
            "question": self.question,
            "gold_answer": self.gold_answer,
            "task": self.task.value,
        }
        if self.options is not None:
            d["options"] = dict(self.options)
        return d


@dataclass(frozen=True)
class StructuredRecord:
    """Semantic payload of a formatted answer: rationale, optional option label, final answer."""

    reasoning: str
    answer: str
    format_kind: FormatKind
    option_label: str | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "format_kind", FormatKind(self.format_kind))
        check_text(self.reasoning, "reasoning")
        check_text(self.answer, "answer")
        if not self.reasoning.strip():
            raise InvariantViolation("reasoning must be non-empty")
        if not self.answer.strip():
            raise InvariantViolation("answer must be non-empty")
        if self.option_label is not None and self.option_label not in OPTION_LABELS:
            raise InvariantViolation(f"option_label must be one of A-E, got {self.option_label!r}")

    def to_dict(self) -> dict[str, Any]:
        return {
            "reasoning": self.reasoning,
            "option_label": self.option_label,
            "answer": self.answer,
            "format_kind": self.format_kind.value,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> StructuredRecord:
        return cls(
            reasoning=d["reasoning"],
            answer=d["answer"],
            format_kind=d["format_kind"],
            option_label=d.get("option_label"),
        )


def target_matches_gold(record: StructuredRecord, gold_answer: str, task: TaskKind) -> bool:
    """Whether a stored target carries the gold answer (by label for multiple-choice)."""
    if TaskKind(task) is TaskKind.MULTIPLE_CHOICE:
        return record.option_label == gold_answer
    return record.answer == gold_answer


@dataclass(frozen=True)
class AdaptationExample:
    """One row of the adaptation dataset: question, LLM output and structured target."""

    sample_id: str
    response_index: int
    question: str
    llm_output: str
    target: StructuredRecord
    provenance: Provenance
    gold_answer: str
    task: TaskKind

    def __post_init__(self) -> None:
        object.__setattr__(self, "provenance", Provenance(self.provenance))
        object.__setattr__(self, "task", TaskKind(self.task))
        if (self.target.option_label is not None) != (self.task is TaskKind.MULTIPLE_CHOICE):
            raise InvariantViolation(
                f"{self.sample_id}: option_label must be present iff task is multiple-choice"
            )

    def validate(self) -> None:
        if not target_matches_gold(self.target, self.gold_answer, self.task):
            raise InvariantViolation(
                f"{self.sample_id}#{self.response_index} ({self.provenance.value}): "
                f"target answer does not equal gold {self.gold_answer!r}"
            )

    @property
    def key(self) -> tuple[str, int]:
        return (self.sample_id, self.response_index)

    def to_dict(self) -> dict[str, Any]:
        return {
            "sample_id": self.sample_id,
            "response_index": self.response_index,
            "question": self.question,
            "llm_output": self.llm_output,
            "gold_answer": self.gold_answer,
            "task": self.task.value,
            "provenance": self.provenance.value,
            "target": self.target.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> AdaptationExample:
        return cls(
            sample_id=d["sample_id"],
            response_index=d["response_index"],
            question=d["question"],
            llm_output=d["llm_output"],
            target=StructuredRecord.from_dict(d["target"]),
            provenance=d["provenance"],
            gold_answer=d["gold_answer"],
            task=d["task"],
        )


@dataclass(frozen=True)
class EvalOutcome:
    sample_id: str
    format_valid: bool
    extracted_answer: str | None
    content_correct: bool
    # multiple-choice only: label matched gold but the answer text names a different option
    label_text_conflict: bool = False

    def __post_init__(self) -> None:
        if self.content_correct and not self.format_valid:
            raise InvariantViolation("content_correct requires format_valid")
        if (self.extracted_answer is not None) != self.format_valid:
            raise InvariantViolation("extracted_answer must be present iff format_valid")

    def to_dict(self) -> dict[str, Any]:
        return {
            "sample_id": self.sample_id,
            "format_valid": self.format_valid,
            "extracted_answer": self.extracted_answer,
            "content_correct": self.content_correct,
            "label_text_conflict": self.label_text_conflict,
        }


# --- JSONL ---------------------------------------------------------------


def dumps_line(obj: Any) -> str:
    return json.dumps(obj, ensure_ascii=False, separators=(", ", ": ")) + "\n"


def iter_jsonl(path: str | os.PathLike) -> Iterable[tuple[int, Any]]:
    """Yield (line_number, object) pairs; blank lines are skipped."""
    with open(path, encoding="utf-8", newline="\n") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(lineno, "<line>", f"invalid JSON: {exc.msg}") from None


def write_jsonl(path: str | os.PathLike, rows: Iterable[Any]) -> None:
    """Write rows atomically: a sibling temp file is renamed over ``path``."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        for row in rows:
            fh.write(dumps_line(row))
    os.replace(tmp, path)


_SAMPLE_FIELDS = {"id": str, "question": str, "gold_answer": str, "task": str}


def _sample_from_row(row: Any, lineno: int) -> Sample:
    if not isinstance(row, dict):
        raise SchemaError(lineno, "<line>", "expected a JSON object")
    for name, typ in _SAMPLE_FIELDS.items():
        if name not in row:
            raise SchemaError(lineno, name, "missing")
        if not isinstance(row[name], typ):
            raise SchemaError(lineno, name, f"expected {typ.__name__}")
    unknown = set(row) - set(_SAMPLE_FIELDS) - {"options"}
    if unknown:
        raise SchemaError(lineno, sorted(unknown)[0], "unknown field")
    try:
        task = TaskKind(row["task"])
    except ValueError:
        raise SchemaError(lineno, "task", f"unknown task {row['task']!r}") from None
    options = row.get("options")
    if options is not None and not (
        isinstance(options, dict) and all(isinstance(v, str) for v in options.values())
    ):
        raise SchemaError(lineno, "options", "expected an object of label -> text")
    try:
        return Sample(
            id=row["id"],
            question=row["question"],
            gold_answer=row["gold_answer"],
            task=task,
            options=options,
        )
    except InvariantViolation as exc:
        field_name = "options" if "option" in str(exc) or "label" in str(exc) else "gold_answer"
        if "id must be" in str(exc):
            field_name = "id"
        raise SchemaError(lineno, field_name, str(exc)) from None


def read_samples(path: str | os.PathLike) -> list[Sample]:
    """Read a samples file. Any malformed row rejects the whole file."""
    samples: list[Sample] = []
    seen: set[str] = set()
    for lineno, row in iter_jsonl(path):
        sample = _sample_from_row(row, lineno)
        if sample.id in seen:
            raise DuplicateIdError(sample.id, lineno)
        seen.add(sample.id)
        samples.append(sample)
    return samples


def write_samples(path: str | os.PathLike, samples: Iterable[Sample]) -> None:
    write_jsonl(path, (s.to_dict() for s in samples))


def write_examples(
    path: str | os.PathLike,
    rows: Iterable[AdaptationExample],
    render_target: Any = None,
) -> None:
    """Validate every row, then write them as JSONL.

    ``render_target`` (record -> text), when given, adds a ``target_text``
    column holding the formatted training target.
    """
    rows = list(rows)
    for row in rows:
        row.validate()
    out = []
    for row in rows:
        d = row.to_dict()
        if render_target is not None:
            d["target_text"] = render_target(row.target)
        out.append(d)
    write_jsonl(path, out)


def read_examples(path: str | os.PathLike) -> list[AdaptationExample]:
    rows: list[AdaptationExample] = []
    seen: set[tuple[str, int]] = set()
    for lineno, d in iter_jsonl(path):
        try:
            ex = AdaptationExample.from_dict(d)
        except KeyError as exc:
            raise SchemaError(lineno, exc.args[0], "missing") from None
        except (InvariantViolation, ValueError, TypeError) as exc:
            raise SchemaError(lineno, "<row>", str(exc)) from None
        if ex.key in seen:
            raise DuplicateIdError(f"{ex.sample_id}#{ex.response_index}", lineno)
        seen.add(ex.key)
        rows.append(ex)
    return rows
