"""Format accuracy, content accuracy (exact match) and consistency rates."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from decimal import Decimal, InvalidOperation
from fractions import Fraction
from typing import Any, Iterable, Sequence

from .data import DuplicateIdError, EvalOutcome, Sample, TaskKind
from .formats import FormatSpec, parse


class UncanonicalizableAnswer(ValueError):
    def __init__(self, raw: str, task: TaskKind):
        self.raw = raw
        self.task = task
        super().__init__(f"cannot canonicalize {raw!r} as {TaskKind(task).value}")


class EmptyEvaluation(ValueError):
    pass


class LengthMismatch(ValueError):
    pass


# --- canonicalization ------------------------------------------------------


def _unwrap_braced(s: str, command: str) -> str:
    """Replace the last ``\\command{...}`` (balanced) with its content."""
    idx = s.rfind(command + "{")
    if idx < 0:
        return s
    depth = 0
    start = idx + len(command)
    for j in range(start, len(s)):
        if s[j] == "{":
            depth += 1
        elif s[j] == "}":
            depth -= 1
            if depth == 0:
                return s[:idx] + s[start + 1 : j] + s[j + 1 :]
    return s


def _strip_math_wrappers(s: str) -> str:
    s = s.strip()
    for cmd in ("\\boxed", "\\fbox"):
        while cmd + "{" in s:
            inner = _unwrap_braced(s, cmd)
            if inner == s:
                break
            s = inner
    s = s.strip()
    for left, right in (("$$", "$$"), ("$", "$"), ("\\(", "\\)"), ("\\[", "\\]")):
        if len(s) >= len(left) + len(right) and s.startswith(left) and s.endswith(right):
            s = s[len(left) : len(s) - len(right)].strip()
    return s


_THOUSANDS = re.compile(r"(?<=\d),(?=\d{3}(?!\d))")
_DECIMAL = re.compile(r"^[+-]?(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?$")
_SLASH_FRAC = re.compile(r"^([+-]?\d+)\s*/\s*(\d+)$")
_TEX_FRAC = re.compile(r"^([+-]?)\\frac\{\s*([+-]?\d+)\s*\}\{\s*(\d+)\s*\}$|^([+-]?)\\frac(\d)(\d)$")
_LATEX_NOISE = re.compile(r"\\left|\\right|\\!|\\,|\\;|\\:|\\ |~")


def _to_fraction(s: str) -> Fraction | None:
    if _DECIMAL.match(s):
        try:
            return Fraction(Decimal(s))
        except (InvalidOperation, ValueError):
            return None
    m = _SLASH_FRAC.match(s)
    if m:
        den = int(m.group(2))
        return Fraction(int(m.group(1)), den) if den else None
    m = _TEX_FRAC.match(s)
    if m:
        if m.group(2) is not None:
            sign, num, den = m.group(1), int(m.group(2)), int(m.group(3))
        else:
            sign, num, den = m.group(4), int(m.group(5)), int(m.group(6))
        if not den:
            return None
        value = Fraction(num, den)
        return -value if sign == "-" else value
    return None


def format_number(value: Fraction) -> str:
    """Exact decimal string when the denominator allows one, else ``p/q``."""
    den = value.denominator
    twos = fives = 0
    while den % 2 == 0:
        den //= 2
        twos += 1
    while den % 5 == 0:
        den //= 5
        fives += 1
    if den != 1:
        return f"{value.numerator}/{value.denominator}"
    digits = max(twos, fives)
    scaled = value * 10**digits
    n = abs(scaled.numerator)
    sign = "-" if value < 0 else ""
    if digits == 0:
        return f"{sign}{n}"
    whole, frac = divmod(n, 10**digits)
    frac_s = str(frac).rjust(digits, "0").rstrip("0")
    return f"{sign}{whole}.{frac_s}" if frac_s else f"{sign}{whole}"


def _canonical_numeric(raw: str) -> str:
    s = _strip_math_wrappers(raw)
    s = s.replace("\\dfrac", "\\frac").replace("\\tfrac", "\\frac")
    s = _LATEX_NOISE.sub("", s).strip()
    s = _THOUSANDS.sub("", s)
    s = s.rstrip(".").strip()
    if s.startswith("\\$"):
        s = s[2:].strip()
    s = s.lstrip("$").strip()
    value = _to_fraction(s)
    if value is not None:
        return format_number(value)
    # symbolic answers (e.g. \sqrt{2}, x^2+1) compare by whitespace-free text
    symbolic = re.sub(r"\s+", "", s)
    if not symbolic:
        raise UncanonicalizableAnswer(raw, TaskKind.NUMERIC_QA)
    return symbolic


_BOOL = {"yes": "true", "true": "true", "no": "false", "false": "false"}
_MC_RE = re.compile(r"^(?:option\s*)?[\(\[]?\s*([A-Ea-e])\s*[\)\]\.:]?$", re.IGNORECASE)


def canonicalize_answer(raw: str, task: TaskKind | str) -> str:
    """Canonical string for exact-match comparison.

    Raises :class:`UncanonicalizableAnswer` when ``raw`` cannot represent an
    answer of the given task kind; callers score that as a non-match.
    """
    task = TaskKind(task)
    if raw is None or not str(raw).strip():
        raise UncanonicalizableAnswer(raw, task)
    raw = str(raw)
    if task is TaskKind.NUMERIC_QA:
        return _canonical_numeric(raw)
    s = _strip_math_wrappers(raw)
    if task is TaskKind.BOOLEAN_QA:
        key = s.strip().strip(".!?\"'`*").strip().casefold()
        if key not in _BOOL:
            raise UncanonicalizableAnswer(raw, task)
        return _BOOL[key]
    m = _MC_RE.match(s.strip())
    if not m:
        raise UncanonicalizableAnswer(raw, task)
    return m.group(1).upper()


def _try_canonical(raw: str | None, task: TaskKind) -> str | None:
    try:
        return canonicalize_answer(raw, task)
    except UncanonicalizableAnswer:
        return None


def _norm_text(s: str) -> str:
    return " ".join(s.split()).rstrip(".").casefold()


# --- judging ---------------------------------------------------------------


def judge(output_text: str | None, sample: Sample, spec: FormatSpec) -> EvalOutcome:
    """Score one structured output: format validity, extracted answer, exact match."""
    report = parse(output_text, spec) if output_text is not None else None
    if report is None or not report.valid:
        return EvalOutcome(sample.id, False, None, False)
    record = report.record
    if sample.task is TaskKind.MULTIPLE_CHOICE:
        label = record.option_label
        gold = _try_canonical(sample.gold_answer, sample.task) or sample.gold_answer
        answer = _norm_text(record.answer)
        conflict = any(
            _norm_text(text) == answer
            for other, text in (sample.options or {}).items()
            if other != label
        ) and answer != _norm_text(sample.options.get(label, ""))
        return EvalOutcome(sample.id, True, label, label == gold, label_text_conflict=conflict)
    extracted = _try_canonical(record.answer, sample.task)
    gold = _try_canonical(sample.gold_answer, sample.task)
    if extracted is None:
        return EvalOutcome(sample.id, True, record.answer.strip(), False)
    return EvalOutcome(sample.id, True, extracted, gold is not None and extracted == gold)


@dataclass(frozen=True)
class EvalReport:
    n: int
    f_acc: float
    c_acc: float
    per_sample: tuple[EvalOutcome, ...] = field(repr=False)

    @property
    def n_format_valid(self) -> int:
        return sum(o.format_valid for o in self.per_sample)

    @property
    def n_content_correct(self) -> int:
        return sum(o.content_correct for o in self.per_sample)

    def to_dict(self, per_sample: bool = True) -> dict[str, Any]:
        d: dict[str, Any] = {
            "n": self.n,
            "f_acc": self.f_acc,
            "c_acc": self.c_acc,
            "n_format_valid": self.n_format_valid,
            "n_content_correct": self.n_content_correct,
            "n_label_text_conflict": sum(o.label_text_conflict for o in self.per_sample),
        }
        if per_sample:
            d["per_sample"] = [o.to_dict() for o in self.per_sample]
        return d

    def table(self) -> str:
        return format_table(
            [("n", str(self.n)), ("F-Acc", f"{self.f_acc:.4f}"), ("C-Acc", f"{self.c_acc:.4f}")]
        )


def evaluate(
    outputs: Iterable[tuple[Sample, str | None]], spec: FormatSpec
) -> EvalReport:
    outcomes = []
    seen: set[str] = set()
    for sample, text in outputs:
        if sample.id in seen:
            raise DuplicateIdError(sample.id)
        seen.add(sample.id)
        outcomes.append(judge(text, sample, spec))
    if not outcomes:
        raise EmptyEvaluation("nothing to evaluate")
    n = len(outcomes)
    f = sum(o.format_valid for o in outcomes)
    c = sum(o.content_correct for o in outcomes)
    return EvalReport(n=n, f_acc=f / n, c_acc=c / n, per_sample=tuple(outcomes))


# --- consistency -----------------------------------------------------------


@dataclass(frozen=True)
class ConsistencyReport:
    """Four-way split by (LLM output correct?, refined output correct?)."""

    ccr: float
    ecr: float
    cer: float
    eer: float
    n: int = 0

    def to_dict(self) -> dict[str, Any]:
        return {"n": self.n, "ccr": self.ccr, "ecr": self.ecr, "cer": self.cer, "eer": self.eer}

    def table(self) -> str:
        return format_table(
            [
                ("n", str(self.n)),
                ("CCR (both correct)", f"{self.ccr:.4f}"),
                ("ECR (corrected)", f"{self.ecr:.4f}"),
                ("CER (mis-corrected)", f"{self.cer:.4f}"),
                ("EER (both wrong)", f"{self.eer:.4f}"),
            ]
        )


def consistency_report(
    llm_judgments: Sequence[bool], slm_judgments: Sequence[bool]
) -> ConsistencyReport:
    if len(llm_judgments) != len(slm_judgments):
        raise LengthMismatch(f"{len(llm_judgments)} LLM vs {len(slm_judgments)} SLM judgments")
    n = len(llm_judgments)
    if n == 0:
        raise EmptyEvaluation("no judgments")
    counts = {(a, b): 0 for a in (True, False) for b in (True, False)}
    for a, b in zip(llm_judgments, slm_judgments):
        counts[(bool(a), bool(b))] += 1
    return ConsistencyReport(
        ccr=counts[(True, True)] / n,
        ecr=counts[(False, True)] / n,
        cer=counts[(True, False)] / n,
        eer=counts[(False, False)] / n,
        n=n,
    )


# --- free-form answer extraction ------------------------------------------

_NUMBER = re.compile(r"[-+]?\$?\s?(?:\d{1,3}(?:,\d{3})+|\d+)(?:\.\d+)?(?:\s*/\s*\d+)?")
_BOOL_WORD = re.compile(r"\b(yes|no|true|false)\b", re.IGNORECASE)
_MC_LETTER = re.compile(r"^\s*(?:option\s*)?[\(\[]?([A-E])\b[\)\]]?")
_MC_PAREN = re.compile(r"\(([A-E])\)")


_CANON_NUMBER = re.compile(r"^-?\d+(?:\.\d+)?(?:/\d+)?$")


def _last_boxed(text: str) -> str | None:
    idx = text.rfind("\\boxed{")
    if idx < 0:
        return None
    depth = 0
    for j in range(idx + 6, len(text)):
        if text[j] == "{":
            depth += 1
        elif text[j] == "}":
            depth -= 1
            if depth == 0:
                return text[idx + 7 : j]
    return None


DEFAULT_ANSWER_PATTERNS = (
    r"####\s*([^\n]+)",
    r"(?:final answer|the answer|answer)\s*(?:is|:|=)\s*:?\s*([^\n]+)",
)


@dataclass(frozen=True)
class FreeformExtractor:
    """Pull a final answer out of unformatted model prose.

    Tries, in order: the last ``\\boxed{...}``; the last match of each regex
    in ``patterns`` (group 1 is the candidate); then a task-specific fallback
    over the whole text (last number, last yes/no word, last ``(X)`` label).
    """

    patterns: tuple[str, ...] = DEFAULT_ANSWER_PATTERNS
    fallback: bool = True

    def _from_candidate(self, cand: str, task: TaskKind) -> str | None:
        cand = cand.strip().rstrip(".").strip()
        direct = _try_canonical(cand, task)
        if task is TaskKind.NUMERIC_QA:
            if direct is not None and _CANON_NUMBER.match(direct):
                return direct
            m = _NUMBER.search(cand)
            return _try_canonical(m.group(), task) if m else direct
        if direct is not None:
            return direct
        if task is TaskKind.BOOLEAN_QA:
            m = _BOOL_WORD.search(cand)
        else:
            m = _MC_LETTER.match(cand) or _MC_PAREN.search(cand)
        return _try_canonical(m.group(1), task) if m else None

    def extract(self, text: str | None, task: TaskKind | str) -> str | None:
        task = TaskKind(task)
        if not text:
            return None
        boxed = _last_boxed(text)
        if boxed is not None:
            got = self._from_candidate(boxed, task)
            if got is not None:
                return got
        for pattern in self.patterns:
            matches = list(re.finditer(pattern, text, re.IGNORECASE))
            for m in reversed(matches):
                got = self._from_candidate(m.group(1), task)
                if got is not None:
                    return got
        if not self.fallback:
            return None
        if task is TaskKind.NUMERIC_QA:
            found = _NUMBER.findall(text)
        elif task is TaskKind.BOOLEAN_QA:
            found = _BOOL_WORD.findall(text)
        else:
            found = _MC_PAREN.findall(text)
        return _try_canonical(found[-1], task) if found else None

    def is_correct(self, text: str | None, sample: Sample) -> bool:
        got = self.extract(text, sample.task)
        gold = _try_canonical(sample.gold_answer, sample.task)
        return got is not None and got == gold


# --- reporting -------------------------------------------------------------


def format_table(rows: Sequence[tuple[str, str]]) -> str:
    width = max(len(k) for k, _ in rows)
    vwidth = max(len(v) for _, v in rows)
    return "\n".join(f"{k.ljust(width)}  {v.rjust(vwidth)}" for k, v in rows)
