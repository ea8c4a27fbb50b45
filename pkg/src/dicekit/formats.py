"""Render structured records to XML/JSON/YAML and parse model text back.

Parsing never raises on bad model output; it returns a :class:`ParseReport`
whose ``failure_reason`` says why the text was rejected.

XML is validated by tag presence and nesting (key order is free, prose
between tags inside the root is tolerated). JSON and YAML must parse under
their grammar and hold every required key exactly once, as a string.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Mapping, Sequence

import yaml

from .data import FormatKind, InvariantViolation, StructuredRecord, TaskKind

ROLES = ("reasoning", "option", "answer")


class FailureReason(str, Enum):
    UNPARSEABLE = "unparseable"
    MISSING_KEY = "missing-key"
    WRONG_NESTING = "wrong-nesting"
    DUPLICATE_KEY = "duplicate-key"
    EMPTY_ANSWER = "empty-answer"
    EMPTY_REASONING = "empty-reasoning"
    INVALID_OPTION = "invalid-option"


class SpecMismatch(ValueError):
    pass


_NAME_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_.-]*$")


@dataclass(frozen=True)
class FormatSpec:
    format_kind: FormatKind
    task: TaskKind
    required_keys: tuple[str, ...]
    key_aliases: Mapping[str, str] = field(default_factory=dict)
    root: str = "response"

    def __post_init__(self) -> None:
        object.__setattr__(self, "format_kind", FormatKind(self.format_kind))
        object.__setattr__(self, "task", TaskKind(self.task))
        object.__setattr__(self, "required_keys", tuple(self.required_keys))
        object.__setattr__(self, "key_aliases", dict(self.key_aliases))
        keys = self.required_keys
        if "reasoning" not in keys or "answer" not in keys:
            raise ValueError("required_keys must include 'reasoning' and 'answer'")
        if ("option" in keys) != (self.task is TaskKind.MULTIPLE_CHOICE):
            raise ValueError("'option' key is required iff the task is multiple-choice")
        if len(set(keys)) != len(keys) or not set(keys) <= set(ROLES):
            raise ValueError(f"required_keys must be distinct roles from {ROLES}, got {keys}")
        for role, name in self.key_aliases.items():
            if role not in keys:
                raise ValueError(f"alias given for unknown key {role!r}")
            if not _NAME_RE.match(name):
                raise ValueError(f"invalid key name {name!r}")
        names = [self.name(k) for k in keys]
        if len(set(names)) != len(names) or self.root in names:
            raise ValueError("key names must be distinct from each other and from the root")
        if not _NAME_RE.match(self.root):
            raise ValueError(f"invalid root name {self.root!r}")

    def name(self, role: str) -> str:
        """Literal key/tag name written for a role."""
        return self.key_aliases.get(role, role)

    def to_dict(self) -> dict[str, Any]:
        return {
            "format_kind": self.format_kind.value,
            "task": self.task.value,
            "root": self.root,
            "keys": list(self.required_keys),
            "aliases": dict(self.key_aliases),
        }


def default_spec(task: TaskKind | str, format_kind: FormatKind | str) -> FormatSpec:
    task = TaskKind(task)
    if task is TaskKind.MULTIPLE_CHOICE:
        keys = ("reasoning", "option", "answer")
    else:
        keys = ("reasoning", "answer")
    return FormatSpec(format_kind=FormatKind(format_kind), task=task, required_keys=keys)


_TEMPLATE_FIELDS = {"format_kind", "task", "root", "keys", "aliases"}


def spec_from_dict(d: Mapping[str, Any]) -> FormatSpec:
    unknown = set(d) - _TEMPLATE_FIELDS
    if unknown:
        raise ValueError(f"unknown template field(s): {sorted(unknown)}")
    task = TaskKind(d["task"])
    base = default_spec(task, d["format_kind"])
    return FormatSpec(
        format_kind=d["format_kind"],
        task=task,
        required_keys=tuple(d.get("keys", base.required_keys)),
        key_aliases=d.get("aliases", {}),
        root=d.get("root", "response"),
    )


def load_template_spec(path: str | Path) -> FormatSpec:
    """Read a template spec file (JSON): format_kind, task, root, keys, aliases."""
    with open(path, encoding="utf-8") as fh:
        return spec_from_dict(json.load(fh))


@dataclass(frozen=True)
class ParseReport:
    valid: bool
    record: StructuredRecord | None = None
    failure_reason: FailureReason | None = None
    detail: str = ""

    def __post_init__(self) -> None:
        if self.valid != (self.record is not None) or self.valid == (self.failure_reason is not None):
            raise ValueError("inconsistent ParseReport")


def _fail(reason: FailureReason, detail: str = "") -> ParseReport:
    return ParseReport(valid=False, failure_reason=reason, detail=detail)


# --- rendering -------------------------------------------------------------


def _values(record: StructuredRecord, spec: FormatSpec) -> list[tuple[str, str]]:
    if record.format_kind is not spec.format_kind:
        raise SpecMismatch(
            f"record is {record.format_kind.value} but spec is {spec.format_kind.value}"
        )
    mc = spec.task is TaskKind.MULTIPLE_CHOICE
    if (record.option_label is not None) != mc:
        raise SpecMismatch("option_label must be present iff the template is multiple-choice")
    by_role = {"reasoning": record.reasoning, "option": record.option_label, "answer": record.answer}
    return [(spec.name(role), by_role[role]) for role in spec.required_keys]


def xml_escape(text: str) -> str:
    return (
        text.replace("&", "&amp;")
        .replace("<", "&lt;")
        .replace(">", "&gt;")
        .replace("\r", "&#13;")
    )


_ENTITY_RE = re.compile(r"&(amp|lt|gt|quot|apos|#[0-9]+|#x[0-9a-fA-F]+);")
_NAMED = {"amp": "&", "lt": "<", "gt": ">", "quot": '"', "apos": "'"}


def xml_unescape(text: str) -> str:
    def sub(m: re.Match) -> str:
        ent = m.group(1)
        if ent in _NAMED:
            return _NAMED[ent]
        code = int(ent[2:], 16) if ent[1] in "xX" else int(ent[1:])
        if code > 0x10FFFF:
            return m.group(0)
        return chr(code)

    return _ENTITY_RE.sub(sub, text)


_YAML_BREAKS = re.compile("[\x85\u2028\u2029]")


class _Dumper(yaml.SafeDumper):
    pass


def _str_representer(dumper: yaml.SafeDumper, value: str) -> yaml.ScalarNode:
    # literal block for multi-line text; the emitter falls back to a quoted
    # style on its own when a block scalar cannot hold the value exactly
    # YAML treats NEL, LS and PS as line breaks, so only double quotes
    # (which escape them) preserve such values
    if _YAML_BREAKS.search(value):
        style = '"'
    else:
        style = "|" if "\n" in value else None
    return dumper.represent_scalar("tag:yaml.org,2002:str", value, style=style)


_Dumper.add_representer(str, _str_representer)


def render(record: StructuredRecord, spec: FormatSpec) -> str:
    """Serialize ``record`` per ``spec``. Output is deterministic."""
    pairs = _values(record, spec)
    kind = spec.format_kind
    if kind is FormatKind.XML:
        lines = [f"<{spec.root}>"]
        lines += [f"<{name}>{xml_escape(value)}</{name}>" for name, value in pairs]
        lines.append(f"</{spec.root}>")
        return "\n".join(lines)
    if kind is FormatKind.JSON:
        return json.dumps(dict(pairs), ensure_ascii=False, indent=2)
    return yaml.dump(
        dict(pairs),
        Dumper=_Dumper,
        sort_keys=False,
        allow_unicode=True,
        default_flow_style=False,
        width=1 << 30,
    )


def template_skeleton(spec: FormatSpec) -> str:
    """Placeholder instance of the template, for instructions in prompts."""
    placeholders = {
        "reasoning": "step-by-step reasoning",
        "option": "option label",
        "answer": "final answer",
    }
    pairs = [(spec.name(r), f"<{placeholders[r]}>") for r in spec.required_keys]
    if spec.format_kind is FormatKind.XML:
        body = "\n".join(f"<{n}>...</{n}>" for n, _ in pairs)
        return f"<{spec.root}>\n{body}\n</{spec.root}>"
    if spec.format_kind is FormatKind.JSON:
        return json.dumps(dict(pairs), indent=2)
    return "\n".join(f"{n}: {v}" for n, v in pairs)


# --- parsing ---------------------------------------------------------------


class _DuplicateKey(Exception):
    def __init__(self, key: Any):
        self.key = key


def _no_dup_pairs(pairs: list[tuple[str, Any]]) -> dict:
    out: dict = {}
    for k, v in pairs:
        if k in out:
            raise _DuplicateKey(k)
        out[k] = v
    return out


class _StrictYamlLoader(yaml.BaseLoader):
    """All scalars load as strings; duplicate mapping keys are an error."""

    def construct_mapping(self, node, deep=False):
        seen = set()
        for key_node, _ in node.value:
            key = self.construct_object(key_node, deep=True)
            try:
                hash(key)
            except TypeError:
                raise yaml.constructor.ConstructorError(
                    None, None, "unhashable key", key_node.start_mark
                ) from None
            if key in seen:
                raise _DuplicateKey(key)
            seen.add(key)
        return super().construct_mapping(node, deep=deep)


def _contains_key(obj: Any, name: str) -> bool:
    if isinstance(obj, dict):
        return name in obj or any(_contains_key(v, name) for v in obj.values())
    if isinstance(obj, list):
        return any(_contains_key(v, name) for v in obj)
    return False


_OPTION_RE = re.compile(r"^[\(\[]?\s*([A-Ea-e])\s*[\)\]\.:]?$")


def _build_record(values: Mapping[str, str], spec: FormatSpec) -> ParseReport:
    reasoning = values["reasoning"]
    answer = values["answer"]
    if not answer.strip():
        return _fail(FailureReason.EMPTY_ANSWER)
    if not reasoning.strip():
        return _fail(FailureReason.EMPTY_REASONING)
    option = None
    if "option" in values:
        m = _OPTION_RE.match(values["option"].strip())
        if not m:
            return _fail(FailureReason.INVALID_OPTION, repr(values["option"]))
        option = m.group(1).upper()
    try:
        record = StructuredRecord(
            reasoning=reasoning, answer=answer, option_label=option, format_kind=spec.format_kind
        )
    except InvariantViolation as exc:
        return _fail(FailureReason.UNPARSEABLE, str(exc))
    return ParseReport(valid=True, record=record)


def _check_mapping(obj: Any, spec: FormatSpec) -> ParseReport:
    if not isinstance(obj, dict):
        return _fail(FailureReason.WRONG_NESTING, "top level is not a mapping")
    values = {}
    for role in spec.required_keys:
        name = spec.name(role)
        if name not in obj:
            if any(_contains_key(v, name) for v in obj.values()):
                return _fail(FailureReason.WRONG_NESTING, f"{name!r} is not at the top level")
            return _fail(FailureReason.MISSING_KEY, name)
        value = obj[name]
        if not isinstance(value, str):
            return _fail(FailureReason.WRONG_NESTING, f"{name!r} is not a string")
        values[role] = value
    return _build_record(values, spec)


def _json_blocks(text: str) -> list[str]:
    """Balanced top-level ``{...}`` spans, string-aware inside braces."""
    blocks = []
    i, n = 0, len(text)
    while i < n:
        if text[i] != "{":
            i += 1
            continue
        depth, j, in_str, esc = 0, i, False, False
        while j < n:
            c = text[j]
            if in_str:
                if esc:
                    esc = False
                elif c == "\\":
                    esc = True
                elif c == '"':
                    in_str = False
            elif c == '"':
                in_str = True
            elif c == "{":
                depth += 1
            elif c == "}":
                depth -= 1
                if depth == 0:
                    break
            j += 1
        if depth != 0:
            break
        blocks.append(text[i : j + 1])
        i = j + 1
    return blocks


def _load_json(text: str) -> Any:
    return json.loads(text, object_pairs_hook=_no_dup_pairs)


def _parse_json(text: str, spec: FormatSpec) -> ParseReport:
    try:
        return _check_mapping(_load_json(text.strip()), spec)
    except _DuplicateKey as exc:
        return _fail(FailureReason.DUPLICATE_KEY, repr(exc.key))
    except ValueError:
        pass
    parsed = []
    for block in _json_blocks(text):
        try:
            obj = _load_json(block)
        except _DuplicateKey as exc:
            return _fail(FailureReason.DUPLICATE_KEY, repr(exc.key))
        except ValueError:
            continue
        if isinstance(obj, dict):
            parsed.append(obj)
    if not parsed:
        return _fail(FailureReason.UNPARSEABLE, "no JSON object found")
    if len(parsed) > 1:
        return _fail(FailureReason.DUPLICATE_KEY, f"{len(parsed)} JSON blocks")
    return _check_mapping(parsed[0], spec)


_FENCE_RE = re.compile(r"```[ \t]*(?:ya?ml|YA?ML)?[ \t]*\n(.*?)```", re.DOTALL)
_DOC_MARK_RE = re.compile(r"^(?:---|\.\.\.)[ \t]*$", re.MULTILINE)


def _load_yaml(text: str) -> Any:
    try:
        return yaml.load(text, Loader=_StrictYamlLoader)
    except (ValueError, OverflowError) as exc:
        # PyYAML lets some bad escapes (e.g. "\UFFFFFFFF") escape as non-YAML errors
        raise yaml.YAMLError(str(exc)) from None


def _parse_yaml(text: str, spec: FormatSpec) -> ParseReport:
    names = {spec.name(r) for r in spec.required_keys}
    try:
        whole = _load_yaml(text)
        if isinstance(whole, dict) and names <= set(whole):
            return _check_mapping(whole, spec)
    except _DuplicateKey as exc:
        return _fail(FailureReason.DUPLICATE_KEY, repr(exc.key))
    except yaml.YAMLError:
        whole = None

    fenced = _FENCE_RE.findall(text)
    if fenced:
        chunks = fenced
    elif _DOC_MARK_RE.search(text):
        chunks = _DOC_MARK_RE.split(text)[1:]
    else:
        chunks = []
    candidates = []
    for chunk in chunks:
        try:
            obj = _load_yaml(chunk)
        except _DuplicateKey as exc:
            return _fail(FailureReason.DUPLICATE_KEY, repr(exc.key))
        except yaml.YAMLError:
            continue
        if isinstance(obj, dict) and names & set(obj):
            candidates.append(obj)
    if len(candidates) > 1:
        return _fail(FailureReason.DUPLICATE_KEY, f"{len(candidates)} YAML documents")
    if candidates:
        return _check_mapping(candidates[0], spec)
    if isinstance(whole, dict):
        return _check_mapping(whole, spec)
    return _fail(FailureReason.UNPARSEABLE, "no YAML mapping found")


def _tag_res(name: str) -> tuple[re.Pattern, re.Pattern]:
    esc = re.escape(name)
    return re.compile(rf"<{esc}\s*>"), re.compile(rf"</{esc}\s*>")


def _parse_xml(text: str, spec: FormatSpec) -> ParseReport:
    root_open, root_close = _tag_res(spec.root)
    key_res = {role: _tag_res(spec.name(role)) for role in spec.required_keys}
    opens = list(root_open.finditer(text))
    closes = list(root_close.finditer(text))
    if not opens:
        if any(o.search(text) for o, _ in key_res.values()):
            return _fail(FailureReason.WRONG_NESTING, f"no <{spec.root}> root")
        return _fail(FailureReason.UNPARSEABLE, "no XML block found")
    if len(opens) > 1:
        return _fail(FailureReason.DUPLICATE_KEY, f"{len(opens)} <{spec.root}> blocks")
    start = opens[0]
    if len(closes) != 1 or closes[0].start() < start.end():
        return _fail(FailureReason.UNPARSEABLE, f"unbalanced <{spec.root}>")
    end = closes[0]
    inner = text[start.end() : end.start()]
    outer = text[: start.start()] + text[end.end() :]

    spans = []
    for role, (o_re, c_re) in key_res.items():
        name = spec.name(role)
        if o_re.search(outer) or c_re.search(outer):
            return _fail(FailureReason.WRONG_NESTING, f"<{name}> outside the root")
        o = list(o_re.finditer(inner))
        c = list(c_re.finditer(inner))
        if not o and not c:
            return _fail(FailureReason.MISSING_KEY, name)
        if len(o) > 1 or len(c) > 1:
            return _fail(FailureReason.DUPLICATE_KEY, name)
        if len(o) != len(c) or c[0].start() < o[0].end():
            return _fail(FailureReason.UNPARSEABLE, f"unbalanced <{name}>")
        spans.append((o[0].start(), c[0].end(), o[0].end(), c[0].start(), role))
    spans.sort()
    for prev, cur in zip(spans, spans[1:]):
        if cur[0] < prev[1]:
            return _fail(FailureReason.WRONG_NESTING, f"<{spec.name(cur[4])}> nested in another key")
    values = {role: xml_unescape(inner[a:b]) for _, _, a, b, role in spans}
    return _build_record(values, spec)


def parse(text: str, spec: FormatSpec) -> ParseReport:
    """Validate model output against ``spec`` and extract its record."""
    if not isinstance(text, str):
        return _fail(FailureReason.UNPARSEABLE, "not text")
    try:
        if spec.format_kind is FormatKind.XML:
            return _parse_xml(text, spec)
        if spec.format_kind is FormatKind.JSON:
            return _parse_json(text, spec)
        return _parse_yaml(text, spec)
    except RecursionError:
        return _fail(FailureReason.UNPARSEABLE, "nesting too deep")


# --- segment spans ---------------------------------------------------------


def segment_spans(text: str, spec: FormatSpec) -> list[tuple[int, int, str]]:
    """Label each character of a rendered target as format, rationale or answer.

    Returns contiguous ``(start, end, label)`` spans covering ``text``. The
    serialized value region of ``reasoning`` is ``rationale``; those of
    ``option`` and ``answer`` are ``answer``; everything else (tags, keys,
    quotes, indentation markers) is ``format``. Intended for text produced by
    :func:`render`.
    """
    report = parse(text, spec)
    if not report.valid:
        raise ValueError(f"text does not conform to the template: {report.failure_reason}")
    record = report.record
    label_of = {"reasoning": "rationale", "option": "answer", "answer": "answer"}
    regions = []
    names = [spec.name(r) for r in spec.required_keys]
    if spec.format_kind is FormatKind.XML:
        for role in spec.required_keys:
            o_re, c_re = _tag_res(spec.name(role))
            a = o_re.search(text).end()
            b = c_re.search(text, a).start()
            regions.append((a, b, label_of[role]))
    elif spec.format_kind is FormatKind.JSON:
        values = {"reasoning": record.reasoning, "option": record.option_label, "answer": record.answer}
        pos = 0
        for role in spec.required_keys:
            key = json.dumps(spec.name(role), ensure_ascii=False) + ": "
            enc = json.dumps(values[role], ensure_ascii=False)
            k = text.index(key, pos) + len(key)
            regions.append((k, k + len(enc), label_of[role]))
            pos = k + len(enc)
    else:
        starts = []
        for role, name in zip(spec.required_keys, names):
            m = re.search(rf"^{re.escape(name)}:[ ]?", text, re.MULTILINE)
            starts.append((m.start(), m.end(), role))
        starts.sort()
        for i, (_, after, role) in enumerate(starts):
            stop = starts[i + 1][0] if i + 1 < len(starts) else len(text.rstrip("\n"))
            stop = len(text[:stop].rstrip("\n"))
            regions.append((after, stop, label_of[role]))
    regions.sort()
    out = []
    pos = 0
    for a, b, label in regions:
        if a > pos:
            out.append((pos, a, "format"))
        if b > a:
            out.append((a, b, label))
        pos = b
    if pos < len(text):
        out.append((pos, len(text), "format"))
    return out
