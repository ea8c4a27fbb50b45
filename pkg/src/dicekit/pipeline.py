"""Run configuration and the command implementations behind the CLI."""

from __future__ import annotations

import json
import logging
import os
import time
from contextlib import contextmanager
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Iterator, Mapping, Sequence

from .builder import ConstructionConfig, ConstructionStats, construct, default_llm_recipe, default_slm_recipe
from .data import DataError, Sample, SchemaError, iter_jsonl, read_samples, write_jsonl
from .formats import FormatSpec, default_spec, load_template_spec
from .gateway import (
    SLM_ANALYZE,
    Backend,
    BackendConfig,
    Gateway,
    GatewayError,
    OpenAIChatBackend,
    PromptRecipe,
    ScriptedMock,
)
from .metrics import (
    DEFAULT_ANSWER_PATTERNS,
    ConsistencyReport,
    EvalReport,
    FreeformExtractor,
    consistency_report,
    evaluate,
    judge,
)
from .signals import (
    DEFAULT_BETA,
    DEFAULT_EPSILON,
    GroupBatch,
    RewardInput,
    SegmentedTokens,
    grpo_terms,
    reward,
    segment_loss_report,
)

log = logging.getLogger("dicekit.pipeline")


class ConfigError(ValueError):
    def __init__(self, message: str, key: str | None = None):
        self.key = key
        super().__init__(message)


# --- configuration ---------------------------------------------------------

_SECTIONS: dict[str, dict[str, Any]] = {
    "construct": {
        "samples": None, "output": None, "stats": None, "checkpoint_dir": None,
        "responses_per_sample": 5, "keep_stage2": True,
    },
    "infer": {"samples": None, "output": None},
    "evaluate": {"predictions": None, "samples": None, "output": None},
    "consistency": {
        "predictions": None, "samples": None, "output": None,
        "answer_patterns": list(DEFAULT_ANSWER_PATTERNS),
    },
    "signals": {"input": None, "output": None, "epsilon": DEFAULT_EPSILON, "beta": DEFAULT_BETA},
    "latency": {"samples": None, "runs": 5, "output": None},
}
_PATH_KEYS = {"samples", "output", "stats", "checkpoint_dir", "predictions", "input"}
_PROMPT_KEYS = {"llm_system", "llm_demonstrations", "slm_system", "slm_demonstrations"}
_TOP_KEYS = {"seed", "task", "format", "template", "llm", "slm", "prompts"} | set(_SECTIONS)
_BACKEND_KEYS = {f.name for f in fields(BackendConfig)}


def _check_keys(d: Any, allowed: set[str], where: str) -> None:
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be a JSON object", where)
    for key in d:
        if key not in allowed:
            full = f"{where}.{key}" if where else key
            raise ConfigError(f"unknown config key {full!r}", full)


@dataclass
class RunConfig:
    """A parsed, strictly validated run configuration."""

    raw: dict[str, Any]
    base_dir: Path
    seed: int = 0
    spec: FormatSpec | None = None
    llm: BackendConfig | None = None
    slm: BackendConfig | None = None
    prompts: dict[str, Any] = field(default_factory=dict)
    sections: dict[str, dict[str, Any]] = field(default_factory=dict)

    def section(self, name: str) -> dict[str, Any]:
        if name not in self.raw:
            raise ConfigError(f"config has no {name!r} section", name)
        return self.sections[name]

    def path(self, section: str, key: str, required: bool = True) -> Path | None:
        value = self.section(section).get(key)
        if value is None:
            if required:
                raise ConfigError(f"{section}.{key} is required", f"{section}.{key}")
            return None
        p = Path(value)
        return p if p.is_absolute() else self.base_dir / p

    def require_spec(self) -> FormatSpec:
        if self.spec is None:
            raise ConfigError("config needs 'task' and 'format' (or 'template')", "format")
        return self.spec

    def backend(self, which: str) -> BackendConfig:
        cfg = getattr(self, which)
        if cfg is None:
            raise ConfigError(f"config has no {which!r} backend", which)
        return cfg

    def llm_recipe(self) -> PromptRecipe:
        base = default_llm_recipe()
        return PromptRecipe(
            system_text=self.prompts.get("llm_system", base.system_text),
            demonstrations=tuple(tuple(x) for x in self.prompts.get("llm_demonstrations", ())),
        )

    def slm_recipe(self) -> PromptRecipe:
        base = default_slm_recipe(self.require_spec())
        return PromptRecipe(
            system_text=self.prompts.get("slm_system", base.system_text),
            demonstrations=tuple(tuple(x) for x in self.prompts.get("slm_demonstrations", ())),
            mode=SLM_ANALYZE,
        )


def parse_config(raw: Any, base_dir: str | Path = ".", seed: int | None = None) -> RunConfig:
    _check_keys(raw, _TOP_KEYS, "")
    cfg = RunConfig(raw=raw, base_dir=Path(base_dir))
    cfg.seed = int(raw.get("seed", 0)) if seed is None else seed
    try:
        if "template" in raw:
            if "format" in raw:
                raise ConfigError("give either 'format' or 'template', not both", "template")
            tpath = Path(raw["template"])
            cfg.spec = load_template_spec(tpath if tpath.is_absolute() else cfg.base_dir / tpath)
            if "task" in raw and raw["task"] != cfg.spec.task.value:
                raise ConfigError("'task' disagrees with the template file", "task")
        elif "format" in raw or "task" in raw:
            cfg.spec = default_spec(raw.get("task", "numeric-qa"), raw.get("format", "xml"))
    except ConfigError:
        raise
    except (ValueError, KeyError, OSError) as exc:
        raise ConfigError(f"bad format settings: {exc}", "format") from None
    for which in ("llm", "slm"):
        if which in raw:
            _check_keys(raw[which], _BACKEND_KEYS, which)
            try:
                setattr(cfg, which, BackendConfig(**raw[which]))
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{which}: {exc}", which) from None
    if "prompts" in raw:
        _check_keys(raw["prompts"], _PROMPT_KEYS, "prompts")
        cfg.prompts = dict(raw["prompts"])
    for name, defaults in _SECTIONS.items():
        if name in raw:
            _check_keys(raw[name], set(defaults), name)
            cfg.sections[name] = {**defaults, **raw[name]}
    return cfg


def load_config(path: str | Path, seed: int | None = None) -> RunConfig:
    path = Path(path)
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    return parse_config(raw, path.parent, seed)


@contextmanager
def exclusive_output(path: Path) -> Iterator[None]:
    """Hold ``<path>.lock`` (created exclusively) while writing ``path``."""
    path.parent.mkdir(parents=True, exist_ok=True)
    lock = path.with_name(path.name + ".lock")
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise DataError(f"{path} is being written by another run (remove {lock} if stale)") from None
    os.close(fd)
    try:
        yield
    finally:
        lock.unlink(missing_ok=True)


def write_json(path: Path, obj: Any) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, indent=2, ensure_ascii=False)
        fh.write("\n")
    os.replace(tmp, path)


def make_backends(mock: ScriptedMock | None) -> tuple[Backend, Backend]:
    if mock is not None:
        return mock, mock
    http = OpenAIChatBackend()
    return http, http


# --- construct -------------------------------------------------------------


def run_construct(cfg: RunConfig, mock: ScriptedMock | None = None) -> ConstructionStats:
    sec = cfg.section("construct")
    samples = read_samples(cfg.path("construct", "samples"))
    out = cfg.path("construct", "output")
    ccfg = ConstructionConfig(
        llm=cfg.backend("llm"),
        slm=cfg.backend("slm"),
        spec=cfg.require_spec(),
        responses_per_sample=int(sec["responses_per_sample"]),
        keep_stage2=bool(sec["keep_stage2"]),
        seed=cfg.seed,
        llm_recipe=cfg.llm_recipe(),
        slm_recipe=cfg.slm_recipe(),
    )
    llm_backend, slm_backend = make_backends(mock)
    with exclusive_output(out):
        return construct(
            samples,
            ccfg,
            llm_backend,
            slm_backend,
            out,
            stats_path=cfg.path("construct", "stats", required=False),
            checkpoint_dir=cfg.path("construct", "checkpoint_dir", required=False),
        )


# --- infer -----------------------------------------------------------------


@dataclass(frozen=True)
class Prediction:
    sample_id: str
    llm_output: str | None
    structured_output: str | None
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None

    def to_dict(self) -> dict[str, Any]:
        return {
            "sample_id": self.sample_id,
            "status": "ok" if self.ok else "failed",
            "llm_output": self.llm_output,
            "structured_output": self.structured_output,
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> Prediction:
        return cls(d["sample_id"], d.get("llm_output"), d.get("structured_output"), d.get("error"))


def infer_one(
    sample: Sample,
    llm: Gateway,
    slm: Gateway,
    llm_recipe: PromptRecipe,
    slm_recipe: PromptRecipe,
) -> Prediction:
    """LLM answers freely, then the SLM analyzes that answer and writes the structured output.

    Raises :class:`GatewayError` on backend failure.
    """
    y_o = llm.complete(llm_recipe, sample.question, n=1)[0]
    structured = slm.complete(slm_recipe, sample.question, context=y_o, n=1)[0]
    return Prediction(sample.id, y_o, structured)


def infer(
    samples: Sequence[Sample],
    llm: Gateway,
    slm: Gateway,
    llm_recipe: PromptRecipe,
    slm_recipe: PromptRecipe,
) -> list[Prediction]:
    """Run inference per sample; backend failures become failed rows, not exceptions."""

    def run(sample: Sample) -> Prediction:
        y_o = None
        try:
            y_o = llm.complete(llm_recipe, sample.question, n=1)[0]
            structured = slm.complete(slm_recipe, sample.question, context=y_o, n=1)[0]
        except GatewayError as exc:
            log.warning("sample failed", extra={"sample_id": sample.id, "error": str(exc)})
            return Prediction(sample.id, y_o, None, f"{type(exc).__name__}: {exc}")
        return Prediction(sample.id, y_o, structured)

    return llm.map(run, list(samples))


def _gateways(cfg: RunConfig, mock: ScriptedMock | None) -> tuple[Gateway, Gateway]:
    llm_backend, slm_backend = make_backends(mock)
    return (
        Gateway(cfg.backend("llm"), llm_backend, seed=cfg.seed),
        Gateway(cfg.backend("slm"), slm_backend, seed=cfg.seed),
    )


def run_infer(cfg: RunConfig, mock: ScriptedMock | None = None) -> list[Prediction]:
    samples = read_samples(cfg.path("infer", "samples"))
    out = cfg.path("infer", "output")
    llm, slm = _gateways(cfg, mock)
    preds = infer(samples, llm, slm, cfg.llm_recipe(), cfg.slm_recipe())
    with exclusive_output(out):
        write_jsonl(out, (p.to_dict() for p in preds))
    return preds


# --- evaluate / consistency -----------------------------------------------


def read_predictions(path: Path) -> list[Prediction]:
    preds = []
    seen: set[str] = set()
    for lineno, d in iter_jsonl(path):
        if not isinstance(d, dict) or not isinstance(d.get("sample_id"), str):
            raise SchemaError(lineno, "sample_id", "missing")
        if d["sample_id"] in seen:
            raise DataError(f"duplicate prediction id {d['sample_id']!r} at line {lineno}")
        seen.add(d["sample_id"])
        preds.append(Prediction.from_dict(d))
    return preds


def align(samples: Sequence[Sample], preds: Sequence[Prediction]) -> list[tuple[Sample, Prediction | None]]:
    """Pair every sample with its prediction (None when missing); orphans are an error."""
    ids = {s.id for s in samples}
    orphans = sorted(p.sample_id for p in preds if p.sample_id not in ids)
    if orphans:
        raise DataError(f"predictions without a sample: {orphans}")
    by_id = {p.sample_id: p for p in preds}
    return [(s, by_id.get(s.id)) for s in samples]


def run_evaluate(cfg: RunConfig) -> EvalReport:
    samples = read_samples(cfg.path("evaluate", "samples"))
    preds = read_predictions(cfg.path("evaluate", "predictions"))
    pairs = align(samples, preds)
    report = evaluate(
        [(s, p.structured_output if p is not None else None) for s, p in pairs],
        cfg.require_spec(),
    )
    out = cfg.path("evaluate", "output", required=False)
    if out is not None:
        with exclusive_output(out):
            write_json(out, report.to_dict())
    return report


def consistency_from_predictions(
    pairs: Sequence[tuple[Sample, Prediction | None]],
    spec: FormatSpec,
    extractor: FreeformExtractor | None = None,
) -> ConsistencyReport:
    extractor = extractor or FreeformExtractor()
    llm_ok, slm_ok = [], []
    for sample, pred in pairs:
        llm_ok.append(pred is not None and extractor.is_correct(pred.llm_output, sample))
        text = pred.structured_output if pred is not None else None
        slm_ok.append(judge(text, sample, spec).content_correct)
    return consistency_report(llm_ok, slm_ok)


def run_consistency(cfg: RunConfig) -> ConsistencyReport:
    sec = cfg.section("consistency")
    samples = read_samples(cfg.path("consistency", "samples"))
    preds = read_predictions(cfg.path("consistency", "predictions"))
    extractor = FreeformExtractor(patterns=tuple(sec["answer_patterns"]))
    report = consistency_from_predictions(align(samples, preds), cfg.require_spec(), extractor)
    out = cfg.path("consistency", "output", required=False)
    if out is not None:
        with exclusive_output(out):
            write_json(out, report.to_dict())
    return report


# --- signals ---------------------------------------------------------------


def signals_row(d: Mapping[str, Any], epsilon: float, beta: float) -> dict[str, Any]:
    """Compute one batch row.

    A row is either a GRPO group (``rewards`` or ``reward_inputs``, plus
    ``ratios`` and ``kl_terms``) or an SFT segmentation
    (``neg_log_probs`` with ``segment_labels``).
    """
    if "neg_log_probs" in d:
        return segment_loss_report(SegmentedTokens(d["neg_log_probs"], d["segment_labels"])).to_dict()
    if "reward_inputs" in d:
        rewards = [reward(RewardInput(bool(f), bool(a))) for f, a in d["reward_inputs"]]
    else:
        rewards = d["rewards"]
    batch = GroupBatch(
        rewards=rewards,
        ratios=d["ratios"],
        kl_terms=d["kl_terms"],
        epsilon=d.get("epsilon", epsilon),
        beta=d.get("beta", beta),
    )
    terms = grpo_terms(batch)
    return {
        "loss": terms.loss,
        "rewards": list(batch.rewards),
        "advantages": terms.advantages.tolist(),
        "n_clipped": int(terms.clipped.sum()),
    }


def run_signals(cfg: RunConfig) -> list[dict[str, Any]]:
    sec = cfg.section("signals")
    out_rows = []
    for lineno, d in iter_jsonl(cfg.path("signals", "input")):
        try:
            out_rows.append(signals_row(d, float(sec["epsilon"]), float(sec["beta"])))
        except KeyError as exc:
            raise SchemaError(lineno, exc.args[0], "missing") from None
        except (ValueError, TypeError) as exc:
            raise SchemaError(lineno, "<row>", str(exc)) from None
    out = cfg.path("signals", "output")
    with exclusive_output(out):
        write_jsonl(out, out_rows)
    return out_rows


# --- latency ---------------------------------------------------------------


@dataclass(frozen=True)
class LatencyReport:
    n_samples: int
    runs: int
    per_run_means: tuple[float, ...]
    failed_runs: int = 0

    @property
    def mean_seconds_per_sample(self) -> float:
        if not self.per_run_means:
            return float("nan")
        return sum(self.per_run_means) / len(self.per_run_means)

    def to_dict(self) -> dict[str, Any]:
        return {
            "n_samples": self.n_samples,
            "runs": self.runs,
            "failed_runs": self.failed_runs,
            "per_run_means": list(self.per_run_means),
            "mean_seconds_per_sample": self.mean_seconds_per_sample,
        }


def measure_latency(
    samples: Sequence[Sample],
    llm: Gateway,
    slm: Gateway,
    llm_recipe: PromptRecipe,
    slm_recipe: PromptRecipe,
    runs: int = 5,
    before_run: Any = None,
    clock: Any = time.perf_counter,
) -> LatencyReport:
    """Time the full inference path, sample by sample, ``runs`` times.

    Each run's figure is wall-clock seconds per sample; the report mean is
    the mean over runs. A run hit by a backend error is dropped with a warning.
    """
    if runs < 1 or not samples:
        raise ValueError("need runs >= 1 and at least one sample")
    means = []
    failed = 0
    for run in range(runs):
        if before_run is not None:
            before_run()
        total = 0.0
        try:
            for sample in samples:
                t0 = clock()
                infer_one(sample, llm, slm, llm_recipe, slm_recipe)
                total += clock() - t0
        except GatewayError as exc:
            failed += 1
            log.warning("latency run dropped", extra={"run": run, "error": str(exc)})
            continue
        means.append(total / len(samples))
    return LatencyReport(len(samples), runs, tuple(means), failed)


def run_latency(cfg: RunConfig, mock: ScriptedMock | None = None) -> LatencyReport:
    sec = cfg.section("latency")
    samples = read_samples(cfg.path("latency", "samples"))
    llm, slm = _gateways(cfg, mock)
    report = measure_latency(
        samples,
        llm,
        slm,
        cfg.llm_recipe(),
        cfg.slm_recipe(),
        runs=int(sec["runs"]),
        before_run=mock.reset if mock is not None else None,
    )
    out = cfg.path("latency", "output", required=False)
    if out is not None:
        with exclusive_output(out):
            write_json(out, report.to_dict())
    return report
