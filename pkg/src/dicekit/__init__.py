"""Toolkit for adapting LLM outputs to structured reasoning formats with a small
refiner model: dataset construction, structured-output validation, metrics and
training signals."""

from .data import (
    AdaptationExample,
    EvalOutcome,
    FormatKind,
    Provenance,
    Sample,
    StructuredRecord,
    TaskKind,
    read_examples,
    read_samples,
    write_examples,
    write_samples,
)
from .formats import FormatSpec, ParseReport, default_spec, parse, render
from .metrics import (
    ConsistencyReport,
    EvalReport,
    FreeformExtractor,
    canonicalize_answer,
    consistency_report,
    evaluate,
    judge,
)
from .signals import (
    GroupBatch,
    RewardInput,
    SegmentedTokens,
    group_advantages,
    grpo_loss,
    reward,
    segment_loss_report,
)

__version__ = "0.1.0"
