"""Helpers that register canned completions on a :class:`ScriptedMock`.

Fingerprints depend on the exact prompt, so scripts are easiest to write by
replaying the same prompt assembly the pipeline uses.
"""

from __future__ import annotations

from dataclasses import replace
from typing import Sequence

from .builder import ConstructionConfig, hint_text
from .data import Sample
from .gateway import BackendConfig, PromptRecipe, ScriptedMock, build_prompt


def script_llm(
    mock: ScriptedMock, model: BackendConfig, recipe: PromptRecipe, sample: Sample, outputs: Sequence[str]
) -> str:
    """One request for ``len(outputs)`` free-form completions of ``sample``."""
    return mock.register(model.model_name, build_prompt(recipe, sample.question), outputs)


def script_slm(
    mock: ScriptedMock,
    model: BackendConfig,
    recipe: PromptRecipe,
    sample: Sample,
    llm_output: str,
    completion: str,
    with_hint: bool = False,
) -> str:
    if with_hint:
        recipe = replace(recipe, hint=hint_text(sample))
    return mock.register(model.model_name, build_prompt(recipe, sample.question, llm_output), [completion])


def script_construction(
    mock: ScriptedMock,
    config: ConstructionConfig,
    sample: Sample,
    llm_outputs: Sequence[str],
    stage1: Sequence[str],
    stage2: Sequence[str | None] = (),
) -> None:
    """Script one sample's whole construction path.

    ``stage1[i]`` answers the SLM call for ``llm_outputs[i]``; ``stage2[i]``
    (when given and not None) answers the hinted retry of the same row.
    """
    script_llm(mock, config.llm, config.llm_recipe, sample, llm_outputs)
    for i, y_o in enumerate(llm_outputs):
        script_slm(mock, config.slm, config.slm_recipe, sample, y_o, stage1[i])
        if i < len(stage2) and stage2[i] is not None:
            script_slm(mock, config.slm, config.slm_recipe, sample, y_o, stage2[i], with_hint=True)


def script_inference(
    mock: ScriptedMock,
    llm: BackendConfig,
    slm: BackendConfig,
    llm_recipe: PromptRecipe,
    slm_recipe: PromptRecipe,
    sample: Sample,
    llm_output: str,
    structured_output: str,
) -> None:
    script_llm(mock, llm, llm_recipe, sample, [llm_output])
    script_slm(mock, slm, slm_recipe, sample, llm_output, structured_output)
