"""Iterative rubric refinement for LLM essay scoring.

The heavy lifting lives in the C++ core; this package re-exports it.
Structured values (QWK reports, presets, run records) come back as plain
dicts and lists.
"""

from ._core import (
    BackendError,
    ConfigError,
    DataError,
    IoError,
    aggregate,
    extract_rubric,
    load_corpus,
    map_score,
    model_preset,
    model_preset_names,
    parse_rating,
    qwk,
    qwk_on_labels,
    qwk_with_exclusions,
    refine_scripted,
    render_refinement_prompt,
    render_scoring_prompt,
    run_cli,
    seed_rubric,
    toefl_scale,
)

__all__ = [
    "BackendError",
    "ConfigError",
    "DataError",
    "IoError",
    "aggregate",
    "extract_rubric",
    "load_corpus",
    "map_score",
    "model_preset",
    "model_preset_names",
    "parse_rating",
    "qwk",
    "qwk_on_labels",
    "qwk_with_exclusions",
    "refine_scripted",
    "render_refinement_prompt",
    "render_scoring_prompt",
    "run_cli",
    "seed_rubric",
    "toefl_scale",
]
