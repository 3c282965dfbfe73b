"""Failure triage: chunked binary-search localization, classification, and
recovery planning."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

from .backend import CompletionRequest, MockEmbedder
from .core import TriageConfig
from .tracker import build_category_vectors, classify_line

CLASSIFY_SYSTEM_PROMPT = (
    "Classify the failure in the log excerpt. Respond with a JSON object with "
    "error_type (INFRA, FRAMEWORK or USER_SCRIPT) and faulty_component (GPU, "
    "NVLINK, NODE, NETWORK or NONE)."
)

COMPONENT_SYSTEM_PROMPT = (
    "Identify the faulty infrastructure component in the log excerpt. Respond "
    "with a JSON object with faulty_component (GPU, NVLINK, NODE or NETWORK)."
)

RECOVERY_STEPS = (
    "RUN_DIAGNOSTIC",
    "ISOLATE_NODE",
    "PROVISION_REPLACEMENT",
    "RESTART_FROM_CHECKPOINT",
)


class NotLocated(Exception):
    """No chunk contains an error-classified line."""


@dataclass(frozen=True)
class FailureReport:
    error_type: str
    faulty_component: str
    located_line: Optional[int]
    context: tuple
    classifier_calls: int


@dataclass(frozen=True)
class RecoveryPlan:
    steps: tuple
    applicable: bool


def locate_failure(lines, cfg: TriageConfig, embedder=None, category_vectors=None,
                   chunk_predicate=None):
    """First error line via first-true binary search over fixed-size chunks.

    The log is assumed semi-sorted at chunk granularity (normal chunks, then
    error chunks). Returns (chunk_index, line_index, predicate_calls); the
    predicate is evaluated at most ceil(log2(#chunks)) + 2 times.
    """
    lines = list(lines)
    if not lines:
        raise NotLocated("empty log")
    if chunk_predicate is None:
        if embedder is None:
            embedder = MockEmbedder()
        if category_vectors is None:
            category_vectors = build_category_vectors(embedder)

        def chunk_predicate(chunk):
            return any(
                classify_line(line, embedder, category_vectors).category == "ERROR"
                for line in chunk
            )

    num_chunks = math.ceil(len(lines) / cfg.chunk_lines)
    cache = {}

    def pred(chunk_idx: int) -> bool:
        if chunk_idx not in cache:
            chunk = lines[chunk_idx * cfg.chunk_lines: (chunk_idx + 1) * cfg.chunk_lines]
            cache[chunk_idx] = bool(chunk_predicate(chunk))
        return cache[chunk_idx]

    lo, hi = 0, num_chunks - 1
    while lo < hi:
        mid = (lo + hi) // 2
        if pred(mid):
            hi = mid
        else:
            lo = mid + 1
    if not pred(lo):
        raise NotLocated("no chunk contains an error-classified line")

    start = lo * cfg.chunk_lines
    chunk = lines[start: start + cfg.chunk_lines]
    for offset, line in enumerate(chunk):
        if _line_is_error(line, embedder, category_vectors, chunk_predicate):
            return lo, start + offset, len(cache)
    # Chunk-level predicate fired without a per-line hit (custom predicates);
    # fall back to the chunk start.
    return lo, start, len(cache)


def _line_is_error(line, embedder, category_vectors, chunk_predicate) -> bool:
    if embedder is not None and category_vectors is not None:
        return classify_line(line, embedder, category_vectors).category == "ERROR"
    return chunk_predicate([line])


def classify_failure(lines, located_line: Optional[int], completer, cfg: TriageConfig,
                     classifier_calls: int = 0, max_retries: int = 2) -> FailureReport:
    """Classify the failure from a context window around the located line.

    With no located line, the last baseline_tail_lines are used instead. An
    INFRA verdict triggers a second completion for the faulty component.
    """
    lines = list(lines)
    if located_line is not None:
        half = cfg.context_window_lines // 2
        start = max(0, located_line - half)
        window = lines[start: start + cfg.context_window_lines]
    else:
        window = lines[-cfg.baseline_tail_lines:]
    if not window:
        return FailureReport("UNKNOWN", "NONE", located_line, (), classifier_calls)

    text = "\n".join(window)
    verdict = _complete_with_retries(
        completer, CLASSIFY_SYSTEM_PROMPT, text, "failure_class", max_retries
    )
    if verdict is None:
        return FailureReport("UNKNOWN", "NONE", located_line, tuple(window), classifier_calls)

    error_type = verdict["error_type"]
    component = verdict.get("faulty_component", "NONE")
    if error_type == "INFRA":
        second = _complete_with_retries(
            completer, COMPONENT_SYSTEM_PROMPT, text, "failure_component", max_retries
        )
        if second is not None:
            component = second["faulty_component"]
        elif component == "NONE":
            component = "NODE"  # conservative placeholder for an unidentified part
    else:
        component = "NONE"
    return FailureReport(error_type, component, located_line, tuple(window), classifier_calls)


def _complete_with_retries(completer, system_prompt, text, schema_id, max_retries):
    for _ in range(max_retries + 1):
        result = completer.complete(
            CompletionRequest(
                system_prompt=system_prompt,
                user_prompt=text,
                expected_schema_id=schema_id,
            )
        )
        if result.ok:
            return result.parsed
    return None


def triage(lines, completer, cfg: TriageConfig = TriageConfig(), embedder=None,
           category_vectors=None) -> FailureReport:
    """Locate-then-classify; falls back to the tail window when not located."""
    if embedder is None:
        embedder = MockEmbedder()
    if category_vectors is None:
        category_vectors = build_category_vectors(embedder)
    try:
        _chunk, line_idx, calls = locate_failure(lines, cfg, embedder, category_vectors)
    except NotLocated:
        line_idx, calls = None, 0
    return classify_failure(lines, line_idx, completer, cfg, classifier_calls=calls)


def plan_recovery(report: FailureReport) -> RecoveryPlan:
    """Four-step automated plan for INFRA failures; manual otherwise."""
    if report.error_type == "INFRA":
        return RecoveryPlan(steps=RECOVERY_STEPS, applicable=True)
    return RecoveryPlan(steps=(), applicable=False)
