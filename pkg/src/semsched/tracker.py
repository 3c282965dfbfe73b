"""Two-stage log pipeline: embedding-based line filtering, then completion-based
metric extraction on the small progress subset."""

from __future__ import annotations

import statistics
from dataclasses import dataclass
from typing import Optional

from .backend import CompletionRequest, MockEmbedder
from .core import PackingConfig, TrackerConfig

# Fixed category order; also the tie-break order for equal scores.
CATEGORIES = ("PROGRESS", "INIT", "WARNING", "ERROR", "MISC")

# Descriptive texts embedded once to obtain the category vectors. Overridable;
# these defaults are tuned to the synthetic corpus vocabulary.
DEFAULT_CATEGORY_LABELS = {
    "PROGRESS": (
        "training progress step iteration loss step_time samples per second "
        "throughput eta epoch lr grad_norm"
    ),
    "INIT": (
        "initializing initialization loading building starting setup distributed "
        "process group rank environment checkpoint resume dataloader workers model "
        "weights optimizer"
    ),
    "WARNING": (
        "warning warn deprecated deprecation userwarning futurewarning fallback "
        "skipping retry"
    ),
    "ERROR": (
        "error failed failure exception traceback fatal abort crash nccl timeout "
        "cuda assert panic unreachable ecc watchdog terminated"
    ),
    "MISC": "miscellaneous unrelated output text",
}

EXTRACT_SYSTEM_PROMPT = (
    "Extract the training step metrics from the log line. Respond with a JSON "
    "object containing step_time_s (seconds, required) and step (optional)."
)


class NoMetrics(Exception):
    """No metric could be extracted; callers fall back to default behavior."""


@dataclass(frozen=True)
class LogLineClass:
    category: str
    score: float


@dataclass(frozen=True)
class MetricSample:
    step_time_s: float
    line_index: int
    step: Optional[int] = None

    def __post_init__(self):
        if self.step_time_s <= 0:
            raise ValueError("step_time_s must be positive")


@dataclass(frozen=True)
class SlowdownReport:
    tp_before: Optional[float]
    tp_after: Optional[float]
    decision: str  # KEEP | EVICT | UNTRACKABLE

    @property
    def slowdown_rate(self) -> Optional[float]:
        if self.tp_before and self.tp_after is not None:
            return self.tp_after / self.tp_before
        return None


def build_category_vectors(embedder=None, labels: Optional[dict] = None) -> list:
    """Ordered (category, vector) pairs embedded once from descriptive labels."""
    if embedder is None:
        embedder = MockEmbedder()
    labels = {**DEFAULT_CATEGORY_LABELS, **(labels or {})}
    return [(cat, embedder.embed(labels[cat])) for cat in CATEGORIES]


# Category-vector norms, keyed by array identity. The keepalive list pins the
# arrays so an id() is never reused by a different vector.
_norm_cache: dict = {}
_norm_cache_keepalive: list = []


def classify_line(line: str, embedder, category_vectors) -> LogLineClass:
    """Argmax cosine against the category vectors.

    Lines with no positive similarity to any category (e.g. empty lines) fall
    through to MISC; otherwise ties break by the fixed category order.
    """
    import numpy as np

    vec = embedder.embed(line)
    # Inlined cosine with each norm computed once per call; the expression
    # np.dot(a, b) / (na * nb) matches backend.cosine bit-for-bit.
    nv = np.linalg.norm(vec)
    best_cat, best_score = "MISC", 0.0
    if nv > 0:
        for cat, cat_vec in category_vectors:
            nc = _norm_cache.get(id(cat_vec))
            if nc is None:
                nc = np.linalg.norm(cat_vec)
                _norm_cache[id(cat_vec)] = nc
                _norm_cache_keepalive.append(cat_vec)
            if nc == 0:
                continue
            score = float(np.dot(vec, cat_vec) / (nv * nc))
            if score > best_score:
                best_cat, best_score = cat, score
    return LogLineClass(category=best_cat, score=best_score)


def extract_metrics(lines, completer, cfg: TrackerConfig, embedder=None,
                    category_vectors=None) -> list:
    """Scan PROGRESS lines newest-first, stop after N successful extractions,
    then drop median-absolute-deviation outliers.

    Returns surviving MetricSamples in chronological order; raises NoMetrics
    when nothing could be extracted.
    """
    if embedder is None:
        embedder = MockEmbedder()
    if category_vectors is None:
        category_vectors = build_category_vectors(embedder)

    progress = [
        (idx, line)
        for idx, line in enumerate(lines)
        if classify_line(line, embedder, category_vectors).category == "PROGRESS"
    ]
    samples = []
    for idx, line in reversed(progress):
        result = completer.complete(
            CompletionRequest(
                system_prompt=EXTRACT_SYSTEM_PROMPT,
                user_prompt=line,
                expected_schema_id="metric_line",
            )
        )
        if not result.ok:
            continue
        samples.append(
            MetricSample(
                step_time_s=float(result.parsed["step_time_s"]),
                line_index=idx,
                step=result.parsed.get("step"),
            )
        )
        if len(samples) >= cfg.max_metric_lines:
            break
    if not samples:
        raise NoMetrics("no progress metrics could be extracted")
    samples = _drop_outliers(samples, cfg.outlier_mad_k)
    samples.sort(key=lambda s: s.line_index)
    return samples


def _drop_outliers(samples, mad_k: float) -> list:
    values = [s.step_time_s for s in samples]
    med = statistics.median(values)
    mad = statistics.median(abs(v - med) for v in values)
    return [s for s in samples if abs(s.step_time_s - med) <= mad_k * mad]


def throughput(samples) -> float:
    """Steps per second: reciprocal of the median step time."""
    if not samples:
        raise ValueError("throughput of zero samples is undefined")
    return 1.0 / statistics.median(s.step_time_s for s in samples)


def assess_packing(log_before, log_after, steps_completed_after_pack: int,
                   completer, tracker_cfg: TrackerConfig, packing_cfg: PackingConfig,
                   embedder=None, category_vectors=None) -> SlowdownReport:
    """Compare pre/post-pack throughput and decide KEEP / EVICT / UNTRACKABLE."""
    if steps_completed_after_pack < tracker_cfg.min_steps_after_pack:
        return SlowdownReport(tp_before=None, tp_after=None, decision="UNTRACKABLE")
    try:
        before = extract_metrics(log_before, completer, tracker_cfg, embedder, category_vectors)
        after = extract_metrics(log_after, completer, tracker_cfg, embedder, category_vectors)
    except NoMetrics:
        return SlowdownReport(tp_before=None, tp_after=None, decision="UNTRACKABLE")
    tp_before = throughput(before)
    tp_after = throughput(after)
    rate = tp_after / tp_before
    decision = "EVICT" if rate < packing_cfg.slowdown_rate_threshold else "KEEP"
    return SlowdownReport(tp_before=tp_before, tp_after=tp_after, decision=decision)
