"""Shared domain types, trace/cluster/config file schemas, and metric formulas.

Trace CSV columns (header required, order fixed for the canonical set):

    job_id,user,job_name,submit_time,num_gpus,true_duration,final_status,
    sm_util_steady,warmup_seconds,logs_progress
    [,sm_util_warmup,metadata_path,log_path,failure_offsets,failure_kinds,
     slowdown_buckets]

Optional columns may be omitted entirely or left empty per row.
``failure_offsets`` is ``;``-separated integer work offsets;
``failure_kinds`` is ``;``-separated ``CATEGORY`` or ``CATEGORY:COMPONENT``;
``slowdown_buckets`` is ``;``-separated ``decade=retention`` entries where
decade indexes co-runner SM utilization in tens (0 covers 0-9, ..., 10 covers
exactly 100) and retention is a throughput-retention factor in (0,1].
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Optional

import yaml


class TraceError(ValueError):
    """Raised for malformed or inconsistent trace files."""


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

FINAL_STATUSES = ("COMPLETED", "FAILED", "CANCELED")
FAILURE_CATEGORIES = ("INFRA", "FRAMEWORK", "USER_SCRIPT")
FAILURE_COMPONENTS = ("GPU", "NVLINK", "NODE", "NETWORK", "NONE")


@dataclass(frozen=True)
class FailureKind:
    category: str
    component: str = "NONE"

    def __post_init__(self):
        if self.category not in FAILURE_CATEGORIES:
            raise ValueError(f"unknown failure category {self.category!r}")
        if self.component not in FAILURE_COMPONENTS:
            raise ValueError(f"unknown failure component {self.component!r}")
        if (self.component != "NONE") != (self.category == "INFRA"):
            raise ValueError("component must be set iff category is INFRA")


@dataclass(frozen=True)
class JobSpec:
    job_id: str
    user: str
    job_name: str
    submit_time: int
    num_gpus: int
    workdir: Optional[str] = None
    launch_command: Optional[str] = None
    log_path: Optional[str] = None
    metadata_path: Optional[str] = None

    def __post_init__(self):
        if self.num_gpus < 1:
            raise ValueError(f"num_gpus must be >= 1, got {self.num_gpus}")
        if self.submit_time < 0:
            raise ValueError(f"submit_time must be >= 0, got {self.submit_time}")


@dataclass(frozen=True)
class JobTruth:
    true_duration: int
    final_status: str
    sm_util_steady: float
    sm_util_warmup: float
    warmup_seconds: int
    logs_progress: bool
    failure_events: tuple = ()  # of (offset_seconds, FailureKind)
    pack_slowdown_table: dict = field(default_factory=dict)  # decade -> Fraction

    def __post_init__(self):
        if self.true_duration <= 0:
            raise ValueError("true_duration must be > 0")
        if self.final_status not in FINAL_STATUSES:
            raise ValueError(f"unknown final status {self.final_status!r}")
        if not (0 <= self.sm_util_steady <= 100 and 0 <= self.sm_util_warmup <= 100):
            raise ValueError("SM utilization must be in [0,100]")
        if not (0 <= self.warmup_seconds < self.true_duration):
            raise ValueError("warmup_seconds must be in [0, true_duration)")
        for offset, kind in self.failure_events:
            if not (0 <= offset < self.true_duration):
                raise ValueError(f"failure offset {offset} out of range")
            if not isinstance(kind, FailureKind):
                raise ValueError("failure_events entries must carry a FailureKind")
        for decade, retention in self.pack_slowdown_table.items():
            if not (0 <= int(decade) <= 10):
                raise ValueError(f"slowdown bucket {decade} out of range")
            if not (0 < retention <= 1):
                raise ValueError(f"retention {retention} outside (0,1]")

    def retention_for(self, co_runner_util: float) -> Fraction:
        """Throughput retention when packed with a co-runner at the given SM util."""
        decade = min(int(co_runner_util) // 10, 10)
        return self.pack_slowdown_table.get(decade, Fraction(1))


_MANDATORY_METADATA = {
    "model_config": ("model_name", "task_type"),
    "training_config": ("iters", "iter_type"),
    "dataset_config": ("train", "valid"),
}


@dataclass(frozen=True)
class WorkloadMetadata:
    """Structured semantic fingerprint of a workload, extracted from source code.

    Each section holds its mandatory fields plus free-form extras. Mandatory
    fields must be present and non-empty.
    """

    model_config: dict
    training_config: dict
    dataset_config: dict

    def __post_init__(self):
        for section, keys in _MANDATORY_METADATA.items():
            doc = getattr(self, section)
            if not isinstance(doc, dict):
                raise ValueError(f"{section} must be a mapping")
            for key in keys:
                value = doc.get(key)
                if value is None or str(value).strip() == "":
                    raise ValueError(f"mandatory field {section}.{key} missing or empty")
        iters = self.training_config["iters"]
        try:
            if int(str(iters)) != float(iters):
                raise ValueError
        except (TypeError, ValueError):
            raise ValueError(
                f"training_config.iters must be an integer, got {iters!r}"
            ) from None

    def canonical(self) -> "WorkloadMetadata":
        """Canonical form: sorted keys, string values, lowercased enum fields."""
        def canon(section: str, doc: dict) -> dict:
            out = {}
            for key in sorted(doc, key=str):
                value = doc[key]
                text = str(value).strip()
                if (section, key) in (
                    ("model_config", "task_type"),
                    ("training_config", "iter_type"),
                ):
                    text = text.lower()
                out[str(key)] = text
            return out

        return WorkloadMetadata(
            model_config=canon("model_config", self.model_config),
            training_config=canon("training_config", self.training_config),
            dataset_config=canon("dataset_config", self.dataset_config),
        )

    def canonical_text(self) -> str:
        """Deterministic text rendering used for embedding."""
        canon = self.canonical()
        lines = []
        for section in ("dataset_config", "model_config", "training_config"):
            lines.append(section)
            for key, value in getattr(canon, section).items():
                lines.append(f"  {key}: {value}")
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {
            "model_config": dict(self.model_config),
            "training_config": dict(self.training_config),
            "dataset_config": dict(self.dataset_config),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "WorkloadMetadata":
        return cls(
            model_config=dict(doc.get("model_config", {})),
            training_config=dict(doc.get("training_config", {})),
            dataset_config=dict(doc.get("dataset_config", {})),
        )


def load_metadata(path) -> WorkloadMetadata:
    import json

    with open(path) as f:
        return WorkloadMetadata.from_dict(json.load(f))


def save_metadata(md: WorkloadMetadata, path) -> None:
    import json

    Path(path).write_text(json.dumps(md.to_dict(), indent=2, sort_keys=True) + "\n")


ESTIMATE_SOURCES = ("RETRIEVAL", "FALLBACK_MODEL", "PROFILED", "ORACLE")


@dataclass(frozen=True)
class Estimate:
    duration_s: float
    sm_util: float
    source: str
    matched_job_ids: tuple = ()

    def __post_init__(self):
        if self.duration_s <= 0:
            raise ValueError("duration_s must be positive")
        if not (0 <= self.sm_util <= 100):
            raise ValueError("sm_util must be in [0,100]")
        if self.source not in ESTIMATE_SOURCES:
            raise ValueError(f"unknown estimate source {self.source!r}")
        if self.source == "RETRIEVAL" and not self.matched_job_ids:
            raise ValueError("RETRIEVAL estimates must carry matched_job_ids")


@dataclass(frozen=True)
class JobRecord:
    """Per-job completion record emitted by the simulator."""

    job_id: str
    submit_time: int
    queue_s: int
    run_s: int
    restarts: int
    evictions: int
    final_status: str

    @property
    def jct_s(self) -> int:
        return self.queue_s + self.run_s


@dataclass(frozen=True)
class SimReport:
    per_job: tuple  # of JobRecord
    avg_jct_s: float
    p99_jct_s: float
    makespan_s: int
    avg_queue_s: float
    jct_cdf: tuple  # of (jct_s, cumulative_fraction)


# ---------------------------------------------------------------------------
# Configs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AdvisorConfig:
    similarity_threshold: float = 0.80
    top_k: int = 3

    def __post_init__(self):
        if not (0 <= self.similarity_threshold <= 1):
            raise ValueError("similarity_threshold must be in [0,1]")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")


@dataclass(frozen=True)
class TrackerConfig:
    max_metric_lines: int = 8
    outlier_mad_k: float = 3.0
    min_steps_after_pack: int = 30

    def __post_init__(self):
        if self.max_metric_lines < 1:
            raise ValueError("max_metric_lines must be >= 1")
        if self.outlier_mad_k <= 0:
            raise ValueError("outlier_mad_k must be > 0")
        if self.min_steps_after_pack < 1:
            raise ValueError("min_steps_after_pack must be >= 1")


@dataclass(frozen=True)
class TriageConfig:
    chunk_lines: int = 64
    context_window_lines: int = 200
    baseline_tail_lines: int = 500

    def __post_init__(self):
        if self.chunk_lines < 1:
            raise ValueError("chunk_lines must be >= 1")
        if self.context_window_lines < 1:
            raise ValueError("context_window_lines must be >= 1")
        if self.baseline_tail_lines < 1:
            raise ValueError("baseline_tail_lines must be >= 1")


@dataclass(frozen=True)
class PackingConfig:
    slowdown_rate_threshold: float = 0.5
    pack_util_cap: float = 80.0
    no_repack_evicted: bool = True

    def __post_init__(self):
        if not (0 < self.slowdown_rate_threshold < 1):
            raise ValueError("slowdown_rate_threshold must be in (0,1)")
        if not (0 < self.pack_util_cap <= 200):
            raise ValueError("pack_util_cap out of range")


@dataclass(frozen=True)
class SimConfig:
    profiling_seconds: int = 100
    checkpoint_interval_s: int = 600
    manual_recovery_delay_s: int = 7200
    auto_recovery_delay_s: int = 300
    detection_rate: float = 1.0
    rng_seed: int = 0
    nominal_step_time_s: float = 1.0

    def __post_init__(self):
        if self.profiling_seconds < 0:
            raise ValueError("profiling_seconds must be >= 0")
        if self.checkpoint_interval_s < 1:
            raise ValueError("checkpoint_interval_s must be >= 1")
        if not (0 <= self.detection_rate <= 1):
            raise ValueError("detection_rate must be in [0,1]")
        if self.nominal_step_time_s <= 0:
            raise ValueError("nominal_step_time_s must be > 0")


@dataclass(frozen=True)
class ClusterSpec:
    nodes: int
    gpus_per_node: int

    def __post_init__(self):
        if self.nodes < 1 or self.gpus_per_node < 1:
            raise ValueError("cluster must have >= 1 node and >= 1 GPU per node")

    @property
    def total_gpus(self) -> int:
        return self.nodes * self.gpus_per_node


def load_cluster(path) -> ClusterSpec:
    with open(path) as f:
        doc = yaml.safe_load(f)
    if not isinstance(doc, dict) or "nodes" not in doc or "gpus_per_node" not in doc:
        raise ValueError(f"cluster spec {path} must define nodes and gpus_per_node")
    return ClusterSpec(nodes=int(doc["nodes"]), gpus_per_node=int(doc["gpus_per_node"]))


def save_cluster(spec: ClusterSpec, path) -> None:
    Path(path).write_text(
        yaml.safe_dump({"nodes": spec.nodes, "gpus_per_node": spec.gpus_per_node})
    )


# ---------------------------------------------------------------------------
# Trace parsing / serialization
# ---------------------------------------------------------------------------

TRACE_REQUIRED_COLUMNS = [
    "job_id",
    "user",
    "job_name",
    "submit_time",
    "num_gpus",
    "true_duration",
    "final_status",
    "sm_util_steady",
    "warmup_seconds",
    "logs_progress",
]

TRACE_OPTIONAL_COLUMNS = [
    "sm_util_warmup",
    "metadata_path",
    "log_path",
    "failure_offsets",
    "failure_kinds",
    "slowdown_buckets",
]

TRACE_COLUMNS = TRACE_REQUIRED_COLUMNS + TRACE_OPTIONAL_COLUMNS

_BOOL_MAP = {"true": True, "1": True, "yes": True, "false": False, "0": False, "no": False}


def _parse_bool(text: str, row_num: int, column: str) -> bool:
    try:
        return _BOOL_MAP[text.strip().lower()]
    except KeyError:
        raise TraceError(f"row {row_num}, column {column}: bad boolean {text!r}") from None


def _parse_failures(offsets: str, kinds: str, row_num: int):
    if not offsets.strip():
        return ()
    offset_parts = [p for p in offsets.split(";") if p.strip()]
    kind_parts = [p for p in kinds.split(";") if p.strip()]
    if len(offset_parts) != len(kind_parts):
        raise TraceError(
            f"row {row_num}, column failure_kinds: "
            f"{len(kind_parts)} kinds for {len(offset_parts)} offsets"
        )
    events = []
    for off_text, kind_text in zip(offset_parts, kind_parts):
        try:
            offset = int(off_text)
        except ValueError:
            raise TraceError(
                f"row {row_num}, column failure_offsets: bad offset {off_text!r}"
            ) from None
        category, _, component = kind_text.partition(":")
        try:
            kind = FailureKind(category.strip(), component.strip() or "NONE")
        except ValueError as exc:
            raise TraceError(f"row {row_num}, column failure_kinds: {exc}") from None
        events.append((offset, kind))
    return tuple(events)


def _parse_slowdown(text: str, row_num: int) -> dict:
    table = {}
    if not text.strip():
        return table
    for part in text.split(";"):
        if not part.strip():
            continue
        decade_text, _, retention_text = part.partition("=")
        try:
            decade = int(decade_text)
            retention = Fraction(retention_text.strip())
        except (ValueError, ZeroDivisionError):
            raise TraceError(
                f"row {row_num}, column slowdown_buckets: bad entry {part!r}"
            ) from None
        table[decade] = retention
    return table


def parse_trace(path) -> list:
    """Parse a trace CSV into a list of (JobSpec, JobTruth), in file order."""
    with open(path, newline="") as f:
        return parse_trace_text(f.read(), name=str(path))


def parse_trace_text(text: str, name: str = "<trace>") -> list:
    reader = csv.DictReader(io.StringIO(text))
    header = reader.fieldnames
    if header is None:
        raise TraceError(f"{name}: empty file, header row required")
    missing = [c for c in TRACE_REQUIRED_COLUMNS if c not in header]
    if missing:
        raise TraceError(f"{name}: header missing required columns {missing}")

    jobs = []
    seen_ids = set()
    for row_num, row in enumerate(reader, start=2):
        def col(name_: str, default: str = "") -> str:
            value = row.get(name_)
            return default if value is None else value

        job_id = col("job_id").strip()
        if not job_id:
            raise TraceError(f"row {row_num}, column job_id: empty")
        if job_id in seen_ids:
            raise TraceError(f"row {row_num}, column job_id: duplicate id {job_id!r}")
        seen_ids.add(job_id)

        def intcol(name_: str) -> int:
            try:
                return int(col(name_))
            except ValueError:
                raise TraceError(
                    f"row {row_num}, column {name_}: bad integer {col(name_)!r}"
                ) from None

        def floatcol(name_: str, default: Optional[float] = None) -> float:
            text_ = col(name_).strip()
            if not text_ and default is not None:
                return default
            try:
                return float(text_)
            except ValueError:
                raise TraceError(
                    f"row {row_num}, column {name_}: bad number {text_!r}"
                ) from None

        try:
            spec = JobSpec(
                job_id=job_id,
                user=col("user"),
                job_name=col("job_name"),
                submit_time=intcol("submit_time"),
                num_gpus=intcol("num_gpus"),
                metadata_path=col("metadata_path").strip() or None,
                log_path=col("log_path").strip() or None,
            )
            steady = floatcol("sm_util_steady")
            truth = JobTruth(
                true_duration=intcol("true_duration"),
                final_status=col("final_status").strip(),
                sm_util_steady=steady,
                sm_util_warmup=floatcol("sm_util_warmup", default=steady),
                warmup_seconds=intcol("warmup_seconds"),
                logs_progress=_parse_bool(col("logs_progress"), row_num, "logs_progress"),
                failure_events=_parse_failures(
                    col("failure_offsets"), col("failure_kinds"), row_num
                ),
                pack_slowdown_table=_parse_slowdown(col("slowdown_buckets"), row_num),
            )
        except TraceError:
            raise
        except ValueError as exc:
            raise TraceError(f"row {row_num}: {exc}") from None
        jobs.append((spec, truth))
    return jobs


def serialize_trace(jobs, path=None) -> str:
    """Serialize (JobSpec, JobTruth) pairs to the canonical CSV column set."""
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(TRACE_COLUMNS)
    for spec, truth in jobs:
        offsets = ";".join(str(off) for off, _ in truth.failure_events)
        kinds = ";".join(
            k.category if k.component == "NONE" else f"{k.category}:{k.component}"
            for _, k in truth.failure_events
        )
        slowdown = ";".join(
            f"{decade}={retention}" for decade, retention in sorted(truth.pack_slowdown_table.items())
        )
        writer.writerow(
            [
                spec.job_id,
                spec.user,
                spec.job_name,
                spec.submit_time,
                spec.num_gpus,
                truth.true_duration,
                truth.final_status,
                _fmt_num(truth.sm_util_steady),
                truth.warmup_seconds,
                "true" if truth.logs_progress else "false",
                _fmt_num(truth.sm_util_warmup),
                spec.metadata_path or "",
                spec.log_path or "",
                offsets,
                kinds,
                slowdown,
            ]
        )
    text = out.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


def _fmt_num(x: float) -> str:
    return str(int(x)) if float(x).is_integer() else repr(float(x))


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def compute_report(records) -> SimReport:
    """Aggregate per-job completion records into a SimReport.

    p99 uses the nearest-rank method: the value at the ceil(0.99*n)-th order
    statistic. The CDF is emitted at every distinct JCT value.
    """
    records = tuple(records)
    if not records:
        raise ValueError("cannot compute a report over zero jobs")
    for rec in records:
        if rec.queue_s < 0 or rec.run_s <= 0:
            raise ValueError(f"job {rec.job_id}: queue_s >= 0 and run_s > 0 required")
    jcts = sorted(rec.jct_s for rec in records)
    n = len(jcts)
    avg_jct = sum(jcts) / n
    p99 = jcts[math.ceil(0.99 * n) - 1]
    avg_queue = sum(rec.queue_s for rec in records) / n
    cdf = []
    for i, value in enumerate(jcts, start=1):
        if i == n or jcts[i] != value:
            cdf.append((value, i / n))
    return SimReport(
        per_job=records,
        avg_jct_s=avg_jct,
        p99_jct_s=float(p99),
        makespan_s=max(rec.submit_time + rec.jct_s for rec in records),
        avg_queue_s=avg_queue,
        jct_cdf=tuple(cdf),
    )


def rmsre(pairs) -> float:
    """Root mean squared relative error over (estimate, truth) pairs."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("rmsre over an empty list is undefined")
    total = 0.0
    for est, truth in pairs:
        if truth <= 0:
            raise ValueError(f"truth values must be positive, got {truth}")
        total += ((est - truth) / truth) ** 2
    return math.sqrt(total / len(pairs))
