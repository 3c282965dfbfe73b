"""Scheduling policy suite behind one interface.

Baselines: FIFO, oracle SJF, QSSF-style history-mean SJF, two-level
least-attained-service (preemptive). Packing schedulers: a profiling+packing
baseline with a calibrated noisy duration estimator ("packing"), its
semantically enhanced variant with profiling bypass and interference-aware
eviction ("packing-semantic"), and a standalone semantic SJF scheduler with
optional automated failure recovery ("semantic-sjf" / "semantic-sjf-nofh").
"""

from __future__ import annotations

import math
import random
from fractions import Fraction
from typing import Optional

from .advisor import Advisor, NoSimilarJobs
from .backend import FAILURE_PHRASES, JobOutcome, MockCompleter, MockEmbedder
from .core import (
    AdvisorConfig,
    FailureKind,
    PackingConfig,
    TrackerConfig,
    TriageConfig,
    load_metadata,
)
from .failures import triage
from .tracker import assess_packing, build_category_vectors


# ---------------------------------------------------------------------------
# Ordering primitives
# ---------------------------------------------------------------------------


def fifo_order(queue) -> list:
    """Stable order by (submit_time, job_id)."""
    return sorted(queue, key=lambda j: (j.spec.submit_time, j.job_id))


def sjf_order(queue, duration_of, fallback: Optional[float] = None) -> list:
    """Ascending by estimated duration; jobs without an estimate use the
    fallback value, or sort last when there is no history at all. Ties break
    FIFO."""

    def key(job):
        duration = duration_of(job)
        if duration is None:
            duration = fallback
        if duration is None:
            return (1, 0.0, job.spec.submit_time, job.job_id)
        return (0, float(duration), job.spec.submit_time, job.job_id)

    return sorted(queue, key=key)


def qssf_estimate(user: str, job_name: str, history,
                  default: float = 3600.0) -> float:
    """Mean duration of prior (user, job_name) runs, falling back to the user
    mean, then the global mean, then a config default."""
    name_matches = [d for u, n, d in history if u == user and n == job_name]
    if name_matches:
        return sum(name_matches) / len(name_matches)
    user_matches = [d for u, _n, d in history if u == user]
    if user_matches:
        return sum(user_matches) / len(user_matches)
    if history:
        return sum(d for _u, _n, d in history) / len(history)
    return default


def las_priority(attained_gpu_seconds, threshold) -> str:
    """Two-level least-attained-service class."""
    return "HIGH" if attained_gpu_seconds < threshold else "LOW"


def effective_runtime(truth) -> float:
    """Wall work-seconds a job performs before its terminal event."""
    if truth.final_status == "FAILED" and truth.failure_events:
        for offset, kind in truth.failure_events:
            if kind.category != "INFRA":
                return float(offset)
        return float(truth.failure_events[-1][0])
    return float(truth.true_duration)


# ---------------------------------------------------------------------------
# Policy interface
# ---------------------------------------------------------------------------


class Policy:
    name = "base"
    profiles = False
    packs = False
    preemptive = False
    failure_handling = False
    eviction_checks = False
    promotion_threshold = 3200  # GPU-seconds; LAS policies only
    tracker_cfg = TrackerConfig()
    packing_cfg = PackingConfig()

    def on_arrival(self, job, sim) -> None:
        pass

    def wants_profile(self, job, sim) -> bool:
        return False

    def order_queue(self, queued, sim) -> list:
        return fifo_order(queued)

    def can_pack(self, host, guest, sim) -> bool:
        return False

    def pack_host_key(self, host, sim):
        return 0

    def eviction_decision(self, host, guest, sim) -> str:
        return "KEEP"

    def classify_failure_kind(self, kind: FailureKind, sim) -> str:
        return kind.category

    def on_terminal(self, job, sim) -> None:
        pass


class FifoPolicy(Policy):
    name = "fifo"


class OracleSjfPolicy(Policy):
    """SJF on ground-truth runtimes (impractical upper bound)."""

    name = "oracle-sjf"

    def order_queue(self, queued, sim):
        return sjf_order(queued, lambda j: effective_runtime(j.truth))


class QssfPolicy(Policy):
    """SJF on per-(user, job_name) historical mean durations."""

    name = "qssf"

    def __init__(self, default_duration: float = 3600.0):
        self.history = []  # (user, job_name, duration)
        self.default_duration = default_duration

    def order_queue(self, queued, sim):
        return sjf_order(
            queued,
            lambda j: qssf_estimate(
                j.spec.user, j.spec.job_name, self.history, self.default_duration
            ),
        )

    def on_terminal(self, job, sim):
        self.history.append((job.spec.user, job.spec.job_name, float(job.work)))


class LasPolicy(Policy):
    """Two-level least-attained-service with checkpoint-safe preemption."""

    name = "las"
    preemptive = True

    def __init__(self, promotion_threshold: int = 3200):
        self.promotion_threshold = promotion_threshold

    def order_queue(self, queued, sim):
        def key(job):
            cls = las_priority(job.attained_gpu_seconds, self.promotion_threshold)
            return (
                0 if cls == "HIGH" else 1,
                job.attained_gpu_seconds,
                job.spec.submit_time,
                job.job_id,
            )

        return sorted(queued, key=key)


# ---------------------------------------------------------------------------
# Packing scheduler with a profiled utilization cap
# ---------------------------------------------------------------------------


class PackingPolicy(Policy):
    """Profile-first packing scheduler ordered by a noisy learned-estimator
    stand-in (lognormal multiplicative noise calibrated so roughly 27.7% of
    estimates land within 100% relative error)."""

    name = "packing"
    profiles = True
    packs = True

    NOISE_SIGMA = 1.5
    # mu chosen so P(rel error <= 1) = Phi((ln 2 - mu) / sigma) ~= 0.277
    NOISE_MU = math.log(2.0) + 0.5917 * NOISE_SIGMA

    def __init__(self, packing_cfg: PackingConfig = PackingConfig()):
        self.packing_cfg = packing_cfg

    def estimated_duration(self, job, sim) -> float:
        z = random.Random(f"{sim.cfg.rng_seed}:est:{job.job_id}").gauss(0.0, 1.0)
        return effective_runtime(job.truth) * math.exp(self.NOISE_MU + self.NOISE_SIGMA * z)

    def wants_profile(self, job, sim) -> bool:
        return job.observed_util is None

    def utilization_of(self, job, sim) -> Optional[float]:
        return job.estimate_util if job.estimate_util is not None else job.observed_util

    def order_queue(self, queued, sim):
        return sjf_order(queued, lambda j: self.estimated_duration(j, sim))

    def can_pack(self, host, guest, sim) -> bool:
        host_util = self.utilization_of(host, sim)
        guest_util = self.utilization_of(guest, sim)
        if host_util is None or guest_util is None:
            return False
        return host_util + guest_util <= self.packing_cfg.pack_util_cap

    def pack_host_key(self, host, sim):
        util = self.utilization_of(host, sim)
        return util if util is not None else 1000.0


# ---------------------------------------------------------------------------
# Semantic enhancements
# ---------------------------------------------------------------------------


class _SemanticMixin:
    """Shared advisor plumbing: metadata lookup, estimation, online history."""

    def _init_semantic(self, advisor: Optional[Advisor]):
        self.advisor = advisor if advisor is not None else Advisor()
        self._metadata_cache = {}
        self._completer = MockCompleter()
        self._embedder = self.advisor.embedder
        self._category_vectors = build_category_vectors(self._embedder)

    def metadata_of(self, job):
        job_id = job.job_id
        if job_id not in self._metadata_cache:
            md = None
            if job.spec.metadata_path:
                md = load_metadata(job.spec.metadata_path).canonical()
            self._metadata_cache[job_id] = md
        return self._metadata_cache[job_id]

    def try_estimate(self, job):
        md = self.metadata_of(job)
        if md is None:
            return None
        try:
            return self.advisor.estimate(md)
        except NoSimilarJobs:
            return None

    def record_history(self, job):
        if job.final_status != "COMPLETED" or job.work <= 0:
            return
        md = self.metadata_of(job)
        if md is None:
            return
        self.advisor.record(
            job.job_id,
            md,
            JobOutcome(
                duration_s=float(job.work),
                sm_util=job.truth.sm_util_steady,
                status=job.final_status,
            ),
        )


def synthesize_progress_log(step_time_s: float, num_lines: int, start_step: int = 1) -> list:
    return [
        f"step {start_step + i} loss 2.000 step_time {step_time_s:.6f}s"
        for i in range(num_lines)
    ]


def synthesize_failure_log(kind: FailureKind, num_lines: int = 96) -> list:
    """Small semi-sorted log whose first error line carries the taxonomy
    phrase for the given failure kind."""
    phrase = next(
        (p for p, cat, comp in FAILURE_PHRASES
         if cat == kind.category and comp == kind.component),
        "error: job terminated abnormally",
    )
    prefix = max(1, num_lines // 2)
    lines = [f"step {i} loss 1.500 step_time 0.500000s" for i in range(1, prefix + 1)]
    lines.append(f"ERROR: {phrase}")
    lines.extend(
        f"ERROR: rank {i} terminated with exit code 1" for i in range(num_lines - prefix - 1)
    )
    return lines


class SemanticPackingPolicy(_SemanticMixin, PackingPolicy):
    """Packing scheduler enhanced with retrieval-based estimates (profiling
    bypass + duration), and interference-aware packing cancelation."""

    name = "packing-semantic"
    eviction_checks = True

    def __init__(self, packing_cfg: PackingConfig = PackingConfig(),
                 tracker_cfg: TrackerConfig = TrackerConfig(),
                 advisor: Optional[Advisor] = None):
        super().__init__(packing_cfg)
        self.tracker_cfg = tracker_cfg
        self._init_semantic(advisor)

    def on_arrival(self, job, sim):
        if job.estimate_duration is not None:
            return  # re-arrival after manual recovery keeps its estimate
        est = self.try_estimate(job)
        if est is not None:
            job.estimate_duration = est.duration_s
            job.estimate_util = est.sm_util
            job.estimate_source = est.source

    def wants_profile(self, job, sim) -> bool:
        # Retrieval hit bypasses the profiler entirely.
        if job.estimate_util is not None:
            return False
        return job.observed_util is None

    def order_queue(self, queued, sim):
        def duration(job):
            if job.estimate_duration is not None:
                return job.estimate_duration
            return self.estimated_duration(job, sim)

        return sjf_order(queued, duration)

    def eviction_decision(self, host, guest, sim) -> str:
        if not host.logs_detected:
            return "UNTRACKABLE"
        steps = self.tracker_cfg.min_steps_after_pack
        base = sim.cfg.nominal_step_time_s
        log_before = synthesize_progress_log(
            base, self.tracker_cfg.max_metric_lines + 4
        )
        log_after = synthesize_progress_log(
            base / float(host.rate),
            self.tracker_cfg.max_metric_lines + 4,
            start_step=1000,
        )
        report = assess_packing(
            log_before,
            log_after,
            steps,
            self._completer,
            self.tracker_cfg,
            self.packing_cfg,
            embedder=self._embedder,
            category_vectors=self._category_vectors,
        )
        return report.decision

    def on_terminal(self, job, sim):
        self.record_history(job)


class SemanticSjfPolicy(_SemanticMixin, Policy):
    """Standalone semantic scheduler: SJF on retrieval-estimated durations,
    with optional automated failure triage and recovery."""

    name = "semantic-sjf"

    def __init__(self, advisor: Optional[Advisor] = None,
                 with_failure_handler: bool = True,
                 triage_cfg: TriageConfig = TriageConfig()):
        self._init_semantic(advisor)
        if advisor is None:
            self.advisor = Advisor(cfg=AdvisorConfig(top_k=3))
        self.failure_handling = with_failure_handler
        self.triage_cfg = triage_cfg
        if not with_failure_handler:
            self.name = "semantic-sjf-nofh"

    def _global_mean(self) -> Optional[float]:
        store = self.advisor.store
        if len(store) == 0:
            return None
        durations = [store.outcome(job_id).duration_s for job_id in sorted(store._entries)]
        return sum(durations) / len(durations)

    def on_arrival(self, job, sim):
        if job.estimate_duration is not None:
            return
        est = self.try_estimate(job)
        if est is not None:
            job.estimate_duration = est.duration_s
            job.estimate_util = est.sm_util
            job.estimate_source = est.source

    def order_queue(self, queued, sim):
        return sjf_order(
            queued,
            lambda j: j.estimate_duration,
            fallback=self._global_mean(),
        )

    def classify_failure_kind(self, kind: FailureKind, sim) -> str:
        if not self.failure_handling:
            return kind.category
        log = synthesize_failure_log(kind)
        report = triage(
            log,
            self._completer,
            self.triage_cfg,
            embedder=self._embedder,
            category_vectors=self._category_vectors,
        )
        return report.error_type

    def on_terminal(self, job, sim):
        self.record_history(job)


# ---------------------------------------------------------------------------
# Factory
# ---------------------------------------------------------------------------

POLICY_NAMES = (
    "fifo",
    "oracle-sjf",
    "qssf",
    "las",
    "packing",
    "packing-semantic",
    "semantic-sjf",
    "semantic-sjf-nofh",
)


def make_policy(name: str, packing_cfg: PackingConfig = PackingConfig(),
                tracker_cfg: TrackerConfig = TrackerConfig(),
                advisor_cfg: AdvisorConfig = AdvisorConfig(),
                triage_cfg: TriageConfig = TriageConfig(),
                promotion_threshold: int = 3200,
                history_snapshot=None) -> Policy:
    advisor = None
    if name in ("packing-semantic", "semantic-sjf", "semantic-sjf-nofh"):
        from .backend import VectorStore

        store = VectorStore.load(history_snapshot) if history_snapshot else None
        advisor = Advisor(store=store, cfg=advisor_cfg)
    if name == "fifo":
        return FifoPolicy()
    if name == "oracle-sjf":
        return OracleSjfPolicy()
    if name == "qssf":
        return QssfPolicy()
    if name == "las":
        return LasPolicy(promotion_threshold)
    if name == "packing":
        return PackingPolicy(packing_cfg)
    if name == "packing-semantic":
        return SemanticPackingPolicy(packing_cfg, tracker_cfg, advisor)
    if name == "semantic-sjf":
        return SemanticSjfPolicy(advisor, with_failure_handler=True, triage_cfg=triage_cfg)
    if name == "semantic-sjf-nofh":
        return SemanticSjfPolicy(advisor, with_failure_handler=False, triage_cfg=triage_cfg)
    raise ValueError(f"unknown policy {name!r}; known: {', '.join(POLICY_NAMES)}")
