"""Retrieval-based workload estimation from semantically similar history."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .backend import JobOutcome, VectorStore
from .core import AdvisorConfig, Estimate, WorkloadMetadata


class NoSimilarJobs(Exception):
    """No historical job cleared the similarity threshold (not a failure)."""


@dataclass(frozen=True)
class RetrievalResult:
    matches: tuple  # of (job_id, score)

    @property
    def k_found(self) -> int:
        return len(self.matches)


def fingerprint_text(md: WorkloadMetadata) -> str:
    """Deterministic value rendering used for embedding.

    Only the field values are embedded: the schema (section and key names) is
    identical for every workload, and including it would give any two distinct
    workloads a large shared component, inflating their similarity.
    """
    canon = md.canonical()
    values = []
    for section in ("dataset_config", "model_config", "training_config"):
        values.extend(getattr(canon, section).values())
    return " ".join(values)


def fingerprint(md: WorkloadMetadata, embedder) -> np.ndarray:
    """Embedding of the canonicalized metadata values."""
    return embedder.embed(fingerprint_text(md))


def retrieve_similar(md: WorkloadMetadata, store: VectorStore, cfg: AdvisorConfig,
                     embedder) -> RetrievalResult:
    query = fingerprint(md, embedder)
    hits = store.search(query, threshold=cfg.similarity_threshold, k=cfg.top_k)
    return RetrievalResult(matches=tuple(hits))


def estimate_workload(md: WorkloadMetadata, store: VectorStore, cfg: AdvisorConfig,
                      embedder) -> Estimate:
    """Mean duration / SM utilization over retrieved matches.

    Raises NoSimilarJobs when nothing clears the threshold so callers can
    apply their own fallback (profiling, default estimator).
    """
    result = retrieve_similar(md, store, cfg, embedder)
    if result.k_found == 0:
        raise NoSimilarJobs(cfg.similarity_threshold)
    outcomes = [store.outcome(job_id) for job_id, _score in result.matches]
    duration = sum(o.duration_s for o in outcomes) / len(outcomes)
    utils = [o.sm_util for o in outcomes if o.sm_util is not None]
    sm_util = sum(utils) / len(utils) if utils else 0.0
    return Estimate(
        duration_s=duration,
        sm_util=sm_util,
        source="RETRIEVAL",
        matched_job_ids=tuple(job_id for job_id, _ in result.matches),
    )


def record_outcome(store: VectorStore, job_id: str, md: WorkloadMetadata,
                   outcome: JobOutcome, embedder) -> None:
    """Add a finished job to the history store; overwrites an existing entry."""
    store.put(job_id, fingerprint(md, embedder), md.canonical(), outcome)


class Advisor:
    """Convenience facade bundling store, config and embedder."""

    def __init__(self, store: Optional[VectorStore] = None,
                 cfg: AdvisorConfig = AdvisorConfig(), embedder=None):
        if embedder is None:
            from .backend import MockEmbedder

            embedder = MockEmbedder()
        self.store = store if store is not None else VectorStore(dim=embedder.dim)
        self.cfg = cfg
        self.embedder = embedder

    def estimate(self, md: WorkloadMetadata) -> Estimate:
        return estimate_workload(md, self.store, self.cfg, self.embedder)

    def retrieve(self, md: WorkloadMetadata) -> RetrievalResult:
        return retrieve_similar(md, self.store, self.cfg, self.embedder)

    def record(self, job_id: str, md: WorkloadMetadata, outcome: JobOutcome) -> None:
        record_outcome(self.store, job_id, md, outcome, self.embedder)
