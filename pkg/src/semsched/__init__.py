"""Semantic-aware GPU cluster scheduling toolkit and deterministic simulator."""

from .advisor import Advisor, NoSimilarJobs, estimate_workload, record_outcome, retrieve_similar
from .backend import (
    CompletionRequest,
    CompletionResult,
    HttpCompleter,
    JobOutcome,
    MockCompleter,
    MockEmbedder,
    VectorStore,
    cosine,
)
from .core import (
    AdvisorConfig,
    ClusterSpec,
    Estimate,
    FailureKind,
    JobRecord,
    JobSpec,
    JobTruth,
    PackingConfig,
    SimConfig,
    SimReport,
    TraceError,
    TrackerConfig,
    TriageConfig,
    WorkloadMetadata,
    compute_report,
    load_cluster,
    load_metadata,
    parse_trace,
    rmsre,
    save_cluster,
    save_metadata,
    serialize_trace,
)
from .corpus import CorpusSpec, gen_failure_log, gen_trace, gen_training_log
from .extractor import AgentBudget, ExtractionError, extract_metadata, obtain_metadata
from .failures import FailureReport, RecoveryPlan, classify_failure, locate_failure, plan_recovery, triage
from .policies import POLICY_NAMES, Policy, make_policy
from .simulator import Simulator, run_simulation
from .tracker import NoMetrics, assess_packing, extract_metrics, throughput

__version__ = "0.1.0"
