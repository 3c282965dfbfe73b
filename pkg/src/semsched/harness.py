"""Evaluation harness: scored sub-system suites and policy comparisons.

Every suite runs against generated corpora with known labels and returns
plain-dict results that the CLI serializes as JSON/CSV; the report path also
renders matplotlib figures next to the delimited output.
"""

from __future__ import annotations

import csv
import json
import math
import random
from pathlib import Path

from .advisor import Advisor
from .backend import JobOutcome, MockCompleter, MockEmbedder
from .core import (
    ClusterSpec,
    SimConfig,
    TrackerConfig,
    TriageConfig,
    rmsre,
)
from .corpus import (
    CorpusSpec,
    gen_failure_log,
    gen_trace,
    gen_training_log,
    make_metadata,
)
from .failures import plan_recovery, triage
from .policies import make_policy
from .simulator import run_simulation
from .tracker import NoMetrics, build_category_vectors, extract_metrics, throughput


def format_ratio(numerator: float, denominator: float) -> str:
    """Improvement ratio rendered to two decimals (e.g. 6.85 / 5.53 -> '1.24')."""
    if denominator <= 0:
        raise ValueError("denominator must be positive")
    return f"{numerator / denominator:.2f}"


# ---------------------------------------------------------------------------
# Advisor suite
# ---------------------------------------------------------------------------


def eval_advisor(num_groups: int = 20, resubmissions: int = 3, seed: int = 0) -> dict:
    """Self-retrieval and duration-estimation accuracy on resubmitted
    workloads with mildly varying run times."""
    rng = random.Random(f"{seed}:advisor-eval")
    advisor = Advisor()
    truths = {}
    for g in range(num_groups):
        md = make_metadata(g, random.Random(f"{seed}:md:{g}"))
        base = rng.randrange(1800, 14400)
        truths[g] = (md, base)
        for r in range(resubmissions):
            jitter = 1.0 + rng.uniform(-0.05, 0.05)
            advisor.record(
                f"hist-{g}-{r}",
                md,
                JobOutcome(duration_s=base * jitter, sm_util=50.0, status="COMPLETED"),
            )

    hits = 0
    pairs = []
    for g, (md, base) in truths.items():
        result = advisor.retrieve(md)
        matched_groups = {job_id.split("-")[1] for job_id, _ in result.matches}
        if matched_groups == {str(g)}:
            hits += 1
        est = advisor.estimate(md)
        pairs.append((est.duration_s, float(base)))

    return {
        "suite": "advisor",
        "groups": num_groups,
        "retrieval_precision": hits / num_groups,
        "duration_rmsre": rmsre(pairs),
    }


# ---------------------------------------------------------------------------
# Tracker suite
# ---------------------------------------------------------------------------


def eval_tracker(num_logs: int = 40, lines_per_log: int = 120, seed: int = 0) -> dict:
    """Throughput recovery accuracy and completion-call economy on logs with
    known constant step times."""
    rng = random.Random(f"{seed}:tracker-eval")
    embedder = MockEmbedder()
    vectors = build_category_vectors(embedder)
    completer = MockCompleter()
    errors = []
    failures = 0
    for i in range(num_logs):
        step_time = round(rng.uniform(0.2, 3.0), 4)
        lines = gen_training_log(step_time, lines_per_log, seed=seed * 1000 + i)
        try:
            samples = extract_metrics(lines, completer, TrackerConfig(),
                                      embedder=embedder, category_vectors=vectors)
            tp = throughput(samples)
            errors.append(abs(tp - 1.0 / step_time) / (1.0 / step_time))
        except NoMetrics:
            failures += 1
    total_lines = num_logs * lines_per_log
    return {
        "suite": "tracker",
        "logs": num_logs,
        "extraction_failures": failures,
        "max_relative_error": max(errors) if errors else None,
        "completer_calls": completer.calls,
        "call_economy": total_lines / completer.calls if completer.calls else None,
    }


# ---------------------------------------------------------------------------
# Triage suite
# ---------------------------------------------------------------------------


def eval_triage(num_logs: int = 300, infra_logs: int = 75,
                lines_per_log: int = 4096, seed: int = 0,
                cfg: TriageConfig = TriageConfig(),
                flip_fraction: float = 0.0) -> dict:
    """Locator exactness, classifier confusion counts and the per-log
    classifier-call bound on a labeled failure-log corpus."""
    from .corpus import _INFRA_KINDS, _NON_INFRA_KINDS

    rng = random.Random(f"{seed}:triage-eval")
    embedder = MockEmbedder()
    vectors = build_category_vectors(embedder)
    completer = MockCompleter(flip_fraction=flip_fraction)
    located_exact = 0
    confusion = {"tp": 0, "fp": 0, "fn": 0, "tn": 0}
    call_bound = math.ceil(math.log2(max(1, math.ceil(lines_per_log / cfg.chunk_lines)))) + 2
    max_calls = 0
    for i in range(num_logs):
        is_infra = i < infra_logs
        pool = _INFRA_KINDS if is_infra else _NON_INFRA_KINDS
        kind = pool[rng.randrange(len(pool))]
        error_at = rng.randrange(lines_per_log // 8, lines_per_log - 1)
        lines, truth_at = gen_failure_log(kind, lines_per_log, error_at,
                                          seed=seed * 1000 + i)
        report = triage(lines, completer, cfg, embedder=embedder,
                        category_vectors=vectors)
        max_calls = max(max_calls, report.classifier_calls)
        if report.located_line == truth_at:
            located_exact += 1
        predicted_infra = report.error_type == "INFRA"
        if is_infra and predicted_infra:
            confusion["tp"] += 1
        elif is_infra:
            confusion["fn"] += 1
        elif predicted_infra:
            confusion["fp"] += 1
        else:
            confusion["tn"] += 1
        plan = plan_recovery(report)
        assert plan.applicable == predicted_infra

    return {
        "suite": "triage",
        "logs": num_logs,
        "infra_logs": infra_logs,
        "located_exact": located_exact,
        "confusion": confusion,
        "max_classifier_calls": max_calls,
        "classifier_call_bound": call_bound,
    }


# ---------------------------------------------------------------------------
# Scheduler comparison
# ---------------------------------------------------------------------------


def compare_policies(policy_names, corpus: CorpusSpec, cluster: ClusterSpec,
                     cfg: SimConfig = SimConfig(), metadata_dir=None) -> dict:
    """Run each policy on the same trace; report JCT statistics, CDFs and
    the improvement ratio of every policy over the first (baseline)."""
    results = {}
    for name in policy_names:
        jobs = gen_trace(corpus, seed=cfg.rng_seed, metadata_dir=metadata_dir)
        policy = make_policy(name)
        report, rejected = run_simulation(jobs, cluster, policy, cfg)
        results[name] = {
            "avg_jct_s": report.avg_jct_s,
            "p99_jct_s": report.p99_jct_s,
            "makespan_s": report.makespan_s,
            "avg_queue_s": report.avg_queue_s,
            "jct_cdf": list(report.jct_cdf),
            "rejected": list(rejected),
        }
    baseline = policy_names[0]
    base_avg = results[baseline]["avg_jct_s"]
    for name in policy_names:
        results[name]["improvement_over_baseline"] = format_ratio(
            base_avg, results[name]["avg_jct_s"]
        )
    return {
        "suite": "scheduler",
        "baseline": baseline,
        "policies": results,
    }


# ---------------------------------------------------------------------------
# Report rendering (delimited data + figures)
# ---------------------------------------------------------------------------


def write_comparison_csv(comparison: dict, path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(
            ["policy", "avg_jct_s", "p99_jct_s", "makespan_s", "avg_queue_s",
             "improvement_over_baseline"]
        )
        for name, row in comparison["policies"].items():
            writer.writerow(
                [name, f"{row['avg_jct_s']:.3f}", f"{row['p99_jct_s']:.3f}",
                 row["makespan_s"], f"{row['avg_queue_s']:.3f}",
                 row["improvement_over_baseline"]]
            )


def write_cdf_csv(comparison: dict, path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["policy", "jct_s", "cumulative_fraction"])
        for name, row in comparison["policies"].items():
            for jct, frac in row["jct_cdf"]:
                writer.writerow([name, jct, f"{frac:.6f}"])


def render_figures(comparison: dict, out_dir) -> list:
    """JCT CDF and average-JCT bar figures rendered as PNGs alongside the
    delimited output. Returns the written paths."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    fig, ax = plt.subplots(figsize=(6, 4))
    for name, row in comparison["policies"].items():
        xs = [p[0] / 3600.0 for p in row["jct_cdf"]]
        ys = [p[1] for p in row["jct_cdf"]]
        ax.step(xs, ys, where="post", label=name)
    ax.set_xlabel("JCT (hours)")
    ax.set_ylabel("cumulative fraction of jobs")
    ax.set_title("JCT CDF by policy")
    ax.legend()
    cdf_path = out_dir / "jct_cdf.png"
    fig.savefig(cdf_path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    written.append(str(cdf_path))

    fig, ax = plt.subplots(figsize=(6, 4))
    names = list(comparison["policies"])
    avgs = [comparison["policies"][n]["avg_jct_s"] / 3600.0 for n in names]
    ax.bar(range(len(names)), avgs)
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=30, ha="right")
    ax.set_ylabel("average JCT (hours)")
    ax.set_title("Average JCT by policy")
    bar_path = out_dir / "avg_jct.png"
    fig.savefig(bar_path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    written.append(str(bar_path))
    return written


def write_report(comparison: dict, out_dir, render: bool = True) -> dict:
    """Write JSON + CSV (+ figures) for a policy comparison; returns paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    json_path = out_dir / "comparison.json"
    json_path.write_text(json.dumps(comparison, indent=2) + "\n")
    table_path = out_dir / "comparison.csv"
    write_comparison_csv(comparison, table_path)
    cdf_path = out_dir / "jct_cdf.csv"
    write_cdf_csv(comparison, cdf_path)
    paths = {
        "json": str(json_path),
        "table": str(table_path),
        "cdf": str(cdf_path),
        "figures": [],
    }
    if render:
        paths["figures"] = render_figures(comparison, out_dir)
    return paths
