"""Command-line interface.

Subcommands:
    gen       generate a synthetic trace (and metadata fixtures)
    simulate  run one policy over a trace and print JCT statistics
    advise    estimate a workload's duration from a history snapshot
    track     extract throughput from a training log
    triage    locate and classify a failure from a job log
    eval      run a scored evaluation suite (advisor/tracker/triage)
    report    compare policies on a trace; writes CSV/JSON and figures

Machine-readable output (JSON) goes to stdout or --out; errors exit nonzero.
A YAML config file with per-section settings can seed any command; explicit
flags override the file.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import yaml

from .advisor import Advisor, NoSimilarJobs
from .backend import MockCompleter, MockEmbedder, VectorStore
from .core import (
    AdvisorConfig,
    ClusterSpec,
    PackingConfig,
    SimConfig,
    TrackerConfig,
    TriageConfig,
    load_cluster,
    load_metadata,
    parse_trace,
    serialize_trace,
)
from .corpus import CorpusSpec, gen_trace
from .failures import plan_recovery, triage as run_triage
from .harness import (
    compare_policies,
    eval_advisor,
    eval_tracker,
    eval_triage,
    write_report,
)
from .policies import POLICY_NAMES, make_policy
from .simulator import run_simulation
from .tracker import NoMetrics, extract_metrics, throughput


class CliError(Exception):
    pass


def _load_config(path):
    if not path:
        return {}
    with open(path) as f:
        doc = yaml.safe_load(f) or {}
    if not isinstance(doc, dict):
        raise CliError(f"config file {path} must be a mapping of sections")
    return doc


def _build_cfg(cls, section: dict, overrides: dict):
    """Dataclass from config-file section plus non-None flag overrides."""
    fields = {f.name for f in dataclasses.fields(cls)}
    unknown = set(section) - fields
    if unknown:
        raise CliError(
            f"unknown keys {sorted(unknown)} for {cls.__name__}; "
            f"valid keys: {sorted(fields)}"
        )
    merged = dict(section)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    return cls(**merged)


def _emit(doc: dict, out_path=None) -> None:
    text = json.dumps(doc, indent=2, default=str) + "\n"
    if out_path:
        Path(out_path).write_text(text)
    else:
        sys.stdout.write(text)


def _echo_cfg(*cfgs) -> dict:
    return {type(c).__name__: dataclasses.asdict(c) for c in cfgs}


# ---------------------------------------------------------------------------
# Subcommand implementations
# ---------------------------------------------------------------------------


def cmd_gen(args, config) -> int:
    section = config.get("corpus", {})
    overrides = {
        "num_jobs": args.num_jobs,
        "arrival_spread_s": args.arrival_spread,
        "failure_fraction": args.failure_fraction,
        "interference": args.interference,
        "metadata_groups": args.metadata_groups,
    }
    spec = _build_cfg(CorpusSpec, section, overrides)
    jobs = gen_trace(spec, seed=args.seed, metadata_dir=args.metadata_dir)
    text = serialize_trace(jobs)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def _resolve_cluster(args, config) -> ClusterSpec:
    if args.cluster:
        return load_cluster(args.cluster)
    section = config.get("cluster", {})
    return ClusterSpec(
        nodes=int(section.get("nodes", 8)),
        gpus_per_node=int(section.get("gpus_per_node", 8)),
    )


def _resolve_sim_cfg(args, config) -> SimConfig:
    return _build_cfg(
        SimConfig,
        config.get("simulator", {}),
        {
            "rng_seed": args.seed,
            "detection_rate": getattr(args, "detection_rate", None),
        },
    )


def cmd_simulate(args, config) -> int:
    jobs = parse_trace(args.trace)
    cluster = _resolve_cluster(args, config)
    cfg = _resolve_sim_cfg(args, config)
    policy = make_policy(args.policy)
    if args.failure_handler is not None:
        policy.failure_handling = args.failure_handler
    report, rejected = run_simulation(jobs, cluster, policy, cfg)
    _emit(
        {
            "policy": args.policy,
            "jobs": len(report.per_job),
            "rejected": rejected,
            "avg_jct_s": report.avg_jct_s,
            "p99_jct_s": report.p99_jct_s,
            "makespan_s": report.makespan_s,
            "avg_queue_s": report.avg_queue_s,
            "config": _echo_cfg(cfg),
        },
        args.out,
    )
    return 0


def cmd_advise(args, config) -> int:
    cfg = _build_cfg(
        AdvisorConfig,
        config.get("advisor", {}),
        {"similarity_threshold": args.threshold, "top_k": args.top_k},
    )
    store = VectorStore.load(args.store) if args.store else None
    advisor = Advisor(store=store, cfg=cfg)
    md = load_metadata(args.metadata)
    try:
        est = advisor.estimate(md)
    except NoSimilarJobs:
        _emit(
            {"found": False, "threshold": cfg.similarity_threshold,
             "config": _echo_cfg(cfg)},
            args.out,
        )
        return 3
    _emit(
        {
            "found": True,
            "duration_s": est.duration_s,
            "sm_util": est.sm_util,
            "source": est.source,
            "matched_job_ids": list(est.matched_job_ids),
            "config": _echo_cfg(cfg),
        },
        args.out,
    )
    return 0


def cmd_track(args, config) -> int:
    cfg = _build_cfg(
        TrackerConfig,
        config.get("tracker", {}),
        {"max_metric_lines": args.max_lines},
    )
    lines = Path(args.log).read_text().splitlines()
    completer = MockCompleter()
    try:
        samples = extract_metrics(lines, completer, cfg)
    except NoMetrics:
        _emit({"found": False, "config": _echo_cfg(cfg)}, args.out)
        return 3
    _emit(
        {
            "found": True,
            "throughput_steps_per_s": throughput(samples),
            "samples": [
                {"line_index": s.line_index, "step": s.step,
                 "step_time_s": s.step_time_s}
                for s in samples
            ],
            "completer_calls": completer.calls,
            "config": _echo_cfg(cfg),
        },
        args.out,
    )
    return 0


def cmd_triage(args, config) -> int:
    cfg = _build_cfg(
        TriageConfig,
        config.get("triage", {}),
        {"chunk_lines": args.chunk_lines},
    )
    lines = Path(args.log).read_text().splitlines()
    report = run_triage(lines, MockCompleter(), cfg)
    plan = plan_recovery(report)
    _emit(
        {
            "error_type": report.error_type,
            "faulty_component": report.faulty_component,
            "located_line": report.located_line,
            "classifier_calls": report.classifier_calls,
            "recovery_applicable": plan.applicable,
            "recovery_steps": list(plan.steps),
            "config": _echo_cfg(cfg),
        },
        args.out,
    )
    return 0


def cmd_eval(args, config) -> int:
    if args.suite == "advisor":
        result = eval_advisor(seed=args.seed)
    elif args.suite == "tracker":
        result = eval_tracker(seed=args.seed)
    elif args.suite == "triage":
        result = eval_triage(
            num_logs=args.num_logs,
            infra_logs=args.infra_logs,
            seed=args.seed,
        )
    else:
        raise CliError(f"unknown suite {args.suite!r}")
    _emit(result, args.out)
    return 0


def cmd_report(args, config) -> int:
    cluster = _resolve_cluster(args, config)
    cfg = _resolve_sim_cfg(args, config)
    corpus = _build_cfg(
        CorpusSpec,
        config.get("corpus", {}),
        {"num_jobs": args.num_jobs, "interference": args.interference},
    )
    policies = args.policies.split(",")
    for name in policies:
        if name not in POLICY_NAMES:
            raise CliError(f"unknown policy {name!r}; known: {', '.join(POLICY_NAMES)}")
    metadata_dir = Path(args.out_dir) / "metadata"
    comparison = compare_policies(policies, corpus, cluster, cfg,
                                  metadata_dir=metadata_dir)
    comparison["config"] = _echo_cfg(cfg, corpus)
    paths = write_report(comparison, args.out_dir, render=not args.no_figures)
    _emit({"written": paths, "baseline": comparison["baseline"]})
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="semsched",
        description="Semantic-aware GPU cluster scheduling toolkit and simulator.",
    )
    parser.add_argument("--config", help="YAML config file with per-section settings")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic trace")
    p.add_argument("--out", help="trace CSV path (default stdout)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--num-jobs", type=int, dest="num_jobs")
    p.add_argument("--arrival-spread", type=int, dest="arrival_spread")
    p.add_argument("--failure-fraction", type=float, dest="failure_fraction")
    p.add_argument("--interference", choices=("none", "light", "heavy"))
    p.add_argument("--metadata-groups", type=int, dest="metadata_groups")
    p.add_argument("--metadata-dir", help="write per-group metadata JSON here")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("simulate", help="run one policy over a trace")
    p.add_argument("trace", help="trace CSV path")
    p.add_argument("--policy", choices=POLICY_NAMES, default="fifo")
    p.add_argument("--cluster", help="cluster spec YAML")
    p.add_argument("--seed", type=int)
    p.add_argument("--detection-rate", type=float, dest="detection_rate")
    p.add_argument("--failure-handler", dest="failure_handler",
                   action="store_const", const=True, default=None)
    p.add_argument("--no-failure-handler", dest="failure_handler",
                   action="store_const", const=False)
    p.add_argument("--out")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("advise", help="estimate a workload from history")
    p.add_argument("metadata", help="workload metadata JSON")
    p.add_argument("--store", help="history snapshot (JSONL)")
    p.add_argument("--threshold", type=float)
    p.add_argument("--top-k", type=int, dest="top_k")
    p.add_argument("--out")
    p.set_defaults(func=cmd_advise)

    p = sub.add_parser("track", help="extract throughput from a training log")
    p.add_argument("log")
    p.add_argument("--max-lines", type=int, dest="max_lines")
    p.add_argument("--out")
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("triage", help="locate and classify a failure log")
    p.add_argument("log")
    p.add_argument("--chunk-lines", type=int, dest="chunk_lines")
    p.add_argument("--out")
    p.set_defaults(func=cmd_triage)

    p = sub.add_parser("eval", help="run a scored evaluation suite")
    p.add_argument("suite", choices=("advisor", "tracker", "triage"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--num-logs", type=int, dest="num_logs", default=300)
    p.add_argument("--infra-logs", type=int, dest="infra_logs", default=75)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="compare policies; write tables and figures")
    p.add_argument("--policies", default="fifo,packing,packing-semantic")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--cluster")
    p.add_argument("--seed", type=int)
    p.add_argument("--num-jobs", type=int, dest="num_jobs")
    p.add_argument("--interference", choices=("none", "light", "heavy"))
    p.add_argument("--detection-rate", type=float, dest="detection_rate")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = _load_config(args.config)
        return args.func(args, config)
    except (CliError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
