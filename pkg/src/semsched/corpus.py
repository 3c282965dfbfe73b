"""Deterministic synthetic corpora: traces, training logs, failure logs,
workload metadata, and small source-tree fixtures.

Every generator is a pure function of (parameters, seed) and returns ground
truth alongside the artifact, so tests and the evaluation harness can score
pipeline output against known labels.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

from .backend import FAILURE_PHRASES
from .core import (
    FailureKind,
    JobSpec,
    JobTruth,
    WorkloadMetadata,
    save_metadata,
)

# ---------------------------------------------------------------------------
# Metadata fixtures
# ---------------------------------------------------------------------------

_MODEL_NAMES = ("GPT", "BERT", "ResNet", "T5", "ViT", "LLaMA")
_TASK_TYPES = ("nlp", "cv", "speech")
_ITER_TYPES = ("step", "epoch")
_DATASETS = ("pile", "c4", "imagenet", "librispeech", "wikitext", "openwebtext")


def make_metadata(index: int, rng: random.Random) -> WorkloadMetadata:
    """One deterministic metadata document; distinct indexes get distinct
    token multisets so their fingerprints differ."""
    model = _MODEL_NAMES[rng.randrange(len(_MODEL_NAMES))]
    task = _TASK_TYPES[rng.randrange(len(_TASK_TYPES))]
    dataset = _DATASETS[rng.randrange(len(_DATASETS))]
    iters = (index + 1) * 1000 + rng.randrange(1, 1000)
    return WorkloadMetadata(
        model_config={
            "model_name": model,
            "task_type": task,
            "d_model": str(256 * (1 + index % 8)),
            "n_layer": str(2 + index % 24),
        },
        training_config={
            "iters": str(iters),
            "iter_type": _ITER_TYPES[rng.randrange(len(_ITER_TYPES))],
            "batch_size": str(8 << rng.randrange(5)),
            "lr": f"{rng.choice([1, 3, 5])}e-{rng.randrange(3, 6)}",
        },
        dataset_config={
            "train": dataset,
            "valid": f"{dataset}-val",
            "num_workers": str(rng.randrange(1, 9)),
        },
    ).canonical()


# ---------------------------------------------------------------------------
# Log fixtures
# ---------------------------------------------------------------------------

_INIT_LINES = (
    "initializing distributed process group rank 0",
    "loading model weights from checkpoint",
    "building dataloader with 4 workers",
    "starting optimizer setup",
)
_WARN_LINES = (
    "warning: deprecated flag --amp, use --precision instead",
    "userwarning: fallback to gloo backend",
)
_MISC_LINES = (
    "===================================",
    "host environment summary follows",
)
_ERROR_TAIL_LINES = (
    "error: rank 3 terminated with exit code 1",
    "traceback (most recent call last): fatal abort",
    "error: process group crash, aborting job",
)


def gen_training_log(step_time_s: float, num_steps: int, seed: int = 0,
                     start_step: int = 1, misc_every: int = 7,
                     header_lines: int = 3) -> list:
    """Training log whose progress lines all carry the given step time.

    Ground truth: throughput is exactly 1/step_time_s.
    """
    rng = random.Random(f"{seed}:trainlog")
    lines = [_INIT_LINES[i % len(_INIT_LINES)] for i in range(header_lines)]
    for i in range(num_steps):
        step = start_step + i
        lines.append(
            f"step {step} loss {2.0 / (1 + 0.01 * i):.3f} step_time {step_time_s:.4f}s"
        )
        if misc_every and (i + 1) % misc_every == 0:
            pool = _WARN_LINES if rng.random() < 0.5 else _MISC_LINES
            lines.append(pool[rng.randrange(len(pool))])
    return lines


def phrase_for(kind: FailureKind) -> str:
    for phrase, category, component in FAILURE_PHRASES:
        if category == kind.category and component == kind.component:
            return phrase
    raise ValueError(f"no taxonomy phrase for {kind}")


def gen_failure_log(kind: FailureKind, total_lines: int, error_at: int,
                    seed: int = 0):
    """Semi-sorted failure log: healthy lines before ``error_at``, the first
    root-cause line exactly at that index, error noise after.

    Returns (lines, error_at) so callers can score the locator exactly.
    """
    if not (0 <= error_at < total_lines):
        raise ValueError("error_at out of range")
    rng = random.Random(f"{seed}:faillog")
    lines = []
    for i in range(error_at):
        r = rng.random()
        if r < 0.80:
            lines.append(f"step {i + 1} loss 1.500 step_time 0.5000s")
        elif r < 0.92:
            lines.append(_INIT_LINES[rng.randrange(len(_INIT_LINES))])
        else:
            lines.append(_WARN_LINES[rng.randrange(len(_WARN_LINES))])
    lines.append(f"ERROR: {phrase_for(kind)}")
    for _ in range(total_lines - error_at - 1):
        lines.append(_ERROR_TAIL_LINES[rng.randrange(len(_ERROR_TAIL_LINES))])
    return lines, error_at


# ---------------------------------------------------------------------------
# Source-tree fixtures for the metadata extraction agent
# ---------------------------------------------------------------------------


def write_repo_fixture(root, md: WorkloadMetadata, extra_files: int = 3) -> str:
    """Small job repository whose config files carry the metadata as
    ``key: value`` lines. Returns the launch command."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    config_lines = []
    for section in ("model_config", "training_config", "dataset_config"):
        for key, value in getattr(md.canonical(), section).items():
            config_lines.append(f"{key}: {value}")
    (root / "configs").mkdir(exist_ok=True)
    (root / "configs" / "train_config.yaml").write_text("\n".join(config_lines) + "\n")
    (root / "train.py").write_text(
        "import argparse\n\n\ndef main():\n    pass\n\n\nif __name__ == '__main__':\n    main()\n"
    )
    (root / "run.sh").write_text("python train.py --config configs/train_config.yaml\n")
    for i in range(extra_files):
        (root / f"util_{i}.py").write_text(f"# helper module {i}\nVALUE = {i}\n")
    return "python train.py --config configs/train_config.yaml"


# ---------------------------------------------------------------------------
# Trace generation
# ---------------------------------------------------------------------------

_INFRA_KINDS = tuple(
    FailureKind(category=c, component=k)
    for _p, c, k in FAILURE_PHRASES
    if c == "INFRA"
)
_NON_INFRA_KINDS = tuple(
    FailureKind(category=c, component=k)
    for _p, c, k in FAILURE_PHRASES
    if c != "INFRA"
)

# decade -> retention; heavier interference retains less throughput.
INTERFERENCE_TABLES = {
    "none": {},
    "light": {d: Fraction(19, 20) if d >= 5 else Fraction(1) for d in range(11)},
    "heavy": {d: Fraction(max(2, 10 - d), 10) for d in range(11)},
}


@dataclass(frozen=True)
class CorpusSpec:
    """Knobs for a synthetic job trace."""

    num_jobs: int = 50
    arrival_spread_s: int = 0  # 0 => all jobs submitted at t=0
    min_duration_s: int = 600
    max_duration_s: int = 14400
    gpu_choices: tuple = (1, 2, 4, 8)
    num_users: int = 6
    metadata_groups: int = 12  # distinct workloads; rest are resubmissions
    failure_fraction: float = 0.0  # jobs with at least one failure event
    infra_fraction: float = 0.5  # of failing jobs, fraction hit by INFRA
    resumable_fraction: float = 1.0  # of INFRA-failing jobs that still finish
    cancel_fraction: float = 0.0
    interference: str = "none"
    logs_fraction: float = 1.0  # jobs that emit parseable progress logs
    warmup_fraction: float = 0.2  # of duration, capped below the duration

    def __post_init__(self):
        if self.num_jobs < 1 or self.metadata_groups < 1:
            raise ValueError("num_jobs and metadata_groups must be >= 1")
        if not (0 < self.min_duration_s <= self.max_duration_s):
            raise ValueError("bad duration range")
        if self.interference not in INTERFERENCE_TABLES:
            raise ValueError(f"unknown interference level {self.interference!r}")
        for frac in (self.failure_fraction, self.infra_fraction,
                     self.resumable_fraction, self.cancel_fraction,
                     self.logs_fraction, self.warmup_fraction):
            if not (0 <= frac <= 1):
                raise ValueError("fractions must be in [0,1]")


def gen_trace(spec: CorpusSpec, seed: int = 0, metadata_dir=None):
    """Deterministic (JobSpec, JobTruth) list.

    When ``metadata_dir`` is given, one metadata JSON per group is written
    there and referenced by every job in the group, so retrieval-based
    schedulers see resubmissions of the same workload.
    """
    rng = random.Random(f"{seed}:trace")
    group_metadata = [
        make_metadata(g, random.Random(f"{seed}:md:{g}"))
        for g in range(spec.metadata_groups)
    ]
    metadata_paths = [None] * spec.metadata_groups
    if metadata_dir is not None:
        metadata_dir = Path(metadata_dir)
        metadata_dir.mkdir(parents=True, exist_ok=True)
        for g, md in enumerate(group_metadata):
            path = metadata_dir / f"group_{g:03d}.json"
            save_metadata(md, path)
            metadata_paths[g] = str(path)

    jobs = []
    for i in range(spec.num_jobs):
        job_id = f"job-{i:04d}"
        group = i % spec.metadata_groups
        duration = rng.randrange(spec.min_duration_s, spec.max_duration_s + 1)
        submit = rng.randrange(spec.arrival_spread_s + 1) if spec.arrival_spread_s else 0
        steady = float(rng.randrange(30, 96))
        warmup_s = min(int(duration * spec.warmup_fraction), duration - 1)
        warmup_util = max(5.0, steady * 0.3)

        final_status = "COMPLETED"
        failure_events = ()
        if rng.random() < spec.cancel_fraction:
            final_status = "CANCELED"
        elif rng.random() < spec.failure_fraction:
            offset = rng.randrange(max(1, duration // 10), max(2, duration - 1))
            if rng.random() < spec.infra_fraction:
                kind = _INFRA_KINDS[rng.randrange(len(_INFRA_KINDS))]
                if rng.random() >= spec.resumable_fraction:
                    final_status = "FAILED"
            else:
                kind = _NON_INFRA_KINDS[rng.randrange(len(_NON_INFRA_KINDS))]
                final_status = "FAILED"
            failure_events = ((offset, kind),)

        jobs.append(
            (
                JobSpec(
                    job_id=job_id,
                    user=f"user{i % spec.num_users}",
                    job_name=f"exp-{group}",
                    submit_time=submit,
                    num_gpus=spec.gpu_choices[rng.randrange(len(spec.gpu_choices))],
                    metadata_path=metadata_paths[group],
                ),
                JobTruth(
                    true_duration=duration,
                    final_status=final_status,
                    sm_util_steady=steady,
                    sm_util_warmup=warmup_util,
                    warmup_seconds=warmup_s,
                    logs_progress=rng.random() < spec.logs_fraction,
                    failure_events=failure_events,
                    pack_slowdown_table=dict(INTERFERENCE_TABLES[spec.interference]),
                ),
            )
        )
    return jobs
