import math
from fractions import Fraction

import pytest
from hypothesis import given, strategies as st

from semsched.core import (
    ClusterSpec,
    FailureKind,
    JobRecord,
    JobSpec,
    JobTruth,
    SimConfig,
    TraceError,
    WorkloadMetadata,
    compute_report,
    load_cluster,
    load_metadata,
    parse_trace_text,
    rmsre,
    save_cluster,
    save_metadata,
    serialize_trace,
)


def make_md(**overrides):
    doc = {
        "model_config": {"model_name": "GPT", "task_type": "NLP"},
        "training_config": {"iters": "80000", "iter_type": "Step"},
        "dataset_config": {"train": "pile", "valid": "pile-val"},
    }
    doc.update(overrides)
    return WorkloadMetadata(**doc)


class TestWorkloadMetadata:
    def test_mandatory_fields_enforced(self):
        with pytest.raises(ValueError, match="model_name"):
            make_md(model_config={"task_type": "nlp"})
        with pytest.raises(ValueError, match="valid"):
            make_md(dataset_config={"train": "pile", "valid": "  "})

    def test_iters_must_be_integer(self):
        with pytest.raises(ValueError, match="iters"):
            make_md(training_config={"iters": "1.5", "iter_type": "step"})

    def test_canonical_lowercases_enums_and_sorts_keys(self):
        md = make_md(model_config={"task_type": "NLP", "model_name": "GPT", "z": 1, "a": 2})
        canon = md.canonical()
        assert canon.model_config["task_type"] == "nlp"
        assert canon.training_config["iter_type"] == "step"
        assert list(canon.model_config) == sorted(canon.model_config)
        assert canon.model_config["z"] == "1"

    def test_canonical_text_is_order_independent(self):
        a = make_md(model_config={"model_name": "GPT", "task_type": "nlp"})
        b = make_md(model_config={"task_type": "nlp", "model_name": "GPT"})
        assert a.canonical_text() == b.canonical_text()

    def test_json_round_trip(self, tmp_path):
        md = make_md().canonical()
        path = tmp_path / "md.json"
        save_metadata(md, path)
        assert load_metadata(path).canonical() == md


class TestCluster:
    def test_total_gpus(self):
        assert ClusterSpec(nodes=4, gpus_per_node=8).total_gpus == 32

    def test_yaml_round_trip(self, tmp_path):
        spec = ClusterSpec(nodes=3, gpus_per_node=4)
        path = tmp_path / "cluster.yaml"
        save_cluster(spec, path)
        assert load_cluster(path) == spec

    def test_rejects_empty_cluster(self):
        with pytest.raises(ValueError):
            ClusterSpec(nodes=0, gpus_per_node=8)


class TestJobTruth:
    def test_failure_component_consistency(self):
        with pytest.raises(ValueError):
            FailureKind(category="USER_SCRIPT", component="GPU")
        with pytest.raises(ValueError):
            FailureKind(category="INFRA", component="NONE")

    def test_retention_decade_lookup(self):
        truth = JobTruth(
            true_duration=100,
            final_status="COMPLETED",
            sm_util_steady=50,
            sm_util_warmup=10,
            warmup_seconds=0,
            logs_progress=True,
            pack_slowdown_table={5: Fraction(1, 2)},
        )
        assert truth.retention_for(55.0) == Fraction(1, 2)
        assert truth.retention_for(49.9) == Fraction(1)  # unlisted decade
        assert truth.retention_for(100.0) == Fraction(1)  # decade capped at 10

    def test_failure_offset_must_precede_end(self):
        with pytest.raises(ValueError):
            JobTruth(
                true_duration=100,
                final_status="COMPLETED",
                sm_util_steady=50,
                sm_util_warmup=10,
                warmup_seconds=0,
                logs_progress=True,
                failure_events=((100, FailureKind("INFRA", "GPU")),),
            )


jobs_strategy = st.lists(
    st.tuples(
        st.integers(min_value=0, max_value=10_000),  # submit_time
        st.integers(min_value=1, max_value=100_000),  # true_duration
        st.integers(min_value=1, max_value=16),  # num_gpus
        st.sampled_from(["COMPLETED", "FAILED", "CANCELED"]),
        st.booleans(),
    ),
    min_size=1,
    max_size=20,
)


@given(jobs_strategy)
def test_trace_round_trip(rows):
    jobs = []
    for i, (submit, dur, gpus, status, logs) in enumerate(rows):
        events = ()
        if status == "FAILED" and dur > 1:
            events = ((dur // 2, FailureKind("USER_SCRIPT", "NONE")),)
        jobs.append(
            (
                JobSpec(job_id=f"j{i}", user="u", job_name="n", submit_time=submit,
                        num_gpus=gpus),
                JobTruth(true_duration=dur, final_status=status, sm_util_steady=42.5,
                         sm_util_warmup=10.0, warmup_seconds=0, logs_progress=logs,
                         failure_events=events,
                         pack_slowdown_table={3: Fraction(7, 10)}),
            )
        )
    text = serialize_trace(jobs)
    assert parse_trace_text(text) == jobs


class TestTraceErrors:
    def test_missing_column_names_reported(self):
        with pytest.raises(TraceError, match="job_id"):
            parse_trace_text("user,job_name\nu,n\n")

    def test_duplicate_job_ids_rejected(self):
        jobs = [
            (
                JobSpec(job_id="dup", user="u", job_name="n", submit_time=0, num_gpus=1),
                JobTruth(true_duration=10, final_status="COMPLETED", sm_util_steady=1,
                         sm_util_warmup=1, warmup_seconds=0, logs_progress=True),
            )
        ] * 2
        with pytest.raises(TraceError, match="dup"):
            parse_trace_text(serialize_trace(jobs))

    def test_bad_row_reports_row_number(self):
        jobs = [
            (
                JobSpec(job_id="a", user="u", job_name="n", submit_time=0, num_gpus=1),
                JobTruth(true_duration=10, final_status="COMPLETED", sm_util_steady=1,
                         sm_util_warmup=1, warmup_seconds=0, logs_progress=True),
            )
        ]
        text = serialize_trace(jobs).replace(",10,", ",not-a-number,")
        with pytest.raises(TraceError, match="row 2"):
            parse_trace_text(text)


def rec(job_id, queue, run, submit=0):
    return JobRecord(job_id=job_id, submit_time=submit, queue_s=queue, run_s=run,
                     restarts=0, evictions=0, final_status="COMPLETED")


class TestComputeReport:
    def test_single_job(self):
        report = compute_report([rec("a", 5, 10)])
        assert report.avg_jct_s == 15
        assert report.p99_jct_s == 15
        assert report.makespan_s == 15
        assert report.jct_cdf == ((15, 1.0),)

    def test_p99_nearest_rank(self):
        records = [rec(f"j{i}", 0, i + 1) for i in range(200)]
        report = compute_report(records)
        # ceil(0.99 * 200) = 198 -> the 198th smallest JCT.
        assert report.p99_jct_s == 198

    def test_makespan_accounts_for_submit_time(self):
        report = compute_report([rec("a", 0, 10, submit=0), rec("b", 0, 5, submit=100)])
        assert report.makespan_s == 105

    def test_cdf_merges_duplicate_jcts(self):
        report = compute_report([rec("a", 0, 10), rec("b", 0, 10), rec("c", 0, 20)])
        assert report.jct_cdf == ((10, 2 / 3), (20, 1.0))

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            compute_report([])


class TestRmsre:
    def test_pinned_example(self):
        assert rmsre([(150, 100), (50, 100)]) == pytest.approx(0.5)

    def test_perfect_estimates(self):
        assert rmsre([(10, 10), (3, 3)]) == 0.0

    def test_rejects_nonpositive_truth(self):
        with pytest.raises(ValueError):
            rmsre([(1, 0)])


class TestConfigs:
    def test_sim_config_validation(self):
        with pytest.raises(ValueError):
            SimConfig(detection_rate=1.5)
        with pytest.raises(ValueError):
            SimConfig(checkpoint_interval_s=0)
