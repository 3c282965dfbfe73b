import pytest

from semsched.core import ClusterSpec, SimConfig
from semsched.corpus import CorpusSpec
from semsched.harness import (
    compare_policies,
    eval_advisor,
    eval_tracker,
    eval_triage,
    format_ratio,
)


class TestFormatRatio:
    def test_pinned_example(self):
        assert format_ratio(6.85, 5.53) == "1.24"

    def test_identity(self):
        assert format_ratio(3.0, 3.0) == "1.00"

    def test_rejects_zero_denominator(self):
        with pytest.raises(ValueError):
            format_ratio(1.0, 0.0)


class TestSuites:
    def test_advisor_suite_perfect_on_clean_corpus(self):
        result = eval_advisor(num_groups=10, seed=1)
        assert result["retrieval_precision"] == 1.0
        assert result["duration_rmsre"] < 0.06

    def test_tracker_suite_exact_on_clean_logs(self):
        result = eval_tracker(num_logs=10, seed=1)
        assert result["extraction_failures"] == 0
        assert result["max_relative_error"] == 0.0
        assert result["call_economy"] > 10

    def test_triage_suite_counts(self):
        result = eval_triage(num_logs=20, infra_logs=5, lines_per_log=1024, seed=1)
        assert result["located_exact"] == 20
        assert result["confusion"] == {"tp": 5, "fp": 0, "fn": 0, "tn": 15}
        assert result["max_classifier_calls"] <= result["classifier_call_bound"]


class TestComparePolicies:
    def test_ratios_against_first_policy(self, tmp_path):
        corpus = CorpusSpec(num_jobs=12)
        cluster = ClusterSpec(nodes=4, gpus_per_node=4)
        result = compare_policies(["fifo", "oracle-sjf"], corpus, cluster,
                                  SimConfig(), metadata_dir=tmp_path)
        assert result["baseline"] == "fifo"
        assert result["policies"]["fifo"]["improvement_over_baseline"] == "1.00"
        ratio = float(result["policies"]["oracle-sjf"]["improvement_over_baseline"])
        assert ratio >= 1.0  # oracle SJF cannot be worse than FIFO on avg JCT
