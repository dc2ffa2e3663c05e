"""CSV report tables: RMSE buckets, error histograms, policy comparison."""

from __future__ import annotations

import math
import os

import pytest

from buildbatch.core import (
    BatchSizeReason,
    Build,
    BuildFlags,
    ContextKind,
    ExecutionContext,
    ExecutionStats,
    Outcome,
    Priority,
    Target,
)
from buildbatch.estimators import ConstantEstimator, ErrorEstimator
from buildbatch.regression import ModelKind
from buildbatch.reporting import (
    collect_prediction_pairs,
    comparison_rows,
    error_histogram,
    reason_rows,
    rmse,
    rmse_by_actual_bucket,
    write_csv,
    write_report,
)
from buildbatch.simulator import ExecutionRecord, Metrics

CTX = ExecutionContext(ContextKind.WORKSPACE, "w")
FLAGS = BuildFlags()


def test_rmse_hand_values():
    assert rmse([]) == 0.0
    assert rmse([(1.0, 3.0)]) == pytest.approx(2.0)
    assert rmse([(0.0, 3.0), (0.0, -4.0)]) == pytest.approx(math.sqrt(12.5))


def test_rmse_by_actual_bucket_edges_and_sides():
    pairs = [(1.0, 2.0), (2.0, 2.0), (3.0, 2.0), (4.0, 6.0), (10.0, 4.0)]
    rows = rmse_by_actual_bucket(pairs, (2.0, 4.0))
    assert [r["count"] for r in rows] == [1, 2, 2]
    assert rows[0]["bucket_low"] == -math.inf
    assert rows[0]["count_over"] == 1 and rows[0]["rmse_over"] == pytest.approx(1.0)
    # actual exactly on an edge lands in the bucket that starts there
    assert rows[1]["count_over"] == 0 and rows[1]["count_under"] == 1
    assert rows[1]["rmse"] == pytest.approx(math.sqrt(0.5))
    assert rows[2]["bucket_high"] == math.inf
    assert rows[2]["rmse_over"] == pytest.approx(2.0)
    assert rows[2]["rmse_under"] == pytest.approx(6.0)


def test_error_histogram_bins_and_outliers():
    pairs = [
        (3.0, 0.0),   # error -3, below range
        (2.0, 0.0),   # -2, first bin
        (0.5, 0.0),   # -0.5
        (1.0, 1.0),   # 0
        (0.0, 1.99),  # 1.99, last bin
        (0.0, 2.0),   # 2, above range
        (0.0, 5.0),   # above range
    ]
    rows = error_histogram(pairs, bin_width=1.0, lo=-2.0, hi=2.0)
    assert len(rows) == 6  # 4 bins plus two outlier rows
    assert [r["count"] for r in rows] == [1, 1, 1, 1, 1, 2]
    assert sum(r["count"] for r in rows) == len(pairs)
    assert rows[1]["error_low"] == -2.0 and rows[1]["error_high"] == -1.0
    with pytest.raises(ValueError):
        error_histogram(pairs, bin_width=0.0, lo=-1.0, hi=1.0)
    with pytest.raises(ValueError):
        error_histogram(pairs, bin_width=1.0, lo=1.0, hi=1.0)


def test_reason_rows_sorted_with_shares():
    m = Metrics(reason_counts={"MAX_MEMORY": 3, "ALL_REMAINING_TARGETS": 1})
    rows = reason_rows(m)
    assert [r["reason"] for r in rows] == ["ALL_REMAINING_TARGETS", "MAX_MEMORY"]
    assert rows[0]["share"] == pytest.approx(0.25)
    assert reason_rows(Metrics()) == []


def test_comparison_rows_one_per_policy():
    rows = comparison_rows(
        {
            "naive900": Metrics(build_count=10, oom_count=5),
            "btbs": Metrics(build_count=20, oom_count=1, mean_batch_size=55.0),
        }
    )
    assert [r["policy"] for r in rows] == ["btbs", "naive900"]
    assert rows[0]["oom_rate"] == pytest.approx(0.05)
    assert rows[0]["mean_batch_size"] == 55.0
    assert rows[1]["oom_count"] == 5


def _record() -> ExecutionRecord:
    targets = (Target("//p:a"), Target("//p:b"))
    build = Build(
        id="r-1", context=CTX, flags=FLAGS, targets=targets,
        reason=BatchSizeReason.ALL_REMAINING_TARGETS, priority=Priority.MEDIUM,
    )
    stats = ExecutionStats(
        build_id="r-1", peak_heap_gb=4.0, gc_occurred=False, exec_time_s=100.0,
        total_executor_service_time_esu_s=50.0, outcome=Outcome.OK,
    )
    return ExecutionRecord(build, stats, depth=0, attempt=0, group_key="x86")


def test_collect_prediction_pairs_skips_dead_estimators():
    mem_pairs, occ_pairs = collect_prediction_pairs(
        [_record()],
        ConstantEstimator(ModelKind.MEMORY, value=2.5),
        ErrorEstimator(ModelKind.OCCUPANCY),
        CTX, FLAGS, Priority.MEDIUM,
    )
    assert mem_pairs == [(4.0, 2.5)]
    assert occ_pairs == []


def test_collect_prediction_pairs_uses_labels():
    mem_pairs, occ_pairs = collect_prediction_pairs(
        [_record()],
        ConstantEstimator(ModelKind.MEMORY),
        ConstantEstimator(ModelKind.OCCUPANCY, value=1.0),
        CTX, FLAGS, Priority.MEDIUM,
    )
    assert mem_pairs[0][0] == 4.0   # raw peak, no gc
    assert occ_pairs[0][0] == pytest.approx(0.5)  # 50 esu-s over 100 s


def test_write_csv_round_trip(tmp_path):
    path = tmp_path / "t.csv"
    write_csv(str(path), [{"a": 1, "b": 2.5}, {"a": 3, "b": -1.0}])
    lines = path.read_text().splitlines()
    assert lines == ["a,b", "1,2.5", "3,-1.0"]
    write_csv(str(path), [])
    assert path.read_text() == ""


def test_write_report_emits_expected_files(tmp_path):
    out = tmp_path / "report"
    written = write_report(
        str(out),
        {"p": Metrics(build_count=1, reason_counts={"max_memory": 1})},
        memory_pairs={"p": [(4.0, 3.5)]},
        occupancy_pairs={"p": []},
    )
    names = sorted(os.path.basename(p) for p in written)
    assert names == [
        "memory_error_histogram_p.csv",
        "memory_rmse_by_actual_p.csv",
        "occupancy_error_histogram_p.csv",
        "occupancy_rmse_by_actual_p.csv",
        "policy_comparison.csv",
        "reasons_p.csv",
    ]
    assert all(os.path.exists(p) for p in written)
    comparison = (out / "policy_comparison.csv").read_text().splitlines()
    assert len(comparison) == 2 and comparison[1].startswith("p,")


def test_write_report_with_no_runs_writes_empty_comparison(tmp_path):
    out = tmp_path / "empty"
    written = write_report(str(out), {})
    assert [os.path.basename(p) for p in written] == ["policy_comparison.csv"]
    assert (out / "policy_comparison.csv").read_text() == ""
