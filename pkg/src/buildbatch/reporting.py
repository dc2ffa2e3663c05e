"""Accuracy and impact tables from experiment output.

Emits CSV files: build-count distribution by batch size reason, a
policy comparison table, RMSE of the estimators grouped by the actual
(measured) value with separate over/underestimation series, and error
histograms. Everything is plain CSV so any plotting tool can pick the
numbers up.
"""

from __future__ import annotations

import csv
import math
import os
from typing import Mapping, Sequence

from .batching import EstimateError, Estimator
from .core import BuildFlags, ExecutionContext, Priority
from .pipeline import memory_label, occupancy_label
from .simulator import ExecutionRecord, Metrics

Pair = tuple[float, float]  # (actual, predicted)


def collect_prediction_pairs(
    records: Sequence[ExecutionRecord],
    mem_est: Estimator,
    occ_est: Estimator,
    context: ExecutionContext,
    flags: BuildFlags,
    priority: Priority,
) -> tuple[list[Pair], list[Pair]]:
    """(actual, predicted) pairs per executed build, for both estimators.

    Builds whose estimate raises are left out of the corresponding
    series so a dead estimator still yields a (possibly empty) table.
    """
    mem_pairs: list[Pair] = []
    occ_pairs: list[Pair] = []
    for rec in records:
        try:
            predicted_mem = mem_est.estimate(context, flags, priority, rec.build.targets)
            mem_pairs.append((memory_label(rec.stats), predicted_mem))
        except EstimateError:
            pass
        try:
            predicted_occ = occ_est.estimate(context, flags, priority, rec.build.targets)
            occ_pairs.append((occupancy_label(rec.stats), predicted_occ))
        except EstimateError:
            pass
    return mem_pairs, occ_pairs


def rmse(pairs: Sequence[Pair]) -> float:
    if not pairs:
        return 0.0
    return math.sqrt(sum((a - p) ** 2 for a, p in pairs) / len(pairs))


def rmse_by_actual_bucket(
    pairs: Sequence[Pair], edges: Sequence[float]
) -> list[dict]:
    """RMSE per actual-value bucket, split into over- and underestimates.

    Bucket k covers [edges[k-1], edges[k]); the first bucket starts at
    -inf and a final bucket catches everything at or above the last
    edge. Overestimates are pairs with predicted > actual.
    """
    rows = []
    bounds = [(-math.inf, edges[0])]
    bounds += [(edges[i - 1], edges[i]) for i in range(1, len(edges))]
    bounds.append((edges[-1], math.inf))
    for lo, hi in bounds:
        in_bucket = [(a, p) for a, p in pairs if lo <= a < hi]
        over = [(a, p) for a, p in in_bucket if p > a]
        under = [(a, p) for a, p in in_bucket if p < a]
        rows.append(
            {
                "bucket_low": lo,
                "bucket_high": hi,
                "count": len(in_bucket),
                "rmse": rmse(in_bucket),
                "count_over": len(over),
                "rmse_over": rmse(over),
                "count_under": len(under),
                "rmse_under": rmse(under),
            }
        )
    return rows


def error_histogram(
    pairs: Sequence[Pair], bin_width: float, lo: float, hi: float
) -> list[dict]:
    """Signed error (predicted - actual) counts in fixed-width bins."""
    if bin_width <= 0 or hi <= lo:
        raise ValueError("need positive bin_width and hi > lo")
    n_bins = int(round((hi - lo) / bin_width))
    counts = [0] * n_bins
    below = above = 0
    for a, p in pairs:
        err = p - a
        if err < lo:
            below += 1
        elif err >= hi:
            above += 1
        else:
            counts[int((err - lo) / bin_width)] += 1
    rows = [{"error_low": -math.inf, "error_high": lo, "count": below}]
    for k in range(n_bins):
        rows.append(
            {
                "error_low": lo + k * bin_width,
                "error_high": lo + (k + 1) * bin_width,
                "count": counts[k],
            }
        )
    rows.append({"error_low": hi, "error_high": math.inf, "count": above})
    return rows


def reason_rows(metrics: Metrics) -> list[dict]:
    total = sum(metrics.reason_counts.values()) or 1
    return [
        {"reason": reason, "builds": count, "share": count / total}
        for reason, count in sorted(metrics.reason_counts.items())
    ]


def comparison_rows(named: Mapping[str, Metrics]) -> list[dict]:
    rows = []
    for name in sorted(named):
        m = named[name]
        rows.append(
            {
                "policy": name,
                "builds": m.build_count,
                "retries": m.retry_count,
                "gave_up": m.gave_up_count,
                "mean_batch_size": m.mean_batch_size,
                "oom_count": m.oom_count,
                "oom_rate": m.oom_rate,
                "de_type_i_count": m.de_type_i_count,
                "de_type_i_rate": m.de_type_i_rate,
                "de_type_ii_count": m.de_type_ii_count,
                "de_type_ii_rate": m.de_type_ii_rate,
            }
        )
    return rows


def write_csv(path: str, rows: Sequence[dict]) -> None:
    if not rows:
        with open(path, "w", newline="", encoding="utf-8") as f:
            f.write("")
        return
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)


MEMORY_BUCKET_EDGES_GB = (1.0, 2.0, 4.0, 7.0, 9.0, 13.0)
OCCUPANCY_BUCKET_EDGES_ESU = (50.0, 100.0, 200.0, 350.0, 500.0, 600.0)


def write_report(
    out_dir: str,
    named_metrics: Mapping[str, Metrics],
    memory_pairs: Mapping[str, Sequence[Pair]] = {},
    occupancy_pairs: Mapping[str, Sequence[Pair]] = {},
) -> list[str]:
    """All report CSVs for a set of policy runs; returns written paths."""
    os.makedirs(out_dir, exist_ok=True)
    written = []

    def emit(name: str, rows: Sequence[dict]) -> None:
        path = os.path.join(out_dir, name)
        write_csv(path, rows)
        written.append(path)

    emit("policy_comparison.csv", comparison_rows(named_metrics))
    for policy, metrics in sorted(named_metrics.items()):
        emit(f"reasons_{policy}.csv", reason_rows(metrics))
    for policy, pairs in sorted(memory_pairs.items()):
        emit(
            f"memory_rmse_by_actual_{policy}.csv",
            rmse_by_actual_bucket(pairs, MEMORY_BUCKET_EDGES_GB),
        )
        emit(
            f"memory_error_histogram_{policy}.csv",
            error_histogram(pairs, bin_width=0.5, lo=-8.0, hi=8.0),
        )
    for policy, pairs in sorted(occupancy_pairs.items()):
        emit(
            f"occupancy_rmse_by_actual_{policy}.csv",
            rmse_by_actual_bucket(pairs, OCCUPANCY_BUCKET_EDGES_ESU),
        )
        emit(
            f"occupancy_error_histogram_{policy}.csv",
            error_histogram(pairs, bin_width=25.0, lo=-400.0, hi=400.0),
        )
    return written
