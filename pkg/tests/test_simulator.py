"""Cost oracle, fluid execution model, workload generator, experiments."""

from __future__ import annotations

import dataclasses

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from buildbatch.batching import BatchingConfig
from buildbatch.core import (
    BatchSizeReason,
    Build,
    BuildFlags,
    ContextKind,
    DeType,
    ExecutionContext,
    ExecutionStats,
    Outcome,
    Priority,
    Target,
)
from buildbatch.estimators import OracleEstimator
from buildbatch.grouping import group_and_sort
from buildbatch.regression import ModelKind
from buildbatch.simulator import (
    ClusterConfig,
    CostOracle,
    ExecutionRecord,
    Metrics,
    UnknownTarget,
    WorkloadParams,
    aggregate_metrics,
    check_experiment_invariants,
    execute,
    generate_workload,
    load_cluster_config,
    load_workload_params,
    run_experiment,
    simulate_prior_builds,
)

CTX = ExecutionContext(ContextKind.WORKSPACE, "w")
X, Y, Z = Target("//m/a:x"), Target("//m/a:y"), Target("//n/b:z")


def _toy_oracle() -> CostOracle:
    # x deps {0,1}, y deps {1,2}, z dep {3}; costs 1,2,4,8; base 0.5.
    return CostOracle(
        seed=9,
        base_memory_gb=0.5,
        labels=["//m/a:x", "//m/a:y", "//n/b:z"],
        dep_flat=np.array([0, 1, 1, 2, 3], dtype=np.int64),
        dep_offsets=np.array([0, 2, 4, 5], dtype=np.int64),
        dep_cost=np.array([1.0, 2.0, 4.0, 8.0]),
        service_esu_s=np.array([100.0, 200.0, 300.0]),
        critical_path_s=np.array([10.0, 20.0, 30.0]),
        demand_esu=np.array([1.0, 2.0, 3.0]),
    )


def _build(targets, build_id: str = "b-1") -> Build:
    return Build(
        id=build_id,
        context=CTX,
        flags=BuildFlags(),
        targets=tuple(targets),
        reason=BatchSizeReason.ALL_REMAINING_TARGETS,
        priority=Priority.MEDIUM,
    )


def test_true_memory_counts_shared_deps_once():
    o = _toy_oracle()
    assert o.true_memory([X]) == pytest.approx(3.5)
    assert o.true_memory([Y]) == pytest.approx(6.5)
    assert o.true_memory([X, Y]) == pytest.approx(7.5)  # dep 1 shared
    assert o.true_memory([X, Z]) == pytest.approx(11.5)  # disjoint, additive
    assert o.true_memory([X, Y, Z]) == pytest.approx(15.5)


def test_memory_of_window_matches_true_memory_across_head_switches():
    o = _toy_oracle()
    assert o.memory_of_window([X]) == pytest.approx(3.5)
    assert o.memory_of_window([X, Y]) == pytest.approx(7.5)
    assert o.memory_of_window([X, Y, Z]) == pytest.approx(15.5)
    # New head resets the accumulator; returning to the old head rebuilds it.
    assert o.memory_of_window([Y, Z]) == pytest.approx(o.true_memory([Y, Z]))
    assert o.memory_of_window([X, Y]) == pytest.approx(7.5)


def test_occupancy_and_timing_lookups():
    o = _toy_oracle()
    assert o.true_occupancy([X, Y, Z]) == pytest.approx(6.0)
    assert o.service_time([X, Y]) == pytest.approx(300.0)
    assert o.critical_path([X, Y, Z]) == pytest.approx(30.0)


def test_oracle_rejects_unknown_targets():
    o = _toy_oracle()
    with pytest.raises(UnknownTarget):
        o.true_memory([Target("//nope:t")])
    with pytest.raises(UnknownTarget):
        o.memory_of_window([Target("//nope:t")])
    with pytest.raises(UnknownTarget):
        o.memory_of_window([X, Target("//nope:t")])
    with pytest.raises(UnknownTarget):
        o.memory_of_window([])


def test_execute_oom_wins_over_deadline():
    o = _toy_oracle()
    cfg = ClusterConfig(deadline_s=10.0, cache_hit_rate=0.0, gc_probability=1.0)
    stats = execute(o, cfg, _build([X, Y, Z]))
    assert stats.outcome is Outcome.OOM
    assert stats.de_type is None
    assert stats.peak_post_gc_heap_gb == pytest.approx(15.5)  # gc forced
    assert 15.5 <= stats.peak_heap_gb <= 15.5 * 1.25


def test_execute_type_i_when_demand_exceeds_executors():
    o = _toy_oracle()
    cfg = ClusterConfig(
        concurrent_executor_limit_esu=2.0, deadline_s=50.0,
        cache_hit_rate=0.0, gc_probability=0.0,
    )
    stats = execute(o, cfg, _build([X, Y]))  # demand 3 over a 2-ESU limit
    assert stats.outcome is Outcome.DEADLINE_EXCEEDED
    assert stats.de_type is DeType.TYPE_I
    assert stats.exec_time_s == pytest.approx(150.0)  # 300 svc over 2 ESU


def test_execute_type_ii_when_critical_path_is_too_long():
    o = _toy_oracle()
    cfg = ClusterConfig(deadline_s=25.0, cache_hit_rate=0.0, gc_probability=0.0)
    stats = execute(o, cfg, _build([Z]))  # exec 100s under no contention
    assert stats.outcome is Outcome.DEADLINE_EXCEEDED
    assert stats.de_type is DeType.TYPE_II


def test_execute_cache_hit_short_circuits():
    o = _toy_oracle()
    cfg = ClusterConfig(cache_hit_rate=1.0, gc_probability=0.0)
    stats = execute(o, cfg, _build([X]))
    assert stats.outcome is Outcome.OK
    assert stats.total_executor_service_time_esu_s == 0.0
    assert stats.exec_time_s == 60.0


def test_execute_retries_run_warmer():
    o = _toy_oracle()
    cfg = ClusterConfig(cache_hit_rate=0.0, gc_probability=0.0)
    cold = execute(o, cfg, _build([X]), attempt=0)
    warm = execute(o, cfg, _build([X]), attempt=1)
    assert cold.exec_time_s == pytest.approx(100.0)
    assert warm.exec_time_s == pytest.approx(40.0)  # (1 - 0.6)^1 of the work


def test_execute_is_deterministic_per_attempt():
    o = _toy_oracle()
    cfg = ClusterConfig()
    assert execute(o, cfg, _build([X, Y])) == execute(o, cfg, _build([X, Y]))
    again = execute(o, cfg, _build([X, Y]), attempt=1)
    assert again == execute(o, cfg, _build([X, Y]), attempt=1)


def test_execute_without_gc_reports_raw_peak_only():
    o = _toy_oracle()
    cfg = ClusterConfig(cache_hit_rate=0.0, gc_probability=0.0)
    stats = execute(o, cfg, _build([X]))
    assert stats.peak_post_gc_heap_gb is None
    assert stats.peak_heap_gb >= 3.5


def test_cluster_config_validation():
    with pytest.raises(ValueError):
        ClusterConfig(worker_memory_gb=0.0)
    with pytest.raises(ValueError):
        ClusterConfig(deadline_s=-1.0)
    with pytest.raises(ValueError):
        ClusterConfig(cache_hit_rate=1.5)


def test_config_files_load(tmp_path):
    cpath = tmp_path / "cluster.toml"
    cpath.write_text("worker_memory_gb = 20.0\ngc_probability = 0.5\n")
    cluster = load_cluster_config(str(cpath))
    assert cluster.worker_memory_gb == 20.0
    assert cluster.deadline_s == 5400.0

    wpath = tmp_path / "workload.toml"
    wpath.write_text("dep_pool_size = 100\nheavy_cost_range_gb = [2.0, 3.0]\n")
    params = load_workload_params(str(wpath))
    assert params.dep_pool_size == 100
    assert params.heavy_cost_range_gb == (2.0, 3.0)


def test_generate_workload_is_deterministic():
    t1, o1 = generate_workload(4, 500)
    t2, o2 = generate_workload(4, 500)
    assert t1 == t2
    probe = t1[:25]
    assert o1.true_memory(probe) == o2.true_memory(probe)
    assert o1.true_occupancy(probe) == o2.true_occupancy(probe)


def test_generate_workload_shape():
    targets, oracle = generate_workload(2, 300)
    assert len(targets) == 300
    assert len({t.label for t in targets}) == 300
    assert all(t.label.startswith("//area") for t in targets)
    single, _ = generate_workload(2, 1)
    assert len(single) == 1
    with pytest.raises(ValueError):
        generate_workload(2, 0)


def test_generate_workload_tag_fractions():
    params = dataclasses.replace(WorkloadParams(), gpu_fraction=0.2)
    targets, _ = generate_workload(3, 1000, params)
    gpu = sum(1 for t in targets if "requires-gpu" in t.tags)
    # Binomial(1000, 0.2): five sigma around the mean.
    assert 137 <= gpu <= 263


@given(st.data())
def test_oracle_window_consistency(small_workload, data):
    targets, oracle = small_workload
    start = data.draw(st.integers(0, len(targets) - 1))
    length = data.draw(st.integers(1, 40))
    window = targets[start : start + length]

    cums = [oracle.memory_of_window(window[: k + 1]) for k in range(len(window))]
    assert cums[-1] == pytest.approx(oracle.true_memory(window), rel=1e-12)
    assert all(a <= b + 1e-12 for a, b in zip(cums, cums[1:]))

    singles = sum(oracle.true_occupancy([t]) for t in window)
    assert oracle.true_occupancy(window) == pytest.approx(singles, rel=1e-9)
    assert oracle.critical_path(window) == max(oracle.critical_path([t]) for t in window)


def _oracle_estimators(oracle):
    return (
        OracleEstimator(ModelKind.MEMORY, oracle.memory_of_window),
        OracleEstimator(ModelKind.OCCUPANCY, oracle.true_occupancy),
    )


def test_run_experiment_with_oracle_estimates_is_clean(small_workload):
    targets, oracle = small_workload
    cfg = BatchingConfig()
    mem, occ = _oracle_estimators(oracle)
    metrics, records = run_experiment(targets, oracle, ClusterConfig(), cfg, mem, occ)

    multi_ooms = [
        r for r in records
        if r.stats.outcome is Outcome.OOM and len(r.build.targets) > 1
    ]
    assert multi_ooms == []
    assert check_experiment_invariants(records, targets, batch_cfg=cfg) == []
    assert metrics.total_targets_batched == len(targets)
    assert metrics.build_count == len(records)
    assert metrics.initial_build_count + metrics.retry_count == metrics.build_count
    assert sum(metrics.reason_counts.values()) == metrics.build_count
    assert metrics.mean_batch_size > 0


def test_check_experiment_invariants_flags_lost_targets(small_workload):
    targets, oracle = small_workload
    cfg = BatchingConfig()
    mem, occ = _oracle_estimators(oracle)
    _, records = run_experiment(targets, oracle, ClusterConfig(), cfg, mem, occ)
    initial = [r for r in records if r.depth == 0]
    dropped = [r for r in records if r is not initial[0]]
    assert check_experiment_invariants(dropped, targets, batch_cfg=cfg) != []


def test_aggregate_metrics_hand_counts():
    ok = ExecutionRecord(
        build=_build([X, Y], "a"),
        stats=ExecutionStats(
            build_id="a", peak_heap_gb=2.0, gc_occurred=False, exec_time_s=10.0,
            total_executor_service_time_esu_s=5.0, outcome=Outcome.OK,
        ),
        depth=0, attempt=0, group_key="x86",
    )
    oom = ExecutionRecord(
        build=_build([Z], "b"),
        stats=ExecutionStats(
            build_id="b", peak_heap_gb=14.0, gc_occurred=False, exec_time_s=10.0,
            total_executor_service_time_esu_s=5.0, outcome=Outcome.OOM,
        ),
        depth=1, attempt=1, group_key="x86",
    )
    m = aggregate_metrics([ok, oom], gave_up=1)
    assert m.build_count == 2
    assert m.initial_build_count == 1 and m.retry_count == 1
    assert m.oom_count == 1 and m.gave_up_count == 1
    assert m.total_targets_batched == 2  # only depth-0 builds count
    assert m.mean_batch_size == pytest.approx(1.5)
    assert m.reason_counts == {BatchSizeReason.ALL_REMAINING_TARGETS.value: 2}
    assert m.oom_rate == pytest.approx(0.5)
    assert Metrics().oom_rate == 0.0


def test_metrics_json_round_trip():
    m = Metrics(
        build_count=3, initial_build_count=2, retry_count=1, oom_count=1,
        de_type_i_count=1, total_targets_batched=40, mean_batch_size=20.0,
        reason_counts={"MAX_MEMORY": 2, "ONLY_ONE_TARGET": 1},
    )
    assert Metrics.from_json_obj(m.to_json_obj()) == m


def test_simulate_prior_builds_shape(small_workload):
    targets, oracle = small_workload
    records = simulate_prior_builds(
        targets, oracle, ClusterConfig(), n_builds=40, seed=0, now=1_700_000_000.0
    )
    assert len(records) >= 40
    times = [r.timestamp for r in records]
    assert times == sorted(times)
    for r in records:
        assert 1 <= len(r.targets) <= 140
        assert len(group_and_sort(r.targets)) == 1  # one executor group per build
        assert r.meta.user == "" and r.meta.product_area == "" and r.meta.tool_tag == ""
        assert r.meta.command in ("build", "test", "query")
        assert r.stats.build_id.startswith("hist-")


def test_simulate_prior_builds_is_deterministic(small_workload):
    targets, oracle = small_workload
    kwargs = dict(n_builds=15, seed=6, now=1_700_000_000.0)
    a = simulate_prior_builds(targets, oracle, ClusterConfig(), **kwargs)
    b = simulate_prior_builds(targets, oracle, ClusterConfig(), **kwargs)
    assert a == b
