"""A synthetic build cluster with a hidden ground-truth cost oracle.

The workload generator lays targets out in packages under areas. Each
package draws a dependency set from a shared pool, so targets that sort
next to each other share dependencies and batching them is cheaper than
building them apart. A configurable fraction of areas is "light": all
packages in such an area draw from one small area-local pool, which
keeps even very large batches cheap on memory while their executor
demand still grows with every target. That split is what gives the two
failure modes separate causes: out-of-memory comes from dependency-set
unions, deadline pressure from executor demand.

Execution uses a fluid queueing model. A build's memory is the summed
cost of its distinct dependencies plus a base; its executor demand is
the sum of per-target demand (service time / critical path); execution
time is max(critical path, service / min(demand, limit)). Demand above
the concurrency limit stretches execution, and a build that stretches
past the deadline is a Type I deadline failure; a build whose critical
path alone is too long is Type II. Memory above the worker's allocation
is an OOM. Retried builds run warmer: action caches cut service and
critical path by retry_warm_fraction per attempt.
"""

from __future__ import annotations

import dataclasses
import itertools
import math
from collections import deque
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .batching import (
    BatchingConfig,
    Estimator,
    RETRY_DEPTH_LIMIT,
    RetryKind,
    batch_targets,
    retry_policy,
)
from .core import (
    BatchSizeReason,
    Build,
    BuildFlags,
    ContextKind,
    DeType,
    ExecutionContext,
    ExecutionStats,
    Outcome,
    Priority,
    RequestMeta,
    Target,
    sort_targets,
)
from .features import fnv1a64
from .grouping import DEFAULT_RULES, InferenceRule, group_and_sort
from .pipeline import LogRecord

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib


class UnknownTarget(KeyError):
    """The oracle was asked about a target outside its workload."""


@dataclass(frozen=True)
class ClusterConfig:
    worker_memory_gb: float = 13.0
    concurrent_executor_limit_esu: float = 600.0
    deadline_s: float = 5400.0
    cache_hit_rate: float = 0.05
    gc_probability: float = 0.8
    retry_warm_fraction: float = 0.6

    def __post_init__(self):
        if self.worker_memory_gb <= 0 or self.concurrent_executor_limit_esu <= 0:
            raise ValueError("memory and executor limits must be positive")
        if self.deadline_s <= 0:
            raise ValueError("deadline must be positive")
        for name in ("cache_hit_rate", "gc_probability", "retry_warm_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")


def load_cluster_config(path: str) -> ClusterConfig:
    with open(path, "rb") as f:
        doc = tomllib.load(f)
    return ClusterConfig(**doc)


@dataclass(frozen=True)
class WorkloadParams:
    """Knobs for synthetic workload shape. Defaults are tuned so that
    unbatched-by-cost policies visibly OOM and queue while cost-aware
    ones do not; they are benchmarks, not claims about any real fleet."""

    mean_targets_per_package: float = 8.0
    packages_per_area: int = 50
    light_area_fraction: float = 0.3
    dep_pool_size: int = 4000
    area_pool_size: int = 40
    package_dep_count: int = 30
    private_dep_count: int = 1
    dep_cost_median_gb: float = 0.015
    private_dep_cost_median_gb: float = 0.001
    dep_cost_sigma: float = 1.0
    base_memory_gb: float = 0.4
    heavy_target_fraction: float = 0.002
    heavy_cost_range_gb: tuple[float, float] = (7.0, 10.0)
    critical_path_range_s: tuple[float, float] = (1500.0, 1800.0)
    slow_target_fraction: float = 0.001
    slow_critical_path_range_s: tuple[float, float] = (5600.0, 6800.0)
    demand_median_esu: float = 3.5
    demand_sigma: float = 0.6
    gpu_fraction: float = 0.05
    mac_fraction: float = 0.05
    tpu_fraction: float = 0.02


def load_workload_params(path: str) -> WorkloadParams:
    with open(path, "rb") as f:
        doc = tomllib.load(f)
    for key in ("heavy_cost_range_gb", "critical_path_range_s", "slow_critical_path_range_s"):
        if key in doc:
            doc[key] = tuple(doc[key])
    return WorkloadParams(**doc)


class CostOracle:
    """Ground-truth costs for one generated workload.

    Memory is sublinear in targets: the cost of the union of their
    dependency sets, shared dependencies counted once, plus a base.
    Occupancy demand and service time are per-target additive. All
    lookups key off the target label.
    """

    def __init__(
        self,
        seed: int,
        base_memory_gb: float,
        labels: Sequence[str],
        dep_flat: np.ndarray,
        dep_offsets: np.ndarray,
        dep_cost: np.ndarray,
        service_esu_s: np.ndarray,
        critical_path_s: np.ndarray,
        demand_esu: np.ndarray,
    ):
        self.seed = seed
        self.base_memory_gb = base_memory_gb
        self._row = {label: i for i, label in enumerate(labels)}
        self._dep_flat = dep_flat
        self._dep_off = dep_offsets
        self._dep_cost = dep_cost
        self._svc = service_esu_s
        self._cp = critical_path_s
        self._demand = demand_esu
        # Window cache for memory probes: the batcher's binary searches
        # always ask about prefixes of one contiguous slice of a sorted
        # group, so costs accumulate incrementally per slice head.
        self._win_head: Optional[str] = None
        self._win_count = 0
        self._win_mask = np.zeros(0, dtype=bool)
        self._win_cum: list[float] = []

    def _rows(self, targets: Sequence[Target]) -> list[int]:
        try:
            return [self._row[t.label] for t in targets]
        except KeyError as e:
            raise UnknownTarget(str(e)) from e

    def _dep_ids(self, row: int) -> np.ndarray:
        return self._dep_flat[self._dep_off[row] : self._dep_off[row + 1]]

    def true_memory(self, targets: Sequence[Target]) -> float:
        """Base plus summed cost of the distinct deps across all targets."""
        rows = self._rows(targets)
        mask = np.zeros(len(self._dep_cost), dtype=bool)
        total = self.base_memory_gb
        for r in rows:
            ids = self._dep_ids(r)
            new = ids[~mask[ids]]
            if new.size:
                mask[new] = True
                total += float(self._dep_cost[new].sum())
        return total

    def memory_of_window(self, targets: Sequence[Target]) -> float:
        """true_memory for a prefix of the current window, cached.

        Valid because every probe within one batching slice shares the
        slice's first target; a new head resets the accumulator.
        """
        if not targets:
            raise UnknownTarget("empty target list")
        head = targets[0].label
        if head not in self._row:
            raise UnknownTarget(head)
        if self._win_head != head:
            self._win_head = head
            self._win_count = 0
            self._win_mask = np.zeros(len(self._dep_cost), dtype=bool)
            self._win_cum = []
        while self._win_count < len(targets):
            t = targets[self._win_count]
            row = self._row.get(t.label)
            if row is None:
                raise UnknownTarget(t.label)
            ids = self._dep_ids(row)
            new = ids[~self._win_mask[ids]]
            added = 0.0
            if new.size:
                self._win_mask[new] = True
                added = float(self._dep_cost[new].sum())
            prev = self._win_cum[-1] if self._win_cum else self.base_memory_gb
            self._win_cum.append(prev + added)
            self._win_count += 1
        return self._win_cum[len(targets) - 1]

    def true_occupancy(self, targets: Sequence[Target]) -> float:
        """Executor demand in ESU: sum of per-target service / critical path."""
        rows = self._rows(targets)
        return float(self._demand[rows].sum())

    def service_time(self, targets: Sequence[Target]) -> float:
        rows = self._rows(targets)
        return float(self._svc[rows].sum())

    def critical_path(self, targets: Sequence[Target]) -> float:
        rows = self._rows(targets)
        return float(self._cp[rows].max())


def generate_workload(
    seed: int, n_targets: int, params: WorkloadParams = WorkloadParams()
) -> tuple[list[Target], CostOracle]:
    """Deterministic synthetic workload: targets plus their cost oracle."""
    if n_targets < 1:
        raise ValueError("n_targets must be at least 1")
    rng = np.random.default_rng(seed)
    n_packages = max(1, round(n_targets / params.mean_targets_per_package))
    n_areas = (n_packages + params.packages_per_area - 1) // params.packages_per_area

    # Light areas form a leading block so label order yields long runs of
    # cheap targets; scattering them would let the expensive areas next door
    # dominate every window that crosses an area boundary.
    area_light = np.arange(n_areas) < round(n_areas * params.light_area_fraction)
    area_pools = [
        rng.choice(params.dep_pool_size, size=params.area_pool_size, replace=False)
        if area_light[a]
        else None
        for a in range(n_areas)
    ]
    package_deps = []
    for p in range(n_packages):
        pool = area_pools[p // params.packages_per_area]
        if pool is not None:
            package_deps.append(rng.choice(pool, size=params.package_dep_count, replace=False))
        else:
            package_deps.append(
                rng.choice(params.dep_pool_size, size=params.package_dep_count, replace=False)
            )

    # Spread targets over packages, at least one per package.
    sizes = rng.multinomial(max(0, n_targets - n_packages), np.full(n_packages, 1.0 / n_packages))
    sizes = sizes + 1

    # Outlier-memory targets live in heavy areas only; light areas must stay
    # cheap enough that oversized batches there fail on occupancy, not memory.
    package_of_target = np.repeat(np.arange(n_packages), sizes)[:n_targets]
    target_in_light_area = area_light[package_of_target // params.packages_per_area]
    heavy = (rng.random(n_targets) < params.heavy_target_fraction) & ~target_in_light_area
    n_heavy = int(heavy.sum())
    dep_cost = rng.lognormal(
        mean=math.log(params.dep_cost_median_gb),
        sigma=params.dep_cost_sigma,
        size=params.dep_pool_size,
    )
    heavy_costs = rng.uniform(*params.heavy_cost_range_gb, size=n_heavy)
    # Private deps are unique to their target (ids past the pool and heavy
    # ranges), so they add linearly and never alias across targets.
    private_costs = rng.lognormal(
        mean=math.log(params.private_dep_cost_median_gb),
        sigma=params.dep_cost_sigma,
        size=n_targets * params.private_dep_count,
    )
    dep_cost = np.concatenate([dep_cost, heavy_costs, private_costs])

    cp = rng.uniform(*params.critical_path_range_s, size=n_targets)
    # Slow critical paths live in heavy areas too. A slow target stretches
    # the execution time of every build that covers it, which deflates the
    # measured occupancy of its whole neighborhood; in heavy areas memory
    # caps batch sizes long before those deflated estimates could.
    slow = (rng.random(n_targets) < params.slow_target_fraction) & ~target_in_light_area
    cp[slow] = rng.uniform(*params.slow_critical_path_range_s, size=int(slow.sum()))
    demand = rng.lognormal(
        mean=math.log(params.demand_median_esu), sigma=params.demand_sigma, size=n_targets
    )
    svc = demand * cp

    tag_roll = rng.random(n_targets)
    g, m = params.gpu_fraction, params.mac_fraction

    targets: list[Target] = []
    labels: list[str] = []
    flat_parts: list[np.ndarray] = []
    offsets = np.zeros(n_targets + 1, dtype=np.int64)
    heavy_seen = 0
    i = 0
    for p in range(n_packages):
        area = p // params.packages_per_area
        pkg_label = f"//area{area:03d}/pkg{p:05d}"
        for j in range(sizes[p]):
            if i >= n_targets:
                break
            label = f"{pkg_label}:t{j:05d}"
            tags: tuple[str, ...] = ()
            if tag_roll[i] < g:
                tags = ("requires-gpu",)
            elif tag_roll[i] < g + m:
                tags = ("requires-mac",)
            elif tag_roll[i] < g + m + params.tpu_fraction:
                tags = ("requires-tpu",)
            targets.append(Target(label=label, tags=frozenset(tags), rule_kind="generated"))
            labels.append(label)
            k = params.private_dep_count
            first_private = params.dep_pool_size + n_heavy + i * k
            ids = np.concatenate(
                [package_deps[p], np.arange(first_private, first_private + k)]
            )
            if heavy[i]:
                ids = np.append(ids, params.dep_pool_size + heavy_seen)
                heavy_seen += 1
            ids = np.unique(ids).astype(np.int64)
            flat_parts.append(ids)
            offsets[i + 1] = offsets[i] + len(ids)
            i += 1
    oracle = CostOracle(
        seed=seed,
        base_memory_gb=params.base_memory_gb,
        labels=labels,
        dep_flat=np.concatenate(flat_parts),
        dep_offsets=offsets,
        dep_cost=dep_cost,
        service_esu_s=svc,
        critical_path_s=cp,
        demand_esu=demand,
    )
    return targets, oracle


def _build_rng(oracle_seed: int, attempt: int, build: Build) -> np.random.Generator:
    key = f"{oracle_seed}|{attempt}|{len(build.targets)}|{build.targets[0].label}|{build.targets[-1].label}"
    return np.random.default_rng(fnv1a64(key.encode("utf-8")))


def execute(
    oracle: CostOracle, cfg: ClusterConfig, build: Build, attempt: int = 0
) -> ExecutionStats:
    """Run one build against the fluid cluster model.

    attempt counts prior runs of (roughly) these targets in a retry
    chain; each one warms action caches, scaling service and critical
    path down by (1 - retry_warm_fraction)^attempt.
    """
    mem = oracle.memory_of_window(build.targets)
    demand = oracle.true_occupancy(build.targets)
    warm = (1.0 - cfg.retry_warm_fraction) ** attempt
    svc = oracle.service_time(build.targets) * warm
    cp = oracle.critical_path(build.targets) * warm

    rng = _build_rng(oracle.seed, attempt, build)
    gc = bool(rng.random() < cfg.gc_probability)
    cache_hit = bool(rng.random() < cfg.cache_hit_rate)
    peak = mem * (1.0 + 0.25 * rng.random())

    if cache_hit:
        svc = 0.0
        exec_time = 60.0
    else:
        exec_time = max(cp, svc / min(demand, cfg.concurrent_executor_limit_esu))

    outcome = Outcome.OK
    de_type = None
    if mem > cfg.worker_memory_gb:
        outcome = Outcome.OOM
    elif exec_time > cfg.deadline_s:
        outcome = Outcome.DEADLINE_EXCEEDED
        de_type = (
            DeType.TYPE_I
            if demand > cfg.concurrent_executor_limit_esu
            else DeType.TYPE_II
        )
    return ExecutionStats(
        build_id=build.id,
        peak_heap_gb=peak,
        gc_occurred=gc,
        exec_time_s=exec_time,
        total_executor_service_time_esu_s=svc,
        outcome=outcome,
        peak_post_gc_heap_gb=mem if gc else None,
        de_type=de_type,
    )


@dataclass(frozen=True)
class ExecutionRecord:
    build: Build
    stats: ExecutionStats
    depth: int
    attempt: int
    group_key: str


@dataclass
class Metrics:
    build_count: int = 0
    initial_build_count: int = 0
    retry_count: int = 0
    gave_up_count: int = 0
    oom_count: int = 0
    de_type_i_count: int = 0
    de_type_ii_count: int = 0
    total_targets_batched: int = 0
    mean_batch_size: float = 0.0
    reason_counts: dict = field(default_factory=dict)

    @property
    def oom_rate(self) -> float:
        return self.oom_count / self.build_count if self.build_count else 0.0

    @property
    def de_type_i_rate(self) -> float:
        return self.de_type_i_count / self.build_count if self.build_count else 0.0

    @property
    def de_type_ii_rate(self) -> float:
        return self.de_type_ii_count / self.build_count if self.build_count else 0.0

    def to_json_obj(self) -> dict:
        obj = asdict(self)
        obj["reason_counts"] = dict(sorted(self.reason_counts.items()))
        obj["oom_rate"] = self.oom_rate
        obj["de_type_i_rate"] = self.de_type_i_rate
        obj["de_type_ii_rate"] = self.de_type_ii_rate
        return obj

    @classmethod
    def from_json_obj(cls, obj: dict) -> "Metrics":
        names = [f.name for f in dataclasses.fields(cls)]
        kwargs = {name: obj[name] for name in names if name in obj}
        kwargs["reason_counts"] = dict(obj.get("reason_counts", {}))
        return cls(**kwargs)


def aggregate_metrics(records: Sequence[ExecutionRecord], gave_up: int) -> Metrics:
    m = Metrics(gave_up_count=gave_up)
    for rec in records:
        m.build_count += 1
        if rec.depth == 0:
            m.initial_build_count += 1
            m.total_targets_batched += len(rec.build.targets)
        else:
            m.retry_count += 1
        if rec.stats.outcome is Outcome.OOM:
            m.oom_count += 1
        elif rec.stats.outcome is Outcome.DEADLINE_EXCEEDED:
            if rec.stats.de_type is DeType.TYPE_I:
                m.de_type_i_count += 1
            else:
                m.de_type_ii_count += 1
        reason = rec.build.reason.value
        m.reason_counts[reason] = m.reason_counts.get(reason, 0) + 1
    if m.build_count:
        m.mean_batch_size = sum(len(r.build.targets) for r in records) / m.build_count
    return m


def run_experiment(
    targets: Sequence[Target],
    oracle: CostOracle,
    cluster_cfg: ClusterConfig,
    batch_cfg: BatchingConfig,
    mem_est: Estimator,
    occ_est: Estimator,
    context: Optional[ExecutionContext] = None,
    flags: Optional[BuildFlags] = None,
    priority: Priority = Priority.MEDIUM,
    rules: Sequence[InferenceRule] = DEFAULT_RULES,
) -> tuple[Metrics, list[ExecutionRecord]]:
    """Group, batch, execute and retry an entire workload; report metrics.

    Failed builds follow the retry policy: OOM splits in half and
    rebatches each half, deadline failures rebatch the same targets,
    single-target OOMs give up, and chains stop at RETRY_DEPTH_LIMIT.
    """
    context = context or ExecutionContext(ContextKind.WORKSPACE, "simulated-workspace")
    flags = flags if flags is not None else BuildFlags()
    groups = group_and_sort(targets, rules)
    ids = itertools.count(1)
    records: list[ExecutionRecord] = []
    gave_up = 0

    def rebatch(ts: Sequence[Target]) -> list[tuple[list[Target], BatchSizeReason]]:
        return batch_targets(ts, batch_cfg, mem_est, occ_est, context, flags, priority)

    for type_set, group_targets in groups.items():
        group_key = type_set.key()
        queue: deque = deque(
            (batch, reason, 0, 0) for batch, reason in rebatch(group_targets)
        )
        while queue:
            batch, reason, depth, attempt = queue.popleft()
            build = Build(
                id=f"sim-{next(ids):08d}",
                context=context,
                flags=flags,
                targets=tuple(batch),
                reason=reason,
                priority=priority,
            )
            stats = execute(oracle, cluster_cfg, build, attempt)
            records.append(ExecutionRecord(build, stats, depth, attempt, group_key))
            if stats.outcome not in (Outcome.OOM, Outcome.DEADLINE_EXCEEDED):
                continue
            if depth >= RETRY_DEPTH_LIMIT:
                gave_up += 1
                continue
            action = retry_policy(build, stats)
            if action.kind is RetryKind.GIVE_UP:
                gave_up += 1
            elif action.kind is RetryKind.SPLIT_AND_REBATCH:
                assert action.halves is not None
                for half in action.halves:
                    for b, r in rebatch(half):
                        queue.append((b, r, depth + 1, attempt + 1))
            else:
                for b, r in rebatch(batch):
                    queue.append((b, r, depth + 1, attempt + 1))
    return aggregate_metrics(records, gave_up), records


_FLAG_POOL = (
    ("--keep_going", "true"),
    ("--cache_test_results", "false"),
    ("--jobs", "200"),
    ("--use_action_cache", "true"),
    ("--runs_per_test", "3"),
)
_COMMANDS = ("build", "test", "query")
_COMMAND_WEIGHTS = (0.65, 0.30, 0.05)
_PRIORITY_WEIGHTS = (0.2, 0.6, 0.2)  # high, medium, low


def simulate_prior_builds(
    targets: Sequence[Target],
    oracle: CostOracle,
    cluster_cfg: ClusterConfig,
    n_builds: int,
    seed: int,
    now: float,
    span_days: float = 17.5,
    max_build_targets: int = 140,
) -> list[LogRecord]:
    """Historical build logs to train on: random windows of the sorted
    workload executed against the oracle, stamped over the past span.

    The size cap keeps most windows below the executor saturation point:
    saturated builds report a clipped occupancy label, and a corpus full
    of those teaches the model near-zero per-target marginals, which is
    exactly what the batcher must not believe.

    Failed windows go through the cluster's normal retry chain and every
    attempt is logged. The OOM splits matter for training: an expensive
    target is only ever observed nearly alone in the tail of its own
    retry chain, and without those records its cost smears across
    whatever neighbors it usually ships with.

    Every build draws its targets from a single executor group, the way
    the admission path actually emits them. This is load-bearing for the
    sparse groups: a gpu-only window hits a different package with nearly
    every target and pays the whole package's dependency bill each time,
    and mixed windows would hide that cost among the x86 neighbors.
    """
    rng = np.random.default_rng(seed)
    group_lists = [tuple(g) for g in group_and_sort(targets, DEFAULT_RULES).values()]
    shares = np.array([len(g) for g in group_lists], dtype=np.float64)
    shares /= shares.sum()
    priorities = (Priority.HIGH, Priority.MEDIUM, Priority.LOW)
    records: list[LogRecord] = []
    context = ExecutionContext(ContextKind.REVISION, "rev-history")
    for b in range(n_builds):
        ordered = group_lists[int(rng.choice(len(group_lists), p=shares))]
        n = len(ordered)
        start = int(rng.integers(0, n))
        # Three request shapes: focused developer builds, broad CI sweeps
        # near the cap, and single-target presubmit runs. The broad ones
        # pin down window sums at the scale the batcher decides at; the
        # narrow ones pin down individual targets.
        shape = rng.random()
        if shape < 0.45:
            length = 1 + min(int(rng.exponential(scale=40.0)), max_build_targets - 1)
        elif shape < 0.90:
            length = int(rng.integers(90, max_build_targets + 1))
        else:
            length = 1 + min(int(rng.exponential(scale=3.0)), max_build_targets - 1)
        window = tuple(ordered[start : start + length])
        priority = priorities[int(rng.choice(3, p=_PRIORITY_WEIGHTS))]
        command = _COMMANDS[int(rng.choice(3, p=_COMMAND_WEIGHTS))]
        flag_mask = rng.random(len(_FLAG_POOL)) < 0.3
        flags = BuildFlags.from_pairs(
            pair for pair, keep in zip(_FLAG_POOL, flag_mask) if keep
        )
        # Request metadata stays blank apart from the command: the batching
        # protocol does not transport user or area identity, so a model
        # trained with those features would lose their weight mass at
        # serving time and systematically underestimate.
        meta = RequestMeta(command=command)
        ts = now - float(rng.uniform(0.0, span_days)) * 86400.0
        seq = itertools.count()
        chain: deque[tuple[tuple[Target, ...], int, int, float]] = deque(
            [(window, 0, 0, ts)]
        )
        while chain:
            batch, depth, attempt, when = chain.popleft()
            build = Build(
                id=f"hist-{b:06d}-{next(seq):02d}",
                context=context,
                flags=flags,
                targets=batch,
                reason=BatchSizeReason.ALL_REMAINING_TARGETS,
                priority=priority,
            )
            stats = execute(oracle, cluster_cfg, build, attempt)
            records.append(
                LogRecord(
                    timestamp=when,
                    context=context,
                    flags=flags,
                    priority=priority,
                    meta=meta,
                    targets=batch,
                    stats=stats,
                )
            )
            if stats.outcome not in (Outcome.OOM, Outcome.DEADLINE_EXCEEDED):
                continue
            if depth >= RETRY_DEPTH_LIMIT:
                continue
            action = retry_policy(build, stats)
            if action.kind is RetryKind.SPLIT_AND_REBATCH:
                assert action.halves is not None
                for half in action.halves:
                    chain.append((half, depth + 1, attempt + 1, when + stats.exec_time_s))
            elif action.kind is RetryKind.REBATCH_SAME:
                chain.append((batch, depth + 1, attempt + 1, when + stats.exec_time_s))
    records.sort(key=lambda r: r.timestamp)
    return records


def check_experiment_invariants(
    records: Sequence[ExecutionRecord],
    targets: Sequence[Target],
    rules: Sequence[InferenceRule] = DEFAULT_RULES,
    batch_cfg: Optional[BatchingConfig] = None,
) -> list[str]:
    """Cross-check an experiment's records against the batching contract.

    Returns a list of human-readable violations, empty when clean. The
    initial (depth zero) batches of each executor group must concatenate
    back to exactly that group's sorted targets, and every build must
    respect the configured size bounds.
    """
    problems: list[str] = []
    max_size = batch_cfg.max_targets_per_batch if batch_cfg else None
    expected = {k.key(): v for k, v in group_and_sort(targets, rules).items()}
    seen: dict[str, list[Target]] = {key: [] for key in expected}
    for rec in records:
        n = len(rec.build.targets)
        if n < 1:
            problems.append(f"build {rec.build.id} is empty")
        if max_size is not None and n > max_size:
            problems.append(
                f"build {rec.build.id} has {n} targets, above the cap {max_size}"
            )
        if rec.depth == 0:
            if rec.group_key not in seen:
                problems.append(
                    f"build {rec.build.id} in unexpected group {rec.group_key!r}"
                )
                seen.setdefault(rec.group_key, [])
            seen[rec.group_key].extend(rec.build.targets)
    for key, group in expected.items():
        got = seen.get(key, [])
        if got != group:
            problems.append(
                f"group {key!r}: initial batches cover {len(got)} targets, "
                f"expected the {len(group)} sorted group targets exactly"
            )
    return problems
