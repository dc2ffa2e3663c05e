"""Slicing a sorted target group into builds via estimator binary search.

The outer loop peels off at most max_targets_per_batch targets, then
narrows that slice twice: a binary search against the memory estimator,
then another against the occupancy estimator. Each search keeps the
longest prefix whose estimate stays strictly under the cutoff, but
never returns fewer than one target: a single over-cutoff target still
has to build somewhere, it just gets a build of its own.

Estimator failures do not fail the request. The first error aborts the
current slice's searches and emits a fallback batch of
fallback_batch_size targets tagged with the matching *_ESTIMATE_ERROR
reason.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional, Protocol, Sequence

from .core import (
    BatchSizeReason,
    Build,
    BuildFlags,
    ExecutionContext,
    ExecutionStats,
    Outcome,
    Priority,
    Target,
)
from .regression import ModelKind

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib


class EstimateError(Exception):
    """The estimator could not produce a value (missing model, bad input)."""


class Estimator(Protocol):
    """Cost estimator for a hypothetical build over a target prefix.

    Implementations must be monotone non-decreasing under prefix
    extension for fixed context/flags/priority; the binary search is
    only correct against monotone estimators.
    """

    kind: ModelKind

    def estimate(
        self,
        context: ExecutionContext,
        flags: BuildFlags,
        priority: Priority,
        targets: Sequence[Target],
    ) -> float: ...


DEFAULT_MEMORY_CUTOFFS_GB = {
    Priority.HIGH: 7.0,
    Priority.MEDIUM: 9.0,
    Priority.LOW: 10.0,
}


@dataclass(frozen=True)
class BatchingConfig:
    max_targets_per_batch: int = 900
    memory_cutoff_gb: dict[Priority, float] = field(
        default_factory=lambda: dict(DEFAULT_MEMORY_CUTOFFS_GB)
    )
    occupancy_cutoff_esu: float = 500.0
    fallback_batch_size: int = 300

    def __post_init__(self):
        if self.max_targets_per_batch < 1:
            raise ValueError("max_targets_per_batch must be positive")
        if not 1 <= self.fallback_batch_size <= self.max_targets_per_batch:
            raise ValueError("fallback_batch_size must be in [1, max_targets_per_batch]")
        if self.occupancy_cutoff_esu <= 0:
            raise ValueError("occupancy_cutoff_esu must be positive")
        for p in Priority:
            if self.memory_cutoff_gb.get(p, 0) <= 0:
                raise ValueError(f"memory cutoff for {p.value} must be positive")

    def memory_cutoff_for(self, priority: Priority) -> float:
        return self.memory_cutoff_gb[priority]


def load_batching_config(path: str) -> BatchingConfig:
    with open(path, "rb") as f:
        doc = tomllib.load(f)
    cutoffs = dict(DEFAULT_MEMORY_CUTOFFS_GB)
    for name, value in doc.get("memory_cutoff_gb", {}).items():
        cutoffs[Priority(name)] = float(value)
    return BatchingConfig(
        max_targets_per_batch=doc.get("max_targets_per_batch", 900),
        memory_cutoff_gb=cutoffs,
        occupancy_cutoff_esu=doc.get("occupancy_cutoff_esu", 500.0),
        fallback_batch_size=doc.get("fallback_batch_size", 300),
    )


def limit_batch_size_by_cutoff(
    targets: Sequence[Target],
    cutoff: float,
    est: Estimator,
    context: ExecutionContext,
    flags: BuildFlags,
    priority: Priority,
) -> Sequence[Target]:
    """Longest prefix with estimate strictly under cutoff, never empty.

    cutoffIndex starts at 0, so even when every prefix estimates at or
    above the cutoff the first target is still returned.
    """
    if not targets:
        raise ValueError("limit_batch_size_by_cutoff needs a non-empty list")
    low, high, cutoff_index = 0, len(targets) - 1, 0
    while low <= high:
        mid = (low + high) // 2
        estimate = est.estimate(context, flags, priority, targets[: mid + 1])
        if estimate < cutoff:
            cutoff_index = mid
            low = mid + 1
        else:
            high = mid - 1
    return targets[: cutoff_index + 1]


def assign_reason(
    initial_len: int,
    after_mem_len: int,
    after_occ_len: int,
    remaining_len: int,
    cfg: BatchingConfig,
    mem_err: bool,
    occ_err: bool,
) -> BatchSizeReason:
    """Why the emitted batch has its size; one reason per batch."""
    if not after_occ_len <= after_mem_len <= initial_len:
        raise ValueError("search stages can only shrink the slice")
    if remaining_len == 1:
        return BatchSizeReason.ONLY_ONE_TARGET
    if mem_err:
        return BatchSizeReason.MEMORY_ESTIMATE_ERROR
    if occ_err:
        return BatchSizeReason.OCCUPANCY_ESTIMATE_ERROR
    if after_occ_len < after_mem_len:
        return BatchSizeReason.MAX_OCCUPANCY
    if after_mem_len < initial_len:
        return BatchSizeReason.MAX_MEMORY
    if initial_len == cfg.max_targets_per_batch:
        return BatchSizeReason.MAX_TARGETS
    return BatchSizeReason.ALL_REMAINING_TARGETS


def batch_targets(
    all_targets: Sequence[Target],
    cfg: BatchingConfig,
    mem_est: Estimator,
    occ_est: Estimator,
    context: ExecutionContext,
    flags: BuildFlags,
    priority: Priority,
) -> list[tuple[list[Target], BatchSizeReason]]:
    """Split one sorted executor-type group into (batch, reason) pairs.

    Batches concatenate back to the input exactly; every batch has
    between 1 and max_targets_per_batch targets.
    """
    if not all_targets:
        raise ValueError("batch_targets needs a non-empty group")
    mem_cutoff = cfg.memory_cutoff_for(priority)
    remaining = list(all_targets)
    batches: list[tuple[list[Target], BatchSizeReason]] = []
    while remaining:
        initial = remaining[: cfg.max_targets_per_batch]
        after_mem: Sequence[Target] = initial
        after_occ: Sequence[Target] = initial
        mem_err = occ_err = False
        try:
            after_mem = limit_batch_size_by_cutoff(
                initial, mem_cutoff, mem_est, context, flags, priority
            )
            after_occ = after_mem
        except EstimateError:
            mem_err = True
        if not mem_err:
            try:
                after_occ = limit_batch_size_by_cutoff(
                    after_mem, cfg.occupancy_cutoff_esu, occ_est, context, flags, priority
                )
            except EstimateError:
                occ_err = True
                after_occ = after_mem
        if mem_err:
            batch = initial[: min(cfg.fallback_batch_size, len(initial))]
        elif occ_err:
            batch = list(after_mem[: min(cfg.fallback_batch_size, len(after_mem))])
        else:
            batch = list(after_occ)
        reason = assign_reason(
            len(initial), len(after_mem), len(after_occ), len(remaining), cfg, mem_err, occ_err
        )
        batches.append((list(batch), reason))
        remaining = remaining[len(batch):]
    return batches


class RetryKind(str, enum.Enum):
    SPLIT_AND_REBATCH = "split_and_rebatch"
    REBATCH_SAME = "rebatch_same"
    GIVE_UP = "give_up"


# Retried builds that keep failing stop after this many nested retries.
RETRY_DEPTH_LIMIT = 6


@dataclass(frozen=True)
class RetryAction:
    kind: RetryKind
    halves: Optional[tuple[tuple[Target, ...], tuple[Target, ...]]] = None

    def __post_init__(self):
        if (self.kind is RetryKind.SPLIT_AND_REBATCH) != (self.halves is not None):
            raise ValueError("halves present iff splitting")


def retry_policy(failed: Build, stats: ExecutionStats) -> RetryAction:
    """What to do with a failed build's targets.

    OOM on a multi-target build splits it at the midpoint (first half
    rounds up) and rebatches each half. OOM on a single target gives
    up: halving cannot help. Deadline-exceeded builds rebatch the same
    targets unchanged, on the theory that warmed caches shorten the
    rerun.
    """
    if stats.outcome not in (Outcome.OOM, Outcome.DEADLINE_EXCEEDED):
        raise ValueError(f"retry_policy is for failed builds, got {stats.outcome.value}")
    targets = failed.targets
    if stats.outcome is Outcome.OOM:
        if len(targets) == 1:
            return RetryAction(RetryKind.GIVE_UP)
        mid = (len(targets) + 1) // 2
        return RetryAction(
            RetryKind.SPLIT_AND_REBATCH,
            halves=(tuple(targets[:mid]), tuple(targets[mid:])),
        )
    return RetryAction(RetryKind.REBATCH_SAME)
