"""From execution logs to trained models.

A log record pairs the original request (context, flags, priority, who
asked, which targets) with the ExecutionStats the cluster reported.
This module extracts labels from the stats, featurizes the requests,
assembles windowed datasets, measures feature relevance by mutual
information, greedily searches feature crosses, and trains the
long-window/short-window memory model pair plus the occupancy model.

Log files are JSONL, one record per line:

    {"timestamp": <epoch seconds>,
     "request": {"context": {...}, "flags": [[k, v], ...],
                 "priority": "...", "user": "...", "product_area": "...",
                 "tool_tag": "...", "command": "...",
                 "targets": [{...}, ...]},
     "stats": {...}}
"""

from __future__ import annotations

import itertools
import json
import math
from collections import Counter
from dataclasses import dataclass, replace
from typing import Iterable, Optional, Sequence

import numpy as np

from .core import (
    BuildFlags,
    ExecutionContext,
    ExecutionStats,
    Priority,
    RequestMeta,
    Target,
    target_from_json_obj,
)
from .features import (
    FeatureBundle,
    FeatureSpec,
    apply_crosses,
    featurize,
    request_bundle,
    target_derived_indices,
    universe_monotone_indices,
)
from .regression import (
    LabeledExample,
    LinearModel,
    ModelKind,
    TrainConfig,
    predict,
    train,
)

SECONDS_PER_DAY = 86400.0


class ZeroDuration(ValueError):
    """Occupancy is undefined for a zero-length execution."""


class LengthMismatch(ValueError):
    """Paired columns differ in length."""


class InsufficientData(ValueError):
    """A training window contains no usable records."""


@dataclass(frozen=True)
class LogRecord:
    """One archived build: the request that created it and its stats."""

    timestamp: float
    context: ExecutionContext
    flags: BuildFlags
    priority: Priority
    meta: RequestMeta
    targets: tuple[Target, ...]
    stats: ExecutionStats

    def to_json_obj(self) -> dict:
        request = {
            "context": self.context.to_json_obj(),
            "flags": self.flags.to_json_obj(),
            "priority": self.priority.value,
            "targets": [t.to_json_obj() for t in self.targets],
        }
        request.update(self.meta.to_json_obj())
        return {
            "timestamp": self.timestamp,
            "request": request,
            "stats": self.stats.to_json_obj(),
        }

    @classmethod
    def from_json_obj(cls, obj: dict) -> "LogRecord":
        req = obj["request"]
        return cls(
            timestamp=float(obj["timestamp"]),
            context=ExecutionContext.from_json_obj(req["context"]),
            flags=BuildFlags.from_json_obj(req["flags"]),
            priority=Priority(req["priority"]),
            meta=RequestMeta.from_json_obj(req),
            targets=tuple(target_from_json_obj(t) for t in req["targets"]),
            stats=ExecutionStats.from_json_obj(obj["stats"]),
        )


def write_logs_jsonl(records: Iterable[LogRecord], path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            f.write(json.dumps(r.to_json_obj(), sort_keys=True) + "\n")


def read_logs_jsonl(path: str) -> tuple[list[LogRecord], int]:
    """Parse a log file; malformed lines are skipped and counted, not fatal."""
    records: list[LogRecord] = []
    skipped = 0
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            try:
                records.append(LogRecord.from_json_obj(json.loads(line)))
            except (ValueError, KeyError, TypeError):
                skipped += 1
    return records, skipped


def memory_label(stats: ExecutionStats) -> float:
    """Peak post-full-GC heap when a GC ran, otherwise the raw peak."""
    if stats.gc_occurred:
        assert stats.peak_post_gc_heap_gb is not None
        return stats.peak_post_gc_heap_gb
    return stats.peak_heap_gb


def occupancy_label(stats: ExecutionStats) -> float:
    """Average ESU held over the build: total service time / execution time."""
    if stats.exec_time_s <= 0:
        raise ZeroDuration("execution time must be positive")
    return stats.total_executor_service_time_esu_s / stats.exec_time_s


def record_bundle(record: LogRecord, spec: FeatureSpec) -> FeatureBundle:
    return request_bundle(
        record.flags,
        record.priority,
        record.meta.tool_tag,
        record.meta.user,
        record.meta.product_area,
        record.meta.command,
        record.targets,
        spec,
    )


@dataclass
class Dataset:
    """Featurized, labeled examples for one training window."""

    memory: list[LabeledExample]
    occupancy: list[LabeledExample]
    monotone_indices: frozenset[int]


def build_dataset(
    records: Sequence[LogRecord],
    window_days: float,
    now: float,
    spec: FeatureSpec,
    extra_monotone: frozenset[int] = frozenset(),
) -> Dataset:
    """Window, filter, featurize and label a batch of log records.

    Query-command builds are excluded: they dominate raw logs and their
    cost profile has nothing to do with batched build execution. Fully
    cache-hit builds (zero executor service time) are kept for memory
    but left out of the occupancy set: a no-op run says nothing about
    what the targets demand when they actually execute, and its zero
    label drags every covered target's weight toward zero. The monotone
    set is every target-derived index observed in the window, plus
    whatever the caller already knows (typically the full target
    universe via universe_monotone_indices).
    """
    cutoff = now - window_days * SECONDS_PER_DAY
    memory: list[LabeledExample] = []
    occupancy: list[LabeledExample] = []
    mono = set(extra_monotone)
    for r in records:
        if r.timestamp < cutoff or r.timestamp > now:
            continue
        if r.meta.command == "query":
            continue
        if not r.targets:
            continue
        bundle = record_bundle(r, spec)
        x = featurize(bundle, spec)
        mono.update(target_derived_indices(bundle, spec))
        memory.append(LabeledExample(x=x, y=memory_label(r.stats)))
        if r.stats.total_executor_service_time_esu_s > 0:
            occupancy.append(LabeledExample(x=x, y=occupancy_label(r.stats)))
    return Dataset(memory=memory, occupancy=occupancy, monotone_indices=frozenset(mono))


def mutual_information(
    feature: Sequence[str], label: Sequence[float], label_bins: int = 16
) -> float:
    """Plug-in mutual information (nats) between a categorical feature and
    a real label discretized into equal-frequency bins."""
    if len(feature) != len(label):
        raise LengthMismatch(f"{len(feature)} feature rows vs {len(label)} labels")
    n = len(feature)
    if n < 2:
        raise LengthMismatch("need at least 2 rows")
    edges = np.unique(
        np.quantile(np.asarray(label, dtype=np.float64), np.linspace(0, 1, label_bins + 1)[1:-1])
    )
    bins = np.searchsorted(edges, label, side="right")
    joint: Counter = Counter(zip(feature, bins.tolist()))
    pf: Counter = Counter(feature)
    pb: Counter = Counter(bins.tolist())
    mi = 0.0
    for (f, b), c in joint.items():
        p_fb = c / n
        mi += p_fb * math.log(p_fb * n * n / (pf[f] * pb[b]))
    return max(0.0, mi)


def _time_split(n: int, holdout: float = 0.1) -> tuple[slice, slice]:
    cut = max(1, int(n * (1 - holdout)))
    if cut >= n:
        cut = n - 1
    return slice(0, cut), slice(cut, n)


def dataset_mse(model: LinearModel, examples: Sequence[LabeledExample]) -> float:
    """Mean squared error of clamped predictions over a labeled set."""
    total = 0.0
    for ex in examples:
        err = ex.y - predict(model, ex.x)
        total += err * err
    return total / len(examples)


def probe_mse(
    bundles: Sequence[FeatureBundle],
    ys: Sequence[float],
    spec: FeatureSpec,
    cfg: TrainConfig,
    probe_steps: int,
) -> float:
    """Validation MSE after a short training run with the given feature spec.

    Bundles must not already contain crosses; each probe applies the
    spec's crosses to a copy. The 90/10 split is time-ordered: bundles
    must arrive oldest first.
    """
    crossed = [
        apply_crosses(FeatureBundle(dict(b.categorical), dict(b.numeric)), spec)
        for b in bundles
    ]
    xs = [featurize(b, spec) for b in crossed]
    examples = [LabeledExample(x=x, y=y) for x, y in zip(xs, ys)]
    train_sl, val_sl = _time_split(len(examples))
    train_set = examples[train_sl]
    epochs = max(1, round(probe_steps * cfg.minibatch / max(1, len(train_set))))
    probe_cfg = replace(cfg, epochs=epochs)
    model = train(train_set, probe_cfg, frozenset(), kind=ModelKind.MEMORY)
    return dataset_mse(model, examples[val_sl])


def search_crosses(
    candidates: Sequence[str],
    bundles: Sequence[FeatureBundle],
    ys: Sequence[float],
    spec: FeatureSpec,
    max_crosses: int = 6,
    probe_steps: int = 300,
    cfg: Optional[TrainConfig] = None,
    min_relative_gain: float = 0.02,
) -> list[tuple[str, ...]]:
    """Greedy forward selection of feature crosses by validation MSE.

    Each round tries every pair and triple of candidate features not
    yet crossed, trains briefly, and keeps the cross with the best
    validation MSE. Stops when the best candidate improves the running
    MSE by less than min_relative_gain, or at max_crosses.
    """
    if cfg is None:
        cfg = TrainConfig(lambda_plus=0.0, learning_rate=0.05, seed=7)
    chosen: list[tuple[str, ...]] = []
    base_spec = FeatureSpec(
        hash_dim=spec.hash_dim,
        crosses=(),
        count_bucket_boundaries=spec.count_bucket_boundaries,
        flag_features=spec.flag_features,
    )
    best = probe_mse(bundles, ys, base_spec, cfg, probe_steps)
    pool = [tuple(c) for k in (2, 3) for c in itertools.combinations(candidates, k)]
    while len(chosen) < max_crosses:
        round_best: Optional[tuple[float, tuple[str, ...]]] = None
        for cand in pool:
            if cand in chosen:
                continue
            trial_spec = FeatureSpec(
                hash_dim=spec.hash_dim,
                crosses=tuple(chosen) + (cand,),
                count_bucket_boundaries=spec.count_bucket_boundaries,
                flag_features=spec.flag_features,
            )
            mse = probe_mse(bundles, ys, trial_spec, cfg, probe_steps)
            if round_best is None or mse < round_best[0]:
                round_best = (mse, cand)
        if round_best is None:
            break
        mse, cand = round_best
        if best - mse < min_relative_gain * max(best, 1e-12):
            break
        chosen.append(cand)
        best = mse
    return chosen


def train_model_pair(
    records: Sequence[LogRecord],
    now: float,
    spec: FeatureSpec,
    cfg: TrainConfig,
    long_window_days: float = 17.0,
    short_window_days: float = 1.0,
    extra_monotone: frozenset[int] = frozenset(),
) -> tuple[LinearModel, LinearModel]:
    """The 17-day primary memory model and its 1-day companion.

    The short window exists to catch regressions the long window dilutes:
    serving takes the max of the two estimates, so a fresh cost jump
    shows up within a day instead of after weeks of averaging.
    """
    universe = universe_monotone_indices(
        (t for r in records for t in r.targets), spec
    )
    mono = universe | extra_monotone
    long_ds = build_dataset(records, long_window_days, now, spec, extra_monotone=mono)
    short_ds = build_dataset(records, short_window_days, now, spec, extra_monotone=mono)
    if not long_ds.memory:
        raise InsufficientData(f"no records in the {long_window_days}-day window")
    if not short_ds.memory:
        raise InsufficientData(f"no records in the {short_window_days}-day window")
    primary = train(
        long_ds.memory, cfg, long_ds.monotone_indices,
        kind=ModelKind.MEMORY, window_days=int(long_window_days),
    )
    recent = train(
        short_ds.memory, cfg, short_ds.monotone_indices,
        kind=ModelKind.MEMORY, window_days=int(short_window_days),
    )
    return primary, recent


def train_standard_models(
    records: Sequence[LogRecord],
    now: float,
    spec: FeatureSpec,
    cfg: TrainConfig,
    long_window_days: float = 17.0,
    short_window_days: float = 1.0,
) -> dict[str, LinearModel]:
    """All three serving models, keyed by their conventional file stems."""
    universe = universe_monotone_indices((t for r in records for t in r.targets), spec)
    long_ds = build_dataset(records, long_window_days, now, spec, extra_monotone=universe)
    short_ds = build_dataset(records, short_window_days, now, spec, extra_monotone=universe)
    if not long_ds.memory:
        raise InsufficientData(f"no records in the {long_window_days}-day window")
    if not short_ds.memory:
        raise InsufficientData(f"no records in the {short_window_days}-day window")
    primary = train(
        long_ds.memory, cfg, long_ds.monotone_indices,
        kind=ModelKind.MEMORY, window_days=int(long_window_days),
    )
    recent = train(
        short_ds.memory, cfg, short_ds.monotone_indices,
        kind=ModelKind.MEMORY, window_days=int(short_window_days),
    )
    occupancy = train(
        long_ds.occupancy, cfg, long_ds.monotone_indices,
        kind=ModelKind.OCCUPANCY, window_days=int(long_window_days),
    )
    return {
        "memory_17d": primary,
        "memory_1d": recent,
        "occupancy": occupancy,
    }
