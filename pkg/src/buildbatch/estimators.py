"""Concrete estimators the batcher can binary-search against.

ModelEstimator serves trained linear models (the memory flavor combines
the long- and short-window models by taking the max). OracleEstimator
wraps ground-truth cost callables and exists as an upper bound for what
perfect models would achieve. ConstantEstimator never limits anything
and turns the batcher into a fixed-size chunker. ErrorEstimator fails
every call, exercising the fallback path.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

from .batching import BatchingConfig, EstimateError
from .core import BuildFlags, ExecutionContext, Priority, RequestMeta, Target
from .features import FeatureSpec, featurize, request_bundle
from .regression import LinearModel, ModelKind, ensemble_max, load_model, predict

MEMORY_PRIMARY_FILENAME = "memory_17d.model"
MEMORY_RECENT_FILENAME = "memory_1d.model"
OCCUPANCY_FILENAME = "occupancy.model"


@dataclass(frozen=True)
class ConstantEstimator:
    """Always the same estimate; value 0 never trims a batch."""

    kind: ModelKind
    value: float = 0.0

    def estimate(
        self,
        context: ExecutionContext,
        flags: BuildFlags,
        priority: Priority,
        targets: Sequence[Target],
    ) -> float:
        return self.value


@dataclass(frozen=True)
class ErrorEstimator:
    """Fails every call; stands in for a missing or broken model."""

    kind: ModelKind
    message: str = "estimator unavailable"

    def estimate(
        self,
        context: ExecutionContext,
        flags: BuildFlags,
        priority: Priority,
        targets: Sequence[Target],
    ) -> float:
        raise EstimateError(self.message)


@dataclass(frozen=True)
class OracleEstimator:
    """Ground truth as an estimator; the ceiling for model quality."""

    kind: ModelKind
    cost_fn: Callable[[Sequence[Target]], float]

    def estimate(
        self,
        context: ExecutionContext,
        flags: BuildFlags,
        priority: Priority,
        targets: Sequence[Target],
    ) -> float:
        return self.cost_fn(targets)


@dataclass(frozen=True)
class ModelEstimator:
    """Featurize a synthetic request and query the trained model(s).

    The synthetic request reuses the stream's context, flags and
    priority with the probed target sublist. Request metadata (user,
    tool tag, ...) is whatever the caller knows; over the wire it is
    unknown and defaults to blanks, which simply drops those features'
    contributions.
    """

    kind: ModelKind
    spec: FeatureSpec
    primary: LinearModel
    recent: Optional[LinearModel] = None
    meta: RequestMeta = RequestMeta()

    def estimate(
        self,
        context: ExecutionContext,
        flags: BuildFlags,
        priority: Priority,
        targets: Sequence[Target],
    ) -> float:
        try:
            bundle = request_bundle(
                flags,
                priority,
                self.meta.tool_tag,
                self.meta.user,
                self.meta.product_area,
                self.meta.command,
                targets,
                self.spec,
            )
            x = featurize(bundle, self.spec)
            if self.recent is not None:
                return ensemble_max(self.primary, self.recent, x)
            return predict(self.primary, x)
        except EstimateError:
            raise
        except (ValueError, KeyError) as e:
            raise EstimateError(str(e)) from e


def load_model_estimators(
    models_dir: str,
    spec: FeatureSpec,
    meta: RequestMeta = RequestMeta(),
):
    """Memory and occupancy estimators from a model directory.

    A missing or unreadable model file degrades that estimator to
    ErrorEstimator rather than failing startup: the batcher then emits
    fallback batches, which is the intended behavior when models are
    absent.
    """

    def try_load(filename: str) -> Optional[LinearModel]:
        path = os.path.join(models_dir, filename)
        if not os.path.exists(path):
            return None
        try:
            return load_model(path)
        except (ValueError, OSError):
            return None

    primary = try_load(MEMORY_PRIMARY_FILENAME)
    recent = try_load(MEMORY_RECENT_FILENAME)
    occ_model = try_load(OCCUPANCY_FILENAME)

    if primary is None:
        mem_est = ErrorEstimator(ModelKind.MEMORY, f"no {MEMORY_PRIMARY_FILENAME} in {models_dir}")
    else:
        mem_est = ModelEstimator(ModelKind.MEMORY, spec, primary, recent=recent, meta=meta)
    if occ_model is None:
        occ_est = ErrorEstimator(ModelKind.OCCUPANCY, f"no {OCCUPANCY_FILENAME} in {models_dir}")
    else:
        occ_est = ModelEstimator(ModelKind.OCCUPANCY, spec, occ_model, meta=meta)
    return mem_est, occ_est


def resolve_policy(
    name: str,
    base_cfg: BatchingConfig,
    models_dir: Optional[str] = None,
    spec: Optional[FeatureSpec] = None,
    meta: RequestMeta = RequestMeta(),
    oracle_memory_fn: Optional[Callable[[Sequence[Target]], float]] = None,
    oracle_occupancy_fn: Optional[Callable[[Sequence[Target]], float]] = None,
):
    """Map a policy name to (config, memory estimator, occupancy estimator).

    naiveN (e.g. naive900): fixed chunks of N, no models consulted.
    btbs: trained models loaded from models_dir.
    oracle: the simulator's true costs as the estimator.
    """
    if name.startswith("naive"):
        n = int(name[len("naive"):])
        cfg = BatchingConfig(
            max_targets_per_batch=n,
            memory_cutoff_gb=dict(base_cfg.memory_cutoff_gb),
            occupancy_cutoff_esu=base_cfg.occupancy_cutoff_esu,
            fallback_batch_size=min(base_cfg.fallback_batch_size, n),
        )
        return (
            cfg,
            ConstantEstimator(ModelKind.MEMORY),
            ConstantEstimator(ModelKind.OCCUPANCY),
        )
    if name == "btbs":
        if models_dir is None or spec is None:
            raise ValueError("btbs policy needs models_dir and a feature spec")
        mem_est, occ_est = load_model_estimators(models_dir, spec, meta)
        return base_cfg, mem_est, occ_est
    if name == "oracle":
        if oracle_memory_fn is None or oracle_occupancy_fn is None:
            raise ValueError("oracle policy needs the true cost callables")
        return (
            base_cfg,
            OracleEstimator(ModelKind.MEMORY, oracle_memory_fn),
            OracleEstimator(ModelKind.OCCUPANCY, oracle_occupancy_fn),
        )
    raise ValueError(f"unknown policy: {name}")
