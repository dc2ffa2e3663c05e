"""Sparse linear regression with sign-asymmetric L1 and monotone weights.

The loss is mean squared error plus a per-sign L1 penalty: positive
weights pay lambda_plus per unit, negative weights pay lambda_minus.
For the monotone index set (target-derived features) the negative-side
penalty is infinite, realized by projecting those weights to max(0, w)
after every optimizer step. Training is proximal SGD: a gradient step
on the MSE term, an asymmetric soft-threshold for the L1 term, then
the projection. Everything is deterministic given the config seed.

Prediction is max(0, dot(weights, x)) computed with math.fsum. fsum
returns the correctly rounded exact sum, and rounding is monotone, so
increasing any term or inserting a non-negative term can never lower
the result. That makes predictions exactly non-decreasing under
target-list extension (which only adds or grows terms on non-negative
weights), which is the property the batcher's binary search leans on.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .features import SparseVector

MODEL_FORMAT_VERSION = "1"


class DimMismatch(ValueError):
    """Vector and model hash dimensions differ."""


class KindMismatch(ValueError):
    """Operation requires models of the same kind."""


class EmptyDataset(ValueError):
    """Training or loss evaluation got zero examples."""


class ModelKind(str, enum.Enum):
    MEMORY = "memory"
    OCCUPANCY = "occupancy"


@dataclass(frozen=True)
class LabeledExample:
    x: SparseVector
    y: float
    weight: float = 1.0

    def __post_init__(self):
        if self.y < 0:
            raise ValueError("labels are non-negative quantities")
        if self.weight <= 0:
            raise ValueError("example weight must be positive")


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters for proximal SGD."""

    lambda_plus: float = 7000.0
    lambda_minus: Optional[float] = None  # None: same as lambda_plus
    learning_rate: float = 0.01
    epochs: int = 5
    minibatch: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.lambda_plus < 0:
            raise ValueError("lambda_plus must be non-negative")
        if self.lambda_minus is not None and self.lambda_minus < 0:
            raise ValueError("lambda_minus must be non-negative")
        if self.learning_rate <= 0 or self.epochs <= 0 or self.minibatch <= 0:
            raise ValueError("learning_rate, epochs and minibatch must be positive")

    @property
    def lambda_minus_effective(self) -> float:
        return self.lambda_plus if self.lambda_minus is None else self.lambda_minus


@dataclass(frozen=True)
class LinearModel:
    """Immutable trained model: sparse weights plus the monotone index set."""

    kind: ModelKind
    hash_dim: int
    weights: dict[int, float]
    monotone_indices: frozenset[int]
    trained_window_days: int = 0
    seed: int = 0
    version: str = MODEL_FORMAT_VERSION

    def __post_init__(self):
        if self.hash_dim < 2 or self.hash_dim & (self.hash_dim - 1):
            raise ValueError("hash_dim must be a power of two >= 2")
        for i, w in self.weights.items():
            if not 0 <= i < self.hash_dim:
                raise ValueError(f"weight index {i} out of range")
            if w < 0 and i in self.monotone_indices:
                raise ValueError(f"monotone index {i} has negative weight {w}")


def linear_value(model: LinearModel, x: SparseVector) -> float:
    """Raw dot product, exactly rounded (fsum), without the clamp."""
    if x.hash_dim != model.hash_dim:
        raise DimMismatch(f"vector dim {x.hash_dim} != model dim {model.hash_dim}")
    w = model.weights
    return math.fsum(w.get(i, 0.0) * v for i, v in zip(x.indices, x.values))


def predict(model: LinearModel, x: SparseVector) -> float:
    """Estimated memory (GB) or occupancy (ESU): max(0, dot)."""
    return max(0.0, linear_value(model, x))


def ensemble_max(primary: LinearModel, recent: LinearModel, x: SparseVector) -> float:
    """Serving-side combination of the long- and short-window memory models."""
    if primary.kind is not ModelKind.MEMORY or recent.kind is not ModelKind.MEMORY:
        raise KindMismatch("ensemble_max is defined for memory models")
    if primary.hash_dim != recent.hash_dim:
        raise DimMismatch("ensemble members must share hash_dim")
    return max(predict(primary, x), predict(recent, x))


def regularizer(model: LinearModel, cfg: TrainConfig) -> float:
    total = 0.0
    lam_neg = cfg.lambda_minus_effective
    for i, w in model.weights.items():
        if w >= 0:
            total += cfg.lambda_plus * w
        elif i in model.monotone_indices:
            return math.inf
        else:
            total += lam_neg * (-w)
    return total


def loss(model: LinearModel, dataset: Sequence[LabeledExample], cfg: TrainConfig) -> float:
    """Weighted MSE on the raw linear value plus the per-sign L1 term."""
    if not dataset:
        raise EmptyDataset("loss needs at least one example")
    mse = 0.0
    for ex in dataset:
        err = ex.y - linear_value(model, ex.x)
        mse += ex.weight * err * err
    return mse / len(dataset) + regularizer(model, cfg)


def mse_gradient(weights: np.ndarray, dataset: Sequence[LabeledExample]) -> np.ndarray:
    """Gradient of the (weighted) MSE term at a dense weight vector."""
    if not dataset:
        raise EmptyDataset("gradient needs at least one example")
    grad = np.zeros_like(weights)
    for ex in dataset:
        idx = np.fromiter(ex.x.indices, dtype=np.int64)
        val = np.fromiter(ex.x.values, dtype=np.float64)
        err = float(weights[idx] @ val) - ex.y
        np.add.at(grad, idx, (2.0 * ex.weight * err / len(dataset)) * val)
    return grad


def _soft_threshold(w: np.ndarray, shrink_pos: float, shrink_neg: float) -> None:
    """In-place asymmetric soft-threshold: the prox of the per-sign L1 term."""
    pos = w > 0
    neg = w < 0
    w[pos] = np.maximum(0.0, w[pos] - shrink_pos)
    w[neg] = np.minimum(0.0, w[neg] + shrink_neg)


def train(
    dataset: Sequence[LabeledExample],
    cfg: TrainConfig,
    monotone_indices: frozenset[int],
    kind: ModelKind = ModelKind.MEMORY,
    window_days: int = 0,
) -> LinearModel:
    """Proximal SGD over shuffled minibatches; deterministic given cfg.seed."""
    if not dataset:
        raise EmptyDataset("train needs at least one example")
    hash_dim = dataset[0].x.hash_dim
    for ex in dataset:
        if ex.x.hash_dim != hash_dim:
            raise DimMismatch("examples must share a hash_dim")

    global_idx = [np.fromiter(ex.x.indices, dtype=np.int64) for ex in dataset]
    ys = np.fromiter((ex.y for ex in dataset), dtype=np.float64)
    ws = np.fromiter((ex.weight for ex in dataset), dtype=np.float64)

    # Weights outside the dataset's feature set stay at zero forever (the
    # prox and the projection both fix zero), so the step only has to touch
    # the active set; remap to dense local indices for that.
    active = np.unique(np.concatenate(global_idx))
    weights = np.zeros(active.size, dtype=np.float64)

    # Ragged examples as zero-padded rows. Pad slots carry value 0.0, so
    # they add nothing to the gather and scatter a zero update.
    n = len(dataset)
    width = max(idx.size for idx in global_idx)
    idx_mat = np.zeros((n, width), dtype=np.int64)
    val_mat = np.zeros((n, width), dtype=np.float64)
    for j, (ex, idx) in enumerate(zip(dataset, global_idx)):
        idx_mat[j, : idx.size] = np.searchsorted(active, idx)
        val_mat[j, : idx.size] = ex.x.values

    mono_global = np.fromiter(sorted(monotone_indices), dtype=np.int64)
    mono_mask = np.zeros(active.size, dtype=bool)
    present = np.isin(mono_global, active)
    mono_mask[np.searchsorted(active, mono_global[present])] = True

    rng = np.random.default_rng(cfg.seed)
    shrink_pos = cfg.learning_rate * cfg.lambda_plus
    shrink_neg = cfg.learning_rate * cfg.lambda_minus_effective

    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.minibatch):
            rows = order[start : start + cfg.minibatch]
            idx = idx_mat[rows]
            val = val_mat[rows]
            preds = (weights[idx] * val).sum(axis=1)
            errs = (2.0 / rows.size) * ws[rows] * (preds - ys[rows])
            upd = np.bincount(
                idx.ravel(),
                weights=(errs[:, None] * val).ravel(),
                minlength=active.size,
            )
            weights -= cfg.learning_rate * upd
            _soft_threshold(weights, shrink_pos, shrink_neg)
            np.maximum(weights, 0.0, out=weights, where=mono_mask)

    nz = np.nonzero(weights)[0]
    return LinearModel(
        kind=kind,
        hash_dim=hash_dim,
        weights={int(active[i]): float(weights[i]) for i in nz},
        monotone_indices=frozenset(monotone_indices),
        trained_window_days=window_days,
        seed=cfg.seed,
    )


def save_model(model: LinearModel, path: str) -> None:
    """Textual model file; floats via repr so a round trip is bit-identical."""
    lines = [
        f"buildbatch-model v{model.version}",
        f"kind {model.kind.value}",
        f"hash_dim {model.hash_dim}",
        f"window_days {model.trained_window_days}",
        f"seed {model.seed}",
        f"weights {len(model.weights)}",
    ]
    for i in sorted(model.weights):
        lines.append(f"{i} {model.weights[i]!r}")
    lines.append(f"monotone {len(model.monotone_indices)}")
    lines.extend(str(i) for i in sorted(model.monotone_indices))
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


def load_model(path: str) -> LinearModel:
    with open(path, encoding="utf-8") as f:
        lines = f.read().splitlines()
    if not lines or not lines[0].startswith("buildbatch-model v"):
        raise ValueError(f"not a model file: {path}")
    version = lines[0].split("v", 1)[1]
    header: dict[str, str] = {}
    pos = 1
    while not lines[pos].startswith("weights "):
        key, value = lines[pos].split(" ", 1)
        header[key] = value
        pos += 1
    n_weights = int(lines[pos].split(" ", 1)[1])
    pos += 1
    weights: dict[int, float] = {}
    for _ in range(n_weights):
        i, w = lines[pos].split(" ", 1)
        weights[int(i)] = float(w)
        pos += 1
    n_mono = int(lines[pos].split(" ", 1)[1])
    pos += 1
    mono = frozenset(int(lines[pos + k]) for k in range(n_mono))
    return LinearModel(
        kind=ModelKind(header["kind"]),
        hash_dim=int(header["hash_dim"]),
        weights=weights,
        monotone_indices=mono,
        trained_window_days=int(header["window_days"]),
        seed=int(header["seed"]),
        version=version,
    )
