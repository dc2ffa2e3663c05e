"""Hashed sparse features for build cost estimation.

A build request (context, flags, priority, targets) turns into a
FeatureBundle of categorical and numeric features, gets augmented with
synthetic features (target path prefixes, count buckets) and one-hot
feature crosses, and is finally hashed into a SparseVector.

Hashing is 64-bit FNV-1a over the UTF-8 key string, masked into the
power-of-two hash dimension. Index 0 is reserved for the bias term, so
hashed indices land in [1, hash_dim). The hash function is frozen: a
model serialized on one machine must load and predict identically on
another.

Feature names drawn from the target list (labels, packages, prefix
splits, counts and their buckets) form the "target-derived" namespace;
the regression layer constrains exactly those weights to be
non-negative so that estimates never decrease when targets are added.
For the same reason count buckets are encoded cumulatively (bucket b
emits values 0..b): growing a count then only ever adds one-hot
entries, never swaps one out.
"""

from __future__ import annotations

import itertools
from bisect import bisect_left
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Sequence

from .core import BuildFlags, Priority, Target

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib


class UnknownFeature(KeyError):
    """A feature cross references a feature name missing from the bundle."""


# Separators. \x1f cannot appear in labels or flag values we care about;
# the cross-name joiner is reserved so provenance stays parseable.
CROSS_VALUE_SEP = "\x1f"
CROSS_NAME_SEP = "×"

MAX_CROSSES = 6
DEFAULT_HASH_DIM = 1 << 20

# Geometric-ish count buckets: request sizes are heavy-tailed, and the
# cumulative encoding needs few enough levels to stay cheap.
DEFAULT_COUNT_BUCKET_BOUNDARIES = (
    1.0, 2.0, 5.0, 10.0, 20.0, 50.0, 100.0, 200.0, 400.0, 800.0,
)

# Flags worth one categorical feature each; override via FeatureSpec.
DEFAULT_FLAG_FEATURES = (
    "--cache_test_results",
    "--cpu",
    "--discard_analysis_cache",
    "--fuseless_output",
    "--jobs",
    "--keep_going",
    "--keep_state_after_build",
    "--runs_per_test",
    "--test_size_filters",
    "--use_action_cache",
)

# Feature names whose hashed indices the regression layer must keep
# non-negative. Crosses inherit membership from any member.
TARGET_DERIVED_FEATURES = frozenset(
    {
        "targets",
        "packages",
        "target_prefixes",
        "target_count",
        "package_count",
        "target_count_bucket",
        "package_count_bucket",
    }
)

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


def fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for b in data:
        h = ((h ^ b) * _FNV_PRIME) & _MASK64
    return h


@lru_cache(maxsize=1 << 20)
def feature_index(key: str, hash_dim: int) -> int:
    """Hashed index for a feature key, in [1, hash_dim). Index 0 is the bias."""
    h = fnv1a64(key.encode("utf-8")) & (hash_dim - 1)
    return h if h else 1


def categorical_key(name: str, value: str) -> str:
    return name + "=" + value


@dataclass(frozen=True)
class FeatureSpec:
    """Hashing dimension plus the synthetic-feature configuration."""

    hash_dim: int = DEFAULT_HASH_DIM
    crosses: tuple[tuple[str, ...], ...] = ()
    count_bucket_boundaries: tuple[float, ...] = DEFAULT_COUNT_BUCKET_BOUNDARIES
    flag_features: tuple[str, ...] = DEFAULT_FLAG_FEATURES

    def __post_init__(self):
        if self.hash_dim < 2 or self.hash_dim & (self.hash_dim - 1):
            raise ValueError(f"hash_dim must be a power of two >= 2, got {self.hash_dim}")
        if len(self.crosses) > MAX_CROSSES:
            raise ValueError(f"at most {MAX_CROSSES} crosses allowed, got {len(self.crosses)}")
        for cross in self.crosses:
            if len(cross) < 2:
                raise ValueError(f"a cross needs at least 2 features: {cross}")
        if list(self.count_bucket_boundaries) != sorted(self.count_bucket_boundaries):
            raise ValueError("count_bucket_boundaries must be sorted ascending")


def load_feature_spec(path: str) -> FeatureSpec:
    """Load a FeatureSpec from TOML (hash_dim, flag_features, [buckets], [crosses])."""
    with open(path, "rb") as f:
        doc = tomllib.load(f)
    return FeatureSpec(
        hash_dim=doc.get("hash_dim", DEFAULT_HASH_DIM),
        crosses=tuple(tuple(c) for c in doc.get("crosses", {}).get("sets", [])),
        count_bucket_boundaries=tuple(
            doc.get("buckets", {}).get("boundaries", DEFAULT_COUNT_BUCKET_BOUNDARIES)
        ),
        flag_features=tuple(doc.get("flag_features", DEFAULT_FLAG_FEATURES)),
    )


@dataclass
class FeatureBundle:
    """Named features before hashing: categorical value sets + numeric scalars."""

    categorical: dict[str, set[str]] = field(default_factory=dict)
    numeric: dict[str, float] = field(default_factory=dict)

    def add_categorical(self, name: str, value: str) -> None:
        self.categorical.setdefault(name, set()).add(value)


def extract_basic(
    flags: BuildFlags,
    priority: Priority,
    tool_tag: str,
    user: str,
    product_area: str,
    command: str,
    targets: Sequence[Target],
    flag_features: Sequence[str] = DEFAULT_FLAG_FEATURES,
) -> FeatureBundle:
    """The basic feature set: request metadata, flag values, targets, packages, counts."""
    if not targets:
        raise ValueError("extract_basic requires at least one target")
    bundle = FeatureBundle()
    bundle.categorical["priority"] = {priority.value}
    bundle.categorical["command"] = {command}
    bundle.categorical["user"] = {user}
    bundle.categorical["product_area"] = {product_area}
    bundle.categorical["tool_tag"] = {tool_tag}
    allow = set(flag_features)
    for key, value in flags.entries:
        if key in allow:
            bundle.add_categorical("flag:" + key, value)
    labels = {t.label for t in targets}
    packages = {t.package for t in targets}
    bundle.categorical["targets"] = labels
    bundle.categorical["packages"] = packages
    bundle.numeric["target_count"] = float(len(labels))
    bundle.numeric["package_count"] = float(len(packages))
    return bundle


@lru_cache(maxsize=1 << 18)
def prefix_splits(label: str) -> tuple[str, ...]:
    """Full label, then each ancestor directory: //a/b/c:t -> //a/b/c, //a/b, //a."""
    if not label.startswith("//") or ":" not in label:
        raise ValueError(f"not a //pkg:name label: {label!r}")
    package = label.partition(":")[0]
    out = [label]
    segments = package[2:].split("/")
    for end in range(len(segments), 0, -1):
        out.append("//" + "/".join(segments[:end]))
    return tuple(out)


def bucketize(count: float, boundaries: Sequence[float]) -> int:
    """Index of the first boundary >= count; len(boundaries) when it exceeds all."""
    return bisect_left(boundaries, count)


def add_synthetic(bundle: FeatureBundle, spec: FeatureSpec) -> FeatureBundle:
    """Augment a basic bundle with prefix splits and cumulative count buckets."""
    prefixes: set[str] = set()
    for label in bundle.categorical.get("targets", ()):
        prefixes.update(prefix_splits(label))
    bundle.categorical["target_prefixes"] = prefixes
    if spec.count_bucket_boundaries:
        for count_name, bucket_name in (
            ("target_count", "target_count_bucket"),
            ("package_count", "package_count_bucket"),
        ):
            b = bucketize(bundle.numeric[count_name], spec.count_bucket_boundaries)
            bundle.categorical[bucket_name] = {str(i) for i in range(b + 1)}
    return bundle


def cross_name(members: Sequence[str]) -> str:
    return CROSS_NAME_SEP.join(members)


def cross_members(name: str) -> tuple[str, ...]:
    return tuple(name.split(CROSS_NAME_SEP))


def is_target_derived(name: str) -> bool:
    if CROSS_NAME_SEP in name:
        return any(m in TARGET_DERIVED_FEATURES for m in cross_members(name))
    return name in TARGET_DERIVED_FEATURES


def apply_crosses(bundle: FeatureBundle, spec: FeatureSpec) -> FeatureBundle:
    """Emit one categorical feature per cross, valued by the Cartesian product."""
    for members in spec.crosses:
        value_sets = []
        for m in members:
            if m not in bundle.categorical:
                raise UnknownFeature(m)
            value_sets.append(sorted(bundle.categorical[m]))
        values = {
            CROSS_VALUE_SEP.join(combo) for combo in itertools.product(*value_sets)
        }
        bundle.categorical[cross_name(members)] = values
    return bundle


@dataclass(frozen=True)
class SparseVector:
    """Sorted unique indices with values; index 0 (bias) always present."""

    indices: tuple[int, ...]
    values: tuple[float, ...]
    hash_dim: int

    def __post_init__(self):
        if len(self.indices) != len(self.values):
            raise ValueError("indices and values must align")
        if not self.indices or self.indices[0] != 0:
            raise ValueError("bias index 0 must be present")
        if any(a >= b for a, b in zip(self.indices, self.indices[1:])):
            raise ValueError("indices must be strictly ascending")
        if self.indices[-1] >= self.hash_dim:
            raise ValueError("index out of range for hash_dim")

    def to_text(self) -> str:
        return " ".join(f"{i}:{v!r}" for i, v in zip(self.indices, self.values))

    @classmethod
    def from_text(cls, text: str, hash_dim: int) -> "SparseVector":
        indices, values = [], []
        for part in text.split():
            i, _, v = part.partition(":")
            indices.append(int(i))
            values.append(float(v))
        return cls(tuple(indices), tuple(values), hash_dim)


# Raw counts reach the hundreds while one-hots are 1.0; scaling numerics
# keeps a single SGD learning rate workable for both. Positive scale, so
# monotonicity in the underlying count is preserved.
NUMERIC_SCALE = 1e-3


def featurize(bundle: FeatureBundle, spec: FeatureSpec) -> SparseVector:
    """Hash a bundle into a sparse vector; colliding indices sum their values."""
    acc: dict[int, float] = {0: 1.0}
    for name in sorted(bundle.categorical):
        for value in sorted(bundle.categorical[name]):
            idx = feature_index(categorical_key(name, value), spec.hash_dim)
            acc[idx] = acc.get(idx, 0.0) + 1.0
    for name in sorted(bundle.numeric):
        idx = feature_index(name, spec.hash_dim)
        acc[idx] = acc.get(idx, 0.0) + bundle.numeric[name] * NUMERIC_SCALE
    indices = sorted(acc)
    return SparseVector(tuple(indices), tuple(acc[i] for i in indices), spec.hash_dim)


def universe_monotone_indices(
    targets: Iterable[Target], spec: FeatureSpec
) -> frozenset[int]:
    """Every index a target-derived feature can hash to over a target universe.

    Training constrains these weights non-negative. Covering the whole
    universe (not just the targets seen in training requests) means a
    target first encountered at serving time still hits constrained
    indices, so extensions can never flip an estimate downward. Crosses
    are not covered: their value space needs the other member's values,
    so datasets with target-derived crosses must rely on observed
    indices instead.
    """
    dim = spec.hash_dim
    out = {feature_index("target_count", dim), feature_index("package_count", dim)}
    for bucket_name in ("target_count_bucket", "package_count_bucket"):
        for i in range(len(spec.count_bucket_boundaries) + 1):
            out.add(feature_index(categorical_key(bucket_name, str(i)), dim))
    for t in targets:
        out.add(feature_index(categorical_key("targets", t.label), dim))
        out.add(feature_index(categorical_key("packages", t.package), dim))
        for p in prefix_splits(t.label):
            out.add(feature_index(categorical_key("target_prefixes", p), dim))
    return frozenset(out)


def target_derived_indices(bundle: FeatureBundle, spec: FeatureSpec) -> frozenset[int]:
    """Hashed indices fed by target-derived features of this bundle."""
    out: set[int] = set()
    for name, values in bundle.categorical.items():
        if is_target_derived(name):
            out.update(
                feature_index(categorical_key(name, v), spec.hash_dim) for v in values
            )
    for name in bundle.numeric:
        if is_target_derived(name):
            out.add(feature_index(name, spec.hash_dim))
    return frozenset(out)


def request_bundle(
    flags: BuildFlags,
    priority: Priority,
    tool_tag: str,
    user: str,
    product_area: str,
    command: str,
    targets: Sequence[Target],
    spec: FeatureSpec,
) -> FeatureBundle:
    """Basic features, then synthetic features, then crosses."""
    bundle = extract_basic(
        flags, priority, tool_tag, user, product_area, command, targets,
        flag_features=spec.flag_features,
    )
    add_synthetic(bundle, spec)
    return apply_crosses(bundle, spec)
