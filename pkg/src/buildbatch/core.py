"""Core domain types: targets, flags, builds, and execution statistics.

Everything here is an immutable value type; validation happens at
construction and the rest of the codebase can share instances freely
across threads.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Optional


class MalformedLabel(ValueError):
    """A target label that does not look like ``//path/to/pkg:name``."""


# Executor type names. The set is open ended: anything outside the four
# well-known names is treated as an ad-hoc executor type.
X86 = "x86"
GPU = "gpu"
MAC = "mac"
TPU = "tpu"
KNOWN_EXECUTOR_TYPES = (X86, GPU, MAC, TPU)


@dataclass(frozen=True, order=True)
class Target:
    """A build target label plus the attributes that drive executor inference."""

    label: str
    tags: frozenset[str] = frozenset()
    rule_kind: str = ""

    @property
    def package(self) -> str:
        return self.label.split(":", 1)[0]

    @property
    def name(self) -> str:
        return self.label.split(":", 1)[1]

    def to_json_obj(self) -> dict:
        return {"label": self.label, "tags": sorted(self.tags), "rule_kind": self.rule_kind}


def parse_target(label: str, tags: Iterable[str] = (), rule_kind: str = "") -> Target:
    """Validate a label of the form ``//segment[/segment...]:name`` and build a Target.

    Raises MalformedLabel on a missing ``//`` prefix, a missing ``:``, empty
    path segments or name, or any whitespace.
    """
    if not label.startswith("//"):
        raise MalformedLabel(f"label must start with //: {label!r}")
    if ":" not in label:
        raise MalformedLabel(f"label must contain a :name part: {label!r}")
    if any(c.isspace() for c in label):
        raise MalformedLabel(f"label contains whitespace: {label!r}")
    path, name = label[2:].split(":", 1)
    if not name or ":" in name:
        raise MalformedLabel(f"bad target name in {label!r}")
    segments = path.split("/")
    if not segments or any(not s for s in segments):
        raise MalformedLabel(f"empty package segment in {label!r}")
    return Target(label=label, tags=frozenset(tags), rule_kind=rule_kind)


def target_from_json_obj(obj: dict) -> Target:
    return parse_target(obj["label"], obj.get("tags", ()), obj.get("rule_kind", ""))


def targets_to_jsonl(targets: Iterable[Target]) -> str:
    return "".join(json.dumps(t.to_json_obj(), sort_keys=True) + "\n" for t in targets)


def targets_from_jsonl(text: str) -> list[Target]:
    return [target_from_json_obj(json.loads(line)) for line in text.splitlines() if line.strip()]


@dataclass(frozen=True)
class BuildFlags:
    """Ordered command-line flags; duplicate keys are preserved in order."""

    entries: tuple[tuple[str, str], ...] = ()

    def __post_init__(self):
        for key, _ in self.entries:
            if not key.startswith("--"):
                raise ValueError(f"flag key must start with --: {key!r}")

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[str, str]]) -> "BuildFlags":
        return cls(entries=tuple((k, v) for k, v in pairs))

    @classmethod
    def parse(cls, args: Iterable[str]) -> "BuildFlags":
        """Parse ``--key=value`` / bare ``--key`` strings (bare keys get value "")."""
        pairs = []
        for arg in args:
            key, _, value = arg.partition("=")
            pairs.append((key, value))
        return cls.from_pairs(pairs)

    def values_for(self, key: str) -> list[str]:
        return [v for k, v in self.entries if k == key]

    def to_json_obj(self) -> list[list[str]]:
        return [[k, v] for k, v in self.entries]

    @classmethod
    def from_json_obj(cls, obj: Iterable) -> "BuildFlags":
        return cls.from_pairs((k, v) for k, v in obj)


class ContextKind(str, enum.Enum):
    WORKSPACE = "workspace"
    REVISION = "revision"


@dataclass(frozen=True)
class ExecutionContext:
    """Points at either an unsubmitted workspace or an existing revision."""

    kind: ContextKind
    id: str

    def to_json_obj(self) -> dict:
        return {"kind": self.kind.value, "id": self.id}

    @classmethod
    def from_json_obj(cls, obj: dict) -> "ExecutionContext":
        return cls(kind=ContextKind(obj["kind"]), id=obj["id"])


@dataclass(frozen=True, order=True)
class ExecutorTypeSet:
    """The sorted, non-empty set of executor types a target (or build) needs."""

    types: tuple[str, ...]

    def __post_init__(self):
        if not self.types:
            raise ValueError("executor type set must be non-empty")
        if list(self.types) != sorted(set(self.types)):
            raise ValueError(f"types must be sorted and unique: {self.types}")

    @classmethod
    def of(cls, *types: str) -> "ExecutorTypeSet":
        return cls(types=tuple(sorted(set(types))))

    def key(self) -> str:
        return "+".join(self.types)

    def __contains__(self, t: str) -> bool:
        return t in self.types


class Priority(str, enum.Enum):
    HIGH = "high"
    MEDIUM = "medium"
    LOW = "low"


@dataclass(frozen=True)
class RequestMeta:
    """Who/what issued a build request; feature inputs, not identifiers."""

    user: str = ""
    product_area: str = ""
    tool_tag: str = ""
    command: str = "build"

    def to_json_obj(self) -> dict:
        return {
            "user": self.user,
            "product_area": self.product_area,
            "tool_tag": self.tool_tag,
            "command": self.command,
        }

    @classmethod
    def from_json_obj(cls, obj: dict) -> "RequestMeta":
        return cls(
            user=obj.get("user", ""),
            product_area=obj.get("product_area", ""),
            tool_tag=obj.get("tool_tag", ""),
            command=obj.get("command", "build"),
        )


class BatchSizeReason(str, enum.Enum):
    """Why a batch got the size it did."""

    ONLY_ONE_TARGET = "ONLY_ONE_TARGET"
    MAX_TARGETS = "MAX_TARGETS"
    ALL_REMAINING_TARGETS = "ALL_REMAINING_TARGETS"
    MAX_MEMORY = "MAX_MEMORY"
    MAX_OCCUPANCY = "MAX_OCCUPANCY"
    MEMORY_ESTIMATE_ERROR = "MEMORY_ESTIMATE_ERROR"
    OCCUPANCY_ESTIMATE_ERROR = "OCCUPANCY_ESTIMATE_ERROR"


# 1 ESU = 2.5 GB of executor memory or 1 executor.
ESU_GB_PER_UNIT = 2.5


def esu_from_executors_and_memory(executors: float, memory_gb: float) -> float:
    """Unify executor count and executor memory into a single ESU amount."""
    if executors < 0 or memory_gb < 0:
        raise ValueError("executors and memory must be non-negative")
    return executors + memory_gb / ESU_GB_PER_UNIT


@dataclass(frozen=True)
class Build:
    """One execution request: context + flags + an ordered target batch."""

    id: str
    context: ExecutionContext
    flags: BuildFlags
    targets: tuple[Target, ...]
    reason: BatchSizeReason
    priority: Priority

    def __post_init__(self):
        if not self.targets:
            raise ValueError("a build must contain at least one target")


class Outcome(str, enum.Enum):
    OK = "ok"
    OOM = "oom"
    DEADLINE_EXCEEDED = "deadline_exceeded"
    OTHER_FAILURE = "other_failure"


class DeType(str, enum.Enum):
    TYPE_I = "type_i"
    TYPE_II = "type_ii"


@dataclass(frozen=True)
class ExecutionStats:
    """Per-build outcome record; the source of training labels.

    peak_post_gc_heap_gb is present exactly when a full GC happened during
    the build, and never exceeds peak_heap_gb.
    """

    build_id: str
    peak_heap_gb: float
    gc_occurred: bool
    exec_time_s: float
    total_executor_service_time_esu_s: float
    outcome: Outcome
    peak_post_gc_heap_gb: Optional[float] = None
    de_type: Optional[DeType] = None

    def __post_init__(self):
        if self.gc_occurred != (self.peak_post_gc_heap_gb is not None):
            raise ValueError("peak_post_gc_heap_gb must be present iff gc_occurred")
        if self.peak_post_gc_heap_gb is not None and self.peak_post_gc_heap_gb > self.peak_heap_gb + 1e-12:
            raise ValueError("post-GC peak cannot exceed overall peak")
        if self.exec_time_s <= 0:
            raise ValueError("exec_time_s must be positive")
        if self.total_executor_service_time_esu_s < 0:
            raise ValueError("service time must be non-negative")

    def to_json_obj(self) -> dict:
        obj = {
            "build_id": self.build_id,
            "peak_heap_gb": self.peak_heap_gb,
            "gc_occurred": self.gc_occurred,
            "exec_time_s": self.exec_time_s,
            "total_executor_service_time_esu_s": self.total_executor_service_time_esu_s,
            "outcome": self.outcome.value,
        }
        if self.peak_post_gc_heap_gb is not None:
            obj["peak_post_gc_heap_gb"] = self.peak_post_gc_heap_gb
        if self.de_type is not None:
            obj["de_type"] = self.de_type.value
        return obj

    @classmethod
    def from_json_obj(cls, obj: dict) -> "ExecutionStats":
        return cls(
            build_id=obj["build_id"],
            peak_heap_gb=obj["peak_heap_gb"],
            gc_occurred=obj["gc_occurred"],
            exec_time_s=obj["exec_time_s"],
            total_executor_service_time_esu_s=obj["total_executor_service_time_esu_s"],
            outcome=Outcome(obj["outcome"]),
            peak_post_gc_heap_gb=obj.get("peak_post_gc_heap_gb"),
            de_type=DeType(obj["de_type"]) if obj.get("de_type") else None,
        )


def sort_targets(targets: Iterable[Target]) -> list[Target]:
    """Byte-wise lexicographic order on the full label; total and locale-free."""
    return sorted(targets, key=lambda t: t.label.encode("utf-8"))
