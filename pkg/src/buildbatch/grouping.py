"""Group targets by required executor types and sort each group.

Executor inference checks tags first, then falls back to a rule-kind
mapping; x86 is always part of the result since every build needs CPU
executors. Grouping by executor-type set keeps a scarce executor type
(say, GPUs) from delaying targets that never needed it.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

from .core import GPU, MAC, TPU, X86, ExecutorTypeSet, Target, sort_targets

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib


@dataclass(frozen=True)
class InferenceRule:
    """One tag or rule-prefix match mapping to an executor type."""

    match: str  # "tag" or "rule_prefix"
    pattern: str
    executor_type: str

    def __post_init__(self):
        if self.match not in ("tag", "rule_prefix"):
            raise ValueError(f"unknown match kind {self.match!r}")


DEFAULT_RULES: tuple[InferenceRule, ...] = (
    InferenceRule("tag", "requires-gpu", GPU),
    InferenceRule("tag", "requires-tpu", TPU),
    InferenceRule("tag", "requires-mac", MAC),
    InferenceRule("rule_prefix", "ios_", MAC),
    InferenceRule("rule_prefix", "macos_", MAC),
)


def load_rules(path: str) -> tuple[InferenceRule, ...]:
    """Load inference rules from a TOML file with [[rule]] entries.

    The file replaces the built-in default rule set entirely.
    """
    with open(path, "rb") as f:
        doc = tomllib.load(f)
    rules = []
    for entry in doc.get("rule", []):
        rules.append(InferenceRule(entry["match"], entry["pattern"], entry["executor_type"]))
    return tuple(rules)


def infer_executor_types(
    target: Target, rules: Iterable[InferenceRule] = DEFAULT_RULES
) -> ExecutorTypeSet:
    """Required executor types for one target.

    Tag matches take precedence: when any tag rule fires, rule-kind rules are
    not consulted. The result always includes x86.
    """
    types = {X86}
    tag_matched = False
    for rule in rules:
        if rule.match == "tag" and rule.pattern in target.tags:
            types.add(rule.executor_type)
            tag_matched = True
    if not tag_matched:
        for rule in rules:
            if rule.match == "rule_prefix" and target.rule_kind.startswith(rule.pattern):
                types.add(rule.executor_type)
    return ExecutorTypeSet.of(*types)


def group_and_sort(
    targets: Iterable[Target], rules: Iterable[InferenceRule] = DEFAULT_RULES
) -> dict[ExecutorTypeSet, list[Target]]:
    """Partition targets into per-executor-type-set groups, each sorted.

    Duplicate labels are dropped, keeping the first occurrence. Each group
    comes back in byte-wise lexicographic label order, and the groups are
    keyed in a deterministic order (sorted by type-set key).
    """
    seen: set[str] = set()
    groups: dict[ExecutorTypeSet, list[Target]] = {}
    for t in targets:
        if t.label in seen:
            continue
        seen.add(t.label)
        groups.setdefault(infer_executor_types(t, rules), []).append(t)
    return {k: sort_targets(groups[k]) for k in sorted(groups, key=lambda s: s.key())}
