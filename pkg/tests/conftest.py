"""Shared test setup: a deterministic hypothesis profile plus small
workload fixtures that several modules reuse."""

from __future__ import annotations

import hypothesis
import pytest

from buildbatch.core import Target, parse_target
from buildbatch.simulator import generate_workload

hypothesis.settings.register_profile(
    "repo",
    deadline=None,  # simulator-backed properties have uneven step costs
    max_examples=60,
    derandomize=True,
)
hypothesis.settings.load_profile("repo")


@pytest.fixture(scope="session")
def make_targets():
    """Factory for plain x86 targets spread over packages."""

    def make(n: int, pkg_size: int = 20, prefix: str = "pool") -> list[Target]:
        return [
            parse_target(f"//{prefix}/pkg{i // pkg_size:04d}:t{i % pkg_size:04d}")
            for i in range(n)
        ]

    return make


@pytest.fixture(scope="session")
def small_workload():
    """600 generated targets plus their oracle, shared read-only."""
    return generate_workload(11, 600)
