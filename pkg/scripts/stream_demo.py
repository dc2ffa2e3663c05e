#!/usr/bin/env python3
"""Drive the TCP batching service end to end on a synthetic workload.

Starts an in-process server, streams targets at it in chunks the way a
real client would, and prints one line per created build. Without
--models-dir the estimators fail closed and every batch falls back to
the fixed fallback size, which is itself worth eyeballing:

    python3 scripts/stream_demo.py
    python3 scripts/stream_demo.py --models-dir models/ --chunk 50
"""

from __future__ import annotations

import argparse

from buildbatch.batching import BatchingConfig
from buildbatch.core import BuildFlags, ContextKind, ExecutionContext, Priority
from buildbatch.estimators import ErrorEstimator, load_model_estimators
from buildbatch.features import FeatureSpec
from buildbatch.regression import ModelKind
from buildbatch.service import BatchingServer, RecordingBuildCreator, ServiceDeps, stream_targets
from buildbatch.simulator import generate_workload


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--seed", type=int, default=11)
    parser.add_argument("--n-targets", type=int, default=400)
    parser.add_argument("--chunk", type=int, default=125, help="targets per frame")
    parser.add_argument("--models-dir", default="")
    parser.add_argument("--priority", default="medium", choices=[p.value for p in Priority])
    args = parser.parse_args(argv)

    if args.models_dir:
        mem_est, occ_est = load_model_estimators(args.models_dir, FeatureSpec())
    else:
        mem_est = ErrorEstimator(ModelKind.MEMORY, "no models directory given")
        occ_est = ErrorEstimator(ModelKind.OCCUPANCY, "no models directory given")
    creator = RecordingBuildCreator()
    deps = ServiceDeps(
        batch_cfg=BatchingConfig(),
        mem_est=mem_est,
        occ_est=occ_est,
        build_creator=creator,
    )
    server = BatchingServer("127.0.0.1", 0, deps)
    server.start()
    host, port = server.address
    print(f"server on {host}:{port}")

    targets, _ = generate_workload(args.seed, args.n_targets)
    chunks = [targets[i : i + args.chunk] for i in range(0, len(targets), args.chunk)]
    print(f"streaming {len(targets)} targets in {len(chunks)} frames")
    try:
        frames = stream_targets(
            (host, port),
            ExecutionContext(ContextKind.WORKSPACE, "demo-workspace"),
            BuildFlags.from_pairs([("--keep_going", "true")]),
            chunks,
            priority=Priority(args.priority),
        )
    finally:
        server.shutdown()

    by_id = {b.id: b for b in creator.builds}
    for frame in frames:
        if frame.get("type") != "response":
            print(f"error frame: {frame}")
            return 1
        build = by_id[frame["build_request_id"]]
        print(
            f"build {build.id}  {len(build.targets):4d} targets  "
            f"{build.reason.value}  [{build.targets[0].label} .. {build.targets[-1].label}]"
        )
    print(f"{len(frames)} builds created")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
