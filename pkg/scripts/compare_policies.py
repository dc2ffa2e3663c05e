#!/usr/bin/env python3
"""Run several batching policies against one simulated workload.

Synthesizes a target universe and a build history, trains the memory
and occupancy models from that history, then runs each policy over the
same target stream and prints a comparison table. With --out-dir the
full CSV report and per-policy metrics JSON are written as well.

The defaults reproduce the headline experiment and take about two
minutes:

    python3 scripts/compare_policies.py
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
import time

from buildbatch.batching import BatchingConfig
from buildbatch.core import BuildFlags, ContextKind, ExecutionContext, Priority
from buildbatch.estimators import (
    MEMORY_PRIMARY_FILENAME,
    MEMORY_RECENT_FILENAME,
    OCCUPANCY_FILENAME,
    resolve_policy,
)
from buildbatch.features import FeatureSpec, universe_monotone_indices
from buildbatch.pipeline import build_dataset
from buildbatch.regression import ModelKind, TrainConfig, save_model, train
from buildbatch.reporting import collect_prediction_pairs, comparison_rows, write_report
from buildbatch.simulator import (
    ClusterConfig,
    check_experiment_invariants,
    generate_workload,
    run_experiment,
    simulate_prior_builds,
)

DEFAULT_NOW = 1_700_000_000.0


def train_models(records, spec: FeatureSpec, epochs: int, out_dir: str) -> None:
    uni = universe_monotone_indices((t for r in records for t in r.targets), spec)
    long_ds = build_dataset(records, 17.0, DEFAULT_NOW, spec, extra_monotone=uni)
    short_ds = build_dataset(records, 1.0, DEFAULT_NOW, spec, extra_monotone=uni)
    cfg = TrainConfig(
        lambda_plus=1e-4, learning_rate=0.02, epochs=epochs, minibatch=64, seed=1
    )
    for examples, mono, kind, days, name in (
        (long_ds.memory, long_ds.monotone_indices, ModelKind.MEMORY, 17, MEMORY_PRIMARY_FILENAME),
        (short_ds.memory, short_ds.monotone_indices, ModelKind.MEMORY, 1, MEMORY_RECENT_FILENAME),
        (long_ds.occupancy, long_ds.monotone_indices, ModelKind.OCCUPANCY, 17, OCCUPANCY_FILENAME),
    ):
        model = train(examples, cfg, mono, kind=kind, window_days=days)
        save_model(model, os.path.join(out_dir, name))


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--n-targets", type=int, default=50_000)
    parser.add_argument("--n-builds", type=int, default=10_000, help="history size")
    parser.add_argument("--epochs", type=int, default=150)
    parser.add_argument("--policies", default="naive900,btbs,oracle")
    parser.add_argument("--out-dir", default="", help="write report CSVs here")
    args = parser.parse_args(argv)

    policies = [p.strip() for p in args.policies.split(",") if p.strip()]
    spec = FeatureSpec()
    cluster = ClusterConfig()
    base_cfg = BatchingConfig()
    context = ExecutionContext(ContextKind.WORKSPACE, "simulated-workspace")
    flags = BuildFlags()

    t0 = time.perf_counter()
    targets, oracle = generate_workload(args.seed, args.n_targets)
    print(f"workload: {len(targets)} targets (seed {args.seed})")

    with tempfile.TemporaryDirectory(prefix="bb-models-") as models_dir:
        if "btbs" in policies:
            records = simulate_prior_builds(
                targets, oracle, cluster, args.n_builds, args.seed, DEFAULT_NOW
            )
            print(f"history: {len(records)} build records")
            train_models(records, spec, args.epochs, models_dir)
            print(f"models trained in {time.perf_counter() - t0:.0f}s")

        named_metrics = {}
        mem_pairs = {}
        occ_pairs = {}
        failures = 0
        for policy in policies:
            batch_cfg, mem_est, occ_est = resolve_policy(
                policy, base_cfg,
                models_dir=models_dir, spec=spec,
                oracle_memory_fn=oracle.memory_of_window,
                oracle_occupancy_fn=oracle.true_occupancy,
            )
            t1 = time.perf_counter()
            metrics, records = run_experiment(
                targets, oracle, cluster, batch_cfg, mem_est, occ_est,
                context=context, flags=flags,
            )
            named_metrics[policy] = metrics
            mem_pairs[policy], occ_pairs[policy] = collect_prediction_pairs(
                records, mem_est, occ_est, context, flags, Priority.MEDIUM
            )
            for v in check_experiment_invariants(records, targets, batch_cfg=batch_cfg):
                print(f"invariant violation [{policy}]: {v}", file=sys.stderr)
                failures += 1
            print(f"{policy}: {metrics.build_count} builds in {time.perf_counter() - t1:.0f}s")

        print()
        rows = comparison_rows(named_metrics)
        header = list(rows[0].keys())
        widths = [max(len(h), *(len(f"{r[h]:.4f}" if isinstance(r[h], float) else str(r[h])) for r in rows)) for h in header]
        print("  ".join(h.rjust(w) for h, w in zip(header, widths)))
        for r in rows:
            cells = [f"{r[h]:.4f}" if isinstance(r[h], float) else str(r[h]) for h in header]
            print("  ".join(c.rjust(w) for c, w in zip(cells, widths)))

        if args.out_dir:
            os.makedirs(args.out_dir, exist_ok=True)
            for policy, metrics in named_metrics.items():
                payload = {
                    "policy": policy,
                    "seed": args.seed,
                    "n_targets": args.n_targets,
                    "metrics": metrics.to_json_obj(),
                    "memory_predictions": [[a, p] for a, p in mem_pairs[policy]],
                    "occupancy_predictions": [[a, p] for a, p in occ_pairs[policy]],
                }
                path = os.path.join(args.out_dir, f"metrics_{policy}.json")
                with open(path, "w", encoding="utf-8") as f:
                    f.write(json.dumps(payload, sort_keys=True, separators=(",", ":")) + "\n")
            for path in write_report(args.out_dir, named_metrics, mem_pairs, occ_pairs):
                print(f"report -> {path}")

    print(f"\ntotal {time.perf_counter() - t0:.0f}s")
    return 1 if failures else 0


if __name__ == "__main__":
    raise SystemExit(main())
