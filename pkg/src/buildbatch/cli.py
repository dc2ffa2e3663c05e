"""Operator entry points.

Subcommands:
  gen-logs   synthesize a workload plus a history of executed builds
  train      fit the memory and occupancy models from build logs
  batch      run the batching algorithm offline over a target file
  simulate   end-to-end policy experiment; metrics JSON and report CSVs
  serve      long-running TCP batching service
  report     regenerate report CSVs from saved metrics JSON files

Every command is deterministic given --seed and its inputs; simulate in
particular writes byte-identical metrics.json for identical arguments.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from typing import Optional, Sequence

from .batching import BatchingConfig, batch_targets, load_batching_config
from .core import (
    BuildFlags,
    ContextKind,
    ExecutionContext,
    Priority,
    targets_from_jsonl,
    targets_to_jsonl,
)
from .estimators import (
    MEMORY_PRIMARY_FILENAME,
    MEMORY_RECENT_FILENAME,
    OCCUPANCY_FILENAME,
    ErrorEstimator,
    load_model_estimators,
    resolve_policy,
)
from .features import FeatureSpec, load_feature_spec, universe_monotone_indices
from .grouping import DEFAULT_RULES, group_and_sort, load_rules
from .pipeline import (
    InsufficientData,
    build_dataset,
    dataset_mse,
    read_logs_jsonl,
    write_logs_jsonl,
)
from .regression import ModelKind, TrainConfig, save_model, train
from .reporting import collect_prediction_pairs, write_report
from .service import BatchingServer, RecordingBuildCreator, ServiceDeps
from .simulator import (
    ClusterConfig,
    Metrics,
    WorkloadParams,
    check_experiment_invariants,
    generate_workload,
    load_cluster_config,
    load_workload_params,
    run_experiment,
    simulate_prior_builds,
)

DEFAULT_NOW = 1_700_000_000.0
SECONDS_PER_DAY = 86400.0


def _feature_spec(path: Optional[str]) -> FeatureSpec:
    return load_feature_spec(path) if path else FeatureSpec()


def _cluster_config(path: Optional[str]) -> ClusterConfig:
    return load_cluster_config(path) if path else ClusterConfig()


def _workload_params(path: Optional[str]) -> WorkloadParams:
    return load_workload_params(path) if path else WorkloadParams()


def _batching_config(path: Optional[str]) -> BatchingConfig:
    return load_batching_config(path) if path else BatchingConfig()


def _rules(path: Optional[str]):
    return load_rules(path) if path else DEFAULT_RULES


def cmd_gen_logs(args: argparse.Namespace) -> int:
    params = _workload_params(args.workload_config)
    cluster = _cluster_config(args.cluster_config)
    targets, oracle = generate_workload(args.seed, args.n_targets, params)
    records = simulate_prior_builds(
        targets, oracle, cluster, args.n_builds, args.seed, args.now, args.span_days
    )
    write_logs_jsonl(records, args.out)
    print(f"workload: {len(targets)} targets (seed {args.seed})")
    print(f"logs: {len(records)} build records -> {args.out}")
    if args.targets_out:
        with open(args.targets_out, "w", encoding="utf-8") as f:
            f.write(targets_to_jsonl(targets))
        print(f"targets: -> {args.targets_out}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    records, skipped = read_logs_jsonl(args.logs)
    if skipped:
        print(f"warning: skipped {skipped} malformed log lines", file=sys.stderr)
    if not records:
        print("error: no usable log records", file=sys.stderr)
        return 2
    now = max(r.timestamp for r in records)
    span_days = (now - min(r.timestamp for r in records)) / SECONDS_PER_DAY
    if span_days < args.window_days:
        print(
            f"warning: logs span {span_days:.1f} days, shorter than the "
            f"{args.window_days:g}-day window; using everything available",
            file=sys.stderr,
        )
    spec = _feature_spec(args.feature_spec)
    cfg = TrainConfig(
        lambda_plus=args.lambda_plus,
        learning_rate=args.learning_rate,
        epochs=args.epochs,
        minibatch=args.minibatch,
        seed=args.seed,
    )
    universe = universe_monotone_indices((t for r in records for t in r.targets), spec)
    long_ds = build_dataset(records, args.window_days, now, spec, extra_monotone=universe)
    short_ds = build_dataset(
        records, args.short_window_days, now, spec, extra_monotone=universe
    )
    jobs = [
        (MEMORY_PRIMARY_FILENAME, long_ds.memory, long_ds.monotone_indices,
         ModelKind.MEMORY, int(args.window_days)),
        (MEMORY_RECENT_FILENAME, short_ds.memory, short_ds.monotone_indices,
         ModelKind.MEMORY, int(args.short_window_days)),
        (OCCUPANCY_FILENAME, long_ds.occupancy, long_ds.monotone_indices,
         ModelKind.OCCUPANCY, int(args.window_days)),
    ]
    os.makedirs(args.out, exist_ok=True)
    for filename, examples, monotone, kind, window_days in jobs:
        if len(examples) < 2:
            raise InsufficientData(
                f"{filename}: {len(examples)} examples in the window, need at least 2"
            )
        # Chronological holdout: the saved model never sees the last tenth,
        # so the validation figure means something.
        cut = min(max(1, int(len(examples) * 0.9)), len(examples) - 1)
        model = train(
            examples[:cut], cfg, monotone, kind=kind, window_days=window_days
        )
        train_mse = dataset_mse(model, examples[:cut])
        val_mse = dataset_mse(model, examples[cut:])
        path = os.path.join(args.out, filename)
        save_model(model, path)
        print(
            f"{filename}: {cut} train / {len(examples) - cut} val examples, "
            f"train MSE {train_mse:.4f}, validation MSE {val_mse:.4f}"
        )
    return 0


def cmd_batch(args: argparse.Namespace) -> int:
    with open(args.targets_file, encoding="utf-8") as f:
        targets = targets_from_jsonl(f.read())
    if not targets:
        print("error: no targets in input", file=sys.stderr)
        return 2
    spec = _feature_spec(args.feature_spec)
    cfg = _batching_config(args.config)
    if args.models_dir:
        mem_est, occ_est = load_model_estimators(args.models_dir, spec)
    else:
        mem_est = ErrorEstimator(ModelKind.MEMORY, "no models directory given")
        occ_est = ErrorEstimator(ModelKind.OCCUPANCY, "no models directory given")
    context = ExecutionContext(ContextKind.WORKSPACE, "cli-batch")
    flags = BuildFlags.parse(args.flags or [])
    priority = Priority(args.priority)
    lines = []
    index = 0
    for type_set, group in group_and_sort(targets, _rules(args.rules)).items():
        for batch, reason in batch_targets(
            group, cfg, mem_est, occ_est, context, flags, priority
        ):
            lines.append(
                json.dumps(
                    {
                        "batch_index": index,
                        "executor_group": type_set.key(),
                        "reason": reason.value,
                        "target_count": len(batch),
                        "targets": [t.label for t in batch],
                    },
                    sort_keys=True,
                    separators=(",", ":"),
                )
            )
            index += 1
    text = "\n".join(lines) + "\n"
    if args.out == "-":
        sys.stdout.write(text)
    else:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(text)
        print(f"{index} batches -> {args.out}")
    return 0


def cmd_simulate(args: argparse.Namespace) -> int:
    params = _workload_params(args.workload_config)
    cluster = _cluster_config(args.cluster_config)
    spec = _feature_spec(args.feature_spec)
    base_cfg = _batching_config(args.batch_config)
    targets, oracle = generate_workload(args.seed, args.n_targets, params)
    try:
        batch_cfg, mem_est, occ_est = resolve_policy(
            args.policy,
            base_cfg,
            models_dir=args.models_dir,
            spec=spec,
            oracle_memory_fn=oracle.memory_of_window,
            oracle_occupancy_fn=oracle.true_occupancy,
        )
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    context = ExecutionContext(ContextKind.WORKSPACE, "simulated-workspace")
    flags = BuildFlags()
    priority = Priority.MEDIUM
    rules = _rules(args.rules)
    metrics, records = run_experiment(
        targets, oracle, cluster, batch_cfg, mem_est, occ_est,
        context=context, flags=flags, priority=priority, rules=rules,
    )
    mem_pairs, occ_pairs = collect_prediction_pairs(
        records, mem_est, occ_est, context, flags, priority
    )
    payload = {
        "policy": args.policy,
        "seed": args.seed,
        "n_targets": args.n_targets,
        "metrics": metrics.to_json_obj(),
        "memory_predictions": [[a, p] for a, p in mem_pairs],
        "occupancy_predictions": [[a, p] for a, p in occ_pairs],
    }
    os.makedirs(args.out_dir, exist_ok=True)
    metrics_path = os.path.join(args.out_dir, "metrics.json")
    with open(metrics_path, "w", encoding="utf-8") as f:
        f.write(json.dumps(payload, sort_keys=True, separators=(",", ":")) + "\n")
    written = write_report(
        args.out_dir,
        {args.policy: metrics},
        {args.policy: mem_pairs},
        {args.policy: occ_pairs},
    )
    print(
        f"policy {args.policy}: {metrics.build_count} builds "
        f"({metrics.initial_build_count} initial, {metrics.retry_count} retries, "
        f"{metrics.gave_up_count} gave up), "
        f"{metrics.oom_count} OOM, {metrics.de_type_i_count} type I DE, "
        f"{metrics.de_type_ii_count} type II DE"
    )
    print(f"metrics -> {metrics_path}")
    for path in written:
        print(f"report -> {path}")
    violations = check_experiment_invariants(records, targets, rules, batch_cfg)
    if violations:
        for v in violations:
            print(f"invariant violation: {v}", file=sys.stderr)
        return 1
    return 0


def cmd_serve(args: argparse.Namespace) -> int:
    host, _, port_text = args.listen.rpartition(":")
    if not host or not port_text.isdigit():
        print(f"error: --listen must be host:port, got {args.listen!r}", file=sys.stderr)
        return 2
    spec = _feature_spec(args.feature_spec)
    cfg = _batching_config(args.config)
    if args.models_dir:
        mem_est, occ_est = load_model_estimators(args.models_dir, spec)
    else:
        mem_est = ErrorEstimator(ModelKind.MEMORY, "no models directory given")
        occ_est = ErrorEstimator(ModelKind.OCCUPANCY, "no models directory given")
    deps = ServiceDeps(
        batch_cfg=cfg,
        mem_est=mem_est,
        occ_est=occ_est,
        build_creator=RecordingBuildCreator(),
        rules=_rules(args.rules),
    )
    server = BatchingServer(host, int(port_text), deps)
    bound_host, bound_port = server.address
    print(f"listening on {bound_host}:{bound_port}")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        print("shutting down")
        server.shutdown()
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    named_metrics = {}
    mem_pairs = {}
    occ_pairs = {}
    for path in args.metrics:
        with open(path, encoding="utf-8") as f:
            payload = json.load(f)
        name = str(payload.get("policy", os.path.basename(path)))
        k = 2
        while name in named_metrics:
            name = f"{payload.get('policy', 'run')}-{k}"
            k += 1
        named_metrics[name] = Metrics.from_json_obj(payload["metrics"])
        mem_pairs[name] = [tuple(p) for p in payload.get("memory_predictions", [])]
        occ_pairs[name] = [tuple(p) for p in payload.get("occupancy_predictions", [])]
    written = write_report(args.out_dir, named_metrics, mem_pairs, occ_pairs)
    for path in written:
        print(f"report -> {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="buildbatch", description="Build target batching toolkit."
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-logs", help="synthesize a workload and build logs")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-targets", type=int, default=50_000)
    p.add_argument("--n-builds", type=int, default=10_000)
    p.add_argument("--out", required=True, help="logs JSONL path")
    p.add_argument("--targets-out", help="also write the target list as JSONL")
    p.add_argument("--span-days", type=float, default=17.5)
    p.add_argument("--now", type=float, default=DEFAULT_NOW)
    p.add_argument("--cluster-config")
    p.add_argument("--workload-config")
    p.set_defaults(func=cmd_gen_logs)

    p = sub.add_parser("train", help="fit models from build logs")
    p.add_argument("--logs", required=True)
    p.add_argument("--out", required=True, help="model output directory")
    p.add_argument("--window-days", type=float, default=17.0)
    p.add_argument("--short-window-days", type=float, default=1.0)
    p.add_argument("--feature-spec")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lambda", dest="lambda_plus", type=float, default=7000.0)
    p.add_argument("--learning-rate", type=float, default=0.01)
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--minibatch", type=int, default=64)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("batch", help="batch a target file offline")
    p.add_argument("--targets-file", required=True, help="targets JSONL path")
    p.add_argument(
        "--flags", action="append", default=[],
        help="build flag, e.g. --flags=--keep_going=true (repeatable)",
    )
    p.add_argument(
        "--priority", choices=[pr.value for pr in Priority], default=Priority.MEDIUM.value
    )
    p.add_argument("--models-dir")
    p.add_argument("--feature-spec")
    p.add_argument("--config", help="batching config TOML")
    p.add_argument("--rules", help="executor inference rules TOML")
    p.add_argument("--out", default="-", help="batches JSONL path, - for stdout")
    p.set_defaults(func=cmd_batch)

    p = sub.add_parser("simulate", help="run a policy experiment")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-targets", type=int, default=50_000)
    p.add_argument("--policy", required=True, help="naiveN, btbs, or oracle")
    p.add_argument("--models-dir")
    p.add_argument("--cluster-config")
    p.add_argument("--workload-config")
    p.add_argument("--batch-config")
    p.add_argument("--feature-spec")
    p.add_argument("--rules")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("serve", help="run the batching service")
    p.add_argument("--listen", default="127.0.0.1:8347", help="host:port")
    p.add_argument("--models-dir")
    p.add_argument("--config", help="batching config TOML")
    p.add_argument("--feature-spec")
    p.add_argument("--rules")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("report", help="CSV tables from metrics JSON files")
    p.add_argument("--metrics", nargs="+", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
