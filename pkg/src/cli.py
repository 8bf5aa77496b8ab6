"""Command-line entry point: simulate traffic, train profiles, detect and evaluate.

Every subcommand reads its inputs from files, writes its outputs to files
and prints a short human-readable summary to stdout. Logging goes to
stderr; `-v` enables INFO and `-vv` DEBUG.

Defaults assume the repository layout:
- data/whois_cache.csv (override with NATPRINT_WHOIS_CACHE)
- data/simulation/ for simulator output
- data/experiment/ for benchmark artifacts
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from ipaddress import IPv4Address
from pathlib import Path
from typing import Any, Callable, Final, Sequence

import pandas as pd
import yaml

from src.classifiers import ForestParams, evaluate, forest_from_dict, forest_to_dict, roc_curve
from src.detector import (
    DEFAULT_INTERVAL_MS,
    IntervalRecord,
    SumThresholdClassifier,
    cross_validate_final_classifier,
    detect,
    interval_records,
    train_final_classifier,
    truth_labels,
    write_detections,
)
from src.errors import ConfigurationError, FingerprintError
from src.experiment import run_benchmark
from src.netflow import RawRecord, build_obfs, read_records, write_csv, write_netflow_v5
from src.simulator import export, load_scenario, read_truth, registry_ranges, simulate
from src.trainer import DEFAULT_LOCAL_CIDRS, TrainingConfig, load_profile, save_profile, train_profile
from src.whois import NetRange, ReplayWhoisClient, WhoisCache, WhoisClient, import_ranges, resolve_netrange

logger = logging.getLogger(__name__)

CACHE_ENV: Final[str] = "NATPRINT_WHOIS_CACHE"
DATA_DIR: Final[Path] = Path.cwd() / "data"


def default_cache_path() -> Path:
    return Path(os.environ.get(CACHE_ENV, DATA_DIR / "whois_cache.csv"))


def require_inputs(*paths: Path | None) -> None:
    for path in paths:
        if path is not None and not Path(path).exists():
            raise SystemExit(f"input not found: {path}")


def write_records(records: Sequence[RawRecord], path: Path) -> None:
    """CSV when the suffix says so, NetFlow v5 otherwise."""
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.suffix.lower() == ".csv":
        with open(path, "w", newline="") as f:
            write_csv(records, f)
    else:
        with open(path, "wb") as f:
            write_netflow_v5(records, f)


def detection_window(
    records: Sequence[RawRecord], interval_ms: int, start: int | None, end: int | None
) -> tuple[int, int]:
    """Explicit bounds win; otherwise the record span widened to whole intervals."""
    if start is None:
        first = min((r.start_ts for r in records), default=0)
        start = first - first % interval_ms
    if end is None:
        last = max((r.start_ts for r in records), default=start)
        end = start + ((last - start) // interval_ms + 1) * interval_ms
    if end <= start:
        raise ConfigurationError(f"empty detection window [{start}, {end})")
    return start, end


def print_table(df: pd.DataFrame) -> None:
    print(df.to_string(index=False))


# --- subcommands ------------------------------------------------------------


def cmd_simulate(args: argparse.Namespace) -> int:
    require_inputs(args.scenario)
    config = load_scenario(args.scenario)
    if args.seed is not None:
        config = config.model_copy(update={"seed": args.seed})
    records, truth = simulate(config)

    args.out_dir.mkdir(parents=True, exist_ok=True)
    outputs = {"records.csv": "csv", "records.nf5": "netflow_v5", "truth.csv": "truth_csv"}
    for name, fmt in outputs.items():
        with open(args.out_dir / name, "wb") as f:
            written = export(records, truth, fmt, f)
        print(f"Wrote {written} bytes to: {args.out_dir / name}")
    if args.registry_out is not None:
        cache = WhoisCache()
        import_ranges(cache, registry_ranges(config), config.start_ms)
        cache.save(args.registry_out)
        print(f"Wrote {len(cache)} registry ranges to: {args.registry_out}")
    return 0


def cmd_split_user(args: argparse.Namespace) -> int:
    require_inputs(args.records, args.truth)
    records = read_records(args.records)
    truth = read_truth(args.truth)
    if len(truth.record_users) != len(records):
        raise ConfigurationError(
            f"truth attributes {len(truth.record_users)} records but {args.records} holds {len(records)}"
        )
    if args.user not in truth.presence:
        raise ConfigurationError(f"user {args.user!r} does not appear in {args.truth}")
    mine = truth.user_records(records, args.user)
    others = truth.other_records(records, args.user)
    write_records(mine, args.user_out)
    write_records(others, args.background_out)
    print(f"{args.user}: {len(mine)} records to {args.user_out}")
    print(f"{len(others)} background records to {args.background_out}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    require_inputs(args.user_records, args.background)
    cache = WhoisCache.load(args.cache)
    config = TrainingConfig(
        seed=args.seed or 0,
        split_ratio=args.split_ratio,
        min_obfs=args.min_obfs,
        negative_ratio=args.negative_ratio,
        max_iter=args.max_iter,
        jobs=args.jobs,
        local_cidrs=tuple(args.local_cidr or DEFAULT_LOCAL_CIDRS),
    )
    mode = "online" if args.online else "offline"
    profile, report = train_profile(
        read_records(args.user_records),
        build_obfs(read_records(args.background)),
        cache,
        config,
        user_id=args.user_id,
        mode=mode,
    )
    save_profile(profile, args.out)
    report_path = args.report or args.out.with_name(f"{args.out.stem}_report.csv")
    report.to_frame().to_csv(report_path, index=False, lineterminator="\n")
    if mode == "online":
        cache.save(args.cache)

    print_table(report.to_frame()[["service", "n_obfs", "states", "subset", "f1", "skipped"]])
    by_port = pd.DataFrame(list(report.accuracy_by_port().items()), columns=["port", "mean_f1"])
    print_table(by_port)
    print(f"Wrote profile with {len(profile)} experts to: {args.out}")
    return 0


def _final_classifier(args: argparse.Namespace):
    if args.baseline is not None:
        return SumThresholdClassifier(args.baseline)
    require_inputs(args.classifier)
    return forest_from_dict(json.loads(args.classifier.read_text(encoding="utf-8")))


def cmd_train_final(args: argparse.Namespace) -> int:
    require_inputs(args.profile, args.records, args.truth)
    profile = load_profile(args.profile)
    records = read_records(args.records)
    truth = read_truth(args.truth)
    if args.user not in truth.presence:
        raise ConfigurationError(f"user {args.user!r} does not appear in {args.truth}")
    start, end = detection_window(records, args.interval_ms, args.start, args.end)
    intervals, _ = interval_records(profile, records, args.interval_ms, WhoisCache.load(args.cache), start, end)
    labels = truth_labels(intervals, truth.presence[args.user])
    params = ForestParams(
        n_trees=args.trees, max_depth=args.max_depth, min_leaf=args.min_leaf, seed=args.seed or 0
    )
    if args.folds:
        metrics = cross_validate_final_classifier(intervals, labels, params, args.folds, args.jobs)
        print(
            f"Out-of-fold over {args.folds} folds: F1 {metrics.f1:.3f}, ROC area {metrics.roc_area:.3f}, "
            f"FPR {metrics.fpr:.3f}"
        )
    model = train_final_classifier(intervals, labels, params, args.jobs)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(json.dumps(forest_to_dict(model)), encoding="utf-8")
    print(f"Trained {params.n_trees} trees on {len(intervals)} intervals ({sum(labels)} positive); wrote: {args.out}")
    return 0


def cmd_detect(args: argparse.Namespace) -> int:
    require_inputs(args.profile, args.records)
    profile = load_profile(args.profile)
    final = _final_classifier(args)
    records = read_records(args.records)
    start, end = detection_window(records, args.interval_ms, args.start, args.end)
    results = detect(profile, records, args.interval_ms, final, WhoisCache.load(args.cache), start, end)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    with open(args.out, "w", newline="") as f:
        write_detections(results, profile, f)
    print(f"{sum(r.label for r in results)} of {len(results)} intervals flagged; wrote: {args.out}")
    return 0


def aligned_intervals(detections: pd.DataFrame) -> list[IntervalRecord]:
    """Interval bounds of a detection file; rejects overlapping or uneven intervals."""
    for column in ("interval_start", "interval_end", "label", "score"):
        if column not in detections.columns:
            raise ConfigurationError(f"detections lack column {column!r}")
    starts = detections["interval_start"].astype("int64").tolist()
    ends = detections["interval_end"].astype("int64").tolist()
    lengths = {e - s for s, e in zip(starts, ends)}
    if len(lengths) > 1 or any(length <= 0 for length in lengths):
        raise ConfigurationError("detection intervals do not share one positive length")
    if any(later < earlier_end for earlier_end, later in zip(ends, starts[1:])):
        raise ConfigurationError("detection intervals overlap or are out of order")
    return [IntervalRecord(s, e - s, (), ()) for s, e in zip(starts, ends)]


def cmd_evaluate(args: argparse.Namespace) -> int:
    require_inputs(args.detections, args.truth)
    detections = pd.read_csv(args.detections)
    if detections.empty:
        raise ConfigurationError(f"{args.detections} holds no intervals")
    truth = read_truth(args.truth)
    if args.user not in truth.presence:
        raise ConfigurationError(f"user {args.user!r} does not appear in {args.truth}")
    intervals = aligned_intervals(detections)
    labels = truth_labels(intervals, truth.presence[args.user])
    predictions = list(zip(detections["label"].astype(int), detections["score"].astype(float)))
    metrics = evaluate(predictions, labels)

    print_table(
        pd.DataFrame(
            [
                {
                    "TPR": metrics.tpr,
                    "FPR": metrics.fpr,
                    "Precision": metrics.precision,
                    "Recall": metrics.recall,
                    "F-Measure": metrics.f1,
                    "ROC Area": metrics.roc_area,
                    "Correct": metrics.correctly_classified,
                    "Incorrect": metrics.incorrectly_classified,
                }
            ]
        )
    )
    roc_path = args.roc_out or args.detections.with_name(f"{args.detections.stem}_roc.csv")
    points = roc_curve(detections["score"].astype(float).tolist(), labels)
    pd.DataFrame(points, columns=["fpr", "tpr", "threshold"]).to_csv(roc_path, index=False, lineterminator="\n")
    print(f"Wrote ROC points to: {roc_path}")
    return 0


def cmd_experiment(args: argparse.Namespace) -> int:
    result = run_benchmark(args.out_dir, seed=args.seed if args.seed is not None else 7, jobs=args.jobs)
    summary = ["user_id", "experts", "precision", "recall", "f1", "tpr", "fpr", "roc_area", "negative_fpr"]
    print_table(result.table[summary])
    print(f"ROC area mean {result.roc_mean:.4f}, variance {result.roc_variance:.6f}")
    print(f"finished. Results saved to {args.out_dir}")
    return 0


def _ranges_from_file(path: Path) -> list[NetRange]:
    """Cache-format lines, or one CIDR per line."""
    ranges = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        try:
            if "," in line:
                first, last, *rest = [part.strip() for part in line.split(",")]
                ranges.append(NetRange(IPv4Address(first), IPv4Address(last), rest[0] if rest else "cache"))
            else:
                ranges.append(NetRange.from_network(line))
        except ValueError as e:
            raise ConfigurationError(f"{path}:{lineno}: {e}") from None
    return ranges


def cmd_whois_import(args: argparse.Namespace) -> int:
    if args.scenario is None and args.ranges is None:
        raise ConfigurationError("whois-import needs --scenario or --ranges")
    require_inputs(args.scenario, args.ranges)
    cache = WhoisCache.load(args.cache)
    ranges: list[NetRange] = []
    retrieved_at = None
    if args.scenario is not None:
        scenario = load_scenario(args.scenario)
        ranges += registry_ranges(scenario)
        retrieved_at = scenario.start_ms
    if args.ranges is not None:
        ranges += _ranges_from_file(args.ranges)
    count = import_ranges(cache, ranges, retrieved_at)
    cache.save(args.cache)
    print(f"Imported {count} ranges; {len(cache)} ranges in: {args.cache}")
    return 0


def cmd_whois_resolve(args: argparse.Namespace) -> int:
    cache = WhoisCache.load(args.cache)
    mode = "online" if args.online or args.replay_dir is not None else "offline"
    client = ReplayWhoisClient(args.replay_dir) if args.replay_dir is not None else WhoisClient()
    rows = []
    for ip in args.ips:
        netrange = resolve_netrange(ip, cache, mode, client, args.max_age_ms)
        rows.append({"ip": ip, "netrange": str(netrange), "source": netrange.source, "addresses": netrange.size})
    print_table(pd.DataFrame(rows))
    if mode == "online":
        cache.save(args.cache)
        logger.info("%d registry queries issued", client.query_count)
    return 0


# --- argument parsing -------------------------------------------------------


def _add_interval_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--interval-ms", type=int, default=DEFAULT_INTERVAL_MS, help="Aggregation interval length")
    parser.add_argument("--start", type=int, default=None, help="Window start (epoch ms), defaults to the first record")
    parser.add_argument("--end", type=int, default=None, help="Window end (epoch ms), defaults past the last record")


def _add_cache_flag(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--cache", type=Path, default=default_cache_path(), help=f"Whois cache file (default ${CACHE_ENV})"
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Fingerprint NAT'd users from NetFlow records")
    parser.add_argument("--config", type=Path, default=None, help="YAML file with per-subcommand overrides")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="More logging (repeatable)")
    parser.add_argument("--seed", type=int, default=None, help="Seed for every random choice")
    parser.add_argument("--jobs", type=int, default=1, help="Parallel workers for training")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="Generate synthetic NetFlow traffic from a scenario")
    p.add_argument("--scenario", type=Path, required=True, help="Scenario YAML file")
    p.add_argument("--out-dir", type=Path, default=DATA_DIR / "simulation", help="Output directory")
    p.add_argument("--registry-out", type=Path, default=None, help="Also write the scenario registry as a whois cache")
    p.set_defaults(handler=cmd_simulate)

    p = sub.add_parser("split-user", help="Separate one user's records from a simulated mix")
    p.add_argument("--records", type=Path, required=True)
    p.add_argument("--truth", type=Path, required=True)
    p.add_argument("--user", required=True)
    p.add_argument("--user-out", type=Path, required=True)
    p.add_argument("--background-out", type=Path, required=True)
    p.set_defaults(handler=cmd_split_user)

    p = sub.add_parser("train", help="Train a user profile")
    p.add_argument("--user-records", type=Path, required=True)
    p.add_argument("--background", type=Path, required=True)
    _add_cache_flag(p)
    p.add_argument("--out", type=Path, required=True, help="Profile JSON path")
    p.add_argument("--report", type=Path, default=None, help="Training report CSV path")
    p.add_argument("--user-id", default="target")
    p.add_argument("--min-obfs", type=int, default=10)
    p.add_argument("--split-ratio", type=float, default=0.8)
    p.add_argument("--negative-ratio", type=float, default=1.0)
    p.add_argument("--max-iter", type=int, default=100)
    p.add_argument("--local-cidr", action="append", default=None, help="Local network CIDR (repeatable)")
    p.add_argument("--online", action="store_true", help="Query the registries on cache misses")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("train-final", help="Fit the Random Forest final classifier")
    p.add_argument("--profile", type=Path, required=True)
    p.add_argument("--records", type=Path, required=True)
    p.add_argument("--truth", type=Path, required=True)
    p.add_argument("--user", required=True)
    _add_cache_flag(p)
    _add_interval_flags(p)
    p.add_argument("--trees", type=int, default=100)
    p.add_argument("--max-depth", type=int, default=None)
    p.add_argument("--min-leaf", type=int, default=1)
    p.add_argument("--folds", type=int, default=0, help="Also report out-of-fold metrics over N folds")
    p.add_argument("--out", type=Path, required=True, help="Forest JSON path")
    p.set_defaults(handler=cmd_train_final)

    p = sub.add_parser("detect", help="Detect a profiled user per time interval")
    p.add_argument("--profile", type=Path, required=True)
    p.add_argument("--records", type=Path, required=True)
    _add_cache_flag(p)
    _add_interval_flags(p)
    final = p.add_mutually_exclusive_group(required=True)
    final.add_argument("--classifier", type=Path, help="Forest JSON from train-final")
    final.add_argument("--baseline", type=float, help="Weighted-sum threshold instead of a forest")
    p.add_argument("--out", type=Path, required=True, help="Detection CSV path")
    p.set_defaults(handler=cmd_detect)

    p = sub.add_parser("evaluate", help="Score detections against ground truth")
    p.add_argument("--detections", type=Path, required=True)
    p.add_argument("--truth", type=Path, required=True)
    p.add_argument("--user", required=True)
    p.add_argument("--roc-out", type=Path, default=None)
    p.set_defaults(handler=cmd_evaluate)

    p = sub.add_parser("experiment", help="Run the synthetic 20-user benchmark")
    p.add_argument("--out-dir", type=Path, default=DATA_DIR / "experiment")
    p.set_defaults(handler=cmd_experiment)

    p = sub.add_parser("whois-import", help="Load netranges into the whois cache")
    _add_cache_flag(p)
    p.add_argument("--scenario", type=Path, default=None, help="Import a scenario's registry")
    p.add_argument("--ranges", type=Path, default=None, help="Cache-format or CIDR-per-line file")
    p.set_defaults(handler=cmd_whois_import)

    p = sub.add_parser("whois-resolve", help="Resolve addresses to their smallest netrange")
    _add_cache_flag(p)
    p.add_argument("ips", nargs="+")
    p.add_argument("--online", action="store_true")
    p.add_argument("--replay-dir", type=Path, default=None, help="Answer from recorded transcripts")
    p.add_argument("--max-age-ms", type=int, default=None)
    p.set_defaults(handler=cmd_whois_resolve)
    return parser


def _path_options(parser: argparse.ArgumentParser) -> set[str]:
    dests = {a.dest for a in parser._actions if a.type is Path}
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            for sub in action.choices.values():
                dests |= _path_options(sub)
    return dests


def apply_config(args: argparse.Namespace, parser: argparse.ArgumentParser) -> argparse.Namespace:
    """Override parsed flags with the `--config` mapping for the chosen subcommand."""
    if args.config is None:
        return args
    require_inputs(args.config)
    document = yaml.safe_load(args.config.read_text(encoding="utf-8")) or {}
    if not isinstance(document, dict):
        raise ConfigurationError(f"{args.config} must hold a mapping of subcommands")
    overrides: dict[str, Any] = document.get(args.command) or {}
    paths = _path_options(parser)
    for key, value in overrides.items():
        dest = key.replace("-", "_")
        if not hasattr(args, dest):
            raise ConfigurationError(f"{args.config}: unknown option {key!r} for {args.command}")
        setattr(args, dest, Path(value) if dest in paths and value is not None else value)
    return args


def parse_args(argv: Sequence[str] | None = None) -> argparse.Namespace:
    parser = build_parser()
    return apply_config(parser.parse_args(argv), parser)


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=max(logging.DEBUG, logging.WARNING - 10 * args.verbose),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    handler: Callable[[argparse.Namespace], int] = args.handler
    try:
        return handler(apply_config(args, parser))
    except (FingerprintError, ValueError, OSError) as e:
        raise SystemExit(f"error: {e}") from None


if __name__ == "__main__":
    raise SystemExit(main())
