"""Desk-scale benchmark: 20 users behind two NAT addresses, five of them tracked.

Each target gets a profile from an 8-hour training slice where everybody is
online, a Random Forest calibrated on a separate day, and is then detected
on an evaluation day and on a negative-control day from which the target
is removed.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from src.classifiers import ForestParams, evaluate, forest_to_dict, roc_curve
from src.detector import (
    HOUR_MS,
    classify_intervals,
    cross_validate_final_classifier,
    interval_records,
    train_final_classifier,
    truth_labels,
    write_detections,
)
from src.netflow import build_obfs
from src.simulator import SimulationConfig, export, registry_ranges, scenario_from_dict, simulate
from src.trainer import TrainingConfig, save_profile, train_profile
from src.whois import WhoisCache, import_ranges

logger = logging.getLogger(__name__)

DAY_HOURS = 24
PRESENT_HOURS = 12
TRAINING_HOURS = 8
# out-of-fold check of the forest on the calibration day; 12 hours per class
CALIBRATION_FOLDS = 4
# Whole hours, so interval boundaries fall on the hour.
EPOCH_MS = 472_222 * HOUR_MS
NAT_IPS = ["198.51.100.1", "198.51.100.2"]
LOCAL_PREFIXES = ["198.51.100.0/24"]

# (first, last, port) of the services every user picks from.
SERVICES = [
    ("45.10.0.0", "45.10.255.255", 443),
    ("45.20.0.0", "45.20.255.255", 443),
    ("45.30.4.0", "45.30.4.255", 5222),
    ("45.40.0.0", "45.40.255.255", 993),
    ("45.50.0.0", "45.50.255.255", 80),
]
# Enclosing blocks a registry would also report.
PARENT_RANGES = [("45.30.0.0", "45.30.255.255"), ("45.0.0.0", "45.255.255.255")]


@dataclass
class BenchmarkScenarios:
    training: SimulationConfig
    calibration: SimulationConfig
    evaluation: SimulationConfig
    negative_controls: dict[str, SimulationConfig]
    targets: list[str]


@dataclass
class BenchmarkResult:
    table: pd.DataFrame
    roc_mean: float
    roc_variance: float
    files: list[Path] = field(default_factory=list)


def _user_services(user: int, rng: np.random.Generator, target: int | None) -> list[dict]:
    services = []
    for offset in range(3):
        first, last, port = SERVICES[(user + offset) % len(SERVICES)]
        if target is None:
            behaviour = {
                "session_rate": float(rng.uniform(2.0, 4.0)),
                "gap_ms": {"mu": float(np.log(rng.uniform(20_000, 40_000))), "sigma": 0.35},
                "packets": {"mu": float(rng.uniform(1.5, 2.5)), "sigma": 0.3},
                "bytes": {"mu": float(rng.uniform(6.0, 7.5)), "sigma": 0.3},
                "outgoing_fraction": float(rng.uniform(0.4, 0.6)),
            }
        else:
            behaviour = {
                "session_rate": 6.0,
                "gap_ms": {"mu": float(np.log(20_000 + 5_000 * target)), "sigma": 0.3},
                "packets": {"mu": 2.0 + 0.5 * target, "sigma": 0.3},
                "bytes": {"mu": 9.0 + 1.5 * target, "sigma": 0.3},
                "outgoing_fraction": 0.3 + 0.1 * target,
            }
        services.append(
            {"first_ip": first, "last_ip": last, "port": port, "records_per_obf": {"low": 4, "high": 10}, **behaviour}
        )
    return services


def _hour_schedule(rng: np.random.Generator, hours: int, present: int) -> list[dict]:
    chosen = np.sort(rng.choice(hours, size=present, replace=False))
    spans: list[list[int]] = []
    for hour in chosen.tolist():
        if spans and spans[-1][1] == hour:
            spans[-1][1] = hour + 1
        else:
            spans.append([hour, hour + 1])
    return [{"start_ms": a * HOUR_MS, "end_ms": b * HOUR_MS} for a, b in spans]


def _scenario(users: list[dict], schedule: dict, hours: int, start_ms: int, seed: int) -> SimulationConfig:
    registry = [{"first_ip": first, "last_ip": last} for first, last, _ in SERVICES] + [
        {"first_ip": first, "last_ip": last} for first, last in PARENT_RANGES
    ]
    return scenario_from_dict(
        {
            "users": users,
            "schedule": schedule,
            "duration_ms": hours * HOUR_MS,
            "start_ms": start_ms,
            "nat_ips": NAT_IPS,
            "local_prefixes": LOCAL_PREFIXES,
            "seed": seed,
            "registry": registry,
        }
    )


def benchmark_scenarios(seed: int = 7, n_users: int = 20, n_targets: int = 5) -> BenchmarkScenarios:
    """Training, calibration, evaluation and per-target negative-control scenarios."""
    if not 1 <= n_targets <= n_users:
        raise ValueError("n_targets must lie in [1, n_users]")
    rng = np.random.default_rng(seed)
    user_ids = [f"user-{u:02d}" for u in range(n_users)]
    users = [
        {"user_id": uid, "services": _user_services(u, rng, u if u < n_targets else None)}
        for u, uid in enumerate(user_ids)
    ]
    targets = user_ids[:n_targets]

    everyone = {uid: [{"start_ms": 0, "end_ms": TRAINING_HOURS * HOUR_MS}] for uid in user_ids}
    training = _scenario(users, everyone, TRAINING_HOURS, EPOCH_MS, seed)

    calibration_schedule = {uid: _hour_schedule(rng, DAY_HOURS, PRESENT_HOURS) for uid in user_ids}
    calibration = _scenario(users, calibration_schedule, DAY_HOURS, EPOCH_MS + DAY_HOURS * HOUR_MS, seed + 1)

    evaluation_schedule = {uid: _hour_schedule(rng, DAY_HOURS, PRESENT_HOURS) for uid in user_ids}
    evaluation_start = EPOCH_MS + 2 * DAY_HOURS * HOUR_MS
    evaluation = _scenario(users, evaluation_schedule, DAY_HOURS, evaluation_start, seed + 2)

    negative_controls = {
        target: _scenario(
            [u for u in users if u["user_id"] != target],
            {uid: spans for uid, spans in evaluation_schedule.items() if uid != target},
            DAY_HOURS,
            evaluation_start,
            seed + 2,
        )
        for target in targets
    }
    return BenchmarkScenarios(training, calibration, evaluation, negative_controls, targets)


def scenario_cache(*scenarios: SimulationConfig) -> WhoisCache:
    cache = WhoisCache()
    for scenario in scenarios:
        import_ranges(cache, registry_ranges(scenario), scenario.start_ms)
    return cache


def _day_window(scenario: SimulationConfig) -> tuple[int, int]:
    return scenario.start_ms, scenario.start_ms + scenario.duration_ms


def _write_export(path: Path, records, truth, fmt) -> Path:
    with open(path, "wb") as f:
        export(records, truth, fmt, f)
    return path


def run_benchmark(
    out_dir: Path, seed: int = 7, jobs: int = 1, forest: ForestParams | None = None
) -> BenchmarkResult:
    """Train, calibrate, detect and evaluate every target; write all artifacts into `out_dir`."""
    out_dir.mkdir(parents=True, exist_ok=True)
    scenarios = benchmark_scenarios(seed)
    forest = forest or ForestParams(seed=seed)
    cache = scenario_cache(scenarios.training)
    files: list[Path] = []

    days = {}
    for name, scenario in (
        ("training", scenarios.training),
        ("calibration", scenarios.calibration),
        ("evaluation", scenarios.evaluation),
    ):
        records, truth = simulate(scenario)
        days[name] = (records, truth)
        files.append(_write_export(out_dir / f"{name}.nf5", records, truth, "netflow_v5"))
        files.append(_write_export(out_dir / f"{name}_truth.csv", records, truth, "truth_csv"))

    train_records, train_truth = days["training"]
    rows = []
    roc_rows = []
    for target in scenarios.targets:
        logger.info("benchmark target %s", target)
        config = TrainingConfig(seed=seed, jobs=jobs, local_cidrs=tuple(scenarios.training.local_prefixes))
        background = train_truth.other_records(train_records, target)
        profile, _ = train_profile(
            train_truth.user_records(train_records, target),
            build_obfs(background),
            cache,
            config,
            user_id=target,
        )
        save_profile(profile, out_dir / f"{target}_profile.json")
        files.append(out_dir / f"{target}_profile.json")

        cal_records, cal_truth = days["calibration"]
        cal_start, cal_end = _day_window(scenarios.calibration)
        cal_intervals, _ = interval_records(profile, cal_records, HOUR_MS, cache, cal_start, cal_end)
        cal_labels = truth_labels(cal_intervals, cal_truth.presence[target])
        model = train_final_classifier(cal_intervals, cal_labels, forest, jobs)
        calibration = cross_validate_final_classifier(cal_intervals, cal_labels, forest, CALIBRATION_FOLDS, jobs)
        forest_path = out_dir / f"{target}_forest.json"
        forest_path.write_text(json.dumps(forest_to_dict(model)), encoding="utf-8")
        files.append(forest_path)

        eval_records, eval_truth = days["evaluation"]
        start, end = _day_window(scenarios.evaluation)
        intervals, diagnostics = interval_records(profile, eval_records, HOUR_MS, cache, start, end)
        results = classify_intervals(intervals, model)
        truth = truth_labels(intervals, eval_truth.presence[target])
        metrics = evaluate([(r.label, r.score) for r in results], truth)
        with open(out_dir / f"{target}_detections.csv", "w", newline="") as f:
            write_detections(results, profile, f)
        files.append(out_dir / f"{target}_detections.csv")
        for fpr, tpr, threshold in roc_curve([r.score for r in results], truth):
            roc_rows.append({"user_id": target, "fpr": fpr, "tpr": tpr, "threshold": threshold})

        neg_records, _ = simulate(scenarios.negative_controls[target])
        neg_intervals, _ = interval_records(profile, neg_records, HOUR_MS, cache, start, end)
        neg_results = classify_intervals(neg_intervals, model)
        with open(out_dir / f"{target}_negative_detections.csv", "w", newline="") as f:
            write_detections(neg_results, profile, f)
        files.append(out_dir / f"{target}_negative_detections.csv")
        negative_fpr = sum(r.label for r in neg_results) / len(neg_results)

        rows.append(
            {
                "user_id": target,
                "experts": len(profile),
                **metrics.as_row(),
                "calibration_cv_f1": calibration.f1,
                "calibration_cv_roc_area": calibration.roc_area,
                "negative_fpr": negative_fpr,
                "unresolvable_obfs": diagnostics.unresolvable,
            }
        )
        logger.info(
            "%s: %d experts, F1 %.3f, ROC %.3f, negative-control FPR %.3f",
            target, len(profile), metrics.f1, metrics.roc_area, negative_fpr,
        )

    table = pd.DataFrame(rows)
    table.to_csv(out_dir / "metrics.csv", index=False, lineterminator="\n")
    pd.DataFrame(roc_rows).to_csv(out_dir / "roc.csv", index=False, lineterminator="\n")
    files += [out_dir / "metrics.csv", out_dir / "roc.csv"]
    roc = table["roc_area"].to_numpy()
    return BenchmarkResult(table, float(roc.mean()), float(roc.var()), files)

