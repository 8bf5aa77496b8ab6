"""User detector: classify OBFs with a profile's experts and decide presence per time interval."""

from __future__ import annotations

import logging
import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Protocol, Sequence, TextIO

import numpy as np
import pandas as pd

from src.classifiers import (
    EvaluationMetrics,
    ForestParams,
    LabeledDataset,
    RandomForestModel,
    cross_validate,
    evaluate,
    train_random_forest,
)
from src.errors import AmbiguousEndpointError, DimensionMismatchError, WhoisError
from src.features import feature_matrix
from src.netflow import OrderedBiFlow, RawRecord, build_obfs
from src.trainer import UserProfile
from src.whois import Mode, WhoisCache, WhoisSource, service_key_of

logger = logging.getLogger(__name__)

HOUR_MS = 3_600_000
DEFAULT_INTERVAL_MS = HOUR_MS


class FinalClassifier(Protocol):
    """Maps an interval's weighted-count vector to (label, score)."""

    @property
    def dim(self) -> int | None: ...

    def predict(self, vector: Sequence[float]) -> tuple[int, float]: ...


@dataclass(frozen=True)
class SumThresholdClassifier:
    """Naive baseline: present when the weighted counts add up to the threshold.

    The score s / (s + threshold) crosses 0.5 exactly where the sum crosses
    the threshold; a non-positive threshold accepts everything with score 1.
    """

    threshold: float
    dim: int | None = None

    def predict(self, vector: Sequence[float]) -> tuple[int, float]:
        total = float(np.sum(vector))
        label = sum_threshold_classify_sum(total, self.threshold)
        if self.threshold <= 0:
            return label, 1.0
        return label, total / (total + self.threshold)


@dataclass(frozen=True)
class IntervalRecord:
    interval_start: int
    interval_length: int
    weighted_counts: tuple[float, ...]
    raw_counts: tuple[int, ...]

    @property
    def interval_end(self) -> int:
        return self.interval_start + self.interval_length

    @property
    def weighted_sum(self) -> float:
        return float(sum(self.weighted_counts))


@dataclass(frozen=True)
class DetectionResult:
    record: IntervalRecord
    label: int
    score: float


@dataclass
class Diagnostics:
    obfs: int = 0
    matched: int = 0
    no_expert: int = 0
    unresolvable: int = 0
    ambiguous: int = 0
    outside_window: int = 0

    def log_summary(self) -> None:
        logger.info(
            "%d OBFs: %d matched an expert, %d had no expert, %d unresolvable, %d ambiguous, %d outside the window",
            self.obfs, self.matched, self.no_expert, self.unresolvable, self.ambiguous, self.outside_window,
        )


# --- per-OBF ----------------------------------------------------------------


def classify_obf(
    profile: UserProfile,
    obf: OrderedBiFlow,
    cache: WhoisCache,
    mode: Mode = "offline",
    client: WhoisSource | None = None,
    diagnostics: Diagnostics | None = None,
) -> tuple[int, int] | None:
    """(expert index, 0/1 verdict), or None when no expert covers the OBF's service."""
    diagnostics = diagnostics if diagnostics is not None else Diagnostics()
    try:
        service = service_key_of(obf, profile.local_side, cache, mode, client)
    except WhoisError as exc:
        logger.debug("unresolvable OBF %s <-> %s: %s", obf.endpoint_a, obf.endpoint_b, exc)
        diagnostics.unresolvable += 1
        return None
    except AmbiguousEndpointError as exc:
        logger.debug("ambiguous OBF: %s", exc)
        diagnostics.ambiguous += 1
        return None

    index = profile.expert_index(service)
    if index is None:
        diagnostics.no_expert += 1
        return None
    diagnostics.matched += 1
    return index, profile.experts[index].classify(feature_matrix(obf, profile.local_side))


def aggregate_interval(
    classifications: Sequence[tuple[int, int]], profile: UserProfile, interval_start: int, interval_length: int
) -> IntervalRecord:
    """Count positive verdicts per expert and weight them by the expert's F-measure."""
    raw = [0] * len(profile)
    for index, label in classifications:
        if not 0 <= index < len(profile):
            raise ValueError(f"expert index {index} out of range for a profile of {len(profile)} experts")
        if label:
            raw[index] += 1
    weighted = tuple(expert.weight * count for expert, count in zip(profile.experts, raw))
    return IntervalRecord(interval_start, interval_length, weighted, tuple(raw))


def sum_threshold_classify_sum(total: float, threshold: float) -> int:
    return int(total >= threshold)


def sum_threshold_classify(record: IntervalRecord, threshold: float) -> int:
    return sum_threshold_classify_sum(record.weighted_sum, threshold)


# --- per-interval -----------------------------------------------------------


def interval_records(
    profile: UserProfile,
    records: Sequence[RawRecord],
    interval_length: int = DEFAULT_INTERVAL_MS,
    cache: WhoisCache | None = None,
    start: int | None = None,
    end: int | None = None,
    mode: Mode = "offline",
    client: WhoisSource | None = None,
) -> tuple[list[IntervalRecord], Diagnostics]:
    """One IntervalRecord per interval of [start, end), including empty ones.

    Each OBF lands in the interval holding its first record's start. The
    window defaults to the span of the OBF starts.
    """
    if interval_length <= 0:
        raise ValueError("interval_length must be positive")
    cache = cache if cache is not None else WhoisCache()
    obfs = build_obfs(records)
    if start is None:
        start = min((o.start_ts for o in obfs), default=0)
    if end is None:
        end = max((o.start_ts + 1 for o in obfs), default=start)
    n_intervals = max(0, math.ceil((end - start) / interval_length))

    diagnostics = Diagnostics(obfs=len(obfs))
    per_interval: dict[int, list[tuple[int, int]]] = defaultdict(list)
    for obf in obfs:
        slot = (obf.start_ts - start) // interval_length
        if obf.start_ts < start or slot >= n_intervals:
            diagnostics.outside_window += 1
            continue
        verdict = classify_obf(profile, obf, cache, mode, client, diagnostics)
        if verdict is not None:
            per_interval[slot].append(verdict)

    intervals = [
        aggregate_interval(per_interval.get(i, []), profile, start + i * interval_length, interval_length)
        for i in range(n_intervals)
    ]
    diagnostics.log_summary()
    return intervals, diagnostics


def _check_dimension(profile: UserProfile, final: FinalClassifier) -> None:
    if final.dim is not None and final.dim != len(profile):
        raise DimensionMismatchError(
            f"final classifier expects {final.dim} features but the profile has {len(profile)} experts"
        )


def classify_intervals(intervals: Sequence[IntervalRecord], final: FinalClassifier) -> list[DetectionResult]:
    results = []
    for record in intervals:
        label, score = final.predict(record.weighted_counts)
        results.append(DetectionResult(record, label, score))
    return results


def detect(
    profile: UserProfile,
    records: Sequence[RawRecord],
    interval_length: int,
    final: FinalClassifier,
    cache: WhoisCache | None = None,
    start: int | None = None,
    end: int | None = None,
    mode: Mode = "offline",
    client: WhoisSource | None = None,
) -> list[DetectionResult]:
    """Presence verdict for every interval of the window."""
    _check_dimension(profile, final)
    intervals, _ = interval_records(profile, records, interval_length, cache, start, end, mode, client)
    return classify_intervals(intervals, final)


def truth_labels(intervals: Sequence[IntervalRecord], presence: Sequence[tuple[int, int]]) -> list[int]:
    """1 for every interval that overlaps one of the presence spans [start, end)."""
    return [
        int(any(p_start < r.interval_end and p_end > r.interval_start for p_start, p_end in presence))
        for r in intervals
    ]


def interval_dataset(intervals: Sequence[IntervalRecord], labels: Sequence[int]) -> LabeledDataset:
    if len(intervals) != len(labels):
        raise ValueError(f"{len(intervals)} interval records but {len(labels)} labels")
    if not intervals:
        raise ValueError("no interval records to train on")
    features = np.array([r.weighted_counts for r in intervals], dtype=float).reshape(len(intervals), -1)
    data = LabeledDataset(features, labels)
    if data.dim == 0:
        raise DimensionMismatchError("interval records carry no expert columns")
    return data


def train_final_classifier(
    intervals: Sequence[IntervalRecord], labels: Sequence[int], params: ForestParams = ForestParams(), jobs: int = 1
) -> RandomForestModel:
    return train_random_forest(interval_dataset(intervals, labels), params, jobs)


def cross_validate_final_classifier(
    intervals: Sequence[IntervalRecord],
    labels: Sequence[int],
    params: ForestParams = ForestParams(),
    folds: int = 10,
    jobs: int = 1,
) -> EvaluationMetrics:
    """Out-of-fold metrics of the forest on labelled intervals, folds stratified by class."""
    data = interval_dataset(intervals, labels)
    predictions = cross_validate(data, params, folds, seed=params.seed, jobs=jobs)
    return evaluate(predictions, data.labels.tolist())


# --- output -----------------------------------------------------------------


def expert_columns(profile: UserProfile) -> list[str]:
    return [f"w[{expert.service.label}]" for expert in profile.experts]


def detections_frame(results: Sequence[DetectionResult], profile: UserProfile) -> pd.DataFrame:
    columns = ["interval_start", "interval_end", "label", "score", "weighted_sum", *expert_columns(profile)]
    rows = [
        [
            r.record.interval_start,
            r.record.interval_end,
            r.label,
            r.score,
            r.record.weighted_sum,
            *r.record.weighted_counts,
        ]
        for r in results
    ]
    return pd.DataFrame(rows, columns=columns)


def write_detections(results: Sequence[DetectionResult], profile: UserProfile, sink: TextIO) -> None:
    detections_frame(results, profile).to_csv(sink, index=False, lineterminator="\n")
