"""Training component: build one expert HMM per service the target user talks to."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from ipaddress import IPv4Address
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from src import hmm
from src.classifiers import f1_from_counts
from src.errors import (
    AmbiguousEndpointError,
    CacheMissError,
    ConfigurationError,
    DimensionMismatchError,
    EmptyProfileError,
    TrainingError,
)
from src.features import FEATURE_SUBSETS, FeatureSubset, feature_matrix
from src.netflow import LocalNetwork, OrderedBiFlow, RawRecord, build_obfs
from src.whois import Mode, NetRange, ServiceKey, WhoisCache, WhoisSource, service_key_of

logger = logging.getLogger(__name__)

PROFILE_FORMAT = "natprint-profile"
PROFILE_VERSION = 1
DEFAULT_LOCAL_CIDRS = ("10.0.0.0/8", "172.16.0.0/12", "192.168.0.0/16")


@dataclass(frozen=True)
class TrainingConfig:
    seed: int = 0
    state_counts: tuple[int, ...] = (2, 3, 4)
    split_ratio: float = 0.8
    min_obfs: int = 10
    negative_ratio: float = 1.0
    min_same_service_negatives: int = 5
    max_iter: int = hmm.DEFAULT_MAX_ITER
    tol: float = hmm.DEFAULT_TOL
    jobs: int = 1
    local_cidrs: tuple[str, ...] = DEFAULT_LOCAL_CIDRS

    def __post_init__(self) -> None:
        if not 0 < self.split_ratio < 1:
            raise ConfigurationError(f"split_ratio must lie in (0, 1), got {self.split_ratio}")
        if self.min_obfs < 2:
            raise ConfigurationError("min_obfs must be at least 2 so both splits are non-empty")
        if self.negative_ratio <= 0:
            raise ConfigurationError("negative_ratio must be positive")
        if not self.state_counts or min(self.state_counts) < 1:
            raise ConfigurationError("state_counts must be positive")


@dataclass(frozen=True, eq=False)
class ExpertModel:
    service: ServiceKey
    hmm: hmm.GaussianHmm
    subset: FeatureSubset
    threshold: float
    weight: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.weight <= 1.0:
            raise ValueError(f"expert weight must lie in [0, 1], got {self.weight}")
        if self.hmm.dim != len(self.subset.members):
            raise DimensionMismatchError(
                f"expert HMM has dimension {self.hmm.dim} but subset {self.subset.tag} has {len(self.subset.members)}"
            )

    def score(self, matrix: np.ndarray) -> float:
        """Per-observation log-likelihood of an OBF's full feature matrix."""
        return hmm.log_likelihood(self.hmm, matrix[:, self.subset.columns]) / len(matrix)

    def classify(self, matrix: np.ndarray) -> int:
        return int(self.score(matrix) >= self.threshold)


@dataclass
class ServiceReport:
    service: str
    port: int
    n_obfs: int
    n_train: int = 0
    n_val: int = 0
    n_neg: int = 0
    states: int | None = None
    subset: str | None = None
    f1: float = 0.0
    threshold: float | None = None
    candidate_f1: dict[str, float] = field(default_factory=dict)
    skipped: str | None = None


@dataclass
class TrainingReport:
    services: list[ServiceReport] = field(default_factory=list)
    unresolved_background: int = 0

    def to_frame(self) -> pd.DataFrame:
        columns = [
            "service", "port", "n_obfs", "n_train", "n_val", "n_neg", "states", "subset", "f1", "threshold", "skipped"
        ]
        return pd.DataFrame([{c: getattr(row, c) for c in columns} for row in self.services], columns=columns)

    def accuracy_by_port(self) -> dict[int, float]:
        """Mean best F1 of the trained experts, grouped by remote port."""
        by_port: dict[int, list[float]] = defaultdict(list)
        for row in self.services:
            if row.skipped is None:
                by_port[row.port].append(row.f1)
        return {port: float(np.mean(values)) for port, values in sorted(by_port.items())}

    def to_dict(self) -> dict[str, Any]:
        return {"services": [asdict(row) for row in self.services], "unresolved_background": self.unresolved_background}

    @classmethod
    def from_dict(cls, document: dict[str, Any]) -> TrainingReport:
        return cls([ServiceReport(**row) for row in document["services"]], document.get("unresolved_background", 0))


@dataclass
class UserProfile:
    """The experts of one target user, ordered by service."""

    user_id: str
    experts: list[ExpertModel]
    local_side: LocalNetwork
    created_at: int
    report: TrainingReport | None = None
    _index: dict[ServiceKey, int] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self.experts = sorted(self.experts, key=lambda e: e.service.sort_key())
        self._index = {}
        for i, expert in enumerate(self.experts):
            if expert.service in self._index:
                raise ValueError(f"duplicate expert for service {expert.service.label}")
            self._index[expert.service] = i

    def expert_index(self, service: ServiceKey) -> int | None:
        return self._index.get(service)

    @property
    def weights(self) -> np.ndarray:
        return np.array([e.weight for e in self.experts])

    def __len__(self) -> int:
        return len(self.experts)


# --- binarization -----------------------------------------------------------


def select_threshold(pos_scores: Sequence[float], neg_scores: Sequence[float]) -> tuple[float, float]:
    """F1-optimal cutoff for the rule "score >= threshold is positive".

    Candidates are -inf, every midpoint between adjacent distinct scores and
    +inf. Ties keep the lowest threshold.
    """
    pos = np.asarray(pos_scores, dtype=float)
    neg = np.asarray(neg_scores, dtype=float)
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError("threshold selection needs both positive and negative scores")
    values = np.unique(np.concatenate([pos, neg]))
    candidates = [-math.inf, *((values[:-1] + values[1:]) / 2.0), math.inf]

    best_threshold, best_f1 = candidates[0], -1.0
    for threshold in candidates:
        tp = int(np.sum(pos >= threshold))
        fp = int(np.sum(neg >= threshold))
        f1 = f1_from_counts(tp, fp, len(pos) - tp)
        if f1 > best_f1:
            best_threshold, best_f1 = float(threshold), f1
    return best_threshold, best_f1


def sequence_scores(model: hmm.GaussianHmm, seqs: Sequence[np.ndarray]) -> np.ndarray:
    """Log-likelihood of every sequence divided by its length."""
    lengths = np.array([len(s) for s in seqs], dtype=float)
    return hmm.log_likelihoods(model, seqs) / lengths


# --- candidate search -------------------------------------------------------


def candidate_seed(seed: int, service: ServiceKey, states: int, subset: FeatureSubset) -> int:
    digest = hashlib.sha256(f"{seed}|{service.label}|{states}|{subset.tag}".encode()).digest()
    return int.from_bytes(digest[:8], "big")


def _service_rng(seed: int, service: ServiceKey) -> np.random.Generator:
    digest = hashlib.sha256(f"{seed}|{service.label}|split".encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "big"))


def _train_candidate(
    train: list[np.ndarray],
    validation: list[np.ndarray],
    negatives: list[np.ndarray],
    states: int,
    subset: FeatureSubset,
    seed: int,
    config: TrainingConfig,
) -> tuple[hmm.GaussianHmm | None, float, float]:
    columns = subset.columns
    train_seqs = [m[:, columns] for m in train]
    try:
        model, _ = hmm.baum_welch(
            train_seqs, states, hmm.kmeans_init(train_seqs, states, seed), max_iter=config.max_iter, tol=config.tol
        )
    except TrainingError as exc:
        logger.warning("candidate %d states / %s failed: %s", states, subset.tag, exc)
        return None, math.inf, 0.0
    pos = sequence_scores(model, [m[:, columns] for m in validation])
    neg = sequence_scores(model, [m[:, columns] for m in negatives])
    threshold, f1 = select_threshold(pos, neg)
    return model, threshold, f1


def _draw_negatives(
    service: ServiceKey,
    n_wanted: int,
    by_service: dict[ServiceKey, list[np.ndarray]],
    by_port: dict[int, list[tuple[ServiceKey, np.ndarray]]],
    config: TrainingConfig,
    rng: np.random.Generator,
) -> list[np.ndarray]:
    pool = list(by_service.get(service, []))
    if len(pool) < config.min_same_service_negatives:
        pool += [m for key, m in by_port.get(service.port, []) if key != service]
    if not pool:
        return []
    replace = len(pool) < n_wanted
    chosen = rng.choice(len(pool), size=n_wanted, replace=replace)
    return [pool[i] for i in chosen]


def _partition_background(
    background_obfs: Iterable[OrderedBiFlow],
    local: LocalNetwork,
    cache: WhoisCache,
    mode: Mode,
    client: WhoisSource | None,
) -> tuple[dict[ServiceKey, list[np.ndarray]], dict[int, list[tuple[ServiceKey, np.ndarray]]], int, int]:
    by_service: dict[ServiceKey, list[np.ndarray]] = defaultdict(list)
    by_port: dict[int, list[tuple[ServiceKey, np.ndarray]]] = defaultdict(list)
    total = unresolved = 0
    for obf in background_obfs:
        total += 1
        try:
            key = service_key_of(obf, local, cache, mode, client)
        except (CacheMissError, AmbiguousEndpointError) as exc:
            logger.debug("skipping background OBF: %s", exc)
            unresolved += 1
            continue
        matrix = feature_matrix(obf, local)
        by_service[key].append(matrix)
        by_port[key.port].append((key, matrix))
    if unresolved:
        logger.info("%d of %d background OBFs could not be keyed and were skipped", unresolved, total)
    return by_service, by_port, total, unresolved


def train_profile(
    user_records: Sequence[RawRecord],
    background_obfs: Iterable[OrderedBiFlow],
    cache: WhoisCache,
    config: TrainingConfig = TrainingConfig(),
    user_id: str = "target",
    mode: Mode = "offline",
    client: WhoisSource | None = None,
    created_at: int | None = None,
) -> tuple[UserProfile, TrainingReport]:
    """Run the 42-candidate HMM search for every qualifying service and keep the best of each.

    `created_at` defaults to the end of the newest user record, so the same
    inputs always produce the same profile document.
    """
    if not user_records:
        raise EmptyProfileError("no records for the target user")
    local = LocalNetwork(config.local_cidrs)

    by_service, by_port, n_background, unresolved = _partition_background(background_obfs, local, cache, mode, client)
    if n_background == 0:
        raise ConfigurationError("threshold selection needs background OBFs, none were given")

    user_services: dict[ServiceKey, list[np.ndarray]] = defaultdict(list)
    for obf in build_obfs(user_records):
        try:
            key = service_key_of(obf, local, cache, mode, client)
        except AmbiguousEndpointError as exc:
            logger.debug("skipping user OBF: %s", exc)
            continue
        user_services[key].append(feature_matrix(obf, local))

    report = TrainingReport(unresolved_background=unresolved)
    experts: list[ExpertModel] = []
    candidates = [(states, subset) for states in config.state_counts for subset in FEATURE_SUBSETS]

    for service in sorted(user_services, key=ServiceKey.sort_key):
        matrices = user_services[service]
        row = ServiceReport(service=service.label, port=service.port, n_obfs=len(matrices))
        report.services.append(row)
        if len(matrices) < config.min_obfs:
            row.skipped = f"only {len(matrices)} OBFs, need {config.min_obfs}"
            logger.info("service %s: %s", service.label, row.skipped)
            continue

        rng = _service_rng(config.seed, service)
        order = rng.permutation(len(matrices))
        n_train = min(max(int(round(len(matrices) * config.split_ratio)), 1), len(matrices) - 1)
        train = [matrices[i] for i in order[:n_train]]
        validation = [matrices[i] for i in order[n_train:]]
        n_neg = max(1, int(round(len(validation) * config.negative_ratio)))
        negatives = _draw_negatives(service, n_neg, by_service, by_port, config, rng)
        row.n_train, row.n_val, row.n_neg = len(train), len(validation), len(negatives)
        if not negatives:
            row.skipped = "no background OBFs for this service or port"
            logger.warning("service %s: %s", service.label, row.skipped)
            continue

        results = Parallel(n_jobs=config.jobs)(
            delayed(_train_candidate)(
                train,
                validation,
                negatives,
                states,
                subset,
                candidate_seed(config.seed, service, states, subset),
                config,
            )
            for states, subset in candidates
        )
        row.candidate_f1 = {f"{states}/{subset.tag}": f1 for (states, subset), (_, _, f1) in zip(candidates, results)}

        best = max(range(len(results)), key=lambda i: (results[i][2], -i))
        model, threshold, f1 = results[best]
        if model is None or f1 <= 0.0:
            row.skipped = "no candidate separates the user from background"
            logger.info("service %s: %s", service.label, row.skipped)
            continue
        states, subset = candidates[best]
        row.states, row.subset, row.f1, row.threshold = states, subset.tag, f1, threshold
        experts.append(ExpertModel(service, model, subset, threshold, f1))
        logger.info(
            "service %s: %d OBFs, best %d states / %s, F1 %.3f, threshold %.4f",
            service.label, len(matrices), states, subset.tag, f1, threshold,
        )

    if not experts:
        raise EmptyProfileError(f"user {user_id} has no service with a usable expert (min_obfs={config.min_obfs})")
    if created_at is None:
        created_at = max(r.end_ts for r in user_records)
    profile = UserProfile(user_id, experts, local, created_at, report)
    return profile, report


# --- profile files ----------------------------------------------------------


def _service_to_dict(service: ServiceKey) -> dict[str, Any]:
    r = service.netrange
    return {"first_ip": str(r.first_ip), "last_ip": str(r.last_ip), "source": r.source, "port": service.port}


def _service_from_dict(document: dict[str, Any]) -> ServiceKey:
    first, last = IPv4Address(document["first_ip"]), IPv4Address(document["last_ip"])
    netrange = NetRange(first, last, document.get("source", "cache"))
    return ServiceKey(netrange, int(document["port"]))


def profile_to_dict(profile: UserProfile) -> dict[str, Any]:
    return {
        "format": PROFILE_FORMAT,
        "version": PROFILE_VERSION,
        "user_id": profile.user_id,
        "created_at": profile.created_at,
        "local_side": profile.local_side.cidrs,
        "experts": [
            {
                "service": _service_to_dict(e.service),
                "threshold": e.threshold,
                "weight": e.weight,
                "subset": e.subset.tag,
                "hmm": hmm.to_dict(e.hmm, e.subset.tag),
            }
            for e in profile.experts
        ],
        "report": profile.report.to_dict() if profile.report else None,
    }


def profile_from_dict(document: dict[str, Any]) -> UserProfile:
    if document.get("format") != PROFILE_FORMAT or document.get("version") != PROFILE_VERSION:
        raise ConfigurationError(f"not a {PROFILE_FORMAT} v{PROFILE_VERSION} document")
    experts = [
        ExpertModel(
            service=_service_from_dict(e["service"]),
            hmm=hmm.from_dict(e["hmm"]),
            subset=FeatureSubset.from_tag(e["subset"]),
            threshold=float(e["threshold"]),
            weight=float(e["weight"]),
        )
        for e in document["experts"]
    ]
    report = TrainingReport.from_dict(document["report"]) if document.get("report") else None
    return UserProfile(
        document["user_id"], experts, LocalNetwork(document["local_side"]), int(document["created_at"]), report
    )


def save_profile(profile: UserProfile, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(profile_to_dict(profile), indent=2), encoding="utf-8")


def load_profile(path: Path) -> UserProfile:
    return profile_from_dict(json.loads(path.read_text(encoding="utf-8")))
