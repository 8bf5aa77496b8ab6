"""OBF feature extraction: each raw record becomes one observation vector."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from ipaddress import IPv4Address
from typing import Callable

import numpy as np

from src.netflow import OrderedBiFlow
from src.whois import remote_endpoint


class Feature(str, Enum):
    GAP = "Gap"
    PACKETS = "Pkts"
    BYTES = "Bytes"
    DIRECTION = "Direction"


# Column order of feature_matrix.
FEATURE_COLUMNS = (Feature.GAP, Feature.PACKETS, Feature.BYTES, Feature.DIRECTION)


@dataclass(frozen=True, slots=True)
class FeatureSubset:
    members: tuple[Feature, ...]

    def __post_init__(self) -> None:
        if not 1 <= len(self.members) <= 3:
            raise ValueError(f"a feature subset holds 1 to 3 features, got {len(self.members)}")
        if len(set(self.members)) != len(self.members):
            raise ValueError("a feature subset cannot repeat a feature")

    @property
    def tag(self) -> str:
        return "+".join(m.value for m in self.members)

    @property
    def columns(self) -> list[int]:
        return [FEATURE_COLUMNS.index(m) for m in self.members]

    @classmethod
    def from_tag(cls, tag: str) -> FeatureSubset:
        return cls(tuple(Feature(part) for part in tag.split("+")))

    def __str__(self) -> str:
        return "{" + ", ".join(m.value for m in self.members) + "}"


_G, _P, _B, _D = Feature.GAP, Feature.PACKETS, Feature.BYTES, Feature.DIRECTION

FEATURE_SUBSETS: tuple[FeatureSubset, ...] = tuple(
    FeatureSubset(members)
    for members in (
        (_P,),
        (_B,),
        (_G,),
        (_D,),
        (_P, _B),
        (_P, _G),
        (_G, _B),
        (_D, _B),
        (_D, _P),
        (_D, _G),
        (_G, _B, _P),
        (_D, _B, _P),
        (_D, _G, _P),
        (_D, _B, _G),
    )
)


def enumerate_feature_subsets() -> list[FeatureSubset]:
    """The 14 subsets of {Gap, Pkts, Bytes, Direction} of size at most 3, in training order."""
    return list(FEATURE_SUBSETS)


def feature_matrix(obf: OrderedBiFlow, local_side: Callable[[IPv4Address], bool]) -> np.ndarray:
    """T x 4 matrix of (Gap ms, Pkts, Bytes, Direction) for every record of the OBF.

    Gap is start-to-start from the previous record, 0 for the first and
    clamped at 0. Direction is 1 when the record leaves the local endpoint.
    """
    remote_ip, _ = remote_endpoint(obf, local_side)
    starts = np.fromiter((r.start_ts for r in obf.records), dtype=np.int64, count=len(obf.records))
    gaps = np.zeros(len(starts), dtype=float)
    if len(starts) > 1:
        gaps[1:] = np.maximum(np.diff(starts), 0)
    matrix = np.empty((len(obf.records), 4), dtype=float)
    matrix[:, 0] = gaps
    matrix[:, 1] = [r.packets for r in obf.records]
    matrix[:, 2] = [r.bytes for r in obf.records]
    matrix[:, 3] = [0.0 if r.key.ip_src == remote_ip else 1.0 for r in obf.records]
    return matrix


def featurize(
    obf: OrderedBiFlow, subset: FeatureSubset, local_side: Callable[[IPv4Address], bool]
) -> np.ndarray:
    """Observation sequence (T x |subset|) for one OBF, columns in subset order."""
    return feature_matrix(obf, local_side)[:, subset.columns]
