"""Synthetic NAT'd NetFlow traffic with ground truth.

Users open sessions towards services at Poisson-distributed times. A
session is a run of bursts (start, direction, packets, bytes); the bursts
go through a per-direction probe cache that expires records on the
inactive and active timeouts, exactly like a NetFlow exporter, so one
logical connection usually spans several raw records. All users leave
through a handful of shared NAT addresses with a shared ephemeral-port
allocator.
"""

from __future__ import annotations

import csv
import heapq
import io
import logging
from collections import Counter
from dataclasses import dataclass, field
from ipaddress import IPv4Address, IPv4Network
from pathlib import Path
from typing import BinaryIO, Literal, Sequence

import numpy as np
import pandas as pd
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from src.errors import ConfigurationError
from src.netflow import FlowKey, RawRecord, write_csv, write_netflow_v5
from src.whois import NetRange, ServiceKey

logger = logging.getLogger(__name__)

HOUR_MS = 3_600_000
PORT_LOW, PORT_HIGH = 1024, 65535
TCP = 6
FIN, SYN, PSH, ACK = 0x01, 0x02, 0x08, 0x10

ExportFormat = Literal["csv", "netflow_v5", "truth_csv"]
TRUTH_COLUMNS = ["kind", "user_id", "interval_start", "interval_end", "record_index"]


# --- scenario models --------------------------------------------------------


class _Model(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


class LogNormal(_Model):
    """exp(N(mu, sigma^2))."""

    mu: float
    sigma: float = Field(gt=0)

    def draw(self, rng: np.random.Generator) -> float:
        return float(rng.lognormal(self.mu, self.sigma))


class IntRange(_Model):
    """Uniform integer in [low, high]."""

    low: int = Field(ge=1)
    high: int

    @model_validator(mode="after")
    def _ordered(self) -> IntRange:
        if self.high < self.low:
            raise ValueError(f"high {self.high} is below low {self.low}")
        return self

    def draw(self, rng: np.random.Generator) -> int:
        return int(rng.integers(self.low, self.high + 1))


class RegistryRange(_Model):
    first_ip: IPv4Address
    last_ip: IPv4Address
    source: str = "cache"

    @model_validator(mode="after")
    def _ordered(self) -> RegistryRange:
        if int(self.first_ip) > int(self.last_ip):
            raise ValueError(f"range {self.first_ip}-{self.last_ip} is inverted")
        return self

    @property
    def netrange(self) -> NetRange:
        return NetRange(self.first_ip, self.last_ip, self.source)


class ServiceBehavior(RegistryRange):
    """How one user talks to one service. `records_per_obf` counts bursts per session."""

    port: int = Field(ge=1, le=65535)
    protocol: int = Field(default=TCP, ge=0, le=255)
    session_rate: float = Field(gt=0)
    records_per_obf: IntRange
    gap_ms: LogNormal
    packets: LogNormal
    bytes: LogNormal
    outgoing_fraction: float = Field(ge=0, le=1)

    @property
    def service_key(self) -> ServiceKey:
        return ServiceKey(self.netrange, self.port)


class UserBehaviorProfile(_Model):
    user_id: str = Field(min_length=1)
    services: list[ServiceBehavior] = Field(min_length=1)


class PresenceInterval(_Model):
    """Offsets from the scenario start, in ms; end exclusive."""

    start_ms: int = Field(ge=0)
    end_ms: int

    @model_validator(mode="after")
    def _ordered(self) -> PresenceInterval:
        if self.end_ms <= self.start_ms:
            raise ValueError(f"presence interval [{self.start_ms}, {self.end_ms}) is empty")
        return self


class SimulationConfig(_Model):
    users: list[UserBehaviorProfile] = Field(min_length=1)
    schedule: dict[str, list[PresenceInterval]] = Field(default_factory=dict)
    duration_ms: int = Field(gt=0)
    start_ms: int = Field(default=0, ge=0)
    nat_ips: list[IPv4Address] = Field(min_length=1)
    local_prefixes: list[str] = Field(min_length=1)
    inactive_timeout_ms: int = Field(default=15_000, gt=0)
    active_timeout_ms: int = Field(default=1_800_000, gt=0)
    burst_spacing_ms: int = Field(default=10, ge=0)
    seed: int = 0
    registry: list[RegistryRange] = Field(default_factory=list)

    @field_validator("local_prefixes")
    @classmethod
    def _cidrs(cls, value: list[str]) -> list[str]:
        return [str(IPv4Network(v, strict=False)) for v in value]

    @model_validator(mode="after")
    def _consistent(self) -> SimulationConfig:
        ids = [u.user_id for u in self.users]
        if len(set(ids)) != len(ids):
            raise ValueError("user ids must be unique")
        unknown = set(self.schedule) - set(ids)
        if unknown:
            raise ValueError(f"schedule names unknown users: {sorted(unknown)}")
        for user_id, spans in self.schedule.items():
            for span in spans:
                if span.end_ms > self.duration_ms:
                    raise ValueError(f"presence of {user_id} ends after the scenario duration")
        networks = [IPv4Network(p) for p in self.local_prefixes]
        for ip in self.nat_ips:
            if not any(ip in net for net in networks):
                raise ValueError(f"NAT address {ip} is outside every local prefix")
        if self.burst_spacing_ms >= self.inactive_timeout_ms:
            raise ValueError("burst spacing must be shorter than the inactive timeout")
        return self

    def user(self, user_id: str) -> UserBehaviorProfile:
        for u in self.users:
            if u.user_id == user_id:
                return u
        raise KeyError(user_id)

    def presence(self, user_id: str) -> list[tuple[int, int]]:
        return sorted((self.start_ms + p.start_ms, self.start_ms + p.end_ms) for p in self.schedule.get(user_id, []))


def scenario_from_dict(document: dict) -> SimulationConfig:
    try:
        return SimulationConfig.model_validate(document)
    except ValidationError as exc:
        raise ConfigurationError(f"invalid scenario: {exc}") from exc


def load_scenario(path: Path) -> SimulationConfig:
    with open(path, encoding="utf-8") as f:
        document = yaml.safe_load(f)
    if not isinstance(document, dict):
        raise ConfigurationError(f"{path} does not hold a scenario mapping")
    return scenario_from_dict(document)


def registry_ranges(config: SimulationConfig) -> list[NetRange]:
    """The scenario registry plus every service netrange, without duplicates."""
    ranges = {r.netrange: None for r in config.registry}
    for user in config.users:
        for service in user.services:
            ranges.setdefault(service.netrange, None)
    return sorted(ranges, key=NetRange.rank)


# --- ground truth -----------------------------------------------------------


@dataclass
class GroundTruth:
    presence: dict[str, list[tuple[int, int]]]
    record_users: list[str]
    sessions: dict[str, int] = field(default_factory=dict)

    def user_records(self, records: Sequence[RawRecord], user_id: str) -> list[RawRecord]:
        return [r for r, u in zip(records, self.record_users) if u == user_id]

    def other_records(self, records: Sequence[RawRecord], user_id: str) -> list[RawRecord]:
        return [r for r, u in zip(records, self.record_users) if u != user_id]


def read_truth(path: Path) -> GroundTruth:
    df = pd.read_csv(path, dtype=str, keep_default_na=False)
    missing = [c for c in TRUTH_COLUMNS if c not in df.columns]
    if missing:
        raise ConfigurationError(f"{path}: missing truth column(s): {', '.join(missing)}")
    presence: dict[str, list[tuple[int, int]]] = {}
    indexed: list[tuple[int, str]] = []
    for kind, user_id, start, end, index in df[TRUTH_COLUMNS].itertuples(index=False, name=None):
        if kind == "presence":
            presence.setdefault(user_id, []).append((int(start), int(end)))
        elif kind == "user":
            presence.setdefault(user_id, [])
        elif kind == "record":
            indexed.append((int(index), user_id))
        else:
            raise ConfigurationError(f"{path}: unknown truth row kind {kind!r}")
    indexed.sort()
    if [i for i, _ in indexed] != list(range(len(indexed))):
        raise ConfigurationError(f"{path}: record attribution is not a contiguous index")
    return GroundTruth(presence, [u for _, u in indexed])


# --- probe cache ------------------------------------------------------------


@dataclass
class _OpenRecord:
    start: int
    last: int
    packets: int = 0
    bytes: int = 0


@dataclass(frozen=True)
class ExportedRecord:
    outgoing: bool
    start: int
    end: int
    packets: int
    bytes: int


class ProbeCache:
    """Per-direction flow cache of one connection.

    A burst is `packets` packets `spacing_ms` apart. The open record of a
    direction is exported when the next packet arrives more than
    `inactive_ms` after its last one, or would stretch it beyond
    `active_ms`.
    """

    def __init__(self, inactive_ms: int, active_ms: int, spacing_ms: int):
        self.inactive_ms = inactive_ms
        self.active_ms = active_ms
        self.spacing_ms = spacing_ms
        self._open: dict[bool, _OpenRecord | None] = {True: None, False: None}
        self.exported: list[ExportedRecord] = []

    def _flush(self, outgoing: bool) -> None:
        record = self._open[outgoing]
        if record is not None and record.packets:
            self.exported.append(ExportedRecord(outgoing, record.start, record.last, record.packets, record.bytes))
        self._open[outgoing] = None

    def add_burst(self, outgoing: bool, start: int, packets: int, nbytes: int) -> None:
        k = 0
        while k < packets:
            at = start + k * self.spacing_ms
            record = self._open[outgoing]
            if record is not None and at - record.last > self.inactive_ms:
                self._flush(outgoing)
                record = None
            if record is None:
                record = self._open[outgoing] = _OpenRecord(at, at)
            if self.spacing_ms:
                fit = min(packets - k, (record.start + self.active_ms - at) // self.spacing_ms + 1)
            else:
                fit = packets - k if at - record.start <= self.active_ms else 0
            if fit <= 0:
                self._flush(outgoing)
                continue
            record.last = max(record.last, start + (k + fit - 1) * self.spacing_ms)
            record.packets += fit
            record.bytes += nbytes * (k + fit) // packets - nbytes * k // packets
            k += fit
            if k < packets:
                self._flush(outgoing)

    def flush_all(self) -> list[ExportedRecord]:
        self._flush(True)
        self._flush(False)
        return sorted(self.exported, key=lambda r: (r.start, not r.outgoing, r.end))


# --- NAT --------------------------------------------------------------------


class PortAllocator:
    """Ephemeral ports of one NAT address, cycled through 1024-65535 and never reused while busy."""

    def __init__(self) -> None:
        self._next = PORT_LOW
        self._busy: set[int] = set()
        self._releases: list[tuple[int, int]] = []

    def allocate(self, at: int, release_at: int) -> int:
        while self._releases and self._releases[0][0] <= at:
            _, port = heapq.heappop(self._releases)
            self._busy.discard(port)
        for _ in range(PORT_HIGH - PORT_LOW + 1):
            port = self._next
            self._next = port + 1 if port < PORT_HIGH else PORT_LOW
            if port not in self._busy:
                self._busy.add(port)
                heapq.heappush(self._releases, (release_at, port))
                return port
        raise ConfigurationError("NAT address ran out of ephemeral ports")


# --- generation -------------------------------------------------------------


@dataclass
class _Session:
    user: int
    service: ServiceBehavior
    start: int
    remote: IPv4Address
    segments: list[ExportedRecord]

    @property
    def end(self) -> int:
        return max(s.end for s in self.segments)


def _bursts(
    user: int,
    service: ServiceBehavior,
    start: int,
    presence_end: int,
    config: SimulationConfig,
    rng: np.random.Generator,
) -> _Session:
    remote = IPv4Address(int(rng.integers(int(service.first_ip), int(service.last_ip) + 1)))
    cache = ProbeCache(config.inactive_timeout_ms, config.active_timeout_ms, config.burst_spacing_ms)
    at = start
    for b in range(service.records_per_obf.draw(rng)):
        if b:
            at += max(1, int(round(service.gap_ms.draw(rng))))
        if at >= presence_end:
            break
        outgoing = b == 0 or rng.random() < service.outgoing_fraction
        packets = max(1, int(round(service.packets.draw(rng))))
        nbytes = max(packets, int(round(service.bytes.draw(rng))))
        cache.add_burst(outgoing, at, packets, nbytes)
    return _Session(user, service, start, remote, cache.flush_all())


def _session_records(session: _Session, nat_ip: IPv4Address, port: int) -> list[RawRecord]:
    service = session.service
    outgoing_key = FlowKey(nat_ip, port, session.remote, service.port, service.protocol)
    incoming_key = outgoing_key.reverse()
    records = []
    for direction in (True, False):
        segments = [s for s in session.segments if s.outgoing == direction]
        for i, s in enumerate(segments):
            flags = 0
            if service.protocol == TCP:
                flags = PSH | ACK | (SYN if i == 0 else 0) | (FIN if i == len(segments) - 1 else 0)
            key = outgoing_key if direction else incoming_key
            records.append(RawRecord(key, s.packets, s.bytes, s.start, s.end, flags))
    return records


def simulate(config: SimulationConfig) -> tuple[list[RawRecord], GroundTruth]:
    """Generate every user's traffic for the scenario; fully determined by `config.seed`."""
    user_seeds = np.random.SeedSequence(config.seed).spawn(len(config.users))
    sessions: list[_Session] = []
    presence: dict[str, list[tuple[int, int]]] = {}

    for ui, (user, user_seed) in enumerate(zip(config.users, user_seeds)):
        spans = config.presence(user.user_id)
        presence[user.user_id] = spans
        for service, service_seed in zip(user.services, user_seed.spawn(len(user.services))):
            rng = np.random.default_rng(service_seed)
            mean_gap = HOUR_MS / service.session_rate
            for p_start, p_end in spans:
                at = p_start + rng.exponential(mean_gap)
                while at < p_end:
                    sessions.append(_bursts(ui, service, int(at), p_end, config, rng))
                    at += rng.exponential(mean_gap)

    sessions.sort(key=lambda s: (s.start, s.user, s.service.port, int(s.remote)))
    allocators = {ip: PortAllocator() for ip in config.nat_ips}
    tagged: list[tuple[RawRecord, str]] = []
    counts: Counter[str] = Counter()
    for session in sessions:
        user_id = config.users[session.user].user_id
        nat_ip = config.nat_ips[session.user % len(config.nat_ips)]
        port = allocators[nat_ip].allocate(session.start, session.end + config.inactive_timeout_ms)
        tagged.extend((r, user_id) for r in _session_records(session, nat_ip, port))
        counts[user_id] += 1

    tagged.sort(key=lambda pair: (pair[0].sort_key(), pair[1]))
    records = [r for r, _ in tagged]
    truth = GroundTruth(presence, [u for _, u in tagged], {u.user_id: counts[u.user_id] for u in config.users})
    logger.info("simulated %d sessions, %d records for %d users", len(sessions), len(records), len(config.users))
    return records, truth


# --- export -----------------------------------------------------------------


def _truth_rows(records: Sequence[RawRecord], truth: GroundTruth) -> list[list]:
    if len(truth.record_users) != len(records):
        raise ConfigurationError(
            f"ground truth attributes {len(truth.record_users)} records but {len(records)} were given"
        )
    rows: list[list] = []
    for user_id in sorted(truth.presence):
        spans = truth.presence[user_id]
        if not spans:
            rows.append(["user", user_id, "", "", ""])
        rows.extend(["presence", user_id, start, end, ""] for start, end in spans)
    rows.extend(["record", user_id, "", "", i] for i, user_id in enumerate(truth.record_users))
    return rows


def export(records: Sequence[RawRecord], truth: GroundTruth, fmt: ExportFormat, sink: BinaryIO) -> int:
    """Write records or ground truth to a binary sink; returns the number of bytes written."""
    if fmt == "netflow_v5":
        return write_netflow_v5(records, sink)
    text = io.StringIO()
    if fmt == "csv":
        write_csv(records, text)
    elif fmt == "truth_csv":
        writer = csv.writer(text, lineterminator="\n")
        writer.writerow(TRUTH_COLUMNS)
        writer.writerows(_truth_rows(records, truth))
    else:
        raise ValueError(f"unknown export format {fmt!r}")
    data = text.getvalue().encode("utf-8")
    sink.write(data)
    return len(data)
