"""Netrange resolution through the Regional Internet Registries, with an offline cache.

A remote address is mapped to the smallest IP block any registry reports
for it; combined with the remote port that block forms the ServiceKey the
training and detection stages partition traffic by.
"""

from __future__ import annotations

import csv
import logging
import re
import threading
import time
from dataclasses import dataclass, field
from ipaddress import AddressValueError, IPv4Address, IPv4Network
from pathlib import Path
from typing import Callable, Iterable, Literal, Protocol

import chardet
from ipwhois.exceptions import BaseIpwhoisException
from ipwhois.net import Net

from src.errors import AmbiguousEndpointError, CacheMissError, ResolutionError, WhoisError
from src.netflow import OrderedBiFlow

logger = logging.getLogger(__name__)

Mode = Literal["offline", "online"]

SOURCES = ("arin", "ripe", "apnic", "iana", "lacnic", "reserved", "cache")

# Queried in this order; the smallest block wins regardless of order.
# Values are (ipwhois registry name, explicit server). IANA is not one of the
# registries ipwhois knows, so it is reached by naming its server.
RIR_REGISTRIES: dict[str, tuple[str, str | None]] = {
    "arin": ("arin", None),
    "ripe": ("ripencc", None),
    "apnic": ("apnic", None),
    "iana": ("iana", "whois.iana.org"),
    "lacnic": ("lacnic", None),
}

MEMO_LIMIT = 65536


@dataclass(frozen=True, slots=True)
class NetRange:
    first_ip: IPv4Address
    last_ip: IPv4Address
    source: str = field(default="cache", compare=False)

    def __post_init__(self) -> None:
        if int(self.first_ip) > int(self.last_ip):
            raise ValueError(f"netrange {self.first_ip} - {self.last_ip} is inverted")
        if self.source not in SOURCES:
            raise ValueError(f"unknown netrange source {self.source!r}")

    @property
    def size(self) -> int:
        return int(self.last_ip) - int(self.first_ip) + 1

    def __contains__(self, ip: IPv4Address) -> bool:
        return int(self.first_ip) <= int(ip) <= int(self.last_ip)

    def rank(self) -> tuple[int, int]:
        """Ordering used to pick the smallest range: fewest addresses, then lowest start."""
        return (self.size, int(self.first_ip))

    @classmethod
    def from_network(cls, cidr: str | IPv4Network, source: str = "cache") -> NetRange:
        net = IPv4Network(cidr, strict=False)
        return cls(net.network_address, net.broadcast_address, source)

    def __str__(self) -> str:
        return f"{self.first_ip}-{self.last_ip}"


@dataclass(frozen=True, slots=True)
class ServiceKey:
    """A ⟨netrange, port⟩ pair. Equality ignores the netrange's source."""

    netrange: NetRange
    port: int

    def sort_key(self) -> tuple[int, int, int]:
        return (int(self.netrange.first_ip), int(self.netrange.last_ip), self.port)

    @property
    def label(self) -> str:
        return f"{self.netrange}:{self.port}"


RESERVED_RANGES = tuple(
    NetRange.from_network(cidr, "reserved")
    for cidr in ("10.0.0.0/8", "172.16.0.0/12", "192.168.0.0/16", "127.0.0.0/8", "169.254.0.0/16")
)


def reserved_range(ip: IPv4Address) -> NetRange | None:
    for r in RESERVED_RANGES:
        if ip in r:
            return r
    return None


class WhoisCache:
    """Netranges already learned, answering "smallest stored range containing ip".

    Readers never block; insertions go through a single lock.
    """

    def __init__(self, entries: dict[NetRange, int] | None = None):
        self.entries: dict[NetRange, int] = {}
        self._lock = threading.Lock()
        self._ordered: list[NetRange] = []
        self._memo: dict[int, NetRange | None] = {}
        for netrange, retrieved_at in (entries or {}).items():
            self.add(netrange, retrieved_at)

    def __len__(self) -> int:
        return len(self.entries)

    def add(self, netrange: NetRange, retrieved_at_ms: int | None = None) -> None:
        if retrieved_at_ms is None:
            retrieved_at_ms = int(time.time() * 1000)
        with self._lock:
            self.entries[netrange] = retrieved_at_ms
            # _ordered before _memo: a reader holding the new memo also sees the new ordering.
            self._ordered = sorted(self.entries, key=NetRange.rank)
            self._memo = {}

    def lookup(self, ip: IPv4Address) -> NetRange | None:
        memo = self._memo
        ordered = self._ordered
        key = int(ip)
        if key in memo:
            return memo[key]
        found = next((netrange for netrange in ordered if ip in netrange), None)
        if len(memo) >= MEMO_LIMIT:
            memo.clear()
        memo[key] = found
        return found

    def retrieved_at(self, netrange: NetRange) -> int | None:
        return self.entries.get(netrange)

    @classmethod
    def load(cls, path: Path) -> WhoisCache:
        """Read `first_ip,last_ip,source,retrieved_at_ms` lines; a missing file is an empty cache."""
        cache = cls()
        path = Path(path)
        if not path.exists():
            logger.info("whois cache %s does not exist yet, starting empty", path)
            return cache
        with open(path, newline="") as f:
            for lineno, row in enumerate(csv.reader(f), start=1):
                if not row or row[0].startswith("#"):
                    continue
                try:
                    first, last, source, retrieved = row
                    cache.add(NetRange(IPv4Address(first), IPv4Address(last), source), int(retrieved))
                except (ValueError, AddressValueError) as e:
                    raise ValueError(f"{path}:{lineno}: malformed cache line {row!r}: {e}") from None
        return cache

    def save(self, path: Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with self._lock:
            rows = sorted(self.entries.items(), key=lambda item: item[0].rank())
        with open(path, "w", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            for netrange, retrieved_at in rows:
                writer.writerow([netrange.first_ip, netrange.last_ip, netrange.source, retrieved_at])


def import_ranges(cache: WhoisCache, ranges: Iterable[NetRange], retrieved_at_ms: int | None = None) -> int:
    count = 0
    for netrange in ranges:
        cache.add(netrange, retrieved_at_ms)
        count += 1
    return count


# --- wire protocol ----------------------------------------------------------


class WhoisSource(Protocol):
    query_count: int

    def query(self, rir: str, ip: IPv4Address) -> str: ...


def _decode_response(data: bytes) -> str:
    try:
        return data.decode("utf-8")
    except UnicodeDecodeError:
        guess = chardet.detect(data)
        return data.decode(guess.get("encoding") or "latin-1", errors="replace")


class WhoisClient:
    """Port-43 whois through ipwhois, which owns retries and rate-limit back-off."""

    def __init__(self, timeout: int = 10, retries: int = 3):
        self.timeout = timeout
        self.retries = retries
        self.query_count = 0

    def query(self, rir: str, ip: IPv4Address) -> str:
        registry, server = RIR_REGISTRIES[rir]
        self.query_count += 1
        try:
            net = Net(str(ip), timeout=self.timeout)
            return net.get_whois(asn_registry=registry, retry_count=self.retries, server=server)
        except (BaseIpwhoisException, ValueError) as e:
            raise ResolutionError(f"whois {rir} failed for {ip}: {e}") from e


def _safe_read_text(file_path: Path) -> str | None:
    try:
        return _decode_response(file_path.read_bytes())
    except OSError:
        return None


class ReplayWhoisClient:
    """Answers queries from recorded transcripts named `<rir>_<ip>.txt`."""

    def __init__(self, directory: Path):
        self.directory = Path(directory)
        self.query_count = 0

    def query(self, rir: str, ip: IPv4Address) -> str:
        self.query_count += 1
        text = _safe_read_text(self.directory / f"{rir}_{ip}.txt")
        if text is None:
            raise ResolutionError(f"no {rir} transcript recorded for {ip}")
        return text


# --- response parsing -------------------------------------------------------

_RANGE_LINE = re.compile(
    r"^\s*(?:NetRange|inetnum)\s*:\s*(\d+\.\d+\.\d+\.\d+)\s*-\s*(\d+\.\d+\.\d+\.\d+)", re.IGNORECASE | re.MULTILINE
)
_SHORT_CIDR_LINE = re.compile(r"^\s*inetnum\s*:\s*(\d+(?:\.\d+){0,3})/(\d+)\s*$", re.IGNORECASE | re.MULTILINE)
_CIDR_LINE = re.compile(r"^\s*CIDR\s*:\s*(.+)$", re.IGNORECASE | re.MULTILINE)


def _pad_octets(prefix: str) -> str:
    octets = prefix.split(".")
    return ".".join(octets + ["0"] * (4 - len(octets)))


def parse_whois_ranges(text: str) -> list[tuple[IPv4Address, IPv4Address]]:
    """Every address block mentioned in a whois response.

    Understands `NetRange:`/`inetnum:` ranges, `CIDR:` lists and the
    abbreviated `inetnum: 200.160/12` form LACNIC prints.
    """
    ranges: list[tuple[IPv4Address, IPv4Address]] = []
    for first, last in _RANGE_LINE.findall(text):
        try:
            lo, hi = IPv4Address(first), IPv4Address(last)
        except AddressValueError:
            continue
        if int(lo) <= int(hi):
            ranges.append((lo, hi))
    for prefix, length in _SHORT_CIDR_LINE.findall(text):
        try:
            net = IPv4Network(f"{_pad_octets(prefix)}/{length}", strict=False)
        except ValueError:
            continue
        ranges.append((net.network_address, net.broadcast_address))
    for cidr_list in _CIDR_LINE.findall(text):
        for cidr in cidr_list.split(","):
            try:
                net = IPv4Network(cidr.strip(), strict=False)
            except ValueError:
                continue
            ranges.append((net.network_address, net.broadcast_address))
    return ranges


def _query_registries(ip: IPv4Address, client: WhoisSource) -> NetRange:
    best: NetRange | None = None
    answered = 0
    for rir in RIR_REGISTRIES:
        try:
            text = client.query(rir, ip)
        except (WhoisError, OSError) as e:
            logger.warning("whois %s lookup for %s failed: %s", rir, ip, e)
            continue
        answered += 1
        candidates = [NetRange(lo, hi, rir) for lo, hi in parse_whois_ranges(text) if int(lo) <= int(ip) <= int(hi)]
        if not candidates:
            logger.warning("whois %s response for %s holds no usable range, skipping", rir, ip)
            continue
        smallest = min(candidates, key=NetRange.rank)
        if best is None or smallest.rank() < best.rank():
            best = smallest
    if best is None:
        raise ResolutionError(f"no registry returned a range for {ip} ({answered} of {len(RIR_REGISTRIES)} answered)")
    return best


def resolve_netrange(
    ip: IPv4Address,
    cache: WhoisCache,
    mode: Mode = "offline",
    client: WhoisSource | None = None,
    max_age_ms: int | None = None,
) -> NetRange:
    """Smallest netrange containing `ip`.

    Private, loopback and link-local addresses map to built-in reserved
    blocks. Offline mode answers from the cache only; online mode queries
    the five registries on a miss (or a stale entry when `max_age_ms` is
    set) and stores the result.
    """
    ip = IPv4Address(ip)
    reserved = reserved_range(ip)
    if reserved is not None:
        return reserved

    cached = cache.lookup(ip)
    if mode == "offline":
        if cached is None:
            raise CacheMissError(ip)
        return cached

    if cached is not None:
        retrieved = cache.retrieved_at(cached) or 0
        if max_age_ms is None or time.time() * 1000 - retrieved <= max_age_ms:
            return cached
        logger.info("cached range %s for %s is older than %d ms, re-querying", cached, ip, max_age_ms)

    if client is None:
        client = WhoisClient()
    found = _query_registries(ip, client)
    cache.add(found)
    return found


def remote_endpoint(obf: OrderedBiFlow, local_side: Callable[[IPv4Address], bool]) -> tuple[IPv4Address, int]:
    """The endpoint outside the monitored network."""
    a_local = local_side(obf.endpoint_a[0])
    b_local = local_side(obf.endpoint_b[0])
    if a_local == b_local:
        where = "inside" if a_local else "outside"
        raise AmbiguousEndpointError(
            f"both endpoints {obf.endpoint_a[0]} and {obf.endpoint_b[0]} are {where} the local network"
        )
    return obf.endpoint_b if a_local else obf.endpoint_a


def service_key_of(
    obf: OrderedBiFlow,
    local_side: Callable[[IPv4Address], bool],
    cache: WhoisCache,
    mode: Mode = "offline",
    client: WhoisSource | None = None,
) -> ServiceKey:
    ip, port = remote_endpoint(obf, local_side)
    return ServiceKey(resolve_netrange(ip, cache, mode, client), port)
