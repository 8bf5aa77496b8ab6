"""NetFlow raw records, flows and Ordered Bi-directional Flows (OBFs).

Parsers for NetFlow v5 export packets and for the CSV interchange format,
their mirror-image writers, and the two grouping operations the rest of
the pipeline is built on: exact-key flows and OBFs.

NetFlow v5 header (24 bytes, big-endian):
  version u16, count u16, SysUptime u32 (ms), unix_secs u32, unix_nsecs u32,
  flow_sequence u32, engine_type u8, engine_id u8, sampling_interval u16

NetFlow v5 record (48 bytes, big-endian):
  srcaddr u32, dstaddr u32, nexthop u32, input u16, output u16, dPkts u32,
  dOctets u32, First u32, Last u32, srcport u16, dstport u16, pad1 u8,
  tcp_flags u8, prot u8, tos u8, src_as u16, dst_as u16, src_mask u8,
  dst_mask u8, pad2 u16
"""

from __future__ import annotations

import csv
import struct
from collections import defaultdict
from dataclasses import dataclass
from ipaddress import AddressValueError, IPv4Address, IPv4Network
from pathlib import Path
from typing import BinaryIO, Iterable, Sequence, TextIO

import pandas as pd

from src.errors import CsvParseError, NetflowParseError

NETFLOW_V5_VERSION = 5
NETFLOW_V5_HEADER = struct.Struct("!HHIIIIBBH")
NETFLOW_V5_RECORD = struct.Struct("!IIIHHIIIIHHBBBBHHBBH")
NETFLOW_V5_MAX_RECORDS = 30

CSV_COLUMNS = [
    "ip_src",
    "port_src",
    "ip_dst",
    "port_dst",
    "protocol",
    "packets",
    "bytes",
    "start_ts",
    "end_ts",
    "tcp_flags",
    "tos",
]

Endpoint = tuple[IPv4Address, int]


@dataclass(frozen=True, slots=True)
class FlowKey:
    ip_src: IPv4Address
    port_src: int
    ip_dst: IPv4Address
    port_dst: int
    protocol: int

    def reverse(self) -> FlowKey:
        return FlowKey(self.ip_dst, self.port_dst, self.ip_src, self.port_src, self.protocol)

    @property
    def source(self) -> Endpoint:
        return (self.ip_src, self.port_src)

    @property
    def destination(self) -> Endpoint:
        return (self.ip_dst, self.port_dst)

    def sort_key(self) -> tuple[int, int, int, int, int]:
        return (int(self.ip_src), self.port_src, int(self.ip_dst), self.port_dst, self.protocol)


@dataclass(frozen=True, slots=True)
class RawRecord:
    key: FlowKey
    packets: int
    bytes: int
    start_ts: int
    end_ts: int
    tcp_flags: int = 0
    tos: int = 0

    def __post_init__(self) -> None:
        if self.start_ts > self.end_ts:
            raise ValueError(f"start_ts {self.start_ts} is after end_ts {self.end_ts}")
        if self.packets < 0 or self.bytes < 0:
            raise ValueError("packet and byte counters must be non-negative")

    def sort_key(self) -> tuple:
        return (self.start_ts, self.end_ts, self.key.sort_key(), self.packets, self.bytes, self.tcp_flags, self.tos)


@dataclass(frozen=True, slots=True)
class Flow:
    """All raw records sharing one exact key."""

    key: FlowKey
    records: tuple[RawRecord, ...]


@dataclass(frozen=True, slots=True)
class OrderedBiFlow:
    """Both directions between two endpoints, sorted by start timestamp.

    `endpoint_a` is the numerically lower (ip, port) pair; on equal start
    and end timestamps records flowing a->b sort before b->a.
    """

    endpoint_a: Endpoint
    endpoint_b: Endpoint
    protocol: int
    records: tuple[RawRecord, ...]

    @property
    def start_ts(self) -> int:
        return self.records[0].start_ts

    def __len__(self) -> int:
        return len(self.records)


class LocalNetwork:
    """Predicate telling whether an address is inside the monitored network."""

    def __init__(self, cidrs: Iterable[str | IPv4Network]):
        self.networks = tuple(IPv4Network(c, strict=False) for c in cidrs)
        if not self.networks:
            raise ValueError("at least one local CIDR is required")

    def __call__(self, ip: IPv4Address) -> bool:
        return any(ip in net for net in self.networks)

    @property
    def cidrs(self) -> list[str]:
        return [str(net) for net in self.networks]

    def __repr__(self) -> str:
        return f"LocalNetwork({self.cidrs!r})"


def _endpoint_key(endpoint: Endpoint) -> tuple[int, int]:
    return (int(endpoint[0]), endpoint[1])


# --- NetFlow v5 -------------------------------------------------------------


def _read_all(stream: bytes | bytearray | memoryview | BinaryIO) -> bytes:
    if isinstance(stream, (bytes, bytearray, memoryview)):
        return bytes(stream)
    return stream.read()


def parse_netflow_v5(stream: bytes | bytearray | memoryview | BinaryIO) -> list[RawRecord]:
    """Parse a concatenation of NetFlow v5 export packets.

    First/Last are SysUptime-relative; they are turned into epoch
    milliseconds using the header's unix_secs/unix_nsecs. Uptime
    differences are taken modulo 2**32 so a wrapped counter still yields
    the right offset.
    """
    data = _read_all(stream)
    records: list[RawRecord] = []
    offset = 0
    while offset < len(data):
        if len(data) - offset < NETFLOW_V5_HEADER.size:
            raise NetflowParseError(
                f"truncated header ({len(data) - offset} of {NETFLOW_V5_HEADER.size} bytes)", offset
            )
        (version, count, sys_uptime, unix_secs, unix_nsecs, _seq, _etype, _eid, _sampling) = (
            NETFLOW_V5_HEADER.unpack_from(data, offset)
        )
        if version != NETFLOW_V5_VERSION:
            raise NetflowParseError(f"unsupported NetFlow version {version}", offset)
        expected_end = offset + NETFLOW_V5_HEADER.size + count * NETFLOW_V5_RECORD.size
        if expected_end > len(data):
            raise NetflowParseError(
                f"header announces {count} records but only "
                f"{len(data) - offset - NETFLOW_V5_HEADER.size} payload bytes follow",
                offset,
            )

        export_ms = unix_secs * 1000 + unix_nsecs // 1_000_000
        record_offset = offset + NETFLOW_V5_HEADER.size
        for _ in range(count):
            (
                srcaddr,
                dstaddr,
                _nexthop,
                _input_if,
                _output_if,
                packets,
                octets,
                first,
                last,
                srcport,
                dstport,
                _pad1,
                tcp_flags,
                protocol,
                tos,
                _src_as,
                _dst_as,
                _src_mask,
                _dst_mask,
                _pad2,
            ) = NETFLOW_V5_RECORD.unpack_from(data, record_offset)
            start_ts = export_ms - ((sys_uptime - first) & 0xFFFFFFFF)
            end_ts = export_ms - ((sys_uptime - last) & 0xFFFFFFFF)
            if start_ts > end_ts:
                raise NetflowParseError("record ends before it starts", record_offset)
            if packets < 1:
                raise NetflowParseError("record carries zero packets", record_offset)
            key = FlowKey(IPv4Address(srcaddr), srcport, IPv4Address(dstaddr), dstport, protocol)
            records.append(RawRecord(key, packets, octets, start_ts, end_ts, tcp_flags, tos))
            record_offset += NETFLOW_V5_RECORD.size
        offset = expected_end
    return records


def write_netflow_v5(records: Sequence[RawRecord], sink: BinaryIO) -> int:
    """Serialize records as NetFlow v5 packets of at most 30 records.

    Each packet's time base is the latest end_ts it carries and its boot
    time sits one second before its earliest start_ts, so every timestamp
    survives a parse at millisecond resolution. An empty input still gets
    one header announcing zero records.
    """
    if not records:
        header = NETFLOW_V5_HEADER.pack(NETFLOW_V5_VERSION, 0, 0, 0, 0, 0, 0, 0, 0)
        sink.write(header)
        return len(header)

    written = 0
    sequence = 0
    for chunk_start in range(0, len(records), NETFLOW_V5_MAX_RECORDS):
        chunk = records[chunk_start : chunk_start + NETFLOW_V5_MAX_RECORDS]
        export_ms = max(r.end_ts for r in chunk)
        boot_ms = min(r.start_ts for r in chunk) - 1000
        sys_uptime = export_ms - boot_ms
        if sys_uptime > 0xFFFFFFFF:
            raise ValueError("records in one packet span more than the 32-bit uptime range")
        buffer = bytearray(
            NETFLOW_V5_HEADER.pack(
                NETFLOW_V5_VERSION,
                len(chunk),
                sys_uptime,
                export_ms // 1000,
                (export_ms % 1000) * 1_000_000,
                sequence,
                0,
                0,
                0,
            )
        )
        for r in chunk:
            buffer += NETFLOW_V5_RECORD.pack(
                int(r.key.ip_src),
                int(r.key.ip_dst),
                0,
                0,
                0,
                r.packets,
                r.bytes,
                r.start_ts - boot_ms,
                r.end_ts - boot_ms,
                r.key.port_src,
                r.key.port_dst,
                0,
                r.tcp_flags,
                r.key.protocol,
                r.tos,
                0,
                0,
                0,
                0,
                0,
            )
        sink.write(buffer)
        written += len(buffer)
        sequence += len(chunk)
    return written


# --- CSV --------------------------------------------------------------------


def _csv_int(value: str, column: str, line: int, low: int, high: int | None, base: int = 10) -> int:
    try:
        number = int(value.strip(), base)
    except ValueError:
        raise CsvParseError(f"column {column!r} is not numeric: {value!r}", line) from None
    if number < low or (high is not None and number > high):
        raise CsvParseError(f"column {column!r} out of range: {number}", line)
    return number


def _csv_ip(value: str, column: str, line: int) -> IPv4Address:
    try:
        return IPv4Address(value.strip())
    except AddressValueError:
        raise CsvParseError(f"column {column!r} is not an IPv4 address: {value!r}", line) from None


def parse_csv(stream: TextIO | Path) -> list[RawRecord]:
    """Parse the CSV interchange format, one record per data line in file order.

    tcp_flags and tos accept decimal or 0x-prefixed hex. Blank lines are skipped but still
    counted, so error line numbers match the file.
    """
    try:
        df = pd.read_csv(stream, dtype=str, keep_default_na=False, skipinitialspace=True, skip_blank_lines=False)
    except pd.errors.EmptyDataError:
        raise CsvParseError("missing header line", 1) from None

    missing = [c for c in CSV_COLUMNS if c not in df.columns]
    if missing:
        raise CsvParseError(f"missing column(s): {', '.join(missing)}", 1)

    records: list[RawRecord] = []
    df = df.fillna("")
    for line, row in enumerate(df[CSV_COLUMNS].itertuples(index=False, name=None), start=2):
        if not any(row):
            continue
        ip_src, port_src, ip_dst, port_dst, protocol, packets, octets, start_ts, end_ts, flags, tos = row
        key = FlowKey(
            _csv_ip(ip_src, "ip_src", line),
            _csv_int(port_src, "port_src", line, 0, 0xFFFF),
            _csv_ip(ip_dst, "ip_dst", line),
            _csv_int(port_dst, "port_dst", line, 0, 0xFFFF),
            _csv_int(protocol, "protocol", line, 0, 0xFF),
        )
        start = _csv_int(start_ts, "start_ts", line, 0, None)
        end = _csv_int(end_ts, "end_ts", line, 0, None)
        if start > end:
            raise CsvParseError(f"start_ts {start} is after end_ts {end}", line)
        records.append(
            RawRecord(
                key,
                _csv_int(packets, "packets", line, 1, None),
                _csv_int(octets, "bytes", line, 0, None),
                start,
                end,
                _csv_int(flags, "tcp_flags", line, 0, 0xFF, base=0),
                _csv_int(tos, "tos", line, 0, 0xFF, base=0),
            )
        )
    return records


def write_csv(records: Iterable[RawRecord], sink: TextIO) -> None:
    writer = csv.writer(sink, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in records:
        writer.writerow(
            [
                r.key.ip_src,
                r.key.port_src,
                r.key.ip_dst,
                r.key.port_dst,
                r.key.protocol,
                r.packets,
                r.bytes,
                r.start_ts,
                r.end_ts,
                f"0x{r.tcp_flags:02x}",
                r.tos,
            ]
        )


def read_records(path: Path) -> list[RawRecord]:
    """Load records from a CSV file (by suffix) or a NetFlow v5 capture."""
    path = Path(path)
    if path.suffix.lower() == ".csv":
        with open(path, newline="") as f:
            return parse_csv(f)
    with open(path, "rb") as f:
        return parse_netflow_v5(f)


# --- grouping ---------------------------------------------------------------


def assemble_flows(records: Iterable[RawRecord]) -> list[Flow]:
    """Group records by exact key; one Flow per distinct key, ordered by key."""
    groups: dict[FlowKey, list[RawRecord]] = defaultdict(list)
    for r in records:
        groups[r.key].append(r)
    return [
        Flow(key, tuple(sorted(groups[key], key=RawRecord.sort_key)))
        for key in sorted(groups, key=FlowKey.sort_key)
    ]


def build_obfs(records: Iterable[RawRecord]) -> list[OrderedBiFlow]:
    """Group records by unordered endpoint pair plus protocol and sort each group.

    The result does not depend on input order: records are ordered by
    (start_ts, end_ts, a->b before b->a, remaining fields) and OBFs by their
    first start timestamp, then endpoints.
    """
    groups: dict[tuple[Endpoint, Endpoint, int], list[RawRecord]] = defaultdict(list)
    for r in records:
        src, dst = r.key.source, r.key.destination
        a, b = (src, dst) if _endpoint_key(src) <= _endpoint_key(dst) else (dst, src)
        groups[(a, b, r.key.protocol)].append(r)

    obfs = []
    for (a, b, protocol), members in groups.items():

        def order(r: RawRecord, a: Endpoint = a) -> tuple:
            direction = 0 if r.key.source == a else 1
            return (r.start_ts, r.end_ts, direction, r.packets, r.bytes, r.tcp_flags, r.tos)

        obfs.append(OrderedBiFlow(a, b, protocol, tuple(sorted(members, key=order))))
    obfs.sort(key=lambda o: (o.start_ts, _endpoint_key(o.endpoint_a), _endpoint_key(o.endpoint_b), o.protocol))
    return obfs
