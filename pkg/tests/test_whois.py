"""
Tests for netrange resolution and the whois cache.
"""

from ipaddress import IPv4Address

import pytest
from ipwhois.exceptions import WhoisRateLimitError

from src import whois
from src.errors import AmbiguousEndpointError, CacheMissError, ResolutionError
from src.netflow import FlowKey, LocalNetwork, RawRecord, build_obfs
from src.whois import (
    NetRange,
    ReplayWhoisClient,
    ServiceKey,
    WhoisCache,
    WhoisClient,
    import_ranges,
    parse_whois_ranges,
    remote_endpoint,
    resolve_netrange,
    service_key_of,
)
from tests.conftest import FIXTURES

REPLAY_DIR = FIXTURES / "whois"


def _range(first, last, source="cache"):
    return NetRange(IPv4Address(first), IPv4Address(last), source)


class _CountingSource:
    """Registry stand-in that answers every query with the same transcript."""

    def __init__(self, text):
        self.text = text
        self.query_count = 0

    def query(self, rir, ip):
        self.query_count += 1
        return self.text


def test_netrange_size_and_membership():
    r = NetRange.from_network("8.8.8.0/24")
    assert r.size == 256
    assert IPv4Address("8.8.8.8") in r
    assert IPv4Address("8.8.9.0") not in r
    assert str(r) == "8.8.8.0-8.8.8.255"


def test_netrange_equality_ignores_source():
    assert _range("8.8.8.0", "8.8.8.255", "arin") == _range("8.8.8.0", "8.8.8.255", "cache")


def test_netrange_rejects_inverted_bounds():
    with pytest.raises(ValueError):
        _range("8.8.8.255", "8.8.8.0")


def test_cache_returns_smallest_containing_range():
    cache = WhoisCache()
    ranges = [_range("8.0.0.0", "8.255.255.255"), _range("8.8.8.0", "8.8.8.255"), _range("8.8.0.0", "8.8.255.255")]
    import_ranges(cache, ranges, 0)

    assert cache.lookup(IPv4Address("8.8.8.8")) == _range("8.8.8.0", "8.8.8.255")
    assert cache.lookup(IPv4Address("8.8.4.4")) == _range("8.8.0.0", "8.8.255.255")
    assert cache.lookup(IPv4Address("9.9.9.9")) is None


def test_cache_equal_sizes_prefer_lower_start():
    cache = WhoisCache()
    cache.add(_range("10.1.0.0", "10.1.0.255"), 0)
    cache.add(_range("10.0.255.128", "10.1.0.127"), 0)
    assert cache.lookup(IPv4Address("10.1.0.5")) == _range("10.0.255.128", "10.1.0.127")


def test_cache_lookup_sees_later_insertions():
    cache = WhoisCache()
    cache.add(_range("8.0.0.0", "8.255.255.255"), 0)
    assert cache.lookup(IPv4Address("8.8.8.8")).size == 2**24
    cache.add(_range("8.8.8.0", "8.8.8.255"), 0)
    assert cache.lookup(IPv4Address("8.8.8.8")).size == 256


def test_lookup_overlapping_an_insert_leaves_no_stale_answer():
    cache = WhoisCache()
    covering = _range("45.10.0.0", "45.10.255.255")

    class InsertDuringScan(list):
        def __iter__(self):
            cache.add(covering, 0)
            return super().__iter__()

    cache._ordered = InsertDuringScan()
    assert cache.lookup(IPv4Address("45.10.1.1")) is None
    assert cache.lookup(IPv4Address("45.10.1.1")) == covering


def test_lookup_memo_is_bounded(monkeypatch):
    monkeypatch.setattr(whois, "MEMO_LIMIT", 4)
    cache = WhoisCache()
    cache.add(_range("10.0.0.0", "10.0.0.255"), 0)
    for last_octet in range(10):
        assert cache.lookup(IPv4Address(f"10.0.0.{last_octet}")) is not None
    assert len(cache._memo) <= 4


def test_cache_save_and_load(tmp_path):
    cache = WhoisCache()
    cache.add(_range("8.8.8.0", "8.8.8.255", "arin"), 1234)
    cache.add(_range("45.0.0.0", "45.255.255.255"), 99)
    path = tmp_path / "nested" / "cache.csv"
    cache.save(path)

    assert path.read_text().splitlines()[0] == "8.8.8.0,8.8.8.255,arin,1234"
    loaded = WhoisCache.load(path)
    assert loaded.entries == cache.entries
    assert loaded.lookup(IPv4Address("8.8.8.8")).source == "arin"
    assert loaded.retrieved_at(_range("45.0.0.0", "45.255.255.255")) == 99


def test_cache_load_missing_file_is_empty(tmp_path):
    assert len(WhoisCache.load(tmp_path / "absent.csv")) == 0


def test_cache_load_rejects_malformed_line(tmp_path):
    path = tmp_path / "cache.csv"
    path.write_text("8.8.8.0,8.8.8.255,arin\n")
    with pytest.raises(ValueError, match="cache.csv:1"):
        WhoisCache.load(path)


@pytest.mark.parametrize(
    "ip, cidr",
    [
        ("10.1.2.3", "10.0.0.0/8"),
        ("172.20.0.1", "172.16.0.0/12"),
        ("192.168.1.10", "192.168.0.0/16"),
        ("127.0.0.1", "127.0.0.0/8"),
    ],
)
def test_reserved_addresses_resolve_without_cache(ip, cidr):
    netrange = resolve_netrange(IPv4Address(ip), WhoisCache())
    assert netrange == NetRange.from_network(cidr)
    assert netrange.source == "reserved"


def test_offline_miss_raises():
    with pytest.raises(CacheMissError) as excinfo:
        resolve_netrange(IPv4Address("8.8.8.8"), WhoisCache(), mode="offline")
    assert excinfo.value.ip == IPv4Address("8.8.8.8")


def test_replay_resolves_smallest_registry_range():
    """ARIN reports the /24 next to its parent block; RIPE and APNIC only know the whole space."""
    cache = WhoisCache()
    client = ReplayWhoisClient(REPLAY_DIR)
    netrange = resolve_netrange(IPv4Address("8.8.8.8"), cache, mode="online", client=client)

    assert netrange == _range("8.8.8.0", "8.8.8.255")
    assert netrange.source == "arin"
    # one query per registry, the missing LACNIC transcript included
    assert client.query_count == 5
    assert cache.lookup(IPv4Address("8.8.8.8")) == netrange


def test_online_hit_skips_registries():
    cache = WhoisCache()
    cache.add(_range("8.8.8.0", "8.8.8.255"))
    client = ReplayWhoisClient(REPLAY_DIR)
    resolve_netrange(IPv4Address("8.8.8.8"), cache, mode="online", client=client)
    assert client.query_count == 0


def test_stale_entry_is_requeried():
    cache = WhoisCache()
    cache.add(_range("8.0.0.0", "8.255.255.255"), retrieved_at_ms=0)
    client = ReplayWhoisClient(REPLAY_DIR)

    netrange = resolve_netrange(IPv4Address("8.8.8.8"), cache, mode="online", client=client, max_age_ms=1000)
    assert client.query_count == 5
    assert netrange.size == 256


def test_no_registry_answer_raises(tmp_path):
    client = ReplayWhoisClient(tmp_path)
    with pytest.raises(ResolutionError):
        resolve_netrange(IPv4Address("8.8.8.8"), WhoisCache(), mode="online", client=client)


def test_responses_without_ranges_are_skipped():
    client = _CountingSource("% no entries found\n")
    with pytest.raises(ResolutionError):
        resolve_netrange(IPv4Address("8.8.8.8"), WhoisCache(), mode="online", client=client)
    assert client.query_count == 5


class _FakeNet:
    calls: list = []
    error: Exception | None = None

    def __init__(self, address, timeout=5):
        self.address = address
        self.timeout = timeout

    def get_whois(self, asn_registry="arin", retry_count=3, server=None, port=43, extra_blacklist=None):
        _FakeNet.calls.append((self.address, asn_registry, server, retry_count))
        if _FakeNet.error is not None:
            raise _FakeNet.error
        return "NetRange: 8.8.8.0 - 8.8.8.255\n"


@pytest.fixture
def fake_net(monkeypatch):
    _FakeNet.calls = []
    _FakeNet.error = None
    monkeypatch.setattr(whois, "Net", _FakeNet)
    return _FakeNet


def test_client_maps_registries(fake_net):
    client = WhoisClient(retries=2)
    for rir in ("arin", "ripe", "apnic", "iana", "lacnic"):
        assert "8.8.8.0" in client.query(rir, IPv4Address("8.8.8.8"))

    assert [(registry, server) for _, registry, server, _ in fake_net.calls] == [
        ("arin", None),
        ("ripencc", None),
        ("apnic", None),
        ("iana", "whois.iana.org"),
        ("lacnic", None),
    ]
    assert all(address == "8.8.8.8" and retries == 2 for address, _, _, retries in fake_net.calls)
    assert client.query_count == 5


def test_client_turns_lookup_failures_into_resolution_errors(fake_net):
    fake_net.error = WhoisRateLimitError("Whois lookup failed for 8.8.8.8. Rate limit exceeded")
    client = WhoisClient()
    with pytest.raises(ResolutionError, match="ripe"):
        client.query("ripe", IPv4Address("8.8.8.8"))
    assert client.query_count == 1


def test_online_resolution_through_client(fake_net):
    cache = WhoisCache()
    netrange = resolve_netrange(IPv4Address("8.8.8.8"), cache, mode="online", client=WhoisClient())
    assert str(netrange) == "8.8.8.0-8.8.8.255"
    assert netrange.source == "arin"
    assert len(fake_net.calls) == 5


def test_parse_netrange_and_inetnum_lines():
    text = (REPLAY_DIR / "arin_8.8.8.8.txt").read_text()
    ranges = parse_whois_ranges(text)
    assert (IPv4Address("8.8.8.0"), IPv4Address("8.8.8.255")) in ranges
    assert (IPv4Address("8.0.0.0"), IPv4Address("8.127.255.255")) in ranges


def test_parse_lacnic_short_form():
    ranges = parse_whois_ranges("inetnum:     200.160/12\nstatus:      allocated\n")
    assert ranges == [(IPv4Address("200.160.0.0"), IPv4Address("200.175.255.255"))]


def test_parse_cidr_list():
    ranges = parse_whois_ranges("CIDR:           45.10.0.0/16, 45.11.0.0/16\n")
    assert ranges == [
        (IPv4Address("45.10.0.0"), IPv4Address("45.10.255.255")),
        (IPv4Address("45.11.0.0"), IPv4Address("45.11.255.255")),
    ]


def _obf(src, dst):
    key = FlowKey(IPv4Address(src), 40000, IPv4Address(dst), 443, 6)
    return build_obfs([RawRecord(key, 1, 60, 0, 10)])[0]


def test_remote_endpoint_picks_outside_side():
    local = LocalNetwork(["198.51.100.0/24"])
    assert remote_endpoint(_obf("198.51.100.1", "45.10.3.4"), local) == (IPv4Address("45.10.3.4"), 443)


@pytest.mark.parametrize("src, dst", [("198.51.100.1", "198.51.100.2"), ("45.1.1.1", "45.2.2.2")])
def test_remote_endpoint_ambiguous(src, dst):
    with pytest.raises(AmbiguousEndpointError):
        remote_endpoint(_obf(src, dst), LocalNetwork(["198.51.100.0/24"]))


def test_service_key_of_uses_remote_range_and_port():
    cache = WhoisCache()
    cache.add(_range("45.10.0.0", "45.10.255.255"), 0)
    key = service_key_of(_obf("198.51.100.1", "45.10.3.4"), LocalNetwork(["198.51.100.0/24"]), cache)
    assert key == ServiceKey(_range("45.10.0.0", "45.10.255.255"), 443)
    assert key.label == "45.10.0.0-45.10.255.255:443"
