"""
Tests for the synthetic NAT traffic generator.
"""

import copy
import io
from collections import defaultdict

import pytest
import yaml

from src.errors import ConfigurationError
from src.netflow import build_obfs, parse_csv, parse_netflow_v5
from src.simulator import (
    ACK,
    FIN,
    PSH,
    SYN,
    PortAllocator,
    ProbeCache,
    export,
    load_scenario,
    read_truth,
    registry_ranges,
    scenario_from_dict,
    simulate,
)
from tests.conftest import EPOCH_MS, HOUR_MS, scenario_dict


@pytest.fixture(scope="module")
def simulated():
    config = scenario_from_dict(scenario_dict(hours=2, seed=21))
    records, truth = simulate(config)
    return config, records, truth


def _export_bytes(records, truth, fmt):
    sink = io.BytesIO()
    written = export(records, truth, fmt, sink)
    assert written == len(sink.getvalue())
    return sink.getvalue()


# --- probe cache ------------------------------------------------------------


def test_idle_gap_longer_than_inactive_timeout_splits_records():
    cache = ProbeCache(inactive_ms=15_000, active_ms=1_800_000, spacing_ms=10)
    cache.add_burst(True, 0, 5, 500)
    cache.add_burst(True, 20_000, 5, 500)
    exported = cache.flush_all()

    assert len(exported) == 2
    assert [(r.start, r.end, r.packets, r.bytes) for r in exported] == [(0, 40, 5, 500), (20_000, 20_040, 5, 500)]


def test_short_gap_merges_bursts():
    cache = ProbeCache(inactive_ms=15_000, active_ms=1_800_000, spacing_ms=10)
    cache.add_burst(True, 0, 5, 500)
    cache.add_burst(True, 10_000, 3, 300)
    exported = cache.flush_all()

    assert len(exported) == 1
    assert (exported[0].start, exported[0].end, exported[0].packets, exported[0].bytes) == (0, 10_020, 8, 800)


def test_directions_are_separate_records():
    cache = ProbeCache(inactive_ms=15_000, active_ms=1_800_000, spacing_ms=10)
    cache.add_burst(True, 0, 2, 100)
    cache.add_burst(False, 5, 3, 900)
    exported = cache.flush_all()
    assert [(r.outgoing, r.packets) for r in exported] == [(True, 2), (False, 3)]


def test_continuous_transfer_is_cut_at_the_active_timeout():
    """45 minutes of steady packets become records of at most 30 minutes each."""
    cache = ProbeCache(inactive_ms=15_000, active_ms=1_800_000, spacing_ms=1000)
    cache.add_burst(True, 0, 45 * 60, 45 * 60 * 100)
    exported = cache.flush_all()

    assert len(exported) == 2
    assert all(r.end - r.start <= 1_800_000 for r in exported)
    assert sum(r.packets for r in exported) == 45 * 60
    assert sum(r.bytes for r in exported) == 45 * 60 * 100
    assert exported[1].start == exported[0].end + 1000


# --- port allocator ---------------------------------------------------------


def test_ports_are_not_reused_while_busy():
    allocator = PortAllocator()
    first = allocator.allocate(0, 100)
    second = allocator.allocate(10, 100)
    assert first != second
    assert 1024 <= first <= 65535


def test_ports_cycle_through_the_ephemeral_range():
    allocator = PortAllocator()
    ports = [allocator.allocate(i, i + 1) for i in range(64_513)]
    assert ports[0] == 1024
    assert ports[64_511] == 65535
    assert ports[64_512] == 1024


def test_allocator_exhaustion():
    allocator = PortAllocator()
    for _ in range(65535 - 1024 + 1):
        allocator.allocate(0, 10**9)
    with pytest.raises(ConfigurationError):
        allocator.allocate(1, 10**9)


# --- scenarios --------------------------------------------------------------


def test_scenario_validation_errors():
    document = scenario_dict()
    document["users"][0]["services"][0]["bytes"]["sigma"] = 0.0
    with pytest.raises(ConfigurationError, match="sigma"):
        scenario_from_dict(document)


@pytest.mark.parametrize(
    "mutate",
    [
        lambda d: d.update(nat_ips=["203.0.113.1"]),
        lambda d: d["schedule"].update(mallory=[{"start_ms": 0, "end_ms": 10}]),
        lambda d: d["schedule"]["alice"].append({"start_ms": 0, "end_ms": d["duration_ms"] + 1}),
        lambda d: d.update(unknown_field=1),
        lambda d: d["users"].append(copy.deepcopy(d["users"][0])),
    ],
)
def test_inconsistent_scenarios_are_rejected(mutate):
    document = scenario_dict()
    mutate(document)
    with pytest.raises(ConfigurationError):
        scenario_from_dict(document)


def test_load_scenario_from_yaml(tmp_path):
    path = tmp_path / "scenario.yaml"
    path.write_text(yaml.safe_dump(scenario_dict(hours=1)))
    config = load_scenario(path)

    assert [u.user_id for u in config.users] == ["alice", "bob", "carol", "dave"]
    assert config.presence("alice") == [(EPOCH_MS, EPOCH_MS + HOUR_MS)]
    assert config.inactive_timeout_ms == 15_000
    assert config.active_timeout_ms == 1_800_000


def test_load_scenario_rejects_non_mapping(tmp_path):
    path = tmp_path / "scenario.yaml"
    path.write_text("- just\n- a list\n")
    with pytest.raises(ConfigurationError):
        load_scenario(path)


def test_registry_ranges_include_services_and_parents():
    config = scenario_from_dict(scenario_dict())
    labels = [str(r) for r in registry_ranges(config)]
    assert labels == [
        "45.30.4.0-45.30.4.255",
        "45.10.0.0-45.10.255.255",
        "45.20.0.0-45.20.255.255",
        "45.0.0.0-45.255.255.255",
    ]


# --- generation -------------------------------------------------------------


def test_simulation_is_deterministic(simulated):
    config, records, truth = simulated
    again, truth_again = simulate(config)

    assert again == records
    assert truth_again.record_users == truth.record_users
    assert _export_bytes(records, truth, "csv") == _export_bytes(again, truth_again, "csv")


def test_seed_changes_traffic(simulated):
    config, records, _ = simulated
    other, _ = simulate(config.model_copy(update={"seed": 22}))
    assert other != records


def test_records_stay_within_presence(simulated):
    config, records, truth = simulated
    for record, user_id in zip(records, truth.record_users):
        spans = config.presence(user_id)
        assert any(start <= record.start_ts < end for start, end in spans)
        assert record.end_ts <= max(end for _, end in spans) + config.active_timeout_ms


def test_every_record_is_attributed(simulated):
    _, records, truth = simulated
    assert len(truth.record_users) == len(records)
    assert set(truth.record_users) == {"alice", "bob", "carol", "dave"}
    assert truth.sessions["alice"] > truth.sessions["bob"]


def test_records_leave_through_nat_addresses(simulated):
    config, records, _ = simulated
    nat = set(config.nat_ips)
    for r in records:
        assert (r.key.ip_src in nat) != (r.key.ip_dst in nat)


def test_no_two_users_share_a_connection(simulated):
    _, records, truth = simulated
    owners = defaultdict(set)
    for record, user_id in zip(records, truth.record_users):
        endpoints = sorted((int(ip), port) for ip, port in (record.key.source, record.key.destination))
        owners[(*endpoints, record.key.protocol)].add(user_id)
    assert all(len(users) == 1 for users in owners.values())


def test_tcp_flags_mark_connection_edges(simulated):
    _, records, _ = simulated
    for obf in build_obfs(records):
        for direction in (obf.endpoint_a, obf.endpoint_b):
            sent = [r for r in obf.records if r.key.source == direction]
            if not sent:
                continue
            assert all(r.tcp_flags & (PSH | ACK) == PSH | ACK for r in sent)
            assert sent[0].tcp_flags & SYN
            assert sent[-1].tcp_flags & FIN


# --- export -----------------------------------------------------------------


def test_csv_export_parses_back(simulated):
    _, records, truth = simulated
    assert parse_csv(io.StringIO(_export_bytes(records, truth, "csv").decode())) == records


def test_netflow_export_parses_back(simulated):
    _, records, truth = simulated
    assert parse_netflow_v5(_export_bytes(records, truth, "netflow_v5")) == records


def test_truth_export_reads_back(tmp_path, simulated):
    config, records, truth = simulated
    path = tmp_path / "truth.csv"
    path.write_bytes(_export_bytes(records, truth, "truth_csv"))
    loaded = read_truth(path)

    assert loaded.record_users == truth.record_users
    assert loaded.presence == truth.presence
    assert loaded.presence["alice"] == config.presence("alice")


def test_truth_export_rejects_mismatched_records(simulated):
    _, records, truth = simulated
    with pytest.raises(ConfigurationError, match="attributes"):
        export(records[:-1], truth, "truth_csv", io.BytesIO())


def test_export_of_nothing(simulated):
    _, _, truth = simulated
    assert _export_bytes([], truth, "csv").decode().splitlines() == [
        "ip_src,port_src,ip_dst,port_dst,protocol,packets,bytes,start_ts,end_ts,tcp_flags,tos"
    ]
    assert len(_export_bytes([], truth, "netflow_v5")) == 24


def test_absent_users_keep_a_truth_row(tmp_path):
    document = scenario_dict(hours=1)
    document["schedule"]["dave"] = []
    config = scenario_from_dict(document)
    records, truth = simulate(config)
    path = tmp_path / "truth.csv"
    path.write_bytes(_export_bytes(records, truth, "truth_csv"))

    assert read_truth(path).presence["dave"] == []
    assert "dave" not in truth.record_users


def test_unknown_export_format(simulated):
    _, records, truth = simulated
    with pytest.raises(ValueError):
        export(records, truth, "pcap", io.BytesIO())
