from __future__ import annotations

import math
from pathlib import Path

import pytest

from src.netflow import build_obfs, parse_csv
from src.simulator import SimulationConfig, registry_ranges, scenario_from_dict, simulate
from src.trainer import TrainingConfig, train_profile
from src.whois import WhoisCache, import_ranges

FIXTURES = Path(__file__).parent / "fixtures"
HOUR_MS = 3_600_000
EPOCH_MS = 472_222 * HOUR_MS
LOCAL_PREFIX = "198.51.100.0/24"

SERVICE_RANGES = [
    ("45.10.0.0", "45.10.255.255", 443),
    ("45.20.0.0", "45.20.255.255", 443),
    ("45.30.4.0", "45.30.4.255", 5222),
]


def _services(session_rate: float, gap_s: float, packets_mu: float, bytes_mu: float, outgoing: float) -> list[dict]:
    return [
        {
            "first_ip": first,
            "last_ip": last,
            "port": port,
            "session_rate": session_rate,
            "records_per_obf": {"low": 4, "high": 8},
            "gap_ms": {"mu": math.log(gap_s * 1000), "sigma": 0.3},
            "packets": {"mu": packets_mu, "sigma": 0.3},
            "bytes": {"mu": bytes_mu, "sigma": 0.3},
            "outgoing_fraction": outgoing,
        }
        for first, last, port in SERVICE_RANGES
    ]


def scenario_dict(hours: int = 6, seed: int = 3, schedule: dict | None = None, start_ms: int = EPOCH_MS) -> dict:
    """alice talks to three services with large transfers; bob, carol and dave are light background users."""
    users = [{"user_id": "alice", "services": _services(8.0, 20, 3.0, 10.5, 0.3)}]
    users += [{"user_id": name, "services": _services(4.0, 30, 2.0, 6.5, 0.5)} for name in ("bob", "carol", "dave")]
    everyone = {u["user_id"]: [{"start_ms": 0, "end_ms": hours * HOUR_MS}] for u in users}
    return {
        "users": users,
        "schedule": schedule if schedule is not None else everyone,
        "duration_ms": hours * HOUR_MS,
        "start_ms": start_ms,
        "nat_ips": ["198.51.100.1", "198.51.100.2"],
        "local_prefixes": [LOCAL_PREFIX],
        "seed": seed,
        "registry": [{"first_ip": "45.0.0.0", "last_ip": "45.255.255.255"}],
    }


@pytest.fixture
def toy_records():
    with open(FIXTURES / "toy_records.csv", newline="") as f:
        return parse_csv(f)


@pytest.fixture(scope="session")
def training_scenario() -> SimulationConfig:
    return scenario_from_dict(scenario_dict())


@pytest.fixture(scope="session")
def scenario_cache(training_scenario) -> WhoisCache:
    cache = WhoisCache()
    import_ranges(cache, registry_ranges(training_scenario), training_scenario.start_ms)
    return cache


@pytest.fixture(scope="session")
def training_config() -> TrainingConfig:
    return TrainingConfig(seed=1, max_iter=20, local_cidrs=(LOCAL_PREFIX,))


@pytest.fixture(scope="session")
def training_data(training_scenario):
    records, truth = simulate(training_scenario)
    return truth.user_records(records, "alice"), build_obfs(truth.other_records(records, "alice"))


@pytest.fixture(scope="session")
def trained(training_data, scenario_cache, training_config):
    user_records, background = training_data
    return train_profile(user_records, background, scenario_cache, training_config, user_id="alice")
