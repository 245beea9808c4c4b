"""Shared builders for protocol documents and scenario objects."""

from __future__ import annotations

import copy
import json
from typing import Any

import pytest

from cexp.wirebus import SocketError, UdpMulticastBus


def digest(n: int) -> str:
    return "sha256:" + format(n, "064x")


def make_protocol_doc(**overrides: Any) -> dict:
    """One production plus two experimental variants, permissive thresholds."""
    doc = {
        "experiment_id": "exp-ab",
        "variants": [
            {"variant_id": "prod", "role": "PRODUCTION", "bundle_digest": digest(0), "launch_args": []},
            {"variant_id": "expA", "role": "EXPERIMENTAL", "bundle_digest": digest(1), "launch_args": []},
            {"variant_id": "expB", "role": "EXPERIMENTAL", "bundle_digest": digest(2), "launch_args": []},
        ],
        "cpu_threshold_pct": 80.0,
        "mem_threshold_mb": 512,
        "sustain_samples": 3,
        "sample_period_ms": 500,
        "degrade_grace_samples": 2,
        "max_duration_s": 60,
        "max_concurrent_experiments": 2,
        "upload_policy": "AT_END",
    }
    doc.update(copy.deepcopy(overrides))
    return doc


def make_ab_scenario(**overrides: Any) -> dict:
    """The A/B selection cycle: three healthy stubs, no contention."""
    scenario = {
        "name": "ab-500",
        "fake_clock": True,
        "protocol": make_protocol_doc(experiment_id="exp-ab-500"),
        "frames": {"count": 500, "rate_hz": 10, "seed": 7},
        "stubs": [
            {"variant_id": "prod", "true_positive_rate": 0.60, "cpu_burn_pct": 30, "seed": 11},
            {"variant_id": "expA", "true_positive_rate": 0.72, "cpu_burn_pct": 25, "seed": 12},
            {"variant_id": "expB", "true_positive_rate": 0.68, "cpu_burn_pct": 25, "seed": 13},
        ],
        "node": {"capacity_pct": 400},
        "expect": {"final_state": "COMPLETED", "winner": "expA"},
    }
    scenario.update(copy.deepcopy(overrides))
    return scenario


def make_hostile_scenario(**overrides: Any) -> dict:
    """One hostile experiment burning far past its CPU budget on a node
    where production actually feels the contention."""
    protocol = make_protocol_doc(
        experiment_id="exp-hostile",
        cpu_threshold_pct=20.0,
        max_concurrent_experiments=1,
    )
    protocol["variants"] = [protocol["variants"][0], protocol["variants"][1]]
    scenario = {
        "name": "hostile",
        "fake_clock": True,
        "protocol": protocol,
        "frames": {"count": 600, "rate_hz": 10, "seed": 7},
        "stubs": [
            {"variant_id": "prod", "true_positive_rate": 0.60, "cpu_burn_pct": 15, "seed": 11},
            {"variant_id": "expA", "true_positive_rate": 0.72, "cpu_burn_pct": 95, "seed": 12},
        ],
        "node": {"capacity_pct": 100},
        "expect": {"final_state": "ABORTED", "aborted_variants": ["expA"]},
    }
    scenario.update(copy.deepcopy(overrides))
    return scenario


def make_baseline_scenario(**overrides: Any) -> dict:
    """Production alone on the same node and frame schedule as the
    hostile scenario; the no-experiment reference run."""
    protocol = make_protocol_doc(
        experiment_id="exp-baseline",
        cpu_threshold_pct=20.0,
        max_concurrent_experiments=1,
    )
    protocol["variants"] = [protocol["variants"][0]]
    scenario = {
        "name": "baseline",
        "fake_clock": True,
        "protocol": protocol,
        "frames": {"count": 600, "rate_hz": 10, "seed": 7},
        "stubs": [
            {"variant_id": "prod", "true_positive_rate": 0.60, "cpu_burn_pct": 15, "seed": 11},
        ],
        "node": {"capacity_pct": 100},
        "expect": {"final_state": "COMPLETED"},
    }
    scenario.update(copy.deepcopy(overrides))
    return scenario


@pytest.fixture
def protocol_doc():
    return make_protocol_doc


@pytest.fixture
def protocol_json():
    def make(**overrides: Any) -> str:
        return json.dumps(make_protocol_doc(**overrides))

    return make


def multicast_loopback_available(port: int = 7799) -> bool:
    """True when this host can self-deliver a multicast datagram."""
    try:
        bus = UdpMulticastBus(port=port)
    except SocketError:
        return False
    try:
        from cexp.clock import WallClock
        from cexp.wirebus import Heartbeat, Sender

        Sender(bus, 99, WallClock()).send(Heartbeat(node_id=99, uptime_s=0))
        for _ in range(10):
            item = bus.poll(timeout_s=0.2)
            if item is not None and item.envelope.sender_id == 99:
                return True
        return False
    except SocketError:
        return False
    finally:
        bus.close()
