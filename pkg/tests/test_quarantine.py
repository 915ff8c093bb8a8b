import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from iotquarantine.errors import CapacityError, PreconditionError
from iotquarantine.quarantine import (
    QUARANTINE,
    SERVING,
    TESTBED_STAGES,
    FlowRuleTable,
    Lifecycle,
    NoisyClassifier,
    PerfectClassifier,
    ReassignmentMode,
    ReassignmentTimings,
    SliceNetwork,
    StageTiming,
    network_for_mode,
    repeat_reassignment,
    run_closed_loop,
    stage_ordering_ok,
    trace_to_jsonl,
)
from iotquarantine.traffic import Device, FlowPopulation, ScenarioParams

from sequences import random_sequence

CONST = ReassignmentTimings()


@pytest.mark.parametrize(
    "mode,expected",
    [("reactive", 989.69), ("proactive-deployed", 37.90), ("proactive-replicated", 3.98)],
)
def test_constant_latency_per_mode(mode, expected):
    net = network_for_mode({"f": ["u"]}, mode)
    events, total = net.quarantine_flow("f", mode, CONST)
    assert total == expected
    assert stage_ordering_ok(events)
    assert net.slice_of("f") == QUARANTINE
    assert not net.continuity_violations()


def test_max_sampling_bounds():
    timings = CONST.with_sampling("max")
    _, deployed = network_for_mode({"f": ["u"]}, "proactive-deployed").quarantine_flow("f", "proactive-deployed", timings)
    assert deployed == pytest.approx(47.65)
    _, reactive = network_for_mode({"f": ["u"]}, "reactive").quarantine_flow("f", "reactive", timings)
    assert reactive == pytest.approx(630.98 + 397.13 + 37.67 + 9.98)


def test_sampling_stays_in_range():
    rng = np.random.default_rng(5)
    for mode in ("uniform", "triangular"):
        for stage, timing in TESTBED_STAGES.items():
            xs = [timing.sample(mode, rng) for _ in range(500)]
            assert timing.minimum <= min(xs) and max(xs) <= timing.maximum


def test_random_sampling_needs_rng():
    with pytest.raises(ValueError):
        TESTBED_STAGES["deploy"].sample("uniform", None)
    with pytest.raises(ValueError):
        ReassignmentTimings(sampling="gaussian")
    with pytest.raises(ValueError):
        StageTiming(1, 5, 2, 3, 3)


def test_release_uses_reconfigure_only():
    net = network_for_mode({"f": ["u1", "u2"]}, "reactive")
    net.quarantine_flow("f", "reactive", CONST)
    events, latency = net.release_flow("f", CONST, block=["u2"])
    assert latency == 3.98
    assert [e.detail["stage"] for e in events if e.event == "stage_start"] == ["reconfigure"]
    assert net.slice_of("f") == SERVING
    assert net.blocked == {"u2"}
    assert ("block", "u2") in net.rules.rules
    assert not net.continuity_violations()


def test_precondition_errors():
    net = network_for_mode({"f": ["u"]}, "reactive")
    with pytest.raises(PreconditionError):
        net.quarantine_flow("f", "proactive-replicated", CONST)
    with pytest.raises(PreconditionError):
        net.release_flow("f", CONST)
    net.quarantine_flow("f", "reactive", CONST)
    with pytest.raises(PreconditionError):
        net.quarantine_flow("f", "reactive", CONST)
    with pytest.raises(KeyError):
        net.quarantine_flow("nope", "reactive", CONST)


def test_precondition_leaves_state_untouched():
    net = network_for_mode({"f": ["u"]}, "proactive-deployed")
    before = (len(net.trace), net.clock, dict(net.rules.rules))
    with pytest.raises(PreconditionError):
        net.quarantine_flow("f", "reactive", CONST)
    assert before == (len(net.trace), net.clock, dict(net.rules.rules))


def test_rule_capacity():
    table = FlowRuleTable(1)
    table.install(("flow", 1), SERVING)
    table.install(("flow", 1), QUARANTINE)  # retarget, no new entry
    with pytest.raises(CapacityError):
        table.install(("flow", 2), SERVING)
    net = network_for_mode({"f": ["a", "b", "c"]}, "proactive-replicated", capacity=2)
    net.quarantine_flow("f", "proactive-replicated", CONST)
    with pytest.raises(CapacityError):
        net.release_flow("f", CONST, block=["a", "b"])
    assert net.slice_of("f") == QUARANTINE
    with pytest.raises(CapacityError):
        SliceNetwork({"f": [], "g": []}, capacity=1)


def test_teardown_only_when_idle():
    net = network_for_mode({"f": ["u"], "g": ["v"]}, "reactive")
    net.quarantine_flow("f", "reactive", CONST)
    assert not net.teardown_quarantine()
    net.release_flow("f", CONST)
    assert net.teardown_quarantine()
    assert net.gateways[QUARANTINE].lifecycle is Lifecycle.NOT_DEPLOYED
    assert net.mode_for("g") is ReassignmentMode.REACTIVE


def test_replicated_mode_keeps_contexts_after_release():
    net = network_for_mode({"f": ["u"]}, "proactive-replicated")
    net.quarantine_flow("f", "proactive-replicated", CONST)
    net.release_flow("f", CONST)
    assert net.mode_for("f") is ReassignmentMode.PROACTIVE_REPLICATED
    assert not net.teardown_quarantine()


def test_trace_jsonl():
    net = network_for_mode({"f": ["u"]}, "reactive")
    net.quarantine_flow("f", "reactive", CONST)
    lines = trace_to_jsonl(net.trace).strip().splitlines()
    first = json.loads(lines[0])
    assert {"t_ms", "entity", "event"} <= set(first)
    times = [json.loads(line)["t_ms"] for line in lines]
    assert times == sorted(times)


def test_repeat_reassignment_constant():
    stats = repeat_reassignment("reactive", CONST, 5)
    assert stats["total"].mean == 989.69
    assert stats["total"].maximum == 989.69
    assert stats["release"].mean == 3.98
    assert set(stats) == {"total", "release", "deploy", "initialize", "replicate", "reconfigure"}
    with pytest.raises(ValueError):
        repeat_reassignment("reactive", CONST, 0)


def test_repeat_reassignment_uniform_bounds():
    stats = repeat_reassignment("proactive-deployed", CONST.with_sampling("uniform"), 2000, np.random.default_rng(2))
    assert stats["total"].maximum <= 47.65
    assert stats["total"].minimum >= 32.91 + 0.61


@pytest.mark.parametrize("seed", range(40))
def test_random_sequences_keep_invariants(seed):
    violations, _, peak_ok = random_sequence(np.random.default_rng(seed))
    assert violations == []
    assert peak_ok


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**63))
def test_random_sequences_property(seed):
    violations, _, peak_ok = random_sequence(np.random.default_rng(seed), max_ops=20)
    assert violations == [] and peak_ok


def _loop_populations():
    params = ScenarioParams(n=10, p_m=0.0)
    bad = FlowPopulation(tuple(Device(i % 4, i == 3, 0.0) for i in range(10)))
    good = FlowPopulation(tuple(Device(i % 4, False, 0.0) for i in range(10)))
    return params, [bad, good, good]


@pytest.mark.parametrize("mode", ["reactive", "proactive-deployed", "proactive-replicated"])
def test_closed_loop_blocks_malicious_device(mode):
    params, pops = _loop_populations()
    res = run_closed_loop(params, mode, CONST, duration=5, populations=pops, check_invariants=True, rng=np.random.default_rng(0))
    assert res.continuity_violations == []
    summary = res.summary()
    assert summary["malicious"] == 1
    assert summary["malicious_blocked"] == 1
    assert summary["quarantine_events"] == 1  # blocked device no longer inflates the flow
    assert summary["legit_quarantined"] == 9
    expected_dwell = {"reactive": 989.69, "proactive-deployed": 37.90, "proactive-replicated": 3.98}[mode] + 3.98
    assert summary["legit_dwell_max_ms"] == pytest.approx(expected_dwell)
    assert res.time_to_block()[0] == pytest.approx(expected_dwell)


def test_closed_loop_reactive_tears_gateway_down():
    params, pops = _loop_populations()
    res = run_closed_loop(params, "reactive", CONST, duration=3, populations=pops)
    states = [e.detail["state"] for e in res.trace if e.event == "lifecycle"]
    assert states == ["deploying", "initializing", "ready", "not_deployed"]


def test_closed_loop_inspection_delay_and_noise():
    params, pops = _loop_populations()
    res = run_closed_loop(params, "proactive-replicated", CONST, PerfectClassifier(delay_ms=250), duration=3, populations=pops)
    assert res.time_to_block()[0] == pytest.approx(3.98 + 250 + 3.98)
    noisy = run_closed_loop(
        ScenarioParams(n=20, p_m=0.05), "proactive-replicated", CONST, NoisyClassifier(0.8), duration=4,
        flows=6, rng=np.random.default_rng(3), check_invariants=True,
    )
    assert noisy.continuity_violations == []


def test_closed_loop_drops_when_table_full():
    params, pops = _loop_populations()
    res = run_closed_loop(params, "proactive-replicated", CONST, duration=3, populations=pops, capacity=3, check_invariants=True)
    assert res.dropped_actions >= 1
    assert res.continuity_violations == []
    assert res.summary()["peak_rules"] <= 3


def test_closed_loop_deterministic():
    a = run_closed_loop(ScenarioParams(n=30, p_m=0.05), "reactive", CONST.with_sampling("uniform"), duration=3, flows=5, rng=np.random.default_rng(1))
    b = run_closed_loop(ScenarioParams(n=30, p_m=0.05), "reactive", CONST.with_sampling("uniform"), duration=3, flows=5, rng=np.random.default_rng(1))
    assert trace_to_jsonl(a.trace) == trace_to_jsonl(b.trace)
