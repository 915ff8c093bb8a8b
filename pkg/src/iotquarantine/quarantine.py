"""Discrete-event emulation of moving aggregated flows between slices.

Moving a flow into the quarantine slice goes through up to four sequential
stages:

1. ``deploy``: start the quarantine S/P-GW container,
2. ``initialize``: bring the gateway application up,
3. ``replicate``: copy the flow's UE contexts to the quarantine gateway,
4. ``reconfigure``: repoint the switch rule at the quarantine gateway.

A reactive move runs all four, a move onto a pre-deployed gateway runs 3-4
and a move onto a gateway that already mirrors every context runs only 4.
Releasing a flow back to the serving slice is a single reconfiguration.

Time is virtual (milliseconds).  The rule swap is atomic at one timestamp.
"""

from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from typing import Any, Callable, Generator, Hashable, Iterable, Mapping, Protocol, Sequence

import numpy as np

from .catalog import exact
from .detection import exceeds
from .errors import CapacityError, PreconditionError
from .traffic import FlowPopulation, ScenarioParams, _exact_period, _frames_exact, sample_population

DEFAULT_RULE_CAPACITY = 4000
SERVING = "iot"
QUARANTINE = "quarantine"


class Lifecycle(str, Enum):
    NOT_DEPLOYED = "not_deployed"
    DEPLOYING = "deploying"
    INITIALIZING = "initializing"
    READY = "ready"


class ReassignmentMode(str, Enum):
    REACTIVE = "reactive"
    PROACTIVE_DEPLOYED = "proactive-deployed"
    PROACTIVE_REPLICATED = "proactive-replicated"


STAGES = ("deploy", "initialize", "replicate", "reconfigure")
MODE_STAGES = {
    ReassignmentMode.REACTIVE: STAGES,
    ReassignmentMode.PROACTIVE_DEPLOYED: ("replicate", "reconfigure"),
    ReassignmentMode.PROACTIVE_REPLICATED: ("reconfigure",),
}
SAMPLING_MODES = ("constant", "uniform", "triangular", "max", "min")


@dataclass(frozen=True)
class StageTiming:
    """Summary statistics of one stage duration, ms."""

    mean: float
    median: float
    minimum: float
    maximum: float
    p95: float

    def __post_init__(self) -> None:
        if not self.minimum <= self.median <= self.maximum:
            raise ValueError("need minimum <= median <= maximum")
        if not self.minimum <= self.mean <= self.maximum:
            raise ValueError("need minimum <= mean <= maximum")

    def sample(self, sampling: str, rng: np.random.Generator | None) -> float:
        if sampling == "constant":
            return self.mean
        if sampling == "max":
            return self.maximum
        if sampling == "min":
            return self.minimum
        if rng is None:
            raise ValueError(f"{sampling!r} sampling needs a random generator")
        if sampling == "uniform":
            return float(rng.uniform(self.minimum, self.maximum))
        if sampling == "triangular":
            if self.minimum == self.maximum:
                return self.minimum
            return float(rng.triangular(self.minimum, self.median, self.maximum))
        raise ValueError(f"unknown sampling mode {sampling!r}; choose from {', '.join(SAMPLING_MODES)}")


# measured on the 4G testbed, 100 executions
TESTBED_TOTAL = StageTiming(989.69, 992.20, 918.32, 1057.86, 1027.05)
TESTBED_STAGES = {
    "deploy": StageTiming(570.11, 571.48, 505.27, 630.98, 606.04),
    "initialize": StageTiming(381.68, 381.46, 361.89, 397.13, 392.32),
    "replicate": StageTiming(33.92, 33.71, 32.91, 37.67, 35.38),
    "reconfigure": StageTiming(3.98, 3.84, 0.61, 9.98, 6.03),
}


@dataclass(frozen=True)
class ReassignmentTimings:
    stages: Mapping[str, StageTiming] = field(default_factory=lambda: dict(TESTBED_STAGES))
    sampling: str = "constant"

    def __post_init__(self) -> None:
        missing = set(STAGES) - set(self.stages)
        if missing:
            raise ValueError(f"missing stage timings: {sorted(missing)}")
        if self.sampling not in SAMPLING_MODES:
            raise ValueError(f"unknown sampling mode {self.sampling!r}")

    def sample(self, stage: str, rng: np.random.Generator | None) -> float:
        return self.stages[stage].sample(self.sampling, rng)

    def with_sampling(self, sampling: str) -> ReassignmentTimings:
        return ReassignmentTimings(self.stages, sampling)


@dataclass
class UeContext:
    ue_id: Hashable
    flow_id: Hashable
    current_slice: str
    context_present_on: set[str] = field(default_factory=set)


@dataclass
class GatewayNode:
    gateway_id: str
    slice_id: str
    lifecycle: Lifecycle = Lifecycle.NOT_DEPLOYED
    held_contexts: set = field(default_factory=set)


class FlowRuleTable:
    """Switch rules: ``("flow", id) -> gateway`` and ``("block", ue) -> None`` (drop)."""

    def __init__(self, capacity: int = DEFAULT_RULE_CAPACITY):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.rules: dict[tuple[str, Hashable], str | None] = {}

    def __len__(self) -> int:
        return len(self.rules)

    def free(self) -> int:
        return self.capacity - len(self.rules)

    def install(self, match: tuple[str, Hashable], target: str | None) -> None:
        if match not in self.rules and len(self.rules) >= self.capacity:
            raise CapacityError(f"flow table full ({self.capacity} rules), cannot install {match}")
        self.rules[match] = target

    def remove(self, match: tuple[str, Hashable]) -> None:
        self.rules.pop(match, None)

    def target(self, flow_id: Hashable) -> str | None:
        return self.rules.get(("flow", flow_id))


@dataclass(frozen=True)
class TraceEvent:
    t_ms: float
    entity: str
    event: str
    detail: Mapping[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {"t_ms": self.t_ms, "entity": self.entity, "event": self.event, **self.detail}


def trace_to_jsonl(events: Iterable[TraceEvent]) -> str:
    return "".join(json.dumps(e.to_dict(), default=str) + "\n" for e in events)


Steps = Generator[float, None, float]


class SliceNetwork:
    """Serving and quarantine gateways, UE contexts and the switch rule table."""

    def __init__(
        self,
        flows: Mapping[Hashable, Sequence[Hashable]],
        quarantine_lifecycle: Lifecycle = Lifecycle.NOT_DEPLOYED,
        replicate_contexts: bool = False,
        capacity: int = DEFAULT_RULE_CAPACITY,
    ):
        if replicate_contexts and quarantine_lifecycle is not Lifecycle.READY:
            raise ValueError("contexts can only be mirrored onto a ready gateway")
        self.clock = 0.0
        self.trace: list[TraceEvent] = []
        self.rules = FlowRuleTable(capacity)
        self.replicate_contexts = replicate_contexts
        self.gateways = {
            SERVING: GatewayNode("spgw-iot", SERVING, Lifecycle.READY),
            QUARANTINE: GatewayNode("spgw-quarantine", QUARANTINE, quarantine_lifecycle),
        }
        self.flows: dict[Hashable, list[Hashable]] = {}
        self.contexts: dict[Hashable, UeContext] = {}
        self.blocked: set[Hashable] = set()
        self.busy: set[Hashable] = set()  # flows with a reassignment in progress
        self.occupancy: list[tuple[float, int]] = []
        for flow_id, ues in flows.items():
            self.add_flow(flow_id, ues)

    # -- bookkeeping ------------------------------------------------------------

    def _log(self, entity: str, event: str, **detail: Any) -> TraceEvent:
        ev = TraceEvent(self.clock, entity, event, detail)
        self.trace.append(ev)
        return ev

    def _record_occupancy(self) -> None:
        self.occupancy.append((self.clock, len(self.rules)))

    def add_flow(self, flow_id: Hashable, ues: Sequence[Hashable]) -> None:
        if flow_id in self.flows:
            raise ValueError(f"flow {flow_id!r} already exists")
        self.rules.install(("flow", flow_id), SERVING)
        self.flows[flow_id] = list(ues)
        serving = self.gateways[SERVING]
        quarantine = self.gateways[QUARANTINE]
        for ue in ues:
            ctx = UeContext(ue, flow_id, SERVING, {SERVING})
            serving.held_contexts.add(ue)
            if self.replicate_contexts:
                quarantine.held_contexts.add(ue)
                ctx.context_present_on.add(QUARANTINE)
            self.contexts[ue] = ctx
        self._log(f"flow:{flow_id}", "flow_added", ues=len(ues))
        self._record_occupancy()

    def slice_of(self, flow_id: Hashable) -> str | None:
        return self.rules.target(flow_id)

    def active_ues(self, flow_id: Hashable) -> list[Hashable]:
        return [ue for ue in self.flows[flow_id] if ue not in self.blocked]

    def in_quarantine(self) -> list[Hashable]:
        return [f for f in self.flows if self.slice_of(f) == QUARANTINE]

    def continuity_violations(self) -> list[str]:
        """Every routed flow must reach a ready gateway holding all of its live UE contexts."""
        problems = []
        for flow_id in self.flows:
            target = self.slice_of(flow_id)
            if target is None:
                problems.append(f"flow {flow_id!r} has no rule")
                continue
            gw = self.gateways[target]
            if gw.lifecycle is not Lifecycle.READY:
                problems.append(f"flow {flow_id!r} routed to {gw.gateway_id} in state {gw.lifecycle.value}")
            missing = [ue for ue in self.active_ues(flow_id) if ue not in gw.held_contexts]
            if missing:
                problems.append(f"flow {flow_id!r}: {gw.gateway_id} lacks contexts {missing}")
        if len(self.rules) > self.rules.capacity:
            problems.append(f"rule table holds {len(self.rules)} > {self.rules.capacity}")
        for gw in self.gateways.values():
            if gw.held_contexts and gw.lifecycle is not Lifecycle.READY:
                problems.append(f"{gw.gateway_id} holds contexts while {gw.lifecycle.value}")
        return problems

    def _required_state(self, flow_id: Hashable, mode: ReassignmentMode) -> None:
        gw = self.gateways[QUARANTINE]
        ues = self.active_ues(flow_id)
        if mode is ReassignmentMode.REACTIVE:
            ok = gw.lifecycle is Lifecycle.NOT_DEPLOYED
            want = "not deployed"
        elif mode is ReassignmentMode.PROACTIVE_DEPLOYED:
            ok = gw.lifecycle is Lifecycle.READY and not any(ue in gw.held_contexts for ue in ues)
            want = "ready without the flow's contexts"
        else:
            ok = gw.lifecycle is Lifecycle.READY and all(ue in gw.held_contexts for ue in ues)
            want = "ready with the flow's contexts replicated"
        if not ok:
            raise PreconditionError(f"{mode.value} reassignment needs the quarantine gateway {want}")

    def mode_for(self, flow_id: Hashable) -> ReassignmentMode:
        """Cheapest mode consistent with the current quarantine gateway state."""
        gw = self.gateways[QUARANTINE]
        if gw.lifecycle is Lifecycle.NOT_DEPLOYED:
            return ReassignmentMode.REACTIVE
        if all(ue in gw.held_contexts for ue in self.active_ues(flow_id)):
            return ReassignmentMode.PROACTIVE_REPLICATED
        return ReassignmentMode.PROACTIVE_DEPLOYED

    # -- step generators: each yields stage durations, the driver advances the clock --

    def quarantine_steps(
        self, flow_id: Hashable, mode: ReassignmentMode, timings: ReassignmentTimings, rng: np.random.Generator | None
    ) -> Steps:
        mode = ReassignmentMode(mode)
        if flow_id not in self.flows:
            raise KeyError(flow_id)
        if self.slice_of(flow_id) != SERVING:
            raise PreconditionError(f"flow {flow_id!r} is not in the serving slice")
        self._required_state(flow_id, mode)
        if ("flow", flow_id) not in self.rules.rules and self.rules.free() < 1:
            raise CapacityError("no room for the redirect rule")
        gw = self.gateways[QUARANTINE]
        entity = f"flow:{flow_id}"
        self.busy.add(flow_id)
        self._log(entity, "reassign_start", mode=mode.value, to=QUARANTINE)
        total = Fraction(0)
        try:
            for stage in MODE_STAGES[mode]:
                d = timings.sample(stage, rng)
                self._log(entity, "stage_start", stage=stage)
                if stage == "deploy":
                    gw.lifecycle = Lifecycle.DEPLOYING
                    self._log(gw.gateway_id, "lifecycle", state=gw.lifecycle.value)
                yield d
                total += exact(d)
                if stage == "deploy":
                    gw.lifecycle = Lifecycle.INITIALIZING
                    self._log(gw.gateway_id, "lifecycle", state=gw.lifecycle.value)
                elif stage == "initialize":
                    gw.lifecycle = Lifecycle.READY
                    self._log(gw.gateway_id, "lifecycle", state=gw.lifecycle.value)
                elif stage == "replicate":
                    for ue in self.active_ues(flow_id):
                        gw.held_contexts.add(ue)
                        self.contexts[ue].context_present_on.add(QUARANTINE)
                    self._log(gw.gateway_id, "contexts_replicated", flow=flow_id)
                else:
                    self.rules.install(("flow", flow_id), QUARANTINE)
                    for ue in self.flows[flow_id]:
                        self.contexts[ue].current_slice = QUARANTINE
                    self._log("switch", "rule_updated", flow=flow_id, target=QUARANTINE)
                    self._record_occupancy()
                self._log(entity, "stage_end", stage=stage, duration_ms=d)
        finally:
            self.busy.discard(flow_id)
        total = float(total)
        self._log(entity, "reassign_done", latency_ms=total)
        return total

    def release_steps(
        self,
        flow_id: Hashable,
        timings: ReassignmentTimings,
        rng: np.random.Generator | None,
        block: Sequence[Hashable] = (),
    ) -> Steps:
        """Point the flow back at the serving gateway, dropping ``block`` UEs in the same update."""
        if self.slice_of(flow_id) != QUARANTINE:
            raise PreconditionError(f"flow {flow_id!r} is not in quarantine")
        serving = self.gateways[SERVING]
        ues = [ue for ue in self.active_ues(flow_id) if ue not in set(block)]
        if serving.lifecycle is not Lifecycle.READY or any(ue not in serving.held_contexts for ue in ues):
            raise PreconditionError("serving gateway lacks the flow's contexts")
        new_blocks = [ue for ue in block if ("block", ue) not in self.rules.rules]
        if len(new_blocks) > self.rules.free():
            raise CapacityError(f"{len(new_blocks)} drop rules needed, {self.rules.free()} free")
        entity = f"flow:{flow_id}"
        self.busy.add(flow_id)
        self._log(entity, "release_start", blocked=len(new_blocks))
        d = timings.sample("reconfigure", rng)
        self._log(entity, "stage_start", stage="reconfigure")
        try:
            yield d
        finally:
            self.busy.discard(flow_id)
        for ue in new_blocks:
            self.rules.install(("block", ue), None)
            self.blocked.add(ue)
        self.rules.install(("flow", flow_id), SERVING)
        for ue in self.flows[flow_id]:
            self.contexts[ue].current_slice = SERVING
        self._log("switch", "rule_updated", flow=flow_id, target=SERVING, dropped=len(new_blocks))
        self._record_occupancy()
        if not self.replicate_contexts:
            quarantine = self.gateways[QUARANTINE]
            for ue in self.flows[flow_id]:
                quarantine.held_contexts.discard(ue)
                self.contexts[ue].context_present_on.discard(QUARANTINE)
        self._log(entity, "stage_end", stage="reconfigure", duration_ms=d)
        self._log(entity, "release_done", latency_ms=d)
        return d

    def teardown_quarantine(self) -> bool:
        """Remove an idle reactively deployed quarantine gateway."""
        gw = self.gateways[QUARANTINE]
        if self.replicate_contexts or gw.lifecycle is not Lifecycle.READY or self.in_quarantine() or self.busy:
            return False
        gw.held_contexts.clear()
        for ctx in self.contexts.values():
            ctx.context_present_on.discard(QUARANTINE)
        gw.lifecycle = Lifecycle.NOT_DEPLOYED
        self._log(gw.gateway_id, "lifecycle", state=gw.lifecycle.value)
        return True

    # -- synchronous drivers ------------------------------------------------------

    def _drive(self, steps: Steps, on_step: Callable[[], None] | None = None) -> tuple[list[TraceEvent], float]:
        start = len(self.trace)
        try:
            while True:
                self.clock += next(steps)
                if on_step:
                    on_step()
        except StopIteration as stop:
            return self.trace[start:], stop.value

    def quarantine_flow(
        self,
        flow_id: Hashable,
        mode: ReassignmentMode | str,
        timings: ReassignmentTimings,
        rng: np.random.Generator | None = None,
    ) -> tuple[list[TraceEvent], float]:
        return self._drive(self.quarantine_steps(flow_id, ReassignmentMode(mode), timings, rng))

    def release_flow(
        self,
        flow_id: Hashable,
        timings: ReassignmentTimings,
        rng: np.random.Generator | None = None,
        block: Sequence[Hashable] = (),
    ) -> tuple[list[TraceEvent], float]:
        return self._drive(self.release_steps(flow_id, timings, rng, block))


def network_for_mode(
    flows: Mapping[Hashable, Sequence[Hashable]], mode: ReassignmentMode | str, capacity: int = DEFAULT_RULE_CAPACITY
) -> SliceNetwork:
    """A network whose quarantine gateway is in the state ``mode`` expects."""
    mode = ReassignmentMode(mode)
    if mode is ReassignmentMode.REACTIVE:
        return SliceNetwork(flows, Lifecycle.NOT_DEPLOYED, False, capacity)
    return SliceNetwork(flows, Lifecycle.READY, mode is ReassignmentMode.PROACTIVE_REPLICATED, capacity)


def stage_ordering_ok(events: Sequence[TraceEvent]) -> bool:
    """Stages of one reassignment run back to back in the canonical order."""
    last_end = -math.inf
    order = []
    for ev in events:
        if ev.event == "stage_start":
            if ev.t_ms < last_end:
                return False
            order.append(ev.detail["stage"])
        elif ev.event == "stage_end":
            last_end = ev.t_ms
    return order == [s for s in STAGES if s in order]


# -- repeated single-UE reassignment --------------------------------------------


@dataclass(frozen=True)
class LatencyStats:
    mean: float
    median: float
    minimum: float
    maximum: float
    p95: float

    @classmethod
    def of(cls, values: Sequence[float]) -> LatencyStats:
        a = np.asarray(values, dtype=np.float64)
        mean = float(sum(map(Fraction, values)) / len(values))  # correctly rounded
        return cls(mean, float(np.median(a)), float(a.min()), float(a.max()), float(np.percentile(a, 95)))


def repeat_reassignment(
    mode: ReassignmentMode | str, timings: ReassignmentTimings, reps: int, rng: np.random.Generator | None = None
) -> dict[str, LatencyStats]:
    """Move one UE into quarantine ``reps`` times from a fresh network, then back.

    Keys: ``total``, each executed stage, and ``release``.
    """
    mode = ReassignmentMode(mode)
    if reps < 1:
        raise ValueError("reps must be >= 1")
    samples: dict[str, list[float]] = {"total": [], "release": []}
    for stage in MODE_STAGES[mode]:
        samples[stage] = []
    for _ in range(reps):
        net = network_for_mode({"flow-0": ["ue-0"]}, mode)
        events, total = net.quarantine_flow("flow-0", mode, timings, rng)
        samples["total"].append(total)
        for ev in events:
            if ev.event == "stage_end":
                samples[ev.detail["stage"]].append(ev.detail["duration_ms"])
        _, back = net.release_flow("flow-0", timings, rng)
        samples["release"].append(back)
    return {k: LatencyStats.of(v) for k, v in samples.items()}


# -- closed loop ------------------------------------------------------------------


class SecondStage(Protocol):
    """Per-device inspection inside the quarantine slice."""

    delay_ms: float

    def classify(self, truth: Mapping[Hashable, bool], rng: np.random.Generator) -> dict[Hashable, bool]: ...


@dataclass
class PerfectClassifier:
    delay_ms: float = 0.0

    def classify(self, truth, rng):
        return dict(truth)


@dataclass
class NoisyClassifier:
    """Labels each device correctly with probability ``accuracy``."""

    accuracy: float = 0.95
    delay_ms: float = 0.0

    def classify(self, truth, rng):
        return {ue: (m if rng.random() < self.accuracy else not m) for ue, m in truth.items()}


@dataclass
class DeviceRecord:
    ue_id: Hashable
    flow_id: Hashable
    malicious: bool
    flagged_at: float | None = None
    released_at: float | None = None
    blocked_at: float | None = None

    @property
    def quarantine_dwell(self) -> float | None:
        if self.flagged_at is None or self.released_at is None:
            return None
        return self.released_at - self.flagged_at

    @property
    def time_to_block(self) -> float | None:
        if self.flagged_at is None or self.blocked_at is None:
            return None
        return self.blocked_at - self.flagged_at


@dataclass
class ClosedLoopResult:
    devices: list[DeviceRecord]
    occupancy: list[tuple[float, int]]
    trace: list[TraceEvent]
    dropped_actions: int
    quarantine_events: int
    continuity_violations: list[str]

    def legit_dwell(self) -> list[float]:
        return [d.quarantine_dwell for d in self.devices if not d.malicious and d.quarantine_dwell is not None]

    def time_to_block(self) -> list[float]:
        return [d.time_to_block for d in self.devices if d.malicious and d.time_to_block is not None]

    def summary(self) -> dict[str, Any]:
        dwell = self.legit_dwell()
        ttb = self.time_to_block()
        mal = [d for d in self.devices if d.malicious]
        return {
            "devices": len(self.devices),
            "malicious": len(mal),
            "malicious_blocked": sum(d.blocked_at is not None for d in mal),
            "legit_quarantined": len(dwell),
            "legit_dwell_mean_ms": float(np.mean(dwell)) if dwell else 0.0,
            "legit_dwell_max_ms": float(np.max(dwell)) if dwell else 0.0,
            "time_to_block_mean_ms": float(np.mean(ttb)) if ttb else None,
            "time_to_block_max_ms": float(np.max(ttb)) if ttb else None,
            "quarantine_events": self.quarantine_events,
            "dropped_actions": self.dropped_actions,
            "peak_rules": max((o for _, o in self.occupancy), default=0),
            "continuity_violations": len(self.continuity_violations),
        }


def _window_bits(pop: FlowPopulation, params: ScenarioParams, skip: set[int], start: Fraction, end: Fraction):
    """Measured and expected bits of the live devices over ``[start, end)`` ms."""
    measured = Fraction(0)
    expected = Fraction(0)
    span = (end - start) / 1000
    for idx, device in enumerate(pop.devices):
        if idx in skip:
            continue
        spec = params.catalog.types[device.type_index]
        period = _exact_period(spec.transmission_period, device.malicious, params.f_m)
        phase = Fraction(device.phase)
        frames = _frames_exact(period, phase, end) - (_frames_exact(period, phase, start) if start > 0 else 0)
        measured += frames * spec.frame_bits
        expected += spec.exact_rate * span
    return float(measured), float(expected)


def run_closed_loop(
    scenario: ScenarioParams,
    mode: ReassignmentMode | str,
    timings: ReassignmentTimings,
    second_stage: SecondStage | None = None,
    duration: float = 10.0,
    rng: np.random.Generator | None = None,
    flows: int = 10,
    capacity: int = DEFAULT_RULE_CAPACITY,
    populations: Sequence[FlowPopulation] | None = None,
    check_invariants: bool = False,
) -> ClosedLoopResult:
    """Sample every flow each ``s_p``, quarantine flagged flows, inspect, block or release.

    ``duration`` is in seconds.  Reassignments are executed one at a time in
    request order by a single controller.  A flagged flow in reactive mode
    deploys the quarantine gateway only if it is not already up; the gateway
    is removed again once no flow is left in quarantine.  If the drop rules
    for a flow's malicious devices do not fit in the table, the action is
    recorded as dropped and the flow stays quarantined.
    """
    rng = rng if rng is not None else np.random.default_rng()
    policy = ReassignmentMode(mode)
    second_stage = second_stage or PerfectClassifier()
    if populations is None:
        populations = [sample_population(scenario, rng) for _ in range(flows)]
    flow_ues = {
        f"flow-{f}": [f"ue-{f}-{i}" for i in range(len(pop))] for f, pop in enumerate(populations)
    }
    records = {
        ue: DeviceRecord(ue, fid, pop.devices[i].malicious)
        for (fid, ues), pop in zip(flow_ues.items(), populations)
        for i, ue in enumerate(ues)
    }
    pop_of = dict(zip(flow_ues, populations))
    net = network_for_mode(flow_ues, policy, capacity)

    end_ms = duration * 1000.0
    window = scenario.window_ms
    queue: list[tuple[float, int, Callable[[], None]]] = []
    counter = 0
    pending: list[tuple[str, Hashable, Any]] = []  # controller FIFO
    worker_busy = False
    dropped = 0
    quarantined = 0
    flagged_at: dict[Hashable, float] = {}
    violations: list[str] = []

    def schedule(t: float, fn: Callable[[], None]) -> None:
        nonlocal counter
        counter += 1
        heapq.heappush(queue, (t, counter, fn))

    def check() -> None:
        if check_invariants:
            violations.extend(f"t={net.clock}: {p}" for p in net.continuity_violations())

    def run_steps(steps: Steps, first: float, done: Callable[[], None]) -> None:
        def advance() -> None:
            try:
                d = next(steps)
            except StopIteration:
                check()
                done()
                return
            check()
            schedule(net.clock + d, advance)

        check()
        schedule(net.clock + first, advance)

    def start_next() -> None:
        nonlocal worker_busy, dropped, quarantined
        while pending and not worker_busy:
            kind, fid, arg = pending.pop(0)
            if kind == "quarantine":
                if net.slice_of(fid) != SERVING:
                    continue
                steps = net.quarantine_steps(fid, net.mode_for(fid), timings, rng)
                first = next(steps)
                quarantined += 1
                worker_busy = True
                run_steps(steps, first, lambda fid=fid: on_quarantined(fid))
            else:
                block = arg
                steps = net.release_steps(fid, timings, rng, block)
                try:
                    first = next(steps)  # generator checks run on the first step
                except CapacityError as exc:
                    dropped += 1
                    net._log(f"flow:{fid}", "action_dropped", reason=str(exc))
                    continue
                worker_busy = True
                run_steps(steps, first, lambda fid=fid, block=tuple(block): on_released(fid, block))

    def finish_action() -> None:
        nonlocal worker_busy
        worker_busy = False
        if policy is ReassignmentMode.REACTIVE and not pending:
            net.teardown_quarantine()
            check()
        start_next()

    def on_quarantined(fid: Hashable) -> None:
        schedule(net.clock + second_stage.delay_ms, lambda: on_inspected(fid))
        finish_action()

    def on_inspected(fid: Hashable) -> None:
        truth = {ue: records[ue].malicious for ue in net.active_ues(fid)}
        verdict = second_stage.classify(truth, rng)
        block = [ue for ue, bad in verdict.items() if bad]
        net._log(f"flow:{fid}", "inspected", malicious=len(block))
        pending.append(("release", fid, block))
        start_next()

    def on_released(fid: Hashable, block: tuple) -> None:
        for ue in net.flows[fid]:
            rec = records[ue]
            if ue in block:
                rec.blocked_at = net.clock
            elif rec.flagged_at is not None and rec.released_at is None and rec.blocked_at is None:
                rec.released_at = net.clock
        finish_action()

    def tick(t_ms: float, k: int) -> None:
        start = window * (k - 1)
        stop = window * k
        for fid, pop in pop_of.items():
            if net.slice_of(fid) != SERVING or fid in net.busy or any(p[1] == fid for p in pending):
                continue
            skip = {i for i, ue in enumerate(flow_ues[fid]) if ue in net.blocked}
            if len(skip) == len(pop):
                continue
            measured, expected = _window_bits(pop, scenario, skip, start, stop)
            if bool(exceeds(measured, expected, scenario.t_r)):
                net._log(f"flow:{fid}", "flagged", ratio=measured / expected)
                for ue in net.active_ues(fid):
                    rec = records[ue]
                    rec.flagged_at = t_ms
                    rec.released_at = None
                pending.append(("quarantine", fid, None))
        start_next()
        nxt = float(window * (k + 1))
        if nxt <= end_ms:
            schedule(nxt, lambda: tick(nxt, k + 1))

    first = float(window)
    if first <= end_ms:
        schedule(first, lambda: tick(first, 1))
    check()
    while queue:
        t, _, fn = heapq.heappop(queue)
        if t > end_ms:
            break
        net.clock = t
        fn()

    return ClosedLoopResult(
        devices=list(records.values()),
        occupancy=list(net.occupancy),
        trace=list(net.trace),
        dropped_actions=dropped,
        quarantine_events=quarantined,
        continuity_violations=violations,
    )
