"""Repeated independent flow rounds and parameter sweeps.

Rounds are drawn in fixed-size blocks.  Block ``b`` of an experiment with
seed ``s`` always uses the stream ``SeedSequence(s, spawn_key=(b,))``, so the
result depends only on the seed and the round count, never on how many
worker processes shared the blocks.
"""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from typing import Any, Iterable, Sequence

import numpy as np

from . import kernels
from .detection import DetectionVerdict, classify_flow, exceeds
from .traffic import ClassTable, FlowPopulation, ScenarioParams, device_classes, draw_devices, measure_flow, sample_population

DEFAULT_ROUNDS = 100_000
DEFAULT_SEED = 20200905
BLOCK_ROUNDS = 2048
SWEEPABLE = ("n", "p_m", "f_m", "t_r", "s_p")


@dataclass(frozen=True)
class ExperimentSpec:
    params: ScenarioParams = field(default_factory=ScenarioParams)
    rounds: int = DEFAULT_ROUNDS
    seed: int = DEFAULT_SEED

    def __post_init__(self) -> None:
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")


def _zeros(k: int) -> list[int]:
    return [0] * k


@dataclass
class Tally:
    """Integer counters accumulated over rounds; merging is plain addition."""

    k: int
    rounds: int = 0
    flagged: int = 0
    rounds_with_malicious: int = 0
    flagged_with_malicious: int = 0
    malicious_total: int = 0
    malicious_quarantined: int = 0
    legit_total: int = 0
    legit_quarantined: int = 0
    legit_in_malicious_flows: int = 0
    # second moments of per-round device counts, for cluster standard errors
    malicious_sq: int = 0
    malicious_sq_flagged: int = 0
    legit_sq: int = 0
    legit_sq_flagged: int = 0
    by_type_total: list[int] = field(default_factory=list)
    by_type_quarantined: list[int] = field(default_factory=list)
    by_type_sq: list[int] = field(default_factory=list)
    by_type_sq_flagged: list[int] = field(default_factory=list)
    solo_total: list[int] = field(default_factory=list)
    solo_detected: list[int] = field(default_factory=list)

    def __post_init__(self) -> None:
        for name in ("by_type_total", "by_type_quarantined", "by_type_sq", "by_type_sq_flagged", "solo_total", "solo_detected"):
            if not getattr(self, name):
                setattr(self, name, _zeros(self.k))

    def merge(self, other: Tally) -> Tally:
        out = Tally(self.k)
        for f in fields(self):
            if f.name == "k":
                continue
            a, b = getattr(self, f.name), getattr(other, f.name)
            setattr(out, f.name, [x + y for x, y in zip(a, b)] if isinstance(a, list) else a + b)
        return out

    def add_block(self, counts: np.ndarray, flagged: np.ndarray) -> None:
        """Fold one block of rounds in.  ``counts`` is (rounds, 2k) devices per class."""
        k = self.k
        legit_by_type = counts[:, :k]
        mal_by_type = counts[:, k:]
        mal = mal_by_type.sum(axis=1)
        legit = legit_by_type.sum(axis=1)
        has_mal = mal > 0
        f = flagged.astype(np.int64)

        self.rounds += int(counts.shape[0])
        self.flagged += int(f.sum())
        self.rounds_with_malicious += int(has_mal.sum())
        self.flagged_with_malicious += int((f * has_mal).sum())
        self.malicious_total += int(mal.sum())
        self.malicious_quarantined += int((mal * f).sum())
        self.legit_total += int(legit.sum())
        self.legit_quarantined += int((legit * f).sum())
        self.legit_in_malicious_flows += int((legit * has_mal).sum())
        self.malicious_sq += int((mal * mal).sum())
        self.malicious_sq_flagged += int((mal * mal * f).sum())
        self.legit_sq += int((legit * legit).sum())
        self.legit_sq_flagged += int((legit * legit * f).sum())

        solo = mal == 1
        for t in range(k):
            x = mal_by_type[:, t]
            self.by_type_total[t] += int(x.sum())
            self.by_type_quarantined[t] += int((x * f).sum())
            self.by_type_sq[t] += int((x * x).sum())
            self.by_type_sq_flagged[t] += int((x * x * f).sum())
            lone = solo & (x == 1)
            self.solo_total[t] += int(lone.sum())
            self.solo_detected[t] += int((lone & flagged).sum())


def _binomial(successes: int, trials: int) -> tuple[float, float]:
    if trials == 0:
        return math.nan, math.nan
    p = successes / trials
    return p, math.sqrt(p * (1.0 - p) / trials)


def _cluster_ratio(y: int, x: int, x_sq: int, x_sq_flagged: int, rounds: int) -> tuple[float, float]:
    """Ratio ``y/x`` of devices in flagged flows with a between-round standard error.

    Devices sharing a flow share its verdict, so the round is the sampling unit.
    """
    if x == 0:
        return math.nan, math.nan
    r = y / x
    if rounds < 2:
        return r, math.nan
    resid = x_sq_flagged * (1.0 - 2.0 * r) + r * r * x_sq
    mean_x = x / rounds
    return r, math.sqrt(max(resid, 0.0) / (rounds * (rounds - 1))) / mean_x


@dataclass(frozen=True)
class ExperimentMetrics:
    malicious_quarantined_ratio: float
    malicious_quarantined_se: float
    legit_quarantined_ratio: float
    legit_quarantined_se: float
    flagged_flow_ratio: float
    flagged_flow_se: float
    detect_given_malicious: float
    detect_given_malicious_se: float
    legit_quarantined_given_malicious_flow: float
    by_type_recall: tuple[float, ...]
    by_type_recall_se: tuple[float, ...]
    solo_recall: tuple[float, ...]
    solo_recall_se: tuple[float, ...]
    tally: Tally

    SCALARS = (
        "malicious_quarantined_ratio",
        "legit_quarantined_ratio",
        "flagged_flow_ratio",
        "detect_given_malicious",
    )

    @classmethod
    def from_tally(cls, t: Tally) -> ExperimentMetrics:
        mq = _cluster_ratio(t.malicious_quarantined, t.malicious_total, t.malicious_sq, t.malicious_sq_flagged, t.rounds)
        lq = _cluster_ratio(t.legit_quarantined, t.legit_total, t.legit_sq, t.legit_sq_flagged, t.rounds)
        by_type = [
            _cluster_ratio(t.by_type_quarantined[i], t.by_type_total[i], t.by_type_sq[i], t.by_type_sq_flagged[i], t.rounds)
            for i in range(t.k)
        ]
        solo = [_binomial(t.solo_detected[i], t.solo_total[i]) for i in range(t.k)]
        ff = _binomial(t.flagged, t.rounds)
        dgm = _binomial(t.flagged_with_malicious, t.rounds_with_malicious)
        lcm = t.legit_quarantined / t.legit_in_malicious_flows if t.legit_in_malicious_flows else math.nan
        return cls(
            malicious_quarantined_ratio=mq[0],
            malicious_quarantined_se=mq[1],
            legit_quarantined_ratio=lq[0],
            legit_quarantined_se=lq[1],
            flagged_flow_ratio=ff[0],
            flagged_flow_se=ff[1],
            detect_given_malicious=dgm[0],
            detect_given_malicious_se=dgm[1],
            legit_quarantined_given_malicious_flow=lcm,
            by_type_recall=tuple(v for v, _ in by_type),
            by_type_recall_se=tuple(s for _, s in by_type),
            solo_recall=tuple(v for v, _ in solo),
            solo_recall_se=tuple(s for _, s in solo),
            tally=t,
        )

    def se(self, name: str) -> float:
        return getattr(self, {
            "malicious_quarantined_ratio": "malicious_quarantined_se",
            "legit_quarantined_ratio": "legit_quarantined_se",
            "flagged_flow_ratio": "flagged_flow_se",
            "detect_given_malicious": "detect_given_malicious_se",
        }[name])

    def to_dict(self) -> dict[str, Any]:
        t = self.tally
        return {
            "malicious_quarantined_ratio": _json_num(self.malicious_quarantined_ratio),
            "malicious_quarantined_se": _json_num(self.malicious_quarantined_se),
            "legit_quarantined_ratio": _json_num(self.legit_quarantined_ratio),
            "legit_quarantined_se": _json_num(self.legit_quarantined_se),
            "flagged_flow_ratio": _json_num(self.flagged_flow_ratio),
            "flagged_flow_se": _json_num(self.flagged_flow_se),
            "detect_given_malicious": _json_num(self.detect_given_malicious),
            "detect_given_malicious_se": _json_num(self.detect_given_malicious_se),
            "legit_quarantined_given_malicious_flow": _json_num(self.legit_quarantined_given_malicious_flow),
            "by_type_recall": [_json_num(v) for v in self.by_type_recall],
            "by_type_recall_se": [_json_num(v) for v in self.by_type_recall_se],
            "solo_recall": [_json_num(v) for v in self.solo_recall],
            "solo_recall_se": [_json_num(v) for v in self.solo_recall_se],
            "counts": {
                "rounds": t.rounds,
                "flagged_flows": t.flagged,
                "flows_with_malicious": t.rounds_with_malicious,
                "flagged_flows_with_malicious": t.flagged_with_malicious,
                "malicious_devices": t.malicious_total,
                "malicious_quarantined": t.malicious_quarantined,
                "legit_devices": t.legit_total,
                "legit_quarantined": t.legit_quarantined,
                "legit_in_malicious_flows": t.legit_in_malicious_flows,
            },
        }


def _json_num(value: float) -> float | None:
    return None if math.isnan(value) else value


def run_round(params: ScenarioParams, rng: np.random.Generator) -> tuple[FlowPopulation, DetectionVerdict]:
    pop = sample_population(params, rng)
    measured, expected = measure_flow(pop, params)
    return pop, classify_flow(measured, expected, params)


def block_stream(seed: int, block: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(block,))))


def _run_blocks(params: ScenarioParams, seed: int, rounds: int, blocks: Sequence[int]) -> Tally:
    k = len(params.catalog)
    table = ClassTable.build(params)
    tally = Tally(k)
    for b in blocks:
        size = min(BLOCK_ROUNDS, rounds - b * BLOCK_ROUNDS)
        rng = block_stream(seed, b)
        types, malicious, unit_phase = draw_devices(params, rng, size)
        classes = device_classes(types, malicious, k)
        measured, expected, counts = kernels.tally_rounds(
            classes, unit_phase, table.whole, table.frac, table.frame_bits, table.expected_bits, 2 * k
        )
        tally.add_block(counts, exceeds(measured, expected, params.t_r))
    return tally


def run_experiment(spec: ExperimentSpec, workers: int = 1) -> ExperimentMetrics:
    """Aggregate ``spec.rounds`` independent rounds into quarantine metrics."""
    nblocks = -(-spec.rounds // BLOCK_ROUNDS)
    all_blocks = list(range(nblocks))
    if workers <= 1 or nblocks == 1:
        tally = _run_blocks(spec.params, spec.seed, spec.rounds, all_blocks)
    else:
        chunks = [all_blocks[i::workers] for i in range(workers) if all_blocks[i::workers]]
        with ProcessPoolExecutor(max_workers=len(chunks)) as pool:
            parts = list(pool.map(_run_blocks, *zip(*[(spec.params, spec.seed, spec.rounds, c) for c in chunks])))
        tally = parts[0]
        for part in parts[1:]:
            tally = tally.merge(part)
    return ExperimentMetrics.from_tally(tally)


def derive_seed(seed: int, index: int) -> int:
    state = np.random.SeedSequence(seed, spawn_key=(index,)).generate_state(2, dtype=np.uint32)
    return int(state[0]) | (int(state[1]) << 32)


def sweep(
    base: ExperimentSpec,
    parameter: str,
    grid: Iterable[float],
    workers: int = 1,
) -> list[tuple[float, ExperimentMetrics]]:
    """One experiment per grid value; everything else taken from ``base``."""
    if parameter not in SWEEPABLE:
        raise ValueError(f"unknown sweep parameter {parameter!r}; choose from {', '.join(SWEEPABLE)}")
    values = list(grid)
    if not values:
        raise ValueError("sweep grid is empty")
    rows = []
    for index, value in enumerate(values):
        params = base.params.replace(**{parameter: value})
        spec = ExperimentSpec(params, base.rounds, derive_seed(base.seed, index))
        rows.append((value, run_experiment(spec, workers=workers)))
    return rows


CSV_METRICS = (
    ("malicious_quarantined_ratio", "malicious_quarantined_se"),
    ("legit_quarantined_ratio", "legit_quarantined_se"),
    ("flagged_flow_ratio", "flagged_flow_se"),
    ("detect_given_malicious", "detect_given_malicious_se"),
)


def csv_header(parameter: str, k: int, extra: Sequence[str] = ()) -> list[str]:
    cols = list(extra) + [parameter]
    for value, se in CSV_METRICS:
        cols += [value, se]
    cols.append("legit_quarantined_given_malicious_flow")
    for i in range(k):
        cols += [f"recall_type{i}", f"recall_type{i}_se", f"solo_recall_type{i}", f"solo_recall_type{i}_se"]
    return cols


def csv_row(value: float, m: ExperimentMetrics, extra: Sequence[Any] = ()) -> list[Any]:
    row: list[Any] = list(extra) + [value]
    for v, se in CSV_METRICS:
        row += [_fmt(getattr(m, v)), _fmt(getattr(m, se))]
    row.append(_fmt(m.legit_quarantined_given_malicious_flow))
    for i in range(len(m.by_type_recall)):
        row += [_fmt(m.by_type_recall[i]), _fmt(m.by_type_recall_se[i]), _fmt(m.solo_recall[i]), _fmt(m.solo_recall_se[i])]
    return row


def _fmt(x: float) -> str:
    return "" if math.isnan(x) else repr(float(x))


def sweep_to_csv(parameter: str, rows: Sequence[tuple[float, ExperimentMetrics]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    k = rows[0][1].tally.k if rows else 0
    writer.writerow(csv_header(parameter, k))
    for value, metrics in rows:
        writer.writerow(csv_row(value, metrics))
    return buf.getvalue()


def sweep_to_json(parameter: str, rows: Sequence[tuple[float, ExperimentMetrics]]) -> str:
    return json.dumps({"parameter": parameter, "rows": [{"value": v, "metrics": m.to_dict()} for v, m in rows]}, indent=2)
