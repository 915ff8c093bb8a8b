"""Closed-form detection probabilities for aggregated flows.

All rate sums are handled exactly: device rates are expressed as integer
multiples of their greatest common divisor and the distribution of a sum of
``n`` independent device contributions is built by repeated sparse
convolution over that integer lattice.  Threshold comparisons are integer
comparisons on the lattice, so no probability mass is misplaced by
floating-point rounding at a boundary.

Two models are available:

* the *independent* model of :func:`p_detect_general`, in which the total
  legitimate rate of the flow and the malicious excess are drawn
  independently;
* the *joint* model of :func:`brute_force_p_detect`, in which the malicious
  devices are a subset of the same population that defines the legitimate
  rate.  This is what the Monte Carlo simulator does.
"""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass
from fractions import Fraction
from functools import reduce
from typing import Iterable, Sequence

import numpy as np
from scipy import stats

from . import kernels
from .catalog import Catalog, builtin_factory_catalog, exact
from .errors import CapacityError, EnvelopeError
from .traffic import ScenarioParams

DEFAULT_MAX_CELLS = 20_000_000
DEFAULT_RESOLUTION = 1  # bit/s
BRUTE_FORCE_MAX_N = 12
PUBLISHED_ENVELOPE_MAX_N = 500


@dataclass(frozen=True)
class AnalyticScenario:
    n: int = 100
    p_m: float = 0.01
    f_m: float = 100.0
    t_r: float = 1.01
    catalog: Catalog = None  # type: ignore[assignment]

    def __post_init__(self) -> None:
        if self.catalog is None:
            object.__setattr__(self, "catalog", builtin_factory_catalog())
        if int(self.n) != self.n or self.n < 1:
            raise ValueError(f"n must be a positive integer, got {self.n!r}")
        object.__setattr__(self, "n", int(self.n))
        if not 0.0 <= self.p_m <= 1.0:
            raise ValueError("p_m must lie in [0, 1]")
        if not self.f_m >= 1.0:
            raise ValueError("f_m must be >= 1")
        if not self.t_r >= 1.0:
            raise ValueError("the detection formulas assume t_r >= 1 (a clean flow is never flagged)")

    @classmethod
    def from_params(cls, params: ScenarioParams) -> AnalyticScenario:
        return cls(params.n, params.p_m, params.f_m, params.t_r, params.catalog)

    def replace(self, **changes) -> AnalyticScenario:
        values = dict(n=self.n, p_m=self.p_m, f_m=self.f_m, t_r=self.t_r, catalog=self.catalog)
        values.update(changes)
        return AnalyticScenario(**values)

    @property
    def margin_ratio(self) -> Fraction:
        """(t_r - 1) / (f_m - 1): excess needed per unit of legitimate rate."""
        return (exact(self.t_r) - 1) / (exact(self.f_m) - 1)


@dataclass(frozen=True)
class DiscreteDistribution:
    """Probability mass on the lattice ``unit * j`` for ``j = 0 .. len(mass) - 1``."""

    unit: float  # bit/s per lattice step
    mass: np.ndarray

    def total(self) -> float:
        return float(self.mass.sum())

    def as_dict(self, atol: float = 0.0) -> dict[int, float]:
        idx = np.flatnonzero(self.mass > atol)
        return {int(j): float(self.mass[j]) for j in idx}

    def survival(self) -> np.ndarray:
        """``sf[j] = P(X > j)``."""
        tail = np.cumsum(self.mass[::-1])[::-1]
        return np.append(tail[1:], 0.0)

    def cdf(self) -> np.ndarray:
        return np.cumsum(self.mass)


@dataclass(frozen=True)
class RateLattice:
    unit: Fraction  # bit/s
    steps: tuple[int, ...]  # per device type
    quantized: bool


def rate_lattice(catalog: Catalog, resolution: float = DEFAULT_RESOLUTION) -> RateLattice:
    """Integer lattice for the catalog rates.

    Rates that are not whole multiples of ``resolution`` are rounded to the
    nearest multiple (with a warning).  The builtin catalog needs no rounding
    and lands on a unit of 800 bit/s with steps (3, 1000, 150, 30).
    """
    res = exact(resolution)
    multiples = []
    quantized = False
    for spec in catalog.types:
        q = spec.exact_rate / res
        if q.denominator != 1:
            quantized = True
            q = Fraction(round(q))
        multiples.append(int(q))
    if quantized:
        warnings.warn(
            f"device rates quantized to multiples of {float(res)} bit/s for the exact convolution",
            stacklevel=3,
        )
    active = [m for m, p in zip(multiples, catalog.type_probabilities) if p > 0 and m > 0]
    g = reduce(math.gcd, active) if active else 1
    return RateLattice(res * g, tuple(m // g for m in multiples), quantized)


def p_flow_contains_malicious(n: int, p_m: float) -> float:
    """Probability that at least one of ``n`` devices is malicious."""
    if p_m <= 0.0:
        return 0.0
    if p_m >= 1.0:
        return 1.0
    return -math.expm1(n * math.log1p(-p_m))


def _check_cells(n: int, steps: Sequence[int], max_cells: int) -> None:
    cells = n * max(steps, default=0) + 1
    if cells > max_cells:
        raise CapacityError(f"rate distribution needs {cells} cells, limit is {max_cells}")


def _legit_step(lattice: RateLattice, catalog: Catalog):
    return np.asarray(lattice.steps, dtype=np.int64), np.asarray(catalog.type_probabilities, dtype=np.float64), 0.0


def _excess_step(lattice: RateLattice, scenario: AnalyticScenario):
    weights = scenario.p_m * np.asarray(scenario.catalog.type_probabilities, dtype=np.float64)
    return np.asarray(lattice.steps, dtype=np.int64), weights, 1.0 - scenario.p_m


def _n_fold(step, n: int) -> np.ndarray:
    offsets, weights, stay = step
    mass = np.ones(1)
    for _ in range(n):
        mass = kernels.shift_convolve(mass, offsets, weights, stay)
    return mass


def legit_rate_distribution(
    scenario: AnalyticScenario,
    max_cells: int = DEFAULT_MAX_CELLS,
    resolution: float = DEFAULT_RESOLUTION,
) -> DiscreteDistribution:
    """Exact law of the flow's total legitimate rate over multinomial type compositions."""
    lattice = rate_lattice(scenario.catalog, resolution)
    _check_cells(scenario.n, lattice.steps, max_cells)
    return DiscreteDistribution(float(lattice.unit), _n_fold(_legit_step(lattice, scenario.catalog), scenario.n))


def malicious_excess_distribution(
    scenario: AnalyticScenario,
    max_cells: int = DEFAULT_MAX_CELLS,
    resolution: float = DEFAULT_RESOLUTION,
) -> DiscreteDistribution:
    """Exact law of the extra traffic sent by malicious devices.

    Each device independently adds ``r(i) * (f_m - 1)`` with probability
    ``p_m * p_t(i)`` and nothing otherwise.
    """
    lattice = rate_lattice(scenario.catalog, resolution)
    if scenario.f_m == 1.0 or scenario.p_m == 0.0:
        return DiscreteDistribution(0.0 if scenario.f_m == 1.0 else float(lattice.unit) * (scenario.f_m - 1), np.ones(1))
    _check_cells(scenario.n, lattice.steps, max_cells)
    mass = _n_fold(_excess_step(lattice, scenario), scenario.n)
    return DiscreteDistribution(float(lattice.unit) * (scenario.f_m - 1), mass)


def _floor_scaled(values: np.ndarray, num: int, den: int) -> np.ndarray:
    """Exact ``floor(values * num / den)`` for non-negative integer ``values``."""
    if values.size == 0:
        return values.astype(np.int64)
    if num * int(values.max()) < 2**62:
        return (values * num) // den
    return np.array([(int(v) * num) // den for v in values], dtype=object)


def _detect_mass(legit: np.ndarray, excess: np.ndarray, ratio: Fraction) -> float:
    """``sum_l P(L = l) * P(M > ratio * l)`` on the integer lattice."""
    sf = DiscreteDistribution(0.0, excess).survival()
    lattice = np.arange(legit.size, dtype=np.int64)
    thresholds = _floor_scaled(lattice, ratio.numerator, ratio.denominator)
    inside = np.asarray([t < sf.size for t in thresholds]) if thresholds.dtype == object else thresholds < sf.size
    probs = np.zeros(legit.size)
    probs[inside] = sf[np.asarray(thresholds[inside], dtype=np.int64)]
    return float(np.dot(legit, probs))


def p_detect_general(
    scenario: AnalyticScenario,
    max_cells: int = DEFAULT_MAX_CELLS,
    resolution: float = DEFAULT_RESOLUTION,
) -> float:
    """P(flow flagged | flow holds a malicious device), independent-composition model.

    Returns ``nan`` when ``p_m == 0`` (the conditioning event is empty).
    """
    return p_detect_general_curve(scenario, [scenario.n], max_cells, resolution)[0]


def p_detect_general_curve(
    scenario: AnalyticScenario,
    n_values: Iterable[int],
    max_cells: int = DEFAULT_MAX_CELLS,
    resolution: float = DEFAULT_RESOLUTION,
) -> list[float]:
    """:func:`p_detect_general` for several flow sizes, sharing the convolution passes."""
    wanted = [int(n) for n in n_values]
    if not wanted:
        return []
    if scenario.p_m == 0.0:
        return [math.nan] * len(wanted)
    if scenario.f_m == 1.0:
        return [0.0] * len(wanted)
    lattice = rate_lattice(scenario.catalog, resolution)
    _check_cells(max(wanted), lattice.steps, max_cells)
    legit_step = _legit_step(lattice, scenario.catalog)
    excess_step = _excess_step(lattice, scenario)
    ratio = scenario.margin_ratio
    results: dict[int, float] = {}
    legit = np.ones(1)
    excess = np.ones(1)
    targets = set(wanted)
    for n in range(1, max(wanted) + 1):
        legit = kernels.shift_convolve(legit, *legit_step)
        excess = kernels.shift_convolve(excess, *excess_step)
        if n in targets:
            p_b = p_flow_contains_malicious(n, scenario.p_m)
            results[n] = _clip(_detect_mass(legit, excess, ratio) / p_b)
    return [results[n] for n in wanted]


def _clip(p: float) -> float:
    return min(max(p, 0.0), 1.0)


# -- the low-rate-type decomposition -------------------------------------------------


def _published_configuration(scenario: AnalyticScenario) -> bool:
    builtin = builtin_factory_catalog()
    return (
        [t.exact_rate for t in scenario.catalog.types] == [t.exact_rate for t in builtin.types]
        and scenario.catalog.type_probabilities == builtin.type_probabilities
        and exact(scenario.p_m) == exact(0.01)
        and exact(scenario.f_m) == 100
        and exact(scenario.t_r) == exact(1.01)
        and scenario.n < PUBLISHED_ENVELOPE_MAX_N
    )


def nonzero_types_always_detected(scenario: AnalyticScenario, resolution: float = DEFAULT_RESOLUTION) -> bool:
    """Worst-case check that one malicious device of any type other than 0 is always flagged.

    The smallest such excess must beat the margin of a flow made entirely of
    the fastest device type.
    """
    lattice = rate_lattice(scenario.catalog, resolution)
    probs = scenario.catalog.type_probabilities
    others = [s for i, (s, p) in enumerate(zip(lattice.steps, probs)) if i != 0 and p > 0]
    if not others:
        return True
    fastest = max(s for s, p in zip(lattice.steps, probs) if p > 0)
    ratio = scenario.margin_ratio
    return min(others) * ratio.denominator > ratio.numerator * scenario.n * fastest


def check_envelope(scenario: AnalyticScenario, resolution: float = DEFAULT_RESOLUTION) -> None:
    """Raise :class:`EnvelopeError` unless the type-0 decomposition is valid.

    Accepted when the worst-case guarantee holds, or for the published
    factory configuration (p_m = 0.01, f_m = 100, t_r = 1.01, uniform types,
    n < 500) where the decomposition was asserted as given.
    """
    if scenario.f_m == 1.0:
        raise EnvelopeError("f_m = 1 produces no excess; the decomposition does not apply")
    if nonzero_types_always_detected(scenario, resolution) or _published_configuration(scenario):
        return
    raise EnvelopeError(
        f"n={scenario.n}, f_m={scenario.f_m}, t_r={scenario.t_r}: a lone malicious device of a "
        "type other than 0 can go undetected, so the type-0 decomposition would be wrong"
    )


def _p_nonzero_type_malicious(scenario: AnalyticScenario) -> float:
    share = sum(scenario.catalog.type_probabilities[1:])
    return p_flow_contains_malicious(scenario.n, scenario.p_m * share)


def contribution_nonzero_types(scenario: AnalyticScenario, resolution: float = DEFAULT_RESOLUTION) -> float:
    """Share of P(detect | malicious) due to flows holding a malicious device of type != 0."""
    check_envelope(scenario, resolution)
    p_b = p_flow_contains_malicious(scenario.n, scenario.p_m)
    if p_b == 0.0:
        return math.nan
    return _clip(_p_nonzero_type_malicious(scenario) / p_b)


def _p_only_type0(n: int, p_m: float, p0: float) -> np.ndarray:
    """``P(D(i))`` for i = 0..n: exactly i malicious devices, all of type 0."""
    a = p_m * p0
    b = 1.0 - p_m
    i = np.arange(n + 1)
    if a == 0.0:
        out = np.zeros(n + 1)
        out[0] = b**n
        return out
    if b == 0.0:
        out = np.zeros(n + 1)
        out[n] = a**n
        return out
    # C(n, i) a^i b^(n-i) == Binomial(n, a/(a+b)).pmf(i) * (a+b)^n, kept in log space
    return np.exp(stats.binom.logpmf(i, n, a / (a + b)) + n * math.log(a + b))


def p_detect_special(
    scenario: AnalyticScenario,
    max_cells: int = DEFAULT_MAX_CELLS,
    resolution: float = DEFAULT_RESOLUTION,
) -> float:
    """P(detect | malicious) split by whether a malicious device of type != 0 is present.

    Flows with such a device are taken as always detected; flows whose
    malicious devices are all of type 0 are detected when ``i`` of them
    outweigh the threshold margin of the flow's legitimate rate.
    """
    check_envelope(scenario, resolution)
    n = scenario.n
    p_b = p_flow_contains_malicious(n, scenario.p_m)
    if p_b == 0.0:
        return math.nan
    lattice = rate_lattice(scenario.catalog, resolution)
    legit = legit_rate_distribution(scenario, max_cells, resolution).mass
    cdf = np.cumsum(legit)
    ratio = scenario.margin_ratio
    s0 = lattice.steps[0]
    # detected iff l * ratio < i * s0  <=>  l < i * s0 * den / num
    p_given_d = np.zeros(n + 1)
    for i in range(1, n + 1):
        if ratio.numerator == 0:
            p_given_d[i] = 1.0
            continue
        bound = i * s0 * ratio.denominator
        last = -(-bound // ratio.numerator) - 1  # largest l with l * num < bound
        if last >= 0:
            p_given_d[i] = cdf[min(last, cdf.size - 1)]
    p_d = _p_only_type0(n, scenario.p_m, scenario.catalog.type_probabilities[0])
    total = _p_nonzero_type_malicious(scenario) + float(np.dot(p_given_d[1:], p_d[1:]))
    return _clip(total / p_b)


# -- exact enumeration of the joint per-device model -------------------------------


def _compositions(n: int, parts: int):
    if parts == 1:
        yield (n,)
        return
    for head in range(n + 1):
        for tail in _compositions(n - head, parts - 1):
            yield (head,) + tail


def _multinomial(counts: Sequence[int]) -> int:
    total, coef = 0, 1
    for c in counts:
        total += c
        coef *= math.comb(total, c)
    return coef


def brute_force_p_detect(scenario: AnalyticScenario, max_n: int = BRUTE_FORCE_MAX_N) -> float:
    """P(flagged | some device malicious) by enumerating every flow composition.

    Each device independently picks a type and a malicious tag; a flow is
    flagged iff ``sum_mal r(i) (f_m - 1) > (t_r - 1) sum_all r(i)``.  The
    malicious devices are part of the same composition that fixes the
    legitimate rate.  Compositions are enumerated as multinomial counts over
    the ``2k`` (type, tag) states.  ``nan`` when ``p_m == 0``.
    """
    n = scenario.n
    if n > max_n:
        raise CapacityError(f"exact enumeration limited to n <= {max_n}, got {n}")
    if scenario.p_m == 0.0:
        return math.nan
    catalog = scenario.catalog
    k = len(catalog)
    rates = [spec.exact_rate for spec in catalog.types]
    scale = reduce(lambda a, b: a * b // math.gcd(a, b), (r.denominator for r in rates), 1)
    int_rates = [int(r * scale) for r in rates]
    fm1 = exact(scenario.f_m) - 1
    tr1 = exact(scenario.t_r) - 1
    lhs_coef = fm1.numerator * tr1.denominator
    rhs_coef = tr1.numerator * fm1.denominator
    probs = [p * (1.0 - scenario.p_m) for p in catalog.type_probabilities] + [
        p * scenario.p_m for p in catalog.type_probabilities
    ]
    active = [j for j, p in enumerate(probs) if p > 0]

    p_b = 0.0
    p_detect = 0.0
    for sub in _compositions(n, len(active)):
        counts = [0] * (2 * k)
        for j, c in zip(active, sub):
            counts[j] = c
        malicious = counts[k:]
        if not any(malicious):
            continue
        weight = float(_multinomial(sub))
        for j, c in zip(active, sub):
            if c:
                weight *= probs[j] ** c
        p_b += weight
        excess = sum(m * r for m, r in zip(malicious, int_rates))
        legit = sum((counts[i] + counts[k + i]) * int_rates[i] for i in range(k))
        if lhs_coef * excess > rhs_coef * legit:
            p_detect += weight
    return _clip(p_detect / p_b) if p_b > 0 else math.nan


# -- published tables -------------------------------------------------------------

FLOW_SHARE_P_M = (0.005, 0.01, 0.015, 0.02, 0.025)


def table2_rows(n: int = 100) -> list[tuple[float, float]]:
    """(malicious devices %, expected flows holding a malicious device %)."""
    return [(100 * p, 100 * p_flow_contains_malicious(n, p)) for p in FLOW_SHARE_P_M]


def fig3_rows(n_values: Sequence[int], scenario: AnalyticScenario | None = None) -> list[dict[str, float]]:
    """P(detect | malicious) and the type != 0 share over a range of flow sizes."""
    base = scenario or AnalyticScenario()
    general = p_detect_general_curve(base, n_values)
    rows = []
    for n, g in zip(n_values, general):
        s = base.replace(n=int(n))
        try:
            special = p_detect_special(s)
            contribution = contribution_nonzero_types(s)
        except EnvelopeError:
            special = contribution = math.nan
        rows.append({"n": int(n), "p_detect_general": g, "p_detect_special": special, "contribution_nonzero_types": contribution})
    return rows


__all__ = [
    "AnalyticScenario",
    "DiscreteDistribution",
    "RateLattice",
    "rate_lattice",
    "p_flow_contains_malicious",
    "legit_rate_distribution",
    "malicious_excess_distribution",
    "p_detect_general",
    "p_detect_general_curve",
    "p_detect_special",
    "contribution_nonzero_types",
    "check_envelope",
    "nonzero_types_always_detected",
    "brute_force_p_detect",
    "table2_rows",
    "fig3_rows",
]
