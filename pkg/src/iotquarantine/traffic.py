"""Aggregated-flow populations and per-window traffic accounting.

Every device of type ``i`` sends one frame of ``frame_size`` bytes each
``t_p(i)`` ms, starting at a uniform random phase.  Malicious devices send
``f_m`` times as often.  Windows are half-open ``[0, s_p)``; the channel is
ideal, so every frame is counted.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
import numpy as np

from .catalog import Catalog, builtin_factory_catalog, exact


@dataclass(frozen=True)
class ScenarioParams:
    n: int = 100
    p_m: float = 0.01
    f_m: float = 100.0
    t_r: float = 1.01
    s_p: float = 1.0  # seconds
    catalog: Catalog = field(default_factory=builtin_factory_catalog)

    def __post_init__(self) -> None:
        if int(self.n) != self.n or self.n < 1:
            raise ValueError(f"n must be a positive integer, got {self.n!r}")
        object.__setattr__(self, "n", int(self.n))
        if not 0.0 <= self.p_m <= 1.0:
            raise ValueError(f"p_m must lie in [0, 1], got {self.p_m!r}")
        if not self.f_m >= 1.0:
            raise ValueError(f"f_m must be >= 1, got {self.f_m!r}")
        if not self.t_r > 0.0:
            raise ValueError(f"t_r must be > 0, got {self.t_r!r}")
        if not self.s_p > 0.0:
            raise ValueError(f"s_p must be > 0, got {self.s_p!r}")

    def replace(self, **changes) -> ScenarioParams:
        values = {name: getattr(self, name) for name in ("n", "p_m", "f_m", "t_r", "s_p", "catalog")}
        values.update(changes)
        return ScenarioParams(**values)

    @property
    def window_ms(self) -> Fraction:
        return exact(self.s_p) * 1000


@dataclass(frozen=True)
class Device:
    type_index: int
    malicious: bool
    phase: float  # ms, offset of the first frame


@dataclass(frozen=True)
class FlowPopulation:
    devices: tuple[Device, ...]

    def __len__(self) -> int:
        return len(self.devices)

    @property
    def malicious_count(self) -> int:
        return sum(d.malicious for d in self.devices)


def _exact_period(type_period: float, malicious: bool, f_m: float) -> Fraction:
    period = exact(type_period)
    return period / exact(f_m) if malicious else period


def effective_period(device: Device, params: ScenarioParams) -> float:
    """Transmission period in ms, shortened by ``f_m`` for malicious devices."""
    spec = params.catalog.types[device.type_index]
    return float(_exact_period(spec.transmission_period, device.malicious, params.f_m))


def frames_in_window(period: float, phase: float, window: float) -> int:
    """Frames sent at ``phase + k*period`` (k >= 0) that fall inside ``[0, window)``."""
    if period <= 0 or phase < 0 or window <= 0:
        raise ValueError("period and window must be > 0 and phase >= 0")
    return _frames_exact(exact(period), Fraction(phase), exact(window))


def _frames_exact(period: Fraction, phase: Fraction, window: Fraction) -> int:
    if phase >= window:
        return 0
    return math.ceil((window - phase) / period)


def sample_population(params: ScenarioParams, rng: np.random.Generator) -> FlowPopulation:
    """Draw one aggregated flow: types from p_t, Bernoulli(p_m) tags, uniform phases."""
    types, malicious, unit_phase = draw_devices(params, rng, 1)
    devices = []
    for t, m, u in zip(types[0], malicious[0], unit_phase[0]):
        spec = params.catalog.types[int(t)]
        period = float(_exact_period(spec.transmission_period, bool(m), params.f_m))
        phase = min(float(u) * period, math.nextafter(period, 0.0))
        devices.append(Device(int(t), bool(m), phase))
    return FlowPopulation(tuple(devices))


def draw_devices(params: ScenarioParams, rng: np.random.Generator, rounds: int):
    """Vectorised draw for ``rounds`` flows.

    Returns type indices, malicious flags and phases expressed as a fraction
    of each device's effective period (uniform on [0, 1)).
    """
    k = len(params.catalog)
    shape = (rounds, params.n)
    if k == 1:
        types = np.zeros(shape, dtype=np.int64)
    else:
        cdf = np.cumsum(params.catalog.type_probabilities)
        cdf[-1] = 1.0
        types = np.searchsorted(cdf, rng.random(shape), side="right").astype(np.int64)
        np.minimum(types, k - 1, out=types)
    malicious = rng.random(shape) < params.p_m
    unit_phase = rng.random(shape)
    return types, malicious, unit_phase


def measure_flow(pop: FlowPopulation, params: ScenarioParams) -> tuple[float, float]:
    """(measured_bits, expected_bits) over one sampling window.

    Expected traffic charges every device, malicious or not, at its
    legitimate rate.
    """
    window = params.window_ms
    measured = Fraction(0)
    expected = Fraction(0)
    for device in pop.devices:
        spec = params.catalog.types[device.type_index]
        period = _exact_period(spec.transmission_period, device.malicious, params.f_m)
        measured += _frames_exact(period, Fraction(device.phase), window) * spec.frame_bits
        expected += spec.exact_rate * exact(params.s_p)
    return float(measured), float(expected)


@dataclass(frozen=True)
class ClassTable:
    """Per-(type, malicious) constants for window counting.

    Device class ``c = type + k * malicious``.  With ``W = window / period``
    the count for unit phase ``u`` is ``floor(W) + (u < frac(W))``.
    """

    whole: np.ndarray  # int64, floor(W)
    frac: np.ndarray  # float64, frac(W)
    frame_bits: np.ndarray  # float64
    expected_bits: np.ndarray  # float64, legitimate rate * s_p

    @classmethod
    def build(cls, params: ScenarioParams) -> ClassTable:
        window = params.window_ms
        whole, frac, bits, expected = [], [], [], []
        for malicious in (False, True):
            for spec in params.catalog.types:
                w = window / _exact_period(spec.transmission_period, malicious, params.f_m)
                whole.append(math.floor(w))
                frac.append(float(w - math.floor(w)))
                bits.append(float(spec.frame_bits))
                expected.append(float(spec.exact_rate * exact(params.s_p)))
        return cls(
            np.asarray(whole, dtype=np.int64),
            np.asarray(frac, dtype=np.float64),
            np.asarray(bits, dtype=np.float64),
            np.asarray(expected, dtype=np.float64),
        )

    @property
    def divisible(self) -> bool:
        """True when every effective period divides the window (phase-free counts)."""
        return bool(np.all(self.frac == 0.0))


def device_classes(types: np.ndarray, malicious: np.ndarray, k: int) -> np.ndarray:
    return types + k * malicious.astype(np.int64)
