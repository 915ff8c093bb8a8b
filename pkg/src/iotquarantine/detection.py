"""Threshold-based flagging of aggregated flows."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .catalog import mean_rate
from .traffic import ScenarioParams

# Relative slack below which measured == t_r * expected counts as a tie.
# Decimal thresholds such as 1.01 are not exact in binary, so an exact tie
# would otherwise be decided by rounding noise.
TIE_RTOL = 1e-12


@dataclass(frozen=True)
class DetectionVerdict:
    flagged: bool
    measured_rate: float  # bit/s
    expected_rate: float  # bit/s
    ratio: float


def exceeds(measured, expected, t_r):
    """Strict ``measured > t_r * expected`` with ties resolved as not exceeding.

    Works elementwise on numpy arrays.
    """
    threshold = np.multiply(t_r, expected)
    return np.subtract(measured, threshold) > TIE_RTOL * np.abs(threshold)


def classify_flow(measured_bits: float, expected_bits: float, params: ScenarioParams) -> DetectionVerdict:
    if not expected_bits > 0:
        raise ValueError(f"expected_bits must be positive, got {expected_bits!r}")
    return DetectionVerdict(
        flagged=bool(exceeds(measured_bits, expected_bits, params.t_r)),
        measured_rate=measured_bits / params.s_p,
        expected_rate=expected_bits / params.s_p,
        ratio=measured_bits / expected_bits,
    )


def threshold_detection_limit(type_index: int, params: ScenarioParams) -> float:
    """Threshold ratio above which a lone malicious device of this type hides in an average flow."""
    catalog = params.catalog
    if not 0 <= type_index < len(catalog):
        raise IndexError(f"no device type {type_index} in catalog")
    rate = float(catalog.types[type_index].exact_rate)
    return 1.0 + rate * (params.f_m - 1.0) / (mean_rate(catalog) * params.n)
