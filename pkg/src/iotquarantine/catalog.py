"""IoT device type catalog and legitimate data rates.

The factory-automation table lists a "transmission frequency" in milliseconds.
It is read here as a transmission *period*: a manufacturing cell sends a
15-byte frame every 50 ms, i.e. 2400 bit/s.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Mapping, Sequence

PROBABILITY_TOLERANCE = 1e-12


def exact(value: float | int | str | Fraction) -> Fraction:
    """Decimal-faithful rational for a user supplied number (0.1 -> 1/10)."""
    if isinstance(value, Fraction):
        return value
    if isinstance(value, int):
        return Fraction(value)
    return Fraction(str(value))


def _as_number(value: Fraction) -> int | float:
    return int(value) if value.denominator == 1 else float(value)


@dataclass(frozen=True)
class DeviceTypeSpec:
    id: int
    name: str
    transmission_period: float  # ms
    frame_size: float  # bytes
    latency_bound: float | None = None  # ms, metadata
    reliability_plr: float | None = None  # metadata
    metadata: Mapping[str, str] = field(default_factory=dict, compare=False)

    def __post_init__(self) -> None:
        if not self.transmission_period > 0:
            raise ValueError(f"{self.name}: transmission_period must be > 0")
        if not self.frame_size > 0:
            raise ValueError(f"{self.name}: frame_size must be > 0")

    @property
    def frame_bits(self) -> Fraction:
        return exact(self.frame_size) * 8

    @property
    def exact_rate(self) -> Fraction:
        """Legitimate rate in bit/s as an exact rational."""
        return self.frame_bits * 1000 / exact(self.transmission_period)


def legit_rate(spec: DeviceTypeSpec) -> int | float:
    """Legitimate data rate of a device type in bit/s (int when integral)."""
    return _as_number(spec.exact_rate)


@dataclass(frozen=True)
class Catalog:
    types: tuple[DeviceTypeSpec, ...]
    type_probabilities: tuple[float, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "types", tuple(self.types))
        object.__setattr__(self, "type_probabilities", tuple(float(p) for p in self.type_probabilities))
        if not self.types:
            raise ValueError("catalog needs at least one device type")
        if len(self.types) != len(self.type_probabilities):
            raise ValueError("one probability per device type is required")
        for position, spec in enumerate(self.types):
            if spec.id != position:
                raise ValueError(f"type id {spec.id} does not match its position {position}")
        if any(p < 0 for p in self.type_probabilities):
            raise ValueError("type probabilities must be non-negative")
        if abs(sum(self.type_probabilities) - 1.0) > PROBABILITY_TOLERANCE:
            raise ValueError(f"type probabilities sum to {sum(self.type_probabilities)!r}, not 1")

    def __len__(self) -> int:
        return len(self.types)

    @property
    def rates(self) -> list[int | float]:
        return [legit_rate(spec) for spec in self.types]

    def with_probabilities(self, probabilities: Sequence[float]) -> Catalog:
        return Catalog(self.types, tuple(probabilities))

    def to_dict(self) -> dict[str, Any]:
        return {
            "types": [
                {
                    "name": t.name,
                    "transmission_period_ms": t.transmission_period,
                    "frame_size_bytes": t.frame_size,
                    "latency_bound_ms": t.latency_bound,
                    "reliability_plr": t.reliability_plr,
                    "metadata": dict(t.metadata),
                }
                for t in self.types
            ],
            "type_probabilities": list(self.type_probabilities),
        }

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> Catalog:
        known = {"name", "transmission_period_ms", "frame_size_bytes", "latency_bound_ms", "reliability_plr", "metadata"}
        types = []
        for position, entry in enumerate(doc["types"]):
            unknown = set(entry) - known
            if unknown:
                raise ValueError(f"unknown device type fields: {sorted(unknown)}")
            types.append(
                DeviceTypeSpec(
                    id=position,
                    name=entry["name"],
                    transmission_period=entry["transmission_period_ms"],
                    frame_size=entry["frame_size_bytes"],
                    latency_bound=entry.get("latency_bound_ms"),
                    reliability_plr=entry.get("reliability_plr"),
                    metadata=dict(entry.get("metadata") or {}),
                )
            )
        probabilities = doc.get("type_probabilities")
        if probabilities is None:
            probabilities = [1.0 / len(types)] * len(types)
        return cls(tuple(types), tuple(probabilities))


def load_catalog(path: str | Path) -> Catalog:
    with open(path, encoding="utf-8") as fh:
        return Catalog.from_dict(json.load(fh))


_FACTORY_META = {
    "device_density_per_m3": "0.33 to 3",
    "communication_range_m": "50 to 100",
    "mobility_kmh": "<30",
}


def builtin_factory_catalog() -> Catalog:
    """The four factory-automation device types, equally likely."""
    rows = [
        # name, latency ms, period ms, frame bytes
        ("manufacturing cell", 5, 50, 15),
        ("machine tools", 0.25, 0.5, 50),
        ("printing machines", 1, 2, 30),
        ("packaging machines", 25, 5, 15),
    ]
    types = tuple(
        DeviceTypeSpec(
            id=i,
            name=name,
            transmission_period=period,
            frame_size=size,
            latency_bound=latency,
            reliability_plr=1e-9,
            metadata=dict(_FACTORY_META),
        )
        for i, (name, latency, period, size) in enumerate(rows)
    )
    return Catalog(types, (0.25, 0.25, 0.25, 0.25))


def mean_rate(catalog: Catalog) -> float:
    """Average legitimate rate of one device drawn from the catalog, bit/s."""
    return float(sum(Fraction(p) * spec.exact_rate for spec, p in zip(catalog.types, catalog.type_probabilities)))
