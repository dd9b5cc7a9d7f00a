"""Crowbar pulse -> die stress model.

A crowbar glitch shorts the supply rail to ground for ``length_ns``.  What the
die sees depends on how much of the pulse the on-rail decoupling absorbs; the
remaining "effective stress" decides between no effect, a window in which a
fault can land, and a reliable crash.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum


DEFAULT_TICK_NS = 20


@dataclass(frozen=True)
class GlitchPulse:
    offset_ns: int
    length_ns: int

    def __post_init__(self):
        if self.offset_ns < 0:
            raise ValueError(f"offset_ns must be >= 0, got {self.offset_ns}")
        if self.length_ns <= 0:
            raise ValueError(f"length_ns must be > 0, got {self.length_ns}")

    def check_ticks(self, tick_ns: int = DEFAULT_TICK_NS) -> None:
        if self.offset_ns % tick_ns or self.length_ns % tick_ns:
            raise ValueError(f"{self} is not aligned to a {tick_ns} ns tick")


@dataclass(frozen=True)
class Susceptibility:
    """Piecewise-linear map from effective stress (ns) to fault probability.

    Below the first breakpoint the probability is 0; beyond the last it stays
    at the last value.
    """

    points: tuple[tuple[int, float], ...]

    def __post_init__(self):
        xs = [p[0] for p in self.points]
        ys = [p[1] for p in self.points]
        if not self.points:
            raise ValueError("susceptibility needs at least one breakpoint")
        if any(b < a for a, b in zip(xs, xs[1:])):
            raise ValueError("susceptibility breakpoints must be sorted by stress")
        if any(not 0.0 <= y <= 1.0 for y in ys):
            raise ValueError("susceptibility values must lie in [0, 1]")
        if any(b < a for a, b in zip(ys, ys[1:])):
            raise ValueError("susceptibility must be monotone non-decreasing")

    def __call__(self, stress_ns: float) -> float:
        pts = self.points
        if stress_ns < pts[0][0]:
            return 0.0
        for (x0, y0), (x1, y1) in zip(pts, pts[1:]):
            if stress_ns <= x1:
                if x1 == x0:
                    return y1
                return y0 + (y1 - y0) * (stress_ns - x0) / (x1 - x0)
        return pts[-1][1]


DEFAULT_SUSCEPTIBILITY = Susceptibility(((10_000, 0.0), (11_300, 0.9)))


@dataclass(frozen=True)
class RailConfig:
    decoupling_attenuation_ns: int = 0
    fault_min_ns: int = 10_000
    crash_min_ns: int = 13_000
    susceptibility: Susceptibility = field(default=DEFAULT_SUSCEPTIBILITY)
    detector_enabled: bool = False

    def __post_init__(self):
        if self.decoupling_attenuation_ns < 0:
            raise ValueError("decoupling_attenuation_ns must be >= 0")
        if not 0 < self.fault_min_ns < self.crash_min_ns:
            raise ValueError("need 0 < fault_min_ns < crash_min_ns")
        if self.susceptibility(self.fault_min_ns - 1) != 0.0:
            raise ValueError("susceptibility must be 0 below fault_min_ns")

    @classmethod
    def from_dict(cls, d: dict) -> "RailConfig":
        d = dict(d)
        if "susceptibility" in d:
            d["susceptibility"] = Susceptibility(tuple((int(s), float(p)) for s, p in d["susceptibility"]))
        return cls(**d)

    def to_dict(self) -> dict:
        return {
            "decoupling_attenuation_ns": self.decoupling_attenuation_ns,
            "fault_min_ns": self.fault_min_ns,
            "crash_min_ns": self.crash_min_ns,
            "susceptibility": [list(p) for p in self.susceptibility.points],
            "detector_enabled": self.detector_enabled,
        }


class RailKind(Enum):
    NONE = "NONE"
    FAULT_WINDOW = "FAULT_WINDOW"
    CRASH = "CRASH"
    DETECTED = "DETECTED"


@dataclass(frozen=True)
class RailOutcome:
    kind: RailKind
    # half-open [start, end) in simulated ns; set for every kind except NONE
    stress_window: tuple[int, int] | None = None
    fault_probability: float = 0.0


def effective_stress(pulse: GlitchPulse, rail: RailConfig) -> int:
    return max(0, pulse.length_ns - rail.decoupling_attenuation_ns)


def resolve_rail(pulse: GlitchPulse, rail: RailConfig, trigger_time: int = 0) -> RailOutcome:
    stress = effective_stress(pulse, rail)
    if stress < rail.fault_min_ns:
        return RailOutcome(RailKind.NONE)
    start = trigger_time + pulse.offset_ns
    window = (start, start + pulse.length_ns)
    if rail.detector_enabled:
        return RailOutcome(RailKind.DETECTED, window)
    if stress >= rail.crash_min_ns:
        return RailOutcome(RailKind.CRASH, window, 1.0)
    return RailOutcome(RailKind.FAULT_WINDOW, window, rail.susceptibility(stress))
