"""Scalar schedules over normalised decoding time ``t`` in [0, 1).

Round ``r`` of ``T`` sits at ``t = r / T``. The mask ratio at ``t = 1`` is
defined as 0 so the final round commits every position.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

from .errors import ConfigError, DomainError

# snaps products like (1 - cos(x)) * L that land a hair above an integer
_CEIL_SLACK = 1e-9


class ScheduleKind(str, Enum):
    COSINE = "cosine"
    LINEAR = "linear"


class TemperatureMode(str, Enum):
    DECAY = "decay"  # 1 - t
    FIXED = "fixed"  # constant
    HARD = "hard"  # argmax
    GAMMA = "gamma"  # tracks the mask ratio


@dataclass(frozen=True)
class MaskSchedule:
    kind: ScheduleKind = ScheduleKind.COSINE
    total_rounds: int = 12
    L: int = 56

    def __post_init__(self):
        object.__setattr__(self, "kind", ScheduleKind(self.kind))
        if self.total_rounds < 1 or self.L < 1:
            raise ConfigError("total_rounds and L must be >= 1")

    def t(self, round_index: int) -> float:
        return round_index / self.total_rounds


@dataclass(frozen=True)
class ThresholdSchedule:
    eta_abs_start: float = 0.0
    eta_abs_end: float = 0.9
    eta_drop: float = 0.15
    top_q: int | None = None

    def __post_init__(self):
        if self.eta_abs_end < self.eta_abs_start:
            raise ConfigError("eta_abs must be non-decreasing (end >= start)")
        if self.top_q is not None and self.top_q < 0:
            raise ConfigError("top_q must be non-negative")


def gamma(t: float, schedule: MaskSchedule | ScheduleKind | str = ScheduleKind.COSINE) -> float:
    """Mask ratio at time ``t``: ``cos(pi t / 2)`` or ``1 - t``."""
    if not 0.0 <= t < 1.0:
        raise DomainError(f"t={t} outside [0, 1)")
    kind = schedule.kind if isinstance(schedule, MaskSchedule) else ScheduleKind(schedule)
    if kind is ScheduleKind.COSINE:
        return math.cos(math.pi * t / 2.0)
    return 1.0 - t


def gamma_closed(t: float, schedule: MaskSchedule | ScheduleKind | str = ScheduleKind.COSINE) -> float:
    """:func:`gamma` extended to ``t = 1`` where it is 0."""
    if t == 1.0:
        return 0.0
    return gamma(t, schedule)


def keep_count(t_next: float, schedule: MaskSchedule) -> int:
    """Total committed positions required after the round ending at ``t_next``."""
    if not 0.0 <= t_next <= 1.0:
        raise DomainError(f"t_next={t_next} outside [0, 1]")
    L = schedule.L
    if t_next == 1.0:
        return L
    want = math.ceil((1.0 - gamma(t_next, schedule)) * L - _CEIL_SLACK)
    return min(max(want, 1), L)


def keep_count_for_round(round_index: int, schedule: MaskSchedule) -> int:
    T = schedule.total_rounds
    if round_index >= T - 1:
        return schedule.L
    return keep_count((round_index + 1) / T, schedule)


def tau(
    t: float,
    mode: TemperatureMode | str = TemperatureMode.DECAY,
    fixed_value: float = 1.0,
    schedule: MaskSchedule | ScheduleKind | str = ScheduleKind.COSINE,
) -> float:
    if not 0.0 <= t < 1.0:
        raise DomainError(f"t={t} outside [0, 1)")
    mode = TemperatureMode(mode)
    if mode is TemperatureMode.DECAY:
        return 1.0 - t
    if mode is TemperatureMode.FIXED:
        if fixed_value < 0:
            raise ConfigError("fixed temperature must be >= 0")
        return float(fixed_value)
    if mode is TemperatureMode.HARD:
        return 0.0
    return gamma(t, schedule)


def eta_abs(round_index: int, total_rounds: int, schedule: ThresholdSchedule) -> float:
    """Absolute re-mask threshold, linear from start (round 0) to end (round T)."""
    if not 0 <= round_index < total_rounds:
        raise DomainError(f"round {round_index} outside [0, {total_rounds})")
    frac = round_index / total_rounds
    return schedule.eta_abs_start + (schedule.eta_abs_end - schedule.eta_abs_start) * frac


__all__ = [
    "ScheduleKind",
    "TemperatureMode",
    "MaskSchedule",
    "ThresholdSchedule",
    "gamma",
    "gamma_closed",
    "keep_count",
    "keep_count_for_round",
    "tau",
    "eta_abs",
]
