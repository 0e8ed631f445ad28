"""Synthetic price / solar / load processes and trace file I/O.

A trace is a day (or any horizon) of per-slot inputs: the grid price, the
renewable energy harvested, and at most one arriving load task per slot. The
generator follows a three-stage daily pattern: prices take exactly three
values (high / mid / low) on configurable hour-of-day windows, and solar and
load amounts are drawn per slot from a normal distribution with the stage
mean and standard deviation, truncated at zero by clamping. Load duration is
an integer drawn uniformly from a configured interval, and the per-slot
intensity is total load divided by duration.

All generated quantities are quantized to 9 decimal digits so that writing a
trace to CSV and reading it back reproduces it exactly.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .model import GridParams

_DECIMALS = 9
_CSV_HEADER = ["slot", "price", "renewable", "intensity", "duration", "max_delay"]


class TraceFormatError(ValueError):
    """A trace file does not conform to the CSV schema."""


@dataclass(frozen=True)
class LoadTask:
    """One energy request: `intensity` kWh in each of `duration` consecutive slots.

    Service may start anywhere from `arrival_slot` to `arrival_slot + max_delay`.
    """

    arrival_slot: int
    intensity: float
    duration: int
    max_delay: int

    def __post_init__(self):
        if self.duration < 1:
            raise ValueError(f"duration >= 1 required, got {self.duration}")
        if self.intensity < 0.0:
            raise ValueError(f"intensity >= 0 required, got {self.intensity}")
        if self.max_delay < 0:
            raise ValueError(f"max_delay >= 0 required, got {self.max_delay}")

    @property
    def total_load(self) -> float:
        return self.intensity * self.duration


@dataclass(frozen=True)
class SlotInput:
    slot: int
    price: float
    renewable: float
    task: LoadTask | None = None


@dataclass(frozen=True)
class Trace:
    slots: tuple[SlotInput, ...]
    slot_minutes: int = 5

    def __post_init__(self):
        for i, s in enumerate(self.slots):
            if s.slot != i:
                raise ValueError(f"slots must be contiguous from 0: index {i} holds slot {s.slot}")
            if s.task is not None and s.task.arrival_slot != i:
                raise ValueError(f"task at slot {i} claims arrival_slot {s.task.arrival_slot}")

    @property
    def horizon(self) -> int:
        return len(self.slots)

    def max_task_delay(self) -> int:
        """Largest per-load delay cap present (0 for a task-free trace)."""
        return max((s.task.max_delay for s in self.slots if s.task is not None), default=0)


@dataclass(frozen=True)
class StageProfile:
    """Three-stage daily pattern for price, solar, and load generation.

    Means are per-slot energies (kWh). Hour windows are half-open [start, end)
    hour-of-day intervals; slots outside the high and mid windows are low.
    """

    price_high: float = 0.118
    price_mid: float = 0.099
    price_low: float = 0.063
    solar_mean_high: float = 1.98 / 12
    solar_mean_mid: float = 0.96 / 12
    solar_mean_low: float = 0.005 / 12
    load_mean_high: float = 2.4 / 12
    load_mean_mid: float = 1.38 / 12
    load_mean_low: float = 0.6 / 12
    solar_std_ratio: float = 0.4
    load_std_ratio: float = 0.2
    duration_min: int = 1
    duration_max: int = 12
    max_delay: int = 18
    high_hours: tuple[tuple[float, float], ...] = ((11.0, 17.0),)
    mid_hours: tuple[tuple[float, float], ...] = ((7.0, 11.0), (17.0, 19.0))
    slot_minutes: int = 5

    def validate(self) -> None:
        if not (self.price_high >= self.price_mid >= self.price_low):
            raise ValueError(
                f"price stages must be ordered high >= mid >= low, got "
                f"{self.price_high}, {self.price_mid}, {self.price_low}"
            )
        if self.solar_std_ratio < 0.0 or self.load_std_ratio < 0.0:
            raise ValueError("std-dev ratios must be >= 0")
        if self.duration_min < 1:
            raise ValueError(f"duration_min >= 1 required, got {self.duration_min}")
        if self.duration_max < self.duration_min:
            raise ValueError("duration_max must be >= duration_min")
        if self.max_delay < 0:
            raise ValueError("max_delay must be >= 0")
        if self.slot_minutes < 1:
            raise ValueError("slot_minutes must be >= 1")
        for mean in (
            self.solar_mean_high, self.solar_mean_mid, self.solar_mean_low,
            self.load_mean_high, self.load_mean_mid, self.load_mean_low,
        ):
            if mean < 0.0:
                raise ValueError("stage means must be >= 0")

    def stage(self, slot: int) -> str:
        hour = (slot * self.slot_minutes / 60.0) % 24.0
        for lo, hi in self.high_hours:
            if lo <= hour < hi:
                return "high"
        for lo, hi in self.mid_hours:
            if lo <= hour < hi:
                return "mid"
        return "low"

    def _stage_arrays(self, horizon: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        price = np.empty(horizon)
        solar = np.empty(horizon)
        load = np.empty(horizon)
        by_stage = {
            "high": (self.price_high, self.solar_mean_high, self.load_mean_high),
            "mid": (self.price_mid, self.solar_mean_mid, self.load_mean_mid),
            "low": (self.price_low, self.solar_mean_low, self.load_mean_low),
        }
        for t in range(horizon):
            price[t], solar[t], load[t] = by_stage[self.stage(t)]
        return price, solar, load


def generate_trace(profile: StageProfile, horizon: int, seed: int) -> Trace:
    """Draw a seeded trace: deterministic prices, stochastic solar/load/durations.

    The same (profile, horizon, seed) always yields an identical trace. Draw
    order is fixed: the solar vector, then the load vector, then durations.
    """
    profile.validate()
    if horizon < 1:
        raise ValueError(f"horizon >= 1 required, got {horizon}")

    price, solar_mean, load_mean = profile._stage_arrays(horizon)
    rng = np.random.default_rng(seed)

    solar = rng.normal(solar_mean, profile.solar_std_ratio * solar_mean)
    load = rng.normal(load_mean, profile.load_std_ratio * load_mean)
    durations = rng.integers(profile.duration_min, profile.duration_max + 1, size=horizon)

    solar = np.round(np.maximum(solar, 0.0), _DECIMALS)
    load = np.maximum(load, 0.0)
    intensity = np.round(load / durations, _DECIMALS)

    slots = tuple(
        SlotInput(
            slot=t,
            price=price[t],
            renewable=float(solar[t]),
            task=LoadTask(
                arrival_slot=t,
                intensity=float(intensity[t]),
                duration=int(durations[t]),
                max_delay=profile.max_delay,
            ),
        )
        for t in range(horizon)
    )
    return Trace(slots=slots, slot_minutes=profile.slot_minutes)


def validate_trace(trace: Trace, grid: GridParams) -> list[str]:
    """List every bounds violation in the trace; empty means valid."""
    problems: list[str] = []
    for s in trace.slots:
        if not (grid.p_min <= s.price <= grid.p_max):
            problems.append(
                f"slot {s.slot}: price {s.price} outside [{grid.p_min}, {grid.p_max}]"
            )
        if s.renewable < 0.0:
            problems.append(f"slot {s.slot}: renewable {s.renewable} is negative")
        if s.task is not None:
            t = s.task
            if t.intensity < 0.0:
                problems.append(f"slot {s.slot}: intensity {t.intensity} is negative")
            if t.duration < 1:
                problems.append(f"slot {s.slot}: duration {t.duration} < 1")
            if t.max_delay < 0:
                problems.append(f"slot {s.slot}: max_delay {t.max_delay} < 0")
    return problems


def _fmt(x: float) -> str:
    s = f"{x:.{_DECIMALS}f}".rstrip("0")
    return s + "0" if s.endswith(".") else s


def save_trace(trace: Trace, path: str | Path) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_CSV_HEADER)
        for s in trace.slots:
            if s.task is None:
                tail = ["", "", ""]
            else:
                tail = [_fmt(s.task.intensity), str(s.task.duration), str(s.task.max_delay)]
            writer.writerow([str(s.slot), _fmt(s.price), _fmt(s.renewable)] + tail)


def load_trace(path: str | Path, slot_minutes: int = 5) -> Trace:
    """Parse and validate a trace CSV; malformed rows raise with line numbers."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise TraceFormatError(f"{path}: empty file") from None
        if [h.strip() for h in header] != _CSV_HEADER:
            raise TraceFormatError(
                f"{path}: line 1: expected header {','.join(_CSV_HEADER)!r}, got {','.join(header)!r}"
            )
        slots: list[SlotInput] = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(_CSV_HEADER):
                raise TraceFormatError(f"{path}: line {lineno}: expected {len(_CSV_HEADER)} fields, got {len(row)}")
            try:
                slot = int(row[0])
                price = float(row[1])
                renewable = float(row[2])
            except ValueError as exc:
                raise TraceFormatError(f"{path}: line {lineno}: {exc}") from None
            if slot != len(slots):
                raise TraceFormatError(
                    f"{path}: line {lineno}: slots must be contiguous from 0, expected {len(slots)}, got {slot}"
                )
            if renewable < 0.0:
                raise TraceFormatError(f"{path}: line {lineno}: renewable must be >= 0, got {renewable}")
            triple = [cell.strip() for cell in row[3:6]]
            if all(cell == "" for cell in triple):
                task = None
            elif any(cell == "" for cell in triple):
                raise TraceFormatError(
                    f"{path}: line {lineno}: intensity,duration,max_delay must be all present or all empty"
                )
            else:
                try:
                    intensity = float(triple[0])
                    duration = int(triple[1])
                    max_delay = int(triple[2])
                except ValueError as exc:
                    raise TraceFormatError(f"{path}: line {lineno}: {exc}") from None
                if intensity < 0.0:
                    raise TraceFormatError(f"{path}: line {lineno}: intensity must be >= 0, got {intensity}")
                if duration < 1:
                    raise TraceFormatError(
                        f"{path}: line {lineno}: duration >= 1 required for every load, got {duration}"
                    )
                if max_delay < 0:
                    raise TraceFormatError(f"{path}: line {lineno}: max_delay must be >= 0, got {max_delay}")
                task = LoadTask(slot, intensity, duration, max_delay)
            slots.append(SlotInput(slot=slot, price=price, renewable=renewable, task=task))
    return Trace(slots=tuple(slots), slot_minutes=slot_minutes)
