"""Per-stage wall time and power-model energy accounting."""

from __future__ import annotations

import math
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

STAGES = ("data_processing", "feature_variation", "inference", "xai", "evaluation")

STAGE_LABELS = {
    "data_processing": "Data Processing",
    "feature_variation": "Feature Variation",
    "inference": "Cloud Inference",
    "xai": "XAI",
    "evaluation": "Explanation Stability",
}

KWH_PER_JOULE = 1.0 / 3.6e6


def _check_stage(stage: str) -> None:
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}; expected one of {STAGES}")


@dataclass
class StageTiming:
    stage: str
    durations: list[float] = field(default_factory=list)

    def __post_init__(self):
        _check_stage(self.stage)
        if any(d < 0 for d in self.durations):
            raise ValueError("durations must be non-negative")

    @property
    def count(self) -> int:
        return len(self.durations)

    @property
    def total(self) -> float:
        return math.fsum(self.durations)

    @property
    def mean(self) -> float:
        return self.total / self.count if self.durations else 0.0

    @property
    def std(self) -> float:
        """Population standard deviation."""
        if not self.durations:
            return 0.0
        mu = self.mean
        return math.sqrt(math.fsum((d - mu) ** 2 for d in self.durations) / self.count)


def time_stage(stage: str, work: Callable, *args, **kwargs):
    """Run ``work`` and return ``(result, StageTiming)`` with one monotonic sample."""
    _check_stage(stage)
    start = time.perf_counter()
    result = work(*args, **kwargs)
    return result, StageTiming(stage, [time.perf_counter() - start])


class TelemetryCollector:
    """Accumulates duration samples per stage.

    Collectors are per worker; :meth:`merge` is a multiset union so merge
    order does not matter.
    """

    def __init__(self):
        self.timings = {s: StageTiming(s) for s in STAGES}

    @contextmanager
    def stage(self, name: str):
        _check_stage(name)
        start = time.perf_counter()
        try:
            yield
        finally:
            self.timings[name].durations.append(time.perf_counter() - start)

    def record(self, timing: StageTiming) -> None:
        self.timings[timing.stage].durations.extend(timing.durations)

    def merge(self, other: "TelemetryCollector") -> "TelemetryCollector":
        out = TelemetryCollector()
        for s in STAGES:
            out.timings[s].durations = sorted(self.timings[s].durations + other.timings[s].durations)
        return out

    def active(self) -> list[StageTiming]:
        return [t for t in self.timings.values() if t.count]


def decompose(timings: Iterable[StageTiming]) -> dict[str, float]:
    """Share of the grand total attributable to each stage."""
    timings = list(timings)
    totals = {t.stage: t.total for t in timings}
    grand = math.fsum(totals.values())
    if not grand > 0:
        raise ValueError("all stage totals are zero")
    return {stage: total / grand for stage, total in totals.items()}


@dataclass(frozen=True)
class PowerModel:
    cpu_w: float = 15.0
    gpu_w: float | None = None  # None: no GPU present
    ram_w: float = 3.0

    def to_dict(self) -> dict:
        return {"cpu_w": self.cpu_w, "gpu_w": self.gpu_w, "ram_w": self.ram_w}


@dataclass(frozen=True)
class EnergyEstimate:
    cpu_kwh: float
    gpu_kwh: float | None
    ram_kwh: float
    power_model: PowerModel

    @property
    def total_kwh(self) -> float:
        return self.cpu_kwh + (self.gpu_kwh or 0.0) + self.ram_kwh

    def to_dict(self) -> dict:
        return {
            "cpu_kwh": self.cpu_kwh,
            "gpu_kwh": self.gpu_kwh,
            "ram_kwh": self.ram_kwh,
            "total_kwh": self.total_kwh,
            "power_model": self.power_model.to_dict(),
        }


def estimate_energy(durations: Mapping[str, float], power: PowerModel) -> EnergyEstimate:
    """Energy in kWh = watts x seconds / 3.6e6, per device.

    ``durations`` maps ``cpu``/``gpu``/``ram`` to busy seconds; a missing
    device counts as zero seconds.
    """
    secs = {dev: float(durations.get(dev, 0.0)) for dev in ("cpu", "gpu", "ram")}
    watts = {"cpu": power.cpu_w, "gpu": power.gpu_w, "ram": power.ram_w}
    for dev in secs:
        if secs[dev] < 0 or (watts[dev] is not None and watts[dev] < 0):
            raise ValueError(f"negative duration or power for {dev}")
    kwh = {dev: (None if watts[dev] is None else watts[dev] * secs[dev] / 3.6e6) for dev in secs}
    return EnergyEstimate(kwh["cpu"], kwh["gpu"], kwh["ram"], power)


def telemetry_report(collector: TelemetryCollector, energy: EnergyEstimate | None = None,
                     wall_s: float | None = None) -> dict:
    stages = collector.active()
    fractions = decompose(stages) if stages and any(t.total > 0 for t in stages) else {}
    out: dict = {}
    for t in stages:
        out[t.stage] = {
            "count": t.count,
            "mean_s": t.mean,
            "std_s": t.std,
            "total_s": t.total,
            "fraction": fractions.get(t.stage, 0.0),
        }
    if energy is not None:
        out["energy"] = energy.to_dict()
    if wall_s is not None:
        out["job"] = {"wall_s": wall_s}
    return out


# ----------------------------------------------------------------------------
# Text renderers
# ----------------------------------------------------------------------------


def render_stage_line(label: str, mean_s: float, std_s: float) -> str:
    return f"{label} ({mean_s:.2f}s ± {std_s:.2f}s)"


def render_stage_summary(timings: Iterable[StageTiming]) -> str:
    return ", ".join(render_stage_line(STAGE_LABELS[t.stage], t.mean, t.std) for t in timings if t.count)


def render_energy_row(name: str, energy: EnergyEstimate, scale: float = 1e6) -> str:
    """One row of the per-sample energy table, values in 1e-6 kWh."""

    def fmt(v):
        return "N/A" if v is None else f"{v * scale:.2f}"

    return "  ".join([name, fmt(energy.cpu_kwh), fmt(energy.gpu_kwh), fmt(energy.ram_kwh), fmt(energy.total_kwh)])
