import math
import statistics
import time

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xaiport.telemetry import (
    STAGES,
    EnergyEstimate,
    PowerModel,
    StageTiming,
    TelemetryCollector,
    decompose,
    estimate_energy,
    render_energy_row,
    render_stage_line,
    render_stage_summary,
    telemetry_report,
    time_stage,
)

durations = st.lists(st.floats(0, 100, allow_nan=False), min_size=1, max_size=20)


def test_time_stage_measures_sleep():
    result, t = time_stage("inference", time.sleep, 0.05)
    assert result is None and t.durations[0] >= 0.05
    _, t = time_stage("xai", lambda: None)
    assert 0 <= t.durations[0] < 0.01
    with pytest.raises(ValueError):
        time_stage("training", lambda: None)


def test_stage_timing_stats():
    t = StageTiming("xai", [1.0, 2.0, 4.0])
    assert t.count == 3 and t.total == 7.0
    assert t.mean == pytest.approx(statistics.fmean(t.durations), abs=1e-9)
    assert t.std == pytest.approx(statistics.pstdev(t.durations), abs=1e-9)
    with pytest.raises(ValueError):
        StageTiming("xai", [-1.0])


def test_decompose_examples():
    fr = decompose([StageTiming("xai", [1.0]), StageTiming("evaluation", [3.0])])
    assert fr == {"xai": 0.25, "evaluation": 0.75}
    assert decompose([StageTiming("inference", [0.5, 0.2])]) == {"inference": 1.0}
    with pytest.raises(ValueError):
        decompose([StageTiming("xai", [0.0])])


@settings(max_examples=100, deadline=None)
@given(st.lists(durations, min_size=1, max_size=5))
def test_fractions_sum_to_one(samples):
    timings = [StageTiming(s, d) for s, d in zip(STAGES, samples)]
    if not any(t.total > 0 for t in timings):
        return
    assert abs(math.fsum(decompose(timings).values()) - 1) <= 1e-9


@settings(max_examples=100, deadline=None)
@given(st.lists(durations, min_size=1, max_size=5), st.sampled_from([0.125, 0.5, 2.0, 1024.0]),
       st.floats(0.01, 100))
def test_decompose_scale_invariance(samples, pow2, factor):
    timings = [StageTiming(s, d) for s, d in zip(STAGES, samples)]
    if not any(t.total > 1e-3 for t in timings):
        return
    base = decompose(timings)
    scaled = decompose([StageTiming(t.stage, [d * pow2 for d in t.durations]) for t in timings])
    assert scaled == base  # exact for power-of-two factors
    general = decompose([StageTiming(t.stage, [d * factor for d in t.durations]) for t in timings])
    for k in base:
        assert general[k] == pytest.approx(base[k], abs=1e-12)


def test_collector_merge_is_order_independent():
    a, b = TelemetryCollector(), TelemetryCollector()
    a.record(StageTiming("xai", [0.3, 0.1]))
    b.record(StageTiming("xai", [0.2]))
    b.record(StageTiming("inference", [1.0]))
    ab, ba = a.merge(b), b.merge(a)
    for s in STAGES:
        assert ab.timings[s].durations == ba.timings[s].durations
    assert ab.timings["xai"].durations == [0.1, 0.2, 0.3]


def test_collector_stage_context_and_report():
    col = TelemetryCollector()
    start = time.perf_counter()
    with col.stage("data_processing"):
        time.sleep(0.01)
    with col.stage("evaluation"):
        time.sleep(0.02)
    wall = time.perf_counter() - start
    rep = telemetry_report(col, estimate_energy({"cpu": 1.0}, PowerModel()), wall_s=wall)
    assert set(rep) == {"data_processing", "evaluation", "energy", "job"}
    assert set(rep["evaluation"]) == {"count", "mean_s", "std_s", "total_s", "fraction"}
    assert rep["data_processing"]["total_s"] + rep["evaluation"]["total_s"] <= wall
    assert set(rep["energy"]) == {"cpu_kwh", "gpu_kwh", "ram_kwh", "total_kwh", "power_model"}


def test_energy_arithmetic():
    e = estimate_energy({"cpu": 3600.0}, PowerModel(cpu_w=10.0, gpu_w=None, ram_w=0.0))
    assert e.cpu_kwh == 0.01 and e.total_kwh == 0.01 and e.gpu_kwh is None
    z = estimate_energy({}, PowerModel(gpu_w=50.0))
    assert z.cpu_kwh == z.gpu_kwh == z.ram_kwh == z.total_kwh == 0.0
    with pytest.raises(ValueError):
        estimate_energy({"cpu": -1.0}, PowerModel())
    with pytest.raises(ValueError):
        estimate_energy({"cpu": 1.0}, PowerModel(cpu_w=-5))


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 1e4), st.floats(0, 1e4), st.floats(0, 1e4))
def test_energy_total_is_exact_sum(c, g, r):
    e = estimate_energy({"cpu": c, "gpu": g, "ram": r}, PowerModel(cpu_w=15, gpu_w=70, ram_w=3))
    assert e.total_kwh == e.cpu_kwh + e.gpu_kwh + e.ram_kwh


def test_stage_line_fixture():
    assert render_stage_line("Data Processing", 0.12, 0.03) == "Data Processing (0.12s ± 0.03s)"
    t = StageTiming("data_processing", [0.09, 0.15])
    assert render_stage_summary([t]) == "Data Processing (0.12s ± 0.03s)"


def test_energy_row_fixtures():
    # per-sample kWh values chosen so each cell and the exact total round as printed
    pm = PowerModel()
    grad = EnergyEstimate(8.317e-6, 19.497e-6, 0.097e-6, pm)
    assert render_energy_row("GradCAM", grad) == "GradCAM  8.32  19.50  0.10  27.91"
    data = EnergyEstimate(3.60e-6, None, 0.08e-6, pm)
    assert render_energy_row("Data process", data) == "Data process  3.60  N/A  0.08  3.68"
