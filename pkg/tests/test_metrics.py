import dataclasses

import numpy as np
import pytest

from dicsim import metrics
from dicsim import scenario as sc
from dicsim.engine import ExitRecord, run_simulation


def exit_record(vid=0, soc_exit=0.4, soc_target=0.8, soc_init=0.2, capacity=50.0,
                is_vut=False, measured=True, entry=0.0, exit_t=600.0):
    return ExitRecord(
        id=vid, is_vut=is_vut, measured=measured, direction=0, entry_node=1,
        exit_node=5, entry_time=entry, exit_time=exit_t, soc_init=soc_init,
        soc_target=soc_target, soc_exit=soc_exit, capacity=capacity,
        energy_kwh=1.0,
    )


def test_fulfillment_examples():
    assert metrics.fulfillment(exit_record(soc_exit=0.4, soc_target=0.8)) == 0.5
    assert metrics.fulfillment(exit_record(soc_exit=0.8, soc_target=0.8)) == 1.0
    assert metrics.fulfillment(
        exit_record(soc_exit=0.3, soc_target=1.0, is_vut=True)
    ) == pytest.approx(0.3)


def test_cdf_example():
    stats = metrics.distribution([0.5, 0.5, 1.0])
    assert metrics.cdf_at(stats, 0.5) == pytest.approx(2 / 3)
    assert metrics.cdf_at(stats, 1.0) == 1.0


def test_cdf_monotone_reaches_one():
    rng = np.random.default_rng(3)
    stats = metrics.distribution(rng.uniform(0, 1, size=500))
    assert np.all(np.diff(stats.cdf_y) >= 0)
    assert stats.cdf_y[-1] == 1.0
    assert stats.pdf_mass.sum() == pytest.approx(1.0)


def test_all_equal_values_step_function():
    stats = metrics.distribution([0.7] * 10)
    assert metrics.cdf_at(stats, 0.699) == 0.0
    assert metrics.cdf_at(stats, 0.7) == 1.0


def test_cdf_within_dkw_band():
    n = 10_000
    rng = np.random.default_rng(42)
    sample = rng.uniform(0, 1, size=n)
    stats = metrics.distribution(sample)
    # DKW: sup |F_n - F| <= sqrt(ln(2/alpha) / 2n), alpha = 1e-6
    eps = np.sqrt(np.log(2e6) / (2 * n))
    dev = np.abs(stats.cdf_y - stats.cdf_x).max()
    assert dev <= eps


def test_empty_distribution_flagged():
    stats = metrics.distribution([])
    assert stats.empty and stats.n == 0


def test_overlap_coefficient_disjoint_and_identical():
    a = [0.1, 0.12, 0.14]
    b = [0.8, 0.82, 0.9]
    assert metrics.overlap_coefficient(a, b) == 0.0
    assert metrics.overlap_coefficient(a, a) == pytest.approx(1.0)


def deliveries_for(vid, kwhs, t0=0.0, dt=5.0):
    return [(t0 + i * dt, vid, kwh) for i, kwh in enumerate(kwhs)]


def test_trajectory_extract_ranking():
    exits = [
        exit_record(vid=0, soc_init=0.1, soc_target=1.0, capacity=80.0),  # demand 72
        exit_record(vid=1, soc_init=0.4, soc_target=0.6, capacity=40.0),  # demand 8
        exit_record(vid=2, soc_init=0.2, soc_target=0.8, capacity=60.0),  # demand 36
        exit_record(vid=3, soc_init=0.1, soc_target=0.9, capacity=70.0,
                    exit_t=100.0),  # dwell too short
        exit_record(vid=4, soc_init=0.05, soc_target=1.0, is_vut=True),  # probe: excluded
    ]
    deliveries = sum((deliveries_for(v, [0.1, 0.2, 0.3]) for v in range(5)), [])
    series, flagged = metrics.trajectory_extract(exits, deliveries, 2, 1)
    assert not flagged
    assert series["HD1"][0] == 0
    assert series["HD2"][0] == 2
    assert series["LD1"][0] == 1
    cum = series["HD1"][2]
    assert np.all(np.diff(cum) >= 0)
    assert cum[-1] == pytest.approx(0.6)


def test_trajectory_extract_degenerate_single_vehicle():
    exits = [exit_record(vid=7)]
    series, flagged = metrics.trajectory_extract(exits, deliveries_for(7, [0.5]), 3, 3)
    assert flagged
    assert series["HD1"][0] == 7 and series["LD1"][0] == 7


def test_trajectory_extract_zero_high():
    exits = [exit_record(vid=7)]
    series, _ = metrics.trajectory_extract(exits, [], 0, 1)
    assert not any(label.startswith("HD") for label in series)


def test_write_report_roundtrip(tmp_path):
    corridor, stripes, demand, config = sc.build_default_scenario(
        lambda_vpm=8.0, vut_period=60.0, seed=5, strategy="benchmark",
    )
    config = dataclasses.replace(config, warmup=30.0, measure=600.0)
    run_dir = tmp_path / "lam8_vut60_benchmark"
    run_simulation(corridor, stripes, demand, config, out_dir=run_dir)
    summary = metrics.write_report([run_dir], tmp_path / "report")
    (entry,) = summary["runs"]
    assert entry["name"] == "lam8_vut60_benchmark"
    assert entry["n_measured"] > 0
    assert 0.0 <= entry["phi_mean"] <= 1.0
    rdir = tmp_path / "report" / "lam8_vut60_benchmark"
    for fname in ("fulfillment.csv", "cdf.csv", "trajectories.csv"):
        assert (rdir / fname).exists()
    assert (tmp_path / "report" / "summary.json").exists()
    # the CSVs round-trip through load_run + distribution
    data = metrics.load_run(run_dir)
    phis = [metrics.fulfillment(e) for e in data.exits if e.measured]
    assert len(phis) == entry["n_measured"]


def test_fulfillment_stats_with_vut_subset():
    exits = [
        exit_record(vid=0, soc_exit=0.4, soc_target=0.8),
        exit_record(vid=1, soc_exit=0.3, soc_target=1.0, is_vut=True),
        exit_record(vid=2, soc_exit=0.6, soc_target=0.6, measured=False),
    ]
    stats = metrics.fulfillment_stats(exits)
    assert stats.n == 2  # unmeasured excluded
    assert stats.vut.n == 1
    assert stats.vut.values[0] == pytest.approx(0.3)
