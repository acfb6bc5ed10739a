"""Evaluation metrics over run outputs: SoC fulfillment and its
distributions, utilization, and per-vehicle energy trajectories."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .engine import ExitRecord

PDF_BIN_WIDTH = 0.05


def fulfillment(record: ExitRecord) -> float:
    """Fraction of the desired SoC target achieved at exit."""
    if record.soc_target <= 0:
        raise ValueError("soc_target must be positive")
    return record.soc_exit / record.soc_target


@dataclass
class FulfillmentStats:
    values: np.ndarray  # sorted
    cdf_x: np.ndarray
    cdf_y: np.ndarray
    bin_edges: np.ndarray
    pdf_mass: np.ndarray
    pdf_density: np.ndarray
    mean: float
    median: float
    p10: float
    p90: float
    n: int
    empty: bool
    vut: "FulfillmentStats | None" = None  # probe-vehicle subset


def distribution(values, bin_width: float = PDF_BIN_WIDTH) -> FulfillmentStats:
    """Empirical CDF at the sample points plus a fixed-bin histogram PDF.

    An empty input yields empty stats with the flag set rather than an
    error, so batch reports survive runs with no measured exits."""
    arr = np.sort(np.asarray(list(values), dtype=float))
    edges = np.arange(0.0, 1.0 + bin_width / 2, bin_width)
    if arr.size == 0:
        return FulfillmentStats(
            values=arr, cdf_x=arr, cdf_y=arr, bin_edges=edges,
            pdf_mass=np.zeros(edges.size - 1), pdf_density=np.zeros(edges.size - 1),
            mean=float("nan"), median=float("nan"), p10=float("nan"),
            p90=float("nan"), n=0, empty=True,
        )
    cdf_y = np.arange(1, arr.size + 1) / arr.size
    counts, _ = np.histogram(arr, bins=edges)
    mass = counts / arr.size
    return FulfillmentStats(
        values=arr,
        cdf_x=arr,
        cdf_y=cdf_y,
        bin_edges=edges,
        pdf_mass=mass,
        pdf_density=mass / bin_width,
        mean=float(arr.mean()),
        median=float(np.median(arr)),
        p10=float(np.percentile(arr, 10)),
        p90=float(np.percentile(arr, 90)),
        n=int(arr.size),
        empty=False,
    )


def fulfillment_stats(exits, bin_width: float = PDF_BIN_WIDTH) -> FulfillmentStats:
    """Distribution of phi over measured exits, with the probe-vehicle
    subset attached."""
    measured = [e for e in exits if e.measured]
    stats = distribution([fulfillment(e) for e in measured], bin_width)
    stats.vut = distribution(
        [fulfillment(e) for e in measured if e.is_vut], bin_width
    )
    return stats


def cdf_at(stats: FulfillmentStats, x: float) -> float:
    """Empirical CDF evaluated at x (right-continuous)."""
    if stats.empty:
        return float("nan")
    return float(np.searchsorted(stats.values, x, side="right") / stats.n)


def overlap_coefficient(a, b, bin_width: float = PDF_BIN_WIDTH) -> float:
    """Histogram overlap of two samples: sum of min bin masses in [0, 1]."""
    sa, sb = distribution(a, bin_width), distribution(b, bin_width)
    if sa.empty or sb.empty:
        return float("nan")
    return float(np.minimum(sa.pdf_mass, sb.pdf_mass).sum())


def trajectory_extract(
    exits,
    deliveries,
    n_high: int,
    n_low: int,
    min_dwell: float = 300.0,
):
    """Cumulative delivered-energy series for the highest- and lowest-demand
    measured vehicles.

    Demand is the requested energy (soc_target - soc_init) * capacity;
    probe vehicles and dwells under min_dwell are excluded.  Returns
    (series, flagged): series maps labels HD1.. / LD1.. to (vehicle_id,
    times, cumulative kWh); flagged is set when fewer vehicles qualify than
    requested."""
    qualifying = [
        e for e in exits
        if e.measured and not e.is_vut and (e.exit_time - e.entry_time) >= min_dwell
    ]
    qualifying.sort(key=lambda e: ((e.soc_target - e.soc_init) * e.capacity, e.id))
    high = list(reversed(qualifying[-n_high:])) if n_high > 0 else []
    low = qualifying[:n_low] if n_low > 0 else []
    flagged = len(high) < n_high or len(low) < n_low

    by_vehicle: dict[int, list] = {}
    for t, vid, kwh in deliveries:
        by_vehicle.setdefault(vid, []).append((t, kwh))
    series = {}
    for label_prefix, group in (("HD", high), ("LD", low)):
        for rank, e in enumerate(group, start=1):
            rows = sorted(by_vehicle.get(e.id, []))
            times = [t for t, _ in rows]
            cum = np.cumsum([kwh for _, kwh in rows]) if rows else np.zeros(0)
            series[f"{label_prefix}{rank}"] = (e.id, times, cum)
    return series, flagged


# --- reading run directories and writing reports -----------------------------

@dataclass
class RunData:
    path: Path
    scenario: dict
    summary: dict
    exits: list
    intervals: list  # raw csv rows as dicts of floats
    deliveries: list


def load_run(run_dir) -> RunData:
    run_dir = Path(run_dir)
    with open(run_dir / "run.json") as fh:
        meta = json.load(fh)
    exits = []
    with open(run_dir / "exits.csv") as fh:
        for row in csv.DictReader(fh):
            exits.append(
                ExitRecord(
                    id=int(row["id"]),
                    is_vut=bool(int(row["is_vut"])),
                    measured=bool(int(row["measured"])),
                    direction=int(row["direction"]),
                    entry_node=int(row["entry_node"]),
                    exit_node=int(row["exit_node"]),
                    entry_time=float(row["entry_time_s"]),
                    exit_time=float(row["exit_time_s"]),
                    soc_init=float(row["soc_init"]),
                    soc_target=float(row["soc_target"]),
                    soc_exit=float(row["soc_exit"]),
                    capacity=float(row["capacity_kwh"]),
                    energy_kwh=float(row["energy_kwh"]),
                )
            )
    intervals = []
    with open(run_dir / "intervals.csv") as fh:
        for row in csv.DictReader(fh):
            intervals.append({k: float(v) for k, v in row.items()})
    deliveries = []
    dpath = run_dir / "deliveries.csv"
    if dpath.exists():
        with open(dpath) as fh:
            for row in csv.DictReader(fh):
                deliveries.append(
                    (float(row["t_s"]), int(row["vehicle_id"]), float(row["energy_kwh"]))
                )
    return RunData(
        path=run_dir,
        scenario=meta["scenario"],
        summary=meta["summary"],
        exits=exits,
        intervals=intervals,
        deliveries=deliveries,
    )


def write_report(run_dirs, out_dir, n_high: int = 3, n_low: int = 3) -> dict:
    """Post-process one or more run directories into report CSVs plus a
    combined summary.json; returns the summary mapping."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for run_dir in run_dirs:
        data = load_run(run_dir)
        name = data.path.name
        rdir = out / name
        rdir.mkdir(parents=True, exist_ok=True)
        measured = [e for e in data.exits if e.measured]
        phis = [fulfillment(e) for e in measured]
        with open(rdir / "fulfillment.csv", "w") as fh:
            fh.write(
                "vehicle_id,is_vut,phi,soc_init,soc_target,soc_exit,"
                "capacity_kwh,energy_kwh\n"
            )
            for e, phi in zip(measured, phis):
                fh.write(
                    f"{e.id},{int(e.is_vut)},{phi!r},{e.soc_init!r},"
                    f"{e.soc_target!r},{e.soc_exit!r},{e.capacity!r},"
                    f"{e.energy_kwh!r}\n"
                )
        stats = distribution(phis)
        with open(rdir / "cdf.csv", "w") as fh:
            fh.write("phi,cdf\n")
            for x, y in zip(stats.cdf_x, stats.cdf_y):
                fh.write(f"{float(x)!r},{float(y)!r}\n")
        series, flagged = trajectory_extract(data.exits, data.deliveries, n_high, n_low)
        with open(rdir / "trajectories.csv", "w") as fh:
            fh.write("label,vehicle_id,t_s,cum_kwh\n")
            for label in sorted(series):
                vid, times, cum = series[label]
                for t, kwh in zip(times, cum):
                    fh.write(f"{label},{vid},{t!r},{float(kwh)!r}\n")
        vut_phis = [phi for e, phi in zip(measured, phis) if e.is_vut]
        vut_stats = distribution(vut_phis)
        entries.append(
            {
                "name": name,
                "strategy": data.summary["strategy"],
                "lambda_vpm": data.summary["lambda_vpm"],
                "vut_period_s": data.summary["vut_period_s"],
                "seed": data.summary["seed"],
                "total_power_kw": data.summary["total_power_kw"],
                "n_measured": len(measured),
                "phi_mean": stats.mean,
                "phi_median": stats.median,
                "phi_p10": stats.p10,
                "phi_p90": stats.p90,
                "vut_n": vut_stats.n,
                "vut_phi_mean": vut_stats.mean,
                "utilization": data.summary["utilization"],
                "delivered_over_requested": data.summary["delivered_over_requested"],
                "trajectories_flagged": flagged,
            }
        )
    summary = {"runs": entries}
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return summary
