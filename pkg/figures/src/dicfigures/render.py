"""Render comparison figures from simulator output CSVs.

Four kinds are supported, mirroring the evaluation plots of the power
allocation study:

- power_timeseries: requested vs delivered power per traffic level, one
  column per strategy, with the capacity limit as a red dashed line.
  Input: a directory of run directories (each with run.json + intervals.csv).
- trajectories: cumulative delivered energy of the selected highest/lowest
  demand vehicles.  Input: a report directory (<run>/trajectories.csv).
- fulfillment_cdf: SoC-fulfillment CDF overlay, benchmark vs MPC.
  Input: a report directory (<run>/cdf.csv + summary.json).
- fulfillment_pdf: SoC-fulfillment histogram overlay; restricted to probe
  vehicles when the runs contain any.  Input: a report directory
  (<run>/fulfillment.csv + summary.json).

Only the documented CSV schemas are consumed; the simulator itself is never
imported.  Rendering is deterministic: identical inputs produce identical
image bytes.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

KINDS = ("power_timeseries", "trajectories", "fulfillment_cdf", "fulfillment_pdf")

STRATEGY_COLOR = {"benchmark": "tab:blue", "mpc": "tab:orange"}
STRATEGY_LABEL = {"benchmark": "BENCH", "mpc": "OPT"}


class FigureError(ValueError):
    """Raised for unknown kinds, missing inputs, or schema mismatches."""


@dataclass
class FigureSpec:
    kind: str
    input_dir: Path
    output: Path
    dpi: int = 120
    title: str | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise FigureError(f"unknown figure kind {self.kind!r}")
        self.input_dir = Path(self.input_dir)
        self.output = Path(self.output)
        if not self.input_dir.is_dir():
            raise FigureError(f"input directory {self.input_dir} does not exist")


def _read_csv(path: Path, required: tuple[str, ...]) -> list[dict]:
    if not path.exists():
        raise FigureError(f"missing input file {path}")
    with open(path) as fh:
        reader = csv.DictReader(fh)
        headers = reader.fieldnames or []
        for col in required:
            if col not in headers:
                raise FigureError(f"{path}: missing column {col!r}")
        rows = list(reader)
    if not rows:
        raise FigureError(f"{path}: no data rows")
    return rows


def _run_dirs(root: Path) -> list[Path]:
    if (root / "run.json").exists():
        return [root]
    dirs = sorted(d for d in root.iterdir() if (d / "run.json").exists())
    if not dirs:
        raise FigureError(f"{root}: no run directories (run.json) found")
    return dirs


def _report_runs(root: Path) -> list[dict]:
    summary = root / "summary.json"
    if not summary.exists():
        raise FigureError(f"{root}: missing summary.json (run `dicsim report` first)")
    with open(summary) as fh:
        data = json.load(fh)
    runs = data.get("runs", [])
    if not runs:
        raise FigureError(f"{summary}: no runs listed")
    return runs


def _save(fig, spec: FigureSpec) -> None:
    spec.output.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(spec.output, dpi=spec.dpi, metadata={"Software": "dic-figures"})
    plt.close(fig)


def build_figure(spec: FigureSpec):
    """Construct the matplotlib figure for a spec without saving it."""
    if spec.kind == "power_timeseries":
        return _render_power(spec)
    if spec.kind == "trajectories":
        return _render_trajectories(spec)
    if spec.kind == "fulfillment_cdf":
        return _render_cdf(spec)
    return _render_pdf(spec)


def render(spec: FigureSpec) -> Path:
    """Render one figure; returns the output path.

    Raises FigureError (and writes nothing) when inputs are missing, empty,
    or do not match the documented schemas."""
    fig = build_figure(spec)
    _save(fig, spec)
    return spec.output


def _render_power(spec: FigureSpec) -> None:
    panels = []
    for run_dir in _run_dirs(spec.input_dir):
        with open(run_dir / "run.json") as fh:
            meta = json.load(fh)
        rows = _read_csv(run_dir / "intervals.csv",
                         ("t_s", "requested_kw", "delivered_kw", "measured"))
        summary = meta["summary"]
        panels.append(
            {
                "name": run_dir.name,
                "strategy": summary["strategy"],
                "lambda": summary["lambda_vpm"],
                "capacity": summary["total_power_kw"],
                "t": [float(r["t_s"]) / 60.0 for r in rows],
                "requested": [float(r["requested_kw"]) / 1000.0 for r in rows],
                "delivered": [float(r["delivered_kw"]) / 1000.0 for r in rows],
            }
        )
    lambdas = sorted({p["lambda"] for p in panels})
    strategies = [s for s in ("benchmark", "mpc") if any(p["strategy"] == s for p in panels)]
    fig, axes = plt.subplots(
        len(lambdas), len(strategies),
        figsize=(5.5 * len(strategies), 2.6 * len(lambdas)),
        squeeze=False, sharex="col",
    )
    for i, lam in enumerate(lambdas):
        for j, strategy in enumerate(strategies):
            ax = axes[i][j]
            match = [p for p in panels
                     if p["lambda"] == lam and p["strategy"] == strategy]
            for p in match:
                ax.plot(p["t"], p["requested"], color="tab:green", lw=0.9,
                        label="requested")
                ax.plot(p["t"], p["delivered"], color="tab:blue", lw=0.9,
                        label="delivered")
                ax.axhline(p["capacity"] / 1000.0, color="red", ls="--", lw=1.0,
                           label="capacity")
            ax.set_title(f"$\\lambda$={lam:g} vpm, {STRATEGY_LABEL.get(strategy, strategy)}",
                         fontsize=9)
            ax.set_ylabel("power [MW]", fontsize=8)
            if i == len(lambdas) - 1:
                ax.set_xlabel("time [min]", fontsize=8)
            ax.tick_params(labelsize=7)
            if i == 0 and j == 0:
                ax.legend(fontsize=7, loc="upper left")
    if spec.title:
        fig.suptitle(spec.title)
    fig.tight_layout()
    return fig


def _render_trajectories(spec: FigureSpec) -> None:
    runs = _report_runs(spec.input_dir)
    fig, axes = plt.subplots(1, len(runs), figsize=(4.5 * len(runs), 3.2),
                             squeeze=False, sharey=True)
    drew = False
    for j, entry in enumerate(runs):
        ax = axes[0][j]
        rows = _read_csv(spec.input_dir / entry["name"] / "trajectories.csv",
                         ("label", "vehicle_id", "t_s", "cum_kwh"))
        series: dict[str, list] = {}
        for row in rows:
            series.setdefault(row["label"], []).append(
                (float(row["t_s"]) / 60.0, float(row["cum_kwh"]))
            )
        for label in sorted(series):
            pts = sorted(series[label])
            style = "-" if label.startswith("HD") else "--"
            ax.plot([p[0] for p in pts], [p[1] for p in pts], style, lw=1.2,
                    label=label)
            drew = True
        ax.set_title(entry["name"], fontsize=9)
        ax.set_xlabel("time [min]", fontsize=8)
        if j == 0:
            ax.set_ylabel("cumulative energy [kWh]", fontsize=8)
        ax.legend(fontsize=6)
        ax.tick_params(labelsize=7)
    if not drew:
        plt.close(fig)
        raise FigureError("no trajectory series found in the report")
    if spec.title:
        fig.suptitle(spec.title)
    fig.tight_layout()
    return fig


def _render_cdf(spec: FigureSpec) -> None:
    runs = _report_runs(spec.input_dir)
    fig, ax = plt.subplots(figsize=(5.2, 3.4))
    for entry in runs:
        rows = _read_csv(spec.input_dir / entry["name"] / "cdf.csv", ("phi", "cdf"))
        xs = [float(r["phi"]) for r in rows]
        ys = [float(r["cdf"]) for r in rows]
        strategy = entry["strategy"]
        ax.step([0.0] + xs + [1.0], [0.0] + ys + [ys[-1]], where="post",
                color=STRATEGY_COLOR.get(strategy, "gray"),
                label=f"{STRATEGY_LABEL.get(strategy, strategy)} ({entry['name']})",
                lw=1.4)
    ax.set_xlabel("SoC fulfillment $\\phi$")
    ax.set_ylabel("CDF")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    ax.legend(fontsize=7)
    ax.grid(alpha=0.3)
    if spec.title:
        ax.set_title(spec.title, fontsize=10)
    fig.tight_layout()
    return fig


def _render_pdf(spec: FigureSpec) -> None:
    runs = _report_runs(spec.input_dir)
    fig, ax = plt.subplots(figsize=(5.2, 3.4))
    bin_width = 0.05
    edges = [i * bin_width for i in range(int(1.0 / bin_width) + 1)]
    any_vut = False
    samples = {}
    for entry in runs:
        rows = _read_csv(spec.input_dir / entry["name"] / "fulfillment.csv",
                         ("vehicle_id", "is_vut", "phi"))
        vut_phis = [float(r["phi"]) for r in rows if int(r["is_vut"])]
        if vut_phis:
            any_vut = True
        samples[entry["name"]] = (entry["strategy"], vut_phis,
                                  [float(r["phi"]) for r in rows])
    for name, (strategy, vut_phis, all_phis) in samples.items():
        phis = vut_phis if any_vut else all_phis
        if not phis:
            continue
        ax.hist(phis, bins=edges, density=True, histtype="stepfilled", alpha=0.45,
                color=STRATEGY_COLOR.get(strategy, "gray"),
                label=f"{STRATEGY_LABEL.get(strategy, strategy)} ({name})")
    ax.set_xlabel("SoC fulfillment $\\phi$"
                  + (" (probe vehicles)" if any_vut else ""))
    ax.set_ylabel("PDF")
    ax.set_xlim(0, 1)
    ax.legend(fontsize=7)
    ax.grid(alpha=0.3)
    if spec.title:
        ax.set_title(spec.title, fontsize=10)
    fig.tight_layout()
    return fig
