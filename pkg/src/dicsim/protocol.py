"""Vehicle / ITS-PM data exchange for one control interval.

Implements the synchronous round: every vehicle inside the DIC area reports
its battery state and route, the power manager answers with one allocation
message per reported vehicle.  Rounds are logged as newline-delimited JSON
records under a versioned header, diffable and replayable: a parsed log
reconstructs the exact allocator inputs so strategies can be A/B-compared on
a frozen traffic trace.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

from .benchmark import AllocationPlan
from .mobility import VehicleSnapshot

FORMAT_NAME = "dic-rounds"
FORMAT_VERSION = 1


class ProtocolError(ValueError):
    """Malformed log record or inconsistent round content."""


@dataclass(frozen=True)
class VehicleReport:
    """Vehicle to ITS-PM: battery state, contract, and route context.

    The kinematic fields (direction, speed, windowed mean speed) arrive at
    the power manager through periodic awareness messages; they are stored
    alongside the dedicated power-management fields so a logged round fully
    determines the allocator input."""

    vehicle_id: int
    bc: float  # battery capacity [kWh]
    bl: float  # battery level, SoC fraction
    bte: float  # battery target at exit
    padp: float  # max power absorbable by the on-board pad [kW]
    route: tuple  # (entry node, exit node, current position [m])
    direction: int
    speed: float
    avg_speed: float
    is_vut: bool = False

    def __post_init__(self):
        if not 0.0 <= self.bl <= 1.0:
            raise ProtocolError(f"vehicle {self.vehicle_id}: BL out of [0, 1]")
        if not 0.0 < self.bte <= 1.0:
            raise ProtocolError(f"vehicle {self.vehicle_id}: BTE out of (0, 1]")
        if self.bc <= 0 or self.padp <= 0:
            raise ProtocolError(f"vehicle {self.vehicle_id}: BC and PADP must be positive")


@dataclass(frozen=True)
class AllocationMsg:
    """ITS-PM to vehicle: the power assignment for the next interval."""

    vehicle_id: int
    pcoil: float  # max power available from the coils of the current stripe
    pass_kw: float  # assigned power for the next dt
    dt: float  # time to the next assignment [s]
    ptol: float  # tolerance on pass_kw (delivery is exact here)
    exit_pos: float  # estimated exit point [m]
    tex: float  # estimated residual time to exit [s]

    def __post_init__(self):
        if self.pass_kw < 0:
            raise ProtocolError(f"vehicle {self.vehicle_id}: negative PASS")
        if self.pass_kw > self.pcoil + self.ptol + 1e-9:
            raise ProtocolError(f"vehicle {self.vehicle_id}: PASS beyond PCOIL+PTOL")
        if self.dt <= 0:
            raise ProtocolError(f"vehicle {self.vehicle_id}: DT must be positive")


@dataclass
class RoundLog:
    """One synchronous exchange: reports in, allocations out."""

    t: float
    reports: list
    allocations: list
    solve_ms: float = 0.0
    stripe_kw: dict | None = None

    def __post_init__(self):
        if len(self.reports) != len(self.allocations) and self.allocations:
            raise ProtocolError("one allocation per reported vehicle required")


def collect_reports(snapshots) -> list[VehicleReport]:
    """One report per vehicle inside the DIC area, fields copied losslessly."""
    return [
        VehicleReport(
            vehicle_id=v.id,
            bc=v.capacity,
            bl=v.soc,
            bte=v.soc_target,
            padp=v.p_on,
            route=(v.entry_node, v.exit_node, v.position),
            direction=v.direction,
            speed=v.speed,
            avg_speed=v.avg_speed,
            is_vut=v.is_vut,
        )
        for v in snapshots
    ]


def dispatch_allocations(
    plan: AllocationPlan,
    snapshots,
    taus: dict[int, float],
    index,
    delta_t: float,
    ptol: float = 0.0,
) -> list[AllocationMsg]:
    """Build the ITS-PM answer from the first-step plan.

    A vehicle missing from the plan is a defect: the round aborts."""
    out = []
    for v in snapshots:
        if v.id not in plan.per_vehicle:
            raise ProtocolError(f"vehicle {v.id} missing from allocation plan")
        sid = plan.assigned_stripe.get(v.id)
        pcoil = index.stripes[sid].coil_power_nom if sid is not None else 0.0
        out.append(
            AllocationMsg(
                vehicle_id=v.id,
                pcoil=pcoil,
                pass_kw=plan.per_vehicle[v.id],
                dt=delta_t,
                ptol=ptol,
                exit_pos=v.exit_pos,
                tex=taus[v.id],
            )
        )
    return out


# --- wire codec --------------------------------------------------------------

def report_to_record(r: VehicleReport) -> dict:
    return {
        "id": r.vehicle_id,
        "BC": r.bc,
        "BL": r.bl,
        "BTE": r.bte,
        "PADP": r.padp,
        "ROUTE": [r.route[0], r.route[1], r.route[2]],
        "dir": r.direction,
        "speed": r.speed,
        "avg_speed": r.avg_speed,
        "vut": r.is_vut,
    }


def report_from_record(d: dict) -> VehicleReport:
    return VehicleReport(
        vehicle_id=int(d["id"]),
        bc=float(d["BC"]),
        bl=float(d["BL"]),
        bte=float(d["BTE"]),
        padp=float(d["PADP"]),
        route=(int(d["ROUTE"][0]), int(d["ROUTE"][1]), float(d["ROUTE"][2])),
        direction=int(d["dir"]),
        speed=float(d["speed"]),
        avg_speed=float(d["avg_speed"]),
        is_vut=bool(d["vut"]),
    )


def allocation_to_record(a: AllocationMsg) -> dict:
    return {
        "id": a.vehicle_id,
        "PCOIL": a.pcoil,
        "PASS": a.pass_kw,
        "DT": a.dt,
        "PTOL": a.ptol,
        "EXIT": a.exit_pos,
        "TEX": a.tex,
    }


def allocation_from_record(d: dict) -> AllocationMsg:
    return AllocationMsg(
        vehicle_id=int(d["id"]),
        pcoil=float(d["PCOIL"]),
        pass_kw=float(d["PASS"]),
        dt=float(d["DT"]),
        ptol=float(d["PTOL"]),
        exit_pos=float(d["EXIT"]),
        tex=float(d["TEX"]),
    )


def round_to_record(r: RoundLog) -> dict:
    rec = {
        "t": r.t,
        "solve_ms": r.solve_ms,
        "reports": [report_to_record(x) for x in r.reports],
        "allocations": [allocation_to_record(x) for x in r.allocations],
    }
    if r.stripe_kw is not None:
        rec["stripe_kw"] = {str(k): v for k, v in r.stripe_kw.items()}
    return rec


def round_from_record(d: dict) -> RoundLog:
    stripe_kw = None
    if "stripe_kw" in d:
        stripe_kw = {int(k): float(v) for k, v in d["stripe_kw"].items()}
    return RoundLog(
        t=float(d["t"]),
        reports=[report_from_record(x) for x in d["reports"]],
        allocations=[allocation_from_record(x) for x in d["allocations"]],
        solve_ms=float(d.get("solve_ms", 0.0)),
        stripe_kw=stripe_kw,
    )


class RoundLogWriter:
    """Append-only writer: versioned header line, one JSON record per round."""

    def __init__(self, path, scenario_echo: dict):
        self._fh = open(path, "w")
        header = {
            "format": FORMAT_NAME,
            "version": FORMAT_VERSION,
            "scenario": scenario_echo,
        }
        self._fh.write(json.dumps(header) + "\n")

    def write(self, round_log: RoundLog) -> None:
        self._fh.write(json.dumps(round_to_record(round_log)) + "\n")

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_rounds(path):
    """Parse a round log: returns (header dict, list of RoundLog).

    Malformed records raise ProtocolError naming the line number.  An empty
    file yields an empty stream with an empty header."""
    header = {}
    rounds = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ProtocolError(f"{path}:{lineno}: malformed record: {exc}") from exc
            if lineno == 1:
                if record.get("format") != FORMAT_NAME:
                    raise ProtocolError(f"{path}:1: not a {FORMAT_NAME} file")
                if record.get("version") != FORMAT_VERSION:
                    raise ProtocolError(
                        f"{path}:1: unsupported version {record.get('version')}"
                    )
                header = record
                continue
            try:
                rounds.append(round_from_record(record))
            except (KeyError, TypeError, ValueError) as exc:
                raise ProtocolError(f"{path}:{lineno}: bad round record: {exc}") from exc
    return header, rounds
