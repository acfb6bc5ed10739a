"""Closed-loop simulation: arrivals, mobility ticks, control rounds,
energy delivery, and run outputs.

Every control interval takes a snapshot of the fleet, runs the configured
allocator (uncoordinated benchmark or MPC), logs the message round, and then
delivers power tick by tick: a vehicle receives its assigned power only
while it is on the stripe the plan assigned it to, prorated over the
fraction of a tick it spends on the road.  Energy bookkeeping is exact so
conservation can be asserted per run.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass
from pathlib import Path

from . import energy, protocol
from .benchmark import AllocationPlan, allocate_benchmark
from .mobility import StripeIndex, VehicleSnapshot, VehicleState, snapshot, step
from .mpc import MpcAllocator
from .scenario import (
    CorridorSpec,
    SimConfig,
    StripeSpec,
    TrafficDemand,
    assign_profiles,
    generate_arrivals,
    scenario_from_dict,
    scenario_to_dict,
    validate_scenario,
)

RUN_FORMAT = "dic-run"
RUN_VERSION = 1


@dataclass
class ExitRecord:
    id: int
    is_vut: bool
    measured: bool
    direction: int
    entry_node: int
    exit_node: int
    entry_time: float
    exit_time: float
    soc_init: float
    soc_target: float
    soc_exit: float
    capacity: float
    energy_kwh: float


@dataclass
class IntervalRecord:
    t: float
    measured: bool
    requested_kw: float
    delivered_kwh: float
    per_stripe_kwh: dict
    assigned_kw: dict


@dataclass
class RunResult:
    scenario: dict
    summary: dict
    exits: list
    intervals: list
    deliveries: list  # (t, vehicle_id, kwh) per interval, kwh > 0 only

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "exits.csv", "w") as fh:
            fh.write(
                "id,is_vut,measured,direction,entry_node,exit_node,"
                "entry_time_s,exit_time_s,soc_init,soc_target,soc_exit,"
                "capacity_kwh,energy_kwh\n"
            )
            for e in self.exits:
                fh.write(
                    f"{e.id},{int(e.is_vut)},{int(e.measured)},{e.direction},"
                    f"{e.entry_node},{e.exit_node},{e.entry_time!r},"
                    f"{e.exit_time!r},{e.soc_init!r},{e.soc_target!r},"
                    f"{e.soc_exit!r},{e.capacity!r},{e.energy_kwh!r}\n"
                )
        stripe_ids = sorted(self.intervals[0].per_stripe_kwh) if self.intervals else []
        with open(out / "intervals.csv", "w") as fh:
            cols = ["t_s", "measured", "requested_kw", "delivered_kw"]
            cols += [f"delivered_kw_s{sid}" for sid in stripe_ids]
            cols += [f"assigned_kw_s{sid}" for sid in stripe_ids]
            fh.write(",".join(cols) + "\n")
            dt_h = self.summary["control_interval_s"] / 3600.0
            for rec in self.intervals:
                row = [
                    repr(rec.t), str(int(rec.measured)), repr(rec.requested_kw),
                    repr(rec.delivered_kwh / dt_h),
                ]
                row += [repr(rec.per_stripe_kwh[sid] / dt_h) for sid in stripe_ids]
                row += [repr(rec.assigned_kw[sid]) for sid in stripe_ids]
                fh.write(",".join(row) + "\n")
        if self.deliveries:
            with open(out / "deliveries.csv", "w") as fh:
                fh.write("t_s,vehicle_id,energy_kwh\n")
                for t, vid, kwh in self.deliveries:
                    fh.write(f"{t!r},{vid},{kwh!r}\n")
        with open(out / "run.json", "w") as fh:
            json.dump(
                {
                    "format": RUN_FORMAT,
                    "version": RUN_VERSION,
                    "scenario": self.scenario,
                    "summary": self.summary,
                },
                fh,
                indent=2,
                sort_keys=True,
            )
            fh.write("\n")


class Simulation:
    """Single-threaded control loop over one scenario and strategy."""

    def __init__(
        self,
        corridor: CorridorSpec,
        stripes: list[StripeSpec],
        demand: TrafficDemand,
        config: SimConfig,
        out_dir=None,
    ):
        validate_scenario(corridor, stripes, demand, config)
        self.corridor = corridor
        self.stripes = stripes
        self.demand = demand
        self.config = config
        self.index = StripeIndex(stripes)
        self.model = energy.ConsumptionModel(config.idle_kw, config.per_speed_kw)
        self.out_dir = Path(out_dir) if out_dir is not None else None
        if config.strategy == "mpc":
            self.mpc = MpcAllocator(
                self.index, config.mpc, config, self.model, config.total_power
            )
        else:
            self.mpc = None

    def _allocate(self, t: float, snapshots):
        if self.mpc is not None:
            return self.mpc.allocate(t, snapshots)
        plan = allocate_benchmark(
            t,
            snapshots,
            self.index,
            self.model,
            self.config.t_c,
        )
        return plan, None

    def run(self) -> RunResult:
        cfg = self.config
        tick = cfg.tick
        total_time = cfg.warmup + cfg.measure
        n_ticks = int(round(total_time / tick))
        interval_ticks = int(round(cfg.control_interval / tick))
        history_len = max(1, int(round(cfg.avg_speed_window / tick)))

        arrivals = generate_arrivals(self.demand, (0.0, total_time))
        profiles = assign_profiles(arrivals, cfg, self.demand.seed)

        vehicles: list[VehicleState] = []
        plan = AllocationPlan(timestamp=-1.0)
        exits_out: list[ExitRecord] = []
        intervals: list[IntervalRecord] = []
        deliveries: list[tuple] = []
        dt_h = cfg.control_interval / 3600.0

        # run totals for conservation and utilization accounting
        delivered_total = 0.0
        delivered_eta_total = 0.0
        consumption_total = 0.0
        battery_gain_total = 0.0
        clamp_total = 0.0
        requested_kwh_measured = 0.0
        delivered_kwh_measured = 0.0
        inserted = 0
        feas = {"sum_ps_kw": 0.0, "eq7_kw": 0.0, "eq8_kw": 0.0, "eq9_kw": 0.0}
        qp_stats: list = []

        rounds_writer = None
        traj_fh = None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            echo = scenario_to_dict(self.corridor, self.stripes, self.demand, cfg)
            rounds_writer = protocol.RoundLogWriter(self.out_dir / "rounds.log", echo)
            if cfg.dump_trajectories:
                traj_fh = open(self.out_dir / "trajectory.csv", "w")
                traj_fh.write("t_s,vehicle_id,position_m,speed_ms,soc\n")

        current: IntervalRecord | None = None
        interval_vehicle_kwh: dict[int, float] = {}

        def flush_interval():
            nonlocal current
            if current is None:
                return
            intervals.append(current)
            for vid in sorted(interval_vehicle_kwh):
                kwh = interval_vehicle_kwh[vid]
                if kwh > 0.0 and cfg.write_deliveries:
                    deliveries.append((current.t, vid, kwh))
            interval_vehicle_kwh.clear()
            current = None

        arrival_idx = 0
        try:
            for tick_idx in range(n_ticks):
                t = tick_idx * tick

                while arrival_idx < len(arrivals) and arrivals[arrival_idx].time <= t:
                    arr = arrivals[arrival_idx]
                    prof = profiles[arrival_idx]
                    arrival_idx += 1
                    entry_pos = self.corridor.node_position(arr.entry)
                    exit_pos = self.corridor.node_position(arr.exit)
                    direction = 0 if exit_pos > entry_pos else 1
                    vehicles.append(
                        VehicleState(
                            id=inserted,
                            direction=direction,
                            position=entry_pos,
                            speed=self.corridor.free_flow_speed,
                            entry_node=arr.entry,
                            exit_node=arr.exit,
                            entry_time=arr.time,
                            soc=min(prof.soc_init, prof.soc_target),
                            soc_target=prof.soc_target,
                            capacity=prof.capacity,
                            p_on=cfg.p_on,
                            exit_pos=exit_pos,
                            is_vut=arr.is_vut,
                            measured=arr.time >= cfg.warmup,
                            speed_history=deque(maxlen=history_len),
                        )
                    )
                    inserted += 1

                if tick_idx % interval_ticks == 0:
                    flush_interval()
                    snapshots = [snapshot(v) for v in vehicles]
                    _, requested_kw = energy.aggregate_requests(
                        vehicles, self.index, self.model, cfg.t_c
                    )
                    plan, stats = self._allocate(t, snapshots)
                    if stats is not None:
                        qp_stats.append(stats)
                    self._track_feasibility(plan, feas)
                    if rounds_writer is not None:
                        taus = {
                            v.id: abs(v.exit_pos - v.position)
                            / max(v.avg_speed, cfg.eps_speed)
                            for v in snapshots
                        }
                        reports = protocol.collect_reports(snapshots)
                        allocations = protocol.dispatch_allocations(
                            plan, snapshots, taus, self.index, cfg.control_interval
                        )
                        rounds_writer.write(
                            protocol.RoundLog(
                                t=t,
                                reports=reports,
                                allocations=allocations,
                                solve_ms=stats.solve_ms if stats else 0.0,
                                stripe_kw=dict(plan.per_stripe),
                            )
                        )
                    measured = t >= cfg.warmup
                    if measured:
                        requested_kwh_measured += requested_kw * dt_h
                    current = IntervalRecord(
                        t=t,
                        measured=measured,
                        requested_kw=requested_kw,
                        delivered_kwh=0.0,
                        per_stripe_kwh={s.id: 0.0 for s in self.stripes},
                        assigned_kw=dict(plan.per_stripe),
                    )

                if self.mpc is None:
                    # uncoordinated charging is instantaneous: no exchange, no
                    # control cadence; vehicles draw whenever coupled, so the
                    # static-share split is re-evaluated every tick
                    plan = allocate_benchmark(
                        t, vehicles, self.index, self.model, cfg.t_c
                    )
                occ_before = {
                    v.id: self.index.occupancy(v.position, v.direction)
                    for v in vehicles
                }
                exit_events = step(vehicles, self.corridor, tick, cfg.density_window)

                updates = [(v, 1.0) for v in vehicles] + exit_events
                for v, fraction in updates:
                    if fraction <= 0.0:
                        continue
                    span = tick * fraction
                    sid = plan.assigned_stripe.get(v.id)
                    p_kw = plan.per_vehicle.get(v.id, 0.0)
                    delivering = (
                        p_kw > 0.0 and sid is not None and occ_before.get(v.id) == sid
                    )
                    c_kwh = energy.consumption(v, self.model, span)
                    if delivering:
                        stripe = self.index.stripes[sid]
                        eta = stripe.efficiency
                        delivered_kwh = p_kw * span / 3600.0
                    else:
                        eta = 1.0
                        delivered_kwh = 0.0
                    new_soc, clamp_kwh = energy.apply_soc_dynamics(
                        v, p_kw if delivering else 0.0, span, eta, c_kwh
                    )
                    battery_gain_total += (new_soc - v.soc) * v.capacity
                    v.soc = new_soc
                    consumption_total += c_kwh
                    clamp_total += clamp_kwh
                    if delivered_kwh > 0.0:
                        delivered_total += delivered_kwh
                        delivered_eta_total += eta * delivered_kwh
                        v.energy_kwh += delivered_kwh
                        if current is not None:
                            current.delivered_kwh += delivered_kwh
                            current.per_stripe_kwh[sid] += delivered_kwh
                            if current.measured:
                                delivered_kwh_measured += delivered_kwh
                        interval_vehicle_kwh[v.id] = (
                            interval_vehicle_kwh.get(v.id, 0.0) + delivered_kwh
                        )
                    if traj_fh is not None and fraction >= 1.0:
                        traj_fh.write(
                            f"{t!r},{v.id},{v.position!r},{v.speed!r},{v.soc!r}\n"
                        )

                for v, fraction in exit_events:
                    exits_out.append(
                        ExitRecord(
                            id=v.id,
                            is_vut=v.is_vut,
                            measured=v.measured,
                            direction=v.direction,
                            entry_node=v.entry_node,
                            exit_node=v.exit_node,
                            entry_time=v.entry_time,
                            exit_time=t + fraction * tick,
                            soc_init=min(
                                profiles[v.id].soc_init, profiles[v.id].soc_target
                            ),
                            soc_target=v.soc_target,
                            soc_exit=v.soc,
                            capacity=v.capacity,
                            energy_kwh=v.energy_kwh,
                        )
                    )
            flush_interval()
        finally:
            if rounds_writer is not None:
                rounds_writer.close()
            if traj_fh is not None:
                traj_fh.close()

        conservation_lhs = battery_gain_total + clamp_total
        conservation_rhs = delivered_eta_total - consumption_total
        denom = max(abs(conservation_rhs), 1e-12)
        summary = {
            "strategy": cfg.strategy,
            "seed": self.demand.seed,
            "lambda_vpm": self.demand.lambda_vpm,
            "vut_period_s": self.demand.vut_period,
            "warmup_s": cfg.warmup,
            "measure_s": cfg.measure,
            "control_interval_s": cfg.control_interval,
            "total_power_kw": cfg.total_power,
            "inserted": inserted,
            "exited": len(exits_out),
            "measured_exited": sum(1 for e in exits_out if e.measured),
            "on_road_at_end": len(vehicles),
            "delivered_kwh_total": delivered_total,
            "consumption_kwh_total": consumption_total,
            "battery_gain_kwh": battery_gain_total,
            "clamp_kwh": clamp_total,
            "conservation_abs_error": abs(conservation_lhs - conservation_rhs),
            "conservation_rel_error": abs(conservation_lhs - conservation_rhs) / denom,
            "requested_kwh_measured": requested_kwh_measured,
            "delivered_kwh_measured": delivered_kwh_measured,
            "delivered_over_requested": (
                delivered_kwh_measured / requested_kwh_measured
                if requested_kwh_measured > 0
                else float("nan")
            ),
            "utilization": (
                delivered_kwh_measured / (cfg.total_power * cfg.measure / 3600.0)
                if cfg.measure > 0
                else float("nan")
            ),
            "feasibility": dict(feas),
            "qp": self._qp_summary(qp_stats),
        }
        echo = scenario_to_dict(self.corridor, self.stripes, self.demand, cfg)
        result = RunResult(
            scenario=echo,
            summary=summary,
            exits=exits_out,
            intervals=intervals,
            deliveries=deliveries,
        )
        if self.out_dir is not None:
            result.write(self.out_dir)
        return result

    def _track_feasibility(self, plan: AllocationPlan, feas: dict) -> None:
        cfg = self.config
        total = sum(plan.per_stripe.values())
        feas["sum_ps_kw"] = max(feas["sum_ps_kw"], abs(total - cfg.total_power))
        absorbed: dict[int, float] = {}
        for vid, p in plan.per_vehicle.items():
            sid = plan.assigned_stripe.get(vid)
            cap = (
                min(cfg.p_on, self.index.stripes[sid].coil_power_nom)
                if sid is not None
                else 0.0
            )
            feas["eq7_kw"] = max(feas["eq7_kw"], p - cap, -p)
            if sid is not None:
                absorbed[sid] = absorbed.get(sid, 0.0) + p
        for sid, p_s in plan.per_stripe.items():
            stripe = self.index.stripes[sid]
            feas["eq8_kw"] = max(
                feas["eq8_kw"], stripe.p_min - p_s, p_s - cfg.mpc.rho * stripe.static_share
            )
            feas["eq9_kw"] = max(feas["eq9_kw"], absorbed.get(sid, 0.0) - p_s)

    @staticmethod
    def _qp_summary(qp_stats) -> dict:
        if not qp_stats:
            return {"solves": 0}
        return {
            "solves": len(qp_stats),
            "max_iterations": max(s.iterations for s in qp_stats),
            "mean_iterations": sum(s.iterations for s in qp_stats) / len(qp_stats),
            "mean_solve_ms": sum(s.solve_ms for s in qp_stats) / len(qp_stats),
            "max_solve_ms": max(s.solve_ms for s in qp_stats),
            "max_clip_kw": max(s.max_clip for s in qp_stats),
            "polished_fraction": sum(1 for s in qp_stats if s.polished) / len(qp_stats),
            "max_vehicles": max(s.n_vehicles for s in qp_stats),
        }


def run_simulation(corridor, stripes, demand, config, out_dir=None) -> RunResult:
    return Simulation(corridor, stripes, demand, config, out_dir=out_dir).run()


@dataclass
class ReplayRound:
    t: float
    plan: AllocationPlan
    logged_kw: dict
    max_deviation_kw: float


def replay_log(path, strategy: str) -> list[ReplayRound]:
    """Re-run an allocator over the rounds of a log.

    Rebuilds the scenario from the log header and feeds each round's reports
    to a fresh allocator of the requested strategy; deviations against the
    logged assignments quantify reproducibility (MPC) or the A/B gap."""
    header, rounds = protocol.read_rounds(path)
    if "scenario" not in header:
        raise protocol.ProtocolError(f"{path}: header lacks a scenario echo")
    corridor, stripes, demand, config = scenario_from_dict(header["scenario"])
    index = StripeIndex(stripes)
    model = energy.ConsumptionModel(config.idle_kw, config.per_speed_kw)
    mpc_alloc = (
        MpcAllocator(index, config.mpc, config, model, config.total_power)
        if strategy == "mpc"
        else None
    )
    out = []
    for rnd in rounds:
        snapshots = [
            VehicleSnapshot(
                id=r.vehicle_id,
                direction=r.direction,
                position=r.route[2],
                speed=r.speed,
                avg_speed=r.avg_speed,
                soc=r.bl,
                soc_target=r.bte,
                capacity=r.bc,
                p_on=r.padp,
                exit_pos=corridor.node_position(r.route[1]),
                is_vut=r.is_vut,
                entry_node=r.route[0],
                exit_node=r.route[1],
            )
            for r in rnd.reports
        ]
        if mpc_alloc is not None:
            plan, _ = mpc_alloc.allocate(rnd.t, snapshots)
        else:
            plan = allocate_benchmark(rnd.t, snapshots, index, model, config.t_c)
        logged = {a.vehicle_id: a.pass_kw for a in rnd.allocations}
        dev = 0.0
        for vid, kw in logged.items():
            dev = max(dev, abs(plan.per_vehicle.get(vid, 0.0) - kw))
        out.append(ReplayRound(t=rnd.t, plan=plan, logged_kw=logged, max_deviation_kw=dev))
    return out
