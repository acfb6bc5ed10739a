"""Vehicle motion on the corridor and stripe-occupancy bookkeeping.

Replaces a full microscopic traffic simulator with a density-dependent
kinematic model: each vehicle moves at the Greenshields speed for the local
density in a sliding window, floored at 10% of free flow so the corridor
never stalls.  The allocator only consumes occupancy indicators, travel-time
estimates, and consumption forecasts, all robust to mobility fidelity.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .scenario import ConfigError, CorridorSpec, StripeSpec

SPEED_FLOOR_FRACTION = 0.1


@dataclass
class VehicleState:
    """Mutable state of one vehicle; written only by step()."""

    id: int
    direction: int
    position: float
    speed: float
    entry_node: int
    exit_node: int
    entry_time: float
    soc: float
    soc_target: float
    capacity: float
    p_on: float
    exit_pos: float
    is_vut: bool = False
    measured: bool = False
    energy_kwh: float = 0.0
    speed_history: deque = field(default_factory=lambda: deque(maxlen=60))

    def avg_speed(self) -> float:
        if not self.speed_history:
            return self.speed
        return float(sum(self.speed_history) / len(self.speed_history))


@dataclass(frozen=True)
class VehicleSnapshot:
    """Immutable view handed to allocators at a control boundary."""

    id: int
    direction: int
    position: float
    speed: float
    avg_speed: float
    soc: float
    soc_target: float
    capacity: float
    p_on: float
    exit_pos: float
    is_vut: bool = False
    entry_node: int = 0
    exit_node: int = 0


def snapshot(vehicle: VehicleState) -> VehicleSnapshot:
    return VehicleSnapshot(
        id=vehicle.id,
        direction=vehicle.direction,
        position=vehicle.position,
        speed=vehicle.speed,
        avg_speed=vehicle.avg_speed(),
        soc=vehicle.soc,
        soc_target=vehicle.soc_target,
        capacity=vehicle.capacity,
        p_on=vehicle.p_on,
        exit_pos=vehicle.exit_pos,
        is_vut=vehicle.is_vut,
        entry_node=vehicle.entry_node,
        exit_node=vehicle.exit_node,
    )


@dataclass(frozen=True)
class OccupancyPrediction:
    """Predicted stripe per horizon step plus remaining travel time."""

    vehicle_id: int
    stripes: tuple  # stripe id or None, one entry per step k = 0..K-1
    tau: float


class StripeIndex:
    """Interval lookup of stripes per direction; rejects overlaps at build."""

    def __init__(self, stripes: list[StripeSpec]):
        self.stripes = {s.id: s for s in stripes}
        self._starts: dict[int, np.ndarray] = {}
        self._ends: dict[int, np.ndarray] = {}
        self._ids: dict[int, np.ndarray] = {}
        directions = sorted({s.direction for s in stripes})
        for d in directions:
            group = sorted(
                (s for s in stripes if s.direction == d), key=lambda s: s.start_pos
            )
            for a, b in zip(group, group[1:]):
                if b.start_pos <= a.end_pos:
                    raise ConfigError(
                        f"stripes {a.id} and {b.id} overlap on direction {d}"
                    )
            self._starts[d] = np.array([s.start_pos for s in group])
            self._ends[d] = np.array([s.end_pos for s in group])
            self._ids[d] = np.array([s.id for s in group])

    def occupancy(self, position: float, direction: int) -> int | None:
        """Stripe id covering the position on this direction (closed bounds)."""
        starts = self._starts.get(direction)
        if starts is None or starts.size == 0:
            return None
        idx = int(np.searchsorted(starts, position, side="right")) - 1
        if idx >= 0 and position <= self._ends[direction][idx]:
            return int(self._ids[direction][idx])
        return None


def occupancy(vehicle, index: StripeIndex) -> int | None:
    """Indicator of the stripe a vehicle is coupled to, if any."""
    return index.occupancy(vehicle.position, vehicle.direction)


def step(
    vehicles: list[VehicleState],
    corridor: CorridorSpec,
    tick: float,
    density_window: float = 200.0,
) -> list[tuple[VehicleState, float]]:
    """Advance all vehicles by one tick.

    Sets each vehicle's speed from the local density (Greenshields with a
    floor), moves it, and removes vehicles that pass their exit node.
    Returns the removed vehicles paired with the fraction of the tick they
    spent on the road before crossing.
    """
    if tick <= 0:
        raise ValueError("tick must be positive")
    rho_jam = 1.0 / corridor.jam_spacing
    lanes = corridor.lanes_per_direction
    by_dir: dict[int, list[VehicleState]] = {}
    for v in vehicles:
        by_dir.setdefault(v.direction, []).append(v)

    for group in by_dir.values():
        pos = np.array([v.position for v in group])
        order = np.argsort(pos, kind="stable")
        sorted_pos = pos[order]
        half = density_window / 2.0
        lo = np.searchsorted(sorted_pos, pos - half, side="left")
        hi = np.searchsorted(sorted_pos, pos + half, side="right")
        neighbours = hi - lo - 1  # exclude the vehicle itself
        rho_local = neighbours / (density_window * lanes)
        factor = np.maximum(SPEED_FLOOR_FRACTION, 1.0 - rho_local / rho_jam)
        speeds = corridor.free_flow_speed * factor
        for v, s in zip(group, speeds):
            v.speed = float(s)

    exits: list[tuple[VehicleState, float]] = []
    for v in vehicles:
        v.speed_history.append(v.speed)
        sign = 1.0 if v.direction == 0 else -1.0
        old = v.position
        new = old + sign * v.speed * tick
        crossed = new >= v.exit_pos if v.direction == 0 else new <= v.exit_pos
        if crossed and v.speed > 0:
            fraction = abs(v.exit_pos - old) / abs(new - old)
            v.position = v.exit_pos
            exits.append((v, min(max(fraction, 0.0), 1.0)))
        else:
            v.position = new
    for v, _ in exits:
        vehicles.remove(v)
    return exits


def predict(
    vehicle: VehicleSnapshot,
    index: StripeIndex,
    horizon: int,
    delta_t: float,
    eps_speed: float = 0.1,
) -> OccupancyPrediction:
    """Extrapolate occupancy over the horizon from the windowed mean speed.

    Position at step k is current position advanced by k * delta_t at the
    mean speed; steps at or past the predicted exit have no stripe.  tau is
    the remaining travel time at that speed (floored at eps_speed, so a
    stalled vehicle gets a large finite tau)."""
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    v_bar = max(vehicle.avg_speed, 0.0)
    sign = 1.0 if vehicle.direction == 0 else -1.0
    distance = abs(vehicle.exit_pos - vehicle.position)
    tau = distance / max(v_bar, eps_speed)
    stripes = []
    for k in range(horizon):
        pos_k = vehicle.position + sign * v_bar * k * delta_t
        exited = pos_k >= vehicle.exit_pos if vehicle.direction == 0 else pos_k <= vehicle.exit_pos
        if exited and distance > 0:
            stripes.append(None)
        elif distance == 0:
            stripes.append(None)
        else:
            stripes.append(index.occupancy(pos_k, vehicle.direction))
    return OccupancyPrediction(vehicle_id=vehicle.id, stripes=tuple(stripes), tau=tau)


def dump_trajectory_row(fh, t: float, vehicle: VehicleState) -> None:
    """Append one per-tick trajectory record (time, id, position, speed, soc)."""
    fh.write(
        f"{t!r},{vehicle.id},{vehicle.position!r},{vehicle.speed!r},{vehicle.soc!r}\n"
    )
