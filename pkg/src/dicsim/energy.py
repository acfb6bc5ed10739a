"""Battery bookkeeping: consumption, SoC dynamics, and the uncoordinated
per-vehicle power request."""

from __future__ import annotations

from dataclasses import dataclass

from .scenario import StripeSpec


@dataclass(frozen=True)
class ConsumptionModel:
    """Drive power affine in speed: idle draw plus a per-speed term."""

    idle_kw: float = 2.0
    per_speed_kw: float = 0.72

    def __post_init__(self):
        if self.idle_kw < 0 or self.per_speed_kw < 0:
            raise ValueError("consumption coefficients must be non-negative")

    def drive_power(self, speed: float) -> float:
        return self.idle_kw + self.per_speed_kw * speed


def consumption(vehicle, model: ConsumptionModel, dt: float, speed: float | None = None) -> float:
    """Energy drawn for driving over dt seconds [kWh], capped so the battery
    never goes below empty."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    spd = vehicle.speed if speed is None else speed
    drawn = model.drive_power(spd) * dt / 3600.0
    return min(drawn, max(vehicle.soc, 0.0) * vehicle.capacity)


def apply_soc_dynamics(
    vehicle, delivered_kw: float, dt: float, efficiency: float, consumption_kwh: float
) -> tuple[float, float]:
    """One step of the SoC recursion with charging efficiency.

    Returns (new_soc, clamp_correction_kwh): the battery-side energy discarded
    by clamping into [0, soc_target], positive when the top clamp engaged.
    Pure: the caller assigns the new SoC."""
    if delivered_kw < 0:
        raise ValueError("delivered power must be non-negative")
    raw = (
        vehicle.soc
        + efficiency * delivered_kw * dt / (3600.0 * vehicle.capacity)
        - consumption_kwh / vehicle.capacity
    )
    new = min(max(raw, 0.0), vehicle.soc_target)
    return new, (raw - new) * vehicle.capacity


def requested_power(
    vehicle, stripe: StripeSpec | None, model: ConsumptionModel, t_c: float
) -> float:
    """Power the vehicle draws uncoordinated [kW].

    Zero off-stripe and at (or above) the SoC target; otherwise the gap-fill
    rate over t_c plus drive power, limited by the pad and the coil."""
    if t_c <= 0:
        raise ValueError("t_c must be positive")
    if stripe is None:
        return 0.0
    if vehicle.soc >= vehicle.soc_target:
        return 0.0
    gap = max(vehicle.soc_target - vehicle.soc, 0.0)
    wanted = gap * vehicle.capacity * 3600.0 / t_c + model.drive_power(vehicle.speed)
    return min(vehicle.p_on, stripe.coil_power_nom, wanted)


def aggregate_requests(vehicles, index, model: ConsumptionModel, t_c: float):
    """Per-stripe and total requested power (unclipped: measures demand that
    may exceed what is deliverable)."""
    per_stripe: dict[int, float] = {sid: 0.0 for sid in index.stripes}
    for v in vehicles:
        sid = index.occupancy(v.position, v.direction)
        if sid is None:
            continue
        per_stripe[sid] += requested_power(v, index.stripes[sid], model, t_c)
    return per_stripe, sum(per_stripe.values())
