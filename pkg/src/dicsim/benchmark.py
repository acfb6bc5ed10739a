"""Uncoordinated benchmark allocation: static per-stripe budgets split
uniformly across requesting vehicles, redistributing leftovers.

The redistribution is the fixed point of "equal shares among vehicles still
drawing power", computed exactly via the water level, so the benchmark wastes
no budget while unmet demand remains on the same stripe.  Deliberately blind
to SoC targets and predictions: only current requests matter."""

from __future__ import annotations

from dataclasses import dataclass, field

from . import energy
from .mobility import StripeIndex
from .scenario import StripeSpec


@dataclass
class AllocationPlan:
    """Per-vehicle and per-stripe power assignment for one control interval."""

    timestamp: float
    per_vehicle: dict[int, float] = field(default_factory=dict)
    per_stripe: dict[int, float] = field(default_factory=dict)
    assigned_stripe: dict[int, int | None] = field(default_factory=dict)

    def validate(self, stripes: dict[int, StripeSpec], p_on: float) -> None:
        for vid, p in self.per_vehicle.items():
            if p < -1e-9:
                raise ValueError(f"vehicle {vid}: negative power")
            sid = self.assigned_stripe.get(vid)
            if sid is not None:
                cap = min(p_on, stripes[sid].coil_power_nom)
                if p > cap + 1e-6:
                    raise ValueError(f"vehicle {vid}: power above per-vehicle cap")
        sums: dict[int, float] = {}
        for vid, p in self.per_vehicle.items():
            sid = self.assigned_stripe.get(vid)
            if sid is not None:
                sums[sid] = sums.get(sid, 0.0) + p
        for sid, total in sums.items():
            if total > self.per_stripe[sid] + 1e-6:
                raise ValueError(f"stripe {sid}: vehicle sum exceeds stripe power")


def water_fill(budget: float, requests: dict[int, float]) -> dict[int, float]:
    """Allocate min(request, level) with the level chosen so the budget is
    spent exactly when total demand exceeds it.  Order-independent."""
    if budget <= 0 or not requests:
        return {vid: 0.0 for vid in requests}
    total = sum(requests.values())
    if total <= budget:
        return dict(requests)
    items = sorted(requests.items(), key=lambda kv: kv[1])
    level = budget / len(items)
    spent = 0.0
    for idx, (_, req) in enumerate(items):
        remaining = len(items) - idx
        if spent + req * remaining >= budget:
            level = (budget - spent) / remaining
            break
        spent += req
    return {vid: min(req, level) for vid, req in requests.items()}


def allocate_benchmark(
    timestamp: float,
    vehicles,
    index: StripeIndex,
    model: energy.ConsumptionModel,
    t_c: float,
) -> AllocationPlan:
    """Water-fill each stripe's static share among the vehicles on it.

    Stripe power stays at the static share whether or not anyone uses it:
    the uncoordinated system performs no inter-stripe transfer."""
    plan = AllocationPlan(timestamp=timestamp)
    by_stripe: dict[int, dict[int, float]] = {}
    for v in vehicles:
        sid = index.occupancy(v.position, v.direction)
        plan.assigned_stripe[v.id] = sid
        plan.per_vehicle[v.id] = 0.0
        if sid is None:
            continue
        req = energy.requested_power(v, index.stripes[sid], model, t_c)
        if req > 0.0:
            by_stripe.setdefault(sid, {})[v.id] = req
    for sid, stripe in index.stripes.items():
        plan.per_stripe[sid] = stripe.static_share
        requests = by_stripe.get(sid)
        if requests:
            for vid, alloc in water_fill(stripe.static_share, requests).items():
                plan.per_vehicle[vid] = alloc
    return plan
