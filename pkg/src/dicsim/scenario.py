"""Scenario definition: corridor topology, stripe layout, traffic demand,
and every configurable parameter of the simulator.

The default scenario is a 9.65 km two-direction urban corridor with five
entry/exit nodes and 10 chargeable stripes (5 per direction, mirrored).
Scenarios can be loaded from a plain-text config file, either `key = value`
lines with dotted keys or a single JSON object (see load_config).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from typing import Sequence

import numpy as np

VUT_INIT_SOC = 0.02
VUT_TARGET_SOC = 1.0
VUT_ROUTES = ((1, 5), (5, 1))

# Relative origin-destination rates as fractions of the traffic intensity.
# Terminal nodes 1 and 5 carry the bulk; no traffic between inner nodes.
DEFAULT_RELATIONS = (
    (0.0, 1 / 8, 1 / 8, 1 / 4, 1 / 2),
    (1 / 8, 0.0, 0.0, 0.0, 1 / 8),
    (1 / 8, 0.0, 0.0, 0.0, 1 / 8),
    (1 / 4, 0.0, 0.0, 0.0, 1 / 4),
    (1 / 2, 1 / 8, 1 / 8, 1 / 4, 0.0),
)

# Per-direction stripe lengths and their start offsets on the axis of
# direction 0; direction 1 mirrors them about the corridor end.
DEFAULT_STRIPE_LENGTHS = (628.0, 900.0, 1100.0, 1276.0, 1000.0)
DEFAULT_STRIPE_STARTS = (600.0, 1400.0, 3000.0, 5200.0, 7800.0)


class ConfigError(ValueError):
    """Raised when a scenario or config file violates an invariant."""


@dataclass(frozen=True)
class CorridorSpec:
    """Road geometry shared by both directions."""

    length: float = 9650.0
    directions: int = 2
    lanes_per_direction: int = 2
    node_positions: tuple[float, ...] = (0.0, 2400.0, 4800.0, 7200.0, 9650.0)
    free_flow_speed: float = 13.89  # 50 km/h speed limit
    jam_spacing: float = 10.0  # average longitudinal occupancy of a vehicle

    def __post_init__(self):
        if self.length <= 0:
            raise ConfigError("corridor length must be positive")
        pos = self.node_positions
        if len(pos) != 5:
            raise ConfigError("corridor needs exactly 5 entry/exit nodes")
        if any(b <= a for a, b in zip(pos, pos[1:])):
            raise ConfigError("node positions must be strictly increasing")
        if pos[0] != 0.0 or pos[-1] != self.length:
            raise ConfigError("first node must sit at 0 and last at corridor length")
        if self.free_flow_speed <= 0 or self.jam_spacing <= 0:
            raise ConfigError("free_flow_speed and jam_spacing must be positive")

    def node_position(self, node: int) -> float:
        return self.node_positions[node - 1]


@dataclass(frozen=True)
class StripeSpec:
    """A contiguous chargeable segment: a string of coils in each lane."""

    id: int
    direction: int
    start_pos: float
    end_pos: float
    coil_spacing: float = 1.0
    coil_power_nom: float = 100.0
    efficiency: float = 0.95
    p_min: float = 1.0
    static_share: float = 0.0

    def __post_init__(self):
        if self.end_pos <= self.start_pos:
            raise ConfigError(f"stripe {self.id}: end_pos must exceed start_pos")
        if not 0.0 < self.efficiency <= 1.0:
            raise ConfigError(f"stripe {self.id}: efficiency must be in (0, 1]")
        if self.coil_spacing <= 0:
            raise ConfigError(f"stripe {self.id}: coil_spacing must be positive")
        if self.p_min <= 0:
            raise ConfigError(f"stripe {self.id}: p_min must be positive")

    @property
    def length(self) -> float:
        return self.end_pos - self.start_pos


def deliverable_power(stripe: StripeSpec) -> float:
    """Maximum power a stripe could deliver with every coil active, both lanes."""
    coils = math.floor(stripe.length / stripe.coil_spacing)
    return 2.0 * coils * stripe.efficiency * stripe.coil_power_nom


@dataclass(frozen=True)
class TrafficDemand:
    """Poisson origin-destination demand plus the deterministic probe stream."""

    lambda_vpm: float = 12.0
    relation_matrix: tuple = DEFAULT_RELATIONS
    vut_period: float | None = None
    seed: int = 0

    def __post_init__(self):
        m = self.relation_matrix
        if len(m) != 5 or any(len(row) != 5 for row in m):
            raise ConfigError("relation matrix must be 5x5")
        if any(m[i][i] != 0.0 for i in range(5)):
            raise ConfigError("relation matrix diagonal must be zero")
        inner = (1, 2, 3)
        if any(m[i][j] != 0.0 for i in inner for j in inner if i != j):
            raise ConfigError("no traffic between non-terminal nodes")
        for idx in (0, 4):
            if not math.isclose(sum(m[idx]), 1.0, abs_tol=1e-9):
                raise ConfigError("terminal rows must sum to the full intensity")
            if not math.isclose(sum(row[idx] for row in m), 1.0, abs_tol=1e-9):
                raise ConfigError("terminal columns must sum to the full intensity")
        if self.lambda_vpm < 0:
            raise ConfigError("lambda_vpm must be non-negative")
        if self.vut_period is not None and self.vut_period <= 0:
            raise ConfigError("vut_period must be positive or None")


@dataclass(frozen=True)
class MpcConfig:
    """Receding-horizon controller weights and solver knobs."""

    horizon: int = 6  # steps; 30 s at the default control interval
    delta_t: float = 5.0
    lam: float = 0.001  # revenue weight
    xi: float = 0.01  # stripe power assignment weight
    rho: float = 4.0  # inter-stripe transfer coefficient
    tau_min: float = 10.0
    price: float = 1.0  # constant energy price
    p_min: float = 1.0  # minimum stripe power [kW]
    solver_tol: float = 1e-7
    solver_max_iter: int = 20000

    def __post_init__(self):
        if self.horizon < 1:
            raise ConfigError("mpc horizon must be >= 1")
        if self.rho <= 1.0:
            raise ConfigError("inter-stripe transfer coefficient must exceed 1")
        if self.tau_min <= 0:
            raise ConfigError("tau_min must be positive")
        if self.xi < 0 or self.lam < 0:
            raise ConfigError("objective weights must be non-negative")


@dataclass(frozen=True)
class SimConfig:
    """Run-level settings: timing, budget, strategy, and vehicle draws."""

    tick: float = 1.0
    control_interval: float = 5.0
    warmup: float = 900.0
    measure: float = 3600.0
    total_power: float = 16000.0  # kW across the whole DIC system
    strategy: str = "benchmark"
    mpc: MpcConfig = field(default_factory=MpcConfig)
    init_soc_range: tuple[float, float] = (0.1, 0.5)
    target_soc_range: tuple[float, float] = (0.5, 1.0)
    battery_capacity_range: tuple[float, float] = (40.0, 80.0)
    p_on: float = 150.0  # on-board pad limit, above the per-coil supply
    # consumption / request shaping
    idle_kw: float = 2.0
    per_speed_kw: float = 0.72  # ~10 kW total draw at 40 km/h
    t_c: float = 300.0  # request modulation time constant [s]
    # mobility tunables
    avg_speed_window: float = 60.0
    eps_speed: float = 0.1
    density_window: float = 200.0
    # outputs
    write_deliveries: bool = True
    dump_trajectories: bool = False

    def __post_init__(self):
        if self.tick <= 0 or self.control_interval <= 0:
            raise ConfigError("tick and control_interval must be positive")
        ratio = self.control_interval / self.tick
        if abs(ratio - round(ratio)) > 1e-9:
            raise ConfigError("control_interval must be an integer multiple of tick")
        if self.warmup < 0 or self.measure < 0 or self.warmup + self.measure <= 0:
            raise ConfigError("warmup + measure must be positive")
        for lo, hi in (self.init_soc_range, self.target_soc_range):
            if not (0.0 <= lo <= hi <= 1.0):
                raise ConfigError("SoC ranges must satisfy 0 <= lo <= hi <= 1")
        lo, hi = self.battery_capacity_range
        if not (0.0 < lo <= hi):
            raise ConfigError("battery capacity range must be positive")
        if self.strategy not in ("benchmark", "mpc"):
            raise ConfigError(f"unknown strategy {self.strategy!r}")
        if self.total_power <= 0 or self.p_on <= 0:
            raise ConfigError("total_power and p_on must be positive")
        if self.t_c <= 0:
            raise ConfigError("t_c must be positive")


def static_shares(lengths: Sequence[float], total: float) -> list[float]:
    """Split `total` proportionally to `lengths` with largest-remainder
    rounding at 1 kW so the shares sum to `total` exactly."""
    total_len = float(sum(lengths))
    exact = [total * length / total_len for length in lengths]
    base = [math.floor(e) for e in exact]
    leftover = total - sum(base)
    order = sorted(range(len(lengths)), key=lambda i: (base[i] - exact[i], i))
    shares = [float(b) for b in base]
    i = 0
    while leftover > 1e-9 and i < len(order):
        give = min(1.0, leftover)
        shares[order[i]] += give
        leftover -= give
        i += 1
    return shares


def build_stripes(
    corridor: CorridorSpec,
    total_power: float,
    lengths: Sequence[float] = DEFAULT_STRIPE_LENGTHS,
    starts: Sequence[float] = DEFAULT_STRIPE_STARTS,
    coil_spacing: float = 1.0,
    coil_power_nom: float = 100.0,
    efficiency: float = 0.95,
    p_min: float = 1.0,
) -> list[StripeSpec]:
    """Lay out mirrored stripes and assign their static power shares."""
    spans = []
    for start, length in zip(starts, lengths):
        spans.append((0, start, start + length))
    for start, length in zip(starts, lengths):
        spans.append((1, corridor.length - start - length, corridor.length - start))
    shares = static_shares([e - s for _, s, e in spans], total_power)
    stripes = [
        StripeSpec(
            id=i,
            direction=d,
            start_pos=s,
            end_pos=e,
            coil_spacing=coil_spacing,
            coil_power_nom=coil_power_nom,
            efficiency=efficiency,
            p_min=p_min,
            static_share=share,
        )
        for i, ((d, s, e), share) in enumerate(zip(spans, shares))
    ]
    return stripes


def validate_scenario(
    corridor: CorridorSpec,
    stripes: Sequence[StripeSpec],
    demand: TrafficDemand,
    config: SimConfig,
) -> None:
    """Cross-object invariants, rejected at load time."""
    for direction in range(corridor.directions):
        group = sorted(
            (s for s in stripes if s.direction == direction),
            key=lambda s: s.start_pos,
        )
        for a, b in zip(group, group[1:]):
            if b.start_pos <= a.end_pos:
                raise ConfigError(
                    f"stripes {a.id} and {b.id} overlap on direction {direction}"
                )
        for s in group:
            if s.start_pos < 0 or s.end_pos > corridor.length:
                raise ConfigError(f"stripe {s.id} outside the corridor")
            for node in corridor.node_positions:
                if s.start_pos < node < s.end_pos:
                    raise ConfigError(
                        f"stripe {s.id} crosses the node at {node} m"
                    )
    total_deliverable = sum(deliverable_power(s) for s in stripes)
    if config.total_power >= total_deliverable:
        raise ConfigError("total power budget must stay below deliverable power")
    share_sum = sum(s.static_share for s in stripes)
    if abs(share_sum - config.total_power) > 1e-6:
        raise ConfigError("static shares must sum to the total power budget")
    for s in stripes:
        if s.static_share >= deliverable_power(s):
            raise ConfigError(f"stripe {s.id}: static share exceeds deliverable power")
        if config.mpc.p_min > s.static_share:
            raise ConfigError(
                f"stripe {s.id}: p_min above static share breaks MPC feasibility"
            )


def build_default_scenario(
    lambda_vpm: float = 12.0,
    vut_period: float | None = None,
    seed: int = 0,
    strategy: str = "benchmark",
) -> tuple[CorridorSpec, list[StripeSpec], TrafficDemand, SimConfig]:
    corridor = CorridorSpec()
    config = SimConfig(strategy=strategy)
    stripes = build_stripes(corridor, config.total_power)
    demand = TrafficDemand(lambda_vpm=lambda_vpm, vut_period=vut_period, seed=seed)
    validate_scenario(corridor, stripes, demand, config)
    return corridor, stripes, demand, config


@dataclass(frozen=True)
class Arrival:
    time: float
    entry: int
    exit: int
    is_vut: bool = False


def generate_arrivals(
    demand: TrafficDemand, window: tuple[float, float]
) -> list[Arrival]:
    """Poisson arrivals per origin-destination pair, plus probe vehicles on a
    fixed cadence alternating the two terminal routes.  Deterministic for a
    fixed seed; the per-pair streams are independent."""
    t0, t1 = window
    if t1 <= t0:
        raise ValueError("arrival window must satisfy t1 > t0")
    streams = np.random.SeedSequence(demand.seed).spawn(25)
    arrivals: list[Arrival] = []
    for i in range(5):
        for j in range(5):
            frac = demand.relation_matrix[i][j]
            rate = frac * demand.lambda_vpm / 60.0  # vehicles per second
            if rate <= 0.0:
                continue
            rng = np.random.default_rng(streams[5 * i + j])
            t = t0
            while True:
                t += rng.exponential(1.0 / rate)
                if t >= t1:
                    break
                arrivals.append(Arrival(time=t, entry=i + 1, exit=j + 1))
    if demand.vut_period:
        k = math.ceil(t0 / demand.vut_period)
        while k * demand.vut_period < t1:
            entry, exit_ = VUT_ROUTES[k % 2]
            arrivals.append(
                Arrival(time=k * demand.vut_period, entry=entry, exit=exit_, is_vut=True)
            )
            k += 1
    arrivals.sort(key=lambda a: (a.time, a.entry, a.exit, a.is_vut))
    return arrivals


@dataclass(frozen=True)
class VehicleProfile:
    soc_init: float
    soc_target: float
    capacity: float


def assign_profiles(
    arrivals: Sequence[Arrival], config: SimConfig, seed: int
) -> list[VehicleProfile]:
    """Draw battery state and contract per arrival, in arrival order.

    The stream is separate from the arrival-time streams so the same seed
    yields the same fleet regardless of strategy."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x5EED)))
    profiles = []
    for arr in arrivals:
        soc = rng.uniform(*config.init_soc_range)
        target = rng.uniform(*config.target_soc_range)
        cap = rng.uniform(*config.battery_capacity_range)
        if arr.is_vut:
            soc, target = VUT_INIT_SOC, VUT_TARGET_SOC
        profiles.append(VehicleProfile(soc_init=soc, soc_target=target, capacity=cap))
    return profiles


# --- configuration file handling -------------------------------------------

_SECTION_KEYS = {
    "corridor": ("length", "lanes_per_direction", "node_positions",
                 "free_flow_speed", "jam_spacing"),
    "traffic": ("lambda_vpm", "vut_period", "seed", "relation_matrix"),
    "sim": ("tick", "control_interval", "warmup", "measure", "total_power",
            "strategy", "p_on", "init_soc_lo", "init_soc_hi", "target_soc_lo",
            "target_soc_hi", "capacity_lo", "capacity_hi", "write_deliveries",
            "dump_trajectories"),
    "energy": ("idle_kw", "per_speed_kw", "t_c"),
    "mobility": ("avg_speed_window", "eps_speed", "density_window"),
    "mpc": ("horizon", "lam", "xi", "rho", "tau_min", "price", "p_min",
            "solver_tol", "solver_max_iter"),
    "stripes": (),
}


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_config_text(text: str) -> dict:
    """Accept either a JSON object or `section.key = value` lines."""
    stripped = text.lstrip()
    if stripped.startswith("{"):
        data = json.loads(text)
        if not isinstance(data, dict):
            raise ConfigError("JSON config must be an object")
        return data
    data: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        node = data
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = _parse_value(value)
    return data


def scenario_from_dict(
    data: dict, seed_override: int | None = None
) -> tuple[CorridorSpec, list[StripeSpec], TrafficDemand, SimConfig]:
    """Materialize a scenario from a (possibly partial) config mapping."""
    for section, keys in _SECTION_KEYS.items():
        extra = set(data.get(section, {}) if section != "stripes" else ())
        unknown = extra - set(keys)
        if unknown:
            raise ConfigError(f"unknown keys in [{section}]: {sorted(unknown)}")
    unknown_sections = set(data) - set(_SECTION_KEYS)
    if unknown_sections:
        raise ConfigError(f"unknown config sections: {sorted(unknown_sections)}")

    cor = dict(data.get("corridor", {}))
    if "node_positions" in cor:
        cor["node_positions"] = tuple(float(p) for p in cor["node_positions"])
    corridor = CorridorSpec(**cor)

    tr = dict(data.get("traffic", {}))
    if seed_override is not None:
        tr["seed"] = seed_override
    if "relation_matrix" in tr:
        tr["relation_matrix"] = tuple(tuple(float(v) for v in row)
                                      for row in tr["relation_matrix"])
    if tr.get("vut_period") in (0, "none", "None"):
        tr["vut_period"] = None
    demand = TrafficDemand(**tr)

    sim = dict(data.get("sim", {}))
    ranges = {}
    for key, pair in (("init_soc", "init_soc_range"),
                      ("target_soc", "target_soc_range"),
                      ("capacity", "battery_capacity_range")):
        lo = sim.pop(f"{key}_lo", None)
        hi = sim.pop(f"{key}_hi", None)
        if lo is not None or hi is not None:
            default = SimConfig.__dataclass_fields__[pair].default
            ranges[pair] = (
                float(lo) if lo is not None else default[0],
                float(hi) if hi is not None else default[1],
            )
    # the MPC control interval is the simulation control interval
    delta_t = float(sim.get("control_interval", 5.0))
    mpc = MpcConfig(delta_t=delta_t, **data.get("mpc", {}))
    energy = data.get("energy", {})
    mobility = data.get("mobility", {})
    config = SimConfig(mpc=mpc, **sim, **ranges, **energy, **mobility)

    if "stripes" in data:
        stripes = [
            StripeSpec(
                id=i,
                direction=int(s["direction"]),
                start_pos=float(s["start_pos"]),
                end_pos=float(s["end_pos"]),
                coil_spacing=float(s.get("coil_spacing", 1.0)),
                coil_power_nom=float(s.get("coil_power_nom", 100.0)),
                efficiency=float(s.get("efficiency", 0.95)),
                p_min=float(s.get("p_min", config.mpc.p_min)),
                static_share=0.0,
            )
            for i, s in enumerate(data["stripes"])
        ]
        shares = static_shares([s.length for s in stripes], config.total_power)
        stripes = [
            StripeSpec(**{**asdict(s), "static_share": share})
            for s, share in zip(stripes, shares)
        ]
    else:
        stripes = build_stripes(corridor, config.total_power,
                                p_min=config.mpc.p_min)
    validate_scenario(corridor, stripes, demand, config)
    return corridor, stripes, demand, config


def load_config(path, seed_override: int | None = None):
    with open(path) as fh:
        text = fh.read()
    return scenario_from_dict(parse_config_text(text), seed_override=seed_override)


def scenario_to_dict(
    corridor: CorridorSpec,
    stripes: Sequence[StripeSpec],
    demand: TrafficDemand,
    config: SimConfig,
) -> dict:
    """Full echo of a scenario, loadable again via scenario_from_dict."""
    sim = {
        "tick": config.tick,
        "control_interval": config.control_interval,
        "warmup": config.warmup,
        "measure": config.measure,
        "total_power": config.total_power,
        "strategy": config.strategy,
        "p_on": config.p_on,
        "init_soc_lo": config.init_soc_range[0],
        "init_soc_hi": config.init_soc_range[1],
        "target_soc_lo": config.target_soc_range[0],
        "target_soc_hi": config.target_soc_range[1],
        "capacity_lo": config.battery_capacity_range[0],
        "capacity_hi": config.battery_capacity_range[1],
        "write_deliveries": config.write_deliveries,
        "dump_trajectories": config.dump_trajectories,
    }
    mpc = {k: v for k, v in asdict(config.mpc).items() if k != "delta_t"}
    return {
        "corridor": {
            "length": corridor.length,
            "lanes_per_direction": corridor.lanes_per_direction,
            "node_positions": list(corridor.node_positions),
            "free_flow_speed": corridor.free_flow_speed,
            "jam_spacing": corridor.jam_spacing,
        },
        "stripes": [
            {
                "direction": s.direction,
                "start_pos": s.start_pos,
                "end_pos": s.end_pos,
                "coil_spacing": s.coil_spacing,
                "coil_power_nom": s.coil_power_nom,
                "efficiency": s.efficiency,
                "p_min": s.p_min,
            }
            for s in stripes
        ],
        "traffic": {
            "lambda_vpm": demand.lambda_vpm,
            "vut_period": demand.vut_period,
            "seed": demand.seed,
            "relation_matrix": [list(row) for row in demand.relation_matrix],
        },
        "sim": sim,
        "energy": {
            "idle_kw": config.idle_kw,
            "per_speed_kw": config.per_speed_kw,
            "t_c": config.t_c,
        },
        "mobility": {
            "avg_speed_window": config.avg_speed_window,
            "eps_speed": config.eps_speed,
            "density_window": config.density_window,
        },
        "mpc": mpc,
    }
