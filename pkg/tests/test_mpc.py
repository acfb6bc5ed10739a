import numpy as np
import pytest

from dicsim import energy as en
from dicsim import mobility as mob
from dicsim import mpc
from dicsim import qp
from dicsim import scenario as sc
from _oracles import brute_force_qp, projected_gradient_qp

MODEL = en.ConsumptionModel()


def snap(vid=0, position=700.0, direction=0, speed=10.0, avg_speed=None,
         soc=0.3, target=0.8, capacity=50.0, p_on=150.0, exit_pos=9650.0,
         is_vut=False):
    return mob.VehicleSnapshot(
        id=vid, direction=direction, position=position, speed=speed,
        avg_speed=speed if avg_speed is None else avg_speed, soc=soc,
        soc_target=target, capacity=capacity, p_on=p_on, exit_pos=exit_pos,
        is_vut=is_vut,
    )


def single_stripe_setup(total_power, length=1000.0, p_min=1.0, rho=4.0,
                        xi=0.01, lam=0.001, horizon=6, tol=1e-9):
    stripe = sc.StripeSpec(
        id=0, direction=0, start_pos=500.0, end_pos=500.0 + length,
        p_min=p_min, static_share=total_power,
    )
    index = mob.StripeIndex([stripe])
    config = sc.MpcConfig(horizon=horizon, lam=lam, xi=xi, rho=rho,
                          p_min=p_min, solver_tol=tol)
    sim = sc.SimConfig(mpc=config)
    return index, config, sim


def build(index, config, sim, snapshots, total_power):
    return mpc.build_instance(0.0, snapshots, index, config, sim, MODEL,
                              total_power)


def test_urgency_examples():
    assert mpc.urgency(snap(soc=0.02, target=1.0), 600.0, 10.0) == pytest.approx(
        0.98 / 600.0
    )
    assert mpc.urgency(snap(soc=0.9, target=0.8), 100.0, 10.0) == 0.0
    assert mpc.urgency(snap(soc=0.5, target=1.0), 1.0, 10.0) == pytest.approx(0.05)


def test_dimension_count_one_vehicle_k1():
    # P_v, P_s per stripe, b_0 (pinned) and b_1: 1 + |S| + 2 variables
    stripes = sc.build_stripes(sc.CorridorSpec(), 16000.0)
    index = mob.StripeIndex(stripes)
    config = sc.MpcConfig(horizon=1)
    sim = sc.SimConfig(mpc=config)
    inst = build(index, config, sim, [snap()], 16000.0)
    problem, layout = mpc.build_qp(inst)
    assert problem.n == 1 + len(stripes) + 2


def test_horizon_span():
    config = sc.MpcConfig()
    assert config.horizon * config.delta_t == 30.0


def test_off_stripe_power_bound_zero():
    stripes = sc.build_stripes(sc.CorridorSpec(), 16000.0)
    index = mob.StripeIndex(stripes)
    config = sc.MpcConfig(horizon=4)
    sim = sc.SimConfig(mpc=config)
    # stationary in the gap between stripes: never coupled
    vehicle = snap(position=2500.0, speed=0.0)
    inst = build(index, config, sim, [vehicle], 16000.0)
    problem, layout = mpc.build_qp(inst)
    # every step unoccupied -> per-vehicle power cap 0
    assert np.all(layout.pv_upper == 0.0)
    ineq_keys = layout.row_keys[problem.m_eq:]
    for i, key in enumerate(ineq_keys):
        if key[0] == "pv":
            assert problem.u[i] == 0.0


def test_feasible_by_construction_point():
    stripes = sc.build_stripes(sc.CorridorSpec(), 16000.0)
    index = mob.StripeIndex(stripes)
    config = sc.MpcConfig(horizon=6)
    sim = sc.SimConfig(mpc=config)
    fleet = [snap(vid=i, position=650.0 + 40.0 * i, soc=0.1 + 0.05 * i)
             for i in range(6)]
    inst = build(index, config, sim, fleet, 16000.0)
    problem, layout = mpc.build_qp(inst)
    x = np.zeros(problem.n)
    for vi, v in enumerate(inst.vehicles):
        level = v.soc
        x[layout.b_idx(vi, 0)] = level
        for k in range(config.horizon):
            level = level - inst.consumption_kwh[v.id][k] / v.capacity
            x[layout.b_idx(vi, k + 1)] = level
    for si, sid in enumerate(layout.stripe_ids):
        share = index.stripes[sid].static_share
        for k in range(config.horizon):
            x[layout.ps_idx(si, k)] = share
    assert np.abs(problem.A @ x - problem.b).max() <= 1e-9
    cx = problem.C @ x
    assert np.all(cx >= problem.l - 1e-9)
    assert np.all(cx <= problem.u + 1e-9)


def test_zero_vehicles_spreads_budget():
    stripes = sc.build_stripes(sc.CorridorSpec(), 16000.0)
    index = mob.StripeIndex(stripes)
    config = sc.MpcConfig(horizon=3, solver_tol=1e-8)
    sim = sc.SimConfig(mpc=config)
    inst = build(index, config, sim, [], 16000.0)
    plan, stats, _ = mpc.solve_step(inst)
    assert sum(plan.per_stripe.values()) == pytest.approx(16000.0, abs=1e-6)
    # independent projected-gradient oracle on the per-step projection QP
    ns = len(stripes)
    lb = np.array([s.p_min for s in inst.stripes])
    ub = np.array([config.rho * s.static_share for s in inst.stripes])
    ref = projected_gradient_qp(
        2.0 * config.xi * np.eye(ns), np.zeros(ns), 16000.0, lb, ub
    )
    got = np.array([plan.per_stripe[s.id] for s in inst.stripes])
    assert got == pytest.approx(ref, abs=1e-3)


def test_single_vehicle_abundant_power_gets_cap():
    index, config, sim = single_stripe_setup(total_power=5000.0)
    vehicle = snap(soc=0.1, target=1.0, capacity=80.0)
    inst = build(index, config, sim, [vehicle], 5000.0)
    plan, stats, _ = mpc.solve_step(inst)
    # hand-solved single-variable QP: the coil cap binds while the gap is large
    assert plan.per_vehicle[0] == pytest.approx(100.0, abs=1e-4)


def test_all_at_target_only_maintenance_draw():
    # At soc == target with lam=0, the SoC ceiling caps charging at the
    # drive-power trickle; the stripe-assignment term makes that the optimum.
    index, config, sim = single_stripe_setup(total_power=5000.0, lam=0.0,
                                             horizon=1)
    vehicle = snap(soc=0.8, target=0.8, speed=10.0)
    inst = build(index, config, sim, [vehicle], 5000.0)
    plan, stats, _ = mpc.solve_step(inst)
    stripe = inst.stripes[0]
    trickle = MODEL.drive_power(10.0) / stripe.efficiency
    assert plan.per_vehicle[0] == pytest.approx(trickle, abs=1e-4)
    # cross-check against the brute-force oracle on the same QP
    problem, layout = mpc.build_qp(inst)
    C1 = np.vstack([problem.C.toarray(), -problem.C.toarray()])
    u1 = np.concatenate([problem.u, -problem.l])
    keep = np.isfinite(u1)
    x_ref, _ = brute_force_qp(
        problem.Q.toarray(), problem.q, problem.A.toarray(), problem.b,
        C1[keep], u1[keep],
    )
    # oracle accuracy limited by the ill-conditioned dynamics coefficients
    assert x_ref[layout.pv_idx(0, 0)] == pytest.approx(trickle, abs=1e-4)


def test_monotone_prioritization_two_vehicles():
    rng = np.random.default_rng(14)
    for _ in range(12):
        index, config, sim = single_stripe_setup(total_power=120.0, lam=0.0)
        socs = np.sort(rng.uniform(0.05, 0.75, size=2))
        target = float(rng.uniform(0.8, 1.0))
        cap = float(rng.uniform(40.0, 80.0))
        pos = float(rng.uniform(600.0, 1200.0))
        fleet = [
            snap(vid=0, position=pos, soc=float(socs[0]), target=target,
                 capacity=cap),
            snap(vid=1, position=pos, soc=float(socs[1]), target=target,
                 capacity=cap),
        ]
        inst = build(index, config, sim, fleet, 120.0)
        plan, _, _ = mpc.solve_step(inst)
        assert plan.per_vehicle[0] >= plan.per_vehicle[1] - 1e-3


def test_saturated_stripe_total_matches_caps():
    # lam=0, xi -> 0: a single saturated stripe delivers
    # min(stripe cap, sum of per-vehicle caps)
    for n_veh, total in ((5, 350.0), (3, 350.0)):
        index, config, sim = single_stripe_setup(
            total_power=total, xi=1e-6, lam=0.0
        )
        fleet = [
            snap(vid=i, position=600.0 + 10.0 * i, soc=0.05, target=1.0,
                 capacity=80.0)
            for i in range(n_veh)
        ]
        inst = build(index, config, sim, fleet, total)
        plan, _, _ = mpc.solve_step(inst)
        delivered = sum(plan.per_vehicle.values())
        expected = min(total, 100.0 * n_veh)
        assert delivered == pytest.approx(expected, abs=0.01)


def test_urgency_scaling_leaves_argmin():
    # lam=0: scaling the whole objective by c > 0 leaves the argmin unchanged
    index, config, sim = single_stripe_setup(total_power=150.0, lam=0.0)
    fleet = [
        snap(vid=0, position=700.0, soc=0.2, target=0.9),
        snap(vid=1, position=720.0, soc=0.5, target=0.9),
    ]
    inst = build(index, config, sim, fleet, 150.0)
    problem, layout = mpc.build_qp(inst)
    base = qp.solve(problem, tol=1e-9)
    scaled = qp.QpProblem(Q=problem.Q * 25.0, q=problem.q * 25.0,
                          A=problem.A, b=problem.b, C=problem.C,
                          l=problem.l, u=problem.u)
    other = qp.solve(scaled, tol=1e-9)
    assert other.x == pytest.approx(base.x, abs=1e-5)


def test_first_step_feasible_exactly():
    stripes = sc.build_stripes(sc.CorridorSpec(), 16000.0)
    index = mob.StripeIndex(stripes)
    config = sc.MpcConfig(horizon=6)
    sim = sc.SimConfig(mpc=config)
    rng = np.random.default_rng(5)
    fleet = [
        snap(vid=i, position=float(rng.uniform(0, 9650)),
             direction=int(rng.integers(0, 2)),
             soc=float(rng.uniform(0.05, 0.6)),
             target=float(rng.uniform(0.6, 1.0)),
             capacity=float(rng.uniform(40, 80)),
             exit_pos=9650.0 if rng.integers(0, 2) == 0 else 0.0)
        for i in range(60)
    ]
    fleet = [
        v if (v.direction == 0) == (v.exit_pos == 9650.0)
        else mob.VehicleSnapshot(**{**v.__dict__, "exit_pos": 0.0 if v.direction else 9650.0})
        for v in fleet
    ]
    inst = build(index, config, sim, fleet, 16000.0)
    plan, stats, _ = mpc.solve_step(inst)
    assert sum(plan.per_stripe.values()) == pytest.approx(16000.0, abs=1e-9)
    for sid, p in plan.per_stripe.items():
        stripe = index.stripes[sid]
        assert stripe.p_min - 1e-9 <= p <= config.rho * stripe.static_share + 1e-9
    absorbed = {}
    for v in inst.vehicles:
        p = plan.per_vehicle[v.id]
        assert p >= -1e-12
        sid = plan.assigned_stripe[v.id]
        if sid is None:
            assert p == 0.0
        else:
            assert p <= min(v.p_on, index.stripes[sid].coil_power_nom) + 1e-9
            absorbed[sid] = absorbed.get(sid, 0.0) + p
    for sid, tot in absorbed.items():
        assert tot <= plan.per_stripe[sid] + 1e-9
    assert stats.max_clip <= 1e-2


def test_warm_start_reduces_iterations():
    stripes = sc.build_stripes(sc.CorridorSpec(), 16000.0)
    index = mob.StripeIndex(stripes)
    config = sc.MpcConfig(horizon=6)
    sim = sc.SimConfig(mpc=config)
    fleet = [snap(vid=i, position=640.0 + 25.0 * i, soc=0.1 + 0.02 * i)
             for i in range(12)]
    inst = build(index, config, sim, fleet, 16000.0)
    plan1, stats1, state = mpc.solve_step(inst)
    moved = [
        mob.VehicleSnapshot(**{**v.__dict__, "position": v.position + 50.0})
        for v in fleet
    ]
    inst2 = build(index, config, sim, moved, 16000.0)
    _, stats2, _ = mpc.solve_step(inst2, state)
    _, stats2_cold, _ = mpc.solve_step(inst2, None)
    assert stats2.iterations <= stats2_cold.iterations
