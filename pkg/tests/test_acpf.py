import numpy as np
import pytest
from scipy.optimize import fsolve

from gridforge.acpf import (
    INSECURE, SECURE, check_constraints, classify_two_stage, is_secure, solve_all, solve_pf,
)
from gridforge.errors import Diverged, UnconvergedInput
from gridforge.netmodel import build_input_space, nominal_point, ybus

from conftest import two_bus

# reference power flow of the MATPOWER case14 base dispatch, computed offline
# with an established Newton solver (pypower runpf, tol 1e-8)
REF14_SLACK_P_MW = 232.3932723578988
REF14_GEN_Q_MVAR = [-16.5493005414, 43.5571001395, 25.0753484991, 12.7309444073, 17.6234513681]
REF14_VM = [1.06, 1.045, 1.01, 1.0176708537, 1.0195138598, 1.07, 1.0615195325, 1.09,
            1.0559317206, 1.050984625, 1.0569065185, 1.0551885632, 1.0503817136, 1.0355299459]


def test_case14_matches_reference(case14):
    xs = build_input_space(case14)
    gb = case14.gen_buses
    # case dispatch without clipping set-points to the voltage box
    x = np.empty(xs.n)
    x[xs.p_slice] = gb.p_init[xs.p_gen]
    x[xs.v_slice] = gb.v_set[xs.v_gen]
    sol = solve_pf(case14, x)
    assert sol.converged
    assert np.max(np.abs(sol.v_mag - REF14_VM)) < 1e-6
    assert sol.slack_p * 100 == pytest.approx(REF14_SLACK_P_MW, abs=1e-4)
    assert np.max(np.abs(sol.gen_q * 100 - REF14_GEN_Q_MVAR)) < 1e-4


def test_flat_fixed_point():
    net = two_bus(pd=0.0, qd=0.0, r=0.0, x=0.1)
    sol = solve_pf(net, np.array([1.0]))
    assert sol.converged and sol.iterations == 0
    assert np.allclose(sol.v_mag, 1.0) and np.allclose(sol.v_ang, 0.0)


def test_two_bus_against_direct_nodal_solve():
    net = two_bus(pd=50.0, qd=20.0, r=0.01, x=0.1)
    sol = solve_pf(net, np.array([1.0]))
    z = complex(0.01, 0.1)
    s_load = complex(0.5, 0.2)

    def f(u):
        v2 = u[0] * np.exp(1j * u[1])
        # current into bus 2 through the line equals the load current
        mis = v2 * np.conj((1.0 - v2) / z) - s_load
        return [mis.real, mis.imag]

    vm, va = fsolve(f, [1.0, 0.0], xtol=1e-13)
    assert sol.v_mag[1] == pytest.approx(vm, abs=1e-8)
    assert sol.v_ang[1] == pytest.approx(va, abs=1e-8)
    v2 = vm * np.exp(1j * va)
    losses = abs((1.0 - v2) / z) ** 2 * z.real
    assert sol.slack_p == pytest.approx(0.5 + losses, abs=1e-8)


def test_mismatch_and_linking_invariants(case14):
    net = case14.configure(outages=[0, 5, 9])
    xs = build_input_space(net)
    x = nominal_point(net, xs)
    sols = solve_all(net, x)
    gb = net.gen_buses
    for c, sol in enumerate(sols):
        assert sol.converged
        y = ybus(net, net.contingencies[c])[0]
        v = sol.voltage
        s = v * np.conj(y @ v)
        a = net.arrays
        inj = -(a.pd + 1j * a.qd)
        np.add.at(inj, gb.bus, 1j * sol.gen_q)
        pg = np.zeros(len(gb))
        pg[xs.p_gen] = x[xs.p_slice]
        pg[gb.slack_pos] = sol.slack_p
        np.add.at(inj, gb.bus, pg)
        assert np.max(np.abs(s - inj)) <= 1e-8
        # generator set-points identical in every state
        assert np.allclose(sol.v_mag[gb.bus], x[xs.v_slice], atol=1e-14, rtol=0)


def test_flow_losses_match_series_current(case14):
    xs = build_input_space(case14)
    sol = solve_pf(case14, nominal_point(case14, xs))
    a = case14.arrays
    v = sol.voltage
    for k, br in enumerate(case14.branches):
        if br.b_charge != 0 or br.tap != 1.0:
            continue
        z = complex(br.r, br.x)
        i = (v[a.f[k]] - v[a.t[k]]) / z
        assert (sol.s_from[k] + sol.s_to[k]) == pytest.approx(z * abs(i) ** 2, abs=1e-8)


def test_check_constraints_voltage_violation():
    net = two_bus()
    sol = solve_pf(net, np.array([1.0]))
    sol.v_mag = sol.v_mag.copy()
    sol.v_mag[1] = 1.16  # v_max = 1.1
    rep = check_constraints(net, np.array([1.0]), [sol])
    assert rep.label == INSECURE
    (v,) = [v for v in rep.violations if v.kind == "v_bound"]
    assert v.element == 2 and v.magnitude == pytest.approx(0.06)


def test_check_constraints_flat_secure():
    net = two_bus(pd=0.0, qd=0.0)
    rep = check_constraints(net, np.array([1.0]), [solve_pf(net, np.array([1.0]))])
    assert rep.label == SECURE and rep.violations == []


def test_check_constraints_requires_convergence():
    net = two_bus(pd=5000.0, qd=2000.0)
    sol = solve_pf(net, np.array([1.0]))
    assert not sol.converged
    with pytest.raises(UnconvergedInput):
        check_constraints(net, np.array([1.0]), [sol])
    with pytest.raises(Diverged):
        solve_pf(net, np.array([1.0]), raise_on_diverge=True)


def test_divergence_is_insecure():
    net = two_bus(pd=5000.0, qd=2000.0)
    rep, x_adj = classify_two_stage(net, np.array([1.0]))
    assert rep.label == INSECURE and rep.diverged and x_adj is None


def test_flow_violation_tagged_with_contingency(case14):
    net = case14.configure(outages=[0])
    xs = build_input_space(net)
    x = nominal_point(net, xs)
    sols = solve_all(net, x)
    # rate a branch just below the flow it carries only after the outage
    a = net.arrays
    k = int(np.argmax(np.abs(sols[1].s_from) - np.abs(sols[0].s_from)))
    cap = 0.5 * (abs(sols[0].s_from[k]) + abs(sols[1].s_from[k]))
    assert abs(sols[1].s_from[k]) > cap > max(abs(sols[0].s_from[k]), abs(sols[0].s_to[k]))
    from dataclasses import replace
    brs = list(net.branches)
    brs[k] = replace(brs[k], s_max=cap)
    rated = replace(net, branches=tuple(brs))
    rep = check_constraints(rated, x, solve_all(rated, x))
    flows = [v for v in rep.violations if v.kind.startswith("flow") and v.element == k]
    assert flows and all(v.contingency == 1 for v in flows)
    assert a.s_max[k] != cap


def test_insufficient_supply_is_insecure():
    net = two_bus(pd=400.0, qd=0.0, pmax=300.0)
    rep, _ = classify_two_stage(net, np.array([1.0]))
    assert rep.label == INSECURE
    assert any(v.kind == "gen_p" for v in rep.violations) or rep.diverged


def test_secure_interior_point_is_direct(case14, case14_secure):
    x = case14_secure[:5]
    reps = [classify_two_stage(case14, xi)[0] for xi in x]
    assert any(r.stage == "direct" for r in reps)
    assert all(r.label == SECURE for r in reps)


def test_q_adjusted_stage(case14, case14_secure):
    """Raise one set-point until its reactive limit binds; stage two repairs it."""
    xs = build_input_space(case14)
    gb = case14.gen_buses
    found = None
    for x in case14_secure:
        if classify_two_stage(case14, x)[0].stage != "direct":
            continue
        for pos, k in enumerate(xs.v_slice):
            g = xs.v_gen[pos]
            if g == gb.slack_pos:
                continue
            for v in np.linspace(x[k], xs.x_max[k], 25)[1:]:
                xt = x.copy()
                xt[k] = v
                rep, x_adj = classify_two_stage(case14, xt)
                if rep.stage == "q_adjusted":
                    found = (xt, k, rep, x_adj)
                    break
                if rep.label != SECURE:
                    break
            if found:
                break
        if found:
            break
    assert found is not None
    xt, k, rep, x_adj = found
    changed = np.flatnonzero(x_adj != xt)
    assert set(changed) <= set(xs.v_slice)
    assert len(changed) >= 1
    assert is_secure(case14, x_adj)


def test_monotone_staging(case5):
    xs = build_input_space(case5)
    rng = np.random.default_rng(2)
    for _ in range(40):
        x = rng.uniform(xs.x_min, xs.x_max)
        if is_secure(case5, x):
            assert classify_two_stage(case5, x)[0].stage == "direct"
