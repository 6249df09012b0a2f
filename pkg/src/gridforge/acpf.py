"""Newton-Raphson AC power flow, constraint checks and two-stage classification.

Generator buses are PV with the voltage set-points taken from the input vector;
set-points and non-slack active powers are shared by every contingency
(preventive control). Stage two enforces generator reactive limits by PV->PQ
switching in the intact state, moves the switched set-points to the achieved
voltages and re-checks every contingency with the adjusted vector.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve

from .errors import Diverged, UnconvergedInput
from .netmodel import InputSpace, Network, build_input_space, connectivity_check, ybus

log = logging.getLogger(__name__)

PF_TOL = 1e-8
FEAS_TOL = 1e-6
MAX_NEWTON_ITER = 30
MAX_SWITCH_ITER = 10

SECURE = "secure"
INSECURE = "insecure"


@dataclass
class PowerFlowSolution:
    v_mag: np.ndarray
    v_ang: np.ndarray
    gen_q: np.ndarray  # per generator bus
    slack_p: float
    converged: bool
    iterations: int
    max_mismatch: float
    contingency: int = 0
    s_from: np.ndarray | None = None
    s_to: np.ndarray | None = None
    pq_switched: np.ndarray | None = None  # bool per generator bus

    @property
    def voltage(self) -> np.ndarray:
        return self.v_mag * np.exp(1j * self.v_ang)


@dataclass
class Violation:
    kind: str  # v_bound | gen_p | gen_q | flow_from | flow_to | angle_diff | uncertain_bound | diverged
    element: int
    magnitude: float
    contingency: int = 0


@dataclass
class FeasibilityReport:
    violations: list[Violation] = field(default_factory=list)
    label: str = SECURE
    stage: str = "none"  # direct | q_adjusted | none
    diverged: bool = False

    def worst(self) -> Violation | None:
        if not self.violations:
            return None
        return max(self.violations, key=lambda v: v.magnitude)


class _Context:
    """Per-network cached data for repeated power-flow solves."""

    def __init__(self, net: Network, xs: InputSpace | None = None):
        self.net = net
        self.xs = xs if xs is not None else build_input_space(net)
        self.arr = net.arrays
        self.gb = net.gen_buses
        self.n = net.n_bus
        self.ys = []
        for k in net.contingencies:
            if k is not None:
                connectivity_check(net, k)
            self.ys.append(ybus(net, k))
        self.u_bus = np.array([net.bus_index[u.bus] for u in net.uncertain], dtype=int)
        self.u_q = np.array([u.q_ratio for u in net.uncertain])

    def injections(self, x: np.ndarray):
        """Fixed complex injections (without generator reactive power)."""
        xs, gb, a = self.xs, self.gb, self.arr
        s = -(a.pd + 1j * a.qd).astype(complex)
        pg = np.zeros(len(gb))
        pg[xs.p_gen] = x[xs.p_slice]
        np.add.at(s, gb.bus, pg)
        pu = x[xs.u_slice]
        if len(pu):
            np.add.at(s, self.u_bus, pu + 1j * self.u_q * pu)
        vset = np.empty(len(gb))
        vset[xs.v_gen] = x[xs.v_slice]
        return s, vset, pg, pu


_ctx_cache: dict[int, _Context] = {}


def context(net: Network, xs: InputSpace | None = None) -> _Context:
    key = id(net)
    ctx = _ctx_cache.get(key)
    if ctx is None or ctx.net is not net:
        ctx = _Context(net, xs)
        if len(_ctx_cache) > 32:
            _ctx_cache.clear()
        _ctx_cache[key] = ctx
    return ctx


def _newton(y, sbus, v0, ref, pv, pq, tol, max_iter):
    v = v0.copy()
    va = np.angle(v)
    vm = np.abs(v)
    pvpq = np.r_[pv, pq]
    npvpq, npq = len(pvpq), len(pq)

    def mismatch(v):
        mis = v * np.conj(y @ v) - sbus
        return np.r_[mis[pvpq].real, mis[pq].imag]

    f = mismatch(v)
    norm = np.max(np.abs(f)) if len(f) else 0.0
    it = 0
    while norm > tol and it < max_iter:
        it += 1
        ibus = y @ v
        dv = sp.diags(v)
        dvn = sp.diags(v / np.abs(v))
        ds_dva = 1j * dv @ np.conj(sp.diags(ibus) - y @ dv)
        ds_dvm = dv @ np.conj(y @ dvn) + np.conj(sp.diags(ibus)) @ dvn
        ds_dva = sp.csr_matrix(ds_dva)
        ds_dvm = sp.csr_matrix(ds_dvm)
        j11 = ds_dva[pvpq][:, pvpq].real
        j12 = ds_dvm[pvpq][:, pq].real
        j21 = ds_dva[pq][:, pvpq].imag
        j22 = ds_dvm[pq][:, pq].imag
        jac = sp.vstack([sp.hstack([j11, j12]), sp.hstack([j21, j22])], format="csc")
        try:
            dx = spsolve(jac, -f)
        except Exception:  # singular Jacobian
            return v, False, it, np.inf
        if not np.all(np.isfinite(dx)):
            return v, False, it, np.inf
        va[pvpq] += dx[:npvpq]
        vm[pq] += dx[npvpq:npvpq + npq]
        if np.any(vm[pq] <= 0):
            return v, False, it, np.inf
        v = vm * np.exp(1j * va)
        f = mismatch(v)
        norm = np.max(np.abs(f)) if len(f) else 0.0
    return v, bool(norm <= tol), it, float(norm)


def solve_pf(net: Network, x, c: int = 0, enforce_q_limits: bool = False,
             tol: float = PF_TOL, max_iter: int = MAX_NEWTON_ITER,
             xs: InputSpace | None = None, raise_on_diverge: bool = False) -> PowerFlowSolution:
    """Flat-start Newton power flow for contingency ``c`` at input vector ``x``."""
    ctx = context(net, xs)
    x = np.asarray(x, dtype=float)
    y, yf, yt = ctx.ys[c]
    gb, a = ctx.gb, ctx.arr
    s_fixed, vset, pg, pu = ctx.injections(x)
    n = ctx.n
    ref = net.slack
    is_gen = np.zeros(n, dtype=bool)
    is_gen[gb.bus] = True
    switched = np.zeros(len(gb), dtype=bool)
    q_fix = np.zeros(len(gb))
    v0 = np.ones(n, dtype=complex)
    v0[gb.bus] = vset

    total_it = 0
    for _ in range(MAX_SWITCH_ITER + 1):
        pv_mask = is_gen.copy()
        pv_mask[gb.bus[switched]] = False
        pv_mask[ref] = False
        pv = np.flatnonzero(pv_mask)
        pq = np.flatnonzero(~pv_mask & (np.arange(n) != ref))
        sbus = s_fixed.copy()
        np.add.at(sbus, gb.bus[switched], 1j * q_fix[switched])
        v, ok, it, mis = _newton(y, sbus, v0, ref, pv, pq, tol, max_iter)
        total_it += it
        if not ok:
            break
        s_calc = v * np.conj(y @ v)
        q_inj = s_calc.imag - s_fixed.imag
        gen_q = q_inj[gb.bus]
        if not enforce_q_limits:
            break
        vm = np.abs(v)
        changed = False
        for k in range(len(gb)):
            if gb.bus[k] == ref:
                continue
            if not switched[k]:
                if gen_q[k] > gb.q_max[k] + tol:
                    switched[k], q_fix[k], changed = True, gb.q_max[k], True
                elif gen_q[k] < gb.q_min[k] - tol:
                    switched[k], q_fix[k], changed = True, gb.q_min[k], True
            else:
                at_max = q_fix[k] == gb.q_max[k]
                if (at_max and vm[gb.bus[k]] > vset[k] + tol) or (not at_max and vm[gb.bus[k]] < vset[k] - tol):
                    switched[k], changed = False, True
        if not changed:
            break
        v0 = v.copy()
        v0[gb.bus[~switched]] = vset[~switched] * np.exp(1j * np.angle(v[gb.bus[~switched]]))
    if not ok:
        if raise_on_diverge:
            raise Diverged(f"power flow did not converge (contingency {c}, mismatch {mis:.3g})")
        return PowerFlowSolution(
            v_mag=np.abs(v), v_ang=np.angle(v), gen_q=np.full(len(gb), np.nan), slack_p=np.nan,
            converged=False, iterations=total_it, max_mismatch=mis, contingency=c,
        )
    s_calc = v * np.conj(y @ v)
    gen_q = (s_calc.imag - s_fixed.imag)[gb.bus]
    slack_p = float(s_calc.real[ref] - s_fixed.real[ref] + pg[gb.slack_pos])
    s_from = (v[a.f] * np.conj(yf @ v))
    s_to = (v[a.t] * np.conj(yt @ v))
    return PowerFlowSolution(
        v_mag=np.abs(v), v_ang=np.angle(v), gen_q=gen_q, slack_p=slack_p, converged=True,
        iterations=total_it, max_mismatch=mis, contingency=c, s_from=s_from, s_to=s_to,
        pq_switched=switched,
    )


def check_constraints(net: Network, x, solutions, feas_tol: float = FEAS_TOL,
                      xs: InputSpace | None = None) -> FeasibilityReport:
    """Evaluate every operating limit for each contingency; list all violations."""
    ctx = context(net, xs)
    xs, gb, a = ctx.xs, ctx.gb, ctx.arr
    x = np.asarray(x, dtype=float)
    rep = FeasibilityReport()
    viol = rep.violations
    lo_x = x - xs.x_min
    hi_x = xs.x_max - x
    for k in range(xs.n):
        if xs.roles[k] == "uncertain_p":
            kind = "uncertain_bound"
        elif xs.roles[k] == "gen_p":
            kind = "gen_p"
        else:
            kind = "v_bound"
        amount = max(-lo_x[k], -hi_x[k])
        if amount > feas_tol:
            viol.append(Violation(kind, xs.elements[k], float(amount), 0))
    for sol in solutions:
        if not sol.converged:
            raise UnconvergedInput(f"contingency {sol.contingency} has no converged solution")
        c = sol.contingency
        vm = sol.v_mag
        over = np.maximum(vm - a.vmax, a.vmin - vm)
        for i in np.flatnonzero(over > feas_tol):
            viol.append(Violation("v_bound", net.buses[i].id, float(over[i]), c))
        qo = np.maximum(sol.gen_q - gb.q_max, gb.q_min - sol.gen_q)
        for k in np.flatnonzero(qo > feas_tol):
            viol.append(Violation("gen_q", net.buses[gb.bus[k]].id, float(qo[k]), c))
        s = gb.slack_pos
        po = max(sol.slack_p - gb.p_max[s], gb.p_min[s] - sol.slack_p)
        if po > feas_tol:
            viol.append(Violation("gen_p", net.buses[gb.bus[s]].id, float(po), c))
        on = a.in_service.copy()
        if net.contingencies[c] is not None:
            on[net.contingencies[c]] = False
        lim = np.where(np.isfinite(a.s_max), a.s_max, np.inf)
        for kind, flow in (("flow_from", sol.s_from), ("flow_to", sol.s_to)):
            ex = np.abs(flow) - lim
            for k in np.flatnonzero(on & (ex > feas_tol)):
                viol.append(Violation(kind, int(k), float(ex[k]), c))
        dth = sol.v_ang[a.f] - sol.v_ang[a.t]
        dth = (dth + np.pi) % (2 * np.pi) - np.pi
        ao = np.maximum(dth - a.ang_max, a.ang_min - dth)
        for k in np.flatnonzero(on & (ao > feas_tol)):
            viol.append(Violation("angle_diff", int(k), float(ao[k]), c))
    rep.label = SECURE if not viol else INSECURE
    return rep


def _direct(net, x, feas_tol, xs, pf_tol=PF_TOL):
    sols = []
    for c in range(len(net.contingencies)):
        sol = solve_pf(net, x, c, tol=pf_tol, xs=xs)
        if not sol.converged:
            rep = FeasibilityReport(
                [Violation("diverged", -1, float("inf"), c)], INSECURE, "none", True)
            return rep, sols
        sols.append(sol)
    return check_constraints(net, x, sols, feas_tol, xs=xs), sols


def classify_two_stage(net: Network, x, feas_tol: float = FEAS_TOL,
                       xs: InputSpace | None = None, pf_tol: float = PF_TOL):
    """Return ``(report, adjusted_x)``; ``adjusted_x`` is set only for stage ``q_adjusted``."""
    ctx = context(net, xs)
    xs = ctx.xs
    x = np.asarray(x, dtype=float)
    rep, _ = _direct(net, x, feas_tol, xs, pf_tol)
    if rep.label == SECURE:
        rep.stage = "direct"
        return rep, None
    sol = solve_pf(net, x, 0, enforce_q_limits=True, tol=pf_tol, xs=xs)
    if not sol.converged or not sol.pq_switched.any():
        rep.stage = "none"
        return rep, None
    x_adj = x.copy()
    gb = ctx.gb
    for k in np.flatnonzero(sol.pq_switched):
        pos = np.flatnonzero(xs.v_gen == k)
        x_adj[xs.v_slice[pos]] = sol.v_mag[gb.bus[k]]
    rep2, _ = _direct(net, x_adj, feas_tol, xs, pf_tol)
    if rep2.label == SECURE:
        rep2.stage = "q_adjusted"
        return rep2, x_adj
    rep.stage = "none"
    rep.diverged = rep.diverged or rep2.diverged
    return rep, None


def is_secure(net: Network, x, feas_tol: float = FEAS_TOL, xs: InputSpace | None = None,
              pf_tol: float = PF_TOL) -> bool:
    """Direct (stage-one) security of ``x`` itself."""
    rep, _ = _direct(net, np.asarray(x, dtype=float), feas_tol, xs or context(net).xs, pf_tol)
    return rep.label == SECURE


def solve_all(net: Network, x, xs: InputSpace | None = None) -> list[PowerFlowSolution]:
    return [solve_pf(net, x, c, xs=xs) for c in range(len(net.contingencies))]
