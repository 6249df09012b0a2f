"""QC relaxation of the N-1 security-constrained AC feasibility set.

The model lifts every contingency state into W-space (squared magnitudes,
real/imaginary voltage products per branch) and links the blocks through the
shared input vector: non-slack generator dispatch, generator voltage
magnitudes and uncertain injections.  Trigonometric and bilinear terms are
replaced by the standard QC envelopes.  The closest-feasible problem
minimises the normalised Euclidean distance from a probe point to the
projection of the relaxation onto x.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import BoundDomainError, SolverFailure
from .netmodel import InputSpace, Network, build_input_space
from .socp import (
    OPTIMAL, PRIMAL_INFEASIBLE, SOLVER_TOL, ConicProgram, ProgramBuilder, cone_violation, solve,
)

R_EPS = 1e-6
_HALF_PI = math.pi / 2

FEASIBLE_POINT = "feasible_point"
CUT_FOUND = "cut_found"
QC_EMPTY = "qc_empty"
SOLVER_FAILURE = "solver_failure"


# ---------------------------------------------------------------------------
# bounds
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class RelaxationBounds:
    """Voltage, angle-difference and input bounds used to build the envelopes.

    The tightened voltage and angle bounds apply to the intact state only;
    contingency blocks always use the bounds of the case file.
    """

    v_min: np.ndarray
    v_max: np.ndarray
    theta_min: np.ndarray
    theta_max: np.ndarray
    xs: InputSpace

    @classmethod
    def from_network(cls, net: Network, xs: InputSpace | None = None) -> "RelaxationBounds":
        a = net.arrays
        return cls(a.vmin.copy(), a.vmax.copy(), a.ang_min.copy(), a.ang_max.copy(),
                   xs if xs is not None else build_input_space(net))


# ---------------------------------------------------------------------------
# envelopes
# ---------------------------------------------------------------------------

def mccormick(z: str, x: str, y: str, xl: float, xu: float, yl: float, yu: float):
    """Four McCormick rows for ``z = x*y`` as ``(coefs, rhs)`` meaning coefs.v <= rhs."""
    return [
        ({x: yl, y: xl, z: -1.0}, xl * yl),          # z >= xl y + yl x - xl yl
        ({x: yu, y: xu, z: -1.0}, xu * yu),
        ({z: 1.0, x: -yu, y: -xl}, -xl * yu),        # z <= xl y + yu x - xl yu
        ({z: 1.0, x: -yl, y: -xu}, -xu * yl),
    ]


def trig_ranges(lo: float, hi: float) -> tuple[float, float, float, float]:
    """Range of cos and sin over ``[lo, hi]`` within (-pi/2, pi/2)."""
    c_lo = min(math.cos(lo), math.cos(hi))
    c_hi = 1.0 if lo <= 0.0 <= hi else max(math.cos(lo), math.cos(hi))
    return c_lo, c_hi, math.sin(lo), math.sin(hi)


def _line(y: str, xv: str, slope: float, x0: float, y0: float, upper: bool):
    """Row for y <= y0 + slope (x - x0) (upper) or y >= ... (lower)."""
    if upper:
        return ({y: 1.0, xv: -slope}, y0 - slope * x0)
    return ({y: -1.0, xv: slope}, slope * x0 - y0)


def cos_cuts(lo: float, hi: float):
    """Linear cosine envelope rows on symbols ``cs``/``phi``; the quadratic
    upper bound is returned separately by :func:`cos_curvature`."""
    rows = []
    if hi - lo > 1e-12:
        slope = (math.cos(hi) - math.cos(lo)) / (hi - lo)
        rows.append(_line("cs", "phi", slope, lo, math.cos(lo), upper=False))
    else:
        rows.append(({"cs": -1.0}, -math.cos(lo)))
    c_lo, c_hi, _, _ = trig_ranges(lo, hi)
    rows += [({"cs": 1.0}, c_hi), ({"cs": -1.0}, -c_lo)]
    return rows


def cos_curvature(lo: float, hi: float) -> float:
    """Coefficient k of the concave upper bound cs <= 1 - k phi^2."""
    tm = max(abs(lo), abs(hi))
    if tm < 1e-12:
        return 0.5
    return (1.0 - math.cos(tm)) / (tm * tm)


def sin_cuts(lo: float, hi: float):
    """Sine envelope rows on symbols ``sn``/``phi``."""
    rows = []
    if lo < 0.0 < hi:
        tm = max(-lo, hi)
        h = tm / 2
        rows.append(_line("sn", "phi", math.cos(h), h, math.sin(h), upper=True))
        rows.append(_line("sn", "phi", math.cos(h), -h, -math.sin(h), upper=False))
    elif hi - lo > 1e-12:
        concave = lo >= 0.0
        slope = (math.sin(hi) - math.sin(lo)) / (hi - lo)
        # chord on the opposite side of the tangents
        rows.append(_line("sn", "phi", slope, lo, math.sin(lo), upper=not concave))
        for p in (lo, 0.5 * (lo + hi), hi):
            rows.append(_line("sn", "phi", math.cos(p), p, math.sin(p), upper=concave))
    rows += [({"sn": 1.0}, math.sin(hi)), ({"sn": -1.0}, -math.sin(lo))]
    return rows


def branch_cuts(vl_f: float, vu_f: float, vl_t: float, vu_t: float, lo: float, hi: float):
    """All linear envelope rows of one branch over symbols
    ``v_f, v_t, vv, cs, sn, wr, wi, phi``."""
    c_lo, c_hi, s_lo, s_hi = trig_ranges(lo, hi)
    rows = mccormick("vv", "v_f", "v_t", vl_f, vu_f, vl_t, vu_t)
    rows += cos_cuts(lo, hi) + sin_cuts(lo, hi)
    pl, pu = vl_f * vl_t, vu_f * vu_t
    rows += mccormick("wr", "vv", "cs", pl, pu, c_lo, c_hi)
    rows += mccormick("wi", "vv", "sn", pl, pu, s_lo, s_hi)
    rows += [({"phi": 1.0}, hi), ({"phi": -1.0}, -lo), ({"wr": -1.0}, 0.0)]
    if hi < _HALF_PI - 1e-9:
        rows.append(({"wi": 1.0, "wr": -math.tan(hi)}, 0.0))
    if lo > -_HALF_PI + 1e-9:
        rows.append(({"wi": -1.0, "wr": math.tan(lo)}, 0.0))
    return rows


def square_cuts(vl: float, vu: float):
    """Linear part of the square envelope on ``w``/``v`` (w >= v^2 is conic)."""
    return [({"w": 1.0, "v": -(vl + vu)}, -vl * vu)]


def envelope_violation(vi, vj, phi, vl_i, vu_i, vl_j, vu_j, lo, hi) -> np.ndarray:
    """Largest violation of the envelopes at the true (nonconvex) values.

    Vectorised over arrays of (vi, vj, phi); a non-positive result means the
    point lies inside every envelope.
    """
    vi, vj, phi = (np.asarray(a, dtype=float) for a in (vi, vj, phi))
    vals = {
        "v_f": vi, "v_t": vj, "vv": vi * vj, "cs": np.cos(phi), "sn": np.sin(phi),
        "wr": vi * vj * np.cos(phi), "wi": vi * vj * np.sin(phi), "phi": phi,
    }
    worst = np.full(vi.shape, -np.inf)
    for coefs, rhs in branch_cuts(vl_i, vu_i, vl_j, vu_j, lo, hi):
        lhs = sum(c * vals[s] for s, c in coefs.items())
        worst = np.maximum(worst, lhs - rhs)
    k = cos_curvature(lo, hi)
    worst = np.maximum(worst, vals["cs"] + k * phi ** 2 - 1.0)
    for v, vl, vu in ((vi, vl_i, vu_i), (vj, vl_j, vu_j)):
        for coefs, rhs in square_cuts(vl, vu):
            worst = np.maximum(worst, coefs["w"] * v * v + coefs["v"] * v - rhs)
    return worst


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class QCModel:
    program: ConicProgram
    var_index: dict
    active_contingencies: tuple[int, ...]
    x_dims: np.ndarray
    xs: InputSpace
    x_cols: np.ndarray
    # equality rows fixing inputs outside x_dims (row, input index)
    fix_rows: tuple[tuple[int, int], ...] = ()
    # first G row of the distance cone (None when built without R)
    dist_row: int | None = None
    dist_dims: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    names: tuple[str, ...] = ()

    @property
    def r_col(self) -> int | None:
        return self.var_index.get("R")

    def column(self, name: str) -> int:
        return self.var_index[name]


def _check_angles(lo: np.ndarray, hi: np.ndarray) -> None:
    bad = (lo < -_HALF_PI - 1e-12) | (hi > _HALF_PI + 1e-12) | (lo > hi + 1e-12)
    if bad.any():
        k = int(np.flatnonzero(bad)[0])
        raise BoundDomainError(
            f"branch {k}: angle bounds [{lo[k]:.4g}, {hi[k]:.4g}] outside [-pi/2, pi/2]")


def _branch_flows(a, k: int):
    """Real-linear maps (w_f, w_t, wr, wi) -> (p_f, q_f, p_t, q_t, l_f, l_t) as coefficient tuples."""
    yff, yft, ytf, ytt = a.yff[k], a.yft[k], a.ytf[k], a.ytt[k]
    # S_f = conj(yff) w_f + conj(yft) (wr + j wi)
    g, b = yft.real, yft.imag
    p_f = (yff.real, 0.0, g, b)
    q_f = (-yff.imag, 0.0, -b, g)
    # S_t = conj(ytt) w_t + conj(ytf) (wr - j wi)
    g, b = ytf.real, ytf.imag
    p_t = (0.0, ytt.real, g, -b)
    q_t = (0.0, -ytt.imag, -b, -g)

    def current(alpha, beta, from_side):
        # |alpha V_f + beta V_t|^2
        m = alpha * np.conj(beta)
        return (abs(alpha) ** 2, abs(beta) ** 2, 2 * m.real, -2 * m.imag)
    l_f = current(yff, yft, True)
    l_t = current(ytf, ytt, False)
    return p_f, q_f, p_t, q_t, l_f, l_t


def build_qc(net: Network, contingencies: Sequence[int] | None = None,
             bounds: RelaxationBounds | None = None, x_dims: Sequence[int] | None = None,
             with_distance: bool = True) -> QCModel:
    """Assemble the QC program.

    ``contingencies`` indexes ``net.contingencies`` (default: all).  Inputs
    outside ``x_dims`` (default: every non-frozen input) are pinned by
    equality rows whose right-hand side is set per probe.
    """
    if bounds is None:
        bounds = RelaxationBounds.from_network(net)
    xs = bounds.xs
    a = net.arrays
    gb = net.gen_buses
    cs_list = tuple(range(len(net.contingencies))) if contingencies is None else tuple(contingencies)
    for c in cs_list:
        lo, hi = (bounds.theta_min, bounds.theta_max) if c == 0 else (a.ang_min, a.ang_max)
        _check_angles(lo, hi)
    x_dims = xs.active if x_dims is None else np.array(sorted(set(int(k) for k in x_dims)), dtype=int)
    x_dims = np.array([k for k in x_dims if not xs.frozen[k]], dtype=int)

    B = ProgramBuilder()
    vi: dict = {}

    def var(name, lb=-np.inf, ub=np.inf):
        vi[name] = B.var(name, lb, ub)
        return vi[name]

    # inputs, in physical units, boxed by the tightened bounds
    x_cols = np.array([var(f"x[{k}]", xs.x_bt_min[k], xs.x_bt_max[k]) for k in range(xs.n)], dtype=int)
    fix_rows = []
    free = set(x_dims.tolist())
    for k in range(xs.n):
        if k not in free:
            fix_rows.append((B.eq({int(x_cols[k]): 1.0}, float(xs.x_bt_min[k])), k))

    p_of_gen = {int(g): int(x_cols[xs.p_slice[i]]) for i, g in enumerate(xs.p_gen)}
    v_of_gen = {int(g): int(x_cols[xs.v_slice[i]]) for i, g in enumerate(xs.v_gen)}
    u_bus = [net.bus_index[u.bus] for u in net.uncertain]
    u_cols = {int(k): int(x_cols[xs.u_slice[i]]) for i, k in enumerate(xs.u_idx)}

    n = net.n_bus
    for c in cs_list:
        out = net.contingencies[c]
        if c == 0:
            vmin, vmax = bounds.v_min, bounds.v_max
            tmin, tmax = bounds.theta_min, bounds.theta_max
        else:
            vmin, vmax = a.vmin, a.vmax
            tmin, tmax = a.ang_min, a.ang_max
        w = [var(f"w[{c},{i}]", vmin[i] ** 2, vmax[i] ** 2) for i in range(n)]
        v = [var(f"v[{c},{i}]", vmin[i], vmax[i]) for i in range(n)]
        th = [var(f"theta[{c},{i}]") for i in range(n)]
        B.eq({th[net.slack]: 1.0}, 0.0)
        for i in range(n):
            B.rsoc(({w[i]: 1.0}, 0.0), ({}, 1.0), [({v[i]: 1.0}, 0.0)])
            for coefs, rhs in square_cuts(vmin[i], vmax[i]):
                B.le({w[i]: coefs["w"], v[i]: coefs["v"]}, rhs)
        # generator voltages are inputs shared by every state
        for g, col in v_of_gen.items():
            B.eq({v[gb.bus[g]]: 1.0, col: -1.0}, 0.0)
        pg = []
        qg = []
        for g in range(len(gb)):
            if g == gb.slack_pos:
                pg.append(var(f"pg[{c},{g}]", gb.p_min[g], gb.p_max[g]))
            else:
                pg.append(p_of_gen[g])
            qg.append(var(f"qg[{c},{g}]", gb.q_min[g], gb.q_max[g]))

        # nodal balance accumulators: coefs for P and Q rows per bus
        bal_p = [dict() for _ in range(n)]
        bal_q = [dict() for _ in range(n)]

        def add(d, col, val):
            d[col] = d.get(col, 0.0) + val

        for i in range(n):
            add(bal_p[i], w[i], a.gs[i])
            add(bal_q[i], w[i], -a.bs[i])
        for g in range(len(gb)):
            add(bal_p[gb.bus[g]], pg[g], -1.0)
            add(bal_q[gb.bus[g]], qg[g], -1.0)
        for k, i in enumerate(u_bus):
            col = u_cols[k]
            add(bal_p[i], col, -1.0)
            add(bal_q[i], col, -net.uncertain[k].q_ratio)

        for k in range(len(net.branches)):
            if not a.in_service[k] or k == out:
                continue
            f, t = int(a.f[k]), int(a.t[k])
            lo, hi = float(tmin[k]), float(tmax[k])
            tag = f"{c},{k}"
            cols = {
                "v_f": v[f], "v_t": v[t],
                "vv": var(f"vv[{tag}]"), "cs": var(f"cs[{tag}]"), "sn": var(f"sn[{tag}]"),
                "wr": var(f"wr[{tag}]"), "wi": var(f"wi[{tag}]"), "phi": var(f"phi[{tag}]"),
            }
            B.eq({cols["phi"]: 1.0, th[f]: -1.0, th[t]: 1.0}, 0.0)
            for coefs, rhs in branch_cuts(vmin[f], vmax[f], vmin[t], vmax[t], lo, hi):
                B.le({cols[s]: val for s, val in coefs.items()}, rhs)
            kc = cos_curvature(lo, hi)
            B.rsoc(({cols["cs"]: -1.0}, 1.0), ({}, 1.0 / kc), [({cols["phi"]: 1.0}, 0.0)])
            basis = (w[f], w[t], cols["wr"], cols["wi"])
            p_f, q_f, p_t, q_t, l_f, l_t = _branch_flows(a, k)
            flows = {}
            for nm, coef in (("pf", p_f), ("qf", q_f), ("pt", p_t), ("qt", q_t), ("l", l_f)):
                col = var(f"{nm}[{tag}]")
                row = {col: 1.0}
                for b_, cv in zip(basis, coef):
                    if cv != 0.0:
                        row[b_] = row.get(b_, 0.0) - cv
                B.eq(row, 0.0)
                flows[nm] = col
            lt_expr = ({b_: cv for b_, cv in zip(basis, l_t) if cv != 0.0}, 0.0)
            B.rsoc(({w[f]: 1.0}, 0.0), ({flows["l"]: 1.0}, 0.0),
                   [({flows["pf"]: 1.0}, 0.0), ({flows["qf"]: 1.0}, 0.0)])
            B.rsoc(({w[t]: 1.0}, 0.0), lt_expr,
                   [({flows["pt"]: 1.0}, 0.0), ({flows["qt"]: 1.0}, 0.0)])
            if np.isfinite(a.s_max[k]):
                for end in ("f", "t"):
                    B.soc([({}, float(a.s_max[k])), ({flows["p" + end]: 1.0}, 0.0),
                           ({flows["q" + end]: 1.0}, 0.0)])
            add(bal_p[f], flows["pf"], 1.0)
            add(bal_q[f], flows["qf"], 1.0)
            add(bal_p[t], flows["pt"], 1.0)
            add(bal_q[t], flows["qt"], 1.0)
        for i in range(n):
            B.eq(bal_p[i], -a.pd[i])
            B.eq(bal_q[i], -a.qd[i])

    dist_row = None
    dist_dims = x_dims
    if with_distance:
        r = var("R", 0.0)
        span = xs.x_max - xs.x_min
        exprs = [({r: 1.0}, 0.0)]
        exprs += [({int(x_cols[k]): 1.0 / span[k]}, 0.0) for k in dist_dims]
        soc_idx = B.soc(exprs)
    comp = B.compile()
    prog = comp.program
    if with_distance:
        dist_row = comp.soc_rows[soc_idx]
        c_vec = np.zeros(prog.n_vars)
        c_vec[vi["R"]] = 1.0
        prog = prog.with_objective(c_vec)
    return QCModel(
        program=prog, var_index=vi, active_contingencies=cs_list, x_dims=x_dims, xs=xs,
        x_cols=x_cols, fix_rows=tuple(fix_rows), dist_row=dist_row, dist_dims=dist_dims,
        names=prog.names,
    )


# ---------------------------------------------------------------------------
# closest feasible point
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class CertificateResult:
    r_star: float
    x_star: np.ndarray | None
    status: str
    x_hat: np.ndarray | None = None
    solver_status: str = ""

    @property
    def normal(self) -> np.ndarray | None:
        """Cut normal x* - x_hat in normalised coordinates (restricted to x_dims)."""
        return None if self.x_star is None else self.x_star - self.x_hat


def instantiate(model: QCModel, x_hat) -> ConicProgram:
    """Program with the probe entering through the fixing rows and the distance cone."""
    xs = model.xs
    x_hat = np.asarray(x_hat, dtype=float)
    b_eq = model.program.b_eq.copy()
    for row, k in model.fix_rows:
        b_eq[row] = xs.x_min[k] if xs.frozen[k] else x_hat[k]
    h = model.program.h.copy()
    if model.dist_row is not None:
        span = xs.x_max - xs.x_min
        d = model.dist_dims
        h[model.dist_row + 1: model.dist_row + 1 + len(d)] = -x_hat[d] / span[d]
    return model.program.with_rhs(b_eq=b_eq, h=h)


def closest_feasible_qc(model: QCModel, x_hat, solver_tol: float = SOLVER_TOL,
                        backend: str | None = None, r_eps: float = R_EPS,
                        raise_on_failure: bool = False) -> CertificateResult:
    """Project ``x_hat`` (physical units) onto the relaxation's x-set.

    Distances are measured in normalised coordinates over ``model.x_dims``;
    the returned ``x_star`` is in physical units.
    """
    if model.dist_row is None:
        raise ValueError("model was built without the distance variable")
    x_hat = np.asarray(x_hat, dtype=float)
    sol = solve(instantiate(model, x_hat), solver_tol, backend=backend)
    if sol.status == PRIMAL_INFEASIBLE:
        return CertificateResult(float("inf"), None, QC_EMPTY, x_hat, sol.status)
    if sol.status != OPTIMAL:
        if raise_on_failure:
            raise SolverFailure(f"closest-feasible QC solve ended with status {sol.status}")
        return CertificateResult(float("nan"), None, SOLVER_FAILURE, x_hat, sol.status)
    x_star = sol.x[model.x_cols].copy()
    xs = model.xs
    d = model.dist_dims
    x_star[d] = np.clip(x_star[d], xs.x_bt_min[d], xs.x_bt_max[d])
    fixed = np.setdiff1d(np.arange(xs.n), d)
    x_star[fixed] = np.where(xs.frozen[fixed], xs.x_min[fixed], x_hat[fixed])
    u_hat, u_star = xs.normalize(x_hat)[d], xs.normalize(x_star)[d]
    r = float(np.linalg.norm(u_star - u_hat))
    if r <= r_eps:
        return CertificateResult(r, x_hat.copy(), FEASIBLE_POINT, x_hat, sol.status)
    return CertificateResult(r, x_star, CUT_FOUND, x_hat, sol.status)


# ---------------------------------------------------------------------------
# lifting and containment
# ---------------------------------------------------------------------------

def lift(model: QCModel, net: Network, x, solutions) -> np.ndarray:
    """Map an AC operating point (one power-flow solution per contingency of
    the model) to the program's variable space, setting R = 0."""
    x = np.asarray(x, dtype=float)
    vi = model.var_index
    z = np.zeros(model.program.n_vars)
    z[model.x_cols] = x
    a = net.arrays
    gb = net.gen_buses
    by_c = {s.contingency: s for s in solutions}
    for c in model.active_contingencies:
        s = by_c[c]
        vm, va = s.v_mag, s.v_ang
        for i in range(net.n_bus):
            z[vi[f"w[{c},{i}]"]] = vm[i] ** 2
            z[vi[f"v[{c},{i}]"]] = vm[i]
            z[vi[f"theta[{c},{i}]"]] = va[i]
        for g in range(len(gb)):
            if g == gb.slack_pos:
                z[vi[f"pg[{c},{g}]"]] = s.slack_p
            z[vi[f"qg[{c},{g}]"]] = s.gen_q[g]
        volt = vm * np.exp(1j * va)
        for k in range(len(net.branches)):
            tag = f"{c},{k}"
            if f"wr[{tag}]" not in vi:
                continue
            f, t = a.f[k], a.t[k]
            phi = va[f] - va[t]
            wft = volt[f] * np.conj(volt[t])
            i_f = a.yff[k] * volt[f] + a.yft[k] * volt[t]
            vals = {
                "vv": vm[f] * vm[t], "cs": math.cos(phi), "sn": math.sin(phi), "wr": wft.real,
                "wi": wft.imag, "phi": phi, "pf": s.s_from[k].real, "qf": s.s_from[k].imag,
                "pt": s.s_to[k].real, "qt": s.s_to[k].imag, "l": abs(i_f) ** 2,
            }
            for nm, val in vals.items():
                z[vi[f"{nm}[{tag}]"]] = val
    if "R" in vi:
        z[vi["R"]] = 0.0
    return z


def constraint_violation(program: ConicProgram, z) -> float:
    """Largest absolute violation of equalities, linear rows and cones at ``z``."""
    z = np.asarray(z, dtype=float)
    eq = np.abs(program.A_eq @ z - program.b_eq)
    s = program.h - program.G @ z
    worst = float(eq.max()) if eq.size else 0.0
    return max(worst, cone_violation(s, program.cones))


def containment_violation(model: QCModel, net: Network, x, solutions) -> float:
    """Violation of the lifted AC point in the model instantiated at x itself."""
    z = lift(model, net, x, solutions)
    return constraint_violation(instantiate(model, x), z)
