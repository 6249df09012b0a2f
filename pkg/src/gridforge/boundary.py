"""Security-boundary sampling: two-stage power-flow labels plus the nonconvex
closest-feasible projection of insecure samples.

The projection is a local NLP in polar coordinates.  Per contingency the
unknowns are the non-slack angles, the PQ-bus magnitudes, the reactive output
of every generator bus and the slack active output; generator magnitudes and
dispatch are the shared inputs.  Power balance is imposed as equalities with
analytic Jacobians, limits as inequalities pulled inward by a small margin
so that the result re-validates under the power-flow checker.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.optimize import minimize, nnls

from .acpf import FEAS_TOL, PF_TOL, SECURE, classify_two_stage, context, is_secure, solve_pf
from .certify import CertifyContext, Polytope, hit_and_run
from .errors import NlpFailure
from .netmodel import Network, ybus
from .parallel import map_ordered
from .qcrelax import CUT_FOUND, closest_feasible_qc
from .seeding import STAGE_BOUNDARY, rng_for

log = logging.getLogger(__name__)

NLP_TOL = 1e-6
NLP_MARGIN = 1e-7
NLP_MAX_ITER = 300
# warm restarts of SLSQP from its own output when the KKT check fails
NLP_POLISH = 2

DIRECT = "direct"
Q_ADJUSTED = "q_adjusted"
PROJECTED = "projected"
INFEASIBLE = "infeasible"


# ---------------------------------------------------------------------------
# NLP structure
# ---------------------------------------------------------------------------

@dataclass
class _Block:
    c: int
    y: sp.csr_matrix
    yf: sp.csr_matrix
    yt: sp.csr_matrix
    lim: np.ndarray  # branch indices carrying a finite rating
    ang: np.ndarray  # in-service branch indices (angle limits)
    th: np.ndarray  # bus -> column of its angle (or -1 for slack)
    vm: np.ndarray  # bus -> column of its magnitude (-1: generator bus)
    q: np.ndarray  # gen bus position -> column
    ps: int


class AcProjector:
    """Index bookkeeping and callbacks for the closest-feasible AC problem."""

    def __init__(self, net: Network, dims, x_ref, margin: float = NLP_MARGIN):
        self.net = net
        ctx = context(net)
        self.xs = xs = ctx.xs
        self.gb = gb = net.gen_buses
        self.a = a = net.arrays
        self.dims = np.asarray(dims, dtype=int)
        self.x_ref = np.asarray(x_ref, dtype=float)
        self.margin = margin
        self.span = np.where(xs.frozen, 1.0, xs.x_max - xs.x_min)
        n = net.n_bus
        self.n = n
        self.d = len(self.dims)
        gen_bus = np.zeros(n, dtype=bool)
        gen_bus[gb.bus] = True
        self.gen_bus = gen_bus
        # role of each input: physical bus it acts on
        self.u_bus = np.array([net.bus_index[u.bus] for u in net.uncertain], dtype=int)
        self.u_q = np.array([u.q_ratio for u in net.uncertain])
        col = self.d
        self.blocks: list[_Block] = []
        for c, out in enumerate(net.contingencies):
            y, yf, yt = ybus(net, out)
            on = a.in_service.copy()
            if out is not None:
                on[out] = False
            th = -np.ones(n, dtype=int)
            for i in range(n):
                if i != net.slack:
                    th[i] = col
                    col += 1
            vm = -np.ones(n, dtype=int)
            for i in range(n):
                if not gen_bus[i]:
                    vm[i] = col
                    col += 1
            q = np.arange(col, col + len(gb))
            col += len(gb)
            ps = col
            col += 1
            lim = np.flatnonzero(on & np.isfinite(a.s_max))
            self.blocks.append(_Block(c, y, yf, yt, lim, np.flatnonzero(on), th, vm, q, ps))
        self.n_vars = col

    # ---- variable maps --------------------------------------------------
    def x_of(self, z) -> np.ndarray:
        x = self.x_ref.copy()
        x[self.dims] = self.xs.x_min[self.dims] + z[: self.d] * self.span[self.dims]
        return x

    def _inputs(self, x):
        xs, gb = self.xs, self.gb
        pg = np.zeros(len(gb))
        pg[xs.p_gen] = x[xs.p_slice]
        vset = np.empty(len(gb))
        vset[xs.v_gen] = x[xs.v_slice]
        pu = x[xs.u_slice]
        return pg, vset, pu

    def voltages(self, z, blk: _Block) -> np.ndarray:
        x = self.x_of(z)
        _, vset, _ = self._inputs(x)
        va = np.zeros(self.n)
        m = blk.th >= 0
        va[m] = z[blk.th[m]]
        vm = np.empty(self.n)
        m = blk.vm >= 0
        vm[m] = z[blk.vm[m]]
        vm[self.gb.bus] = vset
        return vm * np.exp(1j * va)

    # d x_k / d z_j for the shared inputs: x = x_min + z * span on dims
    def _dx(self, k: int) -> float:
        return self.span[k]

    def bounds(self):
        xs, gb, a, m = self.xs, self.gb, self.a, self.margin
        lo = np.full(self.n_vars, -np.inf)
        hi = np.full(self.n_vars, np.inf)

        def shrink(l_, h_):
            e = min(m, 0.25 * max(h_ - l_, 0.0))
            return l_ + e, h_ - e

        for j, k in enumerate(self.dims):
            l_, h_ = shrink(xs.x_min[k], xs.x_max[k])
            lo[j] = (l_ - xs.x_min[k]) / self.span[k]
            hi[j] = (h_ - xs.x_min[k]) / self.span[k]
        for blk in self.blocks:
            for i in range(self.n):
                if blk.th[i] >= 0:
                    lo[blk.th[i]], hi[blk.th[i]] = -np.pi, np.pi
                if blk.vm[i] >= 0:
                    lo[blk.vm[i]], hi[blk.vm[i]] = shrink(a.vmin[i], a.vmax[i])
            for g in range(len(gb)):
                lo[blk.q[g]], hi[blk.q[g]] = shrink(gb.q_min[g], gb.q_max[g])
            s = gb.slack_pos
            lo[blk.ps], hi[blk.ps] = shrink(gb.p_min[s], gb.p_max[s])
        return lo, hi

    # ---- equality constraints -------------------------------------------
    def balance(self, z):
        x = self.x_of(z)
        pg, _, pu = self._inputs(x)
        gb, a = self.gb, self.a
        out = []
        for blk in self.blocks:
            v = self.voltages(z, blk)
            s = v * np.conj(blk.y @ v)
            inj = -(a.pd + 1j * a.qd).astype(complex)
            np.add.at(inj, gb.bus, pg + 1j * z[blk.q])
            inj[self.net.slack] += z[blk.ps]
            if len(pu):
                np.add.at(inj, self.u_bus, pu + 1j * self.u_q * pu)
            mis = s - inj
            out += [mis.real, mis.imag]
        return np.concatenate(out)

    def balance_jac(self, z):
        x = self.x_of(z)
        xs, gb = self.xs, self.gb
        n = self.n
        rows = []
        for blk in self.blocks:
            v = self.voltages(z, blk)
            y = blk.y
            ibus = y @ v
            dv = sp.diags(v)
            dvn = sp.diags(v / np.abs(v))
            ds_dva = (1j * dv @ np.conj(sp.diags(ibus) - y @ dv)).toarray()
            ds_dvm = (dv @ np.conj(y @ dvn) + np.conj(sp.diags(ibus)) @ dvn).toarray()
            jac = np.zeros((n, self.n_vars), dtype=complex)
            m = blk.th >= 0
            jac[:, blk.th[m]] = ds_dva[:, m]
            m = blk.vm >= 0
            jac[:, blk.vm[m]] = ds_dvm[:, m]
            for g in range(len(gb)):
                jac[gb.bus[g], blk.q[g]] -= 1j
            jac[self.net.slack, blk.ps] -= 1.0
            for j, k in enumerate(self.dims):
                role = xs.roles[k]
                if role == "gen_v":
                    g = xs.v_gen[list(xs.v_slice).index(k)]
                    jac[:, j] += ds_dvm[:, gb.bus[g]] * self.span[k]
                elif role == "gen_p":
                    g = xs.p_gen[list(xs.p_slice).index(k)]
                    jac[gb.bus[g], j] -= self.span[k]
                else:
                    u = xs.u_idx[list(xs.u_slice).index(k)]
                    jac[self.u_bus[u], j] -= (1 + 1j * self.u_q[u]) * self.span[k]
            rows += [jac.real, jac.imag]
        return np.vstack(rows)

    # ---- inequality constraints (>= 0) ----------------------------------
    def limits(self, z):
        a, m = self.a, self.margin
        out = []
        for blk in self.blocks:
            v = self.voltages(z, blk)
            lim = blk.lim
            if len(lim):
                cap = (a.s_max[lim] - m) ** 2
                sf = (v[a.f] * np.conj(blk.yf @ v))[lim]
                st = (v[a.t] * np.conj(blk.yt @ v))[lim]
                out += [cap - np.abs(sf) ** 2, cap - np.abs(st) ** 2]
            br = blk.ang
            va = np.angle(v)
            dth = va[a.f[br]] - va[a.t[br]]
            out += [a.ang_max[br] - m - dth, dth - a.ang_min[br] - m]
        return np.concatenate(out) if out else np.zeros(0)

    def limits_jac(self, z):
        a = self.a
        rows = []
        for blk in self.blocks:
            v = self.voltages(z, blk)
            n = self.n
            full_va = np.zeros((n, self.n_vars))
            full_vm = np.zeros((n, self.n_vars))
            m = blk.th >= 0
            full_va[np.flatnonzero(m), blk.th[m]] = 1.0
            m = blk.vm >= 0
            full_vm[np.flatnonzero(m), blk.vm[m]] = 1.0
            xs, gb = self.xs, self.gb
            for j, k in enumerate(self.dims):
                if xs.roles[k] == "gen_v":
                    g = xs.v_gen[list(xs.v_slice).index(k)]
                    full_vm[gb.bus[g], j] = self.span[k]
            lim = blk.lim
            if len(lim):
                dv = sp.diags(v)
                dvn = sp.diags(v / np.abs(v))
                for yb, ends in ((blk.yf, a.f), (blk.yt, a.t)):
                    ib = yb @ v
                    cb = sp.csr_matrix((np.ones(len(ends)), (np.arange(len(ends)), ends)),
                                       shape=(len(ends), n))
                    vb = v[ends]
                    d_va = (1j * (sp.diags(np.conj(ib)) @ cb @ dv - sp.diags(vb) @ np.conj(yb @ dv))).toarray()
                    d_vm = (sp.diags(vb) @ np.conj(yb @ dvn) + sp.diags(np.conj(ib)) @ cb @ dvn).toarray()
                    s = vb * np.conj(ib)
                    d_s = d_va[lim] @ full_va + d_vm[lim] @ full_vm
                    d_abs2 = 2 * (s[lim].real[:, None] * d_s.real + s[lim].imag[:, None] * d_s.imag)
                    rows.append(-d_abs2)
            br = blk.ang
            d_dth = full_va[a.f[br]] - full_va[a.t[br]]
            rows += [-d_dth, d_dth]
        return np.vstack(rows) if rows else np.zeros((0, self.n_vars))

    # ---- starting point -------------------------------------------------
    def start(self, x) -> np.ndarray:
        xs = self.xs
        z = np.zeros(self.n_vars)
        z[: self.d] = (np.asarray(x)[self.dims] - xs.x_min[self.dims]) / self.span[self.dims]
        for blk in self.blocks:
            sol = solve_pf(self.net, x, blk.c, xs=xs)
            if sol.converged:
                vm, va, q, ps = sol.v_mag, sol.v_ang, sol.gen_q, sol.slack_p
            else:
                vm, va = np.ones(self.n), np.zeros(self.n)
                q, ps = np.zeros(len(self.gb)), 0.0
            m = blk.th >= 0
            z[blk.th[m]] = va[m]
            m = blk.vm >= 0
            z[blk.vm[m]] = vm[m]
            z[blk.q] = q
            z[blk.ps] = ps
        lo, hi = self.bounds()
        return np.clip(z, lo, hi)


# ---------------------------------------------------------------------------
# projection
# ---------------------------------------------------------------------------

@dataclass
class AcProjection:
    r: float
    x_star: np.ndarray | None
    status: str  # ok | feasible_input | failed
    kkt_residual: float = float("nan")
    violation: float = float("nan")
    start: str = ""
    message: str = ""


def kkt_residual(grad, jac_eq, jac_in, g_in, z, lo, hi, act_tol: float = 1e-6) -> float:
    """Scaled stationarity residual with nonnegative multipliers on active
    inequalities and bounds (free multipliers on equalities), via NNLS."""
    cols = [jac_eq.T, -jac_eq.T]
    act = np.flatnonzero(g_in <= act_tol)
    if len(act):
        cols.append(jac_in[act].T)
    n = len(z)
    at_lo = np.flatnonzero(z - lo <= act_tol)
    at_hi = np.flatnonzero(hi - z <= act_tol)
    eye = np.eye(n)
    if len(at_lo):
        cols.append(eye[:, at_lo])
    if len(at_hi):
        cols.append(-eye[:, at_hi])
    M = np.hstack(cols)
    scale = np.maximum(np.linalg.norm(M, axis=0), 1e-12)
    _, res = nnls(M / scale, grad, maxiter=50 * M.shape[1])
    return float(res / max(1.0, np.linalg.norm(grad)))


def _solve_nlp(proj: AcProjector, u_hat, z0, nlp_tol: float, max_iter: int):
    d = proj.d
    lo, hi = proj.bounds()

    def f(z):
        e = z[:d] - u_hat
        return float(e @ e)

    def g(z):
        out = np.zeros_like(z)
        out[:d] = 2 * (z[:d] - u_hat)
        return out

    cons = [{"type": "eq", "fun": proj.balance, "jac": proj.balance_jac}]
    if proj.limits(z0).size:
        cons.append({"type": "ineq", "fun": proj.limits, "jac": proj.limits_jac})
    z = z0
    for _ in range(NLP_POLISH + 1):
        with warnings.catch_warnings():
            # SLSQP clips line-search trial points to the bounds and warns about it
            warnings.simplefilter("ignore", RuntimeWarning)
            res = minimize(f, z, jac=g, method="SLSQP", bounds=list(zip(lo, hi)), constraints=cons,
                           options={"maxiter": max_iter, "ftol": 1e-12})
        z = res.x
        eq = proj.balance(z)
        ineq = proj.limits(z)
        viol = max(float(np.max(np.abs(eq), initial=0.0)), float(np.max(-ineq, initial=0.0)))
        jin = proj.limits_jac(z) if ineq.size else np.zeros((0, len(z)))
        kkt = kkt_residual(g(z), proj.balance_jac(z), jin, ineq, z, lo, hi)
        if kkt <= nlp_tol:
            break
    return z, res, viol, kkt


def closest_feasible_ac(net: Network, x_hat, dims=None, x_ref=None, x_start=None,
                        projector: AcProjector | None = None, nlp_tol: float = NLP_TOL,
                        feas_tol: float = FEAS_TOL, max_iter: int = NLP_MAX_ITER,
                        raise_on_failure: bool = False, pf_tol: float = PF_TOL) -> AcProjection:
    """Locally closest secure input to ``x_hat`` (normalised distance on ``dims``).

    Starts from ``x_hat`` and, if that fails, from ``x_start`` (typically the
    QC projection).  A result is accepted only if the constraint violation is
    below ``feas_tol``, the KKT residual below ``nlp_tol`` and the point passes
    the two-stage power-flow check.
    """
    xs = context(net).xs
    x_hat = np.asarray(x_hat, dtype=float)
    if dims is None:
        dims = xs.active
    if projector is None:
        projector = AcProjector(net, dims, x_hat if x_ref is None else x_ref)
    else:
        projector.x_ref = x_hat.copy() if x_ref is None else np.asarray(x_ref, dtype=float)
    if is_secure(net, x_hat, feas_tol, pf_tol=pf_tol):
        return AcProjection(0.0, x_hat.copy(), "feasible_input", 0.0, 0.0)
    u_hat = (x_hat[projector.dims] - xs.x_min[projector.dims]) / projector.span[projector.dims]
    starts = [("x_hat", x_hat)]
    if x_start is not None:
        starts.append(("qc", np.asarray(x_start, dtype=float)))
    last = AcProjection(float("nan"), None, "failed")
    for name, xs0 in starts:
        try:
            z, res, viol, kkt = _solve_nlp(projector, u_hat, projector.start(xs0), nlp_tol, max_iter)
        except (ValueError, np.linalg.LinAlgError) as exc:
            last = AcProjection(float("nan"), None, "failed", start=name, message=str(exc))
            continue
        x_star = projector.x_of(z)
        r = float(np.linalg.norm(z[: projector.d] - u_hat))
        if viol > feas_tol or kkt > nlp_tol:
            last = AcProjection(r, None, "failed", kkt, viol, name, res.message)
            continue
        rep, _ = classify_two_stage(net, x_star, feas_tol, pf_tol=pf_tol)
        if rep.label != SECURE:
            last = AcProjection(r, None, "failed", kkt, viol, name, "projection failed re-validation")
            continue
        return AcProjection(r, x_star, "ok", kkt, viol, name, res.message)
    if raise_on_failure:
        raise NlpFailure(last.message or "no start converged")
    return last


# ---------------------------------------------------------------------------
# boundary identification
# ---------------------------------------------------------------------------

@dataclass
class BoundarySample:
    x_raw: np.ndarray
    label: str
    stage: str
    x_final: np.ndarray
    r_projection: float | None = None
    index: int = -1
    diagnostics: dict = field(default_factory=dict)


def classify_sample(ctx: CertifyContext, u, index: int = -1, project: bool = True,
                    projector: AcProjector | None = None) -> list[BoundarySample]:
    """Two-stage label of one polytope sample plus, if insecure, its projection."""
    net = ctx.net
    x = ctx.to_full(u)
    rep, x_adj = classify_two_stage(net, x, ctx.feas_tol, pf_tol=ctx.pf_tol)
    if rep.label == SECURE:
        if rep.stage == "direct":
            return [BoundarySample(x, SECURE, DIRECT, x, index=index)]
        return [BoundarySample(x, SECURE, Q_ADJUSTED, x_adj, index=index)]
    worst = rep.worst()
    diag = {"diverged": rep.diverged}
    if worst is not None:
        diag["worst"] = (worst.kind, worst.contingency, worst.magnitude)
    out = [BoundarySample(x, "insecure", INFEASIBLE, x, index=index, diagnostics=diag)]
    if not project:
        return out
    qc = closest_feasible_qc(ctx.model, x)
    x_qc = qc.x_star if qc.status == CUT_FOUND else None
    diag["r_qc"] = qc.r_star
    proj = closest_feasible_ac(net, x, ctx.dims, x_ref=x, x_start=x_qc, projector=projector,
                               nlp_tol=ctx.nlp_tol, feas_tol=ctx.feas_tol, pf_tol=ctx.pf_tol)
    diag["nlp_status"] = proj.status
    if proj.status == "ok":
        out.append(BoundarySample(x, SECURE, PROJECTED, proj.x_star, proj.r, index,
                                  {"r_qc": qc.r_star, "kkt": proj.kkt_residual, "start": proj.start}))
    return out


BOUNDARY_CHAINS = 32


def draw_boundary_points(P: Polytope, n2: int, seed: int) -> np.ndarray:
    """First ``n2`` points of a fixed-width multi-chain stream, so that a
    shorter request is always a prefix of a longer one."""
    if n2 <= 0:
        return np.zeros((0, P.dim))
    n = max(n2, BOUNDARY_CHAINS)
    return hit_and_run(P, n, seed=rng_for(seed, STAGE_BOUNDARY), n_chains=BOUNDARY_CHAINS)[:n2]


def identify_boundary(ctx: CertifyContext, P: Polytope, n2: int, seed: int = 0,
                      project: bool = True, workers: int = 1, offset: int = 0) -> list[BoundarySample]:
    """Draw ``n2`` points from ``P``, label them and project the insecure ones.

    ``offset`` skips the first draws (used when resuming a partial stage).
    """
    if n2 <= 0:
        return []
    pts = draw_boundary_points(P, n2, seed)[offset:]
    parts = map_ordered(_boundary_task, ctx, [(u, offset + i, project) for i, u in enumerate(pts)], workers)
    return [s for part in parts for s in part]


# one projector per worker, rebuilt whenever the context changes
_projector: list = [None, None]


def _boundary_task(ctx: CertifyContext, job):
    u, i, project = job
    if _projector[0] is not ctx:
        _projector[:] = [ctx, AcProjector(ctx.net, ctx.dims, ctx.x_ref)]
    return classify_sample(ctx, u, i, project, _projector[1])


def secure_fraction(samples) -> float:
    """Share of secure labels among the drawn (non-projected) samples."""
    drawn = [s for s in samples if s.stage != PROJECTED]
    if not drawn:
        return float("nan")
    return sum(s.label == SECURE for s in drawn) / len(drawn)
