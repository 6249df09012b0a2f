"""Second-order cone programs: container, builder, backends and certificate checks.

Standard form::

    minimize    c^T x
    subject to  A_eq x = b_eq
                G x + s = h,   s in K = R+^l x Q^{k1} x ... x Q^{km}

Each second-order block ``Q^k`` holds ``(t, v)`` with ``||v||_2 <= t``.
Duals follow the same sign convention: ``c + A_eq^T y + G^T z = 0``, ``z in K``.

Two backends satisfy the same contract. ``embedded`` (default) calls the
Clarabel interior-point solver in-process; ``external`` writes the plain-text
problem file described in ``write_problem`` and runs a subprocess that reads
it and writes a solution file (by default ``python -m gridforge.socp_runner``,
which uses the cvxopt cone solver). ``FORGE_SOLVER`` overrides the default and
``FORGE_EXTERNAL_SOLVER`` overrides the subprocess command.
"""
from __future__ import annotations

import os
import shlex
import subprocess
import sys
import tempfile
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np
import scipy.sparse as sp

from .errors import BackendUnavailable, IllFormedProgram

SOLVER_TOL = 1e-7
MAX_ITER = 200

OPTIMAL = "optimal"
PRIMAL_INFEASIBLE = "primal_infeasible"
DUAL_INFEASIBLE = "dual_infeasible"
MAX_ITER_STATUS = "max_iter"
NUMERICAL = "numerical"


@dataclass(frozen=True, eq=False)
class ConicProgram:
    c: np.ndarray
    A_eq: sp.csr_matrix
    b_eq: np.ndarray
    G: sp.csr_matrix
    h: np.ndarray
    cones: tuple[tuple[str, int], ...]  # ("l", k) or ("q", k), in row order of G
    names: tuple[str, ...] = ()

    def __post_init__(self):
        n = len(self.c)
        if self.A_eq.shape[1] != n or self.G.shape[1] != n:
            raise IllFormedProgram("column count mismatch between c, A_eq and G")
        if self.A_eq.shape[0] != len(self.b_eq) or self.G.shape[0] != len(self.h):
            raise IllFormedProgram("row count mismatch between matrices and right-hand sides")
        total = 0
        for kind, k in self.cones:
            if kind == "q" and k < 2:
                raise IllFormedProgram("second-order block needs at least 2 rows")
            if kind not in ("l", "q"):
                raise IllFormedProgram(f"unknown cone kind {kind!r}")
            total += k
        if total != self.G.shape[0]:
            raise IllFormedProgram(f"cone sizes sum to {total}, G has {self.G.shape[0]} rows")

    @property
    def n_vars(self) -> int:
        return len(self.c)

    def with_rhs(self, b_eq=None, h=None) -> "ConicProgram":
        return replace(self,
                       b_eq=self.b_eq if b_eq is None else np.asarray(b_eq, float),
                       h=self.h if h is None else np.asarray(h, float))

    def with_objective(self, c) -> "ConicProgram":
        return replace(self, c=np.asarray(c, float))


@dataclass
class ConicSolution:
    status: str
    x: np.ndarray | None = None
    y: np.ndarray | None = None
    z: np.ndarray | None = None
    s: np.ndarray | None = None
    obj_value: float = float("nan")
    residuals: dict = field(default_factory=dict)
    iterations: int = 0
    backend: str = ""

    @property
    def ok(self) -> bool:
        return self.status == OPTIMAL


# ---------------------------------------------------------------------------
# builder
# ---------------------------------------------------------------------------

class ProgramBuilder:
    """Accumulate variables, equalities, linear inequalities and SOC blocks.

    Affine expressions are ``(coefs, const)`` with ``coefs`` a mapping from
    column index to coefficient.
    """

    def __init__(self):
        self.names: list[str] = []
        self.lb: list[float] = []
        self.ub: list[float] = []
        self._eq: list[tuple[dict, float]] = []
        self._le: list[tuple[dict, float]] = []
        self._soc: list[list[tuple[dict, float]]] = []

    def var(self, name: str, lb: float = -np.inf, ub: float = np.inf) -> int:
        self.names.append(name)
        self.lb.append(lb)
        self.ub.append(ub)
        return len(self.names) - 1

    def eq(self, coefs: dict, rhs: float) -> int:
        self._eq.append((coefs, rhs))
        return len(self._eq) - 1

    def le(self, coefs: dict, rhs: float) -> int:
        """sum(coefs * x) <= rhs."""
        self._le.append((coefs, rhs))
        return len(self._le) - 1

    def soc(self, exprs: list[tuple[dict, float]]) -> int:
        """exprs[0] >= ||exprs[1:]||, each an affine (coefs, const) pair."""
        self._soc.append(exprs)
        return len(self._soc) - 1

    def rsoc(self, a: tuple[dict, float], b: tuple[dict, float], vec: list[tuple[dict, float]]) -> int:
        """a * b >= ||vec||^2 with a, b >= 0."""
        def lin(e1, s1, e2, s2):
            out = {k: s1 * v for k, v in e1[0].items()}
            for k, v in e2[0].items():
                out[k] = out.get(k, 0.0) + s2 * v
            return out, s1 * e1[1] + s2 * e2[1]
        exprs = [lin(a, 1.0, b, 1.0), lin(a, 1.0, b, -1.0)]
        exprs += [({k: 2.0 * v for k, v in e[0].items()}, 2.0 * e[1]) for e in vec]
        return self.soc(exprs)

    def compile(self) -> "CompiledProgram":
        n = len(self.names)
        lb = np.array(self.lb)
        ub = np.array(self.ub)
        er, ec, ev, beq = [], [], [], []
        for r, (coefs, rhs) in enumerate(self._eq):
            for k, v in coefs.items():
                er.append(r); ec.append(k); ev.append(v)
            beq.append(rhs)
        a_eq = sp.csr_matrix((ev, (er, ec)), shape=(len(self._eq), n))
        gr, gc, gv, h = [], [], [], []
        row = 0
        le_rows = []
        for coefs, rhs in self._le:
            for k, v in coefs.items():
                gr.append(row); gc.append(k); gv.append(v)
            h.append(rhs)
            le_rows.append(row)
            row += 1
        bound_rows = {}
        for k in range(n):
            if np.isfinite(ub[k]):
                gr.append(row); gc.append(k); gv.append(1.0); h.append(ub[k])
                bound_rows[(k, "ub")] = row
                row += 1
            if np.isfinite(lb[k]):
                gr.append(row); gc.append(k); gv.append(-1.0); h.append(-lb[k])
                bound_rows[(k, "lb")] = row
                row += 1
        n_lin = row
        cones: list[tuple[str, int]] = [("l", n_lin)] if n_lin else []
        soc_rows = []
        for exprs in self._soc:
            start = row
            for coefs, const in exprs:
                # s = h - G x must equal the expression: G = -coefs, h = const
                for k, v in coefs.items():
                    gr.append(row); gc.append(k); gv.append(-v)
                h.append(const)
                row += 1
            cones.append(("q", row - start))
            soc_rows.append(start)
        g = sp.csr_matrix((gv, (gr, gc)), shape=(row, n))
        prog = ConicProgram(
            c=np.zeros(n), A_eq=a_eq, b_eq=np.array(beq, dtype=float), G=g,
            h=np.array(h, dtype=float), cones=tuple(cones), names=tuple(self.names),
        )
        return CompiledProgram(prog, le_rows, bound_rows, soc_rows)


@dataclass(frozen=True, eq=False)
class CompiledProgram:
    program: ConicProgram
    le_rows: list[int]
    bound_rows: dict
    soc_rows: list[int]


# ---------------------------------------------------------------------------
# residuals and certificates
# ---------------------------------------------------------------------------

def cone_violation(s: np.ndarray, cones) -> float:
    """Largest distance-like violation of ``s`` from the cone ``K``."""
    worst = 0.0
    i = 0
    for kind, k in cones:
        blk = s[i:i + k]
        if kind == "l":
            if k:
                worst = max(worst, float(np.max(-blk, initial=0.0)))
        else:
            worst = max(worst, float(np.linalg.norm(blk[1:]) - blk[0]))
        i += k
    return max(worst, 0.0)


def residuals(p: ConicProgram, x, y, z) -> dict:
    """Relative primal/dual residuals and duality gap, recomputed from scratch.

    Primal residuals are scaled by the magnitude of the data and of the
    products ``A x``/``G x``; dual residuals by the magnitudes of ``c``,
    ``A^T y`` and ``G^T z``.
    """
    inf = lambda v: float(np.max(np.abs(v), initial=0.0))  # noqa: E731
    x = np.asarray(x)
    ax = p.A_eq @ x
    gx = p.G @ x
    r_eq = ax - p.b_eq
    s = p.h - gx
    scale_p = 1.0 + max(inf(p.b_eq), inf(p.h), inf(ax), inf(gx))
    primal = max(inf(r_eq), cone_violation(s, p.cones)) / scale_p
    out = {"primal": float(primal)}
    if y is not None and z is not None:
        aty = p.A_eq.T @ y
        gtz = p.G.T @ z
        r_d = p.c + aty + gtz
        scale_d = 1.0 + max(inf(p.c), inf(aty), inf(gtz))
        dual = max(inf(r_d), cone_violation(z, p.cones)) / scale_d
        pobj = float(p.c @ x)
        dobj = float(-p.b_eq @ y - p.h @ z)
        out["dual"] = float(dual)
        out["gap"] = abs(pobj - dobj) / (1.0 + max(abs(pobj), abs(dobj)))
        out["dual_obj"] = dobj
    return out


def verify_infeasibility(p: ConicProgram, y, z, tol: float = 1e-6) -> bool:
    """Check a Farkas ray: A_eq^T y + G^T z = 0, z in K, b_eq^T y + h^T z < 0."""
    y = np.asarray(y, float)
    z = np.asarray(z, float)
    val = float(p.b_eq @ y + p.h @ z)
    if not val < 0:
        return False
    y, z = y / -val, z / -val
    r = p.A_eq.T @ y + p.G.T @ z
    return bool(np.max(np.abs(r), initial=0.0) <= tol and cone_violation(z, p.cones) <= tol)


def verify_unboundedness(p: ConicProgram, x, tol: float = 1e-6) -> bool:
    x = np.asarray(x, float)
    val = float(p.c @ x)
    if not val < 0:
        return False
    x = x / -val
    return bool(np.max(np.abs(p.A_eq @ x), initial=0.0) <= tol
                and cone_violation(-(p.G @ x), p.cones) <= tol)


# ---------------------------------------------------------------------------
# backends
# ---------------------------------------------------------------------------

def _merge_cones(cones):
    out = []
    for kind, k in cones:
        if k == 0:
            continue
        if out and kind == "l" and out[-1][0] == "l":
            out[-1] = ("l", out[-1][1] + k)
        else:
            out.append((kind, k))
    return out


def _finish(p: ConicProgram, sol: ConicSolution, tol: float) -> ConicSolution:
    if sol.status == OPTIMAL:
        sol.obj_value = float(p.c @ sol.x)
        sol.residuals = residuals(p, sol.x, sol.y, sol.z)
        if max(sol.residuals["primal"], sol.residuals["dual"], sol.residuals["gap"]) > tol:
            sol.status = NUMERICAL
    elif sol.status == PRIMAL_INFEASIBLE:
        if sol.y is None or not verify_infeasibility(p, sol.y, sol.z):
            sol.status = NUMERICAL
    return sol


def _clarabel_once(p: ConicProgram, tol: float, max_iter: int, method: str) -> ConicSolution:
    try:
        import clarabel
    except ImportError as exc:  # pragma: no cover
        raise BackendUnavailable("clarabel is not installed") from exc
    n = p.n_vars
    m_eq = p.A_eq.shape[0]
    a = sp.vstack([p.A_eq, p.G], format="csc")
    b = np.r_[p.b_eq, p.h]
    cones = [clarabel.ZeroConeT(m_eq)] if m_eq else []
    for kind, k in _merge_cones(p.cones):
        cones.append(clarabel.NonnegativeConeT(k) if kind == "l" else clarabel.SecondOrderConeT(k))
    st = clarabel.DefaultSettings()
    st.verbose = False
    st.max_iter = max_iter
    st.tol_gap_abs = tol * 1e-2
    st.tol_gap_rel = tol * 1e-2
    st.tol_feas = tol * 1e-2
    st.tol_infeas_abs = tol * 1e-2
    st.tol_infeas_rel = tol * 1e-2
    st.tol_ktratio = 1e-7
    # degenerate OBBT objectives stall without tight refinement of the KKT solves
    st.iterative_refinement_reltol = 1e-16
    st.iterative_refinement_abstol = 1e-16
    st.iterative_refinement_max_iter = 50
    st.iterative_refinement_stop_ratio = 1.0
    st.direct_solve_method = method
    solver = clarabel.DefaultSolver(sp.csc_matrix((n, n)), p.c.astype(float), a, b, cones, st)
    res = solver.solve()
    status = str(res.status)
    x = np.array(res.x)
    zall = np.array(res.z)
    y, z = zall[:m_eq], zall[m_eq:]
    s = np.array(res.s)[m_eq:]
    if status in ("Solved", "AlmostSolved"):
        out = ConicSolution(OPTIMAL, x, y, z, s)
    elif status in ("PrimalInfeasible", "AlmostPrimalInfeasible"):
        out = ConicSolution(PRIMAL_INFEASIBLE, None, y, z)
    elif status in ("DualInfeasible", "AlmostDualInfeasible"):
        out = ConicSolution(DUAL_INFEASIBLE, x)
    elif status == "MaxIterations":
        out = ConicSolution(MAX_ITER_STATUS, x, y, z, s)
    else:
        out = ConicSolution(NUMERICAL, x, y, z, s)
    out.iterations = int(res.iterations)
    out.backend = "embedded"
    return out


def _solve_clarabel(p: ConicProgram, tol: float, max_iter: int) -> ConicSolution:
    """Clarabel with the QDLDL factorisation, retried with faer if the
    recomputed residuals reject the first answer."""
    out = None
    for method in ("qdldl", "faer"):
        out = _finish(p, _clarabel_once(p, tol, max_iter, method), tol)
        if out.status != NUMERICAL:
            break
    return out


# ---- plain-text exchange format -------------------------------------------

def _write_triplets(f, tag, m: sp.spmatrix):
    coo = m.tocoo()
    f.write(f"{tag} {m.shape[0]} {m.shape[1]} {coo.nnz}\n")
    for r, c, v in zip(coo.row, coo.col, coo.data):
        f.write(f"{int(r)} {int(c)} {float(v)!r}\n")


def _write_vector(f, tag, v):
    f.write(f"{tag} {len(v)}\n")
    for val in v:
        f.write(f"{float(val)!r}\n")


def write_problem(p: ConicProgram, path) -> None:
    """Write ``p`` as a plain-text problem file.

    Layout (one item per line, floats in repr form)::

        GRIDFORGE-CONIC 1
        NVARS n
        OBJ n            followed by n values of c
        AEQ m n nnz      followed by nnz "row col value" triplets
        BEQ m            followed by m values
        G m n nnz        followed by nnz triplets
        H m              followed by m values
        CONES k          followed by k lines "l size" or "q size"
        END
    """
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("GRIDFORGE-CONIC 1\n")
        f.write(f"NVARS {p.n_vars}\n")
        _write_vector(f, "OBJ", p.c)
        _write_triplets(f, "AEQ", p.A_eq)
        _write_vector(f, "BEQ", p.b_eq)
        _write_triplets(f, "G", p.G)
        _write_vector(f, "H", p.h)
        f.write(f"CONES {len(p.cones)}\n")
        for kind, k in p.cones:
            f.write(f"{kind} {k}\n")
        f.write("END\n")


def read_problem(path) -> ConicProgram:
    lines = Path(path).read_text(encoding="utf-8").split("\n")
    it = iter(lines)

    def header(tag):
        parts = next(it).split()
        if not parts or parts[0] != tag:
            raise IllFormedProgram(f"expected section {tag}, got {parts[:1]}")
        return [int(v) for v in parts[1:]]

    if next(it).strip() != "GRIDFORGE-CONIC 1":
        raise IllFormedProgram("not a GRIDFORGE-CONIC 1 file")
    (n,) = header("NVARS")

    def vector(tag):
        (k,) = header(tag)
        return np.array([float(next(it)) for _ in range(k)])

    def triplets(tag):
        m, ncol, nnz = header(tag)
        rows, cols, vals = [], [], []
        for _ in range(nnz):
            r, c, v = next(it).split()
            rows.append(int(r)); cols.append(int(c)); vals.append(float(v))
        return sp.csr_matrix((vals, (rows, cols)), shape=(m, ncol))

    c = vector("OBJ")
    a_eq = triplets("AEQ")
    b_eq = vector("BEQ")
    g = triplets("G")
    h = vector("H")
    (k,) = header("CONES")
    cones = []
    for _ in range(k):
        kind, size = next(it).split()
        cones.append((kind, int(size)))
    if next(it).strip() != "END":
        raise IllFormedProgram("missing END")
    if len(c) != n:
        raise IllFormedProgram("NVARS does not match OBJ length")
    return ConicProgram(c, a_eq, b_eq, g, h, tuple(cones))


def write_solution(sol: ConicSolution, path) -> None:
    """Solution file: STATUS line, ITER line, then X, Y, Z, S vectors, END.

    A vector header ``TAG -1`` marks an absent vector (e.g. no primal point for
    an infeasible problem); ``TAG 0`` is a present, empty vector.
    """
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(f"STATUS {sol.status}\n")
        f.write(f"ITER {sol.iterations}\n")
        for tag, v in (("X", sol.x), ("Y", sol.y), ("Z", sol.z), ("S", sol.s)):
            if v is None:
                f.write(f"{tag} -1\n")
            else:
                _write_vector(f, tag, v)
        f.write("END\n")


def read_solution(path) -> ConicSolution:
    lines = Path(path).read_text(encoding="utf-8").split("\n")
    it = iter(lines)
    status = next(it).split()[1]
    iters = int(next(it).split()[1])
    vecs = {}
    for tag in ("X", "Y", "Z", "S"):
        parts = next(it).split()
        k = int(parts[1])
        vecs[tag] = None if k < 0 else np.array([float(next(it)) for _ in range(k)])
    return ConicSolution(status, vecs["X"], vecs["Y"], vecs["Z"], vecs["S"], iterations=iters)


def _solve_external(p: ConicProgram, tol: float, max_iter: int) -> ConicSolution:
    cmd = os.environ.get("FORGE_EXTERNAL_SOLVER")
    argv = shlex.split(cmd) if cmd else [sys.executable, "-m", "gridforge.socp_runner"]
    with tempfile.TemporaryDirectory(prefix="gridforge-socp-") as d:
        prob = Path(d) / "problem.txt"
        soln = Path(d) / "solution.txt"
        write_problem(p, prob)
        try:
            proc = subprocess.run(argv + [str(prob), str(soln), repr(tol), str(max_iter)],
                                  capture_output=True, text=True, timeout=600)
        except (OSError, subprocess.TimeoutExpired) as exc:
            raise BackendUnavailable(f"external solver failed to run: {exc}") from exc
        if proc.returncode != 0 or not soln.exists():
            raise BackendUnavailable(f"external solver exited with {proc.returncode}: {proc.stderr.strip()[-400:]}")
        sol = read_solution(soln)
    sol.backend = "external"
    return sol


_BACKENDS: dict[str, Callable[[ConicProgram, float, int], ConicSolution]] = {
    "embedded": _solve_clarabel,
    "external": _solve_external,
}


def register_backend(name: str, fn: Callable[[ConicProgram, float, int], ConicSolution]) -> None:
    _BACKENDS[name] = fn


def default_backend() -> str:
    return os.environ.get("FORGE_SOLVER", "embedded")


def solve(p: ConicProgram, solver_tol: float = SOLVER_TOL, backend: str | None = None,
          max_iter: int = MAX_ITER) -> ConicSolution:
    name = backend or default_backend()
    fn = _BACKENDS.get(name)
    if fn is None:
        raise BackendUnavailable(f"unknown solver backend {name!r}; known: {sorted(_BACKENDS)}")
    sol = fn(p, solver_tol, max_iter)
    sol.backend = name
    return _finish(p, sol, solver_tol)
