"""Subprocess entry point for the ``external`` SOCP backend.

Usage: ``python -m gridforge.socp_runner PROBLEM SOLUTION [TOL [MAX_ITER]]``.
Reads a GRIDFORGE-CONIC problem file, solves it with cvxopt's cone solver and
writes a solution file in the format of :func:`gridforge.socp.write_solution`.
"""
from __future__ import annotations

import sys

import numpy as np

from .socp import (
    DUAL_INFEASIBLE, MAX_ITER_STATUS, NUMERICAL, OPTIMAL, PRIMAL_INFEASIBLE,
    ConicSolution, read_problem, write_solution,
)


def _spmatrix(m):
    from cvxopt import spmatrix
    coo = m.tocoo()
    return spmatrix(coo.data.tolist(), coo.row.tolist(), coo.col.tolist(), size=m.shape)


def solve_file(problem: str, solution: str, tol: float = 1e-7, max_iter: int = 200) -> ConicSolution:
    from cvxopt import matrix, solvers

    p = read_problem(problem)
    # cvxopt wants all linear rows first, then SOC blocks in order
    lin, soc, sizes = [], [], []
    i = 0
    for kind, k in p.cones:
        rows = list(range(i, i + k))
        if kind == "l":
            lin += rows
        else:
            soc.append(rows)
            sizes.append(k)
        i += k
    order = np.array(lin + [r for blk in soc for r in blk], dtype=int)
    g = p.G[order] if len(order) else p.G
    h = p.h[order]
    dims = {"l": len(lin), "q": sizes, "s": []}
    solvers.options.update({"show_progress": False, "abstol": tol * 1e-1, "reltol": tol * 1e-1,
                            "feastol": tol * 1e-1, "maxiters": max_iter})
    kwargs = {}
    if p.A_eq.shape[0]:
        kwargs = {"A": _spmatrix(p.A_eq), "b": matrix(p.b_eq)}
    try:
        res = solvers.conelp(matrix(p.c), _spmatrix(g), matrix(h), dims, **kwargs)
    except (ArithmeticError, ValueError):
        sol = ConicSolution(NUMERICAL)
        write_solution(sol, solution)
        return sol
    inv = np.empty_like(order)
    inv[order] = np.arange(len(order))

    def vec(key, n=None):
        v = res.get(key)
        return None if v is None else np.array(v).ravel()

    z = vec("z")
    s = vec("s")
    if z is not None:
        z = z[inv]
    if s is not None:
        s = s[inv]
    y = vec("y")
    if y is None and p.A_eq.shape[0] == 0:
        y = np.zeros(0)
    status = {"optimal": OPTIMAL, "primal infeasible": PRIMAL_INFEASIBLE,
              "dual infeasible": DUAL_INFEASIBLE}.get(res["status"], MAX_ITER_STATUS)
    x = vec("x")
    if status == PRIMAL_INFEASIBLE:
        x = None
    if status == DUAL_INFEASIBLE:
        y = z = s = None
    sol = ConicSolution(status, x, y, z, s, iterations=int(res.get("iterations", 0)))
    write_solution(sol, solution)
    return sol


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    if len(argv) < 2:
        print(__doc__, file=sys.stderr)
        return 2
    tol = float(argv[2]) if len(argv) > 2 else 1e-7
    max_iter = int(argv[3]) if len(argv) > 3 else 200
    solve_file(argv[0], argv[1], tol, max_iter)
    return 0


if __name__ == "__main__":
    sys.exit(main())
