"""Optimization-based bound tightening on the intact-state QC relaxation."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .errors import EmptyFeasibleSet
from .netmodel import InputSpace, Network, build_input_space, nominal_point
from .qcrelax import RelaxationBounds, build_qc, instantiate
from .socp import OPTIMAL, PRIMAL_INFEASIBLE, SOLVER_TOL, solve

log = logging.getLogger(__name__)

BT_FIXPOINT_TOL = 1e-4
# widen every optimised bound outward by this much to absorb solver error
BT_MARGIN = 1e-6


@dataclass(frozen=True, eq=False)
class TightenedBounds:
    v_min: np.ndarray
    v_max: np.ndarray
    theta_min: np.ndarray
    theta_max: np.ndarray
    xs: InputSpace
    iterations_used: int = 0
    x_dims: np.ndarray | None = None

    @property
    def x_bt_min(self) -> np.ndarray:
        return self.xs.x_bt_min

    @property
    def x_bt_max(self) -> np.ndarray:
        return self.xs.x_bt_max

    @property
    def dims(self) -> np.ndarray:
        return self.xs.active if self.x_dims is None else np.asarray(self.x_dims, dtype=int)

    @property
    def v_bt(self) -> float:
        return box_volume(self.xs, self.dims)

    def relaxation(self) -> RelaxationBounds:
        return RelaxationBounds(self.v_min, self.v_max, self.theta_min, self.theta_max, self.xs)

    @classmethod
    def initial(cls, net: Network, xs: InputSpace | None = None, x_dims=None) -> "TightenedBounds":
        rb = RelaxationBounds.from_network(net, xs)
        return cls(rb.v_min, rb.v_max, rb.theta_min, rb.theta_max, rb.xs, 0,
                   None if x_dims is None else np.asarray(x_dims, dtype=int))

    def to_dict(self) -> dict:
        return {
            "v_min": self.v_min.tolist(), "v_max": self.v_max.tolist(),
            "theta_min": self.theta_min.tolist(), "theta_max": self.theta_max.tolist(),
            "x_bt_min": self.x_bt_min.tolist(), "x_bt_max": self.x_bt_max.tolist(),
            "iterations_used": self.iterations_used, "v_bt": self.v_bt,
            "x_dims": None if self.x_dims is None else [int(k) for k in self.x_dims],
        }

    @classmethod
    def from_dict(cls, net: Network, d: dict, xs: InputSpace | None = None) -> "TightenedBounds":
        xs = (xs or build_input_space(net)).with_bounds(d["x_bt_min"], d["x_bt_max"])
        arr = {k: np.array(d[k], dtype=float) for k in ("v_min", "v_max", "theta_min", "theta_max")}
        dims = d.get("x_dims")
        return cls(xs=xs, iterations_used=int(d["iterations_used"]),
                   x_dims=None if dims is None else np.array(dims, dtype=int), **arr)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            json.dump(self.to_dict(), f, indent=1)

    @classmethod
    def load(cls, net: Network, path, xs: InputSpace | None = None) -> "TightenedBounds":
        with open(path, encoding="utf-8") as f:
            return cls.from_dict(net, json.load(f), xs)


def box_volume(xs: InputSpace, dims: Sequence[int] | None = None) -> float:
    """Product of tightened-to-original width ratios over ``dims`` (frozen count 1)."""
    dims = xs.active if dims is None else np.asarray(dims, dtype=int)
    dims = np.array([k for k in dims if not xs.frozen[k]], dtype=int)
    if not len(dims):
        return 1.0
    ratio = (xs.x_bt_max[dims] - xs.x_bt_min[dims]) / (xs.x_max[dims] - xs.x_min[dims])
    return float(np.prod(np.clip(ratio, 0.0, 1.0)))


def _targets(net: Network, model, dims):
    """(kind, index, column) for every bound optimised in a pass."""
    vi = model.var_index
    out = [("w", i, vi[f"w[0,{i}]"]) for i in range(net.n_bus)]
    out += [("phi", k, vi[f"phi[0,{k}]"]) for k in range(len(net.branches)) if f"phi[0,{k}]" in vi]
    out += [("x", int(k), int(model.x_cols[k])) for k in dims]
    return out


def obbt_pass(net: Network, tb: TightenedBounds, x_ref=None, solver_tol: float = SOLVER_TOL,
              backend: str | None = None, margin: float = BT_MARGIN) -> TightenedBounds:
    """One Jacobi sweep: every min/max subproblem uses the incoming bounds.

    ``x_ref`` supplies values for inputs outside ``tb.x_dims`` (default: the
    case's nominal point).
    """
    xs = tb.xs
    dims = tb.dims
    model = build_qc(net, contingencies=(0,), bounds=tb.relaxation(), x_dims=dims, with_distance=False)
    if x_ref is None:
        x_ref = nominal_point(net, xs)
    base = instantiate(model, np.clip(x_ref, xs.x_bt_min, xs.x_bt_max))
    v_lo, v_hi = tb.v_min.copy(), tb.v_max.copy()
    t_lo, t_hi = tb.theta_min.copy(), tb.theta_max.copy()
    x_lo, x_hi = xs.x_bt_min.copy(), xs.x_bt_max.copy()
    n = base.n_vars
    for kind, idx, col in _targets(net, model, dims):
        vals = []
        for sign in (1.0, -1.0):
            c = np.zeros(n)
            c[col] = sign
            sol = solve(base.with_objective(c), solver_tol, backend=backend)
            if sol.status == PRIMAL_INFEASIBLE:
                raise EmptyFeasibleSet("QC relaxation is infeasible over the whole input box")
            if sol.status != OPTIMAL:
                log.info("OBBT %s[%d] %s: solver status %s, bound kept", kind, idx,
                         "min" if sign > 0 else "max", sol.status)
                vals.append(None)
                continue
            vals.append(float(sol.x[col]))
        lo_val, hi_val = vals
        if kind == "w":
            if lo_val is not None:
                v_lo[idx] = max(tb.v_min[idx], math.sqrt(max(lo_val, 0.0)) - margin)
            if hi_val is not None:
                v_hi[idx] = min(tb.v_max[idx], math.sqrt(max(hi_val, 0.0)) + margin)
        elif kind == "phi":
            if lo_val is not None:
                t_lo[idx] = max(tb.theta_min[idx], lo_val - margin)
            if hi_val is not None:
                t_hi[idx] = min(tb.theta_max[idx], hi_val + margin)
        else:
            span = xs.x_max[idx] - xs.x_min[idx]
            if lo_val is not None:
                x_lo[idx] = max(xs.x_bt_min[idx], lo_val - margin * span)
            if hi_val is not None:
                x_hi[idx] = min(xs.x_bt_max[idx], hi_val + margin * span)
    # guard against crossing produced by the margin clipping
    v_hi = np.maximum(v_hi, v_lo)
    t_hi = np.maximum(t_hi, t_lo)
    x_hi = np.maximum(x_hi, x_lo)
    return replace(tb, v_min=v_lo, v_max=v_hi, theta_min=t_lo, theta_max=t_hi,
                   xs=replace(xs, x_bt_min=x_lo, x_bt_max=x_hi),
                   iterations_used=tb.iterations_used + 1)


def _change(a: TightenedBounds, b: TightenedBounds) -> float:
    diffs = [
        np.abs(a.v_min - b.v_min), np.abs(a.v_max - b.v_max),
        np.abs(a.theta_min - b.theta_min), np.abs(a.theta_max - b.theta_max),
        np.abs(a.x_bt_min - b.x_bt_min), np.abs(a.x_bt_max - b.x_bt_max),
    ]
    return float(max((d.max() for d in diffs if d.size), default=0.0))


def tighten(net: Network, max_iters: int = 3, xs: InputSpace | None = None, x_dims=None,
            x_ref=None, fixpoint_tol: float = BT_FIXPOINT_TOL, solver_tol: float = SOLVER_TOL,
            backend: str | None = None) -> TightenedBounds:
    """Repeat OBBT passes until ``max_iters`` or the per-pass change drops below ``fixpoint_tol``."""
    tb = TightenedBounds.initial(net, xs, x_dims)
    for _ in range(max_iters):
        new = obbt_pass(net, tb, x_ref, solver_tol, backend)
        delta = _change(tb, new)
        tb = new
        log.info("OBBT pass %d: max bound change %.3g, V_BT %.3e", tb.iterations_used, delta, tb.v_bt)
        if delta < fixpoint_tol:
            break
    return tb
