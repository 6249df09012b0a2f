"""Separating-hyperplane certificates, polytope sampling and volume estimation.

All geometry lives in normalised input coordinates restricted to the
certified dimensions, so the original input box is the unit hypercube.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import linprog
from scipy.special import gammaln

from .acpf import FEAS_TOL, PF_TOL
from .errors import DegeneratePolytope, EmptyPolytope
from .netmodel import Network, nominal_point
from .qcrelax import CUT_FOUND, FEASIBLE_POINT, QC_EMPTY, R_EPS, QCModel, build_qc, closest_feasible_qc
from .seeding import STAGE_CERTIFY, STAGE_SPHERES, STAGE_VOLUME, rng_for
from .socp import SOLVER_TOL
from .tighten import TightenedBounds

log = logging.getLogger(__name__)

CONSECUTIVE_FEASIBLE_CAP = 200
PRUNE_EVERY = 100
VOLUME_SAMPLES = 10_000
MC_SAMPLES = 1_000_000
_RADIUS_EPS = 1e-12


# ---------------------------------------------------------------------------
# polytope
# ---------------------------------------------------------------------------

def chebyshev_center(A: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, float]:
    """Centre and radius of the largest ball inside {x : A x <= b}."""
    m, d = A.shape
    norms = np.linalg.norm(A, axis=1)
    c = np.zeros(d + 1)
    c[-1] = -1.0
    res = linprog(c, A_ub=np.c_[A, norms], b_ub=b, bounds=[(None, None)] * d + [(0, None)],
                  method="highs")
    if res.status != 0:
        return np.full(d, np.nan), 0.0
    return res.x[:d], float(res.x[-1])


@dataclass
class Cut:
    x_hat: np.ndarray
    x_star: np.ndarray
    normal: np.ndarray
    iteration: int


@dataclass
class Polytope:
    """{u : A u <= b} with maintained Chebyshev centre."""

    A: np.ndarray
    b: np.ndarray
    interior_point: np.ndarray
    radius: float
    cut_log: list[Cut] = field(default_factory=list)
    n_box: int = 0

    @classmethod
    def box(cls, lo, hi) -> "Polytope":
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        d = len(lo)
        A = np.r_[np.eye(d), -np.eye(d)]
        b = np.r_[hi, -lo]
        return cls(A, b, 0.5 * (lo + hi), 0.5 * float(np.min(hi - lo, initial=np.inf)), n_box=2 * d)

    @property
    def dim(self) -> int:
        return self.A.shape[1]

    @property
    def n_cuts(self) -> int:
        return len(self.cut_log)

    def contains(self, u, tol: float = 0.0) -> np.ndarray:
        u = np.atleast_2d(u)
        return np.all(u @ self.A.T <= self.b + tol, axis=1)

    def max_violation(self, u) -> float:
        u = np.atleast_2d(u)
        return float(np.max(u @ self.A.T - self.b, initial=-np.inf))

    def add_cut(self, x_hat, x_star, iteration: int = -1) -> "Polytope":
        """Append -n^T u <= -n^T x*, n = x* - x_hat (row scaled to unit norm)."""
        x_hat = np.asarray(x_hat, dtype=float)
        x_star = np.asarray(x_star, dtype=float)
        n = x_star - x_hat
        nn = np.linalg.norm(n)
        if nn <= 0.0:
            raise ValueError("cut needs x_star != x_hat")
        a = -n / nn
        self.A = np.r_[self.A, a[None, :]]
        self.b = np.r_[self.b, a @ x_star]
        self.cut_log.append(Cut(x_hat, x_star, n, iteration))
        self.recenter()
        return self

    def recenter(self) -> None:
        c, r = chebyshev_center(self.A, self.b)
        if not r > _RADIUS_EPS:
            self.radius = 0.0
            raise EmptyPolytope("polytope has no interior after the last cut")
        self.interior_point, self.radius = c, r

    def prune(self) -> int:
        """Drop cut rows that cannot be active; box rows are always kept."""
        keep = np.ones(len(self.b), dtype=bool)
        for i in range(self.n_box, len(self.b)):
            keep[i] = False
            res = linprog(-self.A[i], A_ub=self.A[keep], b_ub=self.b[keep],
                          bounds=[(None, None)] * self.dim, method="highs")
            # unbounded or exceeding b_i means the row is needed
            keep[i] = not (res.status == 0 and -res.fun <= self.b[i] + 1e-9)
        removed = int((~keep).sum())
        if removed:
            cut_keep = keep[self.n_box:]
            self.A, self.b = self.A[keep], self.b[keep]
            self.cut_log = [c for c, k in zip(self.cut_log, cut_keep) if k]
        return removed

    def export(self, path_rows, path_meta=None, meta: dict | None = None) -> None:
        """Plain-text rows ``a_1 ... a_d <= b`` plus optional JSON metadata."""
        with open(path_rows, "w", encoding="utf-8", newline="\n") as f:
            for a, bi in zip(self.A, self.b):
                f.write(" ".join(repr(float(v)) for v in a) + f" <= {float(bi)!r}\n")
        if path_meta is not None:
            doc = dict(meta or {})
            doc["dim"] = self.dim
            doc["n_box_rows"] = self.n_box
            doc["interior_point"] = self.interior_point.tolist()
            doc["chebyshev_radius"] = self.radius
            doc["cut_log"] = [
                {"x_hat": c.x_hat.tolist(), "x_star": c.x_star.tolist(), "normal": c.normal.tolist(),
                 "iteration": c.iteration} for c in self.cut_log
            ]
            with open(path_meta, "w", encoding="utf-8", newline="\n") as f:
                json.dump(doc, f, indent=1)

    @classmethod
    def load(cls, path_rows, path_meta=None) -> "Polytope":
        rows = []
        with open(path_rows, encoding="utf-8") as f:
            for line in f:
                lhs, rhs = line.split("<=")
                rows.append([float(v) for v in lhs.split()] + [float(rhs)])
        arr = np.array(rows, dtype=float)
        A, b = arr[:, :-1], arr[:, -1]
        n_box = 2 * A.shape[1]
        cuts = []
        if path_meta is not None:
            with open(path_meta, encoding="utf-8") as f:
                doc = json.load(f)
            n_box = int(doc.get("n_box_rows", n_box))
            cuts = [Cut(np.array(c["x_hat"]), np.array(c["x_star"]), np.array(c["normal"]),
                        int(c["iteration"])) for c in doc.get("cut_log", [])]
        p = cls(A, b, np.zeros(A.shape[1]), 0.0, cuts, n_box)
        p.recenter()
        return p


# ---------------------------------------------------------------------------
# hit-and-run
# ---------------------------------------------------------------------------

def _chords(A, b, x, u, center=None, r2=None):
    """Feasible step interval [t_lo, t_hi] along rows of directions ``u`` from ``x``."""
    au = u @ A.T
    slack = b - x @ A.T
    slack = np.maximum(slack, 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = slack / au
    t_hi = np.min(np.where(au > 0, t, np.inf), axis=1)
    t_lo = np.max(np.where(au < 0, t, -np.inf), axis=1)
    if center is not None:
        dx = x - center
        beta = np.einsum("ij,ij->i", u, dx)
        gam = np.einsum("ij,ij->i", dx, dx) - r2
        disc = np.sqrt(np.maximum(beta * beta - gam, 0.0))
        t_hi = np.minimum(t_hi, -beta + disc)
        t_lo = np.maximum(t_lo, -beta - disc)
    return t_lo, t_hi


def _walk(A, b, x, n_steps, rng, center=None, r2=None):
    """Advance every chain (rows of ``x``) by ``n_steps`` hit-and-run moves."""
    k, d = x.shape
    for _ in range(n_steps):
        u = rng.standard_normal((k, d))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        t_lo, t_hi = _chords(A, b, x, u, center, r2)
        if not (np.all(np.isfinite(t_lo)) and np.all(np.isfinite(t_hi))):
            raise DegeneratePolytope("unbounded chord: polytope is not bounded")
        # shrink the chord a hair so samples stay strictly inside
        span = np.maximum(t_hi - t_lo, 0.0)
        t = t_lo + span * (1e-12 + (1 - 2e-12) * rng.random(k))
        x = x + t[:, None] * u
    return x


def hit_and_run(P: Polytope, n_samples: int, burn_in: int | None = None, thin: int | None = None,
                seed: int | np.random.Generator = 0, x0=None, n_chains: int = 1) -> np.ndarray:
    """Approximately uniform samples from ``P`` (rows of the returned array).

    ``n_chains`` independent chains run in lock-step (vectorised); samples are
    interleaved chain by chain.
    """
    d = P.dim
    if not P.radius > _RADIUS_EPS:
        raise DegeneratePolytope("polytope has zero Chebyshev radius")
    if n_samples <= 0:
        return np.zeros((0, d))
    burn_in = 50 * d if burn_in is None else burn_in
    # thinning by d leaves visible axis correlation on boxes; 5 d passes chi-square checks
    thin = 5 * d if thin is None else thin
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    k = max(1, min(n_chains, n_samples))
    start = P.interior_point if x0 is None else np.asarray(x0, dtype=float)
    x = np.tile(start, (k, 1))
    x = _walk(P.A, P.b, x, burn_in, rng)
    out = []
    per = -(-n_samples // k)
    for _ in range(per):
        x = _walk(P.A, P.b, x, thin, rng)
        out.append(x.copy())
    return np.concatenate(out, axis=0)[:n_samples]


# ---------------------------------------------------------------------------
# volume
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class VolumeEstimate:
    value: float
    rel_err_target: float
    n_phases: int
    n_samples: int
    log10_value: float = float("nan")


def ball_log_volume(d: int, r: float) -> float:
    return 0.5 * d * math.log(math.pi) - gammaln(0.5 * d + 1) + d * math.log(r)


def estimate_volume(P: Polytope, rel_err_target: float = 0.1, n_samples: int = VOLUME_SAMPLES,
                    seed: int = 0, n_chains: int = 100, walk_steps: int | None = None) -> VolumeEstimate:
    """Multiphase Monte Carlo volume of ``P``.

    Nested bodies K_i = P intersected with balls of radius r_0 2^(i/d) around
    the Chebyshev centre; K_0 is the inscribed ball and the last body is P.
    Each ratio vol(K_{i-1})/vol(K_i) is estimated from hit-and-run samples
    of K_i, with chains warm-started from the previous phase.  Every phase
    uses at least ``n_samples`` samples, more if ``rel_err_target`` needs them.
    """
    d = P.dim
    if d == 0:
        return VolumeEstimate(1.0, rel_err_target, 0, 0, 0.0)
    if not P.radius > _RADIUS_EPS:
        raise DegeneratePolytope("polytope has zero Chebyshev radius")
    rng = np.random.default_rng(seed)
    c, r0 = P.interior_point, P.radius
    # P is inside its box rows, so the farthest box corner bounds the radius
    lo, hi = -P.b[P.n_box // 2: P.n_box], P.b[: P.n_box // 2]
    r_far = float(np.linalg.norm(np.maximum(np.abs(c - lo), np.abs(c - hi))))
    q = max(0, math.ceil(d * math.log2(max(r_far / r0, 1.0))))
    radii = [r0 * 2.0 ** (i / d) for i in range(q + 1)]
    radii[-1] = max(radii[-1], r_far)
    steps = d if walk_steps is None else walk_steps
    # each phase ratio is about 1/2, so the log-volume variance is roughly q / n
    n_phase = max(n_samples, math.ceil(q / rel_err_target**2))
    k = min(max(n_chains, n_phase // 100), n_phase)
    per = -(-n_phase // k)
    log_vol = ball_log_volume(d, r0)
    # start chains uniformly inside the inscribed ball
    g = rng.standard_normal((k, d))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    x = c + g * (r0 * rng.random(k) ** (1.0 / d))[:, None]
    for i in range(1, q + 1):
        r_in, r_out = radii[i - 1], radii[i]
        x = _walk(P.A, P.b, x, 5 * steps, rng, c, r_out * r_out)
        hits = 0
        total = 0
        for _ in range(per):
            x = _walk(P.A, P.b, x, steps, rng, c, r_out * r_out)
            hits += int(np.sum(np.sum((x - c) ** 2, axis=1) <= r_in * r_in))
            total += k
        frac = max(hits, 1) / total
        log_vol -= math.log(frac)
    val = math.exp(log_vol)
    return VolumeEstimate(val, rel_err_target, q, q * per * k, log_vol / math.log(10))


# ---------------------------------------------------------------------------
# Algorithm 1
# ---------------------------------------------------------------------------

@dataclass
class CertifyStats:
    iterations: int = 0
    n_cuts: int = 0
    n_feasible: int = 0
    n_failures: int = 0
    qc_empty: bool = False
    early_stop: bool = False
    pruned: int = 0
    volume_trace: list[float] = field(default_factory=list)


@dataclass
class CertifyContext:
    """What Algorithm 1 needs to map polytope points to full input vectors."""

    net: Network
    bounds: TightenedBounds
    dims: np.ndarray
    x_ref: np.ndarray
    model: QCModel
    # classification and projection tolerances used by the later stages
    pf_tol: float = PF_TOL
    feas_tol: float = FEAS_TOL
    nlp_tol: float = 1e-6

    @classmethod
    def build(cls, net: Network, bounds: TightenedBounds, x_dims=None, x_ref=None,
              contingencies=None, **tols) -> "CertifyContext":
        xs = bounds.xs
        dims = bounds.dims if x_dims is None else np.asarray(x_dims, dtype=int)
        dims = np.array([k for k in dims if not xs.frozen[k]], dtype=int)
        if x_ref is None:
            x_ref = nominal_point(net, xs)
        model = build_qc(net, contingencies, bounds.relaxation(), dims)
        return cls(net, bounds, dims, np.asarray(x_ref, dtype=float), model, **tols)

    def to_full(self, u) -> np.ndarray:
        """Normalised point on the certified dims -> physical full input vector."""
        xs = self.bounds.xs
        x = self.x_ref.copy()
        full = xs.normalize(x)
        full[self.dims] = u
        x[self.dims] = xs.denormalize(full)[self.dims]
        return x

    def to_reduced(self, x) -> np.ndarray:
        return self.bounds.xs.normalize(x)[self.dims]

    def initial_polytope(self) -> Polytope:
        lo, hi = self.bounds.xs.bt_box_normalized()
        return Polytope.box(lo[self.dims], hi[self.dims])


def run_algorithm1(ctx: CertifyContext, n1: int, seed: int = 0, solver_tol: float = SOLVER_TOL,
                   backend: str | None = None, r_eps: float = R_EPS,
                   feasible_cap: int = CONSECUTIVE_FEASIBLE_CAP, volume_trace: bool = False,
                   volume_samples: int = VOLUME_SAMPLES, P: Polytope | None = None,
                   start_iteration: int = 0) -> tuple[Polytope, CertifyStats]:
    """Sample the current polytope, project onto the QC set, add separating cuts."""
    if P is None:
        P = ctx.initial_polytope()
    stats = CertifyStats()
    d = P.dim
    if volume_trace:
        stats.volume_trace.append(_box_vol(P) if P.n_cuts == 0 else
                                  estimate_volume(P, n_samples=volume_samples,
                                                  seed=int(rng_for(seed, STAGE_VOLUME).integers(2**63))).value)
    streak = 0
    rng = rng_for(seed, STAGE_CERTIFY)
    x_cur = None
    for k in range(start_iteration, n1):
        stats.iterations += 1
        if x_cur is None:
            u = hit_and_run(P, 1, burn_in=50 * d, thin=1, seed=rng)[0]
        else:
            u = hit_and_run(P, 1, burn_in=0, thin=d, seed=rng, x0=x_cur)[0]
        x_hat = ctx.to_full(u)
        res = closest_feasible_qc(ctx.model, x_hat, solver_tol, backend, r_eps)
        if res.status == QC_EMPTY:
            stats.qc_empty = True
            log.info("QC relaxation empty over the polytope: whole region insecure")
            break
        if res.status == CUT_FOUND:
            try:
                P.add_cut(u, ctx.to_reduced(res.x_star), k)
            except EmptyPolytope:
                stats.qc_empty = True
                stats.n_cuts = P.n_cuts
                break
            stats.n_cuts = P.n_cuts
            streak = 0
            x_cur = None
            if P.n_cuts % PRUNE_EVERY == 0:
                stats.pruned += P.prune()
                stats.n_cuts = P.n_cuts
        elif res.status == FEASIBLE_POINT:
            stats.n_feasible += 1
            streak += 1
            x_cur = u
            if streak >= feasible_cap:
                stats.early_stop = True
                break
        else:
            stats.n_failures += 1
            x_cur = u
        if volume_trace:
            est = estimate_volume(P, n_samples=volume_samples, seed=int(rng.integers(2**63)))
            stats.volume_trace.append(est.value)
    return P, stats


def polytope_volume(ctx: CertifyContext, P: Polytope, stats: CertifyStats | None = None,
                    seed: int = 0, n_samples: int = VOLUME_SAMPLES) -> float:
    if stats is not None and stats.qc_empty:
        return 0.0
    if P.n_cuts == 0:
        return _box_vol(P)
    return estimate_volume(P, n_samples=n_samples, seed=int(rng_for(seed, STAGE_VOLUME).integers(2**63))).value


def _box_vol(P: Polytope) -> float:
    d = P.dim
    return float(np.prod(P.b[:d] + P.b[d:2 * d]))


# ---------------------------------------------------------------------------
# hypersphere baseline
# ---------------------------------------------------------------------------

@dataclass
class SphereSet:
    centers: list[np.ndarray] = field(default_factory=list)
    radii: list[float] = field(default_factory=list)

    def add(self, c, r: float) -> None:
        if not r > 0:
            raise ValueError("ball radius must be positive")
        self.centers.append(np.asarray(c, dtype=float))
        self.radii.append(float(r))

    def covered(self, pts: np.ndarray) -> np.ndarray:
        hit = np.zeros(len(pts), dtype=bool)
        for c, r in zip(self.centers, self.radii):
            hit |= np.sum((pts - c) ** 2, axis=1) < r * r
        return hit


def uncovered_volume(spheres: SphereSet, lo, hi, mc_samples: int = MC_SAMPLES, seed: int = 0,
                     chunk: int = 100_000) -> float:
    """Monte Carlo volume of the box [lo, hi] not covered by any ball (unit-box units)."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    box = float(np.prod(hi - lo))
    if not spheres.radii:
        return box
    rng = np.random.default_rng(seed)
    free = 0
    done = 0
    while done < mc_samples:
        m = min(chunk, mc_samples - done)
        pts = lo + (hi - lo) * rng.random((m, len(lo)))
        free += int(np.sum(~spheres.covered(pts)))
        done += m
    return box * free / mc_samples


def run_hypersphere_baseline(ctx: CertifyContext, n_iter: int, seed: int = 0,
                             mc_samples: int = MC_SAMPLES, solver_tol: float = SOLVER_TOL,
                             backend: str | None = None, r_eps: float = R_EPS,
                             trace: bool = True) -> tuple[SphereSet, list[float]]:
    """Uniform draws over the tightened box; every QC-infeasible draw yields a ball."""
    P0 = ctx.initial_polytope()
    d = P0.dim
    lo, hi = -P0.b[d:2 * d], P0.b[:d]
    rng = rng_for(seed, STAGE_SPHERES)
    spheres = SphereSet()
    vols = [uncovered_volume(spheres, lo, hi, mc_samples)] if trace else []
    for k in range(n_iter):
        u = lo + (hi - lo) * rng.random(d)
        res = closest_feasible_qc(ctx.model, ctx.to_full(u), solver_tol, backend, r_eps)
        if res.status == CUT_FOUND:
            spheres.add(u, res.r_star)
        elif res.status == QC_EMPTY:
            spheres.add(u, float(np.linalg.norm(hi - lo)) + 1.0)
        if trace:
            vols.append(uncovered_volume(spheres, lo, hi, mc_samples, seed=k + 1))
    if not trace:
        vols = [uncovered_volume(spheres, lo, hi, mc_samples)]
    return spheres, vols
