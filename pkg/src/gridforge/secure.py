"""Interior sampling from a shrunken multivariate normal fitted to secure points."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .acpf import SECURE, classify_two_stage
from .certify import CertifyContext
from .dataset import DatasetRecord
from .errors import TooFewPoints
from .parallel import map_ordered
from .seeding import STAGE_SECURE, rng_for

S_RED = 0.25
JITTER = 1e-10
BOX_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class MvnModel:
    mu: np.ndarray
    sigma: np.ndarray
    s_red: float = S_RED
    jitter: float = JITTER

    @property
    def dim(self) -> int:
        return len(self.mu)

    @property
    def cov(self) -> np.ndarray:
        return self.s_red * self.sigma + self.jitter * np.eye(self.dim)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        # eigh tolerates the exactly singular covariance of degenerate fits
        lam, vec = np.linalg.eigh(self.cov)
        root = vec * np.sqrt(np.clip(lam, 0.0, None))
        return self.mu + rng.standard_normal((n, self.dim)) @ root.T


def fit_mvn(points, s_red: float = S_RED, jitter: float = JITTER) -> MvnModel:
    """Sample mean and (n-1)-normalised covariance of ``points`` (rows)."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if pts.shape[0] < 2:
        raise TooFewPoints(f"need at least 2 points to fit a normal, got {pts.shape[0]}")
    if not 0.0 < s_red <= 1.0:
        raise ValueError("s_red must lie in (0, 1]")
    mu = pts.mean(axis=0)
    sigma = np.atleast_2d(np.cov(pts, rowvar=False, ddof=1))
    sigma = 0.5 * (sigma + sigma.T)
    return MvnModel(mu, sigma, s_red, jitter)


def draw_candidates(model: MvnModel, n3: int, seed: int) -> np.ndarray:
    if n3 <= 0:
        return np.zeros((0, model.dim))
    return model.sample(n3, rng_for(seed, STAGE_SECURE))


def classify_candidate(ctx: CertifyContext, u, index: int) -> DatasetRecord:
    """Label one normalised candidate; draws outside the unit box skip the power flow."""
    xs = ctx.bounds.xs
    u = np.asarray(u, dtype=float)
    lineage = f"mvn:{index}"
    if np.any(u < -BOX_TOL) or np.any(u > 1.0 + BOX_TOL):
        full = xs.normalize(ctx.x_ref)
        full[ctx.dims] = u
        x = xs.x_min + full * (xs.x_max - xs.x_min)
        x = np.where(xs.frozen, xs.x_min, x)
        k = int(np.argmax(np.maximum(-u, u - 1.0)))
        worst = ("out_of_box", int(ctx.dims[k]), float(max(-u[k], u[k] - 1.0)))
        return DatasetRecord(full, x, "insecure", "mvn_out_of_box", worst, lineage)
    x = ctx.to_full(np.clip(u, 0.0, 1.0))
    rep, x_adj = classify_two_stage(ctx.net, x, ctx.feas_tol, pf_tol=ctx.pf_tol)
    if rep.label == SECURE:
        if rep.stage == "direct":
            return DatasetRecord.from_physical(xs, x, "secure", "mvn_direct", None, lineage)
        return DatasetRecord.from_physical(xs, x_adj, "secure", "mvn_q_adjusted", None, lineage)
    w = rep.worst()
    worst = None if w is None else (w.kind, int(w.contingency), float(w.magnitude))
    return DatasetRecord.from_physical(xs, x, "insecure", "mvn_infeasible", worst, lineage)


def _task(ctx, job):
    u, i = job
    return classify_candidate(ctx, u, i)


def sample_secure(ctx: CertifyContext, model: MvnModel, n3: int, seed: int = 0,
                  workers: int = 1, offset: int = 0) -> list[DatasetRecord]:
    """Draw ``n3`` candidates from the shrunken normal and classify each.

    ``offset`` skips the first draws of the stream (used when resuming).
    """
    cand = draw_candidates(model, n3, seed)[offset:]
    return map_ordered(_task, ctx, [(u, offset + i) for i, u in enumerate(cand)], workers)
