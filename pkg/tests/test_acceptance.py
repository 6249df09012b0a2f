"""Acceptance checks: one PASS/FAIL line per criterion.

PGLib-OPF case files are read from ``$FORGE_PGLIB_DIR`` (default
``tests/data/pglib``).  Criteria that only need a representative network fall
back to the bundled cases and say so; criteria that compare against published
numbers for specific PGLib cases fail when those files are missing.
"""
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest
from scipy import stats

from gridforge.acpf import SECURE, classify_two_stage, solve_all
from gridforge.boundary import PROJECTED, identify_boundary
from gridforge.certify import CertifyContext, Polytope, estimate_volume, hit_and_run, run_algorithm1
from gridforge.dataset import import_dataset
from gridforge.netmodel import bundled_case, parse_case
from gridforge.pipeline import RunConfig, compare_certificates, run_all, run_stages, volume_metric
from gridforge.qcrelax import build_qc, containment_violation
from gridforge.socp import OPTIMAL, PRIMAL_INFEASIBLE, solve, verify_infeasibility
from gridforge.tighten import tighten

from conftest import DATA
from test_socp import constructed_socp, infeasible_soc, min_t_soc, min_x_ge_1

pytestmark = pytest.mark.slow

PGLIB_DIR = Path(os.environ.get("FORGE_PGLIB_DIR", DATA / "pglib"))
SUBSTITUTES = {
    "case3_lmbd": DATA / "toy3.m",
    "case5_pjm": bundled_case("case5"),
    "case14_ieee": bundled_case("case14"),
    "case30_ieee": bundled_case("case30"),
    "case39_epri": bundled_case("case39"),
}
WORKERS = max(1, os.cpu_count() or 1)


def pglib(name: str) -> Path | None:
    p = PGLIB_DIR / f"pglib_opf_{name}.m"
    return p if p.exists() else None


def case_file(name: str) -> tuple[Path, bool]:
    """PGLib file if present, otherwise the bundled stand-in (flag True)."""
    p = pglib(name)
    return (p, False) if p is not None else (SUBSTITUTES[name], True)


@pytest.fixture()
def verdict(capsys):
    def emit(k: int, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\nCRITERION {k}: {'PASS' if ok else 'FAIL'} | {detail}", flush=True)
        assert ok, f"criterion {k}: {detail}"
    return emit


def within_factor(v: float, target: float, factor: float) -> bool:
    return v > 0 and target / factor <= v <= target * factor


# ---------------------------------------------------------------------------
# shared case14 run (criteria 2, 5, 9)
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def case14_run(tmp_path_factory):
    path, substituted = case_file("case14_ieee")
    cfg = RunConfig(case=str(path), n1=1000, n2=1000, n3=10_000, seed=2024, workers=WORKERS,
                    out=str(tmp_path_factory.mktemp("case14")))
    t0 = time.perf_counter()
    data, report = run_all(cfg, resume=False)
    elapsed = time.perf_counter() - t0
    st = run_stages(cfg)  # resumes from the checkpoint: context and polytope only
    return cfg, data, report, st, elapsed, substituted


def _sub(flag: bool, name: str) -> str:
    return f" [bundled stand-in for {name}]" if flag else ""


# ---------------------------------------------------------------------------
# 1. certificate soundness
# ---------------------------------------------------------------------------

def _cut_side_points(P: Polytope, n: int, rng, offset: float = 1e-3) -> np.ndarray:
    d = P.dim
    lo, hi = -P.b[d:2 * d], P.b[:d]
    A, b = P.A[P.n_box:], P.b[P.n_box:]
    out = []
    have = 0
    while have < n:
        u = lo + (hi - lo) * rng.random((20_000, d))
        keep = u[np.max(u @ A.T - b, axis=1) >= offset]
        out.append(keep)
        have += len(keep)
    return np.concatenate(out)[:n]


def test_criterion_1_certificate_soundness(verdict):
    t0 = time.perf_counter()
    parts = []
    ok = True
    for name in ("case3_lmbd", "case5_pjm", "case14_ieee"):
        path, substituted = case_file(name)
        net = parse_case(path)
        ctx = CertifyContext.build(net, tighten(net, 3))
        P, _ = run_algorithm1(ctx, 300, seed=1)
        if P.n_cuts == 0:
            parts.append(f"{name}: no cuts")
            ok = False
            continue
        pts = _cut_side_points(P, 10_000, np.random.default_rng(5))
        secure = direct = adj_past = 0
        for u in pts:
            rep, x_adj = classify_two_stage(net, ctx.to_full(u))
            if rep.label != SECURE:
                continue
            secure += 1
            direct += rep.stage == "direct"
            # a q-adjusted verdict certifies the adjusted point, not the draw
            adj_past += P.max_violation(ctx.to_reduced(x_adj)[None, :]) > 0.0
        ok &= secure == 0
        parts.append(f"{name}{_sub(substituted, name)}: {len(pts)} points past {P.n_cuts} cuts, "
                     f"{secure} secure ({direct} direct, {secure - direct} q-adjusted, "
                     f"{adj_past} adjusted points past a cut)")
    elapsed = time.perf_counter() - t0
    ok &= elapsed <= 20 * 60
    verdict(1, ok, "; ".join(parts) + f"; {elapsed:.0f} s (target 1200 s)")


# ---------------------------------------------------------------------------
# 2. relaxation containment
# ---------------------------------------------------------------------------

def test_criterion_2_relaxation_containment(verdict, case14_run):
    cfg, data, _, st, _, substituted = case14_run
    net = st.net
    model = build_qc(net, bounds=st.bounds.relaxation(), x_dims=st.ctx.dims, with_distance=False)
    _, recs = import_dataset(data)
    worst = 0.0
    bad = 0
    n = 0
    for r in recs:
        if not r.secure:
            continue
        n += 1
        v = containment_violation(model, net, r.x_physical, solve_all(net, r.x_physical))
        worst = max(worst, v)
        bad += v > 1e-6
    verdict(2, n > 0 and bad == 0,
            f"{n} secure records lifted, {bad} violations above 1e-6, worst {worst:.2e}"
            + _sub(substituted, "case14_ieee"))


# ---------------------------------------------------------------------------
# 3. hyperplane vs hypersphere volumes
# ---------------------------------------------------------------------------

def test_criterion_3_certificate_comparison(verdict, tmp_path):
    path = pglib("case39_epri")
    if path is None:
        verdict(3, False, f"pglib_opf_case39_epri.m not found in {PGLIB_DIR}; "
                          "published volumes refer to that file")
        return
    cfg = RunConfig(case=str(path), n1=50, seed=7, out=str(tmp_path))
    t0 = time.perf_counter()
    _, tr = compare_certificates(cfg, n_iter=50, mc_samples=1_000_000)
    elapsed = time.perf_counter() - t0
    hp, hs = tr.hyperplane[-1], tr.hypersphere[-1]
    ok = (within_factor(hp, 2.25e-05, 10) and within_factor(hs, 9.17e-02, 3) and hp * 1e3 <= hs
          and elapsed <= 60 * 60)
    verdict(3, ok, f"|x| = {tr.n_x}, hyperplane {hp:.3e} (2.25e-05 x/ 10), hypersphere {hs:.3e} "
                   f"(9.17e-02 x/ 3), ratio {hs / hp if hp > 0 else math.inf:.1e}; {elapsed:.0f} s")


# ---------------------------------------------------------------------------
# 4. unclassified volumes for the small cases
# ---------------------------------------------------------------------------

TABLE_I = {
    "case3_lmbd": (3.3e-02, 37.0),
    "case5_pjm": (6.9e-03, 30.9),
    "case14_ieee": (6.9e-04, 52.7),
    "case30_ieee": (8.8e-06, 72.2),
}


def test_criterion_4_small_case_volumes(verdict, tmp_path):
    missing = [n for n in TABLE_I if pglib(n) is None]
    if missing:
        verdict(4, False, f"PGLib files missing in {PGLIB_DIR}: {', '.join(missing)}; "
                          "published volumes refer to those files")
        return
    parts = []
    ok = True
    for name, (v_ref, m_ref) in TABLE_I.items():
        cfg = RunConfig(case=str(pglib(name)), n1=1000, n2=0, n3=0, seed=11, out=str(tmp_path / name))
        _, rep = run_all(cfg, resume=False)
        m = volume_metric(rep.v_hp, rep.n_x)
        good = within_factor(rep.v_hp, v_ref, 10) and m is not None and abs(m - m_ref) <= 15
        ok &= good
        parts.append(f"{name}: V_HP {rep.v_hp:.2e} (ref {v_ref:.1e}), metric "
                     f"{'n/a' if m is None else f'{m:.1f}'}% (ref {m_ref}%)")
    verdict(4, ok, "; ".join(parts))


# ---------------------------------------------------------------------------
# 5. dataset balance
# ---------------------------------------------------------------------------

def test_criterion_5_dataset_balance(verdict, case14_run):
    cfg, _, rep, _, elapsed, substituted = case14_run
    share = rep.overall_secure_pct
    ok = (share is not None and 40.0 <= share <= 75.0 and rep.total_records >= cfg.n2 + cfg.n3
          and elapsed <= 45 * 60)
    verdict(5, ok, f"overall secure {share:.1f}% of {rep.total_records} records "
                   f"(boundary {rep.boundary_secure_pct:.1f}%, interior {rep.mvn_secure_pct:.1f}%), "
                   f"{rep.n_hp} cuts, V_HP {rep.v_hp:.2e}; {elapsed:.0f} s (target 2700 s)"
                   + _sub(substituted, "case14_ieee"))


# ---------------------------------------------------------------------------
# 6. volume estimator calibration
# ---------------------------------------------------------------------------

# tolerance bands of 1.1 sit about three standard errors out
REL_ERR = 0.03


def test_criterion_6_volume_calibration(verdict):
    parts = []
    ok = True
    for d in (5, 10, 20):
        v = estimate_volume(Polytope.box(np.zeros(d), np.ones(d)), REL_ERR, seed=d).value
        ok &= within_factor(v, 1.0, 1.1)
        parts.append(f"cube d={d}: {v:.4f}")
    d = 5
    S = Polytope.box(np.zeros(d), np.ones(d))
    S.A = np.r_[S.A, np.ones((1, d)) / math.sqrt(d)]
    S.b = np.r_[S.b, 1 / math.sqrt(d)]
    S.recenter()
    v = estimate_volume(S, REL_ERR, seed=3).value
    ok &= within_factor(v, 1 / 120, 2.0)
    parts.append(f"simplex d=5: {v:.3e} (exact {1 / 120:.3e})")
    C = Polytope.box(np.zeros(10), np.ones(10))
    C.add_cut(np.r_[0.1, np.full(9, 0.5)], np.r_[0.3, np.full(9, 0.5)])
    v = estimate_volume(C, REL_ERR, seed=4).value
    ok &= within_factor(v, 0.7, 1.1)
    parts.append(f"cube d=10 cut at u1 >= 0.3: {v:.4f} (exact 0.7)")
    verdict(6, ok, "; ".join(parts))


# ---------------------------------------------------------------------------
# 7. hit-and-run uniformity
# ---------------------------------------------------------------------------

def test_criterion_7_hit_and_run_uniformity(verdict):
    d = 10
    P = Polytope.box(np.zeros(d), np.ones(d))
    pts = hit_and_run(P, 10_000, seed=17, n_chains=100)
    p = [stats.chisquare(np.histogram(pts[:, k], bins=10, range=(0, 1))[0]).pvalue for k in range(d)]
    inside = float(np.mean(P.contains(pts, tol=1e-10)))
    verdict(7, min(p) > 1e-3 and inside == 1.0,
            f"min per-axis chi-square p = {min(p):.4f}, membership {100 * inside:.1f}%")


# ---------------------------------------------------------------------------
# 8. conic backend correctness
# ---------------------------------------------------------------------------

def test_criterion_8_socp_backends(verdict):
    parts = []
    ok = True
    for backend in ("embedded", "external"):
        a = solve(min_x_ge_1(), backend=backend)
        b = solve(min_t_soc(), backend=backend)
        good = (a.status == b.status == OPTIMAL and abs(a.obj_value - 1) <= 1e-7
                and abs(b.obj_value - 5) <= 1e-7)
        inf = solve(infeasible_soc(), backend=backend)
        farkas = inf.status == PRIMAL_INFEASIBLE and verify_infeasibility(infeasible_soc(), inf.y, inf.z, 1e-6)
        ok &= good and farkas
        parts.append(f"{backend}: analytic {'ok' if good else 'wrong'}, certificate "
                     f"{'verified' if farkas else 'rejected'}")
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(50):
        prog, opt = constructed_socp(rng)
        sol = solve(prog)
        err = abs(sol.obj_value - opt) / max(1.0, abs(opt)) if sol.status == OPTIMAL else math.inf
        worst = max(worst, err)
    ok &= worst <= 1e-6
    parts.append(f"50 constructed optima: worst relative error {worst:.1e}")
    verdict(8, ok, "; ".join(parts))


# ---------------------------------------------------------------------------
# 9. projection chain
# ---------------------------------------------------------------------------

def test_criterion_9_projection_chain(verdict, case14_run):
    _, _, _, st, _, substituted = case14_run
    samples = identify_boundary(st.ctx, st.P, 100, seed=99, workers=WORKERS)
    proj = [s for s in samples if s.stage == PROJECTED]
    below = sum(s.r_projection < s.diagnostics["r_qc"] - 1e-6 for s in proj)
    invalid = sum(classify_two_stage(st.net, s.x_final)[0].label != SECURE for s in proj)
    failed = sum(1 for s in samples if s.diagnostics.get("nlp_status") == "failed")
    verdict(9, len(proj) > 0 and below == 0 and invalid == 0,
            f"{len(proj)} projections from 100 draws ({failed} NLP failures), "
            f"{below} with r_AC < r_QC - 1e-6, {invalid} fail re-validation"
            + _sub(substituted, "case14_ieee"))


# ---------------------------------------------------------------------------
# 10. determinism
# ---------------------------------------------------------------------------

def test_criterion_10_determinism(verdict, tmp_path):
    path, substituted = case_file("case5_pjm")
    files = []
    for w in (1, 4):
        cfg = RunConfig(case=str(path), n1=100, n2=200, n3=500, seed=31, workers=w, out=str(tmp_path / f"w{w}"))
        files.append(run_all(cfg, resume=False)[0].read_bytes())
    verdict(10, files[0] == files[1],
            f"dataset bytes identical for 1 and 4 workers ({len(files[0])} bytes)"
            + _sub(substituted, "case5_pjm"))
