"""End-to-end orchestration: tighten, certify, boundary, secure interior.

Every stage writes a checkpoint into the output directory, so an interrupted
run resumes where it stopped.  Checkpoints are tied to a hash of the
output-relevant configuration; the worker count is excluded because it never
changes results.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .acpf import FEAS_TOL, PF_TOL, SECURE, classify_two_stage
from .boundary import NLP_TOL, PROJECTED, BoundarySample, identify_boundary
from .certify import (
    VOLUME_SAMPLES, CertifyContext, CertifyStats, Polytope, estimate_volume,
    polytope_volume, run_algorithm1, run_hypersphere_baseline,
)
from .dataset import DatasetRecord, deduplicate, export_dataset, import_dataset, secure_share
from .errors import ConfigError, GridforgeError
from .netmodel import ROLE_P, ROLE_U, Network, UncertainInjection, bundled_case, outages_from_pairs, parse_case
from .qcrelax import R_EPS
from .secure import S_RED, MvnModel, fit_mvn, sample_secure
from .seeding import STAGE_AUDIT, STAGE_VOLUME, rng_for
from .socp import SOLVER_TOL
from .tighten import TightenedBounds, tighten

log = logging.getLogger(__name__)

CHUNK = 500
AUDIT_FRACTION = 0.01
# fixed cap on the hypersphere Monte Carlo in the certificate comparison
COMPARE_MC_SAMPLES = 200_000


class StageError(GridforgeError):
    """A pipeline stage failed; completed checkpoints stay on disk."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class Tolerances:
    pf_tol: float = PF_TOL
    feas_tol: float = FEAS_TOL
    solver_tol: float = SOLVER_TOL
    r_eps: float = R_EPS
    nlp_tol: float = NLP_TOL


@dataclass
class RunConfig:
    """Run parameters; see the README for the JSON layout.

    ``uncertain`` entries hold ``bus`` and either ``p_min``/``p_max`` or a
    symmetric ``delta`` (all MW), plus an optional ``power_factor``.  Ranges
    are deviations added to the case's nominal demand.  ``x_dims`` is
    ``null`` (every non-frozen input), ``"active_power"`` or a list of input
    names such as ``"gen_p_2"``.
    """

    case: str
    contingencies: list = field(default_factory=list)
    uncertain: list = field(default_factory=list)
    n1: int = 1000
    n2: int = 10_000
    n3: int = 100_000
    s_red: float = S_RED
    seed: int = 0
    tolerances: Tolerances = field(default_factory=Tolerances)
    obbt_iters: int = 3
    x_dims: Any = None
    out: str = "forge_out"
    workers: int = 1
    backend: str | None = None
    volume_samples: int = VOLUME_SAMPLES
    base_dir: str = "."

    def __post_init__(self):
        if isinstance(self.tolerances, dict):
            try:
                self.tolerances = Tolerances(**self.tolerances)
            except TypeError as exc:
                raise ConfigError(f"bad tolerances: {exc}") from exc
        self.validate()

    def validate(self) -> None:
        for name in ("n1", "n2", "n3", "obbt_iters", "volume_samples"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 0:
                raise ConfigError(f"{name} must be a non-negative integer, got {v!r}")
        if not isinstance(self.workers, int) or self.workers < 1:
            raise ConfigError("workers must be a positive integer")
        if not 0.0 < float(self.s_red) <= 1.0:
            raise ConfigError("s_red must lie in (0, 1]")
        for name, v in asdict(self.tolerances).items():
            if not v > 0:
                raise ConfigError(f"tolerance {name} must be positive")
        if not isinstance(self.contingencies, list):
            raise ConfigError("contingencies must be a list of [from_bus, to_bus] pairs")
        for pair in self.contingencies:
            if not (isinstance(pair, (list, tuple)) and len(pair) == 2):
                raise ConfigError(f"bad contingency entry {pair!r}")
        for u in self.uncertain:
            if not isinstance(u, dict) or "bus" not in u:
                raise ConfigError(f"bad uncertain injection {u!r}")
            if "delta" not in u and not ("p_min" in u and "p_max" in u):
                raise ConfigError(f"uncertain injection at bus {u['bus']} needs delta or p_min/p_max")
        if not (self.x_dims is None or self.x_dims == "active_power" or isinstance(self.x_dims, list)):
            raise ConfigError("x_dims must be null, \"active_power\" or a list of input names")

    # ---- (de)serialisation -------------------------------------------------
    @classmethod
    def from_dict(cls, d: dict, base_dir: str | Path = ".") -> "RunConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        if "case" not in d:
            raise ConfigError("config needs a 'case' entry")
        d = dict(d)
        d.setdefault("base_dir", str(base_dir))
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            with open(path, encoding="utf-8") as fh:
                d = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(d, dict):
            raise ConfigError("config root must be a JSON object")
        return cls.from_dict(d, path.parent)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("base_dir")
        return d

    def fingerprint(self) -> str:
        d = self.to_dict()
        for k in ("workers", "out"):
            d.pop(k)
        d["case_text"] = hashlib.sha256(self.case_path().read_bytes()).hexdigest()
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    # ---- derived objects -------------------------------------------------
    def case_path(self) -> Path:
        p = Path(self.case)
        if not p.suffix:
            try:
                return bundled_case(self.case)
            except FileNotFoundError:
                pass
        if not p.is_absolute():
            p = Path(self.base_dir) / p
        if not p.exists():
            raise ConfigError(f"case file not found: {p}")
        return p

    def out_dir(self) -> Path:
        p = Path(self.out)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def network(self) -> Network:
        net = parse_case(self.case_path())
        base = net.base_mva
        unc = []
        for u in self.uncertain:
            if "delta" in u:
                lo, hi = -float(u["delta"]), float(u["delta"])
            else:
                lo, hi = float(u["p_min"]), float(u["p_max"])
            unc.append(UncertainInjection(int(u["bus"]), lo / base, hi / base,
                                          float(u.get("power_factor", 1.0))))
        try:
            outs = outages_from_pairs(net, self.contingencies)
            return net.configure(unc, outs)
        except GridforgeError as exc:
            raise ConfigError(str(exc)) from exc

    def dims(self, net: Network, xs=None) -> np.ndarray | None:
        from .netmodel import build_input_space
        xs = xs or build_input_space(net)
        return resolve_dims(xs, self.x_dims)


def resolve_dims(xs, spec) -> np.ndarray | None:
    if spec is None:
        return None
    if spec == "active_power":
        return np.array([k for k, r in enumerate(xs.roles) if r in (ROLE_P, ROLE_U)], dtype=int)
    idx = {n: k for k, n in enumerate(xs.names)}
    missing = [n for n in spec if n not in idx]
    if missing:
        raise ConfigError(f"unknown input names in x_dims: {missing}")
    return np.array(sorted(idx[n] for n in spec), dtype=int)


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

@dataclass
class RunReport:
    case: str
    n_x: int
    v_bt: float
    n_hp: int
    v_hp: float
    metric: float | None
    boundary_secure_pct: float | None
    mvn_secure_pct: float | None
    overall_secure_pct: float | None
    total_records: int
    n_secure: int
    n_boundary: int
    n_mvn: int
    certify: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)

    def to_json(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(asdict(self), fh, indent=1, allow_nan=False)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "RunReport":
        with open(path, encoding="utf-8") as fh:
            return cls(**json.load(fh))


def volume_metric(v: float, n_x: int) -> float | None:
    """-log10(V)/|x| as a percentage; None when V is zero."""
    if n_x == 0 or not v > 0:
        return None
    return 100.0 * -math.log10(v) / n_x


def _pct(records: Sequence[DatasetRecord]) -> float | None:
    return None if not records else 100.0 * secure_share(records)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

class Checkpoint:
    """Files for one run directory plus a small JSON state."""

    def __init__(self, out: Path, fingerprint: str, resume: bool = True):
        self.dir = out
        out.mkdir(parents=True, exist_ok=True)
        self.state_path = out / "state.json"
        self.state: dict = {}
        if resume and self.state_path.exists():
            with open(self.state_path, encoding="utf-8") as fh:
                st = json.load(fh)
            if st.get("fingerprint") == fingerprint:
                self.state = st
            else:
                log.info("checkpoint in %s belongs to another configuration; starting over", out)
        if not self.state:
            self.state = {"fingerprint": fingerprint}
            for name in ("boundary_records.csv", "mvn_records.csv"):
                (out / name).unlink(missing_ok=True)
        self.save()

    def path(self, name: str) -> Path:
        return self.dir / name

    def done(self, key: str) -> bool:
        return bool(self.state.get(key))

    def set(self, **kw) -> None:
        self.state.update(kw)
        self.save()

    def save(self) -> None:
        tmp = self.state_path.with_suffix(".tmp")
        with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(self.state, fh, indent=1)
        tmp.replace(self.state_path)


def _append_records(path: Path, records, names, header: bool) -> None:
    if header:
        export_dataset(records, path, names)
        return
    tmp = path.with_suffix(".part")
    export_dataset(records, tmp, names)
    with open(tmp, encoding="utf-8", newline="") as src, open(path, "a", encoding="utf-8", newline="") as dst:
        next(src)
        dst.writelines(src)
    tmp.unlink()


def _read_records(path: Path) -> list[DatasetRecord]:
    if not path.exists():
        return []
    return import_dataset(path)[1]


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def boundary_records(ctx: CertifyContext, samples: Sequence[BoundarySample]) -> list[DatasetRecord]:
    xs = ctx.bounds.xs
    out = []
    for s in samples:
        tag = f"boundary:{s.index}" + (":projected" if s.stage == PROJECTED else "")
        worst = s.diagnostics.get("worst")
        if worst is not None:
            worst = (worst[0], int(worst[1]), float(worst[2]))
        out.append(DatasetRecord.from_physical(xs, s.x_final, s.label, f"boundary_{s.stage}",
                                               worst if s.label != SECURE else None, tag))
    return out


@dataclass
class Stages:
    """In-memory results of a (possibly resumed) run."""

    net: Network
    bounds: TightenedBounds
    ctx: CertifyContext
    P: Polytope
    stats: CertifyStats
    v_hp: float
    boundary: list[DatasetRecord]
    mvn: list[DatasetRecord]
    timings: dict


def _stage(name):
    def wrap(fn):
        def inner(*a, **kw):
            try:
                return fn(*a, **kw)
            except (GridforgeError, np.linalg.LinAlgError, ValueError) as exc:
                if isinstance(exc, (StageError, ConfigError)):
                    raise
                raise StageError(name, exc) from exc
        return inner
    return wrap


@_stage("tighten")
def stage_tighten(cfg: RunConfig, net: Network, cp: Checkpoint) -> TightenedBounds:
    path = cp.path("bounds.json")
    if cp.done("tighten") and path.exists():
        return TightenedBounds.load(net, path)
    tol = cfg.tolerances
    tb = tighten(net, cfg.obbt_iters, x_dims=cfg.dims(net), solver_tol=tol.solver_tol, backend=cfg.backend)
    tb.save(path)
    cp.set(tighten=True)
    return tb


def make_context(cfg: RunConfig, net: Network, tb: TightenedBounds) -> CertifyContext:
    t = cfg.tolerances
    return CertifyContext.build(net, tb, cfg.dims(net, tb.xs), pf_tol=t.pf_tol,
                                feas_tol=t.feas_tol, nlp_tol=t.nlp_tol)


@_stage("certify")
def stage_certify(cfg: RunConfig, ctx: CertifyContext, cp: Checkpoint):
    rows, meta = cp.path("polytope.csv"), cp.path("polytope.json")
    if not (cp.done("certify") and rows.exists()):
        t = cfg.tolerances
        P, stats = run_algorithm1(ctx, cfg.n1, cfg.seed, t.solver_tol, cfg.backend, t.r_eps)
        P.export(rows, meta, {"dims": [int(k) for k in ctx.dims]})
        cp.set(certify=True, certify_stats=asdict(stats))
    # always continue from the file so fresh and resumed runs see the same polytope
    P = Polytope.load(rows, meta)
    stats = CertifyStats(**cp.state["certify_stats"])
    if "v_hp" not in cp.state:
        v = polytope_volume(ctx, P, stats, cfg.seed, cfg.volume_samples)
        cp.set(v_hp=v)
    return P, stats, float(cp.state["v_hp"])


@_stage("boundary")
def stage_boundary(cfg: RunConfig, ctx: CertifyContext, P: Polytope, cp: Checkpoint) -> list[DatasetRecord]:
    path = cp.path("boundary_records.csv")
    names = list(ctx.bounds.xs.names)
    done = int(cp.state.get("boundary_draws", 0))
    if done and not path.exists():
        done = 0
    while done < cfg.n2:
        m = min(CHUNK, cfg.n2 - done)
        samples = _boundary_chunk(ctx, P, cfg, done, m)
        _append_records(path, deduplicate(boundary_records(ctx, samples)), names, header=done == 0)
        done += m
        cp.set(boundary_draws=done)
    return deduplicate(_read_records(path))


def _boundary_chunk(ctx, P, cfg, start, m):
    # every chunk re-draws the full stream prefix so that chunking never
    # changes which points are sampled
    return identify_boundary(ctx, P, start + m, cfg.seed, workers=cfg.workers, offset=start)


@_stage("secure")
def stage_secure(cfg: RunConfig, ctx: CertifyContext, boundary: Sequence[DatasetRecord],
                 cp: Checkpoint) -> list[DatasetRecord]:
    path = cp.path("mvn_records.csv")
    names = list(ctx.bounds.xs.names)
    if cfg.n3 == 0:
        return []
    model = fit_mvn([r.x_normalized[ctx.dims] for r in boundary if r.secure], cfg.s_red)
    with open(cp.path("mvn.json"), "w", encoding="utf-8", newline="\n") as fh:
        json.dump({"mu": model.mu.tolist(), "sigma": model.sigma.tolist(), "s_red": model.s_red,
                   "jitter": model.jitter, "dims": [int(k) for k in ctx.dims]}, fh)
    done = int(cp.state.get("mvn_draws", 0))
    if done and not path.exists():
        done = 0
    while done < cfg.n3:
        m = min(CHUNK * 4, cfg.n3 - done)
        recs = sample_secure(ctx, model, done + m, cfg.seed, cfg.workers, offset=done)
        _append_records(path, recs, names, header=done == 0)
        done += m
        cp.set(mvn_draws=done)
    return _read_records(path)


def run_stages(cfg: RunConfig, resume: bool = True) -> Stages:
    net = cfg.network()
    cp = Checkpoint(cfg.out_dir(), cfg.fingerprint(), resume)
    timings = dict(cp.state.get("timings", {}))

    def timed(name, fn, *a):
        t0 = time.perf_counter()
        r = fn(*a)
        timings[name] = timings.get(name, 0.0) + time.perf_counter() - t0
        cp.set(timings=timings)
        return r

    tb = timed("tighten", stage_tighten, cfg, net, cp)
    ctx = make_context(cfg, net, tb)
    P, stats, v_hp = timed("certify", stage_certify, cfg, ctx, cp)
    boundary = timed("boundary", stage_boundary, cfg, ctx, P, cp)
    mvn = timed("secure", stage_secure, cfg, ctx, boundary, cp)
    return Stages(net, tb, ctx, P, stats, v_hp, boundary, mvn, timings)


def build_report(cfg: RunConfig, st: Stages, records: Sequence[DatasetRecord]) -> RunReport:
    n_x = len(st.ctx.dims)
    return RunReport(
        case=st.net.name or Path(cfg.case).stem, n_x=n_x, v_bt=st.bounds.xs.v_bt() if cfg.x_dims is None
        else _reduced_vbt(st.ctx), n_hp=st.P.n_cuts, v_hp=st.v_hp, metric=volume_metric(st.v_hp, n_x),
        boundary_secure_pct=_pct(st.boundary), mvn_secure_pct=_pct(st.mvn),
        overall_secure_pct=_pct(records), total_records=len(records),
        n_secure=sum(r.secure for r in records), n_boundary=len(st.boundary), n_mvn=len(st.mvn),
        certify=asdict(st.stats), timings={k: round(v, 3) for k, v in st.timings.items()},
    )


def _reduced_vbt(ctx: CertifyContext) -> float:
    from .tighten import box_volume
    return box_volume(ctx.bounds.xs, ctx.dims)


def run_all(cfg: RunConfig, resume: bool = True) -> tuple[Path, RunReport]:
    """Run every stage, write ``dataset.csv`` and ``report.json`` into the output directory."""
    st = run_stages(cfg, resume)
    records = deduplicate(list(st.boundary) + list(st.mvn))
    out = cfg.out_dir()
    path = export_dataset(records, out / "dataset.csv", list(st.bounds.xs.names))
    report = build_report(cfg, st, records)
    report.to_json(out / "report.json")
    return path, report


# ---------------------------------------------------------------------------
# audit
# ---------------------------------------------------------------------------

@dataclass
class AuditResult:
    n_checked: int
    n_agree: int
    mismatches: list[int]

    @property
    def ok(self) -> bool:
        return self.n_checked == self.n_agree


def audit_records(net: Network, records: Sequence[DatasetRecord], fraction: float = AUDIT_FRACTION,
                  seed: int = 0, tolerances: Tolerances | None = None) -> AuditResult:
    """Re-classify a random ``fraction`` of the records and compare labels."""
    t = tolerances or Tolerances()
    if not records:
        return AuditResult(0, 0, [])
    n = max(1, int(round(fraction * len(records))))
    idx = np.sort(rng_for(seed, STAGE_AUDIT).choice(len(records), size=n, replace=False))
    bad = []
    for i in idx:
        r = records[int(i)]
        if r.stage == "mvn_out_of_box":
            u = r.x_normalized
            agree = not r.secure and bool(np.any(u < 0) or np.any(u > 1))
        else:
            rep, _ = classify_two_stage(net, r.x_physical, t.feas_tol, pf_tol=t.pf_tol)
            agree = (rep.label == SECURE) == r.secure
        if not agree:
            bad.append(int(i))
    return AuditResult(n, n - len(bad), bad)


def audit(cfg: RunConfig, fraction: float = AUDIT_FRACTION) -> AuditResult:
    net = cfg.network()
    path = cfg.out_dir() / "dataset.csv"
    if not path.exists():
        raise ConfigError(f"no dataset at {path}; run run-all first")
    return audit_records(net, import_dataset(path)[1], fraction, cfg.seed, cfg.tolerances)


# ---------------------------------------------------------------------------
# certificate comparison
# ---------------------------------------------------------------------------

@dataclass
class CertificateTraces:
    hyperplane: list[float]
    hypersphere: list[float]
    v_bt: float
    n_x: int


def compare_certificates(cfg: RunConfig, n_iter: int = 50, path=None,
                         mc_samples: int = COMPARE_MC_SAMPLES) -> tuple[Path, CertificateTraces]:
    """Per-iteration unclassified volume of hyperplane vs hypersphere certificates
    on the active-power inputs; writes ``certificate_traces.csv``."""
    net = cfg.network()
    from .netmodel import build_input_space
    dims = resolve_dims(build_input_space(net), "active_power")
    t = cfg.tolerances
    try:
        tb = tighten(net, cfg.obbt_iters, x_dims=dims, solver_tol=t.solver_tol, backend=cfg.backend)
        ctx = CertifyContext.build(net, tb, dims)
        _, stats = run_algorithm1(ctx, n_iter, cfg.seed, t.solver_tol, cfg.backend, t.r_eps,
                                  feasible_cap=n_iter + 1, volume_trace=True,
                                  volume_samples=cfg.volume_samples)
        _, spheres = run_hypersphere_baseline(ctx, n_iter, cfg.seed, mc_samples, t.solver_tol,
                                              cfg.backend, t.r_eps)
    except GridforgeError as exc:
        raise StageError("compare-certificates", exc) from exc
    hp = list(stats.volume_trace)
    # an early exit (empty relaxation) leaves the trace constant afterwards
    hp += [hp[-1]] * (n_iter + 1 - len(hp))
    out = Path(path) if path is not None else cfg.out_dir() / "certificate_traces.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "hyperplane", "hypersphere"])
        for k, (a, b) in enumerate(zip(hp, spheres)):
            w.writerow([k, format(a, ".17g"), format(b, ".17g")])
    return out, CertificateTraces(hp, spheres, _reduced_vbt(ctx), len(ctx.dims))


def volume_of(cfg: RunConfig, rel_err_target: float = 0.1) -> float:
    """Re-estimate the unclassified volume of a stored polytope checkpoint."""
    out = cfg.out_dir()
    rows = out / "polytope.csv"
    if not rows.exists():
        raise ConfigError(f"no polytope checkpoint in {out}")
    P = Polytope.load(rows, out / "polytope.json")
    if P.n_cuts == 0:
        d = P.dim
        return float(np.prod(P.b[:d] + P.b[d:2 * d]))
    seed = int(rng_for(cfg.seed, STAGE_VOLUME).integers(2**63))
    return estimate_volume(P, rel_err_target, cfg.volume_samples, seed).value
