"""``forge`` command-line interface.

Exit codes: 0 success, 2 configuration error, 3 stage failure.
The conic backend can be overridden with the ``FORGE_SOLVER`` environment
variable (``embedded`` or ``external``).
"""
from __future__ import annotations

import json
import logging
import sys
from dataclasses import asdict
from functools import wraps

import click

from .errors import ConfigError, GridforgeError
from .pipeline import (
    AUDIT_FRACTION, Checkpoint, RunConfig, StageError, audit, compare_certificates, make_context,
    run_all, stage_boundary, stage_certify, stage_secure, stage_tighten, volume_of,
)

EXIT_CONFIG = 2
EXIT_STAGE = 3


def _guard(fn):
    @wraps(fn)
    def inner(*a, **kw):
        try:
            return fn(*a, **kw)
        except ConfigError as exc:
            click.echo(f"config error: {exc}", err=True)
            sys.exit(EXIT_CONFIG)
        except (StageError, GridforgeError) as exc:
            click.echo(f"stage failure: {exc}", err=True)
            sys.exit(EXIT_STAGE)
    return inner


def _load(config, out=None, workers=None, seed=None, **counts) -> RunConfig:
    cfg = RunConfig.load(config)
    if out is not None:
        cfg.out = str(out)
    if workers is not None:
        cfg.workers = workers
    if seed is not None:
        cfg.seed = seed
    for k, v in counts.items():
        if v is not None:
            setattr(cfg, k, v)
    cfg.validate()
    return cfg


def _emit(obj) -> None:
    click.echo(json.dumps(obj, indent=1, allow_nan=False))


config_opt = click.option("--config", "config", required=True, type=click.Path(dir_okay=False),
                          help="Run configuration (JSON).")
out_opt = click.option("--out", type=click.Path(file_okay=False), default=None,
                       help="Output directory (overrides the config).")
workers_opt = click.option("--workers", type=int, default=None, help="Worker processes.")
seed_opt = click.option("--seed", type=int, default=None, help="Master seed.")


@click.group()
@click.option("-v", "--verbose", count=True, help="Log progress (-vv for debug).")
def main(verbose: int) -> None:
    """Generate labelled secure/insecure operating-point datasets."""
    level = logging.WARNING if verbose == 0 else logging.INFO if verbose == 1 else logging.DEBUG
    logging.basicConfig(level=level, format="%(asctime)s %(name)s %(message)s")


@main.command()
@config_opt
@_guard
def validate(config):
    """Check the configuration and the case; print the input space."""
    cfg = _load(config)
    net = cfg.network()
    from .netmodel import build_input_space
    xs = build_input_space(net)
    dims = cfg.dims(net, xs)
    _emit({"case": str(cfg.case_path()), "buses": net.n_bus, "branches": len(net.branches),
           "contingencies": len(net.contingencies) - 1, "uncertain": len(net.uncertain),
           "n_x": int(xs.dim if dims is None else len([k for k in dims if not xs.frozen[k]])),
           "inputs": list(xs.names)})


def _prefix(cfg: RunConfig, upto: str):
    net = cfg.network()
    cp = Checkpoint(cfg.out_dir(), cfg.fingerprint())
    tb = stage_tighten(cfg, net, cp)
    if upto == "tighten":
        return {"v_bt": tb.v_bt, "iterations": tb.iterations_used}
    ctx = make_context(cfg, net, tb)
    P, stats, v_hp = stage_certify(cfg, ctx, cp)
    if upto == "certify":
        return {"n_hp": P.n_cuts, "v_hp": v_hp, "stats": asdict(stats)}
    boundary = stage_boundary(cfg, ctx, P, cp)
    if upto == "boundary":
        return {"records": len(boundary), "secure": sum(r.secure for r in boundary)}
    mvn = stage_secure(cfg, ctx, boundary, cp)
    return {"records": len(mvn), "secure": sum(r.secure for r in mvn)}


@main.command()
@config_opt
@out_opt
@_guard
def tighten(config, out):
    """Run optimisation-based bound tightening."""
    _emit(_prefix(_load(config, out), "tighten"))


@main.command()
@config_opt
@out_opt
@seed_opt
@click.option("--n1", type=int, default=None)
@_guard
def certify(config, out, seed, n1):
    """Compute separating-hyperplane certificates."""
    _emit(_prefix(_load(config, out, seed=seed, n1=n1), "certify"))


@main.command()
@config_opt
@out_opt
@workers_opt
@seed_opt
@click.option("--n2", type=int, default=None)
@_guard
def boundary(config, out, workers, seed, n2):
    """Sample and label the unclassified region (runs earlier stages if needed)."""
    _emit(_prefix(_load(config, out, workers, seed, n2=n2), "boundary"))


@main.command()
@config_opt
@out_opt
@workers_opt
@seed_opt
@click.option("--n3", type=int, default=None)
@_guard
def secure(config, out, workers, seed, n3):
    """Sample the secure interior (runs earlier stages if needed)."""
    _emit(_prefix(_load(config, out, workers, seed, n3=n3), "secure"))


@main.command("run-all")
@config_opt
@out_opt
@workers_opt
@seed_opt
@click.option("--n1", type=int, default=None)
@click.option("--n2", type=int, default=None)
@click.option("--n3", type=int, default=None)
@click.option("--fresh", is_flag=True, help="Ignore existing checkpoints.")
@_guard
def run_all_cmd(config, out, workers, seed, n1, n2, n3, fresh):
    """Run the full pipeline and write dataset.csv and report.json."""
    cfg = _load(config, out, workers, seed, n1=n1, n2=n2, n3=n3)
    path, report = run_all(cfg, resume=not fresh)
    click.echo(f"dataset: {path}", err=True)
    _emit(asdict(report))


@main.command()
@config_opt
@out_opt
@click.option("--rel-err", type=float, default=0.1, show_default=True)
@_guard
def volume(config, out, rel_err):
    """Re-estimate the unclassified volume of the stored polytope."""
    _emit({"v_hp": volume_of(_load(config, out), rel_err)})


@main.command("compare-certificates")
@config_opt
@out_opt
@click.option("--iterations", type=int, default=50, show_default=True)
@_guard
def compare_certificates_cmd(config, out, iterations):
    """Hyperplane vs hypersphere unclassified-volume traces (active-power inputs)."""
    path, tr = compare_certificates(_load(config, out), iterations)
    click.echo(f"traces: {path}", err=True)
    _emit({"n_x": tr.n_x, "v_bt": tr.v_bt, "hyperplane_final": tr.hyperplane[-1],
           "hypersphere_final": tr.hypersphere[-1]})


@main.command("audit")
@config_opt
@out_opt
@click.option("--fraction", type=float, default=AUDIT_FRACTION, show_default=True)
@_guard
def audit_cmd(config, out, fraction):
    """Re-classify a random subsample of the dataset; exit 3 on any disagreement."""
    res = audit(_load(config, out), fraction)
    _emit({"checked": res.n_checked, "agree": res.n_agree, "mismatches": res.mismatches})
    if not res.ok:
        sys.exit(EXIT_STAGE)


if __name__ == "__main__":
    main()
