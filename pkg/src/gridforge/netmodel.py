"""Typed network model, MATPOWER case I/O and the control-input space.

All quantities are per-unit on ``base_mva`` after parsing; angles are radians.
Generators sharing a bus are aggregated into one *generator bus* for the
input vector (one active-power entry and one voltage set-point per bus).
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from .errors import InconsistentCase, IslandedNetwork, MalformedCase, NoSlackGenerator

ROLE_P = "gen_p"
ROLE_V = "gen_v"
ROLE_U = "uncertain_p"

_HALF_PI = math.pi / 2

# MATPOWER column counts that must be present
_MIN_COLS = {"bus": 13, "gen": 10, "branch": 11}


@dataclass(frozen=True)
class Bus:
    id: int
    kind: str  # "slack" | "pv" | "pq"
    p_demand: float
    q_demand: float
    shunt_g: float
    shunt_b: float
    v_min: float
    v_max: float
    v_init: float = 1.0
    base_kv: float = 0.0


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    r: float
    x: float
    b_charge: float
    tap: float = 1.0
    shift: float = 0.0
    s_max: float | None = None  # None: no thermal limit
    theta_min: float = -_HALF_PI
    theta_max: float = _HALF_PI
    in_service: bool = True


@dataclass(frozen=True)
class Generator:
    bus: int
    p_min: float
    p_max: float
    q_min: float
    q_max: float
    v_set: float = 1.0
    in_service: bool = True
    p_init: float = 0.0
    q_init: float = 0.0


@dataclass(frozen=True)
class UncertainInjection:
    """Active-power injection varying in ``[p_min, p_max]`` at a fixed power factor."""

    bus: int
    p_min: float
    p_max: float
    power_factor: float = 1.0

    def __post_init__(self):
        if self.p_min > self.p_max:
            raise InconsistentCase(f"uncertain injection at bus {self.bus}: p_min > p_max")
        if not 0.0 < self.power_factor <= 1.0:
            raise InconsistentCase(f"uncertain injection at bus {self.bus}: power factor must be in (0, 1]")

    @property
    def q_ratio(self) -> float:
        c = self.power_factor
        return math.sqrt((1.0 - c * c) / (c * c))


@dataclass(frozen=True)
class Network:
    base_mva: float
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    generators: tuple[Generator, ...]
    uncertain: tuple[UncertainInjection, ...] = ()
    # entry 0 is the intact state (None); others are branch indices
    contingencies: tuple[int | None, ...] = (None,)
    name: str = ""

    # ---- indexing -------------------------------------------------------
    @cached_property
    def bus_index(self) -> dict[int, int]:
        return {b.id: k for k, b in enumerate(self.buses)}

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @cached_property
    def slack(self) -> int:
        return next(k for k, b in enumerate(self.buses) if b.kind == "slack")

    @cached_property
    def arrays(self) -> "NetworkArrays":
        return NetworkArrays.build(self)

    @cached_property
    def gen_buses(self) -> "GenBuses":
        return GenBuses.build(self)

    def configure(self, uncertain: Iterable[UncertainInjection] = (),
                  outages: Iterable[int] = ()) -> "Network":
        """Return a copy with uncertain injections and a contingency list attached."""
        unc = tuple(uncertain)
        for u in unc:
            if u.bus not in self.bus_index:
                raise InconsistentCase(f"uncertain injection references unknown bus {u.bus}")
        outs = tuple(int(o) for o in outages)
        for o in outs:
            if not 0 <= o < len(self.branches):
                raise InconsistentCase(f"contingency references unknown branch index {o}")
            connectivity_check(self, o)
        return replace(self, uncertain=unc, contingencies=(None,) + outs)

    def find_branch(self, from_bus: int, to_bus: int) -> int:
        for k, br in enumerate(self.branches):
            if {br.from_bus, br.to_bus} == {from_bus, to_bus} and br.in_service:
                return k
        raise InconsistentCase(f"no in-service branch between buses {from_bus} and {to_bus}")


@dataclass(frozen=True, eq=False)
class NetworkArrays:
    """Vectorised per-bus and per-branch data, with the pi-model admittances."""

    pd: np.ndarray
    qd: np.ndarray
    gs: np.ndarray
    bs: np.ndarray
    vmin: np.ndarray
    vmax: np.ndarray
    f: np.ndarray
    t: np.ndarray
    yff: np.ndarray
    yft: np.ndarray
    ytf: np.ndarray
    ytt: np.ndarray
    s_max: np.ndarray  # inf where unlimited
    ang_min: np.ndarray
    ang_max: np.ndarray
    in_service: np.ndarray

    @classmethod
    def build(cls, net: Network) -> "NetworkArrays":
        idx = net.bus_index
        base = net.base_mva
        pd = np.array([b.p_demand for b in net.buses])
        qd = np.array([b.q_demand for b in net.buses])
        gs = np.array([b.shunt_g for b in net.buses])
        bs = np.array([b.shunt_b for b in net.buses])
        vmin = np.array([b.v_min for b in net.buses])
        vmax = np.array([b.v_max for b in net.buses])
        brs = net.branches
        f = np.array([idx[br.from_bus] for br in brs], dtype=int)
        t = np.array([idx[br.to_bus] for br in brs], dtype=int)
        ys = np.array([1.0 / complex(br.r, br.x) for br in brs], dtype=complex)
        ratio = np.array([br.tap * np.exp(1j * br.shift) for br in brs], dtype=complex)
        bc = np.array([br.b_charge for br in brs])
        ytt = ys + 0.5j * bc
        yff = ytt / (ratio * np.conj(ratio))
        yft = -ys / np.conj(ratio)
        ytf = -ys / ratio
        s_max = np.array([np.inf if br.s_max is None else br.s_max for br in brs])
        del base
        return cls(
            pd=pd, qd=qd, gs=gs, bs=bs, vmin=vmin, vmax=vmax, f=f, t=t,
            yff=yff, yft=yft, ytf=ytf, ytt=ytt, s_max=s_max,
            ang_min=np.array([br.theta_min for br in brs]),
            ang_max=np.array([br.theta_max for br in brs]),
            in_service=np.array([br.in_service for br in brs], dtype=bool),
        )


@dataclass(frozen=True, eq=False)
class GenBuses:
    """Generators aggregated per bus, in order of first appearance in the gen table."""

    bus: np.ndarray  # bus positions
    p_min: np.ndarray
    p_max: np.ndarray
    q_min: np.ndarray
    q_max: np.ndarray
    v_set: np.ndarray
    p_init: np.ndarray
    slack_pos: int  # position of the slack bus within ``bus``

    @classmethod
    def build(cls, net: Network) -> "GenBuses":
        idx = net.bus_index
        order: list[int] = []
        agg: dict[int, list[float]] = {}
        for g in net.generators:
            if not g.in_service:
                continue
            k = idx[g.bus]
            if k not in agg:
                order.append(k)
                agg[k] = [0.0, 0.0, 0.0, 0.0, g.v_set, 0.0]
            a = agg[k]
            a[0] += g.p_min
            a[1] += g.p_max
            a[2] += g.q_min
            a[3] += g.q_max
            a[5] += g.p_init
        if net.slack not in agg:
            raise NoSlackGenerator(f"slack bus {net.buses[net.slack].id} hosts no in-service generator")
        vals = np.array([agg[k] for k in order]).reshape(-1, 6)
        return cls(
            bus=np.array(order, dtype=int), p_min=vals[:, 0], p_max=vals[:, 1],
            q_min=vals[:, 2], q_max=vals[:, 3], v_set=vals[:, 4], p_init=vals[:, 5],
            slack_pos=order.index(net.slack),
        )

    def __len__(self) -> int:
        return len(self.bus)


# ---------------------------------------------------------------------------
# admittance matrices and contingencies
# ---------------------------------------------------------------------------

def ybus(net: Network, outage: int | None = None):
    """Bus admittance matrix plus from/to branch admittance matrices.

    Out-of-service branches and the outaged branch contribute nothing.
    """
    a = net.arrays
    n = net.n_bus
    on = a.in_service.copy()
    if outage is not None:
        on[outage] = False
    nl = len(on)
    rows = np.arange(nl)
    m = on.astype(float)
    cf = sp.csr_matrix((np.ones(nl), (rows, a.f)), shape=(nl, n))
    ct = sp.csr_matrix((np.ones(nl), (rows, a.t)), shape=(nl, n))
    yf = sp.diags(a.yff * m) @ cf + sp.diags(a.yft * m) @ ct
    yt = sp.diags(a.ytf * m) @ cf + sp.diags(a.ytt * m) @ ct
    ysh = (a.gs + 1j * a.bs)
    y = cf.T @ yf + ct.T @ yt + sp.diags(ysh)
    return sp.csr_matrix(y), sp.csr_matrix(yf), sp.csr_matrix(yt)


def branch_stamp(net: Network, k: int) -> sp.csr_matrix:
    """The 2x2 contribution of branch ``k`` to the bus admittance matrix."""
    a = net.arrays
    i, j = a.f[k], a.t[k]
    n = net.n_bus
    return sp.csr_matrix(
        ([a.yff[k], a.yft[k], a.ytf[k], a.ytt[k]], ([i, i, j, j], [i, j, i, j])), shape=(n, n)
    )


def connectivity_check(net: Network, outage: int | None = None) -> None:
    a = net.arrays
    on = a.in_service.copy()
    if outage is not None:
        on[outage] = False
    n = net.n_bus
    g = sp.csr_matrix((np.ones(on.sum()), (a.f[on], a.t[on])), shape=(n, n))
    ncomp, _ = connected_components(g, directed=False)
    if ncomp > 1:
        raise IslandedNetwork(f"outage of branch {outage} islands the network ({ncomp} components)")


def apply_contingency(net: Network, c: int) -> Network:
    """Network with the branch of contingency ``c`` switched out (``c = 0`` is intact)."""
    if not 0 <= c < len(net.contingencies):
        raise IndexError(f"contingency index {c} out of range")
    k = net.contingencies[c]
    if k is None:
        return net
    connectivity_check(net, k)
    brs = list(net.branches)
    brs[k] = replace(brs[k], in_service=False)
    return replace(net, branches=tuple(brs), contingencies=(None,))


# ---------------------------------------------------------------------------
# input space
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class InputSpace:
    """Ordered control vector: non-slack generator P, generator |V|, uncertain P."""

    roles: tuple[str, ...]
    elements: tuple[int, ...]  # bus ids (P, V) or injection index (U)
    x_min: np.ndarray
    x_max: np.ndarray
    x_bt_min: np.ndarray
    x_bt_max: np.ndarray
    # positions into the network's generator-bus table / uncertain list
    p_gen: np.ndarray = field(repr=False)
    v_gen: np.ndarray = field(repr=False)
    u_idx: np.ndarray = field(repr=False)

    @property
    def n(self) -> int:
        return len(self.roles)

    @cached_property
    def frozen(self) -> np.ndarray:
        return (self.x_max - self.x_min) <= 1e-12 * np.maximum(1.0, np.abs(self.x_max))

    @cached_property
    def active(self) -> np.ndarray:
        return np.flatnonzero(~self.frozen)

    @property
    def dim(self) -> int:
        """Number of non-frozen inputs; this is the reported |x|."""
        return len(self.active)

    @cached_property
    def names(self) -> tuple[str, ...]:
        return tuple(f"{r}_{e}" for r, e in zip(self.roles, self.elements))

    @cached_property
    def p_slice(self) -> np.ndarray:
        return np.flatnonzero(np.array(self.roles) == ROLE_P)

    @cached_property
    def v_slice(self) -> np.ndarray:
        return np.flatnonzero(np.array(self.roles) == ROLE_V)

    @cached_property
    def u_slice(self) -> np.ndarray:
        return np.flatnonzero(np.array(self.roles) == ROLE_U)

    def normalize(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        span = np.where(self.frozen, 1.0, self.x_max - self.x_min)
        u = (x - self.x_min) / span
        return np.where(self.frozen, 0.5, u)

    def denormalize(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        x = self.x_min + u * (self.x_max - self.x_min)
        return np.where(self.frozen, self.x_min, x)

    def bt_box_normalized(self) -> tuple[np.ndarray, np.ndarray]:
        return self.normalize(self.x_bt_min), self.normalize(self.x_bt_max)

    def with_bounds(self, lo, hi) -> "InputSpace":
        lo = np.maximum(np.asarray(lo, dtype=float), self.x_min)
        hi = np.minimum(np.asarray(hi, dtype=float), self.x_max)
        return replace(self, x_bt_min=lo, x_bt_max=np.maximum(hi, lo))

    def v_bt(self) -> float:
        """Tightened-box volume relative to the original box (frozen inputs count 1)."""
        act = self.active
        span = self.x_max[act] - self.x_min[act]
        return float(np.prod((self.x_bt_max[act] - self.x_bt_min[act]) / span))

    def in_box(self, x, tol: float = 1e-9) -> bool:
        x = np.asarray(x)
        span = np.maximum(self.x_max - self.x_min, 1.0)
        return bool(np.all(x >= self.x_min - tol * span) and np.all(x <= self.x_max + tol * span))


def build_input_space(net: Network) -> InputSpace:
    gb = net.gen_buses
    a = net.arrays
    roles: list[str] = []
    elems: list[int] = []
    lo: list[float] = []
    hi: list[float] = []
    p_gen = [k for k in range(len(gb)) if k != gb.slack_pos]
    for k in p_gen:
        roles.append(ROLE_P)
        elems.append(net.buses[gb.bus[k]].id)
        lo.append(gb.p_min[k])
        hi.append(gb.p_max[k])
    for k in range(len(gb)):
        roles.append(ROLE_V)
        elems.append(net.buses[gb.bus[k]].id)
        lo.append(a.vmin[gb.bus[k]])
        hi.append(a.vmax[gb.bus[k]])
    for k, u in enumerate(net.uncertain):
        roles.append(ROLE_U)
        elems.append(k)
        lo.append(u.p_min)
        hi.append(u.p_max)
    lo_a = np.array(lo, dtype=float)
    hi_a = np.array(hi, dtype=float)
    return InputSpace(
        roles=tuple(roles), elements=tuple(elems), x_min=lo_a, x_max=hi_a,
        x_bt_min=lo_a.copy(), x_bt_max=hi_a.copy(),
        p_gen=np.array(p_gen, dtype=int), v_gen=np.arange(len(gb)),
        u_idx=np.arange(len(net.uncertain)),
    )


def nominal_point(net: Network, xs: InputSpace) -> np.ndarray:
    """Case dispatch and set-points as an input vector, clipped to the box."""
    gb = net.gen_buses
    x = np.empty(xs.n)
    x[xs.p_slice] = gb.p_init[xs.p_gen]
    x[xs.v_slice] = gb.v_set[xs.v_gen]
    x[xs.u_slice] = 0.0
    return np.clip(x, xs.x_min, xs.x_max)


# ---------------------------------------------------------------------------
# MATPOWER I/O
# ---------------------------------------------------------------------------

_TABLE_RE = re.compile(r"mpc\.(\w+)\s*=\s*\[(.*?)\]\s*;?", re.S)
_SCALAR_RE = re.compile(r"mpc\.baseMVA\s*=\s*([-+0-9.eE]+)\s*;")


def _strip_comments(text: str) -> str:
    return "\n".join(line.split("%", 1)[0] for line in text.splitlines())


def _parse_table(body: str, name: str) -> np.ndarray:
    rows = []
    for chunk in re.split(r"[;\n]", body):
        toks = [t for t in re.split(r"[\s,]+", chunk.strip()) if t]
        if not toks:
            continue
        try:
            rows.append([float(t.replace("Inf", "inf")) for t in toks])
        except ValueError as exc:
            raise MalformedCase(f"non-numeric entry in mpc.{name}: {chunk.strip()!r}") from exc
    if not rows:
        return np.zeros((0, _MIN_COLS.get(name, 0)))
    width = len(rows[0])
    if any(len(r) != width for r in rows):
        raise MalformedCase(f"ragged rows in mpc.{name}")
    return np.array(rows)


def _angle_limit(deg: float, sign: float) -> float:
    # 0 or beyond +-90 deg means "unconstrained": use the envelope domain edge
    if deg == 0.0 or abs(deg) >= 90.0:
        return sign * _HALF_PI
    return math.radians(deg)


def parse_case_text(text: str, name: str = "") -> Network:
    text = _strip_comments(text)
    m = _SCALAR_RE.search(text)
    if m is None:
        raise MalformedCase("mpc.baseMVA not found")
    base = float(m.group(1))
    tables = {k: _parse_table(v, k) for k, v in _TABLE_RE.findall(text)}
    for key, ncol in _MIN_COLS.items():
        if key not in tables:
            raise MalformedCase(f"mpc.{key} table missing")
        if tables[key].shape[0] and tables[key].shape[1] < ncol:
            raise MalformedCase(f"mpc.{key} has {tables[key].shape[1]} columns, need {ncol}")
    kinds = {1: "pq", 2: "pv", 3: "slack"}
    buses = []
    for r in tables["bus"]:
        kind = kinds.get(int(r[1]))
        if kind is None:
            raise MalformedCase(f"unsupported bus type {int(r[1])} at bus {int(r[0])}")
        if not 0 < r[12] <= r[11]:
            raise InconsistentCase(f"bus {int(r[0])}: need 0 < v_min <= v_max")
        buses.append(Bus(
            id=int(r[0]), kind=kind, p_demand=r[2] / base, q_demand=r[3] / base,
            shunt_g=r[4] / base, shunt_b=r[5] / base, v_min=r[12], v_max=r[11],
            v_init=r[7], base_kv=r[9],
        ))
    ids = [b.id for b in buses]
    if len(set(ids)) != len(ids):
        raise InconsistentCase("duplicate bus ids")
    nslack = sum(b.kind == "slack" for b in buses)
    if nslack != 1:
        raise InconsistentCase(f"expected exactly one slack bus, found {nslack}")
    known = set(ids)
    gens = []
    for r in tables["gen"]:
        if int(r[0]) not in known:
            raise InconsistentCase(f"generator references unknown bus {int(r[0])}")
        if r[9] > r[8] or r[4] > r[3]:
            raise InconsistentCase(f"generator at bus {int(r[0])} has inverted limits")
        gens.append(Generator(
            bus=int(r[0]), p_min=r[9] / base, p_max=r[8] / base, q_min=r[4] / base,
            q_max=r[3] / base, v_set=r[5], in_service=r[7] > 0, p_init=r[1] / base,
            q_init=r[2] / base,
        ))
    branches = []
    for r in tables["branch"]:
        f, t = int(r[0]), int(r[1])
        if f not in known or t not in known:
            raise InconsistentCase(f"branch {f}-{t} references an unknown bus")
        if f == t:
            raise InconsistentCase(f"branch {f}-{t} is a self-loop")
        amin = _angle_limit(r[11], -1.0) if len(r) > 11 else -_HALF_PI
        amax = _angle_limit(r[12], 1.0) if len(r) > 12 else _HALF_PI
        if amin > amax:
            raise InconsistentCase(f"branch {f}-{t}: angmin > angmax")
        branches.append(Branch(
            from_bus=f, to_bus=t, r=r[2], x=r[3], b_charge=r[4],
            tap=r[8] if r[8] != 0 else 1.0, shift=math.radians(r[9]),
            s_max=None if r[5] == 0 else r[5] / base,
            theta_min=amin, theta_max=amax, in_service=r[10] > 0,
        ))
    return Network(base_mva=base, buses=tuple(buses), branches=tuple(branches),
                   generators=tuple(gens), name=name)


def parse_case(path) -> Network:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise MalformedCase(f"cannot read {path}: {exc}") from exc
    return parse_case_text(text, name=path.stem)


def _fmt(v: float) -> str:
    return repr(float(v))


def write_case(net: Network, path) -> None:
    """Write the base network (no uncertainty or contingencies) in MATPOWER format."""
    base = net.base_mva
    kinds = {"pq": 1, "pv": 2, "slack": 3}
    lines = [f"function mpc = {net.name or 'case'}", "mpc.version = '2';", f"mpc.baseMVA = {_fmt(base)};", "", "mpc.bus = ["]
    for b in net.buses:
        row = [b.id, kinds[b.kind], b.p_demand * base, b.q_demand * base, b.shunt_g * base,
               b.shunt_b * base, 1, b.v_init, 0.0, b.base_kv, 1, b.v_max, b.v_min]
        lines.append("\t" + "\t".join(_fmt(v) for v in row) + ";")
    lines += ["];", "", "mpc.gen = ["]
    for g in net.generators:
        row = [g.bus, g.p_init * base, g.q_init * base, g.q_max * base, g.q_min * base,
               g.v_set, base, 1 if g.in_service else 0, g.p_max * base, g.p_min * base]
        lines.append("\t" + "\t".join(_fmt(v) for v in row) + ";")
    lines += ["];", "", "mpc.branch = ["]
    for br in net.branches:
        rate = 0.0 if br.s_max is None else br.s_max * base
        row = [br.from_bus, br.to_bus, br.r, br.x, br.b_charge, rate, rate, rate,
               br.tap, math.degrees(br.shift), 1 if br.in_service else 0,
               math.degrees(br.theta_min), math.degrees(br.theta_max)]
        lines.append("\t" + "\t".join(_fmt(v) for v in row) + ";")
    lines += ["];", ""]
    Path(path).write_text("\n".join(lines))


def bundled_case(name: str) -> Path:
    """Path of a case file shipped with the package (MATPOWER originals)."""
    p = Path(__file__).parent / "data" / "cases" / f"{name}.m"
    if not p.exists():
        raise FileNotFoundError(f"no bundled case named {name!r}")
    return p


def outages_from_pairs(net: Network, pairs: Sequence[Sequence[int]]) -> list[int]:
    return [net.find_branch(int(a), int(b)) for a, b in pairs]
