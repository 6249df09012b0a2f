from pathlib import Path

import numpy as np
import pytest

from gridforge.netmodel import build_input_space, bundled_case, parse_case, parse_case_text

DATA = Path(__file__).parent / "data"

TWO_BUS = """
function mpc = toy2
mpc.baseMVA = 100;
mpc.bus = [
	1	3	0	0	0	0	1	1.0	0	230	1	1.1	0.9;
	2	1	{pd}	{qd}	0	0	1	1.0	0	230	1	1.1	0.9;
];
mpc.gen = [
	1	0	0	300	-300	1.0	100	1	{pmax}	0;
];
mpc.branch = [
	1	2	{r}	{x}	{b}	{rate}	0	0	0	0	1	-360	360;
];
"""


def two_bus(pd=50.0, qd=20.0, r=0.01, x=0.1, b=0.0, rate=0.0, pmax=300.0):
    """Slack bus feeding one load through a single line (MW/MVAr inputs)."""
    return parse_case_text(TWO_BUS.format(pd=pd, qd=qd, r=r, x=x, b=b, rate=rate, pmax=pmax), "toy2")


SUPPLY = """
mpc.baseMVA = 100;
mpc.bus = [
	1	3	{load1}	0	0	0	1	1.0	0	230	1	1.1	0.9;
	2	2	{load2}	0	0	0	1	1.0	0	230	1	1.1	0.9;
];
mpc.gen = [
	1	0	0	500	-500	1.0	100	1	50	0;
	2	0	0	500	-500	1.0	100	1	100	0;
];
mpc.branch = [
	1	2	0	0.05	0	{rate}	0	0	0	0	1	-60	60;
];
"""


def supply_net(load=100.0, at_slack=False, rate=0.0, uncertain=()):
    """Lossless line; slack capped at 50 MW, second unit (bus 2) in [0, 100] MW."""
    loads = {"load1": load if at_slack else 0.0, "load2": 0.0 if at_slack else load}
    return parse_case_text(SUPPLY.format(rate=rate, **loads), "supply").configure(uncertain)


@pytest.fixture(scope="session")
def case5():
    return parse_case(bundled_case("case5"))


@pytest.fixture(scope="session")
def case14():
    return parse_case(bundled_case("case14"))


@pytest.fixture(scope="session")
def toy3():
    return parse_case(DATA / "toy3.m")


@pytest.fixture(scope="session")
def case14_secure(case14):
    return secure_points(case14, 12, seed=5)


def secure_points(net, n, seed=0, max_draws=4000):
    """Uniform draws from the input box that pass the two-stage check (adjusted if needed)."""
    from gridforge.acpf import SECURE, classify_two_stage
    xs = build_input_space(net)
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(max_draws):
        x = rng.uniform(xs.x_min, xs.x_max)
        rep, x_adj = classify_two_stage(net, x)
        if rep.label == SECURE:
            out.append(x if x_adj is None else x_adj)
            if len(out) == n:
                break
    return out
