import math

import numpy as np
import pytest

from gridforge.errors import InconsistentCase, IslandedNetwork, MalformedCase, NoSlackGenerator
from gridforge.netmodel import (
    UncertainInjection, apply_contingency, branch_stamp, build_input_space, bundled_case,
    nominal_point, outages_from_pairs, parse_case, parse_case_text, write_case, ybus,
)

from conftest import TWO_BUS, two_bus


def test_parse_case14_shapes(case14):
    assert case14.n_bus == 14
    assert len(case14.branches) == 20
    assert len(case14.generators) == 5
    assert case14.base_mva == 100.0
    assert case14.buses[case14.slack].id == 1
    # per-unit conversion of bus 2 demand (21.7 MW, 12.7 MVAr)
    b2 = case14.buses[case14.bus_index[2]]
    assert b2.p_demand == pytest.approx(0.217)
    assert b2.q_demand == pytest.approx(0.127)


def test_toy3_input_dimension(toy3):
    xs = build_input_space(toy3)
    # 2 non-slack P (one frozen synchronous condenser) + 3 V
    assert xs.n == 5
    assert xs.dim == 4
    assert xs.names == ("gen_p_2", "gen_p_3", "gen_v_1", "gen_v_2", "gen_v_3")


def test_input_space_ordering_and_size(case14):
    net = case14.configure([UncertainInjection(4, -0.1, 0.1), UncertainInjection(9, -0.05, 0.2)])
    xs = build_input_space(net)
    g = len(net.gen_buses)
    assert xs.n == (g - 1) + g + 2
    roles = list(xs.roles)
    assert roles == ["gen_p"] * (g - 1) + ["gen_v"] * g + ["uncertain_p"] * 2
    assert np.all(xs.x_bt_min == xs.x_min) and np.all(xs.x_bt_max == xs.x_max)


def test_single_generator_network_has_one_input():
    xs = build_input_space(two_bus())
    assert xs.n == 1 and xs.roles == ("gen_v",)


def test_dangling_generator_reference():
    text = TWO_BUS.format(pd=50, qd=20, r=0.01, x=0.1, b=0, rate=0, pmax=300).replace(
        "\t1\t0\t0\t300\t-300", "\t99\t0\t0\t300\t-300")
    with pytest.raises(InconsistentCase):
        parse_case_text(text)


def test_missing_table_and_ragged_rows():
    with pytest.raises(MalformedCase):
        parse_case_text("mpc.baseMVA = 100;\nmpc.bus = [1 3 0 0 0 0 1 1 0 1 1 1.1 0.9];")
    text = TWO_BUS.format(pd=50, qd=20, r=0.01, x=0.1, b=0, rate=0, pmax=300).replace(
        "1.1\t0.9;\n];", "1.1;\n];", 1)
    with pytest.raises(MalformedCase):
        parse_case_text(text)


def test_no_or_duplicate_slack():
    base = TWO_BUS.format(pd=50, qd=20, r=0.01, x=0.1, b=0, rate=0, pmax=300)
    with pytest.raises(InconsistentCase):
        parse_case_text(base.replace("\t1\t3\t", "\t1\t1\t"))
    with pytest.raises(InconsistentCase):
        parse_case_text(base.replace("\t2\t1\t", "\t2\t3\t"))


def test_slack_without_generator():
    text = TWO_BUS.format(pd=50, qd=20, r=0.01, x=0.1, b=0, rate=0, pmax=300).replace(
        "\t1\t0\t0\t300\t-300", "\t2\t0\t0\t300\t-300")
    with pytest.raises(NoSlackGenerator):
        build_input_space(parse_case_text(text))


def test_zero_rate_means_unlimited_and_angles_default():
    net = two_bus(rate=0.0)
    assert net.branches[0].s_max is None
    a = net.arrays
    assert np.all(np.isinf(a.s_max))
    assert np.allclose(a.ang_min, -math.pi / 2) and np.allclose(a.ang_max, math.pi / 2)
    assert two_bus(rate=80.0).branches[0].s_max == pytest.approx(0.8)


def test_round_trip(tmp_path, case14):
    p = tmp_path / "rt.m"
    write_case(case14, p)
    back = parse_case(p)
    assert back.buses == case14.buses
    assert back.branches == case14.branches
    assert back.generators == case14.generators
    assert back.base_mva == case14.base_mva


def test_normalize_round_trip(case14):
    xs = build_input_space(case14)
    assert np.allclose(xs.normalize(xs.x_min), 0.0)
    assert np.allclose(xs.normalize(xs.x_max), 1.0)
    assert np.allclose(xs.normalize(0.5 * (xs.x_min + xs.x_max)), 0.5)
    rng = np.random.default_rng(3)
    for _ in range(100):
        x = rng.uniform(xs.x_min, xs.x_max)
        back = xs.denormalize(xs.normalize(x))
        assert np.max(np.abs(back - x) / np.maximum(1.0, np.abs(x))) <= 1e-12


def test_frozen_dims_normalize_to_half(toy3):
    xs = build_input_space(toy3)
    assert xs.frozen.tolist() == [False, True, False, False, False]
    u = xs.normalize(xs.x_min)
    assert u[1] == 0.5


def test_ybus_symmetric_without_taps():
    net = two_bus(b=0.02)
    y, _, _ = ybus(net)
    y = y.toarray()
    assert y[0, 1] == y[1, 0]
    z = complex(0.01, 0.1)
    assert y[0, 1] == pytest.approx(-1 / z)
    assert y[0, 0] == pytest.approx(1 / z + 0.01j)


def test_contingency_removes_exactly_one_stamp(case14):
    y0 = ybus(case14)[0].toarray()
    for k in (0, 6, 12):
        yc = ybus(case14, k)[0].toarray()
        diff = y0 - yc
        assert np.allclose(diff, branch_stamp(case14, k).toarray(), atol=1e-12)
        assert np.count_nonzero(np.abs(diff) > 1e-12) == 4


def test_intact_contingency_identical(case14):
    view = case14.configure(outages=outages_from_pairs(case14, [[1, 2]]))
    assert np.array_equal(ybus(view)[0].toarray(), ybus(case14)[0].toarray())
    assert view.contingencies == (None, 0)


def test_islanding_outage():
    with pytest.raises(IslandedNetwork):
        two_bus().configure(outages=[0])


def test_apply_contingency(case14):
    net = case14.configure(outages=[3])
    assert apply_contingency(net, 0) is net
    out = apply_contingency(net, 1)
    assert not out.branches[3].in_service
    assert np.allclose(ybus(out)[0].toarray(), ybus(net, 3)[0].toarray())


def test_uncertain_injection_reactive_ratio():
    u = UncertainInjection(3, -1.0, 1.0, power_factor=0.8)
    assert u.q_ratio == pytest.approx(math.sqrt(1 - 0.64) / 0.8)
    with pytest.raises(InconsistentCase):
        UncertainInjection(3, 1.0, -1.0)
    with pytest.raises(InconsistentCase):
        UncertainInjection(3, 0.0, 1.0, power_factor=0.0)


def test_nominal_point_inside_box(case14):
    xs = build_input_space(case14)
    x = nominal_point(case14, xs)
    assert xs.in_box(x)


def test_bundled_case_missing():
    with pytest.raises(FileNotFoundError):
        bundled_case("case9999")
