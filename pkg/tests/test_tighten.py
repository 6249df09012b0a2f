import numpy as np
import pytest

from gridforge.acpf import solve_all
from gridforge.netmodel import build_input_space
from gridforge.tighten import TightenedBounds, box_volume, obbt_pass, tighten

from conftest import supply_net


@pytest.fixture(scope="module")
def case14_passes(case14):
    tb0 = TightenedBounds.initial(case14)
    tb1 = obbt_pass(case14, tb0)
    tb2 = obbt_pass(case14, tb1)
    return tb0, tb1, tb2


def test_untightened_box_has_unit_volume(case14):
    tb = TightenedBounds.initial(case14)
    assert tb.v_bt == 1.0
    assert box_volume(build_input_space(case14)) == 1.0


def test_passes_are_monotone(case14_passes):
    for a, b in zip(case14_passes, case14_passes[1:]):
        assert np.all(b.v_min >= a.v_min) and np.all(b.v_max <= a.v_max)
        assert np.all(b.theta_min >= a.theta_min) and np.all(b.theta_max <= a.theta_max)
        assert np.all(b.x_bt_min >= a.x_bt_min) and np.all(b.x_bt_max <= a.x_bt_max)
        assert b.v_bt <= a.v_bt
        assert b.iterations_used == a.iterations_used + 1


def test_bounds_contain_secure_points(case14, case14_passes, case14_secure):
    tb = case14_passes[-1]
    a = case14.arrays
    for x in case14_secure:
        assert np.all(x >= tb.x_bt_min - 1e-9) and np.all(x <= tb.x_bt_max + 1e-9)
        intact = solve_all(case14, x)[0]
        vm = np.abs(intact.voltage)
        assert np.all(vm >= tb.v_min - 1e-9) and np.all(vm <= tb.v_max + 1e-9)
        va = np.angle(intact.voltage)
        dth = va[a.f] - va[a.t]
        assert np.all(dth >= tb.theta_min - 1e-9) and np.all(dth <= tb.theta_max + 1e-9)


def test_line_rating_caps_the_generator():
    # 100 MW load at the slack bus: the remote unit must supply at least 50 MW
    # (slack cap).  Lossless line: the reactive loss x |S|^2 / V^2 is split
    # evenly between the ends at the optimum, with both voltages at 1.1 pu.
    net = supply_net(at_slack=True, rate=60.0)
    tb = tighten(net, max_iters=2)
    (p2,) = tb.xs.p_slice
    s, x, vmax = 0.6, 0.05, 1.1
    p_max = np.sqrt(s**2 - (x * s**2 / (2 * vmax**2)) ** 2)
    assert tb.x_bt_min[p2] == pytest.approx(0.5, abs=1e-5)
    assert tb.x_bt_max[p2] == pytest.approx(p_max, abs=1e-5)
    assert tb.x_bt_min[p2] <= 0.5 and tb.x_bt_max[p2] >= p_max


def test_fixpoint_stops_early():
    net = supply_net(at_slack=True, rate=60.0)
    tb = tighten(net, max_iters=10)
    assert tb.iterations_used < 10


def test_save_load_round_trip(tmp_path, case14_passes, case14):
    tb = case14_passes[1]
    path = tmp_path / "bounds.json"
    tb.save(path)
    back = TightenedBounds.load(case14, path)
    for name in ("v_min", "v_max", "theta_min", "theta_max", "x_bt_min", "x_bt_max"):
        assert np.array_equal(getattr(back, name), getattr(tb, name))
    assert back.iterations_used == tb.iterations_used
    assert back.v_bt == tb.v_bt
