import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gridforge.certify import Polytope
from gridforge.errors import EmptyPolytope
from gridforge.dataset import DatasetRecord, export_dataset, import_dataset
from gridforge.netmodel import bundled_case, build_input_space, parse_case
from gridforge.qcrelax import envelope_violation
from gridforge.seeding import derive_seed

XS = build_input_space(parse_case(bundled_case("case14")))
finite = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)
unit = st.floats(0.0, 1.0)


@given(arrays(float, XS.n, elements=unit))
def test_normalize_inverts_denormalize(u):
    u = np.where(XS.frozen, 0.0, u)
    assert np.allclose(XS.normalize(XS.denormalize(u)), u, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.lists(arrays(float, 3, elements=finite), min_size=1, max_size=5), st.booleans())
def test_dataset_round_trip(tmp_path_factory, rows, secure):
    path = tmp_path_factory.mktemp("prop") / "d.csv"
    recs = [DatasetRecord(r * 0.5, r, "secure" if secure else "insecure", "mvn_direct", None, f"mvn:{i}")
            for i, r in enumerate(rows)]
    export_dataset(recs, path, ["a", "b", "c"])
    _, back = import_dataset(path)
    assert all(a.same_as(b) for a, b in zip(recs, back))


@given(st.integers(0, 2**64 - 1), st.lists(st.integers(0, 100), max_size=4))
def test_seed_derivation_is_a_pure_64_bit_function(master, path):
    s = derive_seed(master, *path)
    assert s == derive_seed(master, *path)
    assert 0 <= s < 2**64


@settings(max_examples=50, deadline=None)
@given(arrays(float, 2, elements=st.floats(0.05, 0.95)), arrays(float, 2, elements=st.floats(-0.3, 0.3)))
def test_cut_keeps_the_projection_and_drops_the_probe(x_star, step):
    if np.linalg.norm(step) < 1e-3:
        return
    x_hat = x_star - step
    P = Polytope.box([0.0, 0.0], [1.0, 1.0])
    try:
        P.add_cut(x_hat, x_star)
    except EmptyPolytope:
        return
    assert P.max_violation(x_star) <= 1e-12
    assert P.max_violation(x_hat) > 0


@settings(max_examples=100, deadline=None)
@given(st.floats(0.85, 1.0), st.floats(0.85, 1.0), st.floats(0.01, 0.25), st.floats(0.01, 0.25),
       st.floats(-1.4, 1.4), st.floats(0.01, 1.0), st.integers(0, 2**32 - 1))
def test_envelopes_are_valid(vl_i, vl_j, di, dj, lo, width, seed):
    hi = min(lo + width, 1.5)
    rng = np.random.default_rng(seed)
    vi = rng.uniform(vl_i, vl_i + di, 50)
    vj = rng.uniform(vl_j, vl_j + dj, 50)
    phi = rng.uniform(lo, hi, 50)
    assert envelope_violation(vi, vj, phi, vl_i, vl_i + di, vl_j, vl_j + dj, lo, hi).max() <= 1e-9
