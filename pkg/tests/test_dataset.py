import numpy as np
import pytest

from gridforge.dataset import DatasetRecord, deduplicate, export_dataset, import_dataset, secure_share
from gridforge.netmodel import build_input_space


def _rec(x, label="secure", stage="boundary_direct", worst=None, lineage="boundary:0"):
    x = np.asarray(x, dtype=float)
    return DatasetRecord(x / 2, x, label, stage, worst, lineage)


def test_round_trip_is_exact(tmp_path):
    rng = np.random.default_rng(0)
    recs = [
        _rec(rng.random(3)),
        _rec(rng.random(3), "insecure", "boundary_infeasible", ("v_bound", 2, 0.0123456789), "boundary:1"),
        _rec([1e-300, 1 / 3, 2.0**-40], "secure", "mvn_q_adjusted", None, "mvn:0"),
        _rec(rng.random(3), "insecure", "mvn_out_of_box", ("out_of_box", 1, float("nan")), "mvn:1"),
    ]
    path = export_dataset(recs, tmp_path / "d.csv", ["a", "b", "c"])
    names, back = import_dataset(path)
    assert names == ["a", "b", "c"]
    assert len(back) == len(recs)
    assert all(a.same_as(b) for a, b in zip(recs, back))


def test_file_layout(tmp_path):
    recs = [_rec([0.1, 0.2]), _rec([0.3, 0.4], "insecure", "boundary_infeasible", ("flow", 1, 0.5))]
    path = export_dataset(recs, tmp_path / "d.csv", ["p", "v"])
    raw = path.read_bytes()
    assert b"\r" not in raw
    lines = raw.decode().splitlines()
    assert len(lines) == 3
    assert lines[0] == "p,v,x_phys_p,x_phys_v,label,stage,worst_kind,worst_contingency,worst_magnitude,lineage"
    assert lines[1].split(",")[4:6] == ["1", "boundary_direct"]
    assert lines[2].split(",")[4:9] == ["0", "boundary_infeasible", "flow", "1", "0.5"]
    assert lines[1].split(",")[0] == "0.050000000000000003"


def test_minimal_columns_need_the_input_space(tmp_path, toy3):
    xs = build_input_space(toy3)
    x = (xs.x_min + xs.x_max) / 2
    recs = [DatasetRecord.from_physical(xs, x, "secure", "mvn_direct")]
    path = export_dataset(recs, tmp_path / "d.csv", xs.names, physical=False, details=False)
    assert path.read_text().splitlines()[0].endswith("label,stage")
    with pytest.raises(ValueError):
        import_dataset(path)
    _, back = import_dataset(path, xs)
    assert np.allclose(back[0].x_physical, x, rtol=1e-15, atol=1e-15)


def test_deduplicate_keeps_first_per_label():
    a = _rec([0.1, 0.2], lineage="first")
    b = _rec([0.1 + 1e-12, 0.2], lineage="second")
    c = _rec([0.1, 0.2], "insecure", "boundary_infeasible")
    d = _rec([0.1 + 1e-6, 0.2])
    out = deduplicate([a, b, c, d])
    assert [r.lineage for r in out] == ["first", "boundary:0", "boundary:0"]
    assert out[1].label == "insecure"


def test_validation_and_share():
    with pytest.raises(ValueError):
        _rec([0.1], label="maybe")
    with pytest.raises(ValueError):
        _rec([0.1], stage="other")
    recs = [_rec([0.1]), _rec([0.2], "insecure", "mvn_infeasible"), _rec([0.3])]
    assert secure_share(recs) == pytest.approx(2 / 3)
    assert np.isnan(secure_share([]))
