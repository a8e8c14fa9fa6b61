import json

import numpy as np
import pytest

from pencilbeam.io import FormatError, dump_json, field_to_pbg1, histogram_to_pbg1, read_pbg1, write_pbg1
from pencilbeam.kernels import MediumProfile, ScatteringParams
from pencilbeam.pencil_beam import AxisProfiles, fundamental_J, natural_grid
from pencilbeam.rte_mc import BoxCapSource, HistogramSpec, simulate


def test_round_trip_preserves_every_slice(tmp_path, rng):
    slices = [(0.5 * k + 0.25, rng.normal(size=4), rng.normal(size=4), rng.normal(size=(3, 2, 5, 4)))
              for k in range(3)]
    path = tmp_path / "g.pbg1"
    write_pbg1(path, 3, slices)
    d, back = read_pbg1(path)
    assert d == 3 and len(back) == 3
    for (z, lo, hi, v), (z2, lo2, hi2, v2) in zip(slices, back):
        assert z == z2 and np.array_equal(lo, lo2) and np.array_equal(hi, hi2) and np.array_equal(v, v2)


def test_header_layout(tmp_path):
    path = tmp_path / "g.pbg1"
    write_pbg1(path, 2, [(1.0, [0.0, 0.0], [1.0, 1.0], np.zeros((3, 5)))])
    raw = path.read_bytes()
    assert raw[:4] == b"PBG1"
    assert np.frombuffer(raw, "<u4", 4, 4).tolist() == [2, 3, 5, 1]
    assert len(raw) == 4 + 16 + 8 + 32 + 8 * 15


def test_malformed_files_are_rejected(tmp_path):
    path = tmp_path / "g.pbg1"
    write_pbg1(path, 2, [(1.0, [0.0, 0.0], [1.0, 1.0], np.zeros((2, 2)))])
    raw = path.read_bytes()
    (tmp_path / "bad.pbg1").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FormatError):
        read_pbg1(tmp_path / "bad.pbg1")
    (tmp_path / "long.pbg1").write_bytes(raw + b"\0")
    with pytest.raises(FormatError):
        read_pbg1(tmp_path / "long.pbg1")


def test_writer_validates_shapes(tmp_path):
    with pytest.raises(FormatError):
        write_pbg1(tmp_path / "a", 3, [(1.0, [0] * 4, [1] * 4, np.zeros((2, 2)))])
    with pytest.raises(FormatError):
        write_pbg1(tmp_path / "b", 2, [(1.0, [0, 0], [1, 1], np.zeros((2, 2))),
                                       (2.0, [0, 0], [1, 1], np.zeros((3, 2)))])
    with pytest.raises(FormatError):
        write_pbg1(tmp_path / "c", 2, [])


def test_beam_field_export(tmp_path):
    field = fundamental_J([0.5, 1.0], lambda t: natural_grid(t, 0.75, 1.0, 1, 64, 32, 20.0, 20.0),
                          AxisProfiles.constant(1.0), 0.75, d=2, tail_tol=1.0)
    field_to_pbg1(tmp_path / "J.pbg1", field)
    d, back = read_pbg1(tmp_path / "J.pbg1")
    assert d == 2 and [b[0] for b in back] == [0.5, 1.0]
    for sl, (_, lo, hi, vals) in zip(field.slices, back):
        axes = sl.grid.axes()
        assert np.allclose(lo, [a[0] for a in axes]) and np.allclose(hi, [a[-1] for a in axes])
        assert np.array_equal(vals, sl.values)


def test_histogram_export_has_one_slice_per_depth_bin(tmp_path):
    spec = HistogramSpec((np.linspace(-1, 1, 3), np.linspace(0, 1, 4)), (np.linspace(-0.5, 0.5, 5),))
    src = BoxCapSource(np.array([-0.1, 0.0]), np.array([0.1, 0.1]), 0.2)
    params = ScatteringParams.narrow_beam(0.9, 0.5, 1.0, 0.2, 2)
    res = simulate(src, MediumProfile(), params, 500, spec, seed=0, n_batches=2)
    histogram_to_pbg1(tmp_path / "h.pbg1", res)
    d, back = read_pbg1(tmp_path / "h.pbg1")
    assert d == 2 and len(back) == 3
    assert np.allclose([b[0] for b in back], [1 / 6, 0.5, 5 / 6])
    total = sum(v.sum() for *_, v in back)
    assert total == pytest.approx(res.mass, rel=1e-12)


def test_histogram_export_requires_uniform_bins(tmp_path):
    spec = HistogramSpec((np.array([-1, 0, 2.0]), np.linspace(0, 1, 3)), (np.linspace(-0.5, 0.5, 3),))
    src = BoxCapSource(np.array([-0.1, 0.0]), np.array([0.1, 0.1]), 0.2)
    res = simulate(src, MediumProfile(), None, 100, spec, seed=0, n_batches=2)
    with pytest.raises(FormatError):
        histogram_to_pbg1(tmp_path / "h.pbg1", res)


def test_json_dump_handles_numpy_values(tmp_path):
    path = tmp_path / "m.json"
    dump_json(path, {"b": np.float64(0.5), "a": np.arange(3), "c": (np.int64(2), True)})
    text = path.read_text()
    assert json.loads(text) == {"a": [0, 1, 2], "b": 0.5, "c": [2, True]}
    assert text.index('"a"') < text.index('"b"')
