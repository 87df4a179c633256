import re

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lfcal import io
from lfcal.calibration import LightFieldCalibration, PatternObservation, ViewCalibration
from lfcal.errors import DimensionMismatch, EmptyInput, InputError, ParseError
from lfcal.geometry import IntrinsicMatrix, RadialDistortion, ViewGrid, ViewPose
from lfcal.rectification import LookupTable, build_luts, rectified_projections
from lfcal.synthetic import NoiseSpec, jitter_intrinsics, make_rig, perturb_rig

finite = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)


@pytest.fixture(scope="module")
def calib():
    rig = make_rig(ViewGrid(2, 3, 1, 1), (320, 240), 300.0, 0.03)
    rig = jitter_intrinsics(rig, 3.0, 2.0, k1=-0.04, k2=0.01, seed=1)
    rig = perturb_rig(rig, NoiseSpec(0.01, 0.001, seed=2))
    c = rig.calibration()
    views = [ViewCalibration(v.K, v.d, 0.1 + 0.01 * i) for i, v in enumerate(c.per_view)]
    return LightFieldCalibration(c.grid, views, c.poses_rel_reference, 0.2345678901234567, c.image_size, tuple(0.3 + i / 7 for i in range(6)))


def assert_same_calibration(a, b):
    assert a.grid == b.grid and tuple(a.image_size) == tuple(b.image_size)
    assert a.rms_pnp == b.rms_pnp and tuple(a.rms_pnp_per_view) == tuple(b.rms_pnp_per_view)
    for va, vb in zip(a.per_view, b.per_view):
        assert va.K == vb.K and va.d == vb.d and va.rms_mono == vb.rms_mono
    assert tuple(a.poses_rel_reference) == tuple(b.poses_rel_reference)


# ----- Calibration files ---------------------------------------------------


def test_calibration_round_trip_is_lossless(calib, tmp_path):
    rect = rectified_projections(calib)
    path = tmp_path / "a.cal"
    io.write_calibration(path, calib, rect)
    doc = io.read_calibration(path)
    assert_same_calibration(doc.calibration, calib)
    r = doc.rectification
    assert r.K_r == rect.K_r and np.array_equal(r.r_r, rect.r_r) and r.t_r == rect.t_r
    for a, b in zip(r.per_view_P, rect.per_view_P):
        assert np.array_equal(a, b)
    # write(read(x)) is a fixed point at the byte level
    io.write_calibration(tmp_path / "b.cal", doc.calibration, doc.rectification)
    assert (tmp_path / "b.cal").read_bytes() == path.read_bytes()


def test_calibration_without_rectification(calib):
    doc = io.parse_calibration(io.format_calibration(calib))
    assert doc.rectification is None
    assert_same_calibration(doc.calibration, calib)


@given(st.lists(finite, min_size=6, max_size=6), st.lists(st.floats(1.0, 5000.0), min_size=2, max_size=2))
@settings(max_examples=100, deadline=None)
def test_calibration_values_survive_text(tv, f):
    g = ViewGrid(1, 2, 0, 0)
    K = IntrinsicMatrix(f[0], f[1], tv[0], tv[1], tv[2] * 1e-6)
    d = RadialDistortion(tv[3] * 1e-13, tv[4] * 1e-20, tv[0], tv[1])
    c = LightFieldCalibration(g, [ViewCalibration(K, d, 0.1)] * 2, [ViewPose.zero(), ViewPose([tv[5] * 1e-7, 0, 1e-300], tv[3:6])], image_size=(10, 10))
    assert_same_calibration(io.parse_calibration(io.format_calibration(c)).calibration, c)


def test_calibration_parse_errors(calib):
    text = io.format_calibration(calib)
    with pytest.raises(ParseError, match="fx"):
        io.parse_calibration(text.replace("fx ", "fz ", 1))
    with pytest.raises(ParseError, match="version"):
        io.parse_calibration(text.replace("format_version 1", "format_version 9"))
    with pytest.raises(ParseError, match="end of file"):
        io.parse_calibration("\n".join(text.splitlines()[:30]))
    with pytest.raises(ParseError, match="non-finite"):
        io.parse_calibration(re.sub(r"^cx .*$", "cx nan", text, count=1, flags=re.M))
    lines = text.splitlines()
    k = next(i for i, l in enumerate(lines) if l.startswith("rvec") and not l.endswith(" 0 0 0") and i > 20)
    with pytest.raises(ParseError, match="rvec"):
        io.parse_calibration("\n".join(lines[:k] + ["rvec 1 2"] + lines[k + 1 :]))
    with pytest.raises(InputError):
        io.read_calibration("/nonexistent/file.cal")


# ----- Observations and tracks ---------------------------------------------


def test_observation_round_trip(tmp_path, small_dataset):
    _, _, obs = small_dataset
    path = tmp_path / "obs.txt"
    io.write_observations(path, obs)
    back = io.read_observations(path, 54, 4)
    key = lambda o: (o.frame_index, o.view_index)
    for a, b in zip(sorted(obs, key=key), back):
        assert key(a) == key(b) and np.array_equal(a.corners, b.corners)


def test_observation_parse_errors():
    with pytest.raises(EmptyInput):
        io.parse_observations("# nothing\n\n")
    with pytest.raises(ParseError, match=":2:"):
        io.parse_observations("0 0 0 1 2\n0 0 1 x 2\n")
    with pytest.raises(ParseError, match="duplicate"):
        io.parse_observations("0 0 0 1 2\n0 0 0 1 2\n")
    with pytest.raises(ParseError, match="out of range"):
        io.parse_observations("0 5 0 1 2\n", n_views=4)
    with pytest.raises(ParseError, match="frame 0, view 0"):
        io.parse_observations("0 0 0 1 2\n0 0 2 1 2\n")


@given(st.dictionaries(st.integers(0, 10_000), st.dictionaries(st.integers(0, 24), st.tuples(finite, finite), min_size=1, max_size=5), min_size=1, max_size=20))
@settings(max_examples=60, deadline=None)
def test_track_round_trip(tracks):
    assert io.parse_tracks(io.format_tracks(tracks)) == tracks


def test_track_parse_errors():
    with pytest.raises(EmptyInput):
        io.parse_tracks("")
    with pytest.raises(ParseError, match="duplicate"):
        io.parse_tracks("1 0 1 1\n1 0 2 2\n")
    with pytest.raises(ParseError):
        io.parse_tracks("1 0 1\n")
    with pytest.raises(ParseError, match="non-finite"):
        io.parse_tracks("1 0 inf 1\n")


# ----- LUT files -----------------------------------------------------------


def test_lut_file_size_and_round_trip(calib, tmp_path):
    lut = build_luts(calib, rectified_projections(calib))[2]
    data = io.lut_bytes(lut)
    assert len(data) == 14 + 8 * lut.width * lut.height
    assert data[:6] == b"LFLUT1"
    back = io.lut_from_bytes(data)
    assert np.array_equal(back.map, lut.map.astype(np.float32))
    assert io.lut_bytes(back) == data
    io.write_lut(tmp_path / "v.lut", lut)
    assert io.read_lut(tmp_path / "v.lut") == back
    assert np.all(back.map[~lut.valid] == -1)


def test_lut_rejects_bad_files():
    data = io.lut_bytes(LookupTable.identity(4, 3))
    with pytest.raises(ParseError, match="magic"):
        io.lut_from_bytes(b"XXXXXX" + data[6:])
    with pytest.raises(ParseError, match="bytes"):
        io.lut_from_bytes(data[:-1])
    with pytest.raises(ParseError):
        io.lut_from_bytes(b"LF")


# ----- Images --------------------------------------------------------------


@pytest.mark.parametrize("shape,dtype", [((7, 5), np.uint8), ((7, 5), np.uint16), ((4, 6, 3), np.uint8), ((4, 6, 3), np.uint16)])
def test_image_round_trip(shape, dtype, tmp_path):
    img = np.random.default_rng(0).integers(0, np.iinfo(dtype).max, shape, endpoint=True).astype(dtype)
    io.write_image(tmp_path / "x.pnm", img)
    back = io.read_image(tmp_path / "x.pnm")
    assert back.dtype == dtype and np.array_equal(back, img)


def test_ascii_images_and_comments():
    pgm = b"P2\n# a comment\n3 2\n# another\n255\n0 1 2\n3 4 255\n"
    assert np.array_equal(io.image_from_bytes(pgm), [[0, 1, 2], [3, 4, 255]])
    ppm = b"P3 1 1 65535 1 2 65535"
    assert np.array_equal(io.image_from_bytes(ppm), [[[1, 2, 65535]]])
    raw = b"P5 2 1 255\n" + bytes([10, 32])
    assert np.array_equal(io.image_from_bytes(raw), [[10, 32]])


def test_image_errors():
    with pytest.raises(ParseError):
        io.image_from_bytes(b"P7 1 1 255\n\0")
    with pytest.raises(ParseError, match="truncated"):
        io.image_from_bytes(b"P5 4 4 255\n\0\0")
    with pytest.raises(ParseError, match="maxval"):
        io.image_from_bytes(b"P2 1 1 10 11")
    with pytest.raises(DimensionMismatch):
        io.image_bytes(np.zeros((2, 2, 2)))


# ----- Atomic writes -------------------------------------------------------


def test_atomic_write_leaves_no_temporaries(tmp_path):
    io.atomic_write(tmp_path / "sub" / "f.txt", "hello")
    assert (tmp_path / "sub" / "f.txt").read_text() == "hello"
    assert [p.name for p in (tmp_path / "sub").iterdir()] == ["f.txt"]
    io.write_json(tmp_path / "j.json", {"b": 1, "a": [1.5]})
    assert io.read_json(tmp_path / "j.json") == {"a": [1.5], "b": 1}
