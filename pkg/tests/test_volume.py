import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from cacgan.phantom import PhantomSpec, generate_phantom
from cacgan.volume import (
    BinaryMask, Volume, VolumeFormatError, center_of_mass, hu_to_unit, normalize_slice,
    read_volume, resample, resample_like, unit_to_hu, write_volume,
)


def test_roundtrip_constant(tmp_path):
    v = Volume(np.zeros((4, 4, 4), np.int16), (1, 1, 1))
    write_volume(tmp_path / "a.vol", v)
    w = read_volume(tmp_path / "a.vol")
    assert np.array_equal(w.data, v.data) and w.spacing == v.spacing


def test_payload_size_mismatch(tmp_path):
    header = {"dims": [10, 10, 10], "spacing_mm": [1, 1, 1], "origin_mm": [0, 0, 0],
              "dtype": "int16", "byte_order": "little"}
    (tmp_path / "b.json").write_text(json.dumps(header))
    (tmp_path / "b.raw").write_bytes(np.zeros(999, "<i2").tobytes())
    with pytest.raises(VolumeFormatError):
        read_volume(tmp_path / "b.json")


def test_missing_file_and_bad_spacing(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_volume(tmp_path / "nothing.vol")
    header = {"dims": [1, 1, 1], "spacing_mm": [1, 0, 1], "origin_mm": [0, 0, 0], "dtype": "int16"}
    (tmp_path / "c.json").write_text(json.dumps(header))
    (tmp_path / "c.raw").write_bytes(np.zeros(1, "<i2").tobytes())
    with pytest.raises(VolumeFormatError):
        read_volume(tmp_path / "c.json")


def test_x_fastest_byte_layout(tmp_path):
    data = np.arange(24, dtype=np.int16).reshape(2, 3, 4)
    write_volume(tmp_path / "d.vol", Volume(data, (1, 1, 1)))
    raw = np.frombuffer((tmp_path / "d.vol.raw").read_bytes(), "<i2")
    assert raw[1] == data[1, 0, 0] and raw[2] == data[0, 1, 0]


def test_phantom_roundtrip_exact(tmp_path):
    v, _ = generate_phantom(PhantomSpec(seed=3))
    write_volume(tmp_path / "p.vol", v)
    assert np.abs(read_volume(tmp_path / "p.vol").data.astype(int) - v.data.astype(int)).max() == 0


@settings(max_examples=30, deadline=None)
@given(arrays(np.int16, st.tuples(*[st.integers(1, 5)] * 3)))
def test_roundtrip_property(tmp_path_factory, data):
    p = tmp_path_factory.mktemp("rt") / "x.vol"
    write_volume(p, Volume(data, (0.7, 0.8, 2.5), (1.0, -2.0, 3.0)))
    w = read_volume(p)
    assert np.array_equal(w.data, data) and w.origin == (1.0, -2.0, 3.0)


def test_resample_identity():
    rng = np.random.default_rng(0)
    v = Volume(rng.normal(size=(5, 6, 7)), (1.0, 1.0, 1.5))
    w = resample(v, v.spacing)
    assert w.shape == v.shape and np.abs(w.data - v.data).max() < 1e-6


@settings(max_examples=25, deadline=None)
@given(st.floats(0.3, 3.0), st.floats(0.3, 3.0), st.floats(0.3, 3.0), st.floats(-500, 500))
def test_resample_constant(sx, sy, sz, c):
    v = Volume(np.full((6, 5, 4), c), (1.0, 1.2, 2.0))
    w = resample(v, (sx, sy, sz))
    assert np.allclose(w.data, c)
    extent_in = np.array(v.shape) * v.spacing
    extent_out = np.array(w.shape) * w.spacing
    assert np.all(np.abs(extent_in - extent_out) <= np.array(w.spacing) / 2 + 1e-9)


def test_resample_ramp_halved_spacing():
    x = np.arange(10, dtype=float)
    v = Volume(np.broadcast_to(x[:, None, None], (10, 3, 3)).copy(), (2.0, 1.0, 1.0))
    w = resample(v, (1.0, 1.0, 1.0))
    inner = w.data[1:-1, 1, 1]
    # output centres sit at source index j/2 - 1/4
    assert np.allclose(np.diff(inner), 0.5)
    assert np.allclose(inner, np.arange(1, 19) / 2 - 0.25)


def test_resample_mask_nearest_and_errors():
    m = BinaryMask(np.zeros((4, 4, 4), bool), (1, 1, 1))
    m.data[1:3, 1:3, 1:3] = True
    w = resample(m, (0.5, 0.5, 0.5), "nearest")
    assert isinstance(w, BinaryMask) and w.data.sum() == 8 * 8
    back = resample_like(w, m, "nearest")
    assert np.array_equal(back.data, m.data)
    with pytest.raises(ValueError):
        resample(m, (1, 0, 1))


@pytest.mark.parametrize("hu,expected", [(-100, 0.0), (950, 1.0), (450, 0.5), (-50, 0.0), (2000, 1.0)])
def test_normalize_values(hu, expected):
    v = Volume(np.full((3, 3, 2), hu, np.int16), (1, 1, 1))
    s = normalize_slice(v, 1, (1, 1), side=3)
    assert np.allclose(s.data, expected)


def test_normalize_padding_and_index():
    v = Volume(np.full((4, 4, 2), 500, np.int16), (1, 1, 1))
    s = normalize_slice(v, 0, (0, 0), side=6)
    assert s.data.shape == (6, 6)
    assert np.isclose(s.data[0, 0], 0.05)  # 0 HU padding
    assert np.isclose(s.data[4, 4], 0.55)
    with pytest.raises(IndexError):
        normalize_slice(v, 2, (0, 0), side=4)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, 20, elements=st.floats(-2000, 3000)))
def test_normalize_monotone_and_inverse(hu):
    u = hu_to_unit(np.sort(hu))
    assert u.min() >= 0 and u.max() <= 1
    assert np.all(np.diff(u) >= 0)
    assert np.allclose(unit_to_hu(u), np.clip(np.sort(hu), -50, 950))


def test_center_of_mass_cases():
    m = np.zeros((6, 6, 6), bool)
    m[3, 4, 5] = True
    assert center_of_mass(BinaryMask(m, (1, 1, 1))) == (3, 4, 5)
    m = np.zeros((3, 1, 1), bool)
    m[0, 0, 0] = m[2, 0, 0] = True
    assert center_of_mass(BinaryMask(m, (1, 1, 1))) == (1, 0, 0)
    with pytest.raises(ValueError):
        center_of_mass(BinaryMask(np.zeros((2, 2, 2), bool), (1, 1, 1)))


def test_center_of_mass_phantom_brute_force():
    _, t = generate_phantom(PhantomSpec(seed=1))
    acc, n = np.zeros(3), 0
    for i, j, k in zip(*np.nonzero(t.heart_mask.data)):
        acc += (i, j, k)
        n += 1
    com = center_of_mass(t.heart_mask)
    assert np.allclose(com, acc / n, atol=1e-9)
    lo = np.argwhere(t.heart_mask.data).min(0)
    hi = np.argwhere(t.heart_mask.data).max(0)
    assert np.all(lo <= com) and np.all(com <= hi)


def test_volume_validation():
    with pytest.raises(ValueError):
        Volume(np.zeros((2, 2, 2)), (1, -1, 1))
    with pytest.raises(ValueError):
        Volume(np.zeros((0, 2, 2)), (1, 1, 1))
