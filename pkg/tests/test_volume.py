import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qpat import (
    GridSpec,
    PhantomSpec,
    RegionShape,
    ScalarVolume,
    VolumeFormatError,
    load_phantom_json,
    rasterize_phantom,
    read_volume,
    sample_trilinear,
    save_phantom_json,
    write_volume,
)
from qpat.phantoms import four_sphere_phantom


def test_gridspec_validation():
    with pytest.raises(ValueError):
        GridSpec((1, 4, 4), (1, 1, 1))
    with pytest.raises(ValueError):
        GridSpec((4, 4, 4), (0.0, 1, 1))
    g = GridSpec((4, 5, 6), (0.5, 0.5, 0.5), (1, 2, 3))
    assert g.n_voxels == 120
    assert g.axis_centers(0)[0] == pytest.approx(1.25)


def test_scalar_volume_shape_and_finiteness():
    g = GridSpec((2, 3, 4), (1, 1, 1))
    with pytest.raises(ValueError):
        ScalarVolume(g, np.zeros((2, 3, 5)))
    with pytest.raises(ValueError):
        ScalarVolume(g, np.full((2, 3, 4), np.nan))
    flat = np.arange(24.0)
    vol = ScalarVolume(g, flat)
    assert np.array_equal(vol.flat(), flat)
    # x-fastest convention: consecutive flat entries advance x
    assert vol.values[1, 0, 0] == 1.0
    assert vol.values[0, 1, 0] == 2.0


def test_rasterize_uniform_background():
    g = GridSpec((6, 5, 4), (1, 1, 1))
    maps = rasterize_phantom(PhantomSpec(g, (0.1, 1.0, 1.0)))
    assert np.all(maps.mu.values == 0.1)
    assert np.all(maps.D.values == 1.0)
    assert np.all(maps.Gamma.values == 1.0)
    assert set(np.unique(maps.true_labels)) == {1}


def test_rasterize_four_sphere_benchmark_values():
    maps = rasterize_phantom(four_sphere_phantom(40))
    labels = maps.true_labels
    assert len(np.unique(labels)) == 5
    # each label carries exactly one parameter triple
    triples = set()
    for lab in np.unique(labels):
        sel = labels == lab
        mu = np.unique(maps.mu.values[sel])
        D = np.unique(maps.D.values[sel])
        G = np.unique(maps.Gamma.values[sel])
        assert len(mu) == len(D) == len(G) == 1
        triples.add((mu[0], D[0], G[0]))
    assert (0.2, 1.0, 1.0) in triples
    assert (1.0, 10.0, 0.01) in triples
    assert (0.1, 1.0, 1.0) in triples  # background


def test_rasterize_override_order():
    g = GridSpec((20, 10, 10), (0.5, 0.5, 0.5))
    s1 = RegionShape.sphere((4, 2.5, 2.5), 1.5)
    s2 = RegionShape.sphere((5.5, 2.5, 2.5), 1.5)
    spec = PhantomSpec(g, (0.1, 1, 1), inclusions=((s1, 0.2, 1, 1), (s2, 0.3, 1, 1)))
    maps = rasterize_phantom(spec)
    X, Y, Z = g.center_coords()
    overlap = s1.contains(np.stack([X, Y, Z], axis=-1)) & s2.contains(np.stack([X, Y, Z], axis=-1))
    assert overlap.any()
    assert np.all(maps.mu.values[overlap] == 0.3)


def test_rasterize_deterministic():
    spec = four_sphere_phantom(40)
    a = rasterize_phantom(spec)
    b = rasterize_phantom(spec)
    assert np.array_equal(a.true_labels, b.true_labels)
    assert np.array_equal(a.mu.values, b.mu.values)


def test_rasterize_every_voxel_carries_a_known_triple():
    spec = four_sphere_phantom(40)
    maps = rasterize_phantom(spec)
    known = {spec.background} | {(mu, D, G) for _, mu, D, G in spec.inclusions}
    got = set(
        zip(maps.mu.values.ravel(), maps.D.values.ravel(), maps.Gamma.values.ravel())
    )
    assert got <= known


def test_outside_inclusion_warns():
    g = GridSpec((4, 4, 4), (1, 1, 1))
    spec = PhantomSpec(
        g, (0.1, 1, 1), inclusions=((RegionShape.sphere((100, 100, 100), 1.0), 0.2, 1, 1),)
    )
    with pytest.warns(UserWarning, match="outside"):
        maps = rasterize_phantom(spec)
    assert set(np.unique(maps.true_labels)) == {1}


def test_roundtrip_zeros(tmp_path):
    g = GridSpec((2, 2, 2), (1, 1, 1))
    vol = ScalarVolume(g, np.zeros((2, 2, 2)))
    p = tmp_path / "z.qvol"
    write_volume(vol, p)
    back = read_volume(p)
    assert back.grid == g
    assert np.array_equal(back.values, vol.values)


def test_roundtrip_bit_exact(tmp_path):
    g = GridSpec((3, 2, 2), (0.1, 0.2, 0.3), (-1.5, 0.0, 2.25))
    vals = np.array(
        [1.5, -2.25, 1e-30, 1e308, -1e-308, 3.141592653589793, 0.1, 2.0, -0.0, 7.25, 1e-45, 42.0]
    )
    p = tmp_path / "v.qvol"
    write_volume(ScalarVolume(g, vals), p)
    back = read_volume(p)
    assert back.grid == g
    assert back.flat().tobytes() == vals.tobytes()
    # writing again produces identical bytes
    p2 = tmp_path / "v2.qvol"
    write_volume(back, p2)
    assert p.read_bytes() == p2.read_bytes()


@settings(max_examples=30, deadline=None)
@given(
    st.lists(
        st.floats(allow_nan=False, allow_infinity=False, width=64),
        min_size=8,
        max_size=8,
    )
)
def test_roundtrip_property(tmp_path_factory, values):
    g = GridSpec((2, 2, 2), (1, 1, 1))
    p = tmp_path_factory.mktemp("vols") / "h.qvol"
    write_volume(ScalarVolume(g, np.array(values)), p)
    assert read_volume(p).flat().tobytes() == np.array(values).tobytes()


def test_truncated_payload_error(tmp_path):
    g = GridSpec((2, 2, 2), (1, 1, 1))
    p = tmp_path / "t.qvol"
    write_volume(ScalarVolume(g, np.ones(8)), p)
    raw = p.read_bytes()
    p.write_bytes(raw[:-8])  # drop one voxel
    with pytest.raises(VolumeFormatError, match="payload length"):
        read_volume(p)


def test_bad_header_errors(tmp_path):
    p = tmp_path / "b.qvol"
    p.write_bytes(b"NOTMAGIC 2 2 2 1 1 1 0 0 0 float64\n" + b"\x00" * 64)
    with pytest.raises(VolumeFormatError):
        read_volume(p)
    p.write_bytes(b"QPATVOL1 2 2 2 1 1 1 0 0 0 float32\n" + b"\x00" * 64)
    with pytest.raises(VolumeFormatError, match="dtype"):
        read_volume(p)


def test_phantom_json_roundtrip(tmp_path):
    spec = four_sphere_phantom(40)
    p = tmp_path / "phantom.json"
    save_phantom_json(spec, p)
    back = load_phantom_json(p)
    assert back.grid == spec.grid
    assert back.background == spec.background
    assert len(back.inclusions) == len(spec.inclusions)
    for (sa, *pa), (sb, *pb) in zip(spec.inclusions, back.inclusions):
        assert sa.kind == sb.kind
        assert pa == pb
    # a documented schema: plain JSON with grid/background/inclusions keys
    doc = json.loads(p.read_text())
    assert set(doc) == {"grid", "background", "inclusions"}


def test_phantom_validation():
    g = GridSpec((4, 4, 4), (1, 1, 1))
    with pytest.raises(ValueError):
        PhantomSpec(g, (0.0, 1, 1))
    with pytest.raises(ValueError):
        RegionShape.sphere((0, 0, 0), -1.0)
    with pytest.raises(ValueError):
        RegionShape.box((0, 0, 0), (0, 1, 1))
    with pytest.raises(ValueError):
        RegionShape.halfspace((0, 0, 0), (0, 0, 0))


def test_sample_trilinear_linear_field():
    g = GridSpec((8, 8, 8), (0.5, 0.5, 0.5))
    X, Y, Z = g.center_coords()
    vol = 2.0 * X - Y + 0.5 * Z
    pts = np.array([[1.3, 2.1, 1.7], [2.0, 2.0, 2.0]])
    out = sample_trilinear(vol, g, pts)
    expect = 2.0 * pts[:, 0] - pts[:, 1] + 0.5 * pts[:, 2]
    assert np.allclose(out, expect, atol=1e-12)
