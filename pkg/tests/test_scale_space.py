import math

import numpy as np
import pytest

from qpat import GridSpec, ScalarVolume
from qpat.scale_space import derivatives, gaussian_kernel, smooth


def _grid(n, h=1.0, origin=0.0):
    return GridSpec((n, n, n), (h, h, h), (origin,) * 3)


def test_smooth_sigma_zero_is_identity():
    g = _grid(8)
    vals = np.random.default_rng(0).normal(size=(8, 8, 8))
    vol = ScalarVolume(g, vals)
    assert smooth(vol, 0.0) is vol


def test_smooth_preserves_constants():
    g = _grid(16)
    vol = ScalarVolume(g, np.full((16, 16, 16), 3.7))
    out = smooth(vol, 2.0)
    assert np.max(np.abs(out.values - 3.7)) <= 1e-14 * 3.7


def test_smooth_dirac_matches_sampled_kernel():
    n = 33
    g = _grid(n)
    vals = np.zeros((n, n, n))
    c = n // 2
    vals[c, c, c] = 1.0
    out = smooth(ScalarVolume(g, vals), 2.0).values
    k = gaussian_kernel(2.0)
    r = len(k) // 2
    expect = np.zeros_like(vals)
    sl = slice(c - r, c + r + 1)
    expect[sl, sl, sl] = k[:, None, None] * k[None, :, None] * k[None, None, :]
    assert np.max(np.abs(out - expect)) <= 1e-4 * out.max()


def test_kernel_truncation_and_normalization():
    k = gaussian_kernel(1.5)
    assert len(k) == 2 * math.ceil(4 * 1.5) + 1
    assert k.sum() == pytest.approx(1.0, abs=1e-15)


def test_derivatives_linear_ramp_exact():
    g = _grid(12, h=0.5)
    X, _, _ = g.center_coords()
    field = derivatives(ScalarVolume(g, X), sigma=0.0)
    interior = (slice(1, -1),) * 3
    assert np.max(np.abs(field.grad[0][interior] - 1.0)) <= 1e-10
    assert np.max(np.abs(field.grad[1][interior])) <= 1e-10
    assert np.max(np.abs(field.hessian[:, 1:-1, 1:-1, 1:-1])) <= 1e-10


def test_derivatives_quadratic_exact():
    g = _grid(12, h=0.25)
    X, _, _ = g.center_coords()
    field = derivatives(ScalarVolume(g, X**2), sigma=0.0)
    assert np.max(np.abs(field.hessian[0][1:-1, :, :] - 2.0)) <= 1e-8


def test_derivative_error_matches_taylor_remainder():
    # central difference error for f(x)=sin(x) is h^2/6 * max|f'''|
    h = 0.1
    g = _grid(24, h=h)
    X, _, _ = g.center_coords()
    field = derivatives(ScalarVolume(g, np.sin(X)), sigma=0.0)
    interior = (slice(2, -2),) * 3
    err = np.abs(field.grad[0] - np.cos(X))[interior].max()
    assert err <= 1.2 * h**2 / 6.0
    assert err >= 0.2 * h**2 / 6.0  # the bound is tight, not vacuous


def test_directional_contractions():
    g = _grid(12, h=0.5)
    X, _, _ = g.center_coords()
    fx2 = derivatives(ScalarVolume(g, X**2), sigma=0.0)
    second, third = fx2.directional_second_third((6, 6, 6), (1, 0, 0))
    assert second == pytest.approx(2.0, abs=1e-9)
    assert third == pytest.approx(0.0, abs=1e-9)

    fx3 = derivatives(ScalarVolume(g, X**3), sigma=0.0)
    # interior voxel: d2 = 6x there, d3 = 6 everywhere
    i = 5
    x_i = g.axis_centers(0)[i]
    second, third = fx3.directional_second_third((i, 6, 6), (1, 0, 0))
    assert second == pytest.approx(6.0 * x_i, rel=1e-6)
    assert third == pytest.approx(6.0, rel=1e-6)


def test_directional_parity():
    g = _grid(12, h=0.5)
    X, Y, _ = g.center_coords()
    f = derivatives(ScalarVolume(g, X**2 * Y + Y**2), sigma=0.0)
    v = np.array([0.3, -0.7, 0.64])
    s1, t1 = f.directional_second_third((6, 6, 6), v)
    s2, t2 = f.directional_second_third((6, 6, 6), -v)
    assert s1 == pytest.approx(s2, rel=1e-12)
    assert t1 == pytest.approx(-t2, rel=1e-12)


def test_directional_margin_error():
    g = _grid(10)
    f = derivatives(ScalarVolume(g, np.zeros((10, 10, 10))), sigma=0.0)
    with pytest.raises(ValueError, match="margin"):
        f.directional_second_third((1, 5, 5), (1, 0, 0))
    with pytest.raises(ValueError, match="nonzero"):
        f.directional_second_third((5, 5, 5), (0, 0, 0))


def test_semigroup_property():
    # band-limited input: a broad Gaussian blob
    n = 48
    g = _grid(n)
    X, Y, Z = g.center_coords()
    c = (n - 1) / 2.0 + 0.5
    blob = np.exp(-((X - c) ** 2 + (Y - c) ** 2 + (Z - c) ** 2) / (2 * 36.0))
    vol = ScalarVolume(g, blob)
    a = smooth(smooth(vol, 1.5), 2.0).values
    b = smooth(vol, math.sqrt(1.5**2 + 2.0**2)).values
    assert np.max(np.abs(a - b)) <= 1e-3 * b.max()


def test_axis_permutation_equivariance():
    rng = np.random.default_rng(3)
    vals = rng.normal(size=(14, 14, 14))
    g = _grid(14)
    out = smooth(ScalarVolume(g, vals), 1.2).values
    for perm in ((1, 0, 2), (2, 1, 0), (1, 2, 0)):
        out_p = smooth(ScalarVolume(g, vals.transpose(perm)), 1.2).values
        diff = np.abs(out_p - out.transpose(perm))
        assert diff.max() <= 4 * np.finfo(float).eps * np.abs(out).max()


def test_derivative_linearity():
    rng = np.random.default_rng(5)
    g = _grid(12)
    f1 = rng.normal(size=(12, 12, 12))
    f2 = rng.normal(size=(12, 12, 12))
    a, b = 2.5, -1.25
    da = derivatives(ScalarVolume(g, f1), 1.0)
    db = derivatives(ScalarVolume(g, f2), 1.0)
    dc = derivatives(ScalarVolume(g, a * f1 + b * f2), 1.0)
    assert np.allclose(dc.grad, a * da.grad + b * db.grad, atol=1e-12)
    assert np.allclose(dc.hessian, a * da.hessian + b * db.hessian, atol=1e-12)


def test_derivatives_requires_min_dims():
    g = GridSpec((4, 8, 8), (1, 1, 1))
    with pytest.raises(ValueError):
        derivatives(ScalarVolume(g, np.zeros((4, 8, 8))), 1.0)
