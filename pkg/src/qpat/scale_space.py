"""Gaussian scale-space smoothing and finite-difference derivative fields.

Smoothing convolves with a sampled Gaussian of standard deviation ``sigma``
given in voxels, truncated at radius ``ceil(4 * sigma)`` and renormalized to
sum 1; boundaries are handled by edge replication. Derivatives are taken on
the smoothed volume with second-order central differences (one-sided at the
boundary) and are scaled by the physical spacing, so gradients and Hessians
are in physical units.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .volume import GridSpec, ScalarVolume

__all__ = ["ScaleSpaceField", "smooth", "derivatives", "gaussian_kernel"]

# hessian component ordering: (axis pairs)
HESSIAN_PAIRS = ((0, 0), (1, 1), (2, 2), (0, 1), (0, 2), (1, 2))


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Sampled, truncated, renormalized 1D Gaussian; ``[1.0]`` for sigma == 0."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return np.ones(1)
    radius = math.ceil(4.0 * sigma)
    x = np.arange(-radius, radius + 1, dtype=float)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def smooth(vol: ScalarVolume, sigma: float) -> ScalarVolume:
    """Separable Gaussian smoothing with edge replication; identity for sigma 0."""
    if sigma == 0:
        return vol
    k = gaussian_kernel(sigma)
    out = vol.values
    for axis in range(3):
        out = ndimage.correlate1d(out, k, axis=axis, mode="nearest")
    return ScalarVolume(vol.grid, out)


def _axis_second(values, axis, h):
    """Second derivative along one axis: central interior, one-sided at ends."""
    d2 = np.empty_like(values)
    s = [slice(None)] * 3

    def sl(i):
        s2 = list(s)
        s2[axis] = i
        return tuple(s2)

    v = values
    d2[sl(slice(1, -1))] = v[sl(slice(2, None))] - 2.0 * v[sl(slice(1, -1))] + v[sl(slice(None, -2))]
    d2[sl(0)] = v[sl(0)] - 2.0 * v[sl(1)] + v[sl(2)]
    d2[sl(-1)] = v[sl(-1)] - 2.0 * v[sl(-2)] + v[sl(-3)]
    return d2 / (h * h)


@dataclass(frozen=True)
class ScaleSpaceField:
    """Smoothed volume with precomputed gradient and Hessian fields.

    ``grad`` has shape (3, *dims); ``hessian`` has shape (6, *dims) ordered as
    xx, yy, zz, xy, xz, yz. Third directional derivatives are evaluated on
    demand by differencing the stored Hessian.
    """

    grid: GridSpec
    sigma: float
    f: np.ndarray
    grad: np.ndarray
    hessian: np.ndarray

    def smoothed_volume(self):
        return ScalarVolume(self.grid, self.f)

    def gradient_magnitude(self):
        return np.sqrt(np.sum(self.grad**2, axis=0))

    def laplacian(self):
        return self.hessian[0] + self.hessian[1] + self.hessian[2]

    def hessian_at(self, point_idx):
        i, j, k = point_idx
        H = np.empty((3, 3))
        for comp, (a, b) in enumerate(HESSIAN_PAIRS):
            H[a, b] = H[b, a] = self.hessian[comp][i, j, k]
        return H

    def directional_second_third(self, point_idx, v):
        """Contractions of the Hessian and third-derivative tensor with v.

        Returns ``(sum_ij v_i v_j d_ij f, sum_ijk v_i v_j v_k d_ijk f)`` at a
        voxel index. Third derivatives come from central differences of the
        Hessian volumes, so the point must be at least 2 voxels from every
        face of the grid.
        """
        v = np.asarray(v, dtype=float)
        if not np.linalg.norm(v) > 0:
            raise ValueError("direction v must be nonzero")
        i, j, k = (int(c) for c in point_idx)
        margin = 2
        for c, n in zip((i, j, k), self.grid.dims):
            if c < margin or c > n - 1 - margin:
                raise ValueError(f"point {point_idx} is within the {margin}-voxel boundary margin")

        second = float(v @ self.hessian_at((i, j, k)) @ v)

        third = 0.0
        idx = np.array([i, j, k])
        for axis in range(3):
            lo = idx.copy()
            hi = idx.copy()
            lo[axis] -= 1
            hi[axis] += 1
            Hhi = self.hessian_at(hi)
            Hlo = self.hessian_at(lo)
            dH = (Hhi - Hlo) / (2.0 * self.grid.spacing[axis])
            third += v[axis] * float(v @ dH @ v)
        return second, third


def derivatives(vol: ScalarVolume, sigma: float) -> ScaleSpaceField:
    """Smooth and differentiate: gradient plus symmetric Hessian in physical units."""
    if any(d < 5 for d in vol.grid.dims):
        raise ValueError("derivatives requires dims >= 5 per axis")
    sm = smooth(vol, sigma)
    f = sm.values
    h = vol.grid.spacing

    grad = np.stack([np.gradient(f, h[a], axis=a, edge_order=2) for a in range(3)])

    hess = np.empty((6,) + vol.grid.dims)
    for comp, (a, b) in enumerate(HESSIAN_PAIRS):
        if a == b:
            hess[comp] = _axis_second(f, a, h[a])
        else:
            hess[comp] = np.gradient(grad[a], h[b], axis=b, edge_order=2)
    return ScaleSpaceField(grid=vol.grid, sigma=float(sigma), f=f, grad=grad, hessian=hess)
