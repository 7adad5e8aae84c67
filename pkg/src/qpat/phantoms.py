"""Ready-made phantoms used by the demos and the validation suite.

The four-sphere benchmark lives in a 20 x 10 x 10 box. Sphere placement
matters: the sphere whose only contrast is in the diffusion coefficient is
kept away from symmetry planes of the fluence so its boundary is nowhere
tangential to the fluence gradient (a tangential gradient makes a diffusion
jump invisible in the gradient data with a single illumination).

Per-region parameters (mu, D, Gamma):

  ==========  =====  =====  ======  ========================================
  region      mu     D      Gamma   visibility
  ==========  =====  =====  ======  ========================================
  background  0.1    1      1
  sphere 1    0.2    1      1       jump of Gamma*mu -> visible in H
  sphere 2    0.1    0.25   1       jump of D only -> visible in |grad H|
  sphere 3    0.01   1      10      jump of mu/D only -> visible in |lap H|
  sphere 4    1      10     0.01    jumps everywhere; small and extreme
  ==========  =====  =====  ======  ========================================
"""

from __future__ import annotations

from .volume import GridSpec, PhantomSpec, RegionShape

__all__ = [
    "four_sphere_phantom",
    "contrast_pair_phantom",
    "noise_benchmark_phantom",
    "half_space_phantom",
]


def four_sphere_phantom(resolution: int = 160) -> PhantomSpec:
    """The four-sphere benchmark on a ``resolution x resolution/2 x resolution/2`` grid.

    ``resolution`` is the voxel count along the long (x) axis of the
    20 x 10 x 10 box; 160 gives 0.125 spacing.
    """
    n = int(resolution)
    if n % 2:
        raise ValueError("resolution must be even")
    h = 20.0 / n
    grid = GridSpec((n, n // 2, n // 2), (h, h, h))
    return PhantomSpec(
        grid=grid,
        background=(0.1, 1.0, 1.0),
        inclusions=(
            (RegionShape.sphere((3.2, 5.0, 5.0), 1.8), 0.2, 1.0, 1.0),
            (RegionShape.sphere((8.6, 3.4, 5.0), 2.0), 0.1, 0.25, 1.0),
            (RegionShape.sphere((13.6, 6.2, 5.0), 2.0), 0.01, 1.0, 10.0),
            (RegionShape.sphere((17.6, 4.2, 5.0), 1.4), 1.0, 10.0, 0.01),
        ),
    )


def contrast_pair_phantom(dims=(64, 32, 32), spacing=0.25) -> PhantomSpec:
    """Two spheres (one absorption jump, one diffusion jump) for quick runs."""
    grid = GridSpec(dims, (spacing,) * 3)
    return PhantomSpec(
        grid=grid,
        background=(0.1, 1.0, 1.0),
        inclusions=(
            (RegionShape.sphere((4.0, 4.0, 4.0), 1.8), 0.2, 1.0, 1.0),
            (RegionShape.sphere((11.0, 3.0, 4.0), 1.8), 0.1, 0.25, 1.0),
        ),
    )


def noise_benchmark_phantom(resolution: int = 80) -> PhantomSpec:
    """Four inclusions in a 10^3 box with contrast in Gamma*mu and D only.

    Parameter values follow the multi-source noisy benchmark: every region is
    separable from the background using the data and its gradient alone, so
    the noise-sensitive second-derivative stage is unnecessary.
    """
    n = int(resolution)
    h = 10.0 / n
    grid = GridSpec((n, n, n), (h, h, h))
    return PhantomSpec(
        grid=grid,
        background=(0.01, 0.166, 1.0),
        inclusions=(
            (RegionShape.sphere((2.8, 2.8, 5.0), 1.5), 0.01, 0.056, 1.0),
            (RegionShape.sphere((7.2, 2.8, 4.6), 1.4), 0.01, 0.166, 1.2),
            (RegionShape.sphere((2.8, 7.2, 4.6), 1.4), 0.02, 0.538, 0.5),
            (RegionShape.sphere((7.2, 7.2, 5.2), 1.5), 0.006, 0.111, 0.8),
        ),
    )


def half_space_phantom(n: int = 32, lam: float = 2.0) -> PhantomSpec:
    """Unit cube straddling ``y = 0`` with (lam mu, lam D, Gamma/lam) below.

    With Dirichlet trace ``exp(x)`` both halves carry the same fluence
    ``u = exp(x)``: the interface is parallel to the gradient, so this
    parameter jump is invisible in the data.
    """
    grid = GridSpec((n, n, n), (1.0 / n,) * 3, origin=(0.0, -0.5, 0.0))
    return PhantomSpec(
        grid=grid,
        background=(1.0, 1.0, 1.0),
        inclusions=(
            (RegionShape.halfspace((0.0, 0.0, 0.0), (0.0, 1.0, 0.0)), lam, lam, 1.0 / lam),
        ),
    )
