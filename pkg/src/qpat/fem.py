"""Forward simulation of light fluence and photoacoustic initial pressure.

Solves ``-div(D grad u) + mu u = 0`` with Dirichlet data on a tetrahedral mesh
obtained by splitting every voxel cell of a regular grid into six tetrahedra
(Freudenthal/Kuhn decomposition along the (0,0,0)-(1,1,1) cell diagonal, which
is conforming when every cell uses the same diagonal). Linear (P1) elements;
per-element parameters are looked up from the voxel containing the element,
so parameters stay exactly piecewise constant on the mesh.

The assembled stiffness+mass system is symmetric positive definite and is
solved with conjugate gradients, preconditioned by smoothed-aggregation AMG
when pyamg is importable (Jacobi otherwise). The solution is resampled at
voxel centers using the element-wise linear interpolant: the cell center is
the midpoint of the shared cell diagonal, so the interpolant evaluates to the
mean of the two diagonal corner values.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import LinearOperator, cg

from .volume import GridSpec, ParameterMaps, ScalarVolume

__all__ = [
    "TetMesh",
    "IlluminationPattern",
    "SolveOptions",
    "SolverConvergenceError",
    "build_mesh",
    "assemble_system",
    "FluenceSolver",
    "solve_fluence",
    "absorbed_energy",
    "synthesize_pressure",
    "transmission_residual",
]

TETS_PER_CELL = 6

# Kuhn decomposition: one tet per axis permutation, corners visited from
# (0,0,0) to (1,1,1) adding one axis at a time. All six share the main
# diagonal, and neighboring cells split shared faces identically.
_KUHN_CORNERS = []
for _perm in itertools.permutations(range(3)):
    c = np.zeros((4, 3), dtype=np.int64)
    for step, axis in enumerate(_perm):
        c[step + 1] = c[step]
        c[step + 1, axis] += 1
    _KUHN_CORNERS.append(c)


class SolverConvergenceError(RuntimeError):
    """CG hit the iteration cap; carries the final relative residual."""

    def __init__(self, message, residual):
        super().__init__(message)
        self.residual = residual


@dataclass(frozen=True)
class TetMesh:
    """Conforming tetrahedral mesh over a grid's bounding box.

    ``tet_voxels`` maps each tetrahedron to the (linear, C-order) index of the
    voxel cell containing it, which is where its material parameters live.
    """

    grid: GridSpec
    vertices: np.ndarray  # (nv, 3) float64, physical coordinates
    tets: np.ndarray  # (nt, 4) int32 vertex indices
    boundary_vertices: np.ndarray  # sorted int indices of outer-face vertices
    tet_voxels: np.ndarray  # (nt,) int32

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_tets(self):
        return len(self.tets)

    def vertex_shape(self):
        return tuple(d + 1 for d in self.grid.dims)

    def boundary_mask(self):
        mask = np.zeros(self.n_vertices, dtype=bool)
        mask[self.boundary_vertices] = True
        return mask

    def tet_volumes(self):
        p = self.vertices[self.tets]
        e = p[:, 1:] - p[:, :1]
        return np.abs(np.linalg.det(e)) / 6.0


def _cell_base_ids(grid):
    """Vertex id of each cell's (0,0,0) corner, flattened C-order over cells."""
    nx, ny, nz = grid.dims
    ix, iy, iz = np.meshgrid(
        np.arange(nx, dtype=np.int64),
        np.arange(ny, dtype=np.int64),
        np.arange(nz, dtype=np.int64),
        indexing="ij",
    )
    return (ix + (nx + 1) * (iy + (ny + 1) * iz)).ravel()


def _corner_offset(grid, offsets):
    nx, ny, _ = grid.dims
    return int(offsets[0] + (nx + 1) * (offsets[1] + (ny + 1) * offsets[2]))


def _vertex_ids(grid, offsets, base=None):
    """Vertex indices (flattened C-order over cells) for one corner offset."""
    if base is None:
        base = _cell_base_ids(grid)
    return base + _corner_offset(grid, offsets)


def build_mesh(grid: GridSpec) -> TetMesh:
    """Six-tet Kuhn split of every voxel cell; deterministic for a given grid."""
    nx, ny, nz = grid.dims
    vshape = (nx + 1, ny + 1, nz + 1)
    vx, vy, vz = np.meshgrid(
        grid.origin[0] + np.arange(vshape[0]) * grid.spacing[0],
        grid.origin[1] + np.arange(vshape[1]) * grid.spacing[1],
        grid.origin[2] + np.arange(vshape[2]) * grid.spacing[2],
        indexing="ij",
    )
    # vertex linear index is x-fastest: vid = x + (nx+1)*(y + (ny+1)*z)
    vertices = np.stack([vx.ravel(order="F"), vy.ravel(order="F"), vz.ravel(order="F")], axis=1)

    n_cells = nx * ny * nz
    cell_ids = np.arange(n_cells, dtype=np.int32)
    base = _cell_base_ids(grid)
    tets = np.empty((TETS_PER_CELL * n_cells, 4), dtype=np.int32)
    tet_voxels = np.empty(TETS_PER_CELL * n_cells, dtype=np.int32)
    for t, corners in enumerate(_KUHN_CORNERS):
        block = slice(t * n_cells, (t + 1) * n_cells)
        for a in range(4):
            tets[block, a] = _vertex_ids(grid, corners[a], base)
        tet_voxels[block] = cell_ids

    bx, by, bz = np.meshgrid(
        np.arange(vshape[0]), np.arange(vshape[1]), np.arange(vshape[2]), indexing="ij"
    )
    on_face = (
        (bx == 0) | (bx == nx) | (by == 0) | (by == ny) | (bz == 0) | (bz == nz)
    )
    boundary = np.flatnonzero(on_face.ravel(order="F"))

    return TetMesh(
        grid=grid,
        vertices=vertices,
        tets=tets,
        boundary_vertices=boundary,
        tet_voxels=tet_voxels,
    )


def _local_matrices(spacing):
    """Per-class P1 stiffness (unit D) and consistent mass (unit mu) matrices."""
    h = np.asarray(spacing, dtype=float)
    Ks, Ms = [], []
    for corners in _KUHN_CORNERS:
        p = corners * h
        E = (p[1:] - p[0]).T  # columns are edge vectors
        vol = abs(np.linalg.det(E)) / 6.0
        Ginv = np.linalg.inv(E)
        g = np.vstack([-(Ginv.sum(axis=0)), Ginv])  # rows: grad of lambda_0..3
        K = vol * (g @ g.T)
        K = 0.5 * (K + K.T)  # exact symmetry
        M = vol / 20.0 * (np.ones((4, 4)) + np.eye(4))
        Ks.append(K)
        Ms.append(M)
    return Ks, Ms


def assemble_system(mesh: TetMesh, params: ParameterMaps) -> sparse.csr_matrix:
    """Assemble the SPD stiffness+mass matrix over all vertices.

    Per-element D and mu are taken from the element's voxel. The matrix is
    built from its upper triangle and mirrored, so it equals its transpose
    exactly.
    """
    if params.grid != mesh.grid:
        raise ValueError("params grid does not match mesh grid")
    Ks, Ms = _local_matrices(mesh.grid.spacing)
    nv = mesh.n_vertices
    D_cells = params.D.values.ravel()
    mu_cells = params.mu.values.ravel()

    upper = None
    base = _cell_base_ids(mesh.grid)
    pairs = [(a, b) for a in range(4) for b in range(a, 4)]
    for t, corners in enumerate(_KUHN_CORNERS):
        vids = [
            _vertex_ids(mesh.grid, corners[a], base).astype(np.int32) for a in range(4)
        ]
        rows_parts, cols_parts, vals_parts = [], [], []
        for a, b in pairs:
            va, vb = vids[a], vids[b]
            vals = D_cells * Ks[t][a, b] + mu_cells * Ms[t][a, b]
            rows_parts.append(np.minimum(va, vb))
            cols_parts.append(np.maximum(va, vb))
            vals_parts.append(vals)
        part = sparse.coo_matrix(
            (
                np.concatenate(vals_parts),
                (np.concatenate(rows_parts), np.concatenate(cols_parts)),
            ),
            shape=(nv, nv),
        ).tocsr()
        upper = part if upper is None else upper + part
    full = upper + sparse.triu(upper, k=1).T
    return full.tocsr()


@dataclass(frozen=True)
class IlluminationPattern:
    """Dirichlet boundary data for the fluence; values must be positive.

    kinds:
      - ``uniform``: constant value on the whole boundary
      - ``face``: Gaussian bump centered on one outer face (``+x`` ... ``-z``)
        on top of a small positive floor, evaluated at every boundary vertex
      - ``custom``: explicit per-boundary-vertex values
    """

    kind: str
    params: dict

    @staticmethod
    def uniform(value=1.0):
        if value <= 0:
            raise ValueError("uniform illumination value must be > 0")
        return IlluminationPattern("uniform", {"value": float(value)})

    @staticmethod
    def face(face, peak=1.0, width=None, floor=None):
        if face not in ("+x", "-x", "+y", "-y", "+z", "-z"):
            raise ValueError(f"unknown face {face!r}")
        if peak <= 0:
            raise ValueError("peak must be > 0")
        if floor is None:
            floor = 0.01 * peak
        if floor <= 0:
            raise ValueError("floor must be > 0")
        return IlluminationPattern(
            "face",
            {"face": face, "peak": float(peak), "width": None if width is None else float(width), "floor": float(floor)},
        )

    @staticmethod
    def custom(values):
        return IlluminationPattern("custom", {"values": dict(values)})

    @staticmethod
    def from_function(mesh, fn):
        """Custom pattern evaluating ``fn(x, y, z)`` at each boundary vertex."""
        coords = mesh.vertices[mesh.boundary_vertices]
        vals = {
            int(v): float(fn(*xyz)) for v, xyz in zip(mesh.boundary_vertices, coords)
        }
        return IlluminationPattern.custom(vals)

    def boundary_values(self, mesh: TetMesh) -> np.ndarray:
        """Values aligned with ``mesh.boundary_vertices``; validated > 0."""
        bidx = mesh.boundary_vertices
        if self.kind == "uniform":
            vals = np.full(len(bidx), self.params["value"])
        elif self.kind == "face":
            lo, hi = mesh.grid.bounding_box()
            face = self.params["face"]
            axis = "xyz".index(face[1])
            center = 0.5 * (lo + hi)
            center[axis] = hi[axis] if face[0] == "+" else lo[axis]
            extents = [hi[a] - lo[a] for a in range(3) if a != axis]
            width = self.params["width"]
            if width is None:
                width = 0.25 * max(extents)
            coords = mesh.vertices[bidx]
            r2 = np.sum((coords - center) ** 2, axis=1)
            vals = self.params["floor"] + self.params["peak"] * np.exp(-0.5 * r2 / width**2)
        elif self.kind == "custom":
            table = self.params["values"]
            try:
                vals = np.array([table[int(v)] for v in bidx], dtype=float)
            except KeyError as exc:
                raise ValueError(f"custom illumination missing boundary vertex {exc}") from exc
        else:
            raise ValueError(f"unknown illumination kind {self.kind!r}")
        if not (vals > 0).all():
            raise ValueError("illumination must be > 0 on the whole boundary")
        return vals


@dataclass(frozen=True)
class SolveOptions:
    cg_tolerance: float = 1e-8
    max_iterations: int = 20000
    noise_level: float = 0.0
    rng_seed: int = 0

    def __post_init__(self):
        if not 0 < self.cg_tolerance < 1:
            raise ValueError("cg_tolerance must be in (0, 1)")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.noise_level < 0:
            raise ValueError("noise_level must be >= 0")


class FluenceSolver:
    """Reusable assembled system for repeated solves with different illuminations."""

    def __init__(self, mesh: TetMesh, params: ParameterMaps, opts: SolveOptions | None = None):
        self.mesh = mesh
        self.params = params
        self.opts = opts or SolveOptions()
        A = assemble_system(mesh, params)
        interior = ~mesh.boundary_mask()
        self._interior = np.flatnonzero(interior)
        self._A_ii = A[self._interior][:, self._interior].tocsr()
        self._A_ib = A[self._interior][:, mesh.boundary_vertices].tocsr()
        self._precond = self._build_preconditioner(self._A_ii)

    @staticmethod
    def _build_preconditioner(A):
        try:
            import pyamg

            return pyamg.smoothed_aggregation_solver(A, symmetry="hermitian").aspreconditioner(
                cycle="V"
            )
        except Exception:
            inv_diag = 1.0 / A.diagonal()
            return LinearOperator(A.shape, matvec=lambda x: inv_diag * x)

    def solve(self, illum: IlluminationPattern) -> ScalarVolume:
        """Solve for one illumination; returns fluence at voxel centers."""
        f = illum.boundary_values(self.mesh)
        b = -self._A_ib @ f
        u_i, info = cg(
            self._A_ii,
            b,
            rtol=self.opts.cg_tolerance,
            atol=0.0,
            maxiter=self.opts.max_iterations,
            M=self._precond,
        )
        bnorm = np.linalg.norm(b)
        residual = np.linalg.norm(b - self._A_ii @ u_i) / bnorm if bnorm > 0 else 0.0
        if info > 0:
            raise SolverConvergenceError(
                f"CG did not converge in {self.opts.max_iterations} iterations "
                f"(relative residual {residual:.3e})",
                residual=residual,
            )
        if info < 0:
            raise RuntimeError(f"CG failed with illegal input (info={info})")

        u = np.empty(self.mesh.n_vertices)
        u[self._interior] = u_i
        u[self.mesh.boundary_vertices] = f
        return self._resample_to_centers(u)

    def _resample_to_centers(self, u_vertices):
        nx, ny, nz = self.mesh.grid.dims
        u = u_vertices.reshape((nx + 1, ny + 1, nz + 1), order="F")
        # cell center = midpoint of the shared Kuhn diagonal
        centers = 0.5 * (u[:-1, :-1, :-1] + u[1:, 1:, 1:])
        return ScalarVolume(self.mesh.grid, centers)


def solve_fluence(
    mesh: TetMesh,
    params: ParameterMaps,
    illum: IlluminationPattern,
    opts: SolveOptions | None = None,
) -> ScalarVolume:
    """Solve the diffusion equation with Dirichlet data; u at voxel centers."""
    return FluenceSolver(mesh, params, opts).solve(illum)


def absorbed_energy(u: ScalarVolume, params: ParameterMaps) -> ScalarVolume:
    if u.grid != params.grid:
        raise ValueError("fluence grid does not match parameter grid")
    return ScalarVolume(u.grid, params.mu.values * u.values)


def synthesize_pressure(
    u: ScalarVolume, params: ParameterMaps, opts: SolveOptions | None = None
) -> ScalarVolume:
    """Initial pressure ``H = Gamma * mu * u`` with optional multiplicative noise.

    With ``noise_level > 0``, each voxel is scaled by ``1 + noise_level * N(0,1)``
    (seeded, fixed voxel order) and the result is floored at ``1e-12 * max H``
    so logarithms stay defined downstream.
    """
    opts = opts or SolveOptions()
    if u.grid != params.grid:
        raise ValueError("fluence grid does not match parameter grid")
    H = params.Gamma.values * params.mu.values * u.values
    if opts.noise_level > 0:
        rng = np.random.default_rng(opts.rng_seed)
        noise = rng.standard_normal(H.size).reshape(H.shape, order="F")
        H = H * (1.0 + opts.noise_level * noise)
        H = np.maximum(H, 1e-12 * H.max())
    return ScalarVolume(u.grid, H)


def transmission_residual(u: ScalarVolume, params: ParameterMaps, labels=None) -> dict:
    """Normal-flux mismatch ``D_m grad(u_m) . nu  vs  D_n grad(u_n) . nu`` per interface.

    For every voxel face separating two labels, the one-sided directional
    derivative toward the face is estimated from three same-label voxels on
    each side (second-order one-sided stencil). Faces without stencil room, or
    whose stencil crosses another region, are skipped and counted.

    Returns ``{(m, n): stats}`` with the area-weighted mismatch integral, a
    flux scale integral based on the local full-gradient magnitude ``D |grad u|``
    (so the ratio stays meaningful where the normal flux itself vanishes), and
    their ratio ``relative``.
    """
    if u.grid != params.grid:
        raise ValueError("fluence grid does not match parameter grid")
    lab = params.true_labels if labels is None else np.asarray(labels)
    U = u.values
    D = params.D.values
    grad = np.stack([np.gradient(U, u.grid.spacing[a], axis=a) for a in range(3)])
    gmag = np.sqrt(np.sum(grad**2, axis=0))
    out = {}

    def acc(key, field, value):
        entry = out.setdefault(
            key,
            {"n_faces": 0, "n_skipped": 0, "mismatch_integral": 0.0, "flux_scale_integral": 0.0},
        )
        entry[field] += value

    for axis in range(3):
        h = u.grid.spacing[axis]
        face_area = u.grid.voxel_volume / h
        n = u.grid.dims[axis]

        def take(arr, idx):
            sl = [slice(None)] * 3
            sl[axis] = idx
            return arr[tuple(sl)]

        lab_lo = take(lab, slice(0, n - 1))
        lab_hi = take(lab, slice(1, n))
        faces = np.argwhere((lab_lo != lab_hi) & (lab_lo > 0) & (lab_hi > 0))
        if len(faces) == 0:
            continue
        for f in faces:
            idx = list(f)
            i = idx[axis]  # low-side voxel position along axis
            m = int(lab_lo[tuple(f)])
            nn = int(lab_hi[tuple(f)])
            key = (min(m, nn), max(m, nn))

            def vox(j):
                q = list(idx)
                q[axis] = j
                return tuple(q)

            if i - 2 < 0 or i + 3 >= n:
                acc(key, "n_skipped", 1)
                continue
            if not (lab[vox(i - 1)] == m and lab[vox(i - 2)] == m):
                acc(key, "n_skipped", 1)
                continue
            if not (lab[vox(i + 2)] == nn and lab[vox(i + 3)] == nn):
                acc(key, "n_skipped", 1)
                continue
            du_lo = (2.0 * U[vox(i)] - 3.0 * U[vox(i - 1)] + U[vox(i - 2)]) / h
            du_hi = (-2.0 * U[vox(i + 1)] + 3.0 * U[vox(i + 2)] - U[vox(i + 3)]) / h
            flux_lo = D[vox(i)] * du_lo
            flux_hi = D[vox(i + 1)] * du_hi
            scale = 0.5 * (D[vox(i)] * gmag[vox(i)] + D[vox(i + 1)] * gmag[vox(i + 1)])
            acc(key, "n_faces", 1)
            acc(key, "mismatch_integral", abs(flux_lo - flux_hi) * face_area)
            acc(key, "flux_scale_integral", scale * face_area)

    for entry in out.values():
        scale = entry["flux_scale_integral"]
        if scale > 0:
            entry["relative"] = entry["mismatch_integral"] / scale
        else:
            entry["relative"] = 0.0 if entry["mismatch_integral"] == 0 else np.inf
    return out
