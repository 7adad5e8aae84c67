"""Regular-grid scalar volumes, piecewise-constant phantoms, and volume file I/O.

A volume lives on a regular grid of voxels. Voxel (i, j, k) is centered at
``origin + (i + 1/2) * spacing`` per axis; the grid's bounding box therefore
spans ``origin`` to ``origin + dims * spacing``. Values are stored as a dense
float64 array of shape ``dims`` whose x index varies fastest in serialized
(flat) order.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

__all__ = [
    "GridSpec",
    "ScalarVolume",
    "RegionShape",
    "PhantomSpec",
    "ParameterMaps",
    "VolumeFormatError",
    "rasterize_phantom",
    "read_volume",
    "write_volume",
    "read_labels",
    "write_labels",
    "load_phantom_json",
    "save_phantom_json",
    "sample_trilinear",
]

_FACE_STRUCTURE = ndimage.generate_binary_structure(3, 1)  # 6-connectivity


class VolumeFormatError(ValueError):
    """Malformed volume file; ``field`` names the offending header item."""

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


@dataclass(frozen=True)
class GridSpec:
    """Regular 3D sampling grid: voxel counts, physical spacing, and origin."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))
        if len(self.dims) != 3 or len(self.spacing) != 3 or len(self.origin) != 3:
            raise ValueError("dims, spacing, origin must be length-3")
        if any(d < 2 for d in self.dims):
            raise ValueError(f"all dims must be >= 2, got {self.dims}")
        if any(s <= 0 for s in self.spacing):
            raise ValueError(f"all spacing must be > 0, got {self.spacing}")

    @property
    def n_voxels(self):
        return self.dims[0] * self.dims[1] * self.dims[2]

    @property
    def voxel_volume(self):
        return self.spacing[0] * self.spacing[1] * self.spacing[2]

    def axis_centers(self, axis):
        """Physical voxel-center coordinates along one axis."""
        return self.origin[axis] + (np.arange(self.dims[axis]) + 0.5) * self.spacing[axis]

    def center_coords(self):
        """Voxel-center coordinate arrays, each of shape ``dims``."""
        return np.meshgrid(*(self.axis_centers(a) for a in range(3)), indexing="ij")

    def bounding_box(self):
        lo = np.asarray(self.origin, dtype=float)
        hi = lo + np.asarray(self.dims, dtype=float) * np.asarray(self.spacing, dtype=float)
        return lo, hi


@dataclass(frozen=True)
class ScalarVolume:
    """A scalar field sampled at the voxel centers of a grid."""

    grid: GridSpec
    values: np.ndarray

    def __post_init__(self):
        vals = np.ascontiguousarray(np.asarray(self.values, dtype=np.float64))
        if vals.ndim == 1:
            # flat input is x-fastest serialized order
            vals = vals.reshape(self.grid.dims, order="F")
            vals = np.ascontiguousarray(vals)
        if vals.shape != self.grid.dims:
            raise ValueError(f"values shape {vals.shape} != grid dims {self.grid.dims}")
        if not np.isfinite(vals).all():
            raise ValueError("volume contains non-finite values")
        object.__setattr__(self, "values", vals)

    def flat(self):
        """Values in x-fastest serialized order."""
        return self.values.ravel(order="F")

    def with_values(self, values):
        return ScalarVolume(self.grid, values)


@dataclass(frozen=True)
class RegionShape:
    """A geometric primitive in physical coordinates.

    kind is one of ``sphere`` (center, radius), ``box`` (min, max) or
    ``halfspace`` (point, normal; contains points with (x - point)·normal < 0).
    """

    kind: str
    params: dict

    @staticmethod
    def sphere(center, radius):
        radius = float(radius)
        if radius <= 0:
            raise ValueError("sphere radius must be > 0")
        return RegionShape("sphere", {"center": tuple(map(float, center)), "radius": radius})

    @staticmethod
    def box(min_corner, max_corner):
        lo = tuple(map(float, min_corner))
        hi = tuple(map(float, max_corner))
        if not all(a < b for a, b in zip(lo, hi)):
            raise ValueError("box min must be < max componentwise")
        return RegionShape("box", {"min": lo, "max": hi})

    @staticmethod
    def halfspace(point, normal):
        n = np.asarray(normal, dtype=float)
        if not np.linalg.norm(n) > 0:
            raise ValueError("halfspace normal must be nonzero")
        return RegionShape("halfspace", {"point": tuple(map(float, point)), "normal": tuple(n)})

    def contains(self, points):
        """Boolean membership for an (N, 3) array of physical points."""
        p = np.asarray(points, dtype=float)
        if self.kind == "sphere":
            c = np.asarray(self.params["center"])
            r = self.params["radius"]
            return np.sum((p - c) ** 2, axis=-1) <= r * r
        if self.kind == "box":
            lo = np.asarray(self.params["min"])
            hi = np.asarray(self.params["max"])
            return np.all((p >= lo) & (p <= hi), axis=-1)
        if self.kind == "halfspace":
            x0 = np.asarray(self.params["point"])
            n = np.asarray(self.params["normal"])
            return (p - x0) @ n < 0
        raise ValueError(f"unknown shape kind {self.kind!r}")

    def to_json(self):
        return {"kind": self.kind, **{k: list(v) if isinstance(v, tuple) else v for k, v in self.params.items()}}

    @staticmethod
    def from_json(obj):
        kind = obj["kind"]
        if kind == "sphere":
            return RegionShape.sphere(obj["center"], obj["radius"])
        if kind == "box":
            return RegionShape.box(obj["min"], obj["max"])
        if kind == "halfspace":
            return RegionShape.halfspace(obj["point"], obj["normal"])
        raise ValueError(f"unknown shape kind {kind!r}")


def _check_triple(mu, D, Gamma):
    if mu <= 0 or D <= 0 or Gamma <= 0:
        raise ValueError(f"parameters must be > 0, got mu={mu}, D={D}, Gamma={Gamma}")
    return float(mu), float(D), float(Gamma)


@dataclass(frozen=True)
class PhantomSpec:
    """Background optical parameters plus an ordered list of parameter inclusions.

    Each inclusion is ``(shape, mu, D, Gamma)``; later inclusions override
    earlier ones where they overlap.
    """

    grid: GridSpec
    background: tuple[float, float, float]
    inclusions: tuple = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "background", _check_triple(*self.background))
        incs = []
        for shape, mu, D, Gamma in self.inclusions:
            incs.append((shape, *_check_triple(mu, D, Gamma)))
        object.__setattr__(self, "inclusions", tuple(incs))


@dataclass(frozen=True)
class ParameterMaps:
    """Rasterized absorption / diffusion / Grueneisen maps with ground-truth labels."""

    mu: ScalarVolume
    D: ScalarVolume
    Gamma: ScalarVolume
    true_labels: np.ndarray

    def __post_init__(self):
        if not (self.mu.grid == self.D.grid == self.Gamma.grid):
            raise ValueError("mu, D, Gamma must share one grid")
        labels = np.asarray(self.true_labels)
        if labels.shape != self.mu.grid.dims:
            raise ValueError("true_labels shape must match grid dims")
        for vol in (self.mu, self.D, self.Gamma):
            if not (vol.values > 0).all():
                raise ValueError("parameter values must be strictly positive")
        object.__setattr__(self, "true_labels", labels.astype(np.int32))

    @property
    def grid(self):
        return self.mu.grid


def rasterize_phantom(spec: PhantomSpec) -> ParameterMaps:
    """Rasterize a phantom onto its grid.

    Each voxel center gets the parameters of the last inclusion containing it,
    else the background. Ground-truth labels are produced by face-connected
    component analysis of the winning-inclusion map, so geometrically disjoint
    pieces of one inclusion get distinct labels. Labels are numbered with the
    background components first, then each inclusion's components in list
    order; in the common case of a connected background this makes label 1 the
    background.
    """
    grid = spec.grid
    X, Y, Z = grid.center_coords()
    pts = np.stack([X, Y, Z], axis=-1).reshape(-1, 3)

    winner = np.zeros(grid.n_voxels, dtype=np.int32)  # 0 = background
    for idx, (shape, _, _, _) in enumerate(spec.inclusions, start=1):
        inside = shape.contains(pts)
        if not inside.any():
            warnings.warn(f"inclusion {idx} ({shape.kind}) lies entirely outside the grid")
        winner[inside] = idx
    winner = winner.reshape(grid.dims)

    triples = [spec.background] + [(mu, D, G) for _, mu, D, G in spec.inclusions]
    mu = np.empty(grid.dims)
    D = np.empty(grid.dims)
    Gamma = np.empty(grid.dims)
    for idx, (m, d, g) in enumerate(triples):
        sel = winner == idx
        mu[sel], D[sel], Gamma[sel] = m, d, g

    labels = np.zeros(grid.dims, dtype=np.int32)
    next_label = 1
    for idx in range(len(triples)):
        mask = winner == idx
        if not mask.any():
            continue
        comp, ncomp = ndimage.label(mask, structure=_FACE_STRUCTURE)
        labels[mask] = comp[mask] + (next_label - 1)
        next_label += ncomp

    return ParameterMaps(
        mu=ScalarVolume(grid, mu),
        D=ScalarVolume(grid, D),
        Gamma=ScalarVolume(grid, Gamma),
        true_labels=labels,
    )


# ---------------------------------------------------------------------------
# Volume file format: one text header line followed by raw little-endian
# float64 payload in x-fastest order. Round-trips are bit-exact.
# ---------------------------------------------------------------------------

_MAGIC = "QPATVOL1"


def write_volume(vol: ScalarVolume, path):
    g = vol.grid
    header = " ".join(
        [_MAGIC]
        + [str(d) for d in g.dims]
        + [repr(s) for s in g.spacing]
        + [repr(o) for o in g.origin]
        + ["float64"]
    )
    payload = np.ascontiguousarray(vol.flat(), dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii") + b"\n")
        fh.write(payload.tobytes())


def read_volume(path) -> ScalarVolume:
    with open(path, "rb") as fh:
        header = fh.readline()
        payload = fh.read()
    try:
        tokens = header.decode("ascii").split()
    except UnicodeDecodeError as exc:
        raise VolumeFormatError("header is not ASCII", field="header") from exc
    if len(tokens) != 11:
        raise VolumeFormatError(
            f"header must have 11 tokens, got {len(tokens)}", field="header"
        )
    if tokens[0] != _MAGIC:
        raise VolumeFormatError(f"bad magic {tokens[0]!r}", field="magic")
    if tokens[10] != "float64":
        raise VolumeFormatError(f"unsupported dtype {tokens[10]!r}", field="dtype")
    try:
        dims = tuple(int(t) for t in tokens[1:4])
    except ValueError as exc:
        raise VolumeFormatError(f"bad dims {tokens[1:4]}", field="dims") from exc
    try:
        spacing = tuple(float(t) for t in tokens[4:7])
        origin = tuple(float(t) for t in tokens[7:10])
    except ValueError as exc:
        raise VolumeFormatError("bad spacing/origin floats", field="spacing") from exc
    grid = GridSpec(dims, spacing, origin)
    expected = grid.n_voxels * 8
    if len(payload) != expected:
        raise VolumeFormatError(
            f"payload length {len(payload)} bytes, expected {expected}",
            field="payload length",
        )
    values = np.frombuffer(payload, dtype="<f8").astype(np.float64, copy=False)
    return ScalarVolume(grid, values)


def write_labels(labels: np.ndarray, grid: GridSpec, path):
    """Store an integer label map in the float volume format (exact to 2**53)."""
    write_volume(ScalarVolume(grid, labels.astype(np.float64)), path)


def read_labels(path):
    vol = read_volume(path)
    labels = np.rint(vol.values).astype(np.int32)
    return labels, vol.grid


def save_phantom_json(spec: PhantomSpec, path):
    doc = {
        "grid": {
            "dims": list(spec.grid.dims),
            "spacing": list(spec.grid.spacing),
            "origin": list(spec.grid.origin),
        },
        "background": {"mu": spec.background[0], "D": spec.background[1], "Gamma": spec.background[2]},
        "inclusions": [
            {"shape": shape.to_json(), "mu": mu, "D": D, "Gamma": G}
            for shape, mu, D, G in spec.inclusions
        ],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def load_phantom_json(path) -> PhantomSpec:
    with open(path) as fh:
        doc = json.load(fh)
    g = doc["grid"]
    grid = GridSpec(tuple(g["dims"]), tuple(g["spacing"]), tuple(g.get("origin", (0.0, 0.0, 0.0))))
    bg = doc["background"]
    inclusions = [
        (RegionShape.from_json(inc["shape"]), inc["mu"], inc["D"], inc["Gamma"])
        for inc in doc.get("inclusions", [])
    ]
    return PhantomSpec(grid=grid, background=(bg["mu"], bg["D"], bg["Gamma"]), inclusions=tuple(inclusions))


def sample_trilinear(values: np.ndarray, grid: GridSpec, points) -> np.ndarray:
    """Trilinear interpolation of voxel-center samples at physical points.

    Points outside the voxel-center lattice are clamped to its faces.
    """
    p = np.atleast_2d(np.asarray(points, dtype=float))
    f = (p - np.asarray(grid.origin)) / np.asarray(grid.spacing) - 0.5
    dims = np.asarray(grid.dims)
    f = np.clip(f, 0.0, dims - 1.000001)
    i0 = np.floor(f).astype(np.intp)
    i0 = np.minimum(i0, dims - 2)
    t = f - i0
    out = np.zeros(len(p))
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                w = (
                    (t[:, 0] if dx else 1 - t[:, 0])
                    * (t[:, 1] if dy else 1 - t[:, 1])
                    * (t[:, 2] if dz else 1 - t[:, 2])
                )
                out += w * values[i0[:, 0] + dx, i0[:, 1] + dy, i0[:, 2] + dz]
    return out
