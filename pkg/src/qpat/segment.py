"""Three-stage jump segmentation of initial-pressure volumes.

Stage 1 finds jumps in the (measurement-averaged) log of the data, stage 2 in
the log gradient magnitude restricted to stage-1 regions, stage 3 in
``log |lap H / H|`` restricted to stage-2 regions. The union of the three jump
surfaces is voxelized and thickened, and face-connected components of the
remaining voxels become the region labels (label 0 marks surface voxels).
Each surviving surface triangle is assigned the region labels found on its
two sides along the normal, giving per-interface triangle lists and areas.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from .edge_detect import EdgeOptions, JumpSurface, detect_edges, merge_surfaces
from .scale_space import derivatives
from .volume import GridSpec, ScalarVolume, sample_trilinear

__all__ = [
    "StageThresholds",
    "InterfaceTriangles",
    "RegionLabeling",
    "segment",
    "interface_jump_magnitudes",
    "build_region_labeling",
    "match_regions",
]

_FACE_STRUCTURE = ndimage.generate_binary_structure(3, 1)
_SIDE_WALK_VOXELS = (1.5, 2.5, 3.5, 4.5)


@dataclass(frozen=True)
class StageThresholds:
    """Per-stage jump-magnitude thresholds and detection settings.

    ``tau0``..``tau2`` are thresholds on the log-jump magnitude for stages
    1 to 3. Hysteresis thresholds are derived from them via the peak gradient
    a unit step reaches after the stage's total smoothing, unless explicit
    ``stage_options`` are given. ``derivative_sigma`` is the smoothing used to
    build the gradient/Laplacian input fields of stages 2 and 3.
    """

    tau0: float = 0.1
    tau1: float = 0.1
    tau2: float = 0.1
    sigma_detect: float = 1.5
    derivative_sigma: float = 1.0
    stage_options: tuple = (None, None, None)
    thicken: int = 1
    min_region_voxels: int = 27
    mask_dilation: int | None = None
    combine: str = "mean"
    min_component_area: float | None = None
    stage1_margin: int = 2
    # stage-2 search is restricted to where |grad H| clears this fraction of
    # its median (log |grad H| has singular walls around gradient zeros);
    # stage 3 floors |lap H| analogously
    grad_floor_rel: float = 0.1
    lap_floor_rel: float = 1e-3

    def __post_init__(self):
        if min(self.tau0, self.tau1, self.tau2) < 0:
            raise ValueError("thresholds must be >= 0")
        if self.combine not in ("mean", "union"):
            raise ValueError("combine must be 'mean' or 'union'")

    def tau(self, stage):
        return (self.tau0, self.tau1, self.tau2)[stage]

    def edge_options(self, stage, grid: GridSpec) -> EdgeOptions:
        if self.stage_options[stage] is not None:
            return self.stage_options[stage]
        h = float(np.mean(grid.spacing))
        # data smear ~1 voxel; stages 2-3 also inherit the derivative smoothing
        extra = self.derivative_sigma**2 if stage > 0 else 0.0
        sigma_eff = math.sqrt(self.sigma_detect**2 + extra + 1.0)
        peak_per_unit_jump = 1.0 / (sigma_eff * h * math.sqrt(2.0 * math.pi))
        rho_high = 0.7 * self.tau(stage) * peak_per_unit_jump
        rho_high = max(rho_high, 1e-300)
        # derivative fields are least trustworthy near the volume faces
        margin = self.stage1_margin if stage == 0 else self.resolved_mask_dilation() + 2
        return EdgeOptions(
            sigma=self.sigma_detect,
            rho_low=0.5 * rho_high,
            rho_high=rho_high,
            min_component_area=self.min_component_area,
            boundary_margin=margin,
            # stages 2-3 detect on the log of smoothed derivative magnitudes,
            # whose steepest-log point is biased into the low side
            snap_to_linear_midpoint=stage > 0,
        )

    def resolved_mask_dilation(self):
        if self.mask_dilation is not None:
            return self.mask_dilation
        return math.ceil(2.0 * (self.derivative_sigma + self.sigma_detect))


@dataclass(frozen=True)
class InterfaceTriangles:
    """Triangles of one region-pair interface, with their side sample points."""

    indices: np.ndarray  # (T,) into the segmentation's JumpSurface
    areas: np.ndarray  # (T,)
    incenters: np.ndarray  # (T, 3)
    normals: np.ndarray  # (T, 3)
    points_lo: np.ndarray  # (T, 3) sample point inside the lower-label region
    points_hi: np.ndarray  # (T, 3) sample point inside the higher-label region

    @property
    def total_area(self):
        return float(self.areas.sum())


@dataclass(frozen=True)
class RegionLabeling:
    """Voxel labels, region adjacency, and per-interface triangle lists.

    Labels cover the whole grid: after the thickened jump surface separates
    the regions, on-surface voxels are assigned to their nearest region so
    region volumes sum to the grid volume (label 0 only marks voxels no region
    could claim, normally none). ``surface_voxels`` retains the original
    on-surface band; estimation uses it to keep fits clear of interface data.
    """

    grid: GridSpec
    labels: np.ndarray
    adjacency: frozenset
    interfaces: dict
    region_volumes: dict
    interface_areas: dict
    surface_voxels: np.ndarray

    def region_ids(self):
        return sorted(self.region_volumes)

    @property
    def n_regions(self):
        return len(self.region_volumes)

    def voxel_count(self, label):
        return int(round(self.region_volumes[label] / self.grid.voxel_volume))


def _floored_log(values, rel_floor=1e-12):
    top = values.max()
    floor = rel_floor * top if top > 0 else 1.0
    return np.log(np.maximum(values, floor))


def voxelize_surface(surface: JumpSurface, grid: GridSpec, vertex_edges=None):
    """Mark the voxels adjacent to a surface.

    With ``vertex_edges`` (the (nv, 2) flat voxel ids of each vertex's
    generating lattice edge) both endpoints of every crossed edge are marked;
    otherwise the marking falls back to the floor/ceil voxels around each
    vertex position.
    """
    mask = np.zeros(grid.dims, dtype=bool)
    if surface.n_triangles == 0:
        return mask
    used = np.unique(surface.triangles)
    if vertex_edges is not None:
        ids = np.asarray(vertex_edges)[used].ravel()
        mask.ravel()[ids] = True
        return mask
    frac = (surface.vertices[used] - np.asarray(grid.origin)) / np.asarray(grid.spacing) - 0.5
    lo = np.floor(frac).astype(np.int64)
    hi = np.ceil(frac).astype(np.int64)
    dims = np.asarray(grid.dims)
    for pick in (lo, hi):
        p = np.clip(pick, 0, dims - 1)
        mask[p[:, 0], p[:, 1], p[:, 2]] = True
    return mask


def _cells_touching(voxel_mask, dilation):
    """Dual-cell mask blocking cells with any marked corner voxel."""
    if dilation > 0:
        voxel_mask = ndimage.binary_dilation(voxel_mask, _FACE_STRUCTURE, iterations=dilation)
    c = voxel_mask
    blocked = (
        c[:-1, :-1, :-1]
        | c[1:, :-1, :-1]
        | c[:-1, 1:, :-1]
        | c[:-1, :-1, 1:]
        | c[1:, 1:, :-1]
        | c[1:, :-1, 1:]
        | c[:-1, 1:, 1:]
        | c[1:, 1:, 1:]
    )
    return blocked


def _detect_stage(fields, opts, cell_mask, combine):
    """Run detection on the averaged field, or per measurement and merge."""
    if combine == "mean" or len(fields) == 1:
        mean = fields[0] if len(fields) == 1 else ScalarVolume(fields[0].grid, np.mean([f.values for f in fields], axis=0))
        surf, edges = _detect_with_edges(mean, opts, cell_mask)
        return surf, edges
    surfs, edge_list = [], []
    for f in fields:
        s, e = _detect_with_edges(f, opts, cell_mask)
        surfs.append(s)
        edge_list.append(e)
    merged = merge_surfaces(surfs)
    edges = np.vstack([e for e in edge_list if len(e)]) if any(len(e) for e in edge_list) else np.zeros((0, 2), dtype=np.int64)
    return merged, edges


def _detect_with_edges(vol, opts, cell_mask):
    """detect_edges plus the generating lattice edge of every vertex."""
    surf = detect_edges(vol, opts, cell_mask=cell_mask)
    if surf.n_triangles == 0:
        return surf, np.zeros((0, 2), dtype=np.int64)
    # recover generating edges from vertex positions: endpoints are the
    # floor/ceil lattice corners along each axis (vertices sit on cell edges)
    frac = (surf.vertices - np.asarray(vol.grid.origin)) / np.asarray(vol.grid.spacing) - 0.5
    lo = np.floor(frac + 1e-9).astype(np.int64)
    hi = np.ceil(frac - 1e-9).astype(np.int64)
    dims = np.asarray(vol.grid.dims)
    lo = np.clip(lo, 0, dims - 1)
    hi = np.clip(hi, 0, dims - 1)
    strides = np.array([dims[1] * dims[2], dims[2], 1], dtype=np.int64)
    edges = np.stack([lo @ strides, hi @ strides], axis=1)
    return surf, edges


def segment(H_list, thresholds: StageThresholds | None = None):
    """Segment one or more pressure volumes into constant-parameter regions.

    Returns ``(RegionLabeling, JumpSurface)`` where the surface is the union
    of the three stage surfaces. A single region with no interfaces is a valid
    outcome for smooth data.
    """
    if isinstance(H_list, ScalarVolume):
        H_list = [H_list]
    if len(H_list) == 0:
        raise ValueError("need at least one measurement")
    grid = H_list[0].grid
    for Hk in H_list:
        if Hk.grid != grid:
            raise ValueError("measurements must share one grid")
    thresholds = thresholds or StageThresholds()

    logH = [ScalarVolume(grid, _floored_log(Hk.values)) for Hk in H_list]
    deriv = [derivatives(Hk, thresholds.derivative_sigma) for Hk in H_list]

    gmags = [d.gradient_magnitude() for d in deriv]
    gmag_mean = np.mean(gmags, axis=0)
    gfloor = thresholds.grad_floor_rel * float(np.median(gmag_mean))
    grad_fields = [
        ScalarVolume(grid, np.log(np.maximum(g, max(gfloor, 1e-300)))) for g in gmags
    ]
    low_grad = gmag_mean < gfloor

    laps = [np.abs(d.laplacian()) for d in deriv]
    lap_mean = np.mean(laps, axis=0)
    lfloor = thresholds.lap_floor_rel * float(np.median(lap_mean))
    lap_fields = [
        ScalarVolume(grid, np.log(np.maximum(lap, max(lfloor, 1e-300))) - lh.values)
        for lap, lh in zip(laps, logH)
    ]
    low_lap = lap_mean < lfloor
    del deriv, gmags, laps

    dilation = thresholds.resolved_mask_dilation()

    def combine_masks(*parts):
        out = None
        for p in parts:
            if p is None:
                continue
            out = p if out is None else (out | p)
        return out

    surf1, edges1 = _detect_stage(logH, thresholds.edge_options(0, grid), None, thresholds.combine)
    vox1 = voxelize_surface(surf1, grid, edges1)
    mask2 = combine_masks(
        _cells_touching(vox1, dilation) if vox1.any() else None,
        _cells_touching(low_grad, dilation) if low_grad.any() else None,
    )

    surf2, edges2 = _detect_stage(grad_fields, thresholds.edge_options(1, grid), mask2, thresholds.combine)
    vox12 = vox1 | voxelize_surface(surf2, grid, edges2)
    mask3 = combine_masks(
        _cells_touching(vox12, dilation) if vox12.any() else None,
        _cells_touching(low_lap, dilation) if low_lap.any() else None,
    )

    surf3, edges3 = _detect_stage(lap_fields, thresholds.edge_options(2, grid), mask3, thresholds.combine)

    surface = merge_surfaces([surf1, surf2, surf3])
    parts = [e for e in (edges1, edges2, edges3) if len(e)]
    vertex_edges = np.vstack(parts) if parts else np.zeros((0, 2), dtype=np.int64)

    surface_voxels = voxelize_surface(surface, grid, vertex_edges)
    labeling = build_region_labeling(
        surface_voxels,
        grid,
        surface,
        thicken=thresholds.thicken,
        min_region_voxels=thresholds.min_region_voxels,
    )
    return labeling, surface


def _merge_small_regions(labels, min_voxels, reach):
    """Relabel regions below the voxel floor into their largest nearby region."""
    ids, counts = np.unique(labels[labels > 0], return_counts=True)
    small = [int(i) for i, c in zip(ids, counts) if c < min_voxels]
    sizes = {int(i): int(c) for i, c in zip(ids, counts)}
    for r in sorted(small, key=lambda i: sizes[i]):
        mask = labels == r
        ring = ndimage.binary_dilation(mask, _FACE_STRUCTURE, iterations=reach) & ~mask
        neighbors = np.unique(labels[ring])
        neighbors = [int(n) for n in neighbors if n > 0 and n != r]
        if not neighbors:
            continue
        target = max(neighbors, key=lambda n: sizes[n])
        labels[mask] = target
        sizes[target] += sizes.pop(r)
    return labels


def _assign_sides(surface, grid, labels):
    """Region label on each side of every triangle, walking along the normal.

    Samples at increasing distances so the walk clears the thickened label-0
    band; the first nonzero label on each side wins. Returns (lab_minus,
    lab_plus, points_minus, points_plus).
    """
    nt = surface.n_triangles
    h = float(np.mean(grid.spacing))
    inc = surface.incenters()
    nrm = surface.normals
    lab_m = np.zeros(nt, dtype=np.int64)
    lab_p = np.zeros(nt, dtype=np.int64)
    pts_m = np.zeros((nt, 3))
    pts_p = np.zeros((nt, 3))
    origin = np.asarray(grid.origin)
    spacing = np.asarray(grid.spacing)
    dims = np.asarray(grid.dims)
    for sign, lab_out, pts_out in ((-1.0, lab_m, pts_m), (1.0, lab_p, pts_p)):
        todo = np.arange(nt)
        for dist in _SIDE_WALK_VOXELS:
            if len(todo) == 0:
                break
            p = inc[todo] + sign * dist * h * nrm[todo]
            idx = np.rint((p - origin) / spacing - 0.5).astype(np.int64)
            idx = np.clip(idx, 0, dims - 1)
            found = labels[idx[:, 0], idx[:, 1], idx[:, 2]]
            hit = found > 0
            lab_out[todo[hit]] = found[hit]
            pts_out[todo[hit]] = p[hit]
            todo = todo[~hit]
    return lab_m, lab_p, pts_m, pts_p


def build_region_labeling(
    surface_voxels,
    grid: GridSpec,
    surface: JumpSurface,
    thicken: int = 1,
    min_region_voxels: int = 27,
) -> RegionLabeling:
    """Label off-surface voxels and attach interface triangles to label pairs.

    ``surface_voxels`` may be a boolean mask (to be thickened here) or an
    existing label volume (nonzero = region id, 0 = surface), in which case
    labels are taken as-is.
    """
    sv = np.asarray(surface_voxels)
    if sv.dtype == bool:
        band = sv
        if thicken > 0 and band.any():
            band = ndimage.binary_dilation(band, _FACE_STRUCTURE, iterations=thicken)
        labels, _ = ndimage.label(~band, structure=_FACE_STRUCTURE)
        labels = labels.astype(np.int64)
        # reach must clear the full thickened band between tiny pockets and
        # their nearest real region
        labels = _merge_small_regions(labels, min_region_voxels, reach=3 + 2 * thicken)
        # compact ids ordered by size (largest region becomes label 1)
        ids, counts = np.unique(labels[labels > 0], return_counts=True)
        order = ids[np.argsort(-counts, kind="stable")]
        remap = np.zeros(labels.max() + 1, dtype=np.int64)
        for new, old in enumerate(order, start=1):
            remap[old] = new
        labels = remap[labels]
        # claim the band for the nearest region so labels partition the grid
        if (labels == 0).any() and (labels > 0).any():
            _, idx = ndimage.distance_transform_edt(labels == 0, return_indices=True)
            labels = labels[idx[0], idx[1], idx[2]]
        surface_band = sv
    else:
        labels = sv.astype(np.int64)
        surface_band = voxelize_surface(surface, grid)

    region_volumes = {
        int(i): float(c) * grid.voxel_volume
        for i, c in zip(*np.unique(labels[labels > 0], return_counts=True))
    }

    interfaces = {}
    adjacency = set()
    interface_areas = {}
    if surface.n_triangles > 0:
        lab_m, lab_p, pts_m, pts_p = _assign_sides(surface, grid, labels)
        ok = (lab_m > 0) & (lab_p > 0) & (lab_m != lab_p)
        areas = surface.areas()
        inc = surface.incenters()
        lo = np.minimum(lab_m, lab_p)
        hi = np.maximum(lab_m, lab_p)
        swap = lab_m > lab_p  # points_lo must lie in the lower-label region
        p_lo = np.where(swap[:, None], pts_p, pts_m)
        p_hi = np.where(swap[:, None], pts_m, pts_p)
        for pair in {(int(a), int(b)) for a, b in zip(lo[ok], hi[ok])}:
            sel = np.flatnonzero(ok & (lo == pair[0]) & (hi == pair[1]))
            tri = InterfaceTriangles(
                indices=sel,
                areas=areas[sel],
                incenters=inc[sel],
                normals=surface.normals[sel],
                points_lo=p_lo[sel],
                points_hi=p_hi[sel],
            )
            if tri.total_area <= 0:
                continue
            interfaces[pair] = tri
            adjacency.add(pair)
            interface_areas[pair] = tri.total_area

    return RegionLabeling(
        grid=grid,
        labels=labels,
        adjacency=frozenset(adjacency),
        interfaces=interfaces,
        region_volumes=region_volumes,
        interface_areas=interface_areas,
        surface_voxels=surface_band,
    )


def interface_jump_magnitudes(labeling: RegionLabeling, field: ScalarVolume) -> dict:
    """Two-sided field differences across every interface.

    For each region pair (m, n), m < n, samples the field at each triangle's
    stored side points and reports ``field_n_side - field_m_side`` with
    summary statistics; used for threshold diagnostics.
    """
    out = {}
    vals = field.values
    for pair, tri in labeling.interfaces.items():
        f_lo = sample_trilinear(vals, labeling.grid, tri.points_lo)
        f_hi = sample_trilinear(vals, labeling.grid, tri.points_hi)
        diffs = f_hi - f_lo
        out[pair] = {
            "diffs": diffs,
            "areas": tri.areas,
            "median": float(np.median(diffs)),
            "mean": float(np.average(diffs, weights=tri.areas)),
        }
    return out


def match_regions(est_labels, true_labels):
    """Best-overlap matching of estimated to ground-truth regions.

    Returns ``{est_id: (true_id, jaccard)}`` using greedy matching by
    descending Jaccard overlap; unmatched estimated regions map to (0, 0.0).
    """
    est_ids = [int(i) for i in np.unique(est_labels) if i > 0]
    true_ids = [int(i) for i in np.unique(true_labels) if i > 0]
    scores = []
    for e in est_ids:
        me = est_labels == e
        ne = me.sum()
        for t in true_ids:
            mt = true_labels == t
            inter = float(np.logical_and(me, mt).sum())
            if inter == 0:
                continue
            union = float(ne + mt.sum() - inter)
            scores.append((inter / union, e, t))
    scores.sort(reverse=True)
    out = {}
    used_true = set()
    for j, e, t in scores:
        if e in out or t in used_true:
            continue
        out[e] = (t, j)
        used_true.add(t)
    for e in est_ids:
        out.setdefault(e, (0, 0.0))
    return out
