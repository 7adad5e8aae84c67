"""Least-squares recovery of per-region optical parameters from jump data.

Works in the log decomposition ``a = log(Gamma mu)``, ``b = log(D / (Gamma mu))``,
``c = log(mu / D)``; the parameter triple is ``(mu, D, Gamma) =
(A B C, A B, 1 / (B C))`` with ``A = e^a`` etc. Jumps of ``a`` across region
interfaces equal jumps of ``log H``; jumps of ``b`` equal minus the jumps of
``log |grad H . nu|``; ``c`` is read off locally from ``lap H / H``. The
pairwise jump observations are assembled into two small normal-equation
systems whose gauge is fixed by reference values in one region.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .segment import RegionLabeling
from .volume import ScalarVolume

__all__ = [
    "UnderdeterminedError",
    "DisconnectedRegionsError",
    "ReferenceValues",
    "EstimateOptions",
    "InterfaceSamples",
    "PairSamples",
    "RegionEstimate",
    "EstimateReport",
    "fit_interface_values",
    "estimate_mu_over_D",
    "solve_loglinear_systems",
    "assemble_parameters",
    "recover_from_reference_pair",
    "estimate_parameters",
]


class UnderdeterminedError(ValueError):
    """The provided reference information cannot fix the parameter triple."""


class DisconnectedRegionsError(ValueError):
    def __init__(self, message, unreachable):
        super().__init__(message)
        self.unreachable = tuple(unreachable)


@dataclass(frozen=True)
class ReferenceValues:
    """Known parameter values in one region.

    ``kind`` is one of ``mu_gamma`` (mu, Gamma), ``d_gamma`` (D, Gamma),
    ``full`` (mu, D, Gamma) or ``mu_d`` (mu, D). The last is representable but
    rejected by recovery: it leaves the triple underdetermined.
    """

    region: int
    kind: str
    values: tuple

    def __post_init__(self):
        kinds = {"mu_gamma": 2, "d_gamma": 2, "full": 3, "mu_d": 2}
        if self.kind not in kinds:
            raise ValueError(f"unknown reference kind {self.kind!r}")
        if len(self.values) != kinds[self.kind]:
            raise ValueError(f"{self.kind} needs {kinds[self.kind]} values")
        if any(v <= 0 for v in self.values):
            raise ValueError("reference values must be > 0")
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))

    @staticmethod
    def mu_gamma(region, mu, Gamma):
        return ReferenceValues(region, "mu_gamma", (mu, Gamma))

    @staticmethod
    def d_gamma(region, D, Gamma):
        return ReferenceValues(region, "d_gamma", (D, Gamma))

    @staticmethod
    def full(region, mu, D, Gamma):
        return ReferenceValues(region, "full", (mu, D, Gamma))

    @staticmethod
    def mu_d(region, mu, D):
        return ReferenceValues(region, "mu_d", (mu, D))


@dataclass(frozen=True)
class EstimateOptions:
    fit_radius_voxels: float = 4.0
    weight_width_voxels: float | None = None  # default fit_radius / 2
    min_fit_points: int = 12
    g_floor_rel: float = 0.05
    lap_sample_count: int | None = None  # default min(500, 10% of region voxels)
    lap_min_points: int = 20
    seed: int = 0
    # points closer than this to the triangle plane are dropped from the
    # one-sided fits: sub-voxel surface error can put them on the wrong side
    exclusion_margin_voxels: float = 1.5
    max_fit_points: int = 240
    # optional Gaussian pre-smoothing (in voxels) of the data used by the
    # local fits; cuts per-point noise for noisy runs. The exclusion margin
    # must clear the smoothing halo around the interface, so it is widened by
    # 2 * data_smoothing_voxels automatically.
    data_smoothing_voxels: float = 0.0
    # order of the one-sided log fits: 2 captures the slope relaxation away
    # from the interface, which a linear model turns into a systematic
    # normal-derivative bias at coarse resolution
    fit_order: int = 2
    # the interior Laplacian fits may use their own (larger) radius: noisy
    # data needs a wide stencil before lap H rises above the noise floor.
    # lap_margin_voxels is the required sample distance from the surface
    # (defaults to the lap fit radius).
    lap_fit_radius_voxels: float | None = None
    lap_margin_voxels: float | None = None

    def __post_init__(self):
        if self.fit_order not in (1, 2):
            raise ValueError("fit_order must be 1 or 2")

    @property
    def side_min_points(self):
        return max(self.min_fit_points, 20 if self.fit_order == 2 else 12)

    @property
    def lap_radius(self):
        return self.lap_fit_radius_voxels if self.lap_fit_radius_voxels is not None else self.fit_radius_voxels

    @property
    def lap_margin(self):
        return self.lap_margin_voxels if self.lap_margin_voxels is not None else self.lap_radius

    @property
    def width(self):
        return self.weight_width_voxels if self.weight_width_voxels is not None else 0.5 * self.fit_radius_voxels


@dataclass
class PairSamples:
    """Per-interface fit results, arrays shaped (K, T) over measurements/triangles.

    ``h_*`` are log-pressure fits at the incenter per side, ``g_*`` log
    absolute normal derivatives; ``fit_ok`` marks triangles with enough points
    on both sides, ``valid`` additionally applies the normal-derivative floor
    (the g-restricted interface subset).
    """

    areas: np.ndarray
    h_lo: np.ndarray
    h_hi: np.ndarray
    g_lo: np.ndarray
    g_hi: np.ndarray
    fit_ok: np.ndarray
    valid: np.ndarray
    n_dropped: int


@dataclass
class InterfaceSamples:
    pairs: dict  # (m, n) -> PairSamples
    n_measurements: int
    l_samples: dict = field(default_factory=dict)  # region -> list over k of arrays


class _LabelPoints:
    """Per-region voxel centers, KD-trees and data values for local fits."""

    def __init__(self, labeling: RegionLabeling):
        grid = labeling.grid
        X, Y, Z = grid.center_coords()
        pts = np.stack([X, Y, Z], axis=-1).reshape(-1, 3)
        flat_labels = labeling.labels.ravel()
        self.grid = grid
        self.points = {}
        self.trees = {}
        self.flat_index = {}
        for m in labeling.region_ids():
            sel = np.flatnonzero(flat_labels == m)
            self.points[m] = pts[sel]
            self.flat_index[m] = sel
            self.trees[m] = cKDTree(pts[sel])

    def values_for(self, vol: ScalarVolume, m):
        return vol.values.ravel()[self.flat_index[m]]


def _logpoly_fit_multi(points, log_values, center, width, normal, order):
    """Weighted polynomial fit of K log-value columns sharing one geometry.

    ``log_values`` has shape (npoints, K). Returns arrays ``(h, g, |grad|)``
    of length K for the fitted exponentials f: ``h = log f(y)`` and
    ``g = log |grad f(y) . normal|`` at the fit center y (``-inf`` marks a
    zero normal derivative). With ``order=2`` the quadratic terms absorb the
    slope variation near the interface, so the gradient at y is unbiased to
    second order.
    """
    d = points - center
    w = np.exp(-0.5 * np.sum(d * d, axis=1) / width**2)
    sw = np.sqrt(w)
    cols = [np.ones((len(d), 1)), d]
    if order == 2:
        cols += [d**2, d[:, [0]] * d[:, [1]], d[:, [0]] * d[:, [2]], d[:, [1]] * d[:, [2]]]
    A = np.concatenate(cols, axis=1) * sw[:, None]
    coef, *_ = np.linalg.lstsq(A, log_values * sw[:, None], rcond=None)
    p = coef[0]
    q = coef[1:4]
    qn = np.abs(normal @ q)
    grad_mag = np.exp(p) * np.linalg.norm(q, axis=0)
    with np.errstate(divide="ignore"):
        g = p + np.log(qn)
    return p, g, grad_mag


def fit_interface_values(
    H_list,
    labeling: RegionLabeling,
    options: EstimateOptions | None = None,
) -> InterfaceSamples:
    """Fit one-sided log-linear models of the data around every interface triangle.

    For each triangle (incenter y, unit normal) and each side, a weighted
    log-linear fit to same-label grid values within the fit radius of y gives
    ``h = log f(y)`` and ``g = log |grad f(y) . nu|``. Interface geometry is
    taken from ``labeling.interfaces``. Triangles with too few points on a
    side are dropped from that interface; triangles whose normal derivative is
    below ``g_floor_rel`` times the interface's median gradient magnitude on
    either side are excluded from the g-restricted subset.
    """
    if isinstance(H_list, ScalarVolume):
        H_list = [H_list]
    opts = options or EstimateOptions()
    grid = labeling.grid
    h_mean = float(np.mean(grid.spacing))
    radius = opts.fit_radius_voxels * h_mean
    width = opts.width * h_mean

    lp = _LabelPoints(labeling)
    K = len(H_list)
    if opts.data_smoothing_voxels > 0:
        from .scale_space import smooth

        H_list = [smooth(H, opts.data_smoothing_voxels) for H in H_list]
    floored = [np.maximum(H.values, 1e-300) for H in H_list]

    pairs = {}
    for (m, n), tri in labeling.interfaces.items():
        T = len(tri.indices)
        h_lo = np.full((K, T), np.nan)
        h_hi = np.full((K, T), np.nan)
        g_lo = np.full((K, T), np.nan)
        g_hi = np.full((K, T), np.nan)
        grad_lo = np.full((K, T), np.nan)
        grad_hi = np.full((K, T), np.nan)
        fit_ok = np.zeros((K, T), dtype=bool)

        margin = (opts.exclusion_margin_voxels + 2.0 * opts.data_smoothing_voxels) * h_mean
        log_m = np.stack([np.log(fl.ravel()[lp.flat_index[m]]) for fl in floored], axis=1)
        log_n = np.stack([np.log(fl.ravel()[lp.flat_index[n]]) for fl in floored], axis=1)
        for t in range(T):
            y = tri.incenters[t]
            nu = tri.normals[t]
            sides = []
            for label, logv in ((m, log_m), (n, log_n)):
                cand = np.asarray(lp.trees[label].query_ball_point(y, radius), dtype=np.intp)
                if len(cand):
                    off = np.abs((lp.points[label][cand] - y) @ nu)
                    cand = cand[off >= margin]
                if len(cand) > opts.max_fit_points:
                    # deterministic spatially-spread subsample
                    stride = len(cand) / opts.max_fit_points
                    cand = np.sort(cand)[(np.arange(opts.max_fit_points) * stride).astype(np.intp)]
                sides.append((label, logv, cand))
            if any(len(c) < opts.side_min_points for _, _, c in sides):
                continue
            im = sides[0][2]
            inn = sides[1][2]
            h1, g1, gm1 = _logpoly_fit_multi(lp.points[m][im], log_m[im], y, width, nu, opts.fit_order)
            h2, g2, gm2 = _logpoly_fit_multi(lp.points[n][inn], log_n[inn], y, width, nu, opts.fit_order)
            fit_ok[:, t] = True
            h_lo[:, t], h_hi[:, t] = h1, h2
            grad_lo[:, t], grad_hi[:, t] = gm1, gm2
            g_lo[:, t] = g1
            g_hi[:, t] = g2

        valid = fit_ok.copy()
        for k in range(K):
            ok = fit_ok[k]
            if not ok.any():
                continue
            med = np.median(np.concatenate([grad_lo[k, ok], grad_hi[k, ok]]))
            floor = opts.g_floor_rel * med
            with np.errstate(over="ignore", invalid="ignore"):
                valid[k] = ok & (np.exp(g_lo[k]) >= floor) & (np.exp(g_hi[k]) >= floor)
        pairs[(m, n)] = PairSamples(
            areas=tri.areas,
            h_lo=h_lo,
            h_hi=h_hi,
            g_lo=g_lo,
            g_hi=g_hi,
            fit_ok=fit_ok,
            valid=valid,
            n_dropped=int((~fit_ok).sum()),
        )
    return InterfaceSamples(pairs=pairs, n_measurements=K)


def estimate_mu_over_D(
    H_list,
    labeling: RegionLabeling,
    options: EstimateOptions | None = None,
):
    """Per-region ``c = log(mu / D)`` from local quadratic fits.

    At seeded random interior points z (at least the fit radius away from the
    surface), a weighted quadratic is fitted to same-label data within the fit
    radius and ``l = log |lap q(z) / H(z)|`` recorded; ``c`` is the mean of l
    over samples and measurements. Regions with no eligible interior points
    get ``None`` (resolved or rejected downstream).

    Returns ``(c_hat, diagnostics)`` where diagnostics maps region ->
    {"n_samples", "l_values"}.
    """
    if isinstance(H_list, ScalarVolume):
        H_list = [H_list]
    opts = options or EstimateOptions()
    grid = labeling.grid
    h_mean = float(np.mean(grid.spacing))
    radius = opts.lap_radius * h_mean
    width = 0.5 * opts.lap_radius * h_mean
    if opts.data_smoothing_voxels > 0:
        from .scale_space import smooth

        H_list = [smooth(H, opts.data_smoothing_voxels) for H in H_list]

    from scipy import ndimage

    lp = _LabelPoints(labeling)
    # distance (in voxels) to the nearest on-surface voxel
    if labeling.surface_voxels.any():
        dist = ndimage.distance_transform_edt(~labeling.surface_voxels)
    else:
        dist = np.full(grid.dims, np.inf)

    c_hat, diags = {}, {}
    for m in labeling.region_ids():
        flat = lp.flat_index[m]
        eligible = np.flatnonzero(dist.ravel()[flat] >= opts.lap_margin)
        count = labeling.voxel_count(m)
        want = opts.lap_sample_count
        if want is None:
            want = min(500, max(1, count // 10))
        if len(eligible) == 0:
            c_hat[m] = None
            diags[m] = {"n_samples": 0, "l_values": []}
            continue
        rng = np.random.default_rng(np.random.SeedSequence([opts.seed, m]))
        if len(eligible) > want:
            chosen = eligible[rng.choice(len(eligible), size=want, replace=False)]
            chosen.sort()
        else:
            chosen = eligible
        centers = lp.points[m][chosen]
        neighborhoods = [lp.trees[m].query_ball_point(z, radius) for z in centers]

        l_all = []
        for H in H_list:
            vals = np.maximum(H.values, 1e-300).ravel()[flat]
            ls = []
            for ci, idx in zip(chosen, neighborhoods):
                if len(idx) < opts.lap_min_points:
                    continue
                z = lp.points[m][ci]
                d = lp.points[m][idx] - z
                w = np.exp(-0.5 * np.sum(d * d, axis=1) / width**2)
                sw = np.sqrt(w)
                A = np.concatenate(
                    [
                        np.ones((len(d), 1)),
                        d,
                        d**2,
                        d[:, [0]] * d[:, [1]],
                        d[:, [0]] * d[:, [2]],
                        d[:, [1]] * d[:, [2]],
                    ],
                    axis=1,
                ) * sw[:, None]
                coef, *_ = np.linalg.lstsq(A, vals[idx] * sw, rcond=None)
                lap = 2.0 * (coef[4] + coef[5] + coef[6])
                if lap == 0:
                    continue
                ls.append(float(np.log(np.abs(lap)) - np.log(vals[ci])))
            l_all.append(np.asarray(ls))
        n_samples = sum(len(ls) for ls in l_all)
        if n_samples == 0:
            c_hat[m] = None
        else:
            c_hat[m] = float(np.mean(np.concatenate(l_all)))
        diags[m] = {"n_samples": n_samples, "l_values": l_all}
    return c_hat, diags


def _resolve_reference_logs(reference: ReferenceValues, c_ref):
    """Gauge values (a_ref, b_ref) from the reference pair, using c when needed."""
    kind = reference.kind
    if kind == "full":
        mu, D, Gamma = reference.values
        return np.log(Gamma * mu), np.log(D / (Gamma * mu))
    if kind in ("mu_gamma", "d_gamma"):
        if c_ref is None:
            raise ValueError(
                f"reference kind {kind!r} needs the reference region's mu/D estimate"
            )
        mu, D, Gamma = recover_from_reference_pair(c_ref, reference)
        return np.log(Gamma * mu), np.log(D / (Gamma * mu))
    raise UnderdeterminedError(
        f"reference kind {kind!r} is underdetermined: the parameter triple "
        "cannot be determined uniquely from it"
    )


def _check_connected(region_ids, pair_weights, ref, what):
    """BFS from the reference over pairs with positive weight."""
    adj = {m: set() for m in region_ids}
    for (m, n), wsum in pair_weights.items():
        if wsum > 0:
            adj[m].add(n)
            adj[n].add(m)
    seen = {ref}
    stack = [ref]
    while stack:
        cur = stack.pop()
        for nb in adj[cur]:
            if nb not in seen:
                seen.add(nb)
                stack.append(nb)
    unreachable = sorted(set(region_ids) - seen)
    if unreachable:
        raise DisconnectedRegionsError(
            f"{what}: regions {unreachable} have no interface path to the "
            f"reference region {ref}",
            unreachable,
        )


def solve_loglinear_systems(
    samples: InterfaceSamples,
    labeling: RegionLabeling,
    reference: ReferenceValues,
    c_ref=None,
):
    """Solve the two interface normal-equation systems for a and b per region.

    For every non-reference region m the a-system reads
    ``sum_k (a_m - a_k) Area(I_mk) = sum_k integral_(I_mk) (h_m - h_k) dS``
    and the b-system is analogous on the g-restricted interfaces with the
    jump sign reversed. Surface integrals are triangle-area-weighted sums;
    multiple measurements contribute additively. The reference region's
    values are fixed from ``reference`` (resolving the pair via ``c_ref``
    when needed) and eliminated. The normal matrices are checked to be
    symmetric and weakly diagonally dominant with strict dominance in rows
    coupled to the reference before factorization.

    Returns ``(a_hat, b_hat, diagnostics)`` as dicts over region ids.
    """
    region_ids = labeling.region_ids()
    ref = reference.region
    if ref not in region_ids:
        raise ValueError(f"reference region {ref} not present in labeling")
    a_ref, b_ref = _resolve_reference_logs(reference, c_ref)

    def build_and_solve(value_lo, value_hi, mask, fixed_ref, sign, what):
        # per-pair summed weights (area x measurements) and jump integrals
        weights, integrals = {}, {}
        empty_pairs = []
        for pair, ps in samples.pairs.items():
            w = 0.0
            integ = 0.0
            vlo, vhi = value_lo(ps), value_hi(ps)
            msk = mask(ps)
            for k in range(samples.n_measurements):
                sel = msk[k]
                if not sel.any():
                    continue
                w += float(ps.areas[sel].sum())
                integ += float(np.sum(ps.areas[sel] * (vlo[k, sel] - vhi[k, sel])))
            weights[pair] = w
            integrals[pair] = integ
            if w == 0.0 and pair in labeling.interfaces:
                empty_pairs.append(pair)
        try:
            _check_connected(region_ids, weights, ref, what)
        except DisconnectedRegionsError as exc:
            if empty_pairs:
                raise DisconnectedRegionsError(
                    str(exc) + f"; interfaces with no usable triangles: {empty_pairs}",
                    exc.unreachable,
                ) from None
            raise

        unknowns = [m for m in region_ids if m != ref]
        pos = {m: i for i, m in enumerate(unknowns)}
        M = np.zeros((len(unknowns), len(unknowns)))
        rhs = np.zeros(len(unknowns))
        for (m, n), w in weights.items():
            if w == 0:
                continue
            jump = sign * integrals[(m, n)]
            if m != ref:
                i = pos[m]
                M[i, i] += w
                rhs[i] += jump
                if n == ref:
                    rhs[i] += w * fixed_ref
            if n != ref:
                j = pos[n]
                M[j, j] += w
                rhs[j] -= jump
                if m == ref:
                    rhs[j] += w * fixed_ref
            if m != ref and n != ref:
                M[pos[m], pos[n]] -= w
                M[pos[n], pos[m]] -= w

        if len(unknowns):
            if not np.array_equal(M, M.T):
                raise ValueError(f"{what}: normal matrix is not symmetric")
            offsum = np.abs(M).sum(axis=1) - np.abs(np.diag(M))
            slack = np.diag(M) - offsum
            if np.any(slack < -1e-9 * np.abs(np.diag(M))):
                raise ValueError(f"{what}: normal matrix is not diagonally dominant")
            coupled = set()
            for (m, n), w in weights.items():
                if w > 0 and ref in (m, n):
                    other = n if m == ref else m
                    if other != ref:
                        coupled.add(pos[other])
            if coupled and not np.all(slack[sorted(coupled)] > 0):
                raise ValueError(
                    f"{what}: rows coupled to the reference lack strict dominance"
                )
            sol = np.linalg.solve(M, rhs)
        else:
            sol = np.zeros(0)
        values = {ref: fixed_ref}
        values.update({m: float(sol[pos[m]]) for m in unknowns})

        # least-squares objective at the solution
        resid = 0.0
        for pair, ps in samples.pairs.items():
            vlo, vhi = value_lo(ps), value_hi(ps)
            msk = mask(ps)
            m, n = pair
            for k in range(samples.n_measurements):
                sel = msk[k]
                if not sel.any():
                    continue
                err = values[n] - values[m] + sign * (vlo[k, sel] - vhi[k, sel])
                resid += float(np.sum(ps.areas[sel] * err**2))
        return values, resid

    a_hat, resid_a = build_and_solve(
        lambda ps: ps.h_lo,
        lambda ps: ps.h_hi,
        lambda ps: ps.fit_ok,
        a_ref,
        +1.0,
        "a-system",
    )
    # b jumps carry the reversed sign: b_m - b_n = g_n - g_m
    b_hat, resid_b = build_and_solve(
        lambda ps: ps.g_lo,
        lambda ps: ps.g_hi,
        lambda ps: ps.valid,
        b_ref,
        -1.0,
        "b-system",
    )
    diagnostics = {"residual_a": resid_a, "residual_b": resid_b}
    return a_hat, b_hat, diagnostics


def assemble_parameters(a_hat, b_hat, c_hat):
    """Per-region (mu, D, Gamma) = (A B C, A B, 1/(B C)) from the log estimates."""
    regions = sorted(set(a_hat) | set(b_hat) | set(c_hat))
    out = {}
    for m in regions:
        missing = [
            name
            for name, d in (("a", a_hat), ("b", b_hat), ("c", c_hat))
            if d.get(m) is None
        ]
        if missing:
            raise ValueError(f"region {m}: missing log component(s) {missing}")
        A = np.exp(a_hat[m])
        B = np.exp(b_hat[m])
        C = np.exp(c_hat[m])
        out[m] = (float(A * B * C), float(A * B), float(1.0 / (B * C)))
    return out


def recover_from_reference_pair(c_hat, pair: ReferenceValues):
    """Complete a region's (mu, D, Gamma) from a known pair plus its c estimate.

    ``c_hat`` is the region's ``log(mu / D)`` (a float, or the dict returned
    by :func:`estimate_mu_over_D`). Pairs (mu, Gamma) and (D, Gamma) determine
    the triple; (mu, D), single values, or other combinations are rejected as
    underdetermined.
    """
    if isinstance(c_hat, dict):
        c_hat = c_hat.get(pair.region)
    if pair.kind == "full":
        mu, D, Gamma = pair.values
        return float(mu), float(D), float(Gamma)
    if pair.kind == "mu_d" or pair.kind not in ("mu_gamma", "d_gamma"):
        raise UnderdeterminedError(
            f"reference pair {pair.kind!r} is underdetermined: the parameter "
            "triple cannot be determined uniquely from it"
        )
    if c_hat is None:
        raise ValueError(
            f"region {pair.region}: no mu/D estimate available to complete the pair"
        )
    ratio = float(np.exp(c_hat))  # mu / D
    if pair.kind == "mu_gamma":
        mu, Gamma = pair.values
        return float(mu), float(mu / ratio), float(Gamma)
    D, Gamma = pair.values
    return float(D * ratio), float(D), float(Gamma)


@dataclass(frozen=True)
class RegionEstimate:
    region: int
    mu: float
    D: float
    Gamma: float
    a: float
    b: float
    c: float
    n_triangles: int
    n_lap_samples: int


@dataclass
class EstimateReport:
    """Per-region estimates with the intermediate log quantities and diagnostics."""

    regions: dict  # region id -> RegionEstimate
    reference: ReferenceValues
    residual_a: float
    residual_b: float

    def parameter_table(self):
        return {m: (r.mu, r.D, r.Gamma) for m, r in sorted(self.regions.items())}

    def write_csv(self, path, truth=None):
        """CSV rows per region; with ``truth`` (region -> (mu, D, Gamma)),
        appends the true values and relative errors."""
        cols = [
            "region", "mu", "D", "Gamma", "a", "b", "c",
            "n_triangles", "n_lap_samples", "residual_a", "residual_b",
        ]
        if truth is not None:
            cols += ["mu_true", "D_true", "Gamma_true", "err_mu", "err_D", "err_Gamma"]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(cols)
            for m, r in sorted(self.regions.items()):
                row = [
                    m, repr(r.mu), repr(r.D), repr(r.Gamma),
                    repr(r.a), repr(r.b), repr(r.c),
                    r.n_triangles, r.n_lap_samples,
                    repr(self.residual_a), repr(self.residual_b),
                ]
                if truth is not None:
                    tm, td, tg = truth[m]
                    row += [
                        repr(float(tm)), repr(float(td)), repr(float(tg)),
                        repr(abs(r.mu - tm) / tm),
                        repr(abs(r.D - td) / td),
                        repr(abs(r.Gamma - tg) / tg),
                    ]
                writer.writerow(row)


def estimate_parameters(
    H_list,
    labeling: RegionLabeling,
    reference: ReferenceValues,
    options: EstimateOptions | None = None,
) -> EstimateReport:
    """Full second-stage estimation: c from interiors, reference completion,
    interface fits, the two jump systems, and parameter assembly."""
    if isinstance(H_list, ScalarVolume):
        H_list = [H_list]
    opts = options or EstimateOptions()
    c_hat, c_diags = estimate_mu_over_D(H_list, labeling, opts)
    ref = reference.region
    mu_r, D_r, Gamma_r = recover_from_reference_pair(c_hat, reference)

    samples = fit_interface_values(H_list, labeling, opts)
    a_hat, b_hat, sys_diags = solve_loglinear_systems(
        samples, labeling, reference, c_ref=c_hat.get(ref)
    )
    triples = assemble_parameters(a_hat, b_hat, c_hat)
    triples[ref] = (mu_r, D_r, Gamma_r)  # reference values are exact by definition

    tri_counts = {m: 0 for m in labeling.region_ids()}
    for (m, n), ps in samples.pairs.items():
        used = int(ps.fit_ok.any(axis=0).sum())
        tri_counts[m] += used
        tri_counts[n] += used

    regions = {}
    for m in labeling.region_ids():
        mu, D, Gamma = triples[m]
        regions[m] = RegionEstimate(
            region=m,
            mu=mu,
            D=D,
            Gamma=Gamma,
            a=float(np.log(Gamma * mu)),
            b=float(np.log(D / (Gamma * mu))),
            c=float(c_hat[m]) if c_hat[m] is not None else float(np.log(mu / D)),
            n_triangles=tri_counts[m],
            n_lap_samples=c_diags[m]["n_samples"],
        )
    return EstimateReport(
        regions=regions,
        reference=reference,
        residual_a=sys_diags["residual_a"],
        residual_b=sys_diags["residual_b"],
    )
