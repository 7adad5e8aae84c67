"""Command-line interface: compose the forward and reconstruction stages.

Subcommands mirror the library stages (phantom, solve, derive, detect,
segment, estimate), plus an end-to-end ``pipeline`` and a ``verify`` suite of
model diagnostics. All heavy imports happen inside ``main`` so that the
``QPAT_THREADS`` cap can be applied to the numerics libraries first.
"""

from __future__ import annotations

import argparse
import json
import os
import sys


def _apply_thread_cap():
    cap = os.environ.get("QPAT_THREADS")
    if not cap:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, cap)


def build_parser():
    p = argparse.ArgumentParser(prog="qpat", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("phantom", help="rasterize a phantom JSON to parameter volumes")
    sp.add_argument("--spec", required=True)
    sp.add_argument("--out-dir", required=True)

    sp = sub.add_parser("solve", help="simulate initial pressure for one illumination")
    sp.add_argument("--phantom", required=True)
    sp.add_argument("--illum", default="uniform:1.0", help="uniform:VALUE or face:+x[:PEAK[:WIDTH]]")
    sp.add_argument("--out", required=True)
    sp.add_argument("--out-fluence")
    sp.add_argument("--noise", type=float, default=0.0)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--cg-tolerance", type=float, default=1e-8)

    sp = sub.add_parser("derive", help="write smoothed derivative volumes of a field")
    sp.add_argument("--in", dest="infile", required=True)
    sp.add_argument("--sigma", type=float, default=1.0)
    sp.add_argument("--out-grad")
    sp.add_argument("--out-lap")

    sp = sub.add_parser("detect", help="extract a jump surface from a volume")
    sp.add_argument("--in", dest="infile", required=True)
    sp.add_argument("--sigma", type=float, default=1.5)
    sp.add_argument("--rho-low", type=float, required=True)
    sp.add_argument("--rho-high", type=float, required=True)
    sp.add_argument("--min-area", type=float)
    sp.add_argument("--out", required=True, help="OBJ output; a CSV sidecar is written next to it")

    sp = sub.add_parser("segment", help="three-stage segmentation of pressure volumes")
    sp.add_argument("--in", dest="infiles", nargs="+", required=True)
    sp.add_argument("--tau0", type=float, default=0.35)
    sp.add_argument("--tau1", type=float, default=0.35)
    sp.add_argument("--tau2", type=float, default=0.6)
    sp.add_argument("--sigma", type=float, default=1.5)
    sp.add_argument("--derivative-sigma", type=float, default=1.0)
    sp.add_argument("--out-labels", required=True)
    sp.add_argument("--out-surface", required=True)
    sp.add_argument("--report")

    sp = sub.add_parser("estimate", help="estimate per-region (mu, D, Gamma)")
    sp.add_argument("--in", dest="infiles", nargs="+", required=True)
    sp.add_argument("--labels", required=True)
    sp.add_argument("--surface", required=True)
    sp.add_argument("--ref-region", type=int, required=True)
    sp.add_argument(
        "--ref",
        required=True,
        help="KIND:V1,V2[,V3] with KIND one of mu_gamma, d_gamma, full, mu_d",
    )
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--truth", help="phantom JSON; appends true values and relative errors")
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("pipeline", help="run phantom -> solve -> segment -> estimate")
    sp.add_argument("--config", required=True)
    sp.add_argument("--out-dir", help="overrides the config's output directory")

    sp = sub.add_parser("verify", help="model diagnostics: scaling gauge, flux continuity, gradient spanning")
    sp.add_argument("--config", required=True)
    sp.add_argument("--out-dir")
    return p


def _parse_illum(text):
    from .fem import IlluminationPattern

    parts = text.split(":")
    if parts[0] == "uniform":
        return IlluminationPattern.uniform(float(parts[1]) if len(parts) > 1 else 1.0)
    if parts[0] == "face":
        face = parts[1]
        peak = float(parts[2]) if len(parts) > 2 else 1.0
        width = float(parts[3]) if len(parts) > 3 else None
        return IlluminationPattern.face(face, peak=peak, width=width)
    raise SystemExit(f"unknown illumination spec {text!r}")


def _parse_reference(region, text):
    from .estimate import ReferenceValues

    kind, _, rest = text.partition(":")
    values = [float(v) for v in rest.split(",") if v]
    return ReferenceValues(region, kind, tuple(values))


def cmd_phantom(args):
    from .volume import load_phantom_json, rasterize_phantom, write_labels, write_volume

    spec = load_phantom_json(args.spec)
    maps = rasterize_phantom(spec)
    os.makedirs(args.out_dir, exist_ok=True)
    write_volume(maps.mu, os.path.join(args.out_dir, "mu.qvol"))
    write_volume(maps.D, os.path.join(args.out_dir, "D.qvol"))
    write_volume(maps.Gamma, os.path.join(args.out_dir, "Gamma.qvol"))
    write_labels(maps.true_labels, maps.grid, os.path.join(args.out_dir, "true_labels.qvol"))
    print(f"wrote parameter maps for {len(spec.inclusions)} inclusion(s) to {args.out_dir}")
    return 0


def cmd_solve(args):
    from .fem import FluenceSolver, SolveOptions, build_mesh, synthesize_pressure
    from .volume import load_phantom_json, rasterize_phantom, write_volume

    spec = load_phantom_json(args.phantom)
    maps = rasterize_phantom(spec)
    mesh = build_mesh(spec.grid)
    opts = SolveOptions(cg_tolerance=args.cg_tolerance, noise_level=args.noise, rng_seed=args.seed)
    solver = FluenceSolver(mesh, maps, opts)
    u = solver.solve(_parse_illum(args.illum))
    H = synthesize_pressure(u, maps, opts)
    write_volume(H, args.out)
    if args.out_fluence:
        write_volume(u, args.out_fluence)
    print(f"wrote {args.out}")
    return 0


def cmd_derive(args):
    import numpy as np

    from .scale_space import derivatives
    from .volume import ScalarVolume, read_volume, write_volume

    vol = read_volume(args.infile)
    field = derivatives(vol, args.sigma)
    if args.out_grad:
        write_volume(ScalarVolume(vol.grid, field.gradient_magnitude()), args.out_grad)
        print(f"wrote {args.out_grad}")
    if args.out_lap:
        write_volume(ScalarVolume(vol.grid, field.laplacian()), args.out_lap)
        print(f"wrote {args.out_lap}")
    if not (args.out_grad or args.out_lap):
        print("nothing to do: pass --out-grad and/or --out-lap", file=sys.stderr)
        return 2
    return 0


def _sidecar(path):
    base, _ = os.path.splitext(path)
    return base + ".csv"


def cmd_detect(args):
    from .edge_detect import EdgeOptions, detect_edges, save_surface
    from .volume import read_volume

    vol = read_volume(args.infile)
    opts = EdgeOptions(
        sigma=args.sigma,
        rho_low=args.rho_low,
        rho_high=args.rho_high,
        min_component_area=args.min_area,
    )
    surface = detect_edges(vol, opts)
    save_surface(surface, args.out, _sidecar(args.out))
    print(f"wrote {args.out} ({surface.n_triangles} triangles)")
    return 0


def cmd_segment(args):
    import csv as csvmod

    from .edge_detect import save_surface
    from .segment import StageThresholds, segment
    from .volume import read_volume, write_labels

    vols = [read_volume(f) for f in args.infiles]
    thr = StageThresholds(
        tau0=args.tau0,
        tau1=args.tau1,
        tau2=args.tau2,
        sigma_detect=args.sigma,
        derivative_sigma=args.derivative_sigma,
    )
    labeling, surface = segment(vols, thr)
    write_labels(labeling.labels, labeling.grid, args.out_labels)
    save_surface(surface, args.out_surface, _sidecar(args.out_surface))
    if args.report:
        with open(args.report, "w", newline="") as fh:
            writer = csvmod.writer(fh)
            writer.writerow(["region", "voxels", "volume", "neighbors", "interface_areas"])
            for m in labeling.region_ids():
                neighbors = sorted(
                    n for pair in labeling.adjacency if m in pair for n in pair if n != m
                )
                areas = [round(labeling.interface_areas[tuple(sorted((m, n)))], 6) for n in neighbors]
                writer.writerow(
                    [m, labeling.voxel_count(m), repr(labeling.region_volumes[m]),
                     " ".join(map(str, neighbors)), " ".join(map(str, areas))]
                )
    print(
        f"wrote {args.out_labels} and {args.out_surface}: "
        f"{labeling.n_regions} regions, {surface.n_triangles} triangles"
    )
    return 0


def cmd_estimate(args):
    from .edge_detect import load_surface
    from .estimate import EstimateOptions, estimate_parameters
    from .segment import build_region_labeling, match_regions
    from .volume import load_phantom_json, rasterize_phantom, read_labels, read_volume

    vols = [read_volume(f) for f in args.infiles]
    labels, grid = read_labels(args.labels)
    surface = load_surface(args.surface, _sidecar(args.surface) if os.path.exists(_sidecar(args.surface)) else None)
    labeling = build_region_labeling(labels, grid, surface)
    reference = _parse_reference(args.ref_region, args.ref)
    report = estimate_parameters(vols, labeling, reference, EstimateOptions(seed=args.seed))

    truth = None
    if args.truth:
        maps = rasterize_phantom(load_phantom_json(args.truth))
        match = match_regions(labeling.labels, maps.true_labels)
        truth = {}
        for est_id, (true_id, _) in match.items():
            if true_id == 0:
                truth[est_id] = (float("nan"),) * 3
                continue
            sel = maps.true_labels == true_id
            truth[est_id] = (
                float(maps.mu.values[sel][0]),
                float(maps.D.values[sel][0]),
                float(maps.Gamma.values[sel][0]),
            )
    report.write_csv(args.out, truth=truth)
    print(f"wrote {args.out} ({len(report.regions)} regions)")
    return 0


# ---------------------------------------------------------------------------
# pipeline / verify
# ---------------------------------------------------------------------------


def _load_config(path):
    with open(path) as fh:
        cfg = json.load(fh)
    cfg.setdefault("illuminations", ["uniform:1.0"])
    cfg.setdefault("noise_level", 0.0)
    cfg.setdefault("seed", 0)
    cfg.setdefault("cg_tolerance", 1e-8)
    cfg.setdefault("thresholds", {})
    cfg.setdefault("estimate", {})
    cfg.setdefault("reference", {"region": "largest", "kind": "d_gamma", "values": [1.0, 1.0]})
    if "phantom" not in cfg or "out_dir" not in cfg:
        raise SystemExit("config must define 'phantom' and 'out_dir'")
    base = os.path.dirname(os.path.abspath(path))
    if not os.path.isabs(cfg["phantom"]):
        cfg["phantom"] = os.path.join(base, cfg["phantom"])
    if not os.path.isabs(cfg["out_dir"]):
        cfg["out_dir"] = os.path.join(base, cfg["out_dir"])
    return cfg


def _resolve_reference(ref_cfg, labeling):
    from .estimate import ReferenceValues

    region = ref_cfg.get("region", "largest")
    if region == "largest":
        region = max(labeling.region_volumes, key=labeling.region_volumes.get)
    return ReferenceValues(int(region), ref_cfg["kind"], tuple(ref_cfg["values"]))


def run_pipeline(config, out_dir=None):
    """Run phantom -> solve (K illuminations) -> segment -> estimate.

    ``config`` is a dict (see ``_load_config``) or a path to a JSON config.
    Writes all stage artifacts plus ``manifest.json`` into the output
    directory and returns the estimate report.
    """
    import platform
    import time

    import numpy as np
    import scipy

    from . import __version__
    from .edge_detect import save_surface
    from .estimate import EstimateOptions, estimate_parameters
    from .fem import FluenceSolver, SolveOptions, build_mesh, synthesize_pressure
    from .segment import StageThresholds, match_regions, segment
    from .volume import load_phantom_json, rasterize_phantom, write_labels, write_volume

    if isinstance(config, str):
        config = _load_config(config)
    out_dir = out_dir or config["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    t_start = time.time()
    timings = {}

    spec = load_phantom_json(config["phantom"])
    maps = rasterize_phantom(spec)
    write_labels(maps.true_labels, maps.grid, os.path.join(out_dir, "true_labels.qvol"))

    mesh = build_mesh(spec.grid)
    solve_opts = SolveOptions(
        cg_tolerance=config["cg_tolerance"],
        noise_level=config["noise_level"],
        rng_seed=config["seed"],
    )
    solver = FluenceSolver(mesh, maps, solve_opts)
    timings["setup"] = time.time() - t_start

    H_volumes = []
    h_paths = []
    for k, illum_text in enumerate(config["illuminations"]):
        u = solver.solve(_parse_illum(illum_text))
        # per-measurement noise seeds derived from the master seed by offset
        opts_k = SolveOptions(
            cg_tolerance=config["cg_tolerance"],
            noise_level=config["noise_level"],
            rng_seed=config["seed"] + 1000 * k,
        )
        H = synthesize_pressure(u, maps, opts_k)
        path = os.path.join(out_dir, f"H{k:02d}.qvol")
        write_volume(H, path)
        h_paths.append(path)
        H_volumes.append(H)
    timings["solve"] = time.time() - t_start - timings["setup"]

    thr = StageThresholds(**config["thresholds"])
    labeling, surface = segment(H_volumes, thr)
    write_labels(labeling.labels, labeling.grid, os.path.join(out_dir, "labels.qvol"))
    save_surface(
        surface,
        os.path.join(out_dir, "edges.obj"),
        os.path.join(out_dir, "edges.csv"),
    )
    timings["segment"] = time.time() - t_start - sum(timings.values())

    reference = _resolve_reference(config["reference"], labeling)
    est_opts = EstimateOptions(seed=config["seed"], **config["estimate"])
    report = estimate_parameters(H_volumes, labeling, reference, est_opts)

    match = match_regions(labeling.labels, maps.true_labels)
    truth = {}
    for est_id, (true_id, _) in match.items():
        if true_id == 0:
            truth[est_id] = (float("nan"),) * 3
            continue
        sel = maps.true_labels == true_id
        truth[est_id] = (
            float(maps.mu.values[sel][0]),
            float(maps.D.values[sel][0]),
            float(maps.Gamma.values[sel][0]),
        )
    report.write_csv(os.path.join(out_dir, "estimates.csv"), truth=truth)
    timings["estimate"] = time.time() - t_start - sum(timings.values())

    manifest = {
        "version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "config": {k: v for k, v in config.items() if k != "out_dir"},
        "artifacts": {
            "pressure": [os.path.basename(p) for p in h_paths],
            "labels": "labels.qvol",
            "surface": "edges.obj",
            "estimates": "estimates.csv",
        },
        "n_regions": labeling.n_regions,
        "reference_region": reference.region,
        "region_match": {str(e): {"true": t, "jaccard": j} for e, (t, j) in match.items()},
        "timings_s": {k: round(v, 3) for k, v in timings.items()},
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")

    print(f"pipeline finished: {labeling.n_regions} regions -> {out_dir}")
    for m, est in sorted(report.regions.items()):
        print(
            f"  region {m}: mu={est.mu:.5g} D={est.D:.5g} Gamma={est.Gamma:.5g} "
            f"(triangles={est.n_triangles}, interior samples={est.n_lap_samples})"
        )
    return report


def run_verify(config, out_dir=None):
    """Three diagnostics: scaling gauge invariance, interface flux continuity
    under refinement, and the gradient-spanning (determinant) map."""
    import numpy as np

    from .edge_detect import check_determinant_condition
    from .fem import FluenceSolver, SolveOptions, build_mesh, synthesize_pressure, transmission_residual
    from .scale_space import derivatives
    from .volume import (
        GridSpec,
        PhantomSpec,
        ScalarVolume,
        load_phantom_json,
        rasterize_phantom,
        write_volume,
    )

    if isinstance(config, str):
        config = _load_config(config)
    out_dir = out_dir or config["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    spec = load_phantom_json(config["phantom"])
    cg_tol = config["cg_tolerance"]
    lam = float(config.get("scaling_lambda", 3.0))
    results = {}

    def scaled(spec, lam):
        return PhantomSpec(
            grid=spec.grid,
            background=(spec.background[0] * lam, spec.background[1] * lam, spec.background[2] / lam),
            inclusions=tuple(
                (shape, mu * lam, D * lam, Gamma / lam) for shape, mu, D, Gamma in spec.inclusions
            ),
        )

    illum = _parse_illum(config["illuminations"][0])
    opts = SolveOptions(cg_tolerance=cg_tol)

    # 1. scaling gauge: (lam mu, lam D, Gamma/lam) must reproduce H
    mesh = build_mesh(spec.grid)
    H_pair = []
    for sp in (spec, scaled(spec, lam)):
        maps = rasterize_phantom(sp)
        u = FluenceSolver(mesh, maps, opts).solve(illum)
        H_pair.append(synthesize_pressure(u, maps, opts).values)
    scale_diff = float(np.abs(H_pair[1] - H_pair[0]).max() / np.abs(H_pair[0]).max())
    results["scaling_invariance"] = {
        "lambda": lam,
        "max_rel_diff": scale_diff,
        "bound": 100.0 * cg_tol,
        "pass": scale_diff <= 100.0 * cg_tol,
    }

    # 2. interface flux continuity under refinement (coarsened reruns)
    residuals = []
    for factor in (4, 2, 1):
        dims = tuple(max(8, d // factor) for d in spec.grid.dims)
        spacing = tuple(
            s * d / nd for s, d, nd in zip(spec.grid.spacing, spec.grid.dims, dims)
        )
        grid = GridSpec(dims, spacing, spec.grid.origin)
        sp = PhantomSpec(grid=grid, background=spec.background, inclusions=spec.inclusions)
        maps = rasterize_phantom(sp)
        u = FluenceSolver(build_mesh(grid), maps, opts).solve(_parse_illum(config["illuminations"][0]))
        stats = transmission_residual(u, maps)
        worst = max((s["relative"] for s in stats.values()), default=0.0)
        residuals.append(worst)
    results["transmission_residual"] = {
        "coarse_to_fine": residuals,
        "pass": all(residuals[i] > residuals[i + 1] for i in range(len(residuals) - 1))
        or residuals[-1] == 0.0,
    }

    # 3. determinant condition map for the configured illuminations
    maps = rasterize_phantom(spec)
    solver = FluenceSolver(mesh, maps, opts)
    grads = []
    for illum_text in config["illuminations"]:
        u = solver.solve(_parse_illum(illum_text))
        grads.append(derivatives(u, 1.0).grad)
    if len(grads) >= 3:
        det_map = check_determinant_condition(grads, spec.grid)
        det_path = os.path.join(out_dir, "determinant_condition.qvol")
        write_volume(det_map, det_path)
        frac_pos = float((det_map.values > 1e-6).mean())
        results["determinant_condition"] = {
            "n_illuminations": len(grads),
            "fraction_positive": frac_pos,
            "map": det_path,
            "pass": True,
        }
    else:
        results["determinant_condition"] = {
            "n_illuminations": len(grads),
            "skipped": "needs at least 3 illuminations",
            "pass": True,
        }

    with open(os.path.join(out_dir, "verify.json"), "w") as fh:
        json.dump(results, fh, indent=2, sort_keys=True)
        fh.write("\n")
    for name, res in results.items():
        status = "PASS" if res.get("pass") else "FAIL"
        detail = {k: v for k, v in res.items() if k != "pass"}
        print(f"{status} {name}: {detail}")
    return results


def main(argv=None):
    _apply_thread_cap()
    args = build_parser().parse_args(argv)
    handlers = {
        "phantom": cmd_phantom,
        "solve": cmd_solve,
        "derive": cmd_derive,
        "detect": cmd_detect,
        "segment": cmd_segment,
        "estimate": cmd_estimate,
        "pipeline": lambda a: 0 if run_pipeline(a.config, a.out_dir) else 1,
        "verify": lambda a: 0 if run_verify(a.config, a.out_dir) is not None else 1,
    }
    return handlers[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
