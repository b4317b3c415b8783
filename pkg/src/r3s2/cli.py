"""Command-line front end.

Subcommands: kernel, montecarlo, enhance, glyphs, eigencurves, header and
replay. Each output gets a JSON manifest next to it (``<out>.manifest.json``)
holding the argument vector, so ``r3s2 replay MANIFEST`` reruns the command.

Exit codes: 0 success, 2 invalid flags or inputs, 3 numerical failure.
"""

import argparse
import csv
import io
import json
import math
import os
import sys
import time
import warnings

import numpy as np

from . import __version__
from .fields import atomic_write, FieldFormatError

__all__ = ["main", "build_parser", "glyph_mesh", "write_obj", "read_obj_groups",
           "EXIT_OK", "EXIT_USAGE", "EXIT_NUMERICAL"]

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERICAL = 3


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- helpers

def _csv_bytes(header, rows):
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(header)
    wr.writerows(rows)
    return buf.getvalue().encode()


def _write_manifest(out, command, argv, params, timings, outputs, extra=None, seed=None):
    man = {
        "subcommand": command,
        "argv": list(argv),
        "parameters": params,
        "version": __version__,
        "seed": seed,
        "timings": timings,
        "outputs": [os.path.basename(o) for o in outputs],
    }
    if extra:
        man.update(extra)
    path = str(out) + ".manifest.json"
    atomic_write(path, json.dumps(man, indent=2, sort_keys=True, default=_jsonable).encode())
    return path


def _jsonable(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    return str(o)


def _report_dir(args):
    d = getattr(args, "report", None)
    if d:
        os.makedirs(d, exist_ok=True)
    return d


def _stem(path):
    base = os.path.basename(str(path))
    for ext in (".r3s2", ".csv", ".obj"):
        if base.endswith(ext):
            return base[: -len(ext)]
    return base


# ---------------------------------------------------------------- kernel

def _process_params(args):
    from .evolution import ProcessParams

    return ProcessParams(process=args.process, D33=args.d33, D44=args.d44, D11=args.d11,
                         t=args.t, alpha=args.alpha, gamma_k=args.gamma_k)


def kernel_summary(field):
    """Mass, extrema and first spatial moment of a spatial kernel field."""
    if field.storage == "samples":
        dens = np.tensordot(field.values, field.sampling.weights, axes=([3], [0]))
        vmin, vmax = float(field.values.min()), float(field.values.max())
    else:
        dens = field.values[..., 0].real * math.sqrt(4 * math.pi)
        vmin = vmax = float("nan")
    dv = field.voxel_size ** 3
    mass = float(dens.sum() * dv)
    pos = field.positions()
    moment = (np.tensordot(dens, pos, axes=([0, 1, 2], [0, 1, 2])) * dv / mass).tolist()
    return {"mass": mass, "min": vmin, "max": vmax, "first_moment": moment}


def cmd_kernel(args, argv):
    from . import kernel_synthesis as ks
    from .approx import ApproxParams, log_approx_field
    from .fields import save_field
    from .sh_core import icosahedral_sampling

    t0 = time.perf_counter()
    grid = ks.make_grid(args.grid_n, args.grid_eta)
    if args.backend == "log-approx":
        if args.process != "diffusion" or args.t is None:
            raise UsageError("the log-approx backend supports diffusion with --t only")
        ap = ApproxParams(args.d33, args.d44, args.t, args.xi, args.time_scale)
        field = log_approx_field(grid.n_half, grid.voxel_size, ap)
        params = {"backend": "log-approx", **vars(ap)}
    else:
        p = _process_params(args)
        field = ks.spatial_kernel(grid, p, args.lmax)
        params = {"backend": "exact", **vars(p)}
        if args.storage == "samples":
            field = field.to_samples(icosahedral_sampling())
    t1 = time.perf_counter()
    save_field(field, args.out)
    outputs = [args.out]
    summary = kernel_summary(field)
    checks = {}
    if args.check:
        rep = ks.verify_symmetries(field, inversion=(args.process != "completion"))
        checks = rep.as_dict()
    rd = _report_dir(args)
    if rd:
        from .plotting import kernel_projection_figure, save_figure

        stem = _stem(args.out)
        rows = [["mass", repr(summary["mass"])], ["min", repr(summary["min"])],
                ["max", repr(summary["max"])]]
        rows += [[f"first_moment_{c}", repr(v)] for c, v in zip("xyz", summary["first_moment"])]
        rows += [[k, repr(v)] for k, v in checks.items() if isinstance(v, float)]
        csv_path = os.path.join(rd, stem + "_summary.csv")
        atomic_write(csv_path, _csv_bytes(["quantity", "value"], rows))
        png = os.path.join(rd, stem + "_projections.png")
        save_figure(kernel_projection_figure(field, f"{args.process} kernel"), png)
        outputs += [csv_path, png]
    timings = {"compute_s": t1 - t0, "total_s": time.perf_counter() - t0}
    params.update(grid_n=args.grid_n, grid_eta=args.grid_eta, lmax=args.lmax,
                  voxel_size=grid.voxel_size, storage=field.storage)
    _write_manifest(args.out, "kernel", argv, params, timings, outputs,
                    extra={"summary": summary, "checks": checks})
    return EXIT_OK


# ---------------------------------------------------------------- montecarlo

def cmd_montecarlo(args, argv):
    from . import kernel_synthesis as ks
    from . import montecarlo as mc
    from .fields import save_field

    cfg = mc.WalkConfig(process=args.process, M=args.walks, N=args.steps,
                        t=args.t if args.t is not None else 0.0, D33=args.d33, D44=args.d44,
                        seed=args.seed, alpha=args.alpha, gamma_k=args.gamma_k,
                        printed_step=args.printed_step, printed_tilt=args.printed_tilt)
    if args.alpha is None and args.t is None:
        raise UsageError("one of --t or --alpha is required")
    t0 = time.perf_counter()
    batch = mc.simulate_resolvent(cfg) if cfg.alpha is not None else mc.simulate(cfg)
    t1 = time.perf_counter()
    pitch = args.bin_pitch
    if pitch is None:
        pitch = ks.make_grid(args.grid_n, args.grid_eta).voxel_size
    bins = mc.SpatialBins(args.bins, pitch)
    hist = mc.bin(batch, bins, args.sphere_refinement)
    save_field(hist.to_field(), args.out)
    dump = str(args.out) + ".endpoints.f64"
    mc.save_batch(batch, dump)
    outputs = [args.out, dump, dump + ".json"]
    rd = _report_dir(args)
    if rd:
        from .plotting import histogram_comparison_figure, save_figure

        stem = _stem(args.out)
        pz = hist.counts.sum(axis=(0, 1, 3)) / max(1, hist.counts.sum())
        centers = (np.arange(bins.n) - bins.n // 2) * pitch
        csv_path = os.path.join(rd, stem + "_z_marginal.csv")
        atomic_write(csv_path, _csv_bytes(["z", "probability"],
                                          [[repr(float(c)), repr(float(v))] for c, v in zip(centers, pz)]))
        png = os.path.join(rd, stem + "_z_marginal.png")
        save_figure(histogram_comparison_figure(pz, None, centers), png)
        outputs += [csv_path, png]
    timings = {"simulate_s": t1 - t0, "total_s": time.perf_counter() - t0}
    params = dict(cfg.as_dict(), bins=args.bins, bin_pitch=pitch,
                  sphere_refinement=args.sphere_refinement)
    _write_manifest(args.out, "montecarlo", argv, params, timings, outputs, seed=args.seed,
                    extra={"n_outside": hist.n_outside})
    return EXIT_OK


# ---------------------------------------------------------------- enhance

def cmd_enhance(args, argv):
    from .convolve import shift_twist_convolve, load_field, save_field

    t0 = time.perf_counter()
    kernel = load_field(args.kernel)
    inp = load_field(args.input)
    out = shift_twist_convolve(kernel, inp, interpolation=args.interpolation, lmax=args.lmax)
    save_field(out, args.out)
    timings = {"total_s": time.perf_counter() - t0}
    params = {"kernel": os.path.basename(args.kernel), "input": os.path.basename(args.input),
              "interpolation": args.interpolation, "lmax": args.lmax}
    _write_manifest(args.out, "enhance", argv, params, timings, [args.out])
    return EXIT_OK


# ---------------------------------------------------------------- glyphs

def glyph_mesh(field, spacing=1, scale=1.0, refinement=2, crop=None, lmax=8):
    """Glyph surfaces y + nu U(y, n) n for every selected grid point.

    Returns (groups, faces, nu) where groups is a list of
    (name, vertices (n_v, 3)) and faces the shared 0-based triangle list.
    ``nu`` is chosen so the largest glyph radius is half the glyph spacing,
    times ``scale``.
    """
    from .sh_core import icosahedral_mesh, forward_transform, sh_matrix

    if field.domain != "spatial":
        raise UsageError("glyphs need a spatial-domain field")
    verts, faces = icosahedral_mesh(refinement)
    dims = field.dims
    sel = []
    for k in range(3):
        c = dims[k] // 2
        lo, hi = (0, dims[k]) if crop is None else (max(0, c - crop), min(dims[k], c + crop + 1))
        # keep the center on the lattice of selected points
        start = lo + ((c - lo) % spacing)
        sel.append(np.arange(start, hi, spacing))
    if any(s.size == 0 for s in sel):
        raise UsageError("no grid points selected")
    sub = field.values[np.ix_(sel[0], sel[1], sel[2])]
    if not np.any(sub):
        raise UsageError("field is empty (all values zero)")
    if field.storage == "sh":
        coeffs = sub
        L = field.lmax
    elif len(field.sampling) == len(verts) and np.allclose(field.sampling.directions, verts, atol=1e-12):
        coeffs = None
    else:
        L = lmax
        coeffs = forward_transform(sub, field.sampling, L)
    if coeffs is None:
        U = np.asarray(sub, dtype=float)
    else:
        U = (coeffs.reshape(-1, coeffs.shape[3]) @ sh_matrix(L, verts).T).real.reshape(sub.shape[:3] + (-1,))
    amp = float(np.abs(U).max()) if U.size else 0.0
    if not np.isfinite(amp) or amp == 0.0:
        raise UsageError("field is empty (all values zero)")
    nu = scale * 0.5 * spacing * field.voxel_size / amp
    groups = []
    ax = [(s - d // 2) * field.voxel_size for s, d in zip(sel, dims)]
    for a, i in enumerate(sel[0]):
        for b, j in enumerate(sel[1]):
            for c, k in enumerate(sel[2]):
                y = np.array([ax[0][a], ax[1][b], ax[2][c]])
                groups.append((f"voxel_{i}_{j}_{k}", y + nu * U[a, b, c][:, None] * verts))
    return groups, faces, nu


def write_obj(path, groups, faces, comment=""):
    """OBJ text: one group per voxel, faces indexed globally from 1."""
    out = io.StringIO()
    if comment:
        for line in comment.splitlines():
            out.write(f"# {line}\n")
    base = 1
    for name, v in groups:
        out.write(f"g {name}\n")
        for p in v:
            out.write(f"v {p[0]:.9g} {p[1]:.9g} {p[2]:.9g}\n")
        for f in faces + base:
            out.write(f"f {f[0]} {f[1]} {f[2]}\n")
        base += len(v)
    atomic_write(path, out.getvalue().encode())


def read_obj_groups(path):
    """Vertices of each group of an OBJ file written by ``write_obj``."""
    groups = {}
    cur = None
    with open(path) as fh:
        for line in fh:
            if line.startswith("g "):
                cur = line[2:].strip()
                groups[cur] = []
            elif line.startswith("v "):
                groups[cur].append([float(x) for x in line.split()[1:4]])
    return {k: np.array(v) for k, v in groups.items()}


def cmd_glyphs(args, argv):
    from .fields import load_field

    t0 = time.perf_counter()
    field = load_field(args.input)
    groups, faces, nu = glyph_mesh(field, args.spacing, args.scale, args.sphere_refinement,
                                   args.crop, args.lmax)
    write_obj(args.out, groups, faces, comment=f"glyph field, nu = {nu!r}")
    timings = {"total_s": time.perf_counter() - t0}
    params = {"input": os.path.basename(args.input), "spacing": args.spacing,
              "scale": args.scale, "nu": nu, "sphere_refinement": args.sphere_refinement,
              "crop": args.crop, "groups": len(groups), "vertices_per_glyph": int(faces.max() + 1)}
    _write_manifest(args.out, "glyphs", argv, params, timings, [args.out])
    return EXIT_OK


# ---------------------------------------------------------------- eigencurves

def cmd_eigencurves(args, argv):
    from . import spectral
    from .plotting import eigencurve_figure, save_figure

    if args.m < 0:
        raise UsageError("--m must be >= 0")
    if args.lmax < args.m:
        raise UsageError("--lmax must be >= --m")
    t0 = time.perf_counter()
    rhos, vals = spectral.eigencurves(args.m, args.rho_max, args.n_rho, args.lmax, "gswe")
    _, swe = spectral.eigencurves(args.m, args.rho_max, args.n_rho, args.lmax, "swe")
    if args.rho_max > args.m + 1:
        bp = spectral.detect_branch_points(args.m, args.rho_max, args.resolution, args.lmax).points
    else:
        bp = []
    buf = io.StringIO()
    spectral.write_eigencurves_csv(buf, args.m, rhos, vals)
    atomic_write(args.out, buf.getvalue().encode())
    stem = os.path.join(os.path.dirname(os.path.abspath(args.out)), _stem(args.out))
    swe_buf = io.StringIO()
    spectral.write_eigencurves_csv(swe_buf, args.m, rhos, swe)
    atomic_write(stem + "_swe.csv", swe_buf.getvalue().encode())
    atomic_write(stem + "_branch_points.csv",
                 _csv_bytes(["m", "index", "rho", "resolution"],
                            [[args.m, i, repr(float(r)), repr(args.resolution)] for i, r in enumerate(bp)]))
    png = stem + ".png"
    save_figure(eigencurve_figure(args.m, rhos, vals, bp, swe), png)
    outputs = [args.out, stem + "_swe.csv", stem + "_branch_points.csv", png]
    timings = {"total_s": time.perf_counter() - t0}
    params = {"m": args.m, "rho_max": args.rho_max, "n_rho": args.n_rho, "lmax": args.lmax,
              "resolution": args.resolution, "branch_points": [float(b) for b in bp]}
    _write_manifest(args.out, "eigencurves", argv, params, timings, outputs)
    return EXIT_OK


# ---------------------------------------------------------------- header / replay

def cmd_header(args, argv):
    from .convolve import header_text

    print(header_text(args.input))
    return EXIT_OK


def cmd_replay(args, argv):
    with open(args.manifest) as fh:
        man = json.load(fh)
    return main(man["argv"])


# ---------------------------------------------------------------- parser

def _positive_int(s):
    v = int(s)
    if v < 1:
        raise argparse.ArgumentTypeError("must be an integer >= 1")
    return v


def _process_flags(p, processes):
    p.add_argument("--process", choices=processes, required=True, help="stochastic process")
    p.add_argument("--d33", type=float, default=1.0, help="spatial diffusivity")
    p.add_argument("--d44", type=float, default=0.1, help="angular diffusivity")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--t", type=float, default=None, help="travel time")
    g.add_argument("--alpha", type=float, default=None,
                   help="rate of the exponential or Gamma travel time")
    p.add_argument("--gamma-k", type=int, default=1, help="Gamma shape k")


def build_parser():
    ap = argparse.ArgumentParser(
        prog="r3s2",
        description="Diffusion and convection-diffusion kernels on positions and orientations.")
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    k = sub.add_parser("kernel", help="compute a kernel on a cubic grid",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    _process_flags(k, ["diffusion", "completion", "elliptic"])
    k.add_argument("--d11", type=float, default=0.0, help="isotropic spatial diffusivity (elliptic)")
    k.add_argument("--lmax", type=int, default=12, help="SH truncation degree")
    k.add_argument("--grid-n", type=_positive_int, default=32, help="grid half-width N (2N+1 samples)")
    k.add_argument("--grid-eta", type=_positive_int, default=8, help="frequency extent factor")
    k.add_argument("--backend", choices=["exact", "log-approx"], default="exact",
                   help="spectral kernel or closed-form Gaussian approximation")
    k.add_argument("--xi", type=float, default=16.0, help="commutator weight (log-approx)")
    k.add_argument("--time-scale", type=float, default=1.0, help="time rescaling c >= 1 (log-approx)")
    k.add_argument("--storage", choices=["sh", "samples"], default="sh",
                   help="orientation storage of the output file")
    k.add_argument("--check", action="store_true", help="run the symmetry checks")
    k.add_argument("--report", default=None, help="directory for CSV summary and PNG figures")
    k.add_argument("--out", required=True, help="output .r3s2 path")

    m = sub.add_parser("montecarlo", help="random-walk histogram",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    _process_flags(m, ["diffusion", "completion"])
    m.add_argument("--walks", type=int, required=True, help="number of walks M (>= 1)")
    m.add_argument("--steps", type=int, default=200, help="steps per walk N")
    m.add_argument("--seed", type=int, default=0, help="random seed")
    m.add_argument("--bins", type=_positive_int, default=33, help="spatial bins per axis")
    m.add_argument("--bin-pitch", type=float, default=None,
                   help="bin side length; unset means the voxel pitch of --grid-n/--grid-eta")
    m.add_argument("--grid-n", type=_positive_int, default=16, help="grid half-width for the default pitch")
    m.add_argument("--grid-eta", type=_positive_int, default=2, help="frequency extent for the default pitch")
    m.add_argument("--sphere-refinement", type=int, default=3,
                   help="icosahedral refinements of the orientation bins")
    m.add_argument("--printed-step", action="store_true",
                   help="direction process: forward step sqrt(t/N) instead of t/N")
    m.add_argument("--printed-tilt", action="store_true",
                   help="tilt scale sqrt(2 t D44/N) instead of sqrt(4 t D44/N)")
    m.add_argument("--report", default=None, help="directory for the z-marginal CSV and PNG")
    m.add_argument("--out", required=True, help="output histogram .r3s2 path")

    e = sub.add_parser("enhance", help="shift-twist convolution of a field with a kernel",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    e.add_argument("--kernel", required=True, help="kernel .r3s2 (spatial, odd grid sizes)")
    e.add_argument("--input", required=True, help="input .r3s2 with orientation samples")
    e.add_argument("--interpolation", choices=["linear", "nearest"], default="linear",
                   help="kernel rotation scheme")
    e.add_argument("--lmax", type=int, default=None,
                   help="SH degree for rotating sample-stored kernels")
    e.add_argument("--out", required=True, help="output .r3s2 path")

    g = sub.add_parser("glyphs", help="glyph field as an OBJ mesh",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    g.add_argument("--input", required=True, help="spatial .r3s2 field")
    g.add_argument("--out", required=True, help="output OBJ path")
    g.add_argument("--spacing", type=_positive_int, default=1, help="grid stride between glyphs")
    g.add_argument("--scale", type=float, default=1.0,
                   help="multiplier of the automatic glyph size (<= 1 avoids overlaps)")
    g.add_argument("--crop", type=int, default=None, help="half-width in voxels around the center")
    g.add_argument("--sphere-refinement", type=int, default=2, help="glyph mesh refinement")
    g.add_argument("--lmax", type=int, default=8, help="SH degree for resampling sample storage")

    c = sub.add_parser("eigencurves", help="spheroidal eigenvalue curves and branch points",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    c.add_argument("--m", type=int, required=True, help="order m >= 0")
    c.add_argument("--rho-max", type=float, required=True, help="largest rho")
    c.add_argument("--n-rho", type=_positive_int, default=401, help="rho samples")
    c.add_argument("--lmax", type=int, default=24, help="Legendre truncation degree")
    c.add_argument("--resolution", type=float, default=1e-9, help="branch point bisection width")
    c.add_argument("--out", required=True, help="output CSV path")

    h = sub.add_parser("header", help="print the header of a .r3s2 file")
    h.add_argument("--input", required=True, help=".r3s2 file")

    r = sub.add_parser("replay", help="rerun the command recorded in a manifest")
    r.add_argument("manifest", help="a <out>.manifest.json file")
    return ap


_HANDLERS = {
    "kernel": cmd_kernel,
    "montecarlo": cmd_montecarlo,
    "enhance": cmd_enhance,
    "glyphs": cmd_glyphs,
    "eigencurves": cmd_eigencurves,
    "header": cmd_header,
    "replay": cmd_replay,
}


def main(argv=None):
    from .approx import BranchError, ChartError
    from .kernel_synthesis import HermitianSymmetryError

    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            return _HANDLERS[args.command](args, argv)
    except (np.linalg.LinAlgError, HermitianSymmetryError, BranchError, ChartError,
            FloatingPointError, ArithmeticError) as exc:
        print(f"r3s2: numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (UsageError, ValueError, FieldFormatError, OSError) as exc:
        print(f"r3s2: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
