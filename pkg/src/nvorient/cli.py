"""Command-line interface: simulate | fit | reconstruct | calibrate | sweep | degeneracy.

Exit codes
  0 success
  2 configuration or input error
  3 peak fit failure
  4 degenerate solution (several equal-cost solutions)
  5 solver did not converge
  6 partial success (some files or sweep cells failed)
  7 inconsistent data or bounds too tight
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .errors import (
    BoundsTooTightError,
    ConfigError,
    ConvergenceError,
    DegenerateGeometryError,
    FitError,
    GridError,
    InconsistentConstraintsError,
    InconsistentProjectionError,
    InconsistentSplittingError,
    NVError,
    SamplingError,
    UnidentifiableError,
)
from .geometry import KNOWN_100_AXES, AxesSet, OrientationParams, axes_from_params, match_axes
from .io import (
    RunManifest,
    csv_text,
    read_bias,
    read_config,
    read_spectrum,
    read_table,
    write_atomic,
    write_json,
    write_spectrum,
    write_table,
    bias_to_dict,
)
from .physics import DEFAULT_CONSTANTS
from .reconstruction import ReconstructionConfig, calibrate_coils, reconstruct
from .spectra import (
    BULK_FWHM,
    NANODIAMOND_FWHM,
    NoiseSpec,
    SplittingTable,
    fit_peaks,
    merge_hyperfine,
    splittings_from_peaks,
    synthesize,
)
from . import experiments as ex
from . import svg

log = logging.getLogger("nvorient")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_FIT = 3
EXIT_DEGENERATE = 4
EXIT_CONVERGENCE = 5
EXIT_PARTIAL = 6
EXIT_INCONSISTENT = 7

OUT_ENV = "NVORIENT_OUT"


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, (FitError, GridError)):
        return EXIT_FIT if isinstance(exc, FitError) else EXIT_CONFIG
    if isinstance(exc, ConvergenceError):
        return EXIT_CONVERGENCE
    if isinstance(
        exc,
        (BoundsTooTightError, InconsistentConstraintsError, InconsistentProjectionError, InconsistentSplittingError),
    ):
        return EXIT_INCONSISTENT
    if isinstance(exc, (UnidentifiableError, DegenerateGeometryError)):
        return EXIT_DEGENERATE
    if isinstance(exc, (ConfigError, SamplingError, ValueError, OSError, KeyError)):
        return EXIT_CONFIG
    return 1


# ---------------------------------------------------------------------------
# shared option handling


def _out_dir(args) -> Path:
    out = args.out or os.environ.get(OUT_ENV) or "nvorient-out"
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _config(args) -> dict:
    return read_config(args.config) if args.config else {}


def _truth(cfg: dict, preset: str):
    """Ground-truth orientation and local field from a config dict."""
    if "axes" in cfg:
        axes = AxesSet.from_directions(np.array(cfg["axes"], dtype=float))
    elif "orientation" in cfg:
        o = cfg["orientation"]
        params = OrientationParams(*(o if isinstance(o, list) else (o["theta1"], o["phi1"], o["alpha"])))
        axes = axes_from_params(params)
    elif preset == "nanodiamond":
        axes = axes_from_params(OrientationParams(0.3, 1.1, 0.7))
    else:
        axes = KNOWN_100_AXES
    b_loc = np.array(cfg.get("b_loc_mt", ex.DEFAULT_B_LOC), dtype=float)
    if b_loc.shape != (3,):
        raise ConfigError("b_loc_mt needs three components")
    return axes, b_loc


def _pool(cfg: dict, preset: str, args=None) -> np.ndarray:
    if args is not None and getattr(args, "bias", None):
        return read_bias(args.bias).resolved_fields()
    if "bias_fields" in cfg:
        from .io import parse_bias

        return parse_bias(cfg["bias_fields"], "config:bias_fields").resolved_fields()
    return ex.nanodiamond_bias_pool() if preset == "nanodiamond" else ex.bulk_bias_pool()


def _recon_config(cfg: dict, args) -> ReconstructionConfig:
    rc = dict(cfg.get("reconstruction", {}))
    if args.seed is not None:
        rc["rng_seed"] = args.seed
    if "b_loc_half_width_mt" in rc:
        half = float(rc.pop("b_loc_half_width_mt"))
        rc["b_loc_bounds"] = ((-half, half),) * 3
    try:
        return ReconstructionConfig.from_dict(rc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"reconstruction settings: {exc}") from exc


def _print_clusters(result, stream=sys.stdout, limit: int = 10):
    header = f"{'#':>3} {'count':>5} {'cost':>12} {'bx_mT':>11} {'by_mT':>11} {'bz_mT':>11}  bound"
    print(header, file=stream)
    for k, c in enumerate(result.clusters[:limit]):
        b = c.solution.b_loc
        print(f"{k:>3} {c.count:>5} {c.cost:>12.4g} {b.bx:>11.6f} {b.by:>11.6f} {b.bz:>11.6f}  {'yes' if c.at_bound else ''}", file=stream)
    if len(result.clusters) > limit:
        print(f"... {len(result.clusters) - limit} more clusters", file=stream)


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(args) -> int:
    cfg = _config(args)
    preset = args.preset or cfg.get("preset", "bulk")
    axes, b_loc = _truth(cfg, preset)
    pool = _pool(cfg, preset, args)
    linewidth = float(cfg.get("linewidth_mhz", NANODIAMOND_FWHM if preset == "nanodiamond" else BULK_FWHM))
    noise_amp = float(cfg.get("noise_mhz", args.noise if args.noise is not None else 0.0))
    mode = args.noise_mode or cfg.get("noise_mode", "frequency")
    if mode not in ("frequency", "amplitude"):
        raise ConfigError(f"noise mode must be 'frequency' or 'amplitude', got {mode!r}")
    hyperfine = bool(args.hyperfine or cfg.get("hyperfine", False))
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    out = _out_dir(args)
    manifest = RunManifest.start("simulate", {**cfg, "preset": preset, "hyperfine": hyperfine, "noise_mode": mode, "noise_mhz": noise_amp}, seed, [p for p in (args.config, args.bias) if p])
    master = np.random.SeedSequence(seed)
    for k, (b, child) in enumerate(zip(pool, master.spawn(len(pool)))):
        spec = synthesize(
            axes, b + b_loc, linewidth_fwhm=linewidth, noise=NoiseSpec(noise_amp, mode),
            hyperfine=hyperfine, rng=np.random.default_rng(child), bias_id=k,
        )
        spec.meta["seed"] = seed
        manifest.add_output(write_spectrum(out / f"spectrum_{k:03d}.csv", spec))
    manifest.add_output(write_json(out / "bias.json", bias_to_dict(pool)))
    manifest.add_output(write_json(out / "truth.json", {"axes": axes.vectors, "b_loc_mt": b_loc}))
    manifest.write(out)
    print(f"wrote {len(pool)} spectra to {out}")
    return EXIT_OK


def cmd_fit(args) -> int:
    cfg = _config(args)
    merge = bool(args.merge_hyperfine or cfg.get("merge_hyperfine", False))
    expected = args.expected or cfg.get("expected_count") or (16 if merge else 8)
    files = sorted(Path(p) for p in args.spectra)
    if not files:
        raise ConfigError("no spectrum files given")
    out = _out_dir(args)
    manifest = RunManifest.start("fit", {**cfg, "expected_count": expected, "merge_hyperfine": merge}, None, files)
    rows, failures, ambiguous = [], {}, []
    for path in files:
        spec = read_spectrum(path)
        try:
            peaks = fit_peaks(spec, int(expected))
            if merge:
                peaks = merge_hyperfine(peaks, strict=True)
            row = splittings_from_peaks(peaks)
        except (FitError, ValueError) as exc:
            found = getattr(exc, "found", None)
            failures[str(path)] = {"error": str(exc), "found": found}
            print(f"{path}: {exc}", file=sys.stderr)
            continue
        if row.ambiguous:
            ambiguous.append(str(path))
        rows.append((str(path), row))
    if not rows:
        write_json(out / "fit_errors.json", failures)
        return EXIT_FIT
    table = SplittingTable.from_rows([r for _, r in rows])
    extra = {"sources": [p for p, _ in rows], "ambiguous": ambiguous, "failures": failures}
    manifest.add_output(write_table(out / "splittings.json", table, extra))
    manifest.write(out)
    print(f"fitted {len(rows)}/{len(files)} spectra -> {out / 'splittings.json'}")
    return EXIT_PARTIAL if failures else EXIT_OK


def _table_and_bias(args, cfg):
    table = read_table(args.table)
    bias = read_bias(args.bias)
    return table, bias


def cmd_reconstruct(args) -> int:
    cfg = _config(args)
    table, bias = _table_and_bias(args, cfg)
    rc = _recon_config(cfg, args)
    out = _out_dir(args)
    manifest = RunManifest.start("reconstruct", {**cfg, "reconstruction": rc.to_dict()}, rc.rng_seed, [args.table, args.bias])
    fields = bias.resolved_fields()
    rows = getattr(table, "s")
    if rows.shape[0] != fields.shape[0]:
        # a fit table may have dropped failed spectra; keep the rows that were fitted
        raise ConfigError(f"table has {rows.shape[0]} rows but bias file has {fields.shape[0]} fields")
    result = reconstruct(table, fields, rc)
    payload = result.to_dict()
    payload["bias_fields"] = bias_to_dict(fields)
    manifest.add_output(write_json(out / "reconstruction.json", payload))
    if args.svg:
        pts = np.array([c.solution.b_loc.as_array() for c in result.clusters]) * 1e3
        manifest.add_output(write_atomic(out / "reconstruction.svg", svg.scatter(pts, "cluster local fields", "projected (uT)", "projected (uT)", highlight=result.best.b_loc.as_array() * 1e3)))
    manifest.write(out)
    _print_clusters(result)
    b = result.best.b_loc
    print(f"best B_loc = ({b.bx:.6f}, {b.by:.6f}, {b.bz:.6f}) mT, cost {result.best.cost:.4g}")
    if result.degenerate:
        print("degenerate: several clusters share the best cost", file=sys.stderr)
        return EXIT_DEGENERATE
    return EXIT_OK


def cmd_calibrate(args) -> int:
    cfg = _config(args)
    table, bias = _table_and_bias(args, cfg)
    if bias.currents is None:
        raise ConfigError("calibrate needs a bias file with currents_a entries")
    rc = _recon_config(cfg, args)
    out = _out_dir(args)
    manifest = RunManifest.start("calibrate", {**cfg, "reconstruction": rc.to_dict()}, rc.rng_seed, [args.table, args.bias])
    runs = list(zip(bias.currents, table.s))
    offset = bias.coil_model.offset.as_array() if bias.coil_model is not None else None
    model, result = calibrate_coils(runs, rc, offset=offset, initial_model=bias.coil_model)
    manifest.add_output(write_json(out / "coil_model.json", model.to_dict()))
    manifest.add_output(write_json(out / "reconstruction.json", result.to_dict()))
    manifest.write(out)
    print("coil matrix (mT/A):")
    for row in model.m:
        print("  " + "  ".join(f"{v:10.6f}" for v in row))
    _print_clusters(result, limit=5)
    return EXIT_DEGENERATE if result.degenerate else EXIT_OK


def _sweep_config(cfg: dict, args) -> ex.SweepConfig:
    data = dict(cfg)
    data.pop("sweep", None)
    data.pop("preset", None)
    preset = args.preset or cfg.get("preset") or data.get("scenario") or "bulk"
    data["scenario"] = preset
    if args.seed is not None:
        data["rng_seed"] = args.seed
    if args.noise_mode:
        data["noise_mode"] = "spectrum" if args.noise_mode == "amplitude" else "frequency"
    if "bias_fields" in data:
        from .io import parse_bias

        data["bias_pool"] = parse_bias(data.pop("bias_fields"), "config:bias_fields").resolved_fields().tolist()
    if preset == "bulk" and "field_counts" not in data:
        data["field_counts"] = list(range(4, 11))
    if preset == "nanodiamond" and "field_counts" not in data:
        data["field_counts"] = list(range(4, 21))
    try:
        return ex.SweepConfig.from_dict(data)
    except TypeError as exc:
        raise ConfigError(f"sweep config: {exc}") from exc


def _grid(result: ex.SweepResult, key: str, rows: list, cols: list, row_attr: str, col_attr: str, scale: float = 1.0):
    grid = np.full((len(rows), len(cols)), np.nan)
    for c in result.cells:
        v = c.stats.get(key)
        if v is None:
            continue
        i = rows.index(getattr(c, row_attr))
        j = cols.index(getattr(c, col_attr))
        grid[i, j] = v * scale
    return grid


def cmd_sweep(args) -> int:
    cfg = _config(args)
    kind = args.kind or cfg.get("sweep", "noise")
    config = _sweep_config(cfg, args)
    threads = args.threads or 1
    out = _out_dir(args)
    manifest = RunManifest.start("sweep", {"kind": kind, **config.to_dict()}, config.rng_seed, [args.config] if args.config else [])
    runner = {"noise": ex.run_noise_sweep, "scaling": ex.run_bias_scaling_sweep, "saturation": ex.run_saturation_study}.get(kind)
    if runner is None:
        raise ConfigError(f"unknown sweep kind {kind!r}")
    result = runner(config, threads=threads)
    fmt = args.format or "json"
    manifest.add_output(write_json(out / "sweep.json", result.to_dict()))
    if fmt == "csv" or args.csv:
        manifest.add_output(write_atomic(out / "sweep.csv", csv_text(result.csv_rows())))
    noises = sorted({c.noise for c in result.cells})
    if kind == "scaling":
        cols, col_attr, col_name = sorted({c.scaling for c in result.cells}), "scaling", "bias scaling"
    else:
        cols, col_attr, col_name = sorted({c.count for c in result.cells}), "count", "bias fields per run"
    for key, name, scale, unit in (("delta_b_norm_mt", "delta_b", 1e3, "uT"), ("mean_d_gc_rad", "d_gc", 180.0 / np.pi, "deg")):
        grid = _grid(result, key, noises, cols, "noise", col_attr, scale)
        text = svg.heatmap(grid, [f"{n:g}" for n in noises], [f"{c:g}" for c in cols], f"{name} ({kind} sweep)", "noise (MHz)", col_name, unit)
        manifest.add_output(write_atomic(out / f"heatmap_{name}.svg", text))
    manifest.write(out)
    incomplete = [c for c in result.cells if not c.stats["complete"]]
    print(f"{len(result.cells)} cells, {len(incomplete)} incomplete -> {out / 'sweep.json'}")
    return EXIT_PARTIAL if incomplete else EXIT_OK


def cmd_degeneracy(args) -> int:
    cfg = _config(args)
    preset = args.preset or cfg.get("preset", "bulk")
    n = args.n_fields if args.n_fields is not None else int(cfg.get("n_fields", 3))
    if not 1 <= n <= 4:
        raise ConfigError("n_fields must be between 1 and 4")
    axes, b_loc = _truth(cfg, preset)
    pool = _pool(cfg, preset, args)
    rc = _recon_config(cfg, args)
    out = _out_dir(args)
    manifest = RunManifest.start("degeneracy", {**cfg, "n_fields": n}, rc.rng_seed, [p for p in (args.config, args.bias) if p])
    demo = ex.degeneracy_demo(n, (axes, b_loc), pool, rc)
    manifest.add_output(write_json(out / "degeneracy.json", demo.to_dict()))
    g = demo.geometry
    if g.kind == "ring":
        pts = np.array([g.ring.point(t) for t in np.linspace(0, 2 * np.pi, 72, endpoint=False)])
    elif g.kind == "sphere":
        pts = np.array([g.sphere.center.as_array() + g.sphere.radius * d for d in ex.fibonacci_directions(200)])
    else:
        pts = np.array([s.as_array() for s in g.solutions]).reshape(-1, 3)
    tied = demo.tied_b_loc()
    text = svg.scatter(pts * 1e3, f"{g.kind}: {n} bias field(s)", "projected (uT)", "projected (uT)", highlight=tied * 1e3 if tied.size else None)
    manifest.add_output(write_atomic(out / "degeneracy.svg", text))
    manifest.write(out)
    print(f"{g.kind}: {len(demo.reconstruction.tied_clusters)} equal-cost cluster(s)")
    return EXIT_DEGENERATE if demo.reconstruction.degenerate else EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON or key=value config file")
    common.add_argument("--seed", type=int, help="master random seed")
    common.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./nvorient-out)")
    common.add_argument("--threads", type=int, default=None, help="worker processes")
    common.add_argument("--preset", choices=("bulk", "nanodiamond"))
    common.add_argument("--format", choices=("json", "csv"))
    common.add_argument("--noise-mode", choices=("frequency", "amplitude"))
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="nvorient", description="NV-ensemble orientation and local-field reconstruction")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="synthesize ODMR spectra")
    s.add_argument("--bias", help="bias-field JSON (default: preset pool)")
    s.add_argument("--noise", type=float, help="noise amplitude (MHz, or contrast units in amplitude mode)")
    s.add_argument("--hyperfine", action="store_true", help="16-line hyperfine pair model")
    s.set_defaults(func=cmd_simulate)

    f = sub.add_parser("fit", parents=[common], help="fit spectra into a splitting table")
    f.add_argument("spectra", nargs="+")
    f.add_argument("--expected", type=int, help="peaks per spectrum (default 8, or 16 with --merge-hyperfine)")
    f.add_argument("--merge-hyperfine", action="store_true")
    f.set_defaults(func=cmd_fit)

    r = sub.add_parser("reconstruct", parents=[common], help="estimate orientation and local field")
    r.add_argument("table")
    r.add_argument("bias")
    r.add_argument("--svg", action="store_true", help="also write a cluster scatter plot")
    r.set_defaults(func=cmd_reconstruct)

    c = sub.add_parser("calibrate", parents=[common], help="fit coil matrix jointly with orientation and field")
    c.add_argument("table")
    c.add_argument("bias", help="bias JSON with currents_a entries")
    c.set_defaults(func=cmd_calibrate)

    w = sub.add_parser("sweep", parents=[common], help="Monte-Carlo noise, saturation or scaling study")
    w.add_argument("--kind", choices=("noise", "scaling", "saturation"))
    w.add_argument("--csv", action="store_true", help="also write the per-trial CSV")
    w.set_defaults(func=cmd_sweep)

    d = sub.add_parser("degeneracy", parents=[common], help="solution manifold for 1-4 bias fields")
    d.add_argument("--n-fields", type=int, choices=(1, 2, 3, 4))
    d.add_argument("--bias", help="bias-field JSON (default: preset pool)")
    d.set_defaults(func=cmd_degeneracy)
    return p


def main(argv: Optional[list] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NVError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exit_code_for(exc)
    except (ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
