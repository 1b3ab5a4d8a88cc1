"""Seeded Monte-Carlo studies: noise sweeps, field-count saturation,
bias-scaling heatmaps and degeneracy demonstrations.

Every trial draws its randomness from ``SeedSequence([seed, cell key,
trial])`` so results do not depend on scheduling or worker count.
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, NVError, SamplingError
from .geometry import (
    AxesSet,
    DegeneracyResult,
    OrientationParams,
    SphereConstraint,
    axes_from_params,
    is_noncollinear,
    is_noncoplanar,
    match_axes,
    params_from_vectors,
    resolve_unique,
)
from .physics import DEFAULT_CONSTANTS, FieldVector, PhysicalConstants, as_vector, estimate_total_magnitudes, transitions_for
from .reconstruction import (
    ReconstructionConfig,
    ReconstructionResult,
    align_axes,
    axes_dispersion,
    delta_b,
    reconstruct,
)
from .spectra import (
    BULK_FWHM,
    NANODIAMOND_FWHM,
    FrequencyGrid,
    NoiseSpec,
    fit_peaks,
    splittings_from_lines,
    splittings_from_peaks,
    synthesize,
)

log = logging.getLogger(__name__)

SCENARIOS = ("bulk", "nanodiamond", "custom")
NOISE_MODES = ("frequency", "spectrum")
DEFAULT_B_LOC = (0.009, -0.017, -0.050)  # mT
MIN_SUCCESS = 0.8


# ---------------------------------------------------------------------------
# bias pools


def fibonacci_directions(n: int) -> np.ndarray:
    """Quasi-uniform unit vectors (golden-angle spiral)."""
    k = np.arange(n) + 0.5
    z = 1.0 - 2.0 * k / n
    r = np.sqrt(1.0 - z * z)
    phi = np.pi * (1.0 + np.sqrt(5.0)) * k
    return np.column_stack([r * np.cos(phi), r * np.sin(phi), z])


def bulk_bias_pool(n: int = 28, magnitude: float = 1.0, spread: float = 0.05) -> np.ndarray:
    """``n`` fields of roughly ``magnitude`` mT spread over the sphere."""
    frac = (np.arange(n) * 0.6180339887498949) % 1.0
    return fibonacci_directions(n) * (magnitude * (1.0 + spread * (2.0 * frac - 1.0)))[:, None]


def nanodiamond_bias_pool(n: int = 34, low: float = 5.0, high: float = 10.0) -> np.ndarray:
    """``n`` fields with magnitudes spread over [low, high] mT."""
    frac = (np.arange(n) * 0.6180339887498949) % 1.0
    return fibonacci_directions(n) * (low + (high - low) * frac)[:, None]


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class SweepConfig:
    scenario: str = "bulk"
    noise_levels: tuple = (0.3,)
    field_counts: tuple = (4,)
    bias_pool: tuple = ()
    bias_scaling: tuple = (1.0,)
    trials_per_cell: int = 50
    ground_truth: tuple = ((0.6154797086703874, 0.0, 2.0943951023931953), DEFAULT_B_LOC)
    rng_seed: int = 0
    noise_mode: str = "frequency"
    linewidth_fwhm: Optional[float] = None
    reconstruction: ReconstructionConfig = field(default_factory=lambda: ReconstructionConfig(n_starts=16))

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"scenario must be one of {SCENARIOS}")
        if self.noise_mode not in NOISE_MODES:
            raise ConfigError(f"noise_mode must be one of {NOISE_MODES}")
        pool = self.bias_pool
        if len(pool) == 0:
            pool = nanodiamond_bias_pool() if self.scenario == "nanodiamond" else bulk_bias_pool()
        pool = tuple(tuple(float(v) for v in as_vector(b)) for b in pool)
        object.__setattr__(self, "bias_pool", pool)
        for name in ("noise_levels", "field_counts", "bias_scaling"):
            values = tuple(getattr(self, name))
            if not values:
                raise ConfigError(f"{name} must not be empty")
            object.__setattr__(self, name, values)
        object.__setattr__(self, "noise_levels", tuple(float(v) for v in self.noise_levels))
        object.__setattr__(self, "bias_scaling", tuple(float(v) for v in self.bias_scaling))
        object.__setattr__(self, "field_counts", tuple(int(v) for v in self.field_counts))
        if any(v < 0 for v in self.noise_levels):
            raise ConfigError("noise levels must be >= 0")
        if any(v <= 0 for v in self.bias_scaling):
            raise ConfigError("bias scaling multipliers must be positive")
        if any(k < 1 or k > len(pool) for k in self.field_counts):
            raise ConfigError(f"field counts must lie in 1..{len(pool)}")
        if self.trials_per_cell < 2:
            raise ConfigError("trials_per_cell must be >= 2")
        if self.rng_seed < 0:
            raise ConfigError("rng_seed must be non-negative")
        truth, b_loc = self.ground_truth
        if isinstance(truth, OrientationParams):
            truth = truth.as_array()
        elif isinstance(truth, AxesSet):
            truth = params_from_vectors(truth.vectors).as_array()
        object.__setattr__(self, "ground_truth", (tuple(float(v) for v in truth), tuple(float(v) for v in as_vector(b_loc))))

    @property
    def linewidth(self) -> float:
        if self.linewidth_fwhm is not None:
            return float(self.linewidth_fwhm)
        return NANODIAMOND_FWHM if self.scenario == "nanodiamond" else BULK_FWHM

    @property
    def truth_axes(self) -> AxesSet:
        return axes_from_params(OrientationParams(*self.ground_truth[0]))

    @property
    def truth_b_loc(self) -> np.ndarray:
        return np.array(self.ground_truth[1])

    @classmethod
    def bulk(cls, **kw) -> "SweepConfig":
        kw.setdefault("noise_levels", (0.1, 0.2, 0.3, 0.4, 0.5))
        kw.setdefault("field_counts", (4, 6, 8, 10))
        return cls(scenario="bulk", **kw)

    @classmethod
    def nanodiamond(cls, **kw) -> "SweepConfig":
        kw.setdefault("noise_levels", (1.0, 2.0, 3.0, 4.0, 5.0))
        kw.setdefault("field_counts", (4, 10, 20))
        kw.setdefault("ground_truth", ((0.3, 1.1, 0.7), DEFAULT_B_LOC))
        kw.setdefault("reconstruction", ReconstructionConfig.symmetric(0.5, n_starts=16))
        return cls(scenario="nanodiamond", **kw)

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario,
            "noise_levels": list(self.noise_levels),
            "field_counts": list(self.field_counts),
            "bias_pool": [list(b) for b in self.bias_pool],
            "bias_scaling": list(self.bias_scaling),
            "trials_per_cell": self.trials_per_cell,
            "ground_truth": {"params": list(self.ground_truth[0]), "b_loc_mt": list(self.ground_truth[1])},
            "rng_seed": self.rng_seed,
            "noise_mode": self.noise_mode,
            "linewidth_fwhm": self.linewidth_fwhm,
            "reconstruction": self.reconstruction.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SweepConfig":
        data = dict(data)
        if "ground_truth" in data and isinstance(data["ground_truth"], dict):
            gt = data["ground_truth"]
            data["ground_truth"] = (tuple(gt["params"]), tuple(gt["b_loc_mt"]))
        if "reconstruction" in data and isinstance(data["reconstruction"], dict):
            data["reconstruction"] = ReconstructionConfig.from_dict(data["reconstruction"])
        for name in ("noise_levels", "field_counts", "bias_scaling", "bias_pool"):
            if name in data:
                data[name] = tuple(tuple(v) if isinstance(v, list) else v for v in data[name])
        scenario = data.get("scenario", "bulk")
        factory = {"bulk": cls.bulk, "nanodiamond": cls.nanodiamond}.get(scenario)
        if factory is not None:
            data.pop("scenario")
            return factory(**data)
        return cls(**data)


# ---------------------------------------------------------------------------
# results


@dataclass(frozen=True)
class TrialRecord:
    trial: int
    seed: int
    subset: tuple
    ok: bool
    b_loc: Optional[tuple] = None
    axes: Optional[tuple] = None
    cost: Optional[float] = None
    error_mt: Optional[float] = None
    d_gc: Optional[float] = None
    message: str = ""

    def to_dict(self) -> dict:
        return {
            "trial": self.trial,
            "seed": self.seed,
            "subset": list(self.subset),
            "ok": self.ok,
            "b_loc_mt": None if self.b_loc is None else list(self.b_loc),
            "axes": None if self.axes is None else [list(a) for a in self.axes],
            "cost": self.cost,
            "error_mt": self.error_mt,
            "d_gc_rad": self.d_gc,
            "message": self.message,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrialRecord":
        return cls(
            d["trial"], d["seed"], tuple(d["subset"]), d["ok"],
            None if d["b_loc_mt"] is None else tuple(d["b_loc_mt"]),
            None if d["axes"] is None else tuple(tuple(a) for a in d["axes"]),
            d["cost"], d["error_mt"], d["d_gc_rad"], d.get("message", ""),
        )


@dataclass(frozen=True)
class CellResult:
    noise: float
    count: int
    scaling: float
    trials: tuple
    stats: dict

    @property
    def key(self) -> tuple:
        return (self.noise, self.count, self.scaling)

    def to_dict(self) -> dict:
        return {
            "noise_mhz": self.noise,
            "count": self.count,
            "scaling": self.scaling,
            "stats": self.stats,
            "trials": [t.to_dict() for t in self.trials],
        }


@dataclass(frozen=True)
class SweepResult:
    kind: str
    config: SweepConfig
    cells: tuple
    rejections: int = 0

    def cell(self, noise=None, count=None, scaling=None) -> CellResult:
        for c in self.cells:
            if (noise is None or c.noise == noise) and (count is None or c.count == count) and (scaling is None or c.scaling == scaling):
                return c
        raise KeyError((noise, count, scaling))

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "config": self.config.to_dict(),
            "rejections": self.rejections,
            "cells": [c.to_dict() for c in self.cells],
        }

    def csv_rows(self) -> list:
        header = ["kind", "noise_mhz", "count", "scaling", "trial", "seed", "ok", "bx_mt", "by_mt", "bz_mt", "cost", "error_mt", "d_gc_rad"]
        rows = [header]
        for c in self.cells:
            for t in c.trials:
                b = t.b_loc or (None, None, None)
                rows.append([self.kind, c.noise, c.count, c.scaling, t.trial, t.seed, int(t.ok), *b, t.cost, t.error_mt, t.d_gc])
        return rows


def cell_statistics(trials: Sequence[TrialRecord], truth_axes=None) -> dict:
    """Summary numbers of one cell, computed only from the trial records."""
    good = [t for t in trials if t.ok]
    n = len(trials)
    stats = {
        "n_trials": n,
        "n_ok": len(good),
        "n_failed": n - len(good),
        "complete": len(good) >= MIN_SUCCESS * n,
    }
    if not good:
        return stats
    b = np.array([t.b_loc for t in good])
    db = delta_b(b)
    err = np.array([t.error_mt for t in good])
    dgc = np.array([t.d_gc for t in good])
    stats.update(
        {
            "delta_b_mt": db.tolist(),
            "delta_b_norm_mt": float(np.linalg.norm(db)),
            "mean_error_mt": float(np.mean(err)),
            "median_error_mt": float(np.median(err)),
            "mean_d_gc_rad": float(np.mean(dgc)),
            "median_d_gc_rad": float(np.median(dgc)),
        }
    )
    if len(good) >= 2:
        axes = [AxesSet.from_directions(np.array(t.axes)) for t in good]
        ref = truth_axes if truth_axes is not None else axes[0]
        try:
            disp = axes_dispersion(align_axes(axes, ref))
            stats["d_gc_per_axis_rad"] = disp.tolist()
            stats["d_gc_dispersion_rad"] = float(np.mean(disp))
        except ValueError as exc:
            stats["d_gc_per_axis_rad"] = None
            stats["d_gc_dispersion_rad"] = None
            log.warning("axes dispersion undefined: %s", exc)
    return stats


# ---------------------------------------------------------------------------
# sampling


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def subset_is_valid(fields) -> bool:
    fields = np.asarray(fields, dtype=float)
    k = fields.shape[0]
    if k >= 4:
        from .geometry import points_span_space

        return points_span_space(fields)
    if k == 3:
        return is_noncollinear(*fields)
    return True


def sample_subsets(pool, k: int, n: int, seed=None, max_rejection_rate: float = 0.99):
    """``n`` subsets (index arrays) of size ``k`` drawn without replacement.

    Subsets whose fields are coplanar (k >= 4) or collinear (k = 3) are
    redrawn.  Returns ``(subsets, rejections)``.
    """
    pool = np.asarray([as_vector(b) for b in pool])
    if k < 1:
        raise ValueError("subset size must be >= 1")
    if k > len(pool):
        raise SamplingError(f"pool of {len(pool)} fields is too small for subsets of {k}")
    rng = _rng(seed)
    if k == len(pool):
        if not subset_is_valid(pool):
            raise SamplingError("the full pool fails the geometric validity check")
        return [np.arange(k) for _ in range(n)], 0
    subsets, rejections, draws = [], 0, 0
    max_draws = max(100, int(np.ceil(n / (1.0 - max_rejection_rate))))
    while len(subsets) < n:
        if draws >= max_draws:
            raise SamplingError(
                f"rejected {rejections} of {draws} draws; the pool has too few valid {k}-subsets"
            )
        idx = np.sort(rng.choice(len(pool), size=k, replace=False))
        draws += 1
        if subset_is_valid(pool[idx]):
            subsets.append(idx)
        else:
            rejections += 1
    return subsets, rejections


def trial_seed(master: int, noise: float, count: int, scaling: float, trial: int) -> np.random.SeedSequence:
    """Seed for one trial keyed by cell values, independent of cell order."""
    key = [int(master), int(round(noise * 1e6)), int(count), int(round(scaling * 1e6)), int(trial)]
    return np.random.SeedSequence(key)


# ---------------------------------------------------------------------------
# trials


def _measure(config: SweepConfig, fields: np.ndarray, noise: float, rng: np.random.Generator) -> np.ndarray:
    axes = config.truth_axes
    b_loc = config.truth_b_loc
    if config.noise_mode == "frequency":
        lines = np.array([transitions_for(axes, b + b_loc) for b in fields])
        if noise > 0:
            lines = lines + rng.normal(0.0, noise, lines.shape)
        return splittings_from_lines(lines)
    rows = []
    for b in fields:
        spec = synthesize(axes, b + b_loc, linewidth_fwhm=config.linewidth, noise=NoiseSpec(noise, "amplitude"), rng=rng)
        rows.append(splittings_from_peaks(fit_peaks(spec, 8, linewidth_fwhm=config.linewidth)).s)
    return np.array(rows)


def _run_trial(args) -> TrialRecord:
    config, noise, count, scaling, trial = args
    ss = trial_seed(config.rng_seed, noise, count, scaling, trial)
    rng = np.random.default_rng(ss)
    pool = np.array(config.bias_pool) * scaling
    seed_int = int(ss.generate_state(1, dtype=np.uint32)[0])
    try:
        (subset,), _ = sample_subsets(pool, count, 1, rng)
        fields = pool[subset]
    except SamplingError as exc:
        return TrialRecord(trial, seed_int, (), False, message=str(exc))
    try:
        meas = _measure(config, fields, noise, rng)
        rc = replace(config.reconstruction, rng_seed=seed_int)
        res = reconstruct(meas, fields, rc)
    except NVError as exc:
        return TrialRecord(trial, seed_int, tuple(int(i) for i in subset), False, message=f"{type(exc).__name__}: {exc}")
    b = res.best.b_loc.as_array()
    axes = res.best.axes
    return TrialRecord(
        trial,
        seed_int,
        tuple(int(i) for i in subset),
        True,
        tuple(float(v) for v in b),
        tuple(tuple(float(v) for v in row) for row in axes.vectors),
        float(res.best.cost),
        float(np.linalg.norm(b - config.truth_b_loc)),
        float(match_axes(axes, config.truth_axes).mean_dgc),
    )


def _execute(config: SweepConfig, cells: list, threads: int) -> list:
    jobs = [(config, n, k, s, t) for (n, k, s) in cells for t in range(config.trials_per_cell)]
    if threads and threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            records = list(pool.map(_run_trial, jobs, chunksize=max(1, len(jobs) // (4 * threads))))
    else:
        records = [_run_trial(j) for j in jobs]
    out = []
    per = config.trials_per_cell
    truth = config.truth_axes
    for i, (n, k, s) in enumerate(cells):
        trials = tuple(records[i * per : (i + 1) * per])
        stats = cell_statistics(trials, truth)
        if not stats["complete"]:
            log.warning("cell noise=%g count=%d scaling=%g incomplete: %d/%d trials ok", n, k, s, stats["n_ok"], stats["n_trials"])
        out.append(CellResult(n, k, s, trials, stats))
    return out


def _rejection_total(config: SweepConfig, cells: list) -> int:
    total = 0
    for n, k, s in cells:
        for t in range(config.trials_per_cell):
            rng = np.random.default_rng(trial_seed(config.rng_seed, n, k, s, t))
            try:
                total += sample_subsets(np.array(config.bias_pool) * s, k, 1, rng)[1]
            except SamplingError:
                pass
    return total


def run_noise_sweep(config: SweepConfig, threads: int = 1) -> SweepResult:
    """Every (noise level, field count) cell at the first bias scaling."""
    s = config.bias_scaling[0]
    cells = [(n, k, s) for n in config.noise_levels for k in config.field_counts]
    return SweepResult("noise", config, tuple(_execute(config, cells, threads)), _rejection_total(config, cells))


def run_bias_scaling_sweep(config: SweepConfig, threads: int = 1) -> SweepResult:
    """Every (noise level, scaling) cell at the first field count."""
    k = config.field_counts[0]
    cells = [(n, k, s) for n in config.noise_levels for s in config.bias_scaling]
    return SweepResult("scaling", config, tuple(_execute(config, cells, threads)), _rejection_total(config, cells))


def run_saturation_study(config: SweepConfig, threads: int = 1) -> SweepResult:
    """Field-count dependence at the first noise level; stats gain
    ``relative_to_min_count`` = delta_b_norm(k) / delta_b_norm(smallest k)."""
    n = config.noise_levels[0]
    s = config.bias_scaling[0]
    counts = sorted(config.field_counts)
    if len(counts) < 2:
        raise ConfigError("a saturation study needs at least two field counts")
    cells = [(n, k, s) for k in counts]
    results = _execute(config, cells, threads)
    base = results[0].stats.get("delta_b_norm_mt")
    for c in results:
        v = c.stats.get("delta_b_norm_mt")
        c.stats["relative_to_min_count"] = None if (v is None or not base) else float(v / base)
    return SweepResult("saturation", config, tuple(results), _rejection_total(config, cells))


# ---------------------------------------------------------------------------
# degeneracy


@dataclass(frozen=True)
class DegeneracyDemo:
    bias_fields: np.ndarray
    geometry: DegeneracyResult
    reconstruction: ReconstructionResult

    def tied_b_loc(self) -> np.ndarray:
        return np.array([c.solution.b_loc.as_array() for c in self.reconstruction.tied_clusters])

    def to_dict(self) -> dict:
        g = self.geometry
        geo = {"kind": g.kind, "solutions": [list(s) for s in g.solutions], "ambiguous": g.ambiguous}
        if g.ring is not None:
            geo["ring"] = {"center": list(g.ring.center), "radius": g.ring.radius, "normal": list(map(float, g.ring.normal))}
        if g.sphere is not None:
            geo["sphere"] = {"center": list(g.sphere.center), "radius": g.sphere.radius}
        if g.plane is not None:
            geo["plane"] = {"normal": list(map(float, g.plane[0])), "offset": float(g.plane[1])}
        return {
            "bias_fields_mt": np.asarray(self.bias_fields).tolist(),
            "geometry": geo,
            "reconstruction": self.reconstruction.to_dict(),
        }


def _pick_fields(pool: np.ndarray, n: int) -> np.ndarray:
    """First ``n`` pool entries (in a fixed greedy order) that are mutually
    well spread and pass the validity check for their count."""
    chosen = [0]
    while len(chosen) < n:
        rest = [i for i in range(len(pool)) if i not in chosen]
        best = min(rest, key=lambda i: (max(float(pool[i] @ pool[j]) / (np.linalg.norm(pool[i]) * np.linalg.norm(pool[j])) for j in chosen), i))
        chosen.append(best)
    fields = pool[chosen]
    if not subset_is_valid(fields):
        raise SamplingError(f"could not pick {n} valid fields from the pool")
    return fields


def degeneracy_demo(
    n_fields: int,
    ground_truth=None,
    pool=None,
    config: Optional[ReconstructionConfig] = None,
    constants: PhysicalConstants = DEFAULT_CONSTANTS,
) -> DegeneracyDemo:
    """Noise-free data from 1-4 bias fields: the analytic solution manifold
    next to the multistart cluster structure.

    The local-field bounds are widened when needed so that the whole
    manifold (ring, or both mirror points) fits inside them.
    """
    if not 1 <= n_fields <= 4:
        raise ConfigError("n_fields must be between 1 and 4")
    if ground_truth is None:
        ground_truth = (OrientationParams(0.6154797086703874, 0.0, 2.0943951023931953), DEFAULT_B_LOC)
    truth, b_loc = ground_truth
    axes = truth if isinstance(truth, AxesSet) else axes_from_params(truth if isinstance(truth, OrientationParams) else OrientationParams(*truth))
    b_loc = as_vector(b_loc)
    pool = bulk_bias_pool() if pool is None else np.array([as_vector(b) for b in pool])
    fields = _pick_fields(pool, n_fields)

    lines = np.array([transitions_for(axes, b + b_loc, constants) for b in fields])
    meas = splittings_from_lines(lines)
    radii = estimate_total_magnitudes(meas, constants)
    geometry = resolve_unique([SphereConstraint.from_bias(b, r) for b, r in zip(fields, radii)])

    cfg = config or ReconstructionConfig(n_starts=64)
    extent = np.max(np.abs(b_loc))
    if geometry.kind == "ring":
        extent = max(extent, float(np.max(np.abs(geometry.ring.center.as_array())) + geometry.ring.radius))
    elif geometry.kind == "sphere":
        extent = max(extent, float(np.max(np.abs(geometry.sphere.center.as_array())) + geometry.sphere.radius))
    else:
        extent = max([extent] + [float(np.max(np.abs(s.as_array()))) for s in geometry.solutions])
    half = max(cfg.b_loc_bounds[0][1], 1.25 * extent)
    if any(lo > -half or hi < half for lo, hi in cfg.b_loc_bounds):
        cfg = replace(cfg, b_loc_bounds=((-half, half),) * 3)
    result = reconstruct(meas, fields, cfg, constants)
    return DegeneracyDemo(fields, geometry, result)


def default_threads() -> int:
    return max(1, len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1))
