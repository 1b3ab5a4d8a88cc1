"""ODMR spectrum synthesis, Lorentzian peak fitting and splitting extraction."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter1d
from scipy.optimize import least_squares
from scipy.signal import find_peaks

from .errors import FitError, GridError, UnresolvedPeaksError
from .physics import DEFAULT_CONSTANTS, PhysicalConstants, as_vector, transitions_for

log = logging.getLogger(__name__)

BULK_FWHM = 0.6  # MHz
NANODIAMOND_FWHM = 10.0  # MHz


@dataclass(frozen=True, eq=False)
class SplittingTable:
    """Splittings (MHz) per bias field (rows) and NV group (columns)."""

    s: np.ndarray
    sigma: Optional[np.ndarray] = None

    def __post_init__(self):
        s = np.atleast_2d(np.array(self.s, dtype=float))
        sigma = np.zeros_like(s) if self.sigma is None else np.atleast_2d(np.array(self.sigma, dtype=float))
        if s.ndim != 2 or s.shape[1] != 4:
            raise ValueError(f"splitting table must be (n_fields, 4), got {s.shape}")
        if sigma.shape != s.shape:
            raise ValueError("sigma must match the splitting matrix shape")
        if not np.all(np.isfinite(s)) or np.any(s < 0):
            raise ValueError("splittings must be finite and non-negative")
        if np.any(sigma < 0):
            raise ValueError("uncertainties must be non-negative")
        s.setflags(write=False)
        sigma.setflags(write=False)
        object.__setattr__(self, "s", s)
        object.__setattr__(self, "sigma", sigma)

    @property
    def n_fields(self) -> int:
        return self.s.shape[0]

    def subset(self, rows: Sequence[int]) -> "SplittingTable":
        rows = list(rows)
        return SplittingTable(self.s[rows], self.sigma[rows])

    @classmethod
    def from_rows(cls, rows: Sequence["SplittingRow"]) -> "SplittingTable":
        return cls(np.array([r.s for r in rows]), np.array([r.sigma for r in rows]))

    def to_dict(self) -> dict:
        return {"s": self.s.tolist(), "sigma": self.sigma.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "SplittingTable":
        return cls(np.array(data["s"], dtype=float), np.array(data["sigma"], dtype=float) if "sigma" in data else None)

    def __eq__(self, other):
        return (
            isinstance(other, SplittingTable)
            and np.array_equal(self.s, other.s)
            and np.array_equal(self.sigma, other.sigma)
        )


@dataclass(frozen=True)
class NoiseSpec:
    """``mode`` is 'frequency' (jitter of resonance centers) or 'amplitude'."""

    amplitude: float = 0.0
    mode: str = "frequency"
    seed: Optional[int] = None

    def __post_init__(self):
        if self.mode not in ("frequency", "amplitude"):
            raise ValueError(f"unknown noise mode {self.mode!r}")
        if self.amplitude < 0:
            raise ValueError("noise amplitude must be non-negative")


@dataclass(frozen=True)
class FrequencyGrid:
    start: float
    stop: float
    step: float

    def __post_init__(self):
        if not (self.step > 0 and self.stop > self.start):
            raise GridError("grid needs stop > start and a positive step")

    def values(self) -> np.ndarray:
        n = int(np.floor((self.stop - self.start) / self.step + 1e-9)) + 1
        return self.start + self.step * np.arange(n)

    @classmethod
    def around(cls, lines, margin: float, step: float) -> "FrequencyGrid":
        lines = np.asarray(lines, dtype=float)
        lo = np.floor((lines.min() - margin) / step) * step
        hi = np.ceil((lines.max() + margin) / step) * step
        return cls(float(lo), float(hi), float(step))


@dataclass(frozen=True, eq=False)
class OdmrSpectrum:
    frequencies: np.ndarray
    contrast: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        f = np.asarray(self.frequencies, dtype=float)
        c = np.asarray(self.contrast, dtype=float)
        if f.ndim != 1 or f.shape != c.shape:
            raise ValueError("frequencies and contrast must be 1-D of equal length")
        if f.size > 1 and np.any(np.diff(f) <= 0):
            raise ValueError("frequencies must be strictly increasing")
        if not np.all(np.isfinite(c)):
            raise ValueError("contrast must be finite")
        object.__setattr__(self, "frequencies", f)
        object.__setattr__(self, "contrast", c)
        object.__setattr__(self, "meta", dict(self.meta))


@dataclass(frozen=True)
class Peak:
    center: float
    uncertainty: float
    depth: float
    width: float


@dataclass(frozen=True)
class PeakSet:
    centers: tuple
    unpaired: tuple = ()

    def __post_init__(self):
        peaks = tuple(p if isinstance(p, Peak) else Peak(*p) for p in self.centers)
        peaks = tuple(sorted(peaks, key=lambda p: p.center))
        if any(p.uncertainty < 0 for p in peaks):
            raise ValueError("peak uncertainties must be non-negative")
        object.__setattr__(self, "centers", peaks)
        object.__setattr__(self, "unpaired", tuple(float(u) for u in self.unpaired))

    def __len__(self):
        return len(self.centers)

    @property
    def positions(self) -> np.ndarray:
        return np.array([p.center for p in self.centers])

    @property
    def uncertainties(self) -> np.ndarray:
        return np.array([p.uncertainty for p in self.centers])

    def to_dict(self) -> dict:
        return {"centers": [[p.center, p.uncertainty, p.depth, p.width] for p in self.centers]}

    @classmethod
    def from_dict(cls, data: dict) -> "PeakSet":
        return cls(tuple(Peak(*map(float, row)) for row in data["centers"]))

    @classmethod
    def from_positions(cls, positions, uncertainty=0.0, depth=0.0, width=0.0) -> "PeakSet":
        return cls(tuple(Peak(float(c), float(uncertainty), float(depth), float(width)) for c in positions))


def lorentzian_dips(freqs, centers, depths, fwhm) -> np.ndarray:
    """Baseline 1 minus a sum of Lorentzian dips."""
    freqs = np.asarray(freqs, dtype=float)[:, None]
    centers = np.asarray(centers, dtype=float)[None, :]
    hw = 0.5 * np.broadcast_to(np.asarray(fwhm, dtype=float), centers.shape[1:])[None, :]
    depths = np.broadcast_to(np.asarray(depths, dtype=float), centers.shape[1:])[None, :]
    return 1.0 - np.sum(depths * hw * hw / ((freqs - centers) ** 2 + hw * hw), axis=1)


def resonance_lines(axes, b_total, constants: PhysicalConstants = DEFAULT_CONSTANTS, hyperfine: bool = False) -> np.ndarray:
    """Sorted resonance frequencies: 8 lines, or 16 in the hyperfine pair model."""
    lines = transitions_for(axes, b_total, constants).reshape(-1)
    if hyperfine:
        half = constants.hyperfine_pair_sep / 2.0
        lines = np.concatenate([lines - half, lines + half])
    return np.sort(lines)


def synthesize(
    axes,
    b_total,
    linewidth_fwhm: float = BULK_FWHM,
    peak_contrast: float = 0.02,
    noise: Optional[NoiseSpec] = None,
    grid: Optional[FrequencyGrid] = None,
    hyperfine: bool = False,
    constants: PhysicalConstants = DEFAULT_CONSTANTS,
    rng: Optional[np.random.Generator] = None,
    bias_id=None,
) -> OdmrSpectrum:
    """Simulated CW-ODMR spectrum of the four NV groups.

    Frequency jitter shifts each of the 8 transitions independently before the
    optional hyperfine doubling, so both lines of a hyperfine pair move
    together.
    """
    if not linewidth_fwhm > 0:
        raise ValueError("linewidth must be positive")
    noise = noise or NoiseSpec()
    if rng is None:
        rng = np.random.default_rng(noise.seed)

    lines = transitions_for(axes, b_total, constants).reshape(-1)
    if noise.mode == "frequency" and noise.amplitude > 0:
        lines = lines + rng.normal(0.0, noise.amplitude, size=lines.shape)
    if hyperfine:
        half = constants.hyperfine_pair_sep / 2.0
        lines = np.concatenate([lines - half, lines + half])
    lines = np.sort(lines)

    if grid is None:
        grid = FrequencyGrid.around(lines, margin=5.0 * linewidth_fwhm + 5.0, step=linewidth_fwhm / 10.0)
    freqs = grid.values()
    outside = lines[(lines < freqs[0]) | (lines > freqs[-1])]
    if outside.size:
        raise GridError(f"resonances outside grid [{freqs[0]}, {freqs[-1]}] MHz: {outside.tolist()}")

    contrast = lorentzian_dips(freqs, lines, peak_contrast, linewidth_fwhm)
    if noise.mode == "amplitude" and noise.amplitude > 0:
        contrast = contrast + rng.normal(0.0, noise.amplitude, size=contrast.shape)
    meta = {"bias_id": bias_id, "linewidth_mhz": float(linewidth_fwhm), "seed": noise.seed}
    return OdmrSpectrum(freqs, contrast, meta)


# ---------------------------------------------------------------------------
# fitting


def _model_and_jac(params, freqs, n):
    base = params[0]
    c = params[1 : 1 + n]
    a = params[1 + n : 1 + 2 * n]
    hw = params[1 + 2 * n : 1 + 3 * n]
    x = freqs[:, None] - c[None, :]
    den = x * x + hw * hw
    shape = hw * hw / den
    model = base - np.sum(a * shape, axis=1)
    jac = np.empty((freqs.size, params.size))
    jac[:, 0] = 1.0
    jac[:, 1 : 1 + n] = -a * 2.0 * hw * hw * x / den**2
    jac[:, 1 + n : 1 + 2 * n] = -shape
    jac[:, 1 + 2 * n :] = -a * 2.0 * hw * x * x / den**2
    return model, jac


def detect_minima(spectrum: OdmrSpectrum, linewidth_fwhm: Optional[float] = None) -> np.ndarray:
    """Candidate dip positions from local minima of a lightly smoothed trace."""
    f = spectrum.frequencies
    step = float(np.median(np.diff(f))) if f.size > 1 else 1.0
    fwhm = linewidth_fwhm or spectrum.meta.get("linewidth_mhz") or 10.0 * step
    sigma_pts = max(0.0, 0.15 * fwhm / step)
    y = 1.0 - spectrum.contrast
    smooth = gaussian_filter1d(y, sigma_pts) if sigma_pts > 0.3 else y
    noise = 1.4826 * np.median(np.abs(np.diff(y))) / np.sqrt(2.0)
    height = max(3.0 * noise, 0.05 * float(np.max(smooth) - np.median(smooth)))
    idx, _ = find_peaks(smooth, height=np.median(smooth) + height, distance=max(1, int(0.3 * fwhm / step)))
    return f[idx]


def fit_peaks(
    spectrum: OdmrSpectrum,
    expected_count: int,
    initial_guesses: Optional[Sequence[float]] = None,
    linewidth_fwhm: Optional[float] = None,
) -> PeakSet:
    """Multi-Lorentzian least-squares fit returning ``expected_count`` peaks.

    Uncertainties are 1-sigma from the fit covariance, scaled by the residual
    variance.  Peaks closer than FWHM/2 after the fit are reported as
    unresolved.
    """
    if expected_count < 1:
        raise ValueError("expected_count must be >= 1")
    f = spectrum.frequencies
    y = spectrum.contrast
    fwhm0 = float(linewidth_fwhm or spectrum.meta.get("linewidth_mhz") or 10 * np.median(np.diff(f)))

    if initial_guesses is None:
        guesses = detect_minima(spectrum, fwhm0)
        if guesses.size < expected_count:
            raise UnresolvedPeaksError(
                f"found {guesses.size} minima, expected {expected_count}", found=guesses.tolist()
            )
        if guesses.size > expected_count:
            depth_at = np.interp(guesses, f, 1.0 - y)
            keep = np.sort(np.argsort(depth_at)[::-1][:expected_count])
            guesses = guesses[keep]
    else:
        guesses = np.sort(np.asarray(initial_guesses, dtype=float))
        if guesses.size != expected_count:
            raise ValueError("initial_guesses must have expected_count entries")

    n = expected_count
    base0 = float(np.median(y))
    depth0 = np.clip(base0 - np.interp(guesses, f, y), 1e-6, None)
    x0 = np.concatenate([[base0], guesses, depth0, np.full(n, fwhm0 / 2.0)])
    lower = np.concatenate([[-np.inf], np.full(n, f[0]), np.zeros(n), np.full(n, 1e-6)])
    upper = np.concatenate([[np.inf], np.full(n, f[-1]), np.full(n, np.inf), np.full(n, f[-1] - f[0])])
    x0 = np.clip(x0, lower, upper)

    def resid(p):
        return _model_and_jac(p, f, n)[0] - y

    def jac(p):
        return _model_and_jac(p, f, n)[1]

    try:
        sol = least_squares(resid, x0, jac=jac, bounds=(lower, upper), method="trf", x_scale="jac", xtol=1e-12, ftol=1e-12, gtol=1e-12, max_nfev=2000)
    except Exception as exc:  # scipy raises plain ValueErrors on bad input
        raise FitError(f"peak fit failed: {exc}") from exc
    if sol.status <= 0:
        raise FitError(f"peak fit did not converge: {sol.message}")

    p = sol.x
    dof = max(1, f.size - p.size)
    s2 = float(np.sum(sol.fun**2)) / dof
    jtj = sol.jac.T @ sol.jac
    cov = np.linalg.pinv(jtj) * s2
    err = np.sqrt(np.clip(np.diag(cov), 0.0, None))

    centers = p[1 : 1 + n]
    widths = 2.0 * p[1 + 2 * n :]
    order = np.argsort(centers)
    centers = centers[order]
    gaps = np.diff(centers)
    if gaps.size and np.min(gaps) < 0.5 * fwhm0:
        raise UnresolvedPeaksError(
            f"fitted peaks {np.min(gaps):.3g} MHz apart, below FWHM/2 = {0.5 * fwhm0:.3g} MHz",
            found=centers.tolist(),
        )
    peaks = [
        Peak(float(p[1 + k]), float(err[1 + k]), float(p[1 + n + k]), float(2.0 * p[1 + 2 * n + k]))
        for k in order
    ]
    return PeakSet(tuple(peaks))


def merge_hyperfine(peaks: PeakSet, pair_sep: float = DEFAULT_CONSTANTS.hyperfine_pair_sep, tol: float = 0.3, strict: bool = False) -> PeakSet:
    """Replace hyperfine doublets by their midpoints.

    Working upward from the lowest unassigned peak, each peak is paired with
    the unassigned peak closest to ``pair_sep`` above it (within ``tol``), so
    doublets from different resonances may interleave.  Peaks without a
    partner pass through and are listed in ``unpaired``.
    """
    items = list(peaks.centers)
    pos = np.array([p.center for p in items])
    used = np.zeros(len(items), dtype=bool)
    merged, unpaired = [], []
    for k, a in enumerate(items):
        if used[k]:
            continue
        used[k] = True
        dev = np.abs(pos - a.center - pair_sep)
        dev[used] = np.inf
        j = int(np.argmin(dev)) if dev.size else -1
        if j >= 0 and dev[j] <= tol:
            b = items[j]
            used[j] = True
            merged.append(
                Peak(
                    0.5 * (a.center + b.center),
                    0.5 * float(np.hypot(a.uncertainty, b.uncertainty)),
                    0.5 * (a.depth + b.depth),
                    0.5 * (a.width + b.width),
                )
            )
        else:
            merged.append(a)
            unpaired.append(a.center)
    if len(unpaired) == len(items):
        # nothing to merge (e.g. already an 8-line set)
        return PeakSet(tuple(items))
    if unpaired:
        log.warning("merge_hyperfine: %d peak(s) without a hyperfine partner", len(unpaired))
        if strict:
            raise FitError(f"{len(unpaired)} peak(s) left without a hyperfine partner: {unpaired}")
    return PeakSet(tuple(merged), unpaired=tuple(unpaired))


@dataclass(frozen=True)
class SplittingRow:
    s: np.ndarray
    sigma: np.ndarray
    ambiguous: bool = False


def splittings_from_peaks(peaks) -> SplittingRow:
    """Nested pairing of 8 resonances into 4 splittings, largest first.

    The k-th lowest line is paired with the k-th highest.  The pairing is
    flagged ambiguous when neighbouring lines are closer than the spread of
    the pair midpoints (plus twice the largest uncertainty), since a line can
    then have swapped places with its neighbour.
    """
    if isinstance(peaks, PeakSet):
        c = peaks.positions
        u = peaks.uncertainties
    else:
        c = np.sort(np.asarray(peaks, dtype=float))
        u = np.zeros_like(c)
    if c.size != 8:
        raise ValueError(f"need exactly 8 resonances, got {c.size}")
    order = np.argsort(c)
    c, u = c[order], u[order]
    low, high = c[:4], c[::-1][:4]
    ul, uh = u[:4], u[::-1][:4]
    s = high - low
    sigma = np.hypot(ul, uh)
    mids = 0.5 * (high + low)
    spread = float(np.max(mids) - np.min(mids))
    gaps = np.concatenate([np.diff(c[:4]), np.diff(c[4:])])
    ambiguous = bool(np.min(gaps) <= spread + 2.0 * float(np.max(u)))
    idx = np.argsort(-s, kind="stable")
    return SplittingRow(s[idx], sigma[idx], ambiguous)


def splittings_from_lines(lines) -> np.ndarray:
    """Splittings when each transition pair is known, sorted descending.

    Jittered lines of a pair can cross, so the gap is taken as a distance.
    """
    lines = np.asarray(lines, dtype=float).reshape(-1, 4, 2)
    s = np.abs(lines[..., 1] - lines[..., 0])
    return -np.sort(-s, axis=-1)
