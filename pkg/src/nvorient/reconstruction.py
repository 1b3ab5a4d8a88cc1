"""Joint estimation of NV orientation and local field from splittings.

The six unknowns (theta1, phi1, alpha, B_loc) are fitted by weighted least
squares on the per-field splittings.  Measured rows carry no axis labels, so
model and measurement are both sorted in descending order before they are
compared.  A batch of quasi-random starts is descended simultaneously with a
Levenberg-Marquardt iteration (central-difference Jacobian), and the
endpoints are clustered so that symmetric solutions show up as separate,
equal-cost clusters.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.optimize import least_squares
from scipy.stats import qmc

from .errors import BoundsTooTightError, ConvergenceError, UnidentifiableError
from .geometry import (
    AxesSet,
    OrientationParams,
    axes_from_params,
    axes_vectors,
    great_circle_distance,
    match_axes,
    spherical_coords,
)
from .physics import DEFAULT_CONSTANTS, FieldVector, PhysicalConstants, as_vector, batch_fields, splitting_array
from .spectra import SplittingTable

log = logging.getLogger(__name__)

FD_STEP = 1e-7


@dataclass(frozen=True)
class ReconstructionConfig:
    n_starts: int = 64
    b_loc_bounds: tuple = ((-0.2, 0.2), (-0.2, 0.2), (-0.2, 0.2))  # mT
    weight: float = 1.0
    local_solver_tol: float = 1e-12
    max_iter: int = 500
    cluster_radius_mt: float = 1e-3
    cluster_radius_rad: float = 1e-2
    tie_rel_tol: float = 1e-6
    rng_seed: int = 0
    informed_starts: bool = True
    scan_size: int = 1024

    def __post_init__(self):
        if self.n_starts < 1:
            raise ValueError("n_starts must be >= 1")
        bounds = tuple(tuple(float(v) for v in b) for b in self.b_loc_bounds)
        if len(bounds) != 3 or any(len(b) != 2 for b in bounds):
            raise ValueError("b_loc_bounds needs three (low, high) pairs")
        if any(not (np.isfinite(lo) and np.isfinite(hi) and hi > lo) for lo, hi in bounds):
            raise ValueError("b_loc_bounds must be finite and non-empty")
        object.__setattr__(self, "b_loc_bounds", bounds)
        if self.weight <= 0:
            raise ValueError("weight must be positive")
        if self.scan_size < 1:
            raise ValueError("scan_size must be >= 1")

    @classmethod
    def symmetric(cls, half_width_mt: float, **kw) -> "ReconstructionConfig":
        return cls(b_loc_bounds=((-half_width_mt, half_width_mt),) * 3, **kw)

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["b_loc_bounds"] = [list(b) for b in self.b_loc_bounds]
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "ReconstructionConfig":
        data = dict(data)
        if "b_loc_bounds" in data:
            data["b_loc_bounds"] = tuple(tuple(b) for b in data["b_loc_bounds"])
        return cls(**data)


@dataclass(frozen=True)
class Solution:
    params: OrientationParams
    b_loc: FieldVector
    cost: float

    @property
    def axes(self) -> AxesSet:
        return axes_from_params(self.params)

    def to_dict(self) -> dict:
        return {
            "theta1": self.params.theta1,
            "phi1": self.params.phi1,
            "alpha": self.params.alpha,
            "b_loc_mt": list(self.b_loc),
            "cost": self.cost,
            "axes": self.axes.vectors.tolist(),
        }


@dataclass(frozen=True)
class Cluster:
    solution: Solution
    count: int
    cost: float
    at_bound: bool = False
    members: tuple = ()

    def to_dict(self) -> dict:
        return {
            "solution": self.solution.to_dict(),
            "count": self.count,
            "cost": self.cost,
            "at_bound": self.at_bound,
            "members": list(self.members),
        }


@dataclass(frozen=True, eq=False)
class ReconstructionResult:
    best: Solution
    clusters: tuple
    converged_fraction: float
    residuals: np.ndarray
    degenerate: bool = False
    b_loc_stderr: Optional[np.ndarray] = None
    n_starts: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def tied_clusters(self) -> list:
        """Clusters whose cost ties the best one (symmetric solutions)."""
        return [c for c in self.clusters if c.cost <= self.extra.get("tie_cost", self.best.cost)]

    def to_dict(self) -> dict:
        return {
            "best": self.best.to_dict(),
            "clusters": [c.to_dict() for c in self.clusters],
            "converged_fraction": self.converged_fraction,
            "degenerate": self.degenerate,
            "residuals": np.asarray(self.residuals).tolist(),
            "b_loc_stderr_mt": None if self.b_loc_stderr is None else list(map(float, self.b_loc_stderr)),
            "n_starts": self.n_starts,
            **{k: v for k, v in self.extra.items() if k != "trace"},
        }


@dataclass(frozen=True, eq=False)
class CoilModel:
    """Lab-frame linear coil model: ``B_bias = m @ currents + offset`` (mT, A)."""

    m: np.ndarray
    offset: FieldVector = FieldVector(0.0, 0.0, 0.0)

    def __post_init__(self):
        m = np.array(self.m, dtype=float).reshape(3, 3)
        if not np.all(np.isfinite(m)):
            raise ValueError("coil matrix must be finite")
        m.setflags(write=False)
        object.__setattr__(self, "m", m)
        if not isinstance(self.offset, FieldVector):
            object.__setattr__(self, "offset", FieldVector.from_array(self.offset))

    def fields(self, currents) -> np.ndarray:
        i = np.atleast_2d(np.asarray(currents, dtype=float))
        return i @ self.m.T + self.offset.as_array()

    def to_dict(self) -> dict:
        return {"m": self.m.tolist(), "offset": list(self.offset)}

    @classmethod
    def from_dict(cls, data: dict) -> "CoilModel":
        return cls(np.array(data["m"]), FieldVector.from_array(data.get("offset", [0.0, 0.0, 0.0])))


def canonical_coil_matrix(m) -> np.ndarray:
    """Upper-triangular representative (positive diagonal) of ``m`` modulo
    lab-frame rotations and reflections, which splittings cannot resolve."""
    m = np.asarray(m, dtype=float)
    _, r = np.linalg.qr(m)
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    return signs[:, None] * r


# ---------------------------------------------------------------------------
# forward model and cost


def _sorted_desc(a: np.ndarray) -> np.ndarray:
    return -np.sort(-a, axis=-1)


def model_splittings(angles, b_total, constants: PhysicalConstants = DEFAULT_CONSTANTS) -> np.ndarray:
    """Splittings for (n, 3) angle sets and (n, F, 3) total fields -> (n, F, 4)."""
    axes = axes_vectors(angles)  # (n, 4, 3)
    proj = np.einsum("nfk,njk->nfj", b_total, axes)
    mag = np.linalg.norm(b_total, axis=-1)[..., None]
    return splitting_array(proj, np.broadcast_to(mag, proj.shape), constants)


def _measured_array(measured) -> np.ndarray:
    s = getattr(measured, "s", measured)
    return np.atleast_2d(np.asarray(s, dtype=float))


def cost(
    params,
    b_loc,
    bias_fields,
    measured,
    w: float = 1.0,
    constants: PhysicalConstants = DEFAULT_CONSTANTS,
) -> float:
    """Weighted sum of squared splitting mismatches over fields and axes."""
    angles = np.asarray(params.as_array() if isinstance(params, OrientationParams) else params, dtype=float)
    bias = batch_fields(bias_fields)
    meas = _measured_array(measured)
    if meas.shape != (bias.shape[0], 4):
        raise ValueError(f"measured table {meas.shape} does not match {bias.shape[0]} bias fields")
    b_total = bias + as_vector(b_loc)
    calc = model_splittings(angles[None, :], b_total[None], constants)[0]
    diff = _sorted_desc(meas) - _sorted_desc(calc)
    return float(w * np.sum(diff * diff))


def coil_cost(params, b_loc, coil: CoilModel, currents, measured, w: float = 1.0, constants=DEFAULT_CONSTANTS) -> float:
    return cost(params, b_loc, coil.fields(currents), measured, w, constants)


class _Problem:
    """Residual maps for the plain and coil-calibration parameterisations."""

    def __init__(self, measured, w, constants, bias=None, currents=None, offset=None):
        self.meas = _sorted_desc(_measured_array(measured)).reshape(-1)
        self.sqrt_w = np.sqrt(w)
        self.constants = constants
        self.bias = None if bias is None else np.asarray(bias, dtype=float)
        self.currents = None if currents is None else np.asarray(currents, dtype=float)
        self.offset = np.zeros(3) if offset is None else np.asarray(offset, dtype=float)

    def totals(self, x: np.ndarray) -> np.ndarray:
        if self.currents is None:
            return self.bias[None, :, :] + x[:, None, 3:6]
        u = _upper_from_vec(x[:, 6:12])
        return np.einsum("nab,fb->nfa", u, self.currents) + x[:, None, 3:6]

    def residuals(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        calc = model_splittings(x[:, :3], self.totals(x), self.constants)
        calc = _sorted_desc(calc).reshape(x.shape[0], -1)
        return self.sqrt_w * (self.meas[None, :] - calc)


_TRIU = np.triu_indices(3)


def _upper_from_vec(v: np.ndarray) -> np.ndarray:
    u = np.zeros(v.shape[:-1] + (3, 3))
    u[..., _TRIU[0], _TRIU[1]] = v
    return u


def numerical_jacobian(fun: Callable, x: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Central-difference Jacobian of a batched residual map, (n, m, p)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    n, p = x.shape
    steps = np.eye(p) * h
    probes = np.concatenate([x[:, None, :] + steps[None], x[:, None, :] - steps[None]], axis=1)
    r = fun(probes.reshape(-1, p)).reshape(n, 2 * p, -1)
    return np.transpose((r[:, :p] - r[:, p:]) / (2.0 * h), (0, 2, 1))


@dataclass
class LocalSolveResult:
    x: np.ndarray
    cost: np.ndarray
    converged: np.ndarray
    iterations: np.ndarray
    jac: Optional[np.ndarray] = None


def local_solve(
    fun: Callable,
    x0: np.ndarray,
    lower: np.ndarray,
    upper: np.ndarray,
    tol: float = 1e-12,
    max_iter: int = 500,
    cost_floor: float = 0.0,
    h: float = FD_STEP,
) -> LocalSolveResult:
    """Damped Gauss-Newton (Levenberg-Marquardt) on a batch of starts.

    Steps are clipped into the box [lower, upper]; unbounded coordinates use
    infinite limits.  A start stops when an accepted step lowers the cost by
    less than ``tol`` relative, the cost drops below ``cost_floor``, or the
    damping saturates.
    """
    x = np.array(np.atleast_2d(x0), dtype=float)
    n, p = x.shape
    x = np.clip(x, lower, upper)
    r = fun(x)
    c = np.sum(r * r, axis=1)
    jac = numerical_jacobian(fun, x, h)
    mu = np.full(n, 1e-3)
    window = 10
    history = np.repeat(c[:, None], window, axis=1)  # cost at the last few iterations
    active = np.ones(n, dtype=bool)
    converged = np.zeros(n, dtype=bool)
    iters = np.zeros(n, dtype=int)
    eye = np.eye(p)

    for _ in range(max_iter):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        iters[idx] += 1
        j = jac[idx]
        a = np.einsum("nmp,nmq->npq", j, j)
        g = np.einsum("nmp,nm->np", j, r[idx])
        diag = np.einsum("npp->np", a)
        diag = np.maximum(diag, 1e-12 * np.max(diag, axis=1, keepdims=True) + 1e-300)
        lhs = a + mu[idx, None, None] * diag[:, :, None] * eye
        # coordinates pinned at a bound with the gradient pushing outward stay put
        xi = x[idx]
        pinned = ((xi <= lower) & (g > 0)) | ((xi >= upper) & (g < 0))
        if pinned.any():
            keep_mask = ~pinned
            lhs = lhs * keep_mask[:, :, None] * keep_mask[:, None, :] + pinned[:, :, None] * eye
            g = np.where(pinned, 0.0, g)
        try:
            step = -np.linalg.solve(lhs, g[..., None])[..., 0]
        except np.linalg.LinAlgError:
            step = -np.stack([np.linalg.lstsq(m, v, rcond=None)[0] for m, v in zip(lhs, g)])
        xt = np.clip(x[idx] + step, lower, upper)
        rt = fun(xt)
        ct = np.sum(rt * rt, axis=1)
        ok = np.isfinite(ct) & (ct < c[idx])

        acc = idx[ok]
        if acc.size:
            decrease = (c[acc] - ct[ok]) / np.maximum(c[acc], 1e-300)
            x[acc] = xt[ok]
            r[acc] = rt[ok]
            c[acc] = ct[ok]
            mu[acc] = np.maximum(mu[acc] / 3.0, 1e-12)
            done = (decrease <= tol) | (ct[ok] <= cost_floor)
            moved = np.abs(step[ok]).max(axis=1) <= 1e-15 * (1.0 + np.abs(x[acc]).max(axis=1))
            done |= moved
            converged[acc[done]] = True
            active[acc[done]] = False
            keep = acc[~done]
            if keep.size:
                jac[keep] = numerical_jacobian(fun, x[keep], h)

        rej = idx[~ok]
        if rej.size:
            mu[rej] *= 4.0
            stuck = (mu[rej] > 1e16) | (c[rej] <= cost_floor)
            converged[rej[stuck]] = True
            active[rej[stuck]] = False

        # slow crawl along a kink of the sorted cost: little progress over the window
        oldest = history[idx, iters[idx] % window]
        history[idx, iters[idx] % window] = c[idx]
        crawl = active[idx] & (iters[idx] > window) & (oldest - c[idx] <= 1e3 * tol * np.maximum(c[idx], 1e-300))
        converged[idx[crawl]] = True
        active[idx[crawl]] = False

    return LocalSolveResult(x, c, converged, iters, jac)


# ---------------------------------------------------------------------------
# multistart driver


def _start_points(n: int, dims: int, seed: int) -> np.ndarray:
    sampler = qmc.Sobol(d=dims, scramble=True, seed=np.random.default_rng(seed))
    m = int(np.ceil(np.log2(max(n, 1))))
    pts = sampler.random_base2(m) if 2**m == n else sampler.random(n)
    return pts[:n]


def _sobol_angles(n: int, seed: int) -> np.ndarray:
    u = _start_points(n, 3, seed)
    return np.column_stack([np.pi * u[:, 0], 2 * np.pi * u[:, 1], 2 * np.pi * u[:, 2]])


def _field_seeds(bias: np.ndarray, radii: np.ndarray, lower_b, upper_b, seed: int, max_seeds: int = 8) -> np.ndarray:
    """Candidate local fields where the spheres |bias_i + b| = r_i meet.

    Gauss-Newton from a spread of points lands on the unique point (four or
    more general fields), on either mirror point (three), or on points of
    the circle (two).  With noisy radii it lands on near misses, which is
    all a starting point needs.
    """
    from .geometry import SphereConstraint, _polish

    spheres = [SphereConstraint.from_bias(b, r) for b, r in zip(bias, radii)]
    probes = lower_b + (upper_b - lower_b) * _start_points(16, 3, seed + 1)
    found: list[np.ndarray] = []
    scale = float(np.max(upper_b - lower_b))
    for x0 in probes:
        x = np.clip(_polish(x0, spheres, iters=30), lower_b, upper_b)
        if np.all(np.isfinite(x)) and all(np.linalg.norm(x - f) > 1e-3 * scale for f in found):
            found.append(x)
        if len(found) >= max_seeds:
            break
    return np.array(found).reshape(-1, 3)


_PERMS = np.array(list(__import__("itertools").permutations(range(4))))
_SIGNS = np.array([[1 - 2 * ((k >> j) & 1) for j in range(4)] for k in range(16)], dtype=float)
_TETRA = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]]) / np.sqrt(3.0)


def _signed_candidates(p: np.ndarray, n_patterns: int) -> np.ndarray:
    """Signed, permuted copies of |projections| ``p`` whose entries nearly sum
    to zero, as the four tetrahedral axes do."""
    sums = np.abs(_SIGNS @ p)
    keep = _SIGNS[np.argsort(sums, kind="stable")[: 2 * n_patterns]]
    signed = keep * p  # (k, 4)
    return signed[:, _PERMS].reshape(-1, 4)


def _axes_from_assignment(b_tot: np.ndarray, proj: np.ndarray) -> tuple[np.ndarray, float]:
    """Least-squares axes with ``b_tot @ n_j = proj[:, j]``, snapped to the
    nearest regular tetrahedron by orthogonal Procrustes."""
    nt, *_ = np.linalg.lstsq(b_tot, proj, rcond=None)  # (3, 4)
    n = nt.T
    u, _, vt = np.linalg.svd(n.T @ _TETRA)
    o = u @ vt
    fit = _TETRA @ o.T
    return fit, float(np.sum((b_tot @ fit.T - proj) ** 2))


def _orientation_guesses(b_tot: np.ndarray, p: np.ndarray, beam: int = 32, n_out: int = 4) -> list:
    """Beam search over per-field signed labelings of the projections.

    Labels and global sign of the first field are a gauge choice.  Each
    further field is matched through the Gram identity
    ``P_i . P_k = 4/3 B_i . B_k`` that holds for tetrahedral axes.
    """
    gram = (4.0 / 3.0) * b_tot @ b_tot.T
    first = _SIGNS[np.argsort(np.abs(_SIGNS @ p[0]), kind="stable")[:4]] * p[0]
    partial = [(0.0, [row]) for row in first]
    for i in range(1, b_tot.shape[0]):
        cands = _signed_candidates(p[i], 2)
        grown = []
        for score, rows in partial:
            prev = np.array(rows)
            err = cands @ prev.T - gram[i, : len(rows)]
            total = score + np.sum(err * err, axis=1) + np.sum(cands, axis=1) ** 2
            for k in np.argsort(total, kind="stable")[:beam]:
                grown.append((float(total[k]), rows + [cands[k]]))
        grown.sort(key=lambda t: t[0])
        partial = grown[:beam]
    out = []
    for _, rows in partial:
        if b_tot.shape[0] < 3:
            break
        axes, resid = _axes_from_assignment(b_tot, np.array(rows))
        out.append((resid, axes))
    out.sort(key=lambda t: t[0])
    guesses = []
    for _, axes in out:
        if all(match_axes(axes, g).mean_dgc > 1e-3 for g in guesses):
            guesses.append(axes)
        if len(guesses) >= n_out:
            break
    return guesses


def _informed_starts(problem: "_Problem", bias, meas, lower_b, upper_b, cfg, constants) -> np.ndarray:
    """Starts built from trilaterated field seeds.

    For each seed the projections are known up to sign and label; the
    algebraic guesses above supply orientations, and a coarse quasi-random
    scan adds a few more for safety.
    """
    from .geometry import params_from_vectors
    from .physics import estimate_total_magnitudes, invert_splitting

    try:
        radii = estimate_total_magnitudes(np.abs(meas), constants, clip=True)
    except Exception as exc:  # starting points are optional
        log.warning("informed starts skipped: %s", exc)
        return np.zeros((0, 6))
    seeds = _field_seeds(bias, radii, lower_b, upper_b, cfg.rng_seed)
    if seeds.size == 0:
        return np.zeros((0, 6))
    angles = _sobol_angles(cfg.scan_size, cfg.rng_seed + 2)
    starts = []
    for b in seeds:
        b_tot = bias + b
        mags = np.linalg.norm(b_tot, axis=1)
        p = np.array([[invert_splitting(s, m, constants) for s in row] for row, m in zip(meas, mags)])
        for axes in _orientation_guesses(b_tot, p):
            starts.append(np.concatenate([params_from_vectors(axes).as_array(), b]))
        x = np.column_stack([angles, np.broadcast_to(b, (angles.shape[0], 3))])
        r = problem.residuals(x)
        c = np.sum(r * r, axis=1)
        for k in np.argsort(c, kind="stable")[:2]:
            starts.append(x[k])
    return np.array(starts)


def _wrap_params(angles) -> OrientationParams:
    return OrientationParams.wrap(*angles)


def _cost_floor(meas: np.ndarray, w: float, rel: float) -> float:
    scale = float(np.max(np.abs(meas))) if meas.size else 1.0
    return w * meas.size * (rel * max(scale, 1e-300)) ** 2


def _cluster(endpoints, costs, cfg: ReconstructionConfig, lower_b, upper_b, tie_cost):
    """Group endpoints by local field and (gauge-matched) axes."""
    order = sorted(range(len(endpoints)), key=lambda k: (costs[k], k))
    groups: list[list[int]] = []
    reps: list[tuple[np.ndarray, np.ndarray]] = []
    for k in order:
        x = endpoints[k]
        b = x[3:6]
        ax = axes_vectors(x[:3])
        for gi, (rb, rax) in enumerate(reps):
            if np.linalg.norm(b - rb) <= cfg.cluster_radius_mt and match_axes(ax, rax).mean_dgc <= cfg.cluster_radius_rad:
                groups[gi].append(k)
                break
        else:
            groups.append([k])
            reps.append((b, ax))

    clusters = []
    for members in groups:
        best_cost = costs[members[0]]
        tied = [k for k in members if costs[k] <= best_cost + max(cfg.tie_rel_tol * best_cost, tie_cost - best_cost if tie_cost > best_cost else 0.0)]
        candidates = []
        for k in tied or members[:1]:
            params = _wrap_params(endpoints[k][:3])
            candidates.append((tuple(params.as_array()), k, params))
        _, k_rep, params = min(candidates, key=lambda t: (t[0], t[1]))
        b = endpoints[k_rep][3:6]
        tol = 1e-9 * max(1.0, float(np.max(np.abs(np.concatenate([lower_b, upper_b])))))
        at_bound = bool(np.any(np.abs(b - lower_b) <= tol) or np.any(np.abs(b - upper_b) <= tol))
        sol = Solution(params, FieldVector.from_array(b), float(costs[k_rep]))
        clusters.append(Cluster(sol, len(members), float(best_cost), at_bound, tuple(int(m) for m in sorted(members))))
    clusters.sort(key=lambda c: (c.cost, c.members[0]))
    return clusters


def _gauss_newton_stderr(jac: np.ndarray, cost_value: float, n_data: int) -> np.ndarray:
    p = jac.shape[1]
    if n_data <= p:
        return np.full(p, np.nan)
    cov = np.linalg.pinv(jac.T @ jac) * (cost_value / (n_data - p))
    return np.sqrt(np.clip(np.diag(cov), 0.0, None))


def _multistart(problem: _Problem, x0: np.ndarray, lower, upper, cfg: ReconstructionConfig, meas):
    floor = _cost_floor(meas, cfg.weight, 1e-13)
    res = local_solve(problem.residuals, x0, lower, upper, cfg.local_solver_tol, cfg.max_iter, floor)
    conv = np.flatnonzero(res.converged)
    if conv.size == 0:
        trace = [{"start": int(k), "cost": float(res.cost[k]), "iterations": int(res.iterations[k])} for k in range(len(x0))]
        raise ConvergenceError("no multistart run converged", trace)
    return res, conv


def _assemble(problem, res, conv, cfg, meas, lower_b, upper_b, extra=None) -> ReconstructionResult:
    costs = res.cost
    best_cost = float(np.min(costs[conv]))
    tie_cost = best_cost + max(cfg.tie_rel_tol * best_cost, _cost_floor(meas, cfg.weight, 1e-7))
    clusters = _cluster([res.x[k] for k in conv], [float(costs[k]) for k in conv], cfg, lower_b, upper_b, tie_cost)
    # map cluster member indices back to start indices
    clusters = [replace(c, members=tuple(int(conv[m]) for m in c.members)) for c in clusters]
    if all(c.at_bound for c in clusters):
        raise BoundsTooTightError("every converged solution sits on the B_loc bounds; widen b_loc_bounds")
    best = clusters[0]
    degenerate = sum(1 for c in clusters if c.cost <= tie_cost) >= 2

    k_best = best.members[0]
    for k in best.members:
        if np.isclose(res.x[k][3:6], best.solution.b_loc.as_array()).all() and costs[k] == best.solution.cost:
            k_best = k
            break
    x_best = res.x[k_best]
    r_best = problem.residuals(x_best[None])[0]
    residuals = (r_best / problem.sqrt_w).reshape(-1, 4)
    stderr = _gauss_newton_stderr(res.jac[k_best], float(costs[k_best]), r_best.size)
    info = {"tie_cost": tie_cost, "start_costs": [float(c) for c in costs], "stderr_all": stderr.tolist()}
    info.update(extra or {})
    return ReconstructionResult(
        best=best.solution,
        clusters=tuple(clusters),
        converged_fraction=float(conv.size / len(res.x)),
        residuals=residuals,
        degenerate=degenerate,
        b_loc_stderr=stderr[3:6],
        n_starts=len(res.x),
        extra=info,
    )


def reconstruct(
    measured,
    bias_fields,
    config: Optional[ReconstructionConfig] = None,
    constants: PhysicalConstants = DEFAULT_CONSTANTS,
) -> ReconstructionResult:
    """Multistart fit of orientation and local field to a splitting table.

    With fewer than four bias fields the problem is under-determined and
    the cluster list exposes the symmetric solution set (ring, mirror pair).
    """
    cfg = config or ReconstructionConfig()
    bias = batch_fields(bias_fields)
    meas = _measured_array(measured)
    if meas.shape != (bias.shape[0], 4):
        raise ValueError(f"measured table {meas.shape} does not match {bias.shape[0]} bias fields")
    if not np.all(np.isfinite(meas)):
        raise ValueError("splittings must be finite")
    if bias.shape[0] < 3:
        log.info("reconstruct: only %d bias field(s), solution is not unique", bias.shape[0])

    lower_b = np.array([b[0] for b in cfg.b_loc_bounds])
    upper_b = np.array([b[1] for b in cfg.b_loc_bounds])
    u = _start_points(cfg.n_starts, 6, cfg.rng_seed)
    x0 = np.empty_like(u)
    x0[:, 0] = np.pi * u[:, 0]
    x0[:, 1] = 2 * np.pi * u[:, 1]
    x0[:, 2] = 2 * np.pi * u[:, 2]
    x0[:, 3:6] = lower_b + (upper_b - lower_b) * u[:, 3:6]
    lower = np.concatenate([np.full(3, -np.inf), lower_b])
    upper = np.concatenate([np.full(3, np.inf), upper_b])

    problem = _Problem(meas, cfg.weight, constants, bias=bias)
    if cfg.informed_starts:
        x0 = np.vstack([x0, _informed_starts(problem, bias, meas, lower_b, upper_b, cfg, constants)])
    res, conv = _multistart(problem, x0, lower, upper, cfg, meas)
    return _assemble(problem, res, conv, cfg, meas, lower_b, upper_b)


# ---------------------------------------------------------------------------
# coil calibration


def _check_currents(currents: np.ndarray):
    _, sv, vt = np.linalg.svd(currents, full_matrices=True)
    rank = int(np.sum(sv > 1e-9 * max(sv[0], 1e-300)))
    if rank < 3:
        null = vt[rank:]
        raise UnidentifiableError(
            f"coil currents span only {rank} direction(s); coil response along "
            f"{np.round(null, 6).tolist()} is unidentifiable",
            directions=null,
        )


def _magnitude_fit(currents, radii, m0, b0):
    """Fit |U I + b| = r for upper-triangular U and vector b."""
    def resid(v):
        u = _upper_from_vec(v[:6])
        return np.linalg.norm(currents @ u.T + v[6:9], axis=1) - radii

    v0 = np.concatenate([canonical_coil_matrix(m0)[_TRIU], b0])
    sol = least_squares(resid, v0, xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=2000)
    return _upper_from_vec(sol.x[:6]), sol.x[6:9]


def _linear_sphere_init(currents, radii):
    """Closed-form (U, b) from |U I + b|^2 = r^2, which is linear in
    (U^T U, U^T b, |b|^2); needs at least 10 well-spread current triples."""
    i1, i2, i3 = currents.T
    rows = np.column_stack([i1 * i1, i2 * i2, i3 * i3, 2 * i1 * i2, 2 * i1 * i3, 2 * i2 * i3, 2 * i1, 2 * i2, 2 * i3, np.ones_like(i1)])
    if rows.shape[0] < 10 or np.linalg.matrix_rank(rows) < 10:
        return None
    sol, *_ = np.linalg.lstsq(rows, radii**2, rcond=None)
    g = np.array([[sol[0], sol[3], sol[4]], [sol[3], sol[1], sol[5]], [sol[4], sol[5], sol[2]]])
    try:
        u = np.linalg.cholesky(g).T
    except np.linalg.LinAlgError:
        return None
    b = np.linalg.solve(u.T, sol[6:9])
    return u, b


def calibrate_coils(
    runs: Sequence,
    config: Optional[ReconstructionConfig] = None,
    constants: PhysicalConstants = DEFAULT_CONSTANTS,
    offset=None,
    initial_model: Optional[CoilModel] = None,
):
    """Fit coil matrix, orientation and local field jointly.

    ``runs`` is a sequence of (currents [A], splitting row or table).  Two
    gauge freedoms are removed before fitting: a common rotation/reflection
    of the lab frame (the returned matrix is upper triangular with positive
    diagonal) and the coil offset, which only enters through
    ``offset + B_loc`` and is therefore held at the supplied value.
    """
    from .physics import estimate_total_magnitudes

    cfg = config or ReconstructionConfig()
    currents = np.array([np.asarray(c, dtype=float).reshape(3) for c, _ in runs])
    meas = np.vstack([_measured_array(s) for _, s in runs])
    if meas.shape != (currents.shape[0], 4):
        raise ValueError("each run needs one row of four splittings")
    _check_currents(currents)
    off = np.zeros(3) if offset is None else as_vector(offset)

    radii = estimate_total_magnitudes(meas, constants, clip=True)
    init = _linear_sphere_init(currents, radii)
    m0 = init[0] if init is not None else (initial_model.m if initial_model is not None else np.eye(3))
    b0 = init[1] if init is not None else np.zeros(3)
    u0, b0 = _magnitude_fit(currents, radii, m0, b0)

    lower_b = np.array([b[0] for b in cfg.b_loc_bounds]) + off
    upper_b = np.array([b[1] for b in cfg.b_loc_bounds]) + off
    b0 = np.clip(b0, lower_b, upper_b)

    u = _start_points(cfg.n_starts, 3, cfg.rng_seed)
    x0 = np.empty((cfg.n_starts, 12))
    x0[:, 0] = np.pi * u[:, 0]
    x0[:, 1] = 2 * np.pi * u[:, 1]
    x0[:, 2] = 2 * np.pi * u[:, 2]
    x0[:, 3:6] = b0
    x0[:, 6:12] = u0[_TRIU]
    if cfg.informed_starts:
        x0 = np.vstack([x0, _coil_informed_starts(currents, meas, u0, b0, constants)])
    lower = np.concatenate([np.full(3, -np.inf), lower_b, np.full(6, -np.inf)])
    upper = np.concatenate([np.full(3, np.inf), upper_b, np.full(6, np.inf)])

    problem = _Problem(meas, cfg.weight, constants, currents=currents, offset=off)
    res, conv = _multistart(problem, x0, lower, upper, cfg, meas)

    # local field is reported without the coil offset
    shifted = res.x.copy()
    shifted[:, 3:6] -= off
    shifted_res = LocalSolveResult(shifted, res.cost, res.converged, res.iterations, res.jac)

    class _Shifted(_Problem):
        def totals(self, x):
            y = x.copy()
            y[:, 3:6] += off
            return _Problem.totals(self, y)

    view = _Shifted(meas, cfg.weight, constants, currents=currents, offset=off)
    result = _assemble(view, shifted_res, conv, cfg, meas, lower_b - off, upper_b - off)
    k = result.best
    k_idx = int(np.argmin(np.where(res.converged, res.cost, np.inf)))
    m_fit = _upper_from_vec(res.x[k_idx, 6:12])
    # flip row signs so the diagonal is positive (a lab-frame reflection)
    signs = np.sign(np.diag(m_fit))
    signs[signs == 0] = 1.0
    if np.any(signs < 0):
        m_fit = signs[:, None] * m_fit
        result = _reflect_result(result, signs)
    model = CoilModel(m_fit, FieldVector.from_array(off))
    return model, result


def _coil_informed_starts(currents, meas, u0, b0, constants) -> np.ndarray:
    from .geometry import params_from_vectors
    from .physics import invert_splitting

    b_tot = currents @ u0.T + b0
    mags = np.linalg.norm(b_tot, axis=1)
    p = np.array([[invert_splitting(s, m, constants) for s in row] for row, m in zip(np.abs(meas), mags)])
    starts = [
        np.concatenate([params_from_vectors(axes).as_array(), b0, u0[_TRIU]])
        for axes in _orientation_guesses(b_tot, p)
    ]
    return np.array(starts).reshape(-1, 12)


def _reflect_result(result: ReconstructionResult, signs: np.ndarray) -> ReconstructionResult:
    """Apply the diagonal reflection ``diag(signs)`` to fields and axes."""
    def flip(sol: Solution) -> Solution:
        axes = sol.axes.vectors * signs
        from .geometry import params_from_vectors

        return Solution(params_from_vectors(axes), FieldVector.from_array(sol.b_loc.as_array() * signs), sol.cost)

    clusters = tuple(replace(c, solution=flip(c.solution)) for c in result.clusters)
    return replace(result, best=flip(result.best), clusters=clusters)


# ---------------------------------------------------------------------------
# dispersion metrics


def delta_b(runs) -> np.ndarray:
    """Per-component population standard deviation of local-field estimates."""
    arr = np.array([as_vector(r) for r in runs]) if len(runs) else np.zeros((0, 3))
    if arr.shape[0] == 0:
        raise ValueError("delta_b needs at least one run")
    # shifting by one run keeps identical estimates at exactly zero spread
    arr = arr - arr[0]
    return np.sqrt(np.mean((arr - arr.mean(axis=0)) ** 2, axis=0))


def axes_dispersion(runs) -> np.ndarray:
    """Mean great-circle distance of each axis to its mean direction.

    Runs must already share labels and signs (see ``align_axes``).
    """
    v = np.array([np.asarray(getattr(r, "vectors", r), dtype=float) for r in runs])
    if v.shape[0] < 2:
        raise ValueError("axes_dispersion needs at least two runs")
    out = np.empty(4)
    for j in range(4):
        mean = v[:, j].mean(axis=0)
        norm = np.linalg.norm(mean)
        if norm < 1e-9:
            raise ValueError(f"mean direction of axis {j + 1} is degenerate")
        ref = spherical_coords(mean / norm)
        out[j] = np.mean([great_circle_distance(spherical_coords(x), ref) for x in v[:, j]])
    return out


def align_axes(runs, reference) -> list:
    """Relabel/re-sign every run onto ``reference`` with ``match_axes``."""
    return [AxesSet.from_directions(match_axes(r, reference).apply(r)) for r in runs]
