"""NV ground-state spin levels, ODMR splittings and field projections.

Units throughout: MHz for energies/frequencies, mT for fields.

The spin-1 Hamiltonian ``D Sz^2 + gamma_e B.S`` only depends on the field
through its projection on the NV axis and its total magnitude, so the
levels are the roots of

    lam * ((D - lam)^2 - g^2 Bp^2) - (lam - D) * g^2 * (Bt^2 - Bp^2) = 0

with ``g = gamma_e``.  The roots are found in closed form and the
``m_s = 0`` level is then polished with Newton steps; the two ``m_s = +-1``
levels follow from the sum of roots and the identity

    S^2 = lam0^2 + 4 g^2 Bp^2 D / (D - lam0)

for the splitting ``S = lam_plus - lam_minus``, which has no cancellation
and stays exact for purely axial fields.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numba as nb
import numpy as np
from scipy.optimize import brentq

from .errors import ConvergenceError, InconsistentProjectionError, InconsistentSplittingError

_SLACK = 1e-9


@dataclass(frozen=True)
class PhysicalConstants:
    d_gs: float = 2870.0  # MHz
    gamma_e: float = 28.0  # MHz/mT
    a_par: float = -2.16  # MHz
    a_perp: float = -2.70  # MHz
    gamma_n: float = 0.3077  # MHz/T
    hyperfine_pair_sep: float = 3.03  # MHz

    def __post_init__(self):
        values = (self.d_gs, self.gamma_e, self.a_par, self.a_perp, self.gamma_n, self.hyperfine_pair_sep)
        if not all(np.isfinite(v) for v in values):
            raise ValueError("physical constants must be finite")
        if self.d_gs <= 0 or self.gamma_e <= 0:
            raise ValueError("d_gs and gamma_e must be positive")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


DEFAULT_CONSTANTS = PhysicalConstants()


@dataclass(frozen=True)
class FieldVector:
    """Magnetic field in the lab frame, mT."""

    bx: float
    by: float
    bz: float

    def __post_init__(self):
        for name in ("bx", "by", "bz"):
            value = float(getattr(self, name))
            if not np.isfinite(value):
                raise ValueError(f"field component {name} is not finite")
            object.__setattr__(self, name, value)

    @classmethod
    def from_array(cls, values) -> "FieldVector":
        x, y, z = np.asarray(values, dtype=float).reshape(3)
        return cls(x, y, z)

    def as_array(self) -> np.ndarray:
        return np.array([self.bx, self.by, self.bz])

    @property
    def magnitude(self) -> float:
        return float(np.linalg.norm(self.as_array()))

    def __add__(self, other):
        return FieldVector.from_array(self.as_array() + as_vector(other))

    def __sub__(self, other):
        return FieldVector.from_array(self.as_array() - as_vector(other))

    def __neg__(self):
        return FieldVector(-self.bx, -self.by, -self.bz)

    def __mul__(self, factor: float):
        return FieldVector.from_array(self.as_array() * float(factor))

    __rmul__ = __mul__

    def __iter__(self):
        return iter((self.bx, self.by, self.bz))


def as_vector(value) -> np.ndarray:
    """Coerce a FieldVector or 3-sequence to a float array of shape (3,)."""
    if isinstance(value, FieldVector):
        return value.as_array()
    arr = np.asarray(value, dtype=float)
    if arr.shape != (3,):
        raise ValueError(f"expected a 3-vector, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class SpinLevels:
    lambda_0: float
    lambda_minus: float
    lambda_plus: float

    @property
    def splitting(self) -> float:
        return self.lambda_plus - self.lambda_minus

    @property
    def transitions(self) -> tuple[float, float]:
        """ODMR resonance frequencies (m_s=0 -> -1, m_s=0 -> +1)."""
        return self.lambda_minus - self.lambda_0, self.lambda_plus - self.lambda_0


@dataclass(frozen=True)
class ProjectionSet:
    p1: float
    p2: float
    p3: float
    p4: float

    def as_array(self) -> np.ndarray:
        return np.array([self.p1, self.p2, self.p3, self.p4])

    def __iter__(self):
        return iter((self.p1, self.p2, self.p3, self.p4))


# ---------------------------------------------------------------------------
# vectorised level solver


def nv_frame_hamiltonian(b_proj, b_perp, constants: PhysicalConstants = DEFAULT_CONSTANTS) -> np.ndarray:
    """Real symmetric 3x3 Hamiltonian(s) in the |+1>, |0>, |-1> basis.

    The transverse component is put along x, which leaves the spectrum
    unchanged.  Broadcasts over array inputs; the trailing two axes are the
    matrix.
    """
    d, g = constants.d_gs, constants.gamma_e
    bz = np.asarray(b_proj, dtype=float)
    bt = np.asarray(b_perp, dtype=float)
    bz, bt = np.broadcast_arrays(bz, bt)
    h = np.zeros(bz.shape + (3, 3))
    off = g * bt / np.sqrt(2.0)
    h[..., 0, 0] = d + g * bz
    h[..., 2, 2] = d - g * bz
    h[..., 0, 1] = h[..., 1, 0] = off
    h[..., 1, 2] = h[..., 2, 1] = off
    return h


def cubic_residual(lam, b_proj, b_total_mag, constants: PhysicalConstants = DEFAULT_CONSTANTS):
    d, g = constants.d_gs, constants.gamma_e
    lam = np.asarray(lam, dtype=float)
    bp2 = np.square(b_proj)
    bperp2 = np.square(b_total_mag) - bp2
    return lam * ((d - lam) ** 2 - g * g * bp2) - (lam - d) * g * g * bperp2


def _cubic_roots(bp2, bperp2, d, g):
    """All three real roots, ascending, shape (..., 3)."""
    g2 = g * g
    b2 = bp2 + bperp2
    p = -d * d / 3.0 - g2 * b2
    q = 2.0 * d**3 / 27.0 - (2.0 / 3.0) * d * g2 * b2 + d * g2 * bperp2
    disc = -(4.0 * p**3 + 27.0 * q * q) / (-4.0 * p**3)
    r = 2.0 * np.sqrt(-p / 3.0)
    arg = np.clip(3.0 * q / (p * r), -1.0, 1.0)
    phi = np.arccos(arg) / 3.0
    k = np.arange(3) * (2.0 * np.pi / 3.0)
    roots = r[..., None] * np.cos(phi[..., None] - k) + 2.0 * d / 3.0
    roots = np.sort(roots, axis=-1)

    # near-repeated roots lose accuracy in arccos; diagonalise instead
    bad = disc < 1e-12
    if np.any(bad):
        h = np.zeros((int(np.count_nonzero(bad)), 3, 3))
        bz = np.sqrt(bp2[bad])
        bt = np.sqrt(np.maximum(bperp2[bad], 0.0))
        off = g * bt / np.sqrt(2.0)
        h[:, 0, 0] = d + g * bz
        h[:, 2, 2] = d - g * bz
        h[:, 0, 1] = h[:, 1, 0] = off
        h[:, 1, 2] = h[:, 2, 1] = off
        roots[bad] = np.linalg.eigvalsh(h)
    return roots


def _levels_arrays(b_proj, b_total_mag, constants: PhysicalConstants):
    d, g = constants.d_gs, constants.gamma_e
    bp = np.asarray(b_proj, dtype=float)
    bt = np.asarray(b_total_mag, dtype=float)
    bp, bt = np.broadcast_arrays(bp, bt)
    shape = bp.shape
    bp = bp.reshape(-1)
    bt = bt.reshape(-1)
    bp2 = bp * bp
    bperp2 = np.maximum(bt * bt - bp2, 0.0)

    roots = _cubic_roots(bp2, bperp2, d, g)
    low_field = g * bt < d / 2.0
    idx_low = np.argmin(np.abs(roots), axis=-1)
    if np.all(low_field):
        idx = idx_low
    else:
        # off-axis the roots never cross, so the continuous branch is the
        # lowest one; on-axis the crossing is exact and lam0 stays at zero
        idx_track = np.where(bperp2 > 0.0, 0, idx_low)
        idx = np.where(low_field, idx_low, idx_track)
    lam0 = np.take_along_axis(roots, idx[..., None], axis=-1)[..., 0]

    g2 = g * g
    for _ in range(3):
        u = d - lam0
        f = lam0 * (u * u - g2 * bp2) + u * g2 * bperp2
        fp = u * u - g2 * bp2 - 2.0 * lam0 * u - g2 * bperp2
        with np.errstate(divide="ignore", invalid="ignore"):
            step = np.where(fp != 0.0, f / fp, 0.0)
        lam0 = lam0 - step

    u = d - lam0
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.sqrt(lam0 * lam0 + 4.0 * g2 * bp2 * d / u)
    lam_minus = (2.0 * d - lam0 - s) / 2.0
    lam_plus = (2.0 * d - lam0 + s) / 2.0

    # lam0 above D never happens below the anticrossing; keep raw roots there
    weird = ~(u > 0.0)
    if np.any(weird):
        others = np.sort(np.where(np.arange(3) == idx[..., None], np.nan, roots), axis=-1)
        lam_minus = np.where(weird, others[..., 0], lam_minus)
        lam_plus = np.where(weird, others[..., 1], lam_plus)
        s = np.where(weird, lam_plus - lam_minus, s)
    return lam0.reshape(shape), lam_minus.reshape(shape), lam_plus.reshape(shape), s.reshape(shape)


@nb.njit(cache=True)
def _splitting_kernel(bp, bt, d, g, out):
    # low-field fast path; NaN marks entries left for the numpy solver
    g2 = g * g
    two_pi_3 = 2.0 * np.pi / 3.0
    for i in range(bp.size):
        bp2 = bp[i] * bp[i]
        b2 = bt[i] * bt[i]
        bperp2 = b2 - bp2
        if bperp2 < 0.0:
            bperp2 = 0.0
        if g * bt[i] >= 0.5 * d:
            out[i] = np.nan
            continue
        p = -d * d / 3.0 - g2 * b2
        q = 2.0 * d * d * d / 27.0 - (2.0 / 3.0) * d * g2 * b2 + d * g2 * bperp2
        disc = -(4.0 * p * p * p + 27.0 * q * q) / (-4.0 * p * p * p)
        if disc < 1e-12:
            out[i] = np.nan
            continue
        r = 2.0 * np.sqrt(-p / 3.0)
        arg = 3.0 * q / (p * r)
        if arg > 1.0:
            arg = 1.0
        elif arg < -1.0:
            arg = -1.0
        phi = np.arccos(arg) / 3.0
        lam0 = 0.0
        best = np.inf
        for k in range(3):
            root = r * np.cos(phi - k * two_pi_3) + 2.0 * d / 3.0
            if abs(root) < best:
                best = abs(root)
                lam0 = root
        for _ in range(3):
            u = d - lam0
            f = lam0 * (u * u - g2 * bp2) + u * g2 * bperp2
            fp = u * u - g2 * bp2 - 2.0 * lam0 * u - g2 * bperp2
            if fp != 0.0:
                lam0 -= f / fp
        u = d - lam0
        out[i] = np.sqrt(lam0 * lam0 + 4.0 * g2 * bp2 * d / u)


def splitting_array(b_proj, b_total_mag, constants: PhysicalConstants = DEFAULT_CONSTANTS) -> np.ndarray:
    """Vectorised ``lambda_plus - lambda_minus`` with no input validation."""
    bp, bt = np.broadcast_arrays(np.asarray(b_proj, dtype=float), np.asarray(b_total_mag, dtype=float))
    shape = bp.shape
    bp = np.ascontiguousarray(bp).reshape(-1)
    bt = np.ascontiguousarray(bt).reshape(-1)
    out = np.empty(bp.size)
    _splitting_kernel(bp, bt, constants.d_gs, constants.gamma_e, out)
    pending = np.isnan(out)
    if np.any(pending):
        out[pending] = _levels_arrays(bp[pending], bt[pending], constants)[3]
    return out.reshape(shape)


def levels_array(b_proj, b_total_mag, constants: PhysicalConstants = DEFAULT_CONSTANTS):
    """Vectorised (lambda_0, lambda_minus, lambda_plus)."""
    return _levels_arrays(b_proj, b_total_mag, constants)[:3]


def _check_inputs(b_proj, b_total_mag):
    if not (np.isfinite(b_proj) and np.isfinite(b_total_mag)):
        raise ValueError("field inputs must be finite")
    if b_total_mag < 0:
        raise ValueError("total field magnitude must be non-negative")
    if abs(b_proj) > b_total_mag + _SLACK * max(1.0, b_total_mag):
        raise InconsistentProjectionError(
            f"|b_proj| = {abs(b_proj)!r} exceeds b_total_mag = {b_total_mag!r}"
        )


def solve_levels(b_proj: float, b_total_mag: float, constants: PhysicalConstants = DEFAULT_CONSTANTS) -> SpinLevels:
    b_proj = float(b_proj)
    b_total_mag = float(b_total_mag)
    _check_inputs(b_proj, b_total_mag)
    lam0, lm, lp, _ = _levels_arrays(b_proj, b_total_mag, constants)
    return SpinLevels(float(lam0), float(lm), float(lp))


def splitting(b_proj: float, b_total_mag: float, constants: PhysicalConstants = DEFAULT_CONSTANTS) -> float:
    """``lambda_plus - lambda_minus`` computed without subtracting the levels."""
    b_proj = float(b_proj)
    b_total_mag = float(b_total_mag)
    _check_inputs(b_proj, b_total_mag)
    return float(splitting_array(b_proj, b_total_mag, constants))


# ---------------------------------------------------------------------------
# hyperfine


def _spin1_operators():
    s2 = np.sqrt(2.0)
    sx = np.array([[0, 1, 0], [1, 0, 1], [0, 1, 0]], dtype=complex) / s2
    sy = np.array([[0, 1, 0], [-1, 0, 1], [0, -1, 0]], dtype=complex) / (1j * s2)
    sz = np.diag([1.0, 0.0, -1.0]).astype(complex)
    return sx, sy, sz


def hyperfine_hamiltonian(b_nv_frame, constants: PhysicalConstants = DEFAULT_CONSTANTS) -> np.ndarray:
    """9x9 electron (x) 14N Hamiltonian, electron index major, MHz."""
    b = as_vector(b_nv_frame)
    if not np.all(np.isfinite(b)):
        raise ValueError("field must be finite")
    sx, sy, sz = _spin1_operators()
    eye = np.eye(3, dtype=complex)
    s_ops = (sx, sy, sz)
    a_diag = (constants.a_perp, constants.a_perp, constants.a_par)
    gn = constants.gamma_n / 1000.0  # MHz/T -> MHz/mT

    h = constants.d_gs * np.kron(sz @ sz, eye)
    for k in range(3):
        h = h + constants.gamma_e * b[k] * np.kron(s_ops[k], eye)
        h = h + a_diag[k] * np.kron(s_ops[k], s_ops[k])
        h = h - gn * b[k] * np.kron(eye, s_ops[k])
    return h


def solve_levels_hyperfine(b_nv_frame, constants: PhysicalConstants = DEFAULT_CONSTANTS) -> np.ndarray:
    h = hyperfine_hamiltonian(b_nv_frame, constants)
    herm = np.max(np.abs(h - h.conj().T))
    if herm >= 1e-12:
        raise AssertionError(f"assembled Hamiltonian not Hermitian ({herm})")
    return np.linalg.eigvalsh(h)


# ---------------------------------------------------------------------------
# projections and the orientation-free magnitude


def project(b_total, axes) -> ProjectionSet:
    b = as_vector(b_total)
    vectors = getattr(axes, "vectors", axes)
    vectors = np.asarray(vectors, dtype=float)
    if not np.all(np.isfinite(b)):
        raise ValueError("field must be finite")
    p = vectors @ b
    return ProjectionSet(*(float(x) for x in p))


def total_field_magnitude(projections) -> float:
    p = projections.as_array() if isinstance(projections, ProjectionSet) else np.asarray(projections, dtype=float)
    return float(np.sqrt(0.75 * np.sum(p * p)))


def invert_splitting(s: float, b_total_mag: float, constants: PhysicalConstants = DEFAULT_CONSTANTS) -> float:
    """|b_proj| in [0, b_total_mag] giving splitting ``s``; clipped at the ends."""
    if b_total_mag <= 0.0:
        return 0.0
    lo = float(splitting_array(0.0, b_total_mag, constants))
    hi = 2.0 * constants.gamma_e * b_total_mag
    if s <= lo:
        return 0.0
    if s >= hi:
        return b_total_mag
    return brentq(
        lambda p: float(splitting_array(p, b_total_mag, constants)) - s,
        0.0,
        b_total_mag,
        xtol=1e-15,
        rtol=4 * np.finfo(float).eps,
    )


def estimate_total_magnitudes(
    splittings,
    constants: PhysicalConstants = DEFAULT_CONSTANTS,
    *,
    tol: float = 1e-9,
    max_iter: int = 100,
    clip: bool = False,
) -> np.ndarray:
    """|B_total| per bias field from its four splittings, orientation free.

    Starts from the first-order projections ``S / (2 gamma_e)`` and
    alternates between the tetrahedral magnitude identity and re-inverting
    each splitting at the current magnitude.  With ``clip=False`` a
    converged magnitude that cannot reproduce the splittings raises
    InconsistentSplittingError.
    """
    s = getattr(splittings, "s", splittings)
    s = np.atleast_2d(np.asarray(s, dtype=float))
    if s.shape[-1] != 4:
        raise ValueError("need four splittings per bias field")
    if np.any(s < 0) or not np.all(np.isfinite(s)):
        raise ValueError("splittings must be finite and non-negative")

    out = np.empty(s.shape[0])
    for i, row in enumerate(s):
        p = row / (2.0 * constants.gamma_e)
        mag = total_field_magnitude(p)
        trace = [mag]
        for _ in range(max_iter):
            p = np.array([invert_splitting(x, mag, constants) for x in row])
            new = total_field_magnitude(p)
            trace.append(new)
            if abs(new - mag) < tol:
                mag = new
                break
            mag = new
        else:
            raise ConvergenceError(f"total-field iteration did not converge for bias field {i}", trace)
        if not clip:
            model = splitting_array(p, mag, constants)
            worst = float(np.max(np.abs(model - row)))
            if worst > 1e-6 * max(1.0, float(np.max(row))):
                raise InconsistentSplittingError(
                    f"bias field {i}: splittings not reproducible at |B|={mag:.6g} mT (max mismatch {worst:.3g} MHz)"
                )
        out[i] = mag
    return out


def splittings_for(axes, b_total, constants: PhysicalConstants = DEFAULT_CONSTANTS) -> np.ndarray:
    """Forward model: four splittings of one total field on a set of axes."""
    b = as_vector(b_total)
    vectors = np.asarray(getattr(axes, "vectors", axes), dtype=float)
    return splitting_array(vectors @ b, np.linalg.norm(b), constants)


def transitions_for(axes, b_total, constants: PhysicalConstants = DEFAULT_CONSTANTS) -> np.ndarray:
    """(4, 2) array of ODMR transition frequencies (lower, upper) per axis."""
    b = as_vector(b_total)
    vectors = np.asarray(getattr(axes, "vectors", axes), dtype=float)
    lam0, lm, lp, _ = _levels_arrays(vectors @ b, np.full(4, np.linalg.norm(b)), constants)
    return np.stack([lm - lam0, lp - lam0], axis=-1)


def batch_fields(fields: Iterable) -> np.ndarray:
    """Stack FieldVectors / 3-sequences into an (n, 3) array."""
    rows: Sequence = [as_vector(f) for f in fields]
    if not rows:
        return np.zeros((0, 3))
    return np.vstack(rows)
