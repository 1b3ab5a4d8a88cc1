"""Tetrahedral NV axes, orientation metrics and constraint-sphere geometry.

Angle convention for ``OrientationParams``: ``theta1`` is a *latitude-like*
angle, the first axis is ``(cos t cos p, cos t sin p, sin t)``.  This is not
the physics polar angle.  ``great_circle_distance`` on the other hand takes
polar (colatitude, azimuth) pairs, which is the form its formula assumes.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import DegenerateGeometryError, InconsistentConstraintsError
from .physics import FieldVector, as_vector

TWO_PI = 2.0 * np.pi
_C = 2.0 * np.sqrt(2.0) / 3.0


@dataclass(frozen=True)
class OrientationParams:
    theta1: float
    phi1: float
    alpha: float

    def __post_init__(self):
        t, p, a = (float(self.theta1), float(self.phi1), float(self.alpha))
        if not all(np.isfinite(v) for v in (t, p, a)):
            raise ValueError("orientation angles must be finite")
        if not (0.0 <= t <= np.pi):
            raise ValueError(f"theta1={t} outside [0, pi]")
        if not (0.0 <= p < TWO_PI):
            raise ValueError(f"phi1={p} outside [0, 2pi)")
        if not (0.0 <= a < TWO_PI):
            raise ValueError(f"alpha={a} outside [0, 2pi)")
        object.__setattr__(self, "theta1", t)
        object.__setattr__(self, "phi1", p)
        object.__setattr__(self, "alpha", a)

    def as_array(self) -> np.ndarray:
        return np.array([self.theta1, self.phi1, self.alpha])

    @classmethod
    def wrap(cls, theta1: float, phi1: float, alpha: float) -> "OrientationParams":
        """Canonical in-range parameters for arbitrary angles.

        The returned parameters describe the same axes up to relabelling and
        a global sign, which the splittings cannot see.
        """
        vectors = axes_vectors(np.array([theta1, phi1, alpha]))
        return params_from_vectors(vectors)


@dataclass(frozen=True, eq=False)
class AxesSet:
    """Four NV axis unit vectors, rows of ``vectors``."""

    vectors: np.ndarray
    strict: bool = field(default=True, repr=False)

    def __post_init__(self):
        v = np.array(self.vectors, dtype=float).reshape(4, 3)
        v.setflags(write=False)
        object.__setattr__(self, "vectors", v)
        if self.strict:
            norms = np.linalg.norm(v, axis=1)
            if np.max(np.abs(norms - 1.0)) > 1e-12:
                raise ValueError("axes must be unit vectors")
            gram = v @ v.T
            off = gram[~np.eye(4, dtype=bool)]
            if np.max(np.abs(off + 1.0 / 3.0)) > 1e-9:
                raise ValueError("axes must have pairwise dot products of -1/3")

    @classmethod
    def from_directions(cls, vectors) -> "AxesSet":
        """Normalise rows without enforcing the tetrahedral constraint."""
        v = np.asarray(vectors, dtype=float).reshape(4, 3)
        return cls(v / np.linalg.norm(v, axis=1, keepdims=True), strict=False)

    @property
    def n1(self):
        return self.vectors[0]

    @property
    def n2(self):
        return self.vectors[1]

    @property
    def n3(self):
        return self.vectors[2]

    @property
    def n4(self):
        return self.vectors[3]

    def __iter__(self):
        return iter(self.vectors)

    def __eq__(self, other):
        return isinstance(other, AxesSet) and np.array_equal(self.vectors, other.vectors)

    def __hash__(self):
        return hash(self.vectors.tobytes())


S3 = 1.0 / np.sqrt(3.0)
S23 = np.sqrt(2.0 / 3.0)

#: the [100]-cut plate axes
KNOWN_100_AXES = AxesSet(
    np.array(
        [
            [S23, 0.0, S3],
            [0.0, S23, -S3],
            [-S23, 0.0, S3],
            [0.0, -S23, -S3],
        ]
    )
)

#: averaged experimental bulk axes (deviations added to the [100] set)
EXPERIMENTAL_BULK_AXES = AxesSet.from_directions(
    KNOWN_100_AXES.vectors
    + np.array(
        [
            [-0.0061, -0.0051, 0.0085],
            [0.0013, 0.0095, 0.0137],
            [-0.0061, -0.0142, -0.0088],
            [0.0108, 0.0098, -0.0135],
        ]
    )
)


def axes_vectors(params) -> np.ndarray:
    """(..., 4, 3) axes for (..., 3) angle arrays; angles are not range checked."""
    params = np.asarray(params, dtype=float)
    t, p, a = params[..., 0], params[..., 1], params[..., 2]
    ct, st, cp, sp = np.cos(t), np.sin(t), np.cos(p), np.sin(p)
    n1 = np.stack([ct * cp, ct * sp, st], axis=-1)
    u = np.stack([-sp, cp, np.zeros_like(p)], axis=-1)
    v = np.stack([-st * cp, -st * sp, ct], axis=-1)
    angles = a[..., None] + TWO_PI / 3.0 * np.arange(3)
    cu = _C * np.sin(angles)
    cv = _C * np.cos(angles)
    rest = -n1[..., None, :] / 3.0 + cu[..., None] * u[..., None, :] + cv[..., None] * v[..., None, :]
    return np.concatenate([n1[..., None, :], rest], axis=-2)


def axes_from_params(p: OrientationParams) -> AxesSet:
    if not isinstance(p, OrientationParams):
        p = OrientationParams(*p)
    return AxesSet(axes_vectors(p.as_array()))


def params_from_vectors(vectors) -> OrientationParams:
    """In-range parameters reproducing ``vectors`` up to labels and global sign."""
    v = np.asarray(getattr(vectors, "vectors", vectors), dtype=float)
    if v[0, 2] < 0:
        v = -v
    n1 = v[0]
    theta = float(np.arcsin(np.clip(n1[2], -1.0, 1.0)))
    phi = float(np.arctan2(n1[1], n1[0])) % TWO_PI
    ct, st, cp, sp = np.cos(theta), np.sin(theta), np.cos(phi), np.sin(phi)
    if np.hypot(n1[0], n1[1]) < 1e-15:
        phi = 0.0
        cp, sp = 1.0, 0.0
    u = np.array([-sp, cp, 0.0])
    w = np.array([-st * cp, -st * sp, ct])
    rest = v[1] + n1 / 3.0
    alpha = float(np.arctan2(rest @ u, rest @ w)) % TWO_PI
    if phi >= TWO_PI:
        phi = 0.0
    if alpha >= TWO_PI:
        alpha = 0.0
    return OrientationParams(theta, phi, alpha)


def tetrahedral_sums(axes) -> np.ndarray:
    """sum_j n_j n_j^T; equals (4/3) I for any valid set."""
    v = np.asarray(getattr(axes, "vectors", axes), dtype=float)
    return v.T @ v


# ---------------------------------------------------------------------------
# orientation metrics


def great_circle_distance(a: Sequence[float], b: Sequence[float]) -> float:
    """Angular distance between two (polar angle, azimuth) directions."""
    t1, p1 = a
    t2, p2 = b
    inner = np.sin(t1) * np.sin(t2) * np.cos(p1 - p2) + np.cos(t1) * np.cos(t2)
    return float(np.arccos(np.clip(inner, -1.0, 1.0)))


def spherical_coords(vector) -> tuple[float, float]:
    """(polar angle, azimuth) of a direction, for ``great_circle_distance``."""
    x, y, z = np.asarray(vector, dtype=float) / np.linalg.norm(vector)
    return float(np.arccos(np.clip(z, -1.0, 1.0))), float(np.arctan2(y, x))


def _perm_candidates():
    perms = list(itertools.permutations(range(4)))
    return [(perm, sign) for sign in (1.0, -1.0) for perm in perms]


_CANDIDATES = _perm_candidates()
_PERM_ARRAY = np.array([c[0] for c in _CANDIDATES])
_SIGN_ARRAY = np.array([c[1] for c in _CANDIDATES])


@dataclass(frozen=True)
class AxesMatch:
    permutation: tuple
    signs: tuple
    mean_dgc: float

    def apply(self, predicted) -> np.ndarray:
        """Predicted vectors reordered and re-signed onto the reference labels."""
        v = np.asarray(getattr(predicted, "vectors", predicted), dtype=float)
        return v[list(self.permutation)] * np.asarray(self.signs)[:, None]

    def __iter__(self):
        return iter((self.permutation, self.signs, self.mean_dgc))


def match_axes(predicted, reference) -> AxesMatch:
    """Best relabelling of ``predicted`` onto ``reference``.

    Searches all 24 permutations with a common sign (48 candidates, the
    assignments that keep a tetrahedral set tetrahedral).  ``predicted[perm[j]]
    * sign`` is matched to ``reference[j]``.
    """
    p = np.asarray(getattr(predicted, "vectors", predicted), dtype=float)
    r = np.asarray(getattr(reference, "vectors", reference), dtype=float)
    p = p / np.linalg.norm(p, axis=1, keepdims=True)
    r = r / np.linalg.norm(r, axis=1, keepdims=True)
    dots = p @ r.T  # dots[k, j] = p_k . r_j
    cols = np.arange(4)
    d = dots[_PERM_ARRAY, cols] * _SIGN_ARRAY[:, None]
    angles = np.arccos(np.clip(d, -1.0, 1.0))
    means = angles.mean(axis=1)
    best = int(np.argmin(means))
    perm, sign = _CANDIDATES[best]
    return AxesMatch(tuple(int(i) for i in perm), (sign,) * 4, float(means[best]))


# ---------------------------------------------------------------------------
# constraint spheres


@dataclass(frozen=True)
class SphereConstraint:
    center: FieldVector
    radius: float

    def __post_init__(self):
        if not isinstance(self.center, FieldVector):
            object.__setattr__(self, "center", FieldVector.from_array(self.center))
        r = float(self.radius)
        if not np.isfinite(r) or r < 0:
            raise ValueError("sphere radius must be finite and non-negative")
        object.__setattr__(self, "radius", r)

    @classmethod
    def from_bias(cls, bias, total_magnitude: float) -> "SphereConstraint":
        return cls(FieldVector.from_array(-as_vector(bias)), total_magnitude)

    def residual(self, point) -> float:
        return float(np.linalg.norm(as_vector(point) - self.center.as_array()) - self.radius)


@dataclass(frozen=True)
class Ring:
    center: FieldVector
    radius: float
    normal: np.ndarray

    def distance(self, point) -> float:
        """Euclidean distance from ``point`` to the circle."""
        x = as_vector(point) - self.center.as_array()
        n = np.asarray(self.normal)
        h = float(x @ n)
        rho = float(np.linalg.norm(x - h * n))
        return float(np.hypot(h, rho - self.radius))

    def point(self, angle: float) -> np.ndarray:
        n = np.asarray(self.normal)
        e1 = np.cross(n, [1.0, 0.0, 0.0])
        if np.linalg.norm(e1) < 0.5:
            e1 = np.cross(n, [0.0, 1.0, 0.0])
        e1 /= np.linalg.norm(e1)
        e2 = np.cross(n, e1)
        return self.center.as_array() + self.radius * (np.cos(angle) * e1 + np.sin(angle) * e2)


KINDS = ("sphere", "ring", "point-pair", "unique", "empty")


@dataclass(frozen=True)
class DegeneracyResult:
    kind: str
    solutions: tuple = ()
    ring: Optional[Ring] = None
    sphere: Optional[SphereConstraint] = None
    ambiguous: bool = False
    plane: Optional[tuple] = None  # (unit normal, offset) of the center plane

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown degeneracy kind {self.kind!r}")
        sols = tuple(s if isinstance(s, FieldVector) else FieldVector.from_array(s) for s in self.solutions)
        object.__setattr__(self, "solutions", sols)
        expected = {"point-pair": 2, "unique": 1, "empty": 0}.get(self.kind)
        if expected is not None and len(sols) != expected:
            raise ValueError(f"kind {self.kind} needs {expected} solutions, got {len(sols)}")


def _scale(*values) -> float:
    return max(1.0, *[abs(v) for v in values])


def intersect_two_spheres(s1: SphereConstraint, s2: SphereConstraint, tol: float = 1e-12) -> DegeneracyResult:
    c1, c2 = s1.center.as_array(), s2.center.as_array()
    r1, r2 = s1.radius, s2.radius
    delta = c2 - c1
    d = float(np.linalg.norm(delta))
    scale = _scale(r1, r2, d)
    if d <= tol * scale:
        if abs(r1 - r2) <= tol * scale:
            return DegeneracyResult("sphere", sphere=s1)
        return DegeneracyResult("empty")
    e = delta / d
    a = (d * d + r1 * r1 - r2 * r2) / (2.0 * d)
    h2 = r1 * r1 - a * a
    center = c1 + a * e
    if h2 < -tol * scale * scale:
        return DegeneracyResult("empty")
    if h2 <= tol * scale * scale:
        return DegeneracyResult("unique", solutions=(center,))
    ring = Ring(FieldVector.from_array(center), float(np.sqrt(h2)), e)
    return DegeneracyResult("ring", ring=ring)


def _center_plane(c1, c2, c3):
    n = np.cross(c2 - c1, c3 - c1)
    n = n / np.linalg.norm(n)
    return n, float(n @ c1)


def reflect_across_plane(point, normal, offset) -> np.ndarray:
    """Mirror image of ``point`` across the plane ``normal . x = offset``."""
    x = as_vector(point)
    n = np.asarray(normal, dtype=float)
    return x - 2.0 * (x @ n - offset) * n


def _collinear(c1, c2, c3, tol=1e-9) -> bool:
    area = np.linalg.norm(np.cross(c2 - c1, c3 - c1))
    scale = max(np.linalg.norm(c2 - c1), np.linalg.norm(c3 - c1), np.linalg.norm(c3 - c2))
    return area <= tol * max(scale, 1e-300) ** 2


def intersect_three_spheres(
    s1: SphereConstraint, s2: SphereConstraint, s3: SphereConstraint, tol: float = 1e-12
) -> DegeneracyResult:
    """Trilateration; two solutions are mirror images across the center plane."""
    c1, c2, c3 = (s.center.as_array() for s in (s1, s2, s3))
    r1, r2, r3 = s1.radius, s2.radius, s3.radius

    if _collinear(c1, c2, c3):
        # the first two spheres give a ring (or less); keep it if the third agrees
        pairs = [(s1, s2), (s1, s3), (s2, s3)]
        base = None
        for a, b in pairs:
            if np.linalg.norm(a.center.as_array() - b.center.as_array()) > 0:
                base = intersect_two_spheres(a, b, tol)
                break
        if base is None:
            raise DegenerateGeometryError("all three sphere centers coincide")
        others = (s1, s2, s3)
        if base.kind == "ring":
            probe = base.ring.point(0.0)
            ok = all(abs(s.residual(probe)) <= 1e-9 * _scale(s.radius) for s in others)
            return base if ok else DegeneracyResult("empty")
        if base.kind == "unique":
            ok = all(abs(s.residual(base.solutions[0])) <= 1e-9 * _scale(s.radius) for s in others)
            return base if ok else DegeneracyResult("empty")
        return base

    ex = c2 - c1
    d = float(np.linalg.norm(ex))
    ex /= d
    i = float(ex @ (c3 - c1))
    ey = c3 - c1 - i * ex
    ey /= np.linalg.norm(ey)
    ez = np.cross(ex, ey)
    j = float(ey @ (c3 - c1))

    x = (r1 * r1 - r2 * r2 + d * d) / (2.0 * d)
    y = (r1 * r1 - r3 * r3 + i * i + j * j) / (2.0 * j) - (i / j) * x
    z2 = r1 * r1 - x * x - y * y
    scale = _scale(r1, r2, r3, d)
    plane = (ez, float(ez @ c1))
    base = c1 + x * ex + y * ey
    if z2 < -tol * scale * scale:
        return DegeneracyResult("empty", plane=plane)
    if z2 <= tol * scale * scale:
        return DegeneracyResult("unique", solutions=(base,), plane=plane)
    z = np.sqrt(z2)
    p1 = base + z * ez
    p2 = base - z * ez
    mirrored = reflect_across_plane(p1, *plane)
    if np.linalg.norm(mirrored - p2) > 1e-9 * scale:
        raise AssertionError("trilateration mirror property violated")
    return DegeneracyResult("point-pair", solutions=(p1, p2), plane=plane)


def coplanarity_volume(b1, b2, b3, b4) -> float:
    """Volume of the tetrahedron spanned by four points (0 when coplanar)."""
    p = [as_vector(b) for b in (b1, b2, b3, b4)]
    m = np.array([p[1] - p[0], p[2] - p[0], p[3] - p[0]])
    return float(abs(np.linalg.det(m)) / 6.0)


def mean_pairwise_distance(points) -> float:
    pts = np.asarray([as_vector(p) for p in points])
    n = len(pts)
    if n < 2:
        return 0.0
    diffs = pts[:, None, :] - pts[None, :, :]
    dist = np.linalg.norm(diffs, axis=-1)
    return float(dist[np.triu_indices(n, 1)].mean())


def is_noncoplanar(b1, b2, b3, b4, rel_tol: float = 1e-6) -> bool:
    scale = mean_pairwise_distance([b1, b2, b3, b4])
    return coplanarity_volume(b1, b2, b3, b4) > rel_tol * scale**3


def is_noncollinear(b1, b2, b3, rel_tol: float = 1e-6) -> bool:
    p = [as_vector(b) for b in (b1, b2, b3)]
    area = 0.5 * np.linalg.norm(np.cross(p[1] - p[0], p[2] - p[0]))
    return area > rel_tol * mean_pairwise_distance(p) ** 2


def points_span_space(points, rel_tol: float = 1e-6) -> bool:
    """True when some four of ``points`` are non-coplanar."""
    pts = [as_vector(p) for p in points]
    for combo in itertools.combinations(range(len(pts)), 4):
        if is_noncoplanar(*(pts[k] for k in combo), rel_tol=rel_tol):
            return True
    return False


def _max_residual(point, constraints) -> float:
    return max(abs(c.residual(point)) for c in constraints)


def _polish(point, constraints, iters=50):
    centers = np.array([c.center.as_array() for c in constraints])
    radii = np.array([c.radius for c in constraints])
    x = np.array(point, dtype=float)
    for _ in range(iters):
        diff = x - centers
        dist = np.linalg.norm(diff, axis=1)
        dist = np.where(dist == 0, 1e-300, dist)
        r = dist - radii
        jac = diff / dist[:, None]
        step, *_ = np.linalg.lstsq(jac, -r, rcond=None)
        x = x + step
        if np.linalg.norm(step) < 1e-15 * max(1.0, np.linalg.norm(x)):
            break
    return x


def resolve_unique(constraints: Sequence[SphereConstraint], tol: float = 1e-6) -> DegeneracyResult:
    """Solution manifold of a list of constraint spheres.

    One sphere, a ring, a mirror pair, or for four or more spheres the single
    point consistent with all of them.  When the centers are coplanar both
    mirror points may survive; the result is then a point pair flagged
    ``ambiguous``.
    """
    constraints = list(constraints)
    if not constraints:
        raise ValueError("need at least one constraint")
    if len(constraints) == 1:
        return DegeneracyResult("sphere", sphere=constraints[0])
    if len(constraints) == 2:
        return intersect_two_spheres(*constraints)
    if len(constraints) == 3:
        return intersect_three_spheres(*constraints)

    centers = np.array([c.center.as_array() for c in constraints])
    if points_span_space(centers):
        radii = np.array([c.radius for c in constraints])
        # subtracting sphere equations leaves a linear system in the point
        a = 2.0 * (centers[1:] - centers[0])
        b = (radii[0] ** 2 - radii[1:] ** 2) + np.sum(centers[1:] ** 2, axis=1) - np.sum(centers[0] ** 2)
        x0, *_ = np.linalg.lstsq(a, b, rcond=None)
        x = _polish(x0, constraints)
        if _max_residual(x, constraints) > tol:
            raise InconsistentConstraintsError(
                f"no point within {tol} mT of all {len(constraints)} spheres "
                f"(best max residual {_max_residual(x, constraints):.3g} mT)"
            )
        return DegeneracyResult("unique", solutions=(x,))

    # coplanar centers: trilaterate a non-collinear triple and test both points
    triple = None
    for combo in itertools.combinations(range(len(constraints)), 3):
        if is_noncollinear(*(centers[k] for k in combo)):
            triple = combo
            break
    if triple is None:
        raise DegenerateGeometryError("all sphere centers are collinear")
    base = intersect_three_spheres(*(constraints[k] for k in triple))
    good = [s.as_array() for s in base.solutions if _max_residual(s.as_array(), constraints) <= tol]
    if not good:
        raise InconsistentConstraintsError(f"no point within {tol} mT of all spheres")
    if len(good) == 2:
        return DegeneracyResult("point-pair", solutions=tuple(good), ambiguous=True, plane=base.plane)
    return DegeneracyResult("unique", solutions=(good[0],), plane=base.plane)
