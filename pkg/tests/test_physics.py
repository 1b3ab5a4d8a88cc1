import numpy as np
import pytest
from hypothesis import given, strategies as st

from nvorient.errors import ConvergenceError, InconsistentProjectionError, InconsistentSplittingError
from nvorient.geometry import KNOWN_100_AXES, OrientationParams, axes_from_params
from nvorient.physics import (
    DEFAULT_CONSTANTS,
    FieldVector,
    PhysicalConstants,
    cubic_residual,
    estimate_total_magnitudes,
    hyperfine_hamiltonian,
    invert_splitting,
    levels_array,
    project,
    solve_levels,
    solve_levels_hyperfine,
    splitting,
    splitting_array,
    splittings_for,
    total_field_magnitude,
    transitions_for,
)

from conftest import dense_levels

D, G = 2870.0, 28.0


def test_zero_field_levels():
    lv = solve_levels(0.0, 0.0)
    assert (lv.lambda_0, lv.lambda_minus, lv.lambda_plus) == (0.0, D, D)


def test_axial_field_levels():
    lv = solve_levels(1.0, 1.0)
    assert lv.lambda_0 == pytest.approx(0.0, abs=1e-12)
    assert lv.lambda_minus == pytest.approx(D - G, abs=1e-9)
    assert lv.lambda_plus == pytest.approx(D + G, abs=1e-9)


def test_transverse_field_closed_form():
    lv = solve_levels(0.0, 1.0)
    root = np.sqrt(D * D + 4 * G * G)
    assert lv.lambda_0 == pytest.approx((D - root) / 2, rel=1e-12)
    assert lv.lambda_minus == pytest.approx(D, rel=1e-12)
    assert lv.lambda_plus == pytest.approx((D + root) / 2, rel=1e-12)
    ref = dense_levels((1.0, 0.0, 0.0))
    np.testing.assert_allclose(sorted(lv.__dict__.values()), ref, rtol=1e-12)


def test_splitting_examples():
    assert splitting(1.0, 1.0) == pytest.approx(56.0, abs=1e-12)
    assert splitting(0.0, 0.0) == 0.0
    ref = dense_levels((np.sqrt(0.75), 0.0, 0.5))
    assert splitting(0.5, 1.0) == pytest.approx(ref[2] - ref[1], abs=1e-6)


def test_rejects_inconsistent_projection():
    with pytest.raises(InconsistentProjectionError):
        solve_levels(1.1, 1.0)
    # rounding-level excess is tolerated
    solve_levels(1.0 + 1e-12, 1.0)
    with pytest.raises(ValueError):
        solve_levels(np.nan, 1.0)


def test_levels_match_dense_diagonalisation(rng):
    n = 10_000
    bt = np.concatenate([rng.uniform(0, 20, n // 2), rng.uniform(0, 200, n // 2)])
    bp = bt * rng.uniform(-1, 1, n)
    lam0, lm, lp = levels_array(bp, bt)
    perp = np.sqrt(bt**2 - bp**2)
    ang = rng.uniform(0, 2 * np.pi, n)
    ref = np.array([dense_levels((q * np.cos(a), q * np.sin(a), z)) for q, a, z in zip(perp, ang, bp)])
    got = np.sort(np.stack([lam0, lm, lp], axis=1), axis=1)
    scale = np.max(np.abs(ref), axis=1)
    assert np.all(np.max(np.abs(got - ref), axis=1) <= 1e-9 * scale)


@given(st.floats(0, 10), st.floats(-1, 1))
def test_cubic_residual_small(bt, frac):
    bp = bt * frac
    lv = solve_levels(bp, bt)
    for lam in (lv.lambda_0, lv.lambda_minus, lv.lambda_plus):
        assert abs(cubic_residual(lam, bp, bt)) < 1e-6


@given(st.floats(0, 50))
def test_axial_exactness(b):
    assert abs(splitting(b, b) - 2 * G * b) <= 1e-10 * max(1.0, b)


@given(st.floats(0, 20), st.floats(-1, 1))
def test_sign_invariance(bt, frac):
    assert splitting(bt * frac, bt) == splitting(-bt * frac, bt)


def test_rotation_invariance(rng):
    axis = np.array([0.3, -0.5, 0.81])
    axis /= np.linalg.norm(axis)
    b = rng.normal(size=3) * 3
    base = splitting(float(b @ axis), float(np.linalg.norm(b)))
    for ang in rng.uniform(0, 2 * np.pi, 10):
        # Rodrigues rotation about the NV axis
        k = axis
        rb = b * np.cos(ang) + np.cross(k, b) * np.sin(ang) + k * (k @ b) * (1 - np.cos(ang))
        assert splitting(float(rb @ axis), float(np.linalg.norm(rb))) == pytest.approx(base, abs=1e-9)


def test_lambda_plus_above_minus(rng):
    bt = rng.uniform(0, 120, 500)
    bp = bt * rng.uniform(-1, 1, 500)
    lam0, lm, lp = levels_array(bp, bt)
    assert np.all(lp >= lm)


def test_tiny_field_splitting_no_cancellation():
    assert splitting(1e-9, 1e-9) == pytest.approx(2 * G * 1e-9, rel=1e-12)


def test_high_field_tracking_keeps_zero_level_continuous():
    # through the ground-state anticrossing region along a slightly tilted axis
    bt = np.linspace(0, 140, 1401)
    bp = bt * np.cos(0.02)
    lam0, lm, lp = levels_array(bp, bt)
    # Weyl bound: no level moves faster than gamma_e per mT
    assert np.max(np.abs(np.diff(lam0))) <= G * 0.1 * (1 + 1e-9)


def test_splitting_array_matches_scalar(rng):
    bt = rng.uniform(0, 30, 300)
    bp = bt * rng.uniform(-1, 1, 300)
    arr = splitting_array(bp, bt)
    for k in range(0, 300, 13):
        assert arr[k] == splitting(bp[k], bt[k])


def test_project_known_axes():
    b0 = 0.7
    p = project(FieldVector(0, 0, b0), KNOWN_100_AXES).as_array()
    np.testing.assert_allclose(p, np.array([1, -1, 1, -1]) * b0 / np.sqrt(3), atol=1e-15)
    assert np.all(project((0, 0, 0), KNOWN_100_AXES).as_array() == 0)


def test_total_field_magnitude_examples():
    b0 = 1.3
    assert total_field_magnitude(np.array([1, -1, 1, -1]) * b0 / np.sqrt(3)) == pytest.approx(b0, rel=1e-15)
    assert total_field_magnitude([0, 0, 0, 0]) == 0.0


@given(
    st.floats(0, np.pi), st.floats(0, 2 * np.pi, exclude_max=True), st.floats(0, 2 * np.pi, exclude_max=True),
    st.tuples(*[st.floats(-30, 30)] * 3),
)
def test_projection_sum_identity(t, p, a, b):
    axes = axes_from_params(OrientationParams(t, p, a))
    b = np.array(b)
    proj = project(b, axes).as_array()
    mag = np.linalg.norm(b)
    assert total_field_magnitude(proj) == pytest.approx(mag, rel=1e-12, abs=1e-300)


def test_estimate_total_magnitudes_examples():
    s = splittings_for(KNOWN_100_AXES, (0, 0, 1.0))
    assert estimate_total_magnitudes(s)[0] == pytest.approx(1.0, abs=1e-6)
    assert estimate_total_magnitudes(np.zeros(4))[0] == 0.0
    b_loc = np.array([-0.0025, -0.0149, -0.0532])
    bias = np.array([0.4, -0.7, 0.6])
    s = splittings_for(KNOWN_100_AXES, bias + b_loc)
    assert estimate_total_magnitudes(s)[0] == pytest.approx(np.linalg.norm(bias + b_loc), abs=1e-6)


def test_estimate_total_magnitudes_at_higher_field(rng):
    axes = axes_from_params(OrientationParams(0.4, 1.0, 2.0))
    for _ in range(5):
        b = rng.normal(size=3)
        b *= rng.uniform(5, 10) / np.linalg.norm(b)
        got = estimate_total_magnitudes(splittings_for(axes, b))[0]
        assert got == pytest.approx(np.linalg.norm(b), abs=1e-6)


def test_estimate_total_magnitudes_inconsistent():
    # one huge splitting next to tiny ones: no tetrahedral field produces it
    with pytest.raises((InconsistentSplittingError, ConvergenceError)):
        estimate_total_magnitudes(np.array([[100.0, 0.0, 0.0, 0.0]]))
    with pytest.raises(InconsistentSplittingError):
        estimate_total_magnitudes(np.array([[100.0, 0.0, 0.0, 0.0]]), max_iter=1000)
    with pytest.raises(ValueError):
        estimate_total_magnitudes(np.array([[-1.0, 0, 0, 0]]))


def test_invert_splitting_round_trip(rng):
    for _ in range(20):
        bt = rng.uniform(0.1, 10)
        bp = rng.uniform(0, bt)
        assert invert_splitting(splitting(bp, bt), bt) == pytest.approx(bp, abs=1e-9)


def test_transitions_consistent_with_splittings():
    b = np.array([0.3, -0.2, 0.9])
    tr = transitions_for(KNOWN_100_AXES, b)
    np.testing.assert_allclose(tr[:, 1] - tr[:, 0], splittings_for(KNOWN_100_AXES, b), atol=1e-9)


def test_constants_validation():
    with pytest.raises(ValueError):
        PhysicalConstants(d_gs=-1)
    with pytest.raises(ValueError):
        PhysicalConstants(gamma_e=np.inf)


# --- hyperfine 9x9 ---------------------------------------------------------


def _independent_hyperfine(b, c=DEFAULT_CONSTANTS):
    from conftest import spin1

    sx, sy, sz = spin1()
    i3 = np.eye(3)
    ops = (sx, sy, sz)
    a = (c.a_perp, c.a_perp, c.a_par)
    h = c.d_gs * np.kron(sz @ sz, i3)
    for k in range(3):
        h += c.gamma_e * b[k] * np.kron(ops[k], i3) + a[k] * np.kron(ops[k], ops[k]) - c.gamma_n * 1e-3 * b[k] * np.kron(i3, ops[k])
    return h


def test_hyperfine_zero_field_trace():
    ev = solve_levels_hyperfine((0, 0, 0))
    h = hyperfine_hamiltonian((0, 0, 0))
    assert np.sum(ev) == pytest.approx(np.trace(h).real, abs=1e-9)
    assert np.sum(ev < 100) == 3 and np.sum(ev > 2800) == 6


def test_hyperfine_axial_first_order():
    ev = solve_levels_hyperfine((0, 0, 1.0))
    upper = np.sort(ev[ev > D])  # m_s = +1 manifold
    # first order: D + gamma_e B + A_par m_I for m_I in {-1, 0, 1}
    expected = np.sort([D + G + DEFAULT_CONSTANTS.a_par * m for m in (-1, 0, 1)])
    np.testing.assert_allclose(upper, expected, atol=0.01)


def test_hyperfine_matches_independent_assembly(rng):
    for _ in range(20):
        b = rng.normal(size=3) * 5
        ev = solve_levels_hyperfine(b)
        ref = np.linalg.eigvalsh(_independent_hyperfine(b))
        np.testing.assert_allclose(ev, ref, rtol=1e-9, atol=1e-9)


def test_hyperfine_rejects_non_finite():
    with pytest.raises(ValueError):
        solve_levels_hyperfine((np.nan, 0, 0))
