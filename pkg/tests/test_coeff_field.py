import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from quasispde.coeff_field import (
    CoefficientField,
    MatrixMapSpec,
    build_coefficient_field,
    constant_field,
    det_inverse_at,
)
from quasispde.errors import EllipticityViolation
from quasispde.grid_noise import (
    Field2D,
    Grid2D,
    SpaceTimeGrid,
    correlated_drift,
    make_bump_kernel,
    make_mollifier,
    periodic_convolve,
    sample_white_noise_spacetime,
    sample_white_noise_spatial,
)


def test_zero_g_gives_scaled_identity():
    g = Grid2D(16)
    h = sample_white_noise_spatial(g, 0)
    a = build_coefficient_field(h, MatrixMapSpec(lam0=0.7))
    np.testing.assert_array_equal(a.matrices, np.broadcast_to(0.7 * np.eye(2), (16, 16, 2, 2)))
    np.testing.assert_allclose(a.det, 0.49, rtol=1e-15)


def test_constant_input_matches_direct_evaluation():
    spec = MatrixMapSpec(lam0=1.0, g0=0.2, amp=1.5, beta=0.3, theta_amp=0.4)
    g = Grid2D(8)
    a = build_coefficient_field(Field2D(g, np.full((8, 8), 0.37)), spec)
    direct = spec(0.37)
    assert np.array_equal(a.matrices, np.broadcast_to(direct, a.matrices.shape))


def test_min_eigenvalue_sweep():
    # g takes values in [0, 0.5]
    spec = MatrixMapSpec(lam0=1.0, amp=0.5, theta_amp=0.7, beta=0.4)
    g = Grid2D(64)
    a = build_coefficient_field(sample_white_noise_spatial(g, 5), spec)
    eig = np.linalg.eigvalsh(a.matrices.reshape(-1, 2, 2))
    assert eig.min() >= 1 - 1e-9
    assert a.lambda_min() == pytest.approx(eig.min(), abs=1e-12)
    assert a.lambda_max() == pytest.approx(eig.max(), abs=1e-12)


def test_invariants_on_random_field():
    spec = MatrixMapSpec(lam0=0.3, amp=3.0, width=0.5, beta=1.0, theta_amp=1.2)
    g = Grid2D(32)
    a = build_coefficient_field(sample_white_noise_spatial(g, 2), spec)
    assert np.array_equal(a.matrices[..., 0, 1], a.matrices[..., 1, 0])
    assert np.all(a.det >= 0.3**2)
    resid = np.einsum("...ij,...jk->...ik", a.inv, a.matrices) - np.eye(2)
    assert np.abs(resid).max() <= 1e-12


def test_ellipticity_violation():
    spec = MatrixMapSpec(lam0=0.5, g0=0.0, amp=-3.0)
    assert spec.ellipticity_margin() < 0
    with pytest.raises(EllipticityViolation):
        build_coefficient_field(Field2D(Grid2D(8), np.full((8, 8), 5.0)), spec)
    with pytest.raises(EllipticityViolation):
        constant_field(Grid2D(8), np.array([[1.0, 2.0], [2.0, 1.0]]))


def test_det_inverse_at():
    g = Grid2D(8)
    det, inv = det_inverse_at(constant_field(g, np.eye(2)), (3, 4))
    assert det == 1.0
    np.testing.assert_array_equal(inv, np.eye(2))
    det, inv = det_inverse_at(constant_field(g, np.diag([2.0, 0.5])), (0, 0))
    assert det == 1.0
    np.testing.assert_array_equal(inv, np.diag([0.5, 2.0]))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_random_spd_inverse_residual(seed):
    rng = np.random.default_rng(seed)
    B = rng.standard_normal((2, 2))
    m = B @ B.T + 0.1 * np.eye(2)
    a = constant_field(Grid2D(8), m)
    det, inv = det_inverse_at(a, (1, 1))
    assert det > 0
    assert np.abs(inv @ a.matrices[1, 1] - np.eye(2)).max() <= 1e-12 * max(1.0, np.linalg.cond(m))


@settings(max_examples=40, deadline=None)
@given(
    st.floats(0.05, 3.0),
    st.floats(0.0, 2.0),
    st.floats(0.0, 5.0),
    st.floats(-1.0, 2.0),
    st.floats(-2.0, 2.0),
    st.floats(0.1, 3.0),
)
def test_spec_is_elliptic_and_symmetric(lam0, g0, amp, beta, theta_amp, width):
    spec = MatrixMapSpec(lam0=lam0, g0=g0, amp=amp, beta=beta, theta_amp=theta_amp, width=width)
    assert spec.ellipticity_margin() >= -1e-9 * (1 + g0 + amp)
    assert all(np.isfinite(spec.derivative_bounds))
    A = spec(np.linspace(-10, 10, 101))
    assert np.array_equal(A[:, 0, 1], A[:, 1, 0])


def test_spec_serialisation_round_trip():
    spec = MatrixMapSpec(lam0=0.4, amp=2.0, beta=0.5, theta_amp=0.3, width=0.7)
    assert MatrixMapSpec.from_dict(spec.to_dict()) == spec
    with pytest.raises(ValueError):
        MatrixMapSpec(family="spline")
    with pytest.raises(ValueError):
        MatrixMapSpec(lam0=0.0)


def test_frozen_map_factoring():
    spec = MatrixMapSpec(lam0=0.6, amp=1.0, theta_amp=0.5, beta=0.2)
    g = Grid2D(16)
    h = sample_white_noise_spatial(g, 9)
    a = build_coefficient_field(h, spec)
    for p in [(0, 0), (3, 11), (15, 2)]:
        assert np.array_equal(spec(h.values[p]), a.matrices[p])


def test_spacetime_field():
    stg = SpaceTimeGrid(Grid2D(8), 0.0, 1.0, 4)
    h = sample_white_noise_spacetime(stg, 1)
    a = build_coefficient_field(h, MatrixMapSpec(lam0=1.0, amp=0.3))
    assert a.is_spacetime and a.shape == (4, 8, 8)
    assert isinstance(a.time_slice(2), CoefficientField)
    assert a.time_slice(2).shape == (8, 8)


def test_coefficient_correlates_with_mollified_noise():
    g = Grid2D(32)
    sigma = make_bump_kernel(0.15, g, amplitude=0.05)
    rho = make_mollifier(0.125, "spatial", g)
    spec = MatrixMapSpec(lam0=1.0, amp=1.0, width=1.0)
    a11, xd = [], []
    for s in range(1000):
        xi = sample_white_noise_spatial(g, s)
        a = build_coefficient_field(correlated_drift(xi, sigma, 0.0), spec)
        a11.append(a.matrices[0, 0, 0, 0])
        xd.append(periodic_convolve(xi, rho).values[0, 0])
    a11, xd = np.array(a11), np.array(xd)
    prod = (a11 - a11.mean()) * (xd - xd.mean())
    cov, se = prod.mean(), prod.std(ddof=1) / np.sqrt(len(prod))
    assert cov > 3 * se
