import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from quasispde.coeff_field import MatrixMapSpec
from quasispde.errors import StatisticalQualityWarning, UnresolvableScale
from quasispde.grid_noise import Field2D, Grid2D, SpaceTimeField, SpaceTimeGrid, bump_profile, profile_normalization
from quasispde.model_estimator import (
    MomentStudy,
    ProbeSetup,
    ScalingExponentRegressor,
    TestFunction,
    blowup_experiment,
    estimate_gradient_product_moments,
    estimate_xi_ixi_moments,
    pair,
    phi_hermite_moment_study,
    regression_self_test,
    run_pam_probes,
)

G64 = Grid2D(64)


def small_setup(**kw):
    base = dict(n=32, deltas=(1 / 4, 1 / 8, 1 / 16), lambdas=(1 / 4, 1 / 8), replicas=100,
                pilot_replicas=100, dt=0.02, n_boot=200)
    base.update(kw)
    return ProbeSetup(**base)


# -- test functions -----------------------------------------------------------


@settings(max_examples=40, deadline=None)
@given(cx=st.floats(0, 1, exclude_max=True), cy=st.floats(0, 1, exclude_max=True),
       lam=st.floats(4 / 64, 0.5))
def test_unit_mass(cx, cy, lam):
    tf = TestFunction((cx, cy), lam)
    assert abs(pair(Field2D(G64, np.ones(G64.shape)), tf) - 1) < 1e-10


def test_constant_field_pairs_to_constant():
    assert pair(Field2D(G64, np.full(G64.shape, 3.25)), TestFunction((0.3, 0.7), 0.2)) == pytest.approx(3.25, abs=1e-12)


def test_self_pairing_matches_quadrature():
    lam = 0.25
    tf = TestFunction((0.5, 0.5), lam)
    g = Grid2D(128)
    c = profile_normalization("bump", 2)
    norm2, _ = integrate.quad(lambda r: (c * bump_profile(np.array([r]))[0]) ** 2 * 2 * np.pi * r, 0, 1)
    got = pair(Field2D(g, tf.weights(g)), tf)
    assert got == pytest.approx(norm2 / lam**2, rel=0.01)


@settings(max_examples=20, deadline=None)
@given(sx=st.integers(-40, 40), sy=st.integers(-40, 40), seed=st.integers(0, 1000))
def test_translation_equivariance(sx, sy, seed):
    f = np.random.default_rng(seed).standard_normal(G64.shape)
    h = G64.spacing
    tf = TestFunction((0.25, 0.5), 0.15)
    moved = TestFunction(((0.25 + sx * h) % 1, (0.5 + sy * h) % 1), 0.15)
    a = pair(Field2D(G64, f), tf)
    b = pair(Field2D(G64, np.roll(f, (sx, sy), axis=(0, 1))), moved)
    assert a == pytest.approx(b, abs=1e-12)


def test_scale_limits():
    with pytest.raises(UnresolvableScale):
        pair(Field2D(G64, np.ones(G64.shape)), TestFunction((0.5, 0.5), 3 / 64))
    with pytest.raises(ValueError):
        TestFunction((0.5, 0.5), 0.0)
    with pytest.raises(ValueError):
        TestFunction((0.5, 0.5), 0.75).weights(G64)


def test_parabolic_unit_mass_and_mode_checks():
    stg = SpaceTimeGrid(Grid2D(32), 0.0, 0.5, 256)
    tf = TestFunction((0.5, 0.5), 0.25, parabolic=True, t_center=0.25)
    assert pair(SpaceTimeField(stg, np.ones(stg.shape)), tf) == pytest.approx(1.0, abs=1e-10)
    with pytest.raises(ValueError):
        pair(Field2D(Grid2D(32), np.ones((32, 32))), tf)
    with pytest.raises(ValueError):
        pair(SpaceTimeField(stg, np.ones(stg.shape)), TestFunction((0.5, 0.5), 0.25))


# -- regression ---------------------------------------------------------------


@settings(max_examples=30, deadline=None)
@given(beta=st.floats(-2, 2), q=st.sampled_from([1, 2, 4]))
def test_regressor_recovers_exponent(beta, q):
    assert regression_self_test(beta, q=q) < 0.02


def test_regressor_with_noise_and_bootstrap():
    assert regression_self_test(-0.3, noise=0.005, seed=3) < 0.02
    rng = np.random.default_rng(0)
    lam = 2.0 ** -np.arange(2, 6)
    samples = (lam**-0.4)[None, :] * rng.exponential(size=(400, 1))
    reg = ScalingExponentRegressor(q=2, n_boot=300).fit(lam, samples.mean(0), samples=samples)
    assert reg.alpha_ == pytest.approx(-0.2, abs=1e-12)
    assert reg.alpha_ci_[0] <= reg.alpha_ <= reg.alpha_ci_[1]
    assert reg.predict(lam) == pytest.approx(samples.mean(0))
    assert reg.score(lam, samples.mean(0)) == pytest.approx(1.0)


def test_regressor_rejects_bad_input():
    with pytest.raises(ValueError):
        ScalingExponentRegressor().fit([0.5], [1.0])
    with pytest.raises(ValueError):
        ScalingExponentRegressor().fit([0.5, 0.25], [1.0, -1.0])


# -- setups and studies -------------------------------------------------------


def test_setup_validation():
    with pytest.raises(ValueError):
        ProbeSetup(n=32, deltas=(1 / 8, 1 / 4))
    with pytest.raises(UnresolvableScale):
        ProbeSetup(n=32, deltas=(1 / 8, 1 / 32))
    with pytest.raises(UnresolvableScale):
        ProbeSetup(n=32, deltas=(1 / 8,), lambdas=(1 / 16,))
    s = small_setup(spec=MatrixMapSpec(lam0=0.7, amp=0.5), sigma_width=0.2)
    assert ProbeSetup.from_dict(s.to_dict()) == s


def test_moment_study_needs_replicas():
    z = np.ones((1, 2))
    with pytest.raises(ValueError):
        MomentStudy("xi_ixi", "function", (0.5, 0.25), (0.25,), 2, 99, z, z, 0.0, (0.0, 0.0), z, z, z, z)


@pytest.fixture(scope="module")
def det_probe():
    s = small_setup()
    return s, run_pam_probes(s, ("xi", "grad"))


def test_deterministic_coefficient_modes_coincide(det_probe):
    s, S = det_probe
    f = estimate_xi_ixi_moments(s, "function", S)
    c = estimate_xi_ixi_moments(s, "constant-best", S)
    np.testing.assert_allclose(f.moments, c.moments, rtol=1e-12)
    assert f.stderr.shape == f.moments.shape and np.all(f.stderr > 0)


@pytest.mark.filterwarnings("ignore::quasispde.errors.StatisticalQualityWarning")
def test_no_counterterm_grows_under_halving(det_probe):
    s, S = det_probe
    st_none = estimate_xi_ixi_moments(s, "none", S)
    assert np.all(st_none.delta_ratios[:, 0] > 1.15)
    st_g = estimate_gradient_product_moments(s, 1, 1, "none", S)
    assert np.all(st_g.delta_ratios[:, 0] > 1.15)


@pytest.mark.filterwarnings("ignore::quasispde.errors.StatisticalQualityWarning")
def test_offdiagonal_counterterm_vanishes_for_identity(det_probe):
    s, S = det_probe
    f = estimate_gradient_product_moments(s, 1, 2, "function", S)
    n = estimate_gradient_product_moments(s, 1, 2, "none", S)
    np.testing.assert_allclose(f.moments, n.moments, atol=1e-12)
    # halving ratios settle towards 1 and stay below the divergent diagonal ones
    diag = estimate_gradient_product_moments(s, 1, 1, "none", S)
    assert np.all(f.delta_ratios[-1] < f.delta_ratios[0])
    assert np.all(f.delta_ratios[-1] < diag.delta_ratios[-1])


def test_outputs(tmp_path, det_probe):
    s, S = det_probe
    st_ = estimate_xi_ixi_moments(s, "function", S)
    st_.to_csv(tmp_path / "m.csv")
    st_.to_json(tmp_path / "m.json")
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "tag,mode,delta,lambda,moment,se"
    assert len(lines) == 1 + len(s.deltas) * len(s.lambdas)
    summary = json.loads((tmp_path / "m.json").read_text())
    assert summary["replicas"] == 100 and len(summary["alpha_ci"]) == 2


def test_quality_warning():
    rng = np.random.default_rng(1)
    from quasispde.model_estimator import _study

    X = rng.standard_normal((100, 1, 2)) * np.array([1.0, 1.0])
    s = small_setup(deltas=(1 / 4,), lambdas=(1 / 4 + 1e-3, 1 / 4))
    with pytest.warns(StatisticalQualityWarning):
        _study("xi_ixi", "function", X, s, s.lambdas, s.deltas)


def test_reproducible_serial_and_parallel():
    s = small_setup(replicas=100, deltas=(1 / 4, 1 / 8))
    a = run_pam_probes(s, ("xi",))
    b = run_pam_probes(s, ("xi",))
    c = run_pam_probes(ProbeSetup.from_dict({**s.to_dict(), "n_jobs": 2}), ("xi",))
    for k in ("xi_raw", "c_xi"):
        assert np.array_equal(a[k], b[k])
        assert np.array_equal(a[k], c[k])


# -- blow-up --------------------------------------------------------------------


def test_blowup_sigma_zero_arms_coincide():
    s = small_setup(blowup_scales=(0.25,))
    with pytest.warns(StatisticalQualityWarning):
        rep = blowup_experiment(s)
    np.testing.assert_allclose(rep["V_const"], rep["V_func"], rtol=1e-10)
    assert rep["log2_coef_pred_var"] == pytest.approx([0.0], abs=1e-20)


def test_blowup_needs_nonconstant_determinant():
    with pytest.raises(ValueError):
        blowup_experiment(small_setup(sigma_width=0.2, spec=MatrixMapSpec(lam0=1.0, amp=0.0, theta_amp=0.5)))


def test_blowup_target_routes_agree():
    s = small_setup(sigma_width=0.3, spec=MatrixMapSpec(lam0=0.5, amp=1.5), blowup_scales=(0.25, 0.4))
    rep = blowup_experiment(s)
    assert rep["target_routes_agree"]
    assert all(v > 0 for v in rep["log2_coef_pred_var"])
    # the constant arm grows faster than the function arm
    assert np.all(np.array(rep["ratio_const"])[-1] > np.array(rep["ratio_func"])[-1])


# -- Hermite powers -----------------------------------------------------------


def test_hermite_study_n1_ignores_counterterm():
    s = small_setup(deltas=(1 / 4, 1 / 8), lambdas=(1 / 4, 1 / 8), t_probe=0.1)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", StatisticalQualityWarning)
        ren, raw = phi_hermite_moment_study(s, N=1)
    np.testing.assert_array_equal(ren.moments, raw.moments)
    with pytest.raises(ValueError):
        phi_hermite_moment_study(small_setup(t_probe=0.01), N=2)


def test_hermite_counterterm_reduces_second_moment():
    s = small_setup(deltas=(1 / 4, 1 / 8), lambdas=(1 / 4, 1 / 8), t_probe=0.1)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", StatisticalQualityWarning)
        ren, raw = phi_hermite_moment_study(s, N=2)
    assert np.all(raw.moments[-1] > ren.moments[-1])
