import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from epiinfer.models import (
    ModelError,
    build_model,
    diffusion_factor,
    diffusion_matrix,
    drift,
    drift_gradients,
    q_rates,
    q_rates_raw,
)
from conftest import random_admissible_state, random_theta


def test_build_sir(sir):
    assert sir.p == 2
    assert sir.n_jumps == 2
    assert [tuple(j) for j in sir.jumps] == [(-1, 1), (0, -1)]
    th = np.array([0.5, 1 / 3])
    r = q_rates(sir, th, 0.0, np.array([0.5, 0.5]))
    np.testing.assert_allclose(r, [0.5 * 0.25, 0.5 / 3])


def test_build_sirs_seasonal(sirs):
    assert sirs.n_jumps == 4
    assert sirs.time_dependent
    th = np.array([0.5, 0.1, 1 / 3, 1 / 730])
    t_quarter = 365.0 / 4.0  # sin term = 1
    r = q_rates(sirs, th, t_quarter, np.array([0.7, 0.1]))
    assert r[0] == pytest.approx(0.5 * 1.1 * 0.7 * (0.1 + 1e-6))
    # re-susceptibility at rate delta (1 - s - i) + mu
    assert r[3] == pytest.approx(1 / (50 * 365) + (1 / 730) * 0.2)


def test_build_unknown_name_rejected():
    with pytest.raises(ModelError):
        build_model("sri")


def test_build_requires_positive_constant():
    with pytest.raises(ModelError):
        build_model("sirs_seasonal", {"T_per": -3.0})


def test_drift_sir_hand_value(sir):
    b = drift(sir, np.array([0.5, 1 / 3]), 0.0, np.array([0.5, 0.5]))
    np.testing.assert_allclose(b, [-0.125, 0.125 - 2.0 / 12.0], atol=1e-12)


def test_drift_no_infectives_vanishes(sir):
    b = drift(sir, np.array([0.7, 0.2]), 0.0, np.array([0.6, 0.0]))
    np.testing.assert_allclose(b, [0.0, 0.0])


def test_drift_sirs_matches_display(sirs):
    # at t with sin = 0 the drift reduces to the lambda0 expression
    th = np.array([0.5, 0.15, 1 / 3, 1 / 730])
    z = np.array([0.7, 0.1])
    mu, eta = sirs.constants["mu"], sirs.constants["eta"]
    b = drift(sirs, th, 0.0, z)
    lam0 = 0.5
    expect0 = -lam0 * z[0] * (z[1] + eta) + (1 / 730) * (1 - z.sum()) + mu * (1 - z[0])
    expect1 = lam0 * z[0] * (z[1] + eta) - (1 / 3 + mu) * z[1]
    np.testing.assert_allclose(b, [expect0, expect1], rtol=1e-12)


def test_diffusion_matrix_sir(sir):
    th = np.array([0.5, 1 / 3])
    sig = diffusion_matrix(sir, th, 0.0, np.array([0.5, 0.5]))
    np.testing.assert_allclose(
        sig, [[0.125, -0.125], [-0.125, 0.125 + 1 / 6]], atol=1e-12
    )
    zero = diffusion_matrix(sir, th, 0.0, np.array([0.5, 0.0]))
    np.testing.assert_allclose(zero, np.zeros((2, 2)))


def test_diffusion_matrix_exact_symmetry(all_jump_models):
    rng = np.random.default_rng(0)
    for model, theta in all_jump_models:
        for _ in range(20):
            z = random_admissible_state(model, rng)
            sig = diffusion_matrix(model, theta, rng.uniform(0, 10), z)
            assert np.array_equal(sig, sig.T)


def test_diffusion_factor_identity_and_zero():
    np.testing.assert_allclose(diffusion_factor(np.eye(3)), np.eye(3))
    np.testing.assert_allclose(diffusion_factor(np.zeros((2, 2))), np.zeros((2, 2)))


def test_diffusion_factor_matches_paper_sir_form(sir):
    th = np.array([0.5, 1 / 3])
    z = np.array([0.5, 0.5])
    L = diffusion_factor(diffusion_matrix(sir, th, 0.0, z))
    lam_si = 0.5 * 0.25
    gam_i = 0.5 / 3
    expect = np.array([[np.sqrt(lam_si), 0.0], [-np.sqrt(lam_si), np.sqrt(gam_i)]])
    np.testing.assert_allclose(np.abs(L), np.abs(expect), rtol=1e-12)
    np.testing.assert_allclose(L @ L.T, diffusion_matrix(sir, th, 0.0, z), atol=1e-12)


def test_diffusion_factor_reconstruction_tolerance(all_jump_models):
    rng = np.random.default_rng(1)
    for model, theta in all_jump_models:
        for _ in range(10):
            z = random_admissible_state(model, rng)
            sig = diffusion_matrix(model, theta, 1.0, z)
            L = diffusion_factor(sig)
            assert np.linalg.norm(L @ L.T - sig) <= 1e-10 * (1 + np.linalg.norm(sig))


def test_diffusion_factor_rejects_bad_inputs():
    with pytest.raises(ModelError):
        diffusion_factor(np.array([[1.0, 0.5], [0.0, 1.0]]))
    with pytest.raises(ModelError):
        diffusion_factor(np.array([[1.0, 0.0], [0.0, -1.0]]))


def test_drift_gradients_sir_paper_value(sir):
    s, i = 0.4, 0.3
    ga, gz = drift_gradients(sir, np.array([0.5, 1 / 3]), 0.0, np.array([s, i]))
    np.testing.assert_allclose(ga, [[-s * i, 0.0], [s * i, -i]], atol=1e-14)


def test_drift_gradients_linear_model():
    # diffusion-kind model with b = theta * z has grad_z b = theta * I
    ou = build_model("ou2d")
    th = np.array([0.8, 0.0, 0.0, 1.0])  # b = 0, h = 0 -> A = 0.8 I
    _, gz = drift_gradients(ou, th, 0.0, np.array([0.3, -0.2]))
    np.testing.assert_allclose(gz, 0.8 * np.eye(2))


def _fd_drift_gradients(model, theta, t, z, h=1e-5):
    a = model.n_alpha
    p = model.p
    ga = np.empty((p, a))
    for col, k in enumerate(model.alpha_idx):
        tp, tm = theta.copy(), theta.copy()
        tp[k] += h
        tm[k] -= h
        ga[:, col] = (drift(model, tp, t, z) - drift(model, tm, t, z)) / (2 * h)
    gz = np.empty((p, p))
    for k in range(p):
        zp, zm = z.copy(), z.copy()
        zp[k] += h
        zm[k] -= h
        gz[:, k] = (drift(model, theta, t, zp) - drift(model, theta, t, zm)) / (2 * h)
    return ga, gz


def test_gradients_match_finite_differences_100_draws(all_jump_models):
    rng = np.random.default_rng(2)
    for model, _ in all_jump_models:
        for _ in range(100):
            theta = random_theta(model, rng)
            z = random_admissible_state(model, rng)
            # keep the state away from the simplex face so FD stays admissible
            z = 0.9 * z + 0.01
            t = rng.uniform(0.0, 400.0)
            ga, gz = drift_gradients(model, theta, t, z)
            ga_fd, gz_fd = _fd_drift_gradients(model, theta, t, z)
            scale = 1.0 + np.abs(ga_fd)
            assert np.max(np.abs(ga - ga_fd) / scale) <= 1e-6
            assert np.max(np.abs(gz - gz_fd) / (1.0 + np.abs(gz_fd))) <= 1e-6


def test_rates_nonneg_and_sigma_psd_100_draws(all_jump_models):
    rng = np.random.default_rng(3)
    for model, _ in all_jump_models:
        for _ in range(100):
            theta = random_theta(model, rng)
            z = random_admissible_state(model, rng)
            t = rng.uniform(0.0, 400.0)
            assert np.all(q_rates(model, theta, t, z) >= 0.0)
            sig = diffusion_matrix(model, theta, t, z)
            assert np.linalg.eigvalsh(sig).min() >= -1e-12


def test_drift_diffusion_consistent_with_q_rates(all_jump_models):
    rng = np.random.default_rng(4)
    for model, theta in all_jump_models:
        for _ in range(10):
            z = random_admissible_state(model, rng)
            t = rng.uniform(0.0, 100.0)
            r = q_rates(model, theta, t, z)
            b = model.jumps.T @ r
            sig = (model.jumps.T * r) @ model.jumps
            np.testing.assert_array_equal(drift(model, theta, t, z), b)
            np.testing.assert_array_equal(diffusion_matrix(model, theta, t, z), sig)


def test_sir_raw_jumps_conserve_population(sir):
    # S + I + R = N: tracked jumps never increase S + I
    assert all(j.sum() <= 0 for j in sir.jumps)
    th = np.array([0.5, 1 / 3])
    r = q_rates_raw(sir, th, 0.0, np.array([300.0, 100.0]), 400)
    np.testing.assert_allclose(r, [0.5 * 300 * 100 / 400, 100.0 / 3.0])


def test_theta_validation(sir):
    with pytest.raises(ModelError):
        sir.theta([0.5])  # wrong length
    with pytest.raises(ModelError):
        sir.theta([-0.5, 0.3])  # positivity
    th = sir.theta([0.5, 1 / 3])
    assert th.as_dict()["lambda"] == 0.5


def test_state_outside_admissible_set_raises(sir):
    with pytest.raises(ModelError):
        drift(sir, np.array([0.5, 1 / 3]), 0.0, np.array([0.9, 0.4]))


@settings(max_examples=50, deadline=None)
@given(
    s=st.floats(0.01, 0.95),
    frac=st.floats(0.01, 0.99),
    lam=st.floats(0.01, 3.0),
    gam=st.floats(0.01, 3.0),
)
def test_sir_sigma_psd_property(s, frac, lam, gam):
    sir = build_model("sir")
    i = frac * (1.0 - s)
    sig = diffusion_matrix(sir, np.array([lam, gam]), 0.0, np.array([s, i]))
    assert np.linalg.eigvalsh(sig).min() >= -1e-12
