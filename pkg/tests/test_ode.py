import numpy as np
import pytest

from epiinfer.models import ModelSpec, build_model
from epiinfer.ode import OdeError, resolvent, sensitivities, solve_ode


def expm2(A):
    from scipy.linalg import expm

    return expm(A)


def test_sir_solution_qualitative(sir):
    sol = solve_ode(sir, np.array([0.5, 1 / 3]), np.array([0.99, 0.01]), 40.0, tol=1e-10)
    ts = np.linspace(0, 40, 401)
    zs = sol.z(ts)
    s, i = zs[:, 0], zs[:, 1]
    assert np.all(np.diff(s) <= 1e-12)  # s decreasing
    peak = np.argmax(i)
    assert 0 < peak < 400  # i unimodal with an interior peak
    assert np.all(np.diff(i[:peak]) >= -1e-12)
    assert np.all(np.diff(i[peak:]) <= 1e-12)
    assert np.all(s + i <= 1.0 + 1e-9)


def test_constant_drift_free_model():
    # b == 0 keeps z constant
    zero = ModelSpec(
        name="still",
        kind="diffusion",
        p=2,
        jumps=np.zeros((0, 2)),
        param_names=("c",),
        transforms=("none",),
        alpha_idx=(0,),
        beta_idx=(),
        shared_theta=False,
        time_dependent=False,
        drift_fn=lambda th, t, z: np.zeros(2),
        sigma_fn=lambda th, t, z: np.eye(2),
        drift_jac_theta_fn=lambda th, t, z: np.zeros((2, 1)),
        drift_jac_state_fn=lambda th, t, z: np.zeros((2, 2)),
        sigma_jac_theta_fn=lambda th, t, z: np.zeros((1, 2, 2)),
        unbounded_state=True,
    )
    sol = solve_ode(zero, np.array([1.0]), np.array([0.3, -0.4]), 5.0)
    np.testing.assert_allclose(sol.z(3.7), [0.3, -0.4], atol=1e-12)


def test_resolvent_identity_and_semigroup(sir):
    sol = solve_ode(sir, np.array([0.5, 1 / 3]), np.array([0.99, 0.01]), 40.0)
    np.testing.assert_allclose(resolvent(sol, 7.3, 7.3), np.eye(2), atol=1e-10)
    rng = np.random.default_rng(5)
    for _ in range(5):
        u, s, t = np.sort(rng.uniform(0, 40, size=3))
        lhs = sol.phi(t, u)
        rhs = sol.phi(t, s) @ sol.phi(s, u)
        assert np.linalg.norm(lhs - rhs) <= 1e-8 * (1 + np.linalg.norm(lhs))


def test_resolvent_ou_closed_form():
    ou = build_model("ou2d")
    a, b, h = -0.6, 0.8, 0.5
    sol = solve_ode(ou, np.array([a, b, h, 1.0]), np.array([1.0, 0.5]), 4.0, tol=1e-10)
    t, s = 3.1, 0.7
    dt = t - s
    expect = np.array(
        [
            [np.exp(a * dt), (b / h) * (np.exp((a + h) * dt) - np.exp(a * dt))],
            [0.0, np.exp((a + h) * dt)],
        ]
    )
    np.testing.assert_allclose(resolvent(sol, t, s), expect, rtol=1e-7)


def test_resolvent_out_of_range(sir):
    sol = solve_ode(sir, np.array([0.5, 1 / 3]), np.array([0.99, 0.01]), 10.0)
    with pytest.raises(OdeError):
        resolvent(sol, 2.0, 5.0)


def test_resolvent_vs_linearized_propagation(sir):
    # Phi(t,s) v equals the linearized ODE started at s with value v
    theta = np.array([0.5, 1 / 3])
    sol = solve_ode(sir, theta, np.array([0.99, 0.01]), 40.0, tol=1e-10)
    from scipy.integrate import solve_ivp

    from epiinfer.models import drift_gradients

    rng = np.random.default_rng(6)
    for _ in range(3):
        s, t = np.sort(rng.uniform(0, 40, size=2))
        v = rng.standard_normal(2)

        def rhs(u, y):
            _, gz = drift_gradients(sir, theta, u, sol.z(u))
            return gz @ y

        ref = solve_ivp(rhs, (s, t), v, rtol=1e-11, atol=1e-13).y[:, -1]
        got = sol.phi(t, s) @ v
        assert np.linalg.norm(got - ref) <= 1e-7 * (1 + np.linalg.norm(ref))


def test_tolerance_controls_error(sir):
    theta = np.array([0.5, 1 / 3])
    x0 = np.array([0.99, 0.01])
    ref = solve_ode(sir, theta, x0, 40.0, tol=1e-12).z(40.0)
    err_loose = np.linalg.norm(solve_ode(sir, theta, x0, 40.0, tol=1e-5).z(40.0) - ref)
    err_tight = np.linalg.norm(solve_ode(sir, theta, x0, 40.0, tol=1e-9).z(40.0) - ref)
    assert err_tight < err_loose / 20.0


def test_sensitivities_parameter_free_zero():
    zero = ModelSpec(
        name="roty",
        kind="diffusion",
        p=2,
        jumps=np.zeros((0, 2)),
        param_names=("c",),
        transforms=("none",),
        alpha_idx=(0,),
        beta_idx=(),
        shared_theta=False,
        time_dependent=False,
        drift_fn=lambda th, t, z: np.array([-z[1], z[0]]),
        sigma_fn=lambda th, t, z: np.eye(2),
        drift_jac_theta_fn=lambda th, t, z: np.zeros((2, 1)),
        drift_jac_state_fn=lambda th, t, z: np.array([[0.0, -1.0], [1.0, 0.0]]),
        sigma_jac_theta_fn=lambda th, t, z: np.zeros((1, 2, 2)),
        unbounded_state=True,
    )
    sol = sensitivities(zero, np.array([1.0]), np.array([1.0, 0.0]), 3.0)
    np.testing.assert_allclose(sol.dz_dalpha(2.0), np.zeros((2, 1)), atol=1e-10)


def test_sensitivities_match_finite_differences(sir):
    theta = np.array([0.5, 1 / 3])
    x0 = np.array([0.99, 0.01])
    sol = sensitivities(sir, theta, x0, 40.0, tol=1e-10)
    h = 1e-5
    for col, k in enumerate(sir.alpha_idx):
        tp, tm = theta.copy(), theta.copy()
        tp[k] += h
        tm[k] -= h
        fd = (
            solve_ode(sir, tp, x0, 40.0, tol=1e-11).z(40.0)
            - solve_ode(sir, tm, x0, 40.0, tol=1e-11).z(40.0)
        ) / (2 * h)
        got = sol.dz_dalpha(40.0)[:, col]
        assert np.max(np.abs(got - fd) / (1 + np.abs(fd))) <= 1e-5


def test_sensitivities_sirs_finite_differences(sirs):
    theta = np.array([0.5, 0.15, 1 / 3, 1 / 730])
    x0 = np.array([0.7, 1e-4])
    T = 200.0
    sol = sensitivities(sirs, theta, x0, T, tol=1e-10)
    h = 1e-6
    k = 1  # lambda1
    tp, tm = theta.copy(), theta.copy()
    tp[k] += h
    tm[k] -= h
    fd = (
        solve_ode(sirs, tp, x0, T, tol=1e-11).z(T)
        - solve_ode(sirs, tm, x0, T, tol=1e-11).z(T)
    ) / (2 * h)
    got = sol.dz_dalpha(T)[:, k]
    assert np.max(np.abs(got - fd) / (1 + np.abs(fd))) <= 1e-5


def test_ou_sensitivities_analytic():
    # z1(eta,t) = (x1 - xi b/h) e^{at} + (xi b/h) e^{(a+h)t}
    ou = build_model("ou2d")
    a, b, h, xi, x1 = -0.4, 0.6, 0.9, 0.8, 1.2
    T = 2.0
    sol = sensitivities(ou, np.array([a, b, h, 1.0]), np.array([x1, xi]), T, tol=1e-11)
    t = 1.3
    dz = sol.dz_dalpha(t)
    # analytic partials of z1 w.r.t. a and b
    dz1_da = (x1 - xi * b / h) * t * np.exp(a * t) + (xi * b / h) * t * np.exp((a + h) * t)
    dz1_db = -(xi / h) * np.exp(a * t) + (xi / h) * np.exp((a + h) * t)
    assert dz[0, 0] == pytest.approx(dz1_da, rel=1e-6)
    assert dz[0, 1] == pytest.approx(dz1_db, rel=1e-6)


def test_hidden_initial_condition_sensitivity():
    ou = build_model("ou2d")
    a, b, h = -0.4, 0.6, 0.9
    sol = sensitivities(
        ou, np.array([a, b, h, 1.0]), np.array([1.2, 0.8]), 2.0, tol=1e-11, hidden_idx=1
    )
    t = 1.7
    # dz1/dxi = (b/h)(e^{(a+h)t} - e^{at}); dz2/dxi = e^{(a+h)t}
    expect = np.array(
        [
            (b / h) * (np.exp((a + h) * t) - np.exp(a * t)),
            np.exp((a + h) * t),
        ]
    )
    np.testing.assert_allclose(sol.dz_dxi(t), expect, rtol=1e-7)


def test_resolvent_gradient_ou_analytic():
    ou = build_model("ou2d")
    a, b, h = -0.5, 0.7, 0.4
    sol = sensitivities(
        ou, np.array([a, b, h, 1.0]), np.array([1.0, 0.5]), 2.0, tol=1e-10, with_phi_grad=True
    )
    t, s = 1.8, 0.3
    dt = t - s
    dphi = sol.dphi_dalpha(t, s)
    # d/da of e^{(t-s)A}: entries differentiate elementwise in the triangular form
    d_da = np.array(
        [
            [dt * np.exp(a * dt), (b / h) * dt * (np.exp((a + h) * dt) - np.exp(a * dt))],
            [0.0, dt * np.exp((a + h) * dt)],
        ]
    )
    d_db = np.array(
        [[0.0, (1 / h) * (np.exp((a + h) * dt) - np.exp(a * dt))], [0.0, 0.0]]
    )
    np.testing.assert_allclose(dphi[0], d_da, rtol=1e-4, atol=1e-7)
    np.testing.assert_allclose(dphi[1], d_db, rtol=1e-4, atol=1e-7)
