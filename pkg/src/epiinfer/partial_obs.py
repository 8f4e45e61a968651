"""Inference from one observed coordinate of a two-dimensional diffusion
approximation.

The hidden coordinate's initial value xi joins the drift parameters as
eta = (alpha, xi); estimation minimizes the conditional-least-squares
contrast on the A_k residuals, and the sandwich covariance
eps^2 Lambda^-1 V Lambda^-1 is assembled from the sensitivity functions
D_i and the noise kernels v1, v2, v3 by nested quadrature over [0,T]^2.
"""

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import integrate, optimize

from .models import (
    ModelSpec,
    Theta,
    diffusion_factor,
    diffusion_matrix,
    drift_gradients,
)
from .ode import sensitivities, solve_ode
from .results import EstimateResult
from .transforms import from_unconstrained, to_unconstrained


@dataclass(frozen=True)
class PartialConfig:
    """Observation scheme: which coordinate is seen, how xi is handled."""

    observed_idx: int = 0
    estimate_xi: bool = True
    xi_transform: str = "logit"  # 'logit' for (0,1) initial fractions, else 'none'
    xi_fixed: float = None  # hidden initial value when estimate_xi is False

    def hidden_idx(self, p=2):
        if self.observed_idx not in (0, 1) or p != 2:
            raise ValueError("partial observation supports p=2 with one observed coordinate")
        return 1 - self.observed_idx


def _full_theta(model, alpha_values, beta_values=None, fill=1.0):
    theta = np.full(model.n_params, fill, dtype=float)
    theta[list(model.alpha_idx)] = np.asarray(alpha_values, dtype=float)
    if beta_values is not None:
        extra = [k for k in model.beta_idx if k not in model.alpha_idx]
        beta_values = np.atleast_1d(np.asarray(beta_values, dtype=float))
        for slot, val in zip(extra, beta_values):
            theta[slot] = val
    return theta


def _build_x0(model, config: PartialConfig, x1_0, xi):
    x0 = np.empty(model.p)
    x0[config.observed_idx] = x1_0
    x0[config.hidden_idx(model.p)] = xi
    return x0


def ak_residuals(model: ModelSpec, alpha_values, xi, obs1, delta, config: PartialConfig, tol_ode=1e-8, sol=None):
    """A_k residuals of the observed coordinate against the ODE at eta.

    A_k = X1(t_k) - z1(t_k) - (1 + Delta * d b1/d x1 (z(t_{k-1})))
          * (X1(t_{k-1}) - z1(t_{k-1})).
    """
    obs1 = np.asarray(obs1, dtype=float)
    n = len(obs1) - 1
    T = n * delta
    o = config.observed_idx
    theta = _full_theta(model, alpha_values)
    if sol is None:
        x0 = _build_x0(model, config, obs1[0], xi)
        sol = solve_ode(model, theta, x0, T, tol=tol_ode)
    times = delta * np.arange(n + 1)
    z = sol.z(times)
    resid = obs1 - z[:, o]
    slope = np.empty(n)
    for k in range(n):
        _, gz = drift_gradients(model, theta, times[k], model.clip_state(z[k]))
        slope[k] = gz[o, o]
    return resid[1:] - (1.0 + delta * slope) * resid[:-1]


def contrast_partial(model, alpha_values, xi, obs1, delta, eps, config: PartialConfig, tol_ode=1e-8):
    """U-bar(eta) = (1/(eps^2 Delta)) sum A_k^2 (argmin invariant to scaling)."""
    ak = ak_residuals(model, alpha_values, xi, obs1, delta, config, tol_ode)
    return float(np.sum(ak**2) / (eps**2 * delta))


def contrast_partial_weighted(
    model, alpha_values, xi, obs1, delta, eps, config: PartialConfig, beta_values=None, tol_ode=1e-8
):
    """Variance-weighted variant (off by default in estimation).

    Adds log Sigma_11(beta, z(eta, t_k)) and weights each A_k^2 by its
    inverse; asymptotic theory for it is open, so it is exposed behind an
    explicit call only.
    """
    o = config.observed_idx
    theta = _full_theta(model, alpha_values, beta_values)
    obs1 = np.asarray(obs1, dtype=float)
    n = len(obs1) - 1
    x0 = _build_x0(model, config, obs1[0], xi)
    sol = solve_ode(model, theta, x0, n * delta, tol=tol_ode)
    ak = ak_residuals(model, alpha_values, xi, obs1, delta, config, tol_ode, sol=sol)
    times = delta * np.arange(1, n + 1)
    s11 = np.empty(n)
    for k, t in enumerate(times):
        sig = diffusion_matrix(model, theta, t, model.clip_state(sol.z(t)))
        s11[k] = sig[o, o] + 1e-10 * np.trace(sig) + 1e-12
    return float(np.sum(np.log(s11) + ak**2 / (eps**2 * delta * s11)))


def _d_functions(model, theta, sol, config: PartialConfig, ts):
    """D_i(eta, t) for i in alpha (and xi when estimated) on the grid ts."""
    o = config.observed_idx
    h = config.hidden_idx(model.p)
    n_alpha = model.n_alpha
    cols = n_alpha + (1 if config.estimate_xi else 0)
    D = np.empty((len(ts), cols))
    g_oh = np.empty(len(ts))
    zs = sol.z(ts)
    dza = sol.dz_dalpha(ts)
    dxi = sol.dz_dxi(ts) if config.estimate_xi else None
    for m, t in enumerate(ts):
        z = model.clip_state(zs[m])
        ga, gz = drift_gradients(model, theta, t, z)
        g_oh[m] = gz[o, h]
        D[m, :n_alpha] = -ga[o, :] - gz[o, h] * dza[m, h, :]
        if config.estimate_xi:
            D[m, n_alpha] = -gz[o, h] * dxi[m, h]
    return D, g_oh


def lambda_v_matrices(
    model: ModelSpec,
    alpha_values,
    xi,
    x1_0,
    T,
    config: PartialConfig,
    beta_values=None,
    n_grid=2048,
    tol_ode=1e-8,
    check=True,
):
    """(Lambda, V) by quadrature of the D_i / v1 / v2 / v3 integrals.

    The double integrals factorize through cumulative integrals of the
    resolvent-weighted noise kernels, which keeps the evaluation O(grid)
    while being exactly the tensor-product Simpson value; a grid-halving
    consistency check is run when ``check`` is set.
    """
    o = config.observed_idx
    h = config.hidden_idx(model.p)
    theta = _full_theta(model, alpha_values, beta_values)
    x0 = _build_x0(model, config, x1_0, xi)
    sol = sensitivities(model, theta, x0, T, tol=tol_ode, hidden_idx=h if config.estimate_xi else None)

    def compute(n_pts):
        ts = np.linspace(0.0, T, n_pts + 1)
        D, g_oh = _d_functions(model, theta, sol, config, ts)
        psis = sol.psi(ts)
        psi_inv = np.linalg.inv(psis)
        zs = sol.z(ts)
        p = model.p
        sigs = np.empty((len(ts), p, p))
        chols = np.empty((len(ts), p, p))
        for m, t in enumerate(ts):
            sig = diffusion_matrix(model, theta, t, model.clip_state(zs[m]))
            sigs[m] = sig
            chols[m] = diffusion_factor(sig)

        lam = integrate.simpson(D[:, :, None] * D[:, None, :], x=ts, axis=0)
        v1 = sigs[:, o, o]
        V1 = integrate.simpson(D[:, :, None] * D[:, None, :] * v1[:, None, None], x=ts, axis=0)

        # V2: inner cumulative integral of D_i(s) g(s) m(s), m = (Psi^-1 Sigma)[:, o];
        # V2[i, j] = int dt D_j(t) Psi(t)_h . int_0^t ds D_i(s) g(s) m(s)
        m_vec = np.einsum("tij,tj->ti", psi_inv, sigs[:, :, o])
        gm = g_oh[:, None] * m_vec
        inner2 = integrate.cumulative_simpson(
            D[:, :, None] * gm[:, None, :], x=ts, axis=0, initial=0.0
        )  # (t, i, p)
        outer2 = np.einsum("tj,tij->ti", psis[:, h, :], inner2)
        V2 = integrate.simpson(D[:, None, :] * outer2[:, :, None], x=ts, axis=0)

        # V3: v3(t,s) = Psi(t)_o IA(s) Psi(s)_o^T + Psi(t)_h IC(s) Psi(s)_h^T (s <= t)
        W = np.einsum("tij,tjk->tik", psi_inv, chols)
        A = np.einsum("ti,tj->tij", W[:, :, o], W[:, :, o])
        C = np.einsum("ti,tj->tij", W[:, :, h], W[:, :, h])
        IA = integrate.cumulative_simpson(A, x=ts, axis=0, initial=0.0)
        IC = integrate.cumulative_simpson(C, x=ts, axis=0, initial=0.0)
        ka = np.einsum("tij,tj->ti", IA, psis[:, o, :])
        kc = np.einsum("tij,tj->ti", IC, psis[:, h, :])
        inner3a = integrate.cumulative_simpson(
            (D * g_oh[:, None])[:, :, None] * ka[:, None, :], x=ts, axis=0, initial=0.0
        )
        inner3c = integrate.cumulative_simpson(
            (D * g_oh[:, None])[:, :, None] * kc[:, None, :], x=ts, axis=0, initial=0.0
        )
        outer3 = np.einsum("tj,tij->ti", psis[:, o, :], inner3a) + np.einsum(
            "tj,tij->ti", psis[:, h, :], inner3c
        )
        T3 = integrate.simpson((D * g_oh[:, None])[:, None, :] * outer3[:, :, None], x=ts, axis=0)
        V3 = T3 + T3.T

        V = V1 + V2 + V3
        V = 0.5 * (V + V.T)
        lam = 0.5 * (lam + lam.T)
        return lam, V

    lam, V = compute(n_grid)
    if check:
        lam2, V2c = compute(n_grid // 2)
        scale = max(np.linalg.norm(V), 1e-300)
        if np.linalg.norm(V - V2c) > 1e-4 * scale or np.linalg.norm(lam - lam2) > 1e-4 * max(
            np.linalg.norm(lam), 1e-300
        ):
            warnings.warn("Lambda/V quadrature did not pass the grid-halving check")
    return lam, V


def estimate_partial(
    model: ModelSpec,
    obs1,
    delta,
    eps,
    init_alpha,
    xi_init=None,
    config: PartialConfig = None,
    beta_values=None,
    **opts,
) -> EstimateResult:
    """Minimize the partial-observation contrast over eta = (alpha, xi).

    The hidden initial condition enters the optimizer through its
    transform (logit for fractions); the covariance is the sandwich
    eps^2 Lambda^-1 V Lambda^-1.  A numerically singular Lambda is
    reported as non-identifiability with its condition number.
    """
    config = config or PartialConfig()
    obs1 = np.asarray(obs1, dtype=float)
    n = len(obs1) - 1
    T = n * delta
    tol_ode = opts.get("tol_ode", 1e-8)
    alpha_tr = tuple(model.transforms[k] for k in model.alpha_idx)
    if config.estimate_xi:
        if xi_init is None:
            raise ValueError("xi_init required when estimating the hidden initial condition")
        transforms = alpha_tr + (config.xi_transform,)
        eta0 = np.concatenate([np.asarray(init_alpha, dtype=float), [xi_init]])
    else:
        if config.xi_fixed is None:
            raise ValueError("xi_fixed required when not estimating xi")
        transforms = alpha_tr
        eta0 = np.asarray(init_alpha, dtype=float)

    def split(eta):
        if config.estimate_xi:
            return eta[:-1], eta[-1]
        return eta, config.xi_fixed

    def objective(u):
        eta = from_unconstrained(u, transforms)
        alpha, xi = split(eta)
        try:
            return contrast_partial(model, alpha, xi, obs1, delta, eps, config, tol_ode)
        except Exception:
            return 1e12

    u0 = to_unconstrained(eta0, transforms)
    warm = optimize.minimize(
        objective,
        u0,
        method="Nelder-Mead",
        options={
            "maxiter": opts.get("nm_maxiter", 300 * len(eta0)),
            "xatol": 1e-9,
            "fatol": 1e-10,
        },
    )
    best = warm
    if opts.get("polish", True):
        res = optimize.minimize(objective, warm.x, method="L-BFGS-B")
        if np.isfinite(res.fun) and res.fun <= warm.fun:
            best = res
    eta_hat = from_unconstrained(best.x, transforms)
    alpha_hat, xi_hat = split(eta_hat)

    names = tuple(model.param_names[k] for k in model.alpha_idx)
    if config.estimate_xi:
        names = names + ("xi",)
        values = np.concatenate([alpha_hat, [xi_hat]])
    else:
        values = np.asarray(alpha_hat)

    if not opts.get("compute_cov", True):
        return EstimateResult(
            theta=Theta(values, names),
            rate_tag="eps",
            diagnostics={
                "contrast": float(best.fun),
                "n_eval": int(best.nfev + warm.nfev),
                "n_eps2": float(n * eps**2),
            },
        )

    beta_for_v = beta_values
    if beta_for_v is None and model.shared_theta:
        beta_for_v = None  # shared: alpha already fills beta slots
    lam, V = lambda_v_matrices(
        model,
        alpha_hat,
        xi_hat,
        obs1[0],
        T,
        config,
        beta_values=beta_for_v,
        n_grid=opts.get("n_grid", 1024),
        tol_ode=tol_ode,
        check=opts.get("check_quadrature", False),
    )
    cond = float(np.linalg.cond(lam))
    diagnostics = {
        "contrast": float(best.fun),
        "n_eval": int(best.nfev + warm.nfev),
        "lambda_cond": cond,
        "n_eps2": float(n * eps**2),
        "Lambda": lam,
        "V": V,
    }
    if cond > 1e12:
        raise RuntimeError(
            f"numerically non-identifiable: cond(Lambda) = {cond:.3e}"
        )
    lam_inv = np.linalg.inv(lam)
    cov = eps**2 * (lam_inv @ V @ lam_inv)
    return EstimateResult(
        theta=Theta(values, names),
        cov=0.5 * (cov + cov.T),
        rate_tag="eps",
        diagnostics=diagnostics,
    )


# ---------------------------------------------------------------------------
# Closed-form 2-D Ornstein-Uhlenbeck validation case
# ---------------------------------------------------------------------------


def ou2d_closed_form(a, bp, h, sigma, T, x1_0=1.0):
    """Analytic (Lambda, V) for the reparametrized OU model eta=(a, b', h).

    Uses the closed-form D_i, v1 = sigma^2, v2 = 0, and the exact
    evaluation of the v3 kernel for a deterministic start (including the
    transient e^{c(t+s)} terms); 1-D integrals by adaptive quadrature,
    the double integral split along the |t-s| kink.
    """
    if h == 0:
        raise ValueError("h must be nonzero")
    if sigma <= 0:
        raise ValueError("sigma must be positive")

    def z1(t):
        return (x1_0 - bp / h) * np.exp(a * t) + (bp / h) * np.exp((a + h) * t)

    def D(t):
        e1 = np.exp(a * t)
        e2 = np.exp((a + h) * t)
        return np.array(
            [
                -(x1_0 - bp / h) * e1 - (bp / h + bp * t) * e2,
                -e2,
                -bp * t * e2,
            ]
        )

    def onem(c, m):
        # (1 - e^{-2 c m}) / (2 c), stable for small c
        if abs(c) < 1e-10:
            return m * (1.0 - c * m)
        return -np.expm1(-2.0 * c * m) / (2.0 * c)

    def v3(t, s):
        m = min(t, s)
        return sigma**2 * (
            np.exp(a * (t + s)) * onem(a, m)
            + np.exp((a + h) * (t + s)) * onem(a + h, m)
        )

    lam = np.empty((3, 3))
    for i in range(3):
        for j in range(i, 3):
            val, _ = integrate.quad(lambda t: D(t)[i] * D(t)[j], 0.0, T, limit=200)
            lam[i, j] = lam[j, i] = val

    V1 = sigma**2 * lam  # v1 == sigma^2 and v2 == 0 exactly
    V3 = np.empty((3, 3))
    for i in range(3):
        for j in range(3):
            lower, _ = integrate.dblquad(
                lambda s, t: D(s)[i] * D(t)[j] * v3(t, s),
                0.0,
                T,
                lambda t: 0.0,
                lambda t: t,
                epsabs=1e-12,
                epsrel=1e-10,
            )
            V3[i, j] = lower
    V3 = bp**2 * (V3 + V3.T)
    V = V1 + V3
    return lam, 0.5 * (V + V.T)


def gamma1_curve(model, eta0, eta, x1_0, T, config: PartialConfig = None, n_grid=400, tol_ode=1e-9):
    """Gamma_1(eta0, eta, t) on a uniform grid (the contrast's limit kernel).

    Gamma_1 = b1(alpha0, z(eta0,t)) - b1(alpha, z(eta,t))
              - d b1/d x1 (alpha, z(eta,t)) (z1(eta0,t) - z1(eta,t)).
    """
    from .models import drift as _drift

    config = config or PartialConfig()
    o = config.observed_idx
    eta0 = np.asarray(eta0, dtype=float)
    eta = np.asarray(eta, dtype=float)
    theta0 = _full_theta(model, eta0[:-1])
    theta = _full_theta(model, eta[:-1])
    sol0 = solve_ode(model, theta0, _build_x0(model, config, x1_0, eta0[-1]), T, tol=tol_ode)
    sol = solve_ode(model, theta, _build_x0(model, config, x1_0, eta[-1]), T, tol=tol_ode)
    ts = np.linspace(0.0, T, n_grid + 1)
    out = np.empty(len(ts))
    for m, t in enumerate(ts):
        z0 = model.clip_state(sol0.z(t))
        z = model.clip_state(sol.z(t))
        b0 = _drift(model, theta0, t, z0)[o]
        b1 = _drift(model, theta, t, z)[o]
        _, gz = drift_gradients(model, theta, t, z)
        out[m] = b0 - b1 - gz[o, o] * (z0[o] - z[o])
    return ts, out


def sir_partial_identifiability_check(model, eta0, eta_grid, x1_0, T, config: PartialConfig = None, tol=1e-8):
    """Numerical support for the identifiability condition (S8).

    For each candidate eta != eta0, evaluates max_t |Gamma_1(eta0, eta, t)|
    (identically zero would mean the contrast cannot separate them) and
    reports the condition number of Lambda(eta0).
    """
    config = config or PartialConfig()
    eta0 = np.asarray(eta0, dtype=float)
    rows = []
    for eta in eta_grid:
        eta = np.asarray(eta, dtype=float)
        if len(eta) != len(eta0):
            raise ValueError("eta grid entries must match eta0 length")
        _, g = gamma1_curve(model, eta0, eta, x1_0, T, config)
        rows.append(
            {
                "eta": eta,
                "max_abs_gamma1": float(np.max(np.abs(g))),
                "separated": bool(np.max(np.abs(g)) > tol),
            }
        )
    lam, _ = lambda_v_matrices(
        model, eta0[:-1], float(eta0[-1]), x1_0, T, config, n_grid=512, check=False
    )
    return {
        "grid": rows,
        "lambda_cond": float(np.linalg.cond(lam)),
        "all_separated": all(
            r["separated"] for r in rows if np.any(np.asarray(r["eta"]) != eta0)
        ),
    }
