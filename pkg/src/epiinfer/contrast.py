"""Minimum-contrast estimation for discretely observed diffusion
approximations with small noise.

High-frequency contrast: residuals B_k against the ODE propagated by the
resolvent, weighted by the diffusion matrix evaluated at the previous
observation.  Low-frequency contrast: the same residuals weighted by the
interval covariances S_k(alpha) (resolvent-smoothed diffusion), for the
epidemic convention where drift and diffusion share their parameters.
"""

import numpy as np
from scipy import optimize

from .models import ModelSpec, Theta, diffusion_matrix, drift_gradients, sigma_gradients
from .models import _theta_values
from .ode import OdeSolution, sensitivities, solve_ode
from .results import EstimateResult, confidence_ellipsoid  # noqa: F401 (re-export)
from .simulate import SampledSeries
from .transforms import from_unconstrained, to_unconstrained

_REG_REL = 1e-10
_REG_ABS = 1e-12


class ContrastState:
    """Per-optimization cache of residuals and weights for one data set."""

    def __init__(self, model: ModelSpec, obs: SampledSeries, eps, tol_ode=1e-8):
        self.model = model
        self.obs = obs
        self.eps = float(eps)
        self.tol_ode = tol_ode
        self.times = obs.times
        self.delta = obs.delta
        self.x0 = obs.values[0]
        self._sol_cache = {}
        self._sigma_obs_cache = {}

    def solution(self, theta, with_sens=False) -> OdeSolution:
        key = (tuple(np.asarray(theta, dtype=float)), with_sens)
        sol = self._sol_cache.get(key)
        if sol is None:
            if with_sens:
                sol = sensitivities(self.model, theta, self.x0, self.obs.T, self.tol_ode)
            else:
                sol = solve_ode(self.model, theta, self.x0, self.obs.T, self.tol_ode)
            if len(self._sol_cache) > 8:
                self._sol_cache.clear()
            self._sol_cache[key] = sol
        return sol

    def sigma_at_observations(self, theta):
        """Sigma(beta, t_{k-1}, X(t_{k-1})), regularized, for k = 1..n."""
        key = tuple(np.asarray(theta, dtype=float))
        out = self._sigma_obs_cache.get(key)
        if out is None:
            out = np.stack(
                [
                    _regularize(
                        diffusion_matrix(
                            self.model,
                            theta,
                            self.times[k],
                            self.model.clip_state(self.obs.values[k]),
                        )
                    )
                    for k in range(self.obs.n)
                ]
            )
            if len(self._sigma_obs_cache) > 8:
                self._sigma_obs_cache.clear()
            self._sigma_obs_cache[key] = out
        return out


def _regularize(sigma):
    # log det must stay finite at boundary observations (I = 0 tails).
    p = sigma.shape[0]
    return sigma + (_REG_REL * np.trace(sigma) + _REG_ABS) * np.eye(p)


def bk_residuals(obs: SampledSeries, sol: OdeSolution):
    """B_k = X(t_k) - z(t_k) - Phi(t_k, t_{k-1}) [X(t_{k-1}) - z(t_{k-1})]."""
    times = obs.times
    if abs(sol.T - obs.T) > 1e-9 * max(1.0, obs.T):
        raise ValueError("solution horizon does not match the observation grid")
    z = sol.z(times)
    resid = obs.values - z
    phis = sol.phi_pairs(times)
    return resid[1:] - np.einsum("kij,kj->ki", phis, resid[:-1])


def sk_covariances(model: ModelSpec, theta, sol: OdeSolution, times, subdiv=8):
    """S_k = (1/Delta) int Phi(t_k,u) Sigma(u, z(u)) Phi(t_k,u)^T du.

    Composite Simpson with ``subdiv`` subintervals per sampling interval
    (>= 8 enforced); output symmetrized.
    """
    subdiv = max(int(subdiv), 8)
    if subdiv % 2:
        subdiv += 1
    th = _theta_values(theta)
    times = np.asarray(times, dtype=float)
    n = len(times) - 1
    p = model.p
    w = np.ones(subdiv + 1)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    out = np.empty((n, p, p))
    for k in range(n):
        a, b = times[k], times[k + 1]
        nodes = np.linspace(a, b, subdiv + 1)
        hh = (b - a) / subdiv
        psi_b = sol.psi(b)
        acc = np.zeros((p, p))
        psis = sol.psi(nodes)
        zs = sol.z(nodes)
        for m, u in enumerate(nodes):
            phi = psi_b @ np.linalg.inv(psis[m])
            sig = diffusion_matrix(model, th, u, model.clip_state(zs[m]))
            acc += w[m] * (phi @ sig @ phi.T)
        sk = acc * (hh / 3.0) / (b - a)
        out[k] = 0.5 * (sk + sk.T)
    return out


def contrast_hf(model: ModelSpec, theta, state: ContrastState):
    """High-frequency contrast U-check(theta) on the cached observations."""
    th = _theta_values(theta)
    sol = state.solution(th)
    bk = bk_residuals(state.obs, sol)
    sig = state.sigma_at_observations(th)
    sign, logdet = np.linalg.slogdet(sig)
    if np.any(sign <= 0):
        raise ValueError("non-PD Sigma after regularization")
    sol_inv = np.linalg.solve(sig, bk[..., None])[..., 0]
    quad = np.einsum("ki,ki->", bk, sol_inv)
    return float(logdet.sum() + quad / (state.eps**2 * state.delta))


def contrast_lf(model: ModelSpec, alpha, state: ContrastState, subdiv=8):
    """Low-frequency contrast U-bar(alpha) with interval covariances S_k."""
    th = _theta_values(alpha)
    sol = state.solution(th)
    bk = bk_residuals(state.obs, sol)
    sk = _regularized_sk(model, th, sol, state.times, subdiv)
    sign, logdet = np.linalg.slogdet(sk)
    if np.any(sign <= 0):
        raise ValueError("non-PD S_k covariance")
    sol_inv = np.linalg.solve(sk, bk[..., None])[..., 0]
    quad = np.einsum("ki,ki->", bk, sol_inv)
    return float(logdet.sum() + quad / (state.eps**2 * state.delta))


def _regularized_sk(model, theta, sol, times, subdiv):
    sk = sk_covariances(model, theta, sol, times, subdiv)
    p = sk.shape[-1]
    tr = np.trace(sk, axis1=1, axis2=2)
    return sk + (_REG_REL * tr[:, None, None] + _REG_ABS) * np.eye(p)


def info_matrices(model: ModelSpec, theta, sol: OdeSolution, n_grid=None):
    """(I_b, I_sigma): drift and diffusion information along the ODE.

    I_b(theta)_ij = int grad_ai b^T Sigma^-1 grad_aj b dt and I_sigma is
    the (1/2T)-normalized trace integral; both by composite Simpson on a
    grid four times the observation resolution by default.
    """
    th = _theta_values(theta)
    T = sol.T
    if n_grid is None:
        n_grid = 4 * max(len(sol.grid), 40)
    if n_grid % 2:
        n_grid += 1
    ts = np.linspace(0.0, T, n_grid + 1)
    w = np.ones(n_grid + 1)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    h = T / n_grid
    a_dim, b_dim = model.n_alpha, model.n_beta
    Ib = np.zeros((a_dim, a_dim))
    Is = np.zeros((b_dim, b_dim))
    for m, t in enumerate(ts):
        z = model.clip_state(sol.z(t))
        sig = _regularize(diffusion_matrix(model, th, t, z))
        sig_inv = np.linalg.inv(sig)
        ga, _ = drift_gradients(model, th, t, z)
        Ib += w[m] * (ga.T @ sig_inv @ ga)
        if b_dim:
            gs = sigma_gradients(model, th, t, z)
            mats = np.einsum("aij,jk->aik", gs, sig_inv)
            Is += w[m] * np.einsum("aij,bji->ab", mats, mats)
    Ib *= h / 3.0
    Is *= h / 3.0 / (2.0 * T)
    Ib = 0.5 * (Ib + Ib.T)
    Is = 0.5 * (Is + Is.T)
    return Ib, Is


def _minimize(objective, u0, nm_maxiter, polish):
    warm = optimize.minimize(
        objective,
        u0,
        method="Nelder-Mead",
        options={"maxiter": nm_maxiter, "xatol": 1e-9, "fatol": 1e-10},
    )
    best = warm
    if polish:
        res = optimize.minimize(objective, warm.x, method="L-BFGS-B")
        if np.isfinite(res.fun) and res.fun <= warm.fun:
            best = res
    return best, warm


def _estimate(model, obs, eps, init, kind, opts):
    opts = dict(opts or {})
    state = ContrastState(model, obs, eps, tol_ode=opts.get("tol_ode", 1e-8))
    n = obs.n
    if n < model.n_params + 1:
        raise ValueError("need at least a+b+1 observations")
    transforms = opts.get("transforms", model.transforms)
    subdiv = opts.get("subdiv", 8)
    init = np.asarray(init, dtype=float)

    def objective(u):
        th = from_unconstrained(u, transforms)
        try:
            if kind == "hf":
                return contrast_hf(model, th, state)
            return contrast_lf(model, th, state, subdiv)
        except Exception:
            return 1e12

    u0 = to_unconstrained(init, transforms)
    best, warm = _minimize(
        objective, u0, opts.get("nm_maxiter", 200 * len(init)), opts.get("polish", True)
    )
    if not np.isfinite(best.fun):
        raise RuntimeError("contrast minimization failed to find a finite value")
    theta_hat = from_unconstrained(best.x, transforms)

    sol_hat = state.solution(theta_hat, with_sens=(kind == "lf"))
    diagnostics = {
        "contrast": float(best.fun),
        "n_eval": int(best.nfev + warm.nfev),
        "converged": bool(best.success or warm.success),
        "eps": state.eps,
        "n_obs": n,
        "regime": kind,
    }

    if kind == "hf":
        Ib, Is = info_matrices(model, theta_hat, sol_hat, n_grid=4 * n)
        if np.linalg.cond(Ib) > 1e12:
            raise RuntimeError("singular drift information matrix I_b")
        diagnostics["I_b"] = Ib
        diagnostics["I_sigma"] = Is
        q = model.n_params
        cov = np.zeros((q, q))
        if model.shared_theta:
            cov = state.eps**2 * np.linalg.inv(Ib)
            rate_tag = "eps"
        else:
            cov_a = state.eps**2 * np.linalg.inv(Ib)
            a_idx = list(model.alpha_idx)
            cov[np.ix_(a_idx, a_idx)] = cov_a
            if model.n_beta:
                cov_b = np.linalg.inv(Is) / n
                b_idx = list(model.beta_idx)
                cov[np.ix_(b_idx, b_idx)] = cov_b
            rate_tag = "eps+sqrt_n"
    else:
        M = lf_information(model, theta_hat, sol_hat, state.times, subdiv)
        diagnostics["M"] = M
        if np.linalg.cond(M) > 1e12:
            raise RuntimeError("singular low-frequency information matrix M(alpha)")
        cov = state.eps**2 * np.linalg.inv(M)
        rate_tag = "eps"

    theta = Theta(theta_hat, model.param_names)
    return EstimateResult(theta=theta, cov=cov, rate_tag=rate_tag, diagnostics=diagnostics)


def estimate_hf(model: ModelSpec, obs: SampledSeries, eps, init, **opts) -> EstimateResult:
    """Minimum-contrast estimate in the high-frequency regime.

    Nelder-Mead warm start, then quasi-Newton, both in transformed
    (log/logit) coordinates; covariance blocks eps^2 I_b^-1 (drift) and
    (1/n) I_sigma^-1 (diffusion-only parameters).
    """
    return _estimate(model, obs, eps, init, "hf", opts)


def estimate_lf(model: ModelSpec, obs: SampledSeries, eps, init, **opts) -> EstimateResult:
    """Minimum-contrast estimate with a fixed sampling interval.

    Requires the epidemic convention (diffusion parameters tied to the
    drift, or a parameter-free diffusion); covariance eps^2 M(alpha)^-1.
    """
    if not model.shared_theta and model.n_beta > 0:
        raise ValueError("low-frequency contrast requires beta == alpha or no beta")
    return _estimate(model, obs, eps, init, "lf", opts)


def select_regime(obs: SampledSeries, threshold=20):
    """Default regime choice: high-frequency when n >= threshold."""
    return "hf" if obs.n >= threshold else "lf"


def gk_residual_gradients(model: ModelSpec, theta, sol: OdeSolution, times):
    """G_k = (1/Delta)(-grad_a z(t_k) + Phi(t_k, t_{k-1}) grad_a z(t_{k-1}))."""
    times = np.asarray(times, dtype=float)
    dz = sol.dz_dalpha(times)  # (n+1, p, a)
    phis = sol.phi_pairs(times)
    delta = np.diff(times)[:, None, None]
    return (-dz[1:] + np.einsum("kij,kja->kia", phis, dz[:-1])) / delta


def lf_information(model: ModelSpec, theta, sol: OdeSolution, times, subdiv=8):
    """M(alpha) = Delta sum_k G_k^T S_k^-1 G_k."""
    th = _theta_values(theta)
    gk = gk_residual_gradients(model, th, sol, times)
    sk = _regularized_sk(model, th, sol, times, subdiv)
    delta = float(np.diff(times)[0])
    M = np.zeros((gk.shape[2], gk.shape[2]))
    for k in range(gk.shape[0]):
        M += gk[k].T @ np.linalg.solve(sk[k], gk[k])
    M *= delta
    return 0.5 * (M + M.T)
