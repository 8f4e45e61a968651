"""Closed-form and low-dimensional MLEs for fully observed processes.

Covers the complete-data SIR jump process, Q-matrices of Markov jump
processes, finite Markov chains (nonparametric and parametric),
chain-binomial epidemics (Greenwood, Reed-Frost), the birth-death chain
with re-emergence, supercritical branching processes, and the AR(1)
validation fixture.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, optimize

from .models import ModelSpec, Theta
from .ode import solve_ode
from .results import EstimateResult
from .simulate import JumpPath
from .transforms import from_unconstrained, to_unconstrained


@dataclass
class TransitionCounts:
    """Transition counts N_ij plus per-state visit / occupation statistics."""

    N_ij: np.ndarray
    holding: np.ndarray  # visit counts (chains) or occupation times R_k (CTMC)

    @classmethod
    def from_chain(cls, states, n_states=None):
        states = np.asarray(states, dtype=np.int64)
        if len(states) < 2:
            raise ValueError("need at least one transition")
        S = int(n_states if n_states is not None else states.max() + 1)
        N = np.zeros((S, S))
        np.add.at(N, (states[:-1], states[1:]), 1.0)
        visits = np.zeros(S)
        np.add.at(visits, states[:-1], 1.0)
        return cls(N_ij=N, holding=visits)

    @classmethod
    def from_ctmc(cls, times, states, T, n_states=None):
        times = np.asarray(times, dtype=float)
        states = np.asarray(states, dtype=np.int64)
        S = int(n_states if n_states is not None else states.max() + 1)
        N = np.zeros((S, S))
        if len(states) > 1:
            np.add.at(N, (states[:-1], states[1:]), 1.0)
        R = np.zeros(S)
        edges = np.concatenate([times, [T]])
        np.add.at(R, states, np.diff(edges))
        return cls(N_ij=N, holding=R)

    @property
    def n_transitions(self):
        return int(self.N_ij.sum())


@dataclass
class QMatrixEstimate:
    Q: np.ndarray
    counts: TransitionCounts
    missing_rows: list = field(default_factory=list)


def chain_loglik(counts: TransitionCounts, Q):
    """Exact log-likelihood sum N_ij log Q(i,j) (0 log 0 = 0)."""
    N = counts.N_ij
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(N > 0, N * np.log(Q), 0.0)
    return float(terms.sum())


def ctmc_loglik(counts: TransitionCounts, Q):
    """Exact jump-process log-likelihood from (N_kl, R_k)."""
    Q = np.asarray(Q, dtype=float)
    off = ~np.eye(Q.shape[0], dtype=bool)
    N, R = counts.N_ij, counts.holding
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where((N > 0) & off, N * np.log(Q), 0.0)
    return float(terms.sum() - (np.clip(Q, 0, None) * off * R[:, None]).sum())


# ---------------------------------------------------------------------------
# SIR complete data
# ---------------------------------------------------------------------------


def _sir_ode_integrals(model, lam, gam, x0_norm, T, num=801):
    sol = solve_ode(model, np.array([lam, gam]), x0_norm, T, tol=1e-8)
    ts = np.linspace(0.0, T, num)
    zs = sol.z(ts)
    int_si = integrate.simpson(zs[:, 0] * zs[:, 1], x=ts)
    int_i = integrate.simpson(zs[:, 1], x=ts)
    return int_si, int_i


def sir_mle_complete(path: JumpPath) -> EstimateResult:
    """Complete-data MLE of (lambda, gamma) for the SIR jump process.

    lambda_hat = (#infections) / (N * int s i dt) and gamma_hat =
    (#recoveries) / (N * int i dt), with the integrals taken over the
    observed normalized path.  The asymptotic covariance is I(theta)^-1/N
    with the Fisher information evaluated on the limit ODE.
    """
    if path.model.name != "sir":
        raise ValueError("sir_mle_complete expects a path of the 'sir' model")
    N = path.N
    n_inf = int(path.counts[path.jump_idx == 0].sum())
    n_rec = int(path.counts[path.jump_idx == 1].sum())
    states, durations = path.segments()
    s = states[:, 0] / N
    i = states[:, 1] / N
    int_si = float(np.dot(s * i, durations))
    int_i = float(np.dot(i, durations))

    flags = {}
    lam_hat = np.nan
    gam_hat = np.nan
    if n_inf == 0 or int_si <= 0:
        flags["lambda"] = "undefined: no infection events observed"
    else:
        lam_hat = n_inf / (N * int_si)
    if n_rec == 0 or int_i <= 0:
        flags["gamma"] = "undefined: no recovery events observed"
    else:
        gam_hat = n_rec / (N * int_i)

    diagnostics = {
        "n_infections": n_inf,
        "n_recoveries": n_rec,
        "int_si": int_si,
        "int_i": int_i,
    }
    cov = None
    if not flags:
        ode_si, ode_i = _sir_ode_integrals(
            path.model, lam_hat, gam_hat, path.x0 / N, path.T
        )
        info = np.diag([ode_si / lam_hat, ode_i / gam_hat])
        cov = np.linalg.inv(info) / N
        diagnostics["fisher_info"] = info
    theta = Theta(np.array([lam_hat, gam_hat]), ("lambda", "gamma"))
    return EstimateResult(
        theta=theta, cov=cov, rate_tag="sqrt_N", diagnostics=diagnostics, flags=flags
    )


def r0_estimate(est: EstimateResult):
    """(R0_hat, delta-method variance) from a complete-data SIR estimate."""
    lam, gam = est["lambda"], est["gamma"]
    if not np.isfinite(gam) or gam == 0:
        raise ValueError("gamma estimate undefined or zero; R0 not available")
    if not np.isfinite(lam):
        raise ValueError("lambda estimate undefined; R0 not available")
    r0 = lam / gam
    grad = np.array([1.0 / gam, -lam / gam**2])
    var = float(grad @ est.cov @ grad)
    return r0, var


# ---------------------------------------------------------------------------
# Q-matrices and Markov chains
# ---------------------------------------------------------------------------


def qmatrix_mle(times, states, T, n_states=None) -> QMatrixEstimate:
    """MLE q_kl = N_kl(T) / R_k(T) of a continuously observed Q-matrix.

    Rows of states never visited (R_k = 0) are flagged missing (NaN), not
    raised.
    """
    counts = TransitionCounts.from_ctmc(times, states, T, n_states)
    S = counts.N_ij.shape[0]
    Q = np.full((S, S), np.nan)
    missing = []
    for k in range(S):
        if counts.holding[k] > 0:
            Q[k] = counts.N_ij[k] / counts.holding[k]
            Q[k, k] = -Q[k].sum() + Q[k, k]
            Q[k, k] = -(counts.N_ij[k].sum() / counts.holding[k])
        else:
            missing.append(k)
    return QMatrixEstimate(Q=Q, counts=counts, missing_rows=missing)


def chain_transition_mle(chain, n_states=None):
    """Empirical transition MLE Q_hat(i,j) = N_ij / N_i. with covariance.

    The covariance follows the multinomial CLT row structure with the
    stationary weights replaced by empirical visit frequencies:
    cov[i][j, j'] = (delta_jj' Q_ij - Q_ij Q_ij') / N_i.
    """
    chain = np.asarray(chain)
    if chain.size == 0:
        raise ValueError("empty chain")
    counts = TransitionCounts.from_chain(chain, n_states)
    S = counts.N_ij.shape[0]
    Q = np.full((S, S), np.nan)
    cov = np.full((S, S, S), np.nan)
    for i in range(S):
        ni = counts.holding[i]
        if ni > 0:
            q = counts.N_ij[i] / ni
            Q[i] = q
            cov[i] = (np.diag(q) - np.outer(q, q)) / ni
    return Q, cov


def chain_parametric_mle(
    counts: TransitionCounts,
    q_param,
    theta0,
    transforms=None,
    names=None,
    max_iter=500,
) -> EstimateResult:
    """Maximize sum N_ij log Q_theta(i,j) by quasi-Newton in transformed
    coordinates (log/logit per ``transforms``)."""
    theta0 = np.asarray(theta0, dtype=float)
    q = len(theta0)
    transforms = tuple(transforms or ("none",) * q)
    names = tuple(names or tuple(f"theta{k}" for k in range(q)))
    N = counts.N_ij

    def negloglik_u(u):
        th = from_unconstrained(u, transforms)
        Qm = np.asarray(q_param(th), dtype=float)
        if np.any(Qm[N > 0] <= 0):
            return np.inf
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(N > 0, N * np.log(Qm), 0.0)
        return -terms.sum()

    u0 = to_unconstrained(theta0, transforms)
    warm = optimize.minimize(
        negloglik_u, u0, method="Nelder-Mead", options={"maxiter": 200 * q, "xatol": 1e-8, "fatol": 1e-10}
    )
    res = optimize.minimize(negloglik_u, warm.x, method="BFGS", options={"maxiter": max_iter})
    if not (res.success or warm.success):
        raise RuntimeError(f"parametric chain MLE did not converge: {res.message}")
    u_hat = res.x if res.fun <= warm.fun else warm.x
    theta_hat = from_unconstrained(u_hat, transforms)

    # Observed information in the original coordinates.
    def negloglik(th):
        Qm = np.asarray(q_param(th), dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(N > 0, N * np.log(Qm), 0.0)
        return -terms.sum()

    hess = _numeric_hessian(negloglik, theta_hat)
    try:
        cov = np.linalg.inv(hess)
    except np.linalg.LinAlgError:
        cov = None
    return EstimateResult(
        theta=Theta(theta_hat, names),
        cov=cov,
        rate_tag="sqrt_n",
        diagnostics={"neg_loglik": float(res.fun), "n_iter": int(res.nit)},
    )


def _numeric_hessian(f, x, rel_step=1e-4):
    x = np.asarray(x, dtype=float)
    q = len(x)
    h = rel_step * np.maximum(1.0, np.abs(x))
    H = np.empty((q, q))
    f0 = f(x)
    for a in range(q):
        for b in range(a, q):
            if a == b:
                xp = x.copy(); xp[a] += h[a]
                xm = x.copy(); xm[a] -= h[a]
                H[a, a] = (f(xp) - 2 * f0 + f(xm)) / h[a] ** 2
            else:
                xpp = x.copy(); xpp[[a, b]] += [h[a], h[b]]
                xpm = x.copy(); xpm[a] += h[a]; xpm[b] -= h[b]
                xmp = x.copy(); xmp[a] -= h[a]; xmp[b] += h[b]
                xmm = x.copy(); xmm[[a, b]] -= [h[a], h[b]]
                H[a, b] = H[b, a] = (f(xpp) - f(xpm) - f(xmp) + f(xmm)) / (
                    4 * h[a] * h[b]
                )
    return H


def icu_transition_matrix(a, b, d):
    """Three-state intensive-care-unit colonization chain Q_theta(a,b,d)."""
    u = a + (1 - a) * d
    return np.array(
        [
            [u**2, 2 * (1 - a) * (1 - d) * u, (1 - a) ** 2 * (1 - d) ** 2],
            [
                a * b * d + (1 - a * b) * d**2,
                2 * (1 - a * b) * d * (1 - d) + a * b * (1 - d),
                (1 - a * b) * (1 - d) ** 2,
            ],
            [d**2, 2 * d * (1 - d), (1 - d) ** 2],
        ]
    )


# ---------------------------------------------------------------------------
# Chain-binomial epidemics
# ---------------------------------------------------------------------------


def greenwood_estimators(s):
    """Greenwood chain: (MLE p_hat, conditional-least-squares p_tilde)."""
    s = np.asarray(s, dtype=float)
    if np.any(np.diff(s) > 0):
        raise ValueError("susceptible counts must be non-increasing")
    if np.any(s < 0):
        raise ValueError("susceptible counts must be nonnegative")
    denom = s[:-1].sum()
    p_mle = (s[0] - s[-1]) / denom if denom > 0 else 0.0
    denom_cls = (s[:-1] ** 2).sum()
    p_cls = 1.0 - (s[:-1] * s[1:]).sum() / denom_cls if denom_cls > 0 else 0.0
    return float(p_mle), float(p_cls)


def reed_frost_mle(s, i) -> EstimateResult:
    """Reed-Frost escape probability q from paired (S_k, I_k) series.

    Solves the score equation
    sum_k i_k / (1 - q^{i_k}) (s_{k+1} - s_k q^{i_k}) = 0 on (0, 1).
    """
    s = np.asarray(s, dtype=float)
    i = np.asarray(i, dtype=float)
    if len(s) != len(i):
        raise ValueError("s and i must have equal length")
    if np.any(np.abs(s[1:] + i[1:] - s[:-1]) > 1e-9):
        raise ValueError("chain-binomial consistency s_{k+1} + i_{k+1} = s_k violated")
    sk, sk1, ik = s[:-1], s[1:], i[:-1]
    active = ik > 0
    if not active.any():
        raise ValueError("no generations with infectives")
    sk, sk1, ik = sk[active], sk1[active], ik[active]

    if np.all(sk1 == sk):
        return EstimateResult(
            theta=Theta(np.array([1.0]), ("q",)),
            rate_tag="sqrt_n",
            flags={"q": "boundary: no infections observed"},
        )

    def score(q):
        return float(np.sum(ik / (1.0 - q**ik) * (sk1 - sk * q**ik)))

    lo, hi = 1e-12, 1.0 - 1e-12
    flo, fhi = score(lo), score(hi)
    if flo * fhi > 0:
        raise ValueError("degenerate data: score has no sign change on (0,1)")
    q_hat = optimize.brentq(score, lo, hi, xtol=1e-10, rtol=1e-12)
    return EstimateResult(
        theta=Theta(np.array([q_hat]), ("q",)),
        rate_tag="sqrt_n",
        diagnostics={"score_at_qhat": score(q_hat)},
    )


def bd_chain_mle(I) -> EstimateResult:
    """Birth-death chain with re-emergence: closed-form MLE of (p, q).

    Counts B (up), D (down), R (hold away from 0), N00 (hold at 0) follow
    the decomposition of the chain log-likelihood; the covariance uses the
    closed-form inverse information I(p,q)^-1 / n.
    """
    I = np.asarray(I, dtype=np.int64)
    d = np.diff(I)
    if np.any(np.abs(d) > 1) or np.any(I < 0):
        raise ValueError("transitions must be in {-1, 0, +1} on nonnegative states")
    n = len(d)
    B = int(np.sum(d == 1))
    D = int(np.sum(d == -1))
    R = int(np.sum((d == 0) & (I[:-1] >= 1)))
    flags = {}
    p_hat = B / n
    if D + R == 0:
        q_hat = 0.0
        flags["q"] = "boundary: no down or hold transitions"
    else:
        q_hat = B / (D + R) * (1.0 - B / n)
    cov = None
    if not flags and 0 < p_hat and 0 < q_hat and p_hat + q_hat < 1:
        r = 1.0 - p_hat - q_hat
        inv_info = np.array(
            [
                [p_hat * (1 - p_hat), -p_hat * q_hat],
                [-p_hat * q_hat, q_hat**2 * (p_hat**2 + r) / (p_hat * (1 - p_hat))],
            ]
        )
        cov = inv_info / n
    return EstimateResult(
        theta=Theta(np.array([p_hat, q_hat]), ("p", "q")),
        cov=cov,
        rate_tag="sqrt_n",
        diagnostics={"B": B, "D": D, "R": R, "n": n},
        flags=flags,
    )


# ---------------------------------------------------------------------------
# Branching processes
# ---------------------------------------------------------------------------

_GENERATING_FNS = {
    "poisson": lambda th, s: np.exp(th[0] * (s - 1.0)),
    "geometric": lambda th, s: th[0] * s / (1.0 - (1.0 - th[0]) * s),
    "fractional_linear": lambda th, s: th[0]
    + (1.0 - th[0]) * th[1] * s / (1.0 - (1.0 - th[1]) * s),
}


def extinction_probability(gen_fn, theta, tol=1e-12):
    """Smallest root of g(s, theta) = s on [0, 1]."""
    f = lambda s: gen_fn(theta, s) - s
    grid = np.linspace(0.0, 1.0, 201)
    vals = f(grid)
    if abs(vals[0]) < tol:
        return 0.0
    for k in range(1, len(grid)):
        if vals[k] <= 0.0:
            if abs(vals[k]) < tol:
                return float(grid[k])
            return float(optimize.brentq(f, grid[k - 1], grid[k], xtol=tol))
    return 1.0


@dataclass
class BranchingEstimate:
    m: float
    sigma2: float
    family: str = None
    family_params: dict = None
    q_extinct: float = None
    flags: dict = field(default_factory=dict)
    extinct: bool = False


def branching_estimators(Z, family=None) -> BranchingEstimate:
    """Offspring mean / variance estimators from generation sizes.

    m_tilde = sum Z_i / sum Z_{i-1} (the weighted CLS and exponential-family
    MLE coincide); sigma2_tilde is the weighted residual variance.  For a
    named offspring family the plug-in parameter and the extinction
    probability (smallest fixed point of the generating function) are
    also returned.
    """
    Z = np.asarray(Z, dtype=float)
    if len(Z) < 2 or Z[0] < 1:
        raise ValueError("need Z_0 >= 1 and at least one later generation")
    zeros = np.nonzero(Z == 0)[0]
    extinct = len(zeros) > 0
    end = (zeros[0] + 1) if extinct else len(Z)
    Z = Z[:end]
    prev, curr = Z[:-1], Z[1:]
    denom = prev.sum()
    if denom <= 0:
        raise ValueError("sum of parent generation sizes is zero")
    m = curr.sum() / denom
    n = len(curr)
    sigma2 = float(np.sum((curr - m * prev) ** 2 / prev) / n)

    est = BranchingEstimate(m=float(m), sigma2=sigma2, extinct=extinct)
    if family is None:
        return est
    est.family = family
    if family == "poisson":
        params = {"lambda": m}
        theta = (m,)
    elif family == "geometric":
        params = {"p": 1.0 / m}
        theta = (1.0 / m,)
    elif family == "fractional_linear":
        p = 2.0 * m / (sigma2 + m**2 + m)
        a = 1.0 - m * p
        params = {"a": a, "p": p}
        theta = (a, p)
        if not (0.0 <= a < 1.0 and 0.0 < p < 1.0):
            est.flags["family"] = "plug-in parameters outside the admissible set"
            est.family_params = params
            return est
    else:
        raise ValueError(f"unknown offspring family {family!r}")
    est.family_params = params
    est.q_extinct = extinction_probability(_GENERATING_FNS[family], theta)
    return est


# ---------------------------------------------------------------------------
# AR(1)
# ---------------------------------------------------------------------------


def ar1_mle(x):
    """Explicit AR(1) MLE: a_hat and gamma^2_hat."""
    x = np.asarray(x, dtype=float)
    if len(x) < 2:
        raise ValueError("need at least two observations")
    prev, curr = x[:-1], x[1:]
    denom = (prev**2).sum()
    if denom == 0:
        raise ValueError("degenerate all-zero series")
    a_hat = float((prev * curr).sum() / denom)
    n = len(curr)
    gamma2_hat = float(np.sum((curr - a_hat * prev) ** 2) / n)
    return a_hat, gamma2_hat


def ou_from_ar1(x, delta):
    """Map the AR(1) MLE to Ornstein-Uhlenbeck (theta, sigma^2) at sampling delta."""
    a_hat, gamma2_hat = ar1_mle(x)
    if a_hat <= 0:
        raise ValueError("a_hat <= 0: OU reparametrization undefined")
    theta_hat = np.log(a_hat) / delta
    if abs(a_hat - 1.0) < 1e-12:
        sigma2_hat = gamma2_hat / delta
    else:
        sigma2_hat = 2.0 * gamma2_hat * np.log(a_hat) / (delta * (a_hat**2 - 1.0))
    return theta_hat, sigma2_hat
