"""Bayesian inference for the partially observed SIR epidemic.

Removal times are observed; infection times are missing and treated by
data augmentation (Metropolis-within-Gibbs with move/add/remove steps on
the infection set) or bypassed entirely with ABC (rejection plus local
linear or neural-network regression adjustment).

Rates here follow the O'Neill-Roberts convention: infection intensity
lambda * S * I with raw counts (no 1/N), recovery intensity gamma * I.
The constant exp(NT) reference factor of the jump-process likelihood is
omitted from all stored log-likelihoods (it cancels in every ratio).
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from .rng import make_rng
from .transforms import from_unconstrained, to_unconstrained

_EPS = 1e-300


# ---------------------------------------------------------------------------
# Augmented likelihood
# ---------------------------------------------------------------------------


@dataclass
class AugmentedState:
    """Infection times sigma (sigma[0] < 0 seeds the epidemic), removal
    times tau (tau[0] = 0 convention), rates, and population constants."""

    sigma: np.ndarray
    tau: np.ndarray
    lam: float
    gam: float
    S0: int
    I0: int = 1

    def __post_init__(self):
        self.sigma = np.sort(np.asarray(self.sigma, dtype=float))
        self.tau = np.sort(np.asarray(self.tau, dtype=float))

    @property
    def m(self):
        return len(self.sigma)

    @property
    def n(self):
        return len(self.tau)


def _epidemic_stats(sigma, tau, S0, I0, T):
    """Scan the merged event sequence once.

    Returns (valid, log_prod_inf, log_prod_rem, int_SI, int_I) where the
    log-products exclude the rate constants (lambda, gamma).
    """
    m = len(sigma)
    events = np.concatenate([sigma[1:], tau])
    kinds = np.concatenate([np.zeros(m - 1, dtype=int), np.ones(len(tau), dtype=int)])
    order = np.lexsort((kinds, events))  # infections first at (measure-zero) ties
    events = events[order]
    kinds = kinds[order]
    if len(events) and (events[0] < sigma[0] or events[-1] > T):
        return False, 0.0, 0.0, 0.0, 0.0

    S, I = S0, I0
    t_prev = sigma[0]
    log_inf = 0.0
    log_rem = 0.0
    int_SI = 0.0
    int_I = 0.0
    for t, kind in zip(events, kinds):
        dt = t - t_prev
        int_SI += S * I * dt
        int_I += I * dt
        if kind == 0:  # infection
            if S < 1 or I < 1:
                return False, 0.0, 0.0, 0.0, 0.0
            log_inf += math.log(S * I)
            S -= 1
            I += 1
        else:  # removal
            if I < 1:
                return False, 0.0, 0.0, 0.0, 0.0
            log_rem += math.log(I)
            I -= 1
        t_prev = t
    dt = T - t_prev
    int_SI += S * I * dt
    int_I += I * dt
    return True, log_inf, log_rem, int_SI, int_I


def augmented_loglik(state: AugmentedState, T):
    """Log of the augmented-data likelihood (reference factor omitted).

    Invalid augmentations (a removal without an infective available, or
    more infections than susceptibles) return -inf rather than raising.
    """
    valid, log_inf, log_rem, int_SI, int_I = _epidemic_stats(
        state.sigma, state.tau, state.S0, state.I0, T
    )
    if not valid:
        return -np.inf
    m, n = state.m, state.n
    return (
        (m - 1) * math.log(state.lam)
        + log_inf
        + n * math.log(state.gam)
        + log_rem
        - state.lam * int_SI
        - state.gam * int_I
    )


# ---------------------------------------------------------------------------
# O'Neill-Roberts data-augmentation MCMC
# ---------------------------------------------------------------------------


@dataclass
class McmcResult:
    lam: np.ndarray
    gam: np.ndarray
    sigma1: np.ndarray
    m: np.ndarray
    acceptance: dict
    final_state: AugmentedState


def _initial_sigma(tau, rho):
    # One infection shortly before each removal keeps I(t) >= 1 at every
    # removal, which is always a valid starting augmentation.
    eps = 0.25 * min(1.0, np.min(np.diff(tau)) if len(tau) > 1 else 1.0)
    sigma = [tau[0] - max(1.0 / rho, 0.5)]
    for t in tau[:-1]:
        sigma.append(t - 1e-3 * (1.0 + eps))
    return np.sort(np.asarray(sigma))


def mcmc_oneill_roberts(
    tau,
    S0,
    priors,
    iters,
    seed,
    move_probs=(1.0 / 3, 1.0 / 3, 1.0 / 3),
    rho=1.0,
    T=None,
    I0=1,
    likelihood_power=1.0,
) -> McmcResult:
    """Data-augmentation MCMC for (lambda, gamma, sigma) given removals.

    Each sweep draws lambda, gamma and the first infection time from their
    exact Gibbs conditionals (Gamma, Gamma, shifted exponential), then
    performs one move / remove / add step on the later infection times
    with the Metropolis ratios of the reversible-jump construction.
    Setting ``likelihood_power=0`` reduces every conditional to its prior
    (a detailed-balance sanity mode).
    """
    tau = np.sort(np.asarray(tau, dtype=float))
    if len(tau) == 0:
        raise ValueError("need at least one removal time")
    if abs(tau[0]) > 1e-12:
        raise ValueError("removal times must follow the tau_1 = 0 convention")
    a_lam, b_lam = priors["lambda"]
    a_gam, b_gam = priors["gamma"]
    if min(a_lam, b_lam, a_gam, b_gam) <= 0 or rho <= 0:
        raise ValueError("prior hyperparameters must be positive")
    move_probs = np.asarray(move_probs, dtype=float)
    move_probs = move_probs / move_probs.sum()
    T = float(T if T is not None else tau[-1])
    power = float(likelihood_power)
    rng = make_rng(seed)

    sigma = _initial_sigma(tau, rho)
    lam, gam = a_lam / b_lam, a_gam / b_gam
    S0 = int(S0)
    I0 = int(I0)

    out_lam = np.empty(iters)
    out_gam = np.empty(iters)
    out_s1 = np.empty(iters)
    out_m = np.empty(iters, dtype=np.int64)
    attempts = {"move": 0, "remove": 0, "add": 0}
    accepts = {"move": 0, "remove": 0, "add": 0}

    stats = _epidemic_stats(sigma, tau, S0, I0, T)
    if not stats[0]:
        raise RuntimeError("internal error: invalid initial augmentation")

    def loglik_terms(stats, lam_, gam_, m_):
        _, log_inf, log_rem, int_SI, int_I = stats
        return (
            (m_ - 1) * math.log(lam_)
            + log_inf
            + len(tau) * math.log(gam_)
            + log_rem
            - lam_ * int_SI
            - gam_ * int_I
        )

    for it in range(iters):
        m = len(sigma)
        _, _, _, int_SI, int_I = stats
        lam = rng.gamma(a_lam + power * (m - 1), 1.0 / (b_lam + power * int_SI))
        gam = rng.gamma(a_gam + power * len(tau), 1.0 / (b_gam + power * int_I))

        # sigma_1 | rest: u - sigma_1 ~ Exp(rho + power*(lam*S0 + gam)*I0)
        upper = min(sigma[1] if m >= 2 else np.inf, tau[0])
        rate1 = rho + power * (lam * S0 + gam) * I0
        sigma = sigma.copy()
        sigma[0] = upper - rng.exponential(1.0 / rate1)
        stats = _epidemic_stats(sigma, tau, S0, I0, T)

        kind = ("move", "remove", "add")[rng.choice(3, p=move_probs)]
        cur_ll = loglik_terms(stats, lam, gam, m) * power
        span = T - sigma[0]
        proposal = None
        log_ratio = None
        if kind == "move" and m >= 2:
            j = 1 + rng.integers(m - 1)
            cand = sigma.copy()
            cand[j] = sigma[0] + rng.uniform() * span
            proposal = np.sort(cand)
            log_extra = 0.0
        elif kind == "remove" and m >= 2:
            j = 1 + rng.integers(m - 1)
            proposal = np.delete(sigma, j)
            log_extra = math.log(m - 1) - math.log(span)
        elif kind == "add":
            t_new = sigma[0] + rng.uniform() * span
            proposal = np.sort(np.append(sigma, t_new))
            log_extra = math.log(span) - math.log(m)
        if proposal is not None:
            attempts[kind] += 1
            cand_stats = _epidemic_stats(proposal, tau, S0, I0, T)
            if cand_stats[0]:
                cand_ll = loglik_terms(cand_stats, lam, gam, len(proposal)) * power
                log_ratio = cand_ll - cur_ll + log_extra
                if math.log(rng.uniform() + _EPS) < log_ratio:
                    sigma = proposal
                    stats = cand_stats
                    accepts[kind] += 1

        out_lam[it] = lam
        out_gam[it] = gam
        out_s1[it] = sigma[0]
        out_m[it] = len(sigma)

    acc = {
        k: (accepts[k] / attempts[k] if attempts[k] else np.nan) for k in attempts
    }
    final = AugmentedState(sigma=sigma, tau=tau, lam=lam, gam=gam, S0=S0, I0=I0)
    return McmcResult(out_lam, out_gam, out_s1, out_m, acc, final)


def simulate_sir_events(lam, gam, S0, I0, T, rng):
    """Unnormalized-rate SIR event times: (infection_times, removal_times)."""
    rng = make_rng(rng)
    S, I = int(S0), int(I0)
    t = 0.0
    infections, removals = [], []
    while I > 0:
        rate_inf = lam * S * I
        rate_rem = gam * I
        total = rate_inf + rate_rem
        t += rng.exponential(1.0 / total)
        if t > T:
            break
        if rng.uniform() * total < rate_inf:
            S -= 1
            I += 1
            infections.append(t)
        else:
            I -= 1
            removals.append(t)
    return np.asarray(infections), np.asarray(removals)


# ---------------------------------------------------------------------------
# ABC rejection
# ---------------------------------------------------------------------------


@dataclass
class WeightedSample:
    """Parameter draws with ABC kernel weights (and their summaries)."""

    draws: np.ndarray
    weights: np.ndarray
    summaries: object = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.draws = np.atleast_2d(np.asarray(self.draws, dtype=float))
        self.weights = np.asarray(self.weights, dtype=float)
        if not np.all(np.isfinite(self.weights)):
            raise ValueError("weights must be finite")
        if not np.any(self.weights > 0):
            raise ValueError("at least one weight must be positive")

    @property
    def n(self):
        return self.draws.shape[0]

    @property
    def dim(self):
        return self.draws.shape[1]


def abc_rejection(
    s_obs,
    prior_sampler,
    simulator,
    n_sims,
    accept_frac,
    kernel="epanechnikov",
    distance=None,
    seed=0,
) -> WeightedSample:
    """Rejection ABC with the tolerance set by an acceptance fraction.

    ``prior_sampler(rng)`` draws one parameter vector; ``simulator(theta,
    rng)`` returns its summary.  Vector summaries are scaled per
    coordinate by their standard deviation across simulations (spherical
    kernel); a custom ``distance(s_sim, s_obs)`` overrides that.
    """
    if not 0.0 < accept_frac <= 1.0:
        raise ValueError("accept_frac must be in (0, 1]")
    if kernel not in ("epanechnikov", "uniform"):
        raise ValueError("kernel must be 'epanechnikov' or 'uniform'")
    rng = make_rng(seed)
    draws = []
    summaries = []
    for _ in range(int(n_sims)):
        theta = np.atleast_1d(np.asarray(prior_sampler(rng), dtype=float))
        draws.append(theta)
        summaries.append(simulator(theta, rng))
    draws = np.vstack(draws)

    if distance is not None:
        dists = np.array([distance(s, s_obs) for s in summaries])
    else:
        smat = np.vstack([np.atleast_1d(np.asarray(s, dtype=float)) for s in summaries])
        s_obs_v = np.atleast_1d(np.asarray(s_obs, dtype=float))
        H = smat.std(axis=0)
        H[H == 0] = 1.0
        dists = np.linalg.norm((smat - s_obs_v) / H, axis=1)
        summaries = smat

    k = int(np.clip(round(accept_frac * n_sims), 1, n_sims))
    delta = float(np.partition(dists, k - 1)[k - 1])
    if delta <= 0:
        # exact matches only; uniform weights on them
        weights = (dists <= 0).astype(float)
    elif kernel == "uniform":
        weights = (dists <= delta).astype(float)
    else:
        u = dists / delta
        weights = np.clip(1.0 - u**2, 0.0, None)
    if not np.any(weights > 0):
        raise ValueError("degenerate tolerance: all weights are zero")
    return WeightedSample(
        draws=draws,
        weights=weights,
        summaries=summaries,
        meta={
            "delta": delta,
            "kernel": kernel,
            "accept_frac": accept_frac,
            "acceptance_fraction": float(np.mean(dists <= delta)),
            "distances": dists,
        },
    )


# ---------------------------------------------------------------------------
# Summary statistics
# ---------------------------------------------------------------------------


def _counting_l1(a, b, lo, hi):
    edges = np.unique(np.concatenate([[lo], a, b, [hi]]))
    counts_a = np.searchsorted(a, edges[:-1], side="right")
    counts_b = np.searchsorted(b, edges[:-1], side="right")
    return float(np.sum(np.abs(counts_a - counts_b) * np.diff(edges)))


def summary_path_l1(removals_obs, removals_sim, T):
    """Exact L1 distance between the two removal counting curves on [0,T]."""
    a = np.sort(np.asarray(removals_obs, dtype=float))
    b = np.sort(np.asarray(removals_sim, dtype=float))
    for arr in (a, b):
        if len(arr) and (arr[0] < 0 or arr[-1] > T):
            raise ValueError("removal times must lie in [0, T]")
    return _counting_l1(a, b, 0.0, T)


def sir_seeded_removal_simulator(S0, I0, T, rho=1.0):
    """ABC simulator matching the data-augmentation model exactly.

    The epidemic is seeded at sigma_1 = -w with w ~ Exp(rho) (the same
    prior the MCMC uses), run with unnormalized rates, and reported as
    absolute removal times on (-w, T].  Compare with ``removal_distance``
    so that 'no removal before tau_1 = 0' carries the same information in
    both algorithms.
    """

    def simulator(theta, rng):
        rng = make_rng(rng)
        lam, gam = float(theta[0]), float(theta[1])
        w = rng.exponential(1.0 / rho)
        S, I = int(S0), int(I0)
        t = -w
        removals = []
        while I > 0 and t <= T:
            rate_inf = lam * S * I
            total = rate_inf + gam * I
            t += rng.exponential(1.0 / total)
            if t > T:
                break
            if rng.uniform() * total < rate_inf:
                S -= 1
                I += 1
            else:
                I -= 1
                removals.append(t)
        return np.asarray(removals)

    return simulator


def removal_distance(removals_sim, removals_obs, T):
    """L1 distance of removal counting curves, allowing pre-0 simulated
    removals (which mismatch the observed tau_1 = 0 convention)."""
    a = np.sort(np.asarray(removals_sim, dtype=float))
    b = np.sort(np.asarray(removals_obs, dtype=float))
    lo = min(0.0, a[0] if len(a) else 0.0, b[0] if len(b) else 0.0)
    return _counting_l1(a, b, lo, T)


@dataclass(frozen=True)
class SummaryConfig:
    """Vector-summary layout: final size, removals per period, early
    incidence over the first J0+1 periods, and the mean sojourn time in I
    over those early periods (FIFO pairing of infections to removals)."""

    T: float
    period: float = 1.0
    j0: int = 0
    final_size: bool = True
    period_removals: bool = True
    early_incidence: bool = True
    mean_sojourn: bool = True

    @property
    def n_periods(self):
        return int(round(self.T / self.period))

    @property
    def dim(self):
        d = 0
        if self.final_size:
            d += 1
        if self.period_removals:
            d += self.n_periods
        if self.early_incidence:
            d += self.j0 + 1
        if self.mean_sojourn:
            d += 1
        return d


def summary_vector(infections, removals, config: SummaryConfig):
    """d-dimensional summary of one epidemic event record."""
    inf = np.sort(np.asarray(infections, dtype=float))
    rem = np.sort(np.asarray(removals, dtype=float))
    out = []
    edges = config.period * np.arange(config.n_periods + 1)
    if config.final_size:
        out.append(float(np.sum(rem <= config.T)))
    if config.period_removals:
        out.extend(np.histogram(rem, bins=edges)[0].astype(float))
    if config.early_incidence:
        early_edges = config.period * np.arange(config.j0 + 2)
        out.extend(np.histogram(inf, bins=early_edges)[0].astype(float))
    if config.mean_sojourn:
        cutoff = config.period * (config.j0 + 1)
        early = inf[inf <= cutoff]
        if len(early) == 0:
            out.append(0.0)
        else:
            # FIFO pairing: k-th infection leaves with the k-th removal;
            # individuals not removed by T are censored there.
            ends = np.full(len(early), config.T)
            n_pair = min(len(early), len(rem))
            ends[:n_pair] = rem[:n_pair]
            out.append(float(np.mean(np.maximum(ends - early, 0.0))))
    return np.asarray(out)


# ---------------------------------------------------------------------------
# Regression adjustments
# ---------------------------------------------------------------------------


def _transformed_draws(sample: WeightedSample, transforms):
    transforms = tuple(transforms or ("none",) * sample.dim)
    if len(transforms) != sample.dim:
        raise ValueError("one transform per parameter coordinate required")
    th = np.column_stack(
        [to_unconstrained(sample.draws[:, j], (transforms[j],) * sample.n) for j in range(sample.dim)]
    )
    return th, transforms


def adjust_locl(sample: WeightedSample, s_obs, transforms=None) -> WeightedSample:
    """Local-linear (weighted least squares) regression adjustment.

    Fits theta ~ a + (s - s_obs)^T b with the ABC kernel weights on the
    transformed scale, then shifts every draw to theta - (s-s_obs)^T b;
    weights are unchanged.
    """
    s = np.atleast_2d(np.asarray(sample.summaries, dtype=float))
    s_obs = np.atleast_1d(np.asarray(s_obs, dtype=float))
    w = sample.weights
    pos = w > 0
    if pos.sum() < s.shape[1] + 2:
        raise ValueError("need at least d+2 positive-weight draws")
    th, transforms = _transformed_draws(sample, transforms)

    X = np.column_stack([np.ones(pos.sum()), s[pos] - s_obs])
    Wh = np.sqrt(w[pos])[:, None]
    XW = X * Wh
    gram = XW.T @ XW
    if np.linalg.cond(gram) > 1e12:
        raise ValueError("rank-deficient design: collinear summary statistics")
    beta = np.linalg.solve(gram, XW.T @ (th[pos] * Wh))
    slopes = beta[1:]  # (q, dim)
    adj = th - (s - s_obs) @ slopes
    draws = np.column_stack(
        [from_unconstrained(adj[:, j], (transforms[j],) * sample.n) for j in range(sample.dim)]
    )
    meta = dict(sample.meta)
    meta["adjustment"] = "locl"
    return WeightedSample(draws=draws, weights=w.copy(), summaries=sample.summaries, meta=meta)


@dataclass(frozen=True)
class NchConfig:
    L: int = 10
    hidden: int = 8
    weight_decay: float = 1e-3
    max_iter: int = 400
    seed: int = 0
    transforms: tuple = None


class _Mlp:
    """Single hidden layer (tanh) perceptron trained by weighted L-BFGS."""

    def __init__(self, n_in, hidden, decay, rng):
        self.n_in = n_in
        self.hidden = hidden
        self.decay = decay
        scale = 1.0 / np.sqrt(max(n_in, 1))
        self.sizes = [(hidden, n_in), (hidden,), (hidden,), (1,)]
        self.x0 = np.concatenate(
            [
                (rng.standard_normal((hidden, n_in)) * scale).ravel(),
                np.zeros(hidden),
                rng.standard_normal(hidden) / np.sqrt(hidden),
                np.zeros(1),
            ]
        )
        self.params = self.x0

    def _unpack(self, vec):
        h, d = self.hidden, self.n_in
        W1 = vec[: h * d].reshape(h, d)
        b1 = vec[h * d : h * d + h]
        w2 = vec[h * d + h : h * d + 2 * h]
        b2 = vec[-1]
        return W1, b1, w2, b2

    def predict(self, X, vec=None):
        W1, b1, w2, b2 = self._unpack(self.params if vec is None else vec)
        return np.tanh(X @ W1.T + b1) @ w2 + b2

    def fit(self, X, y, w, max_iter):
        w = w / w.sum()

        def loss_grad(vec):
            W1, b1, w2, b2 = self._unpack(vec)
            A = np.tanh(X @ W1.T + b1)
            f = A @ w2 + b2
            r = f - y
            loss = float(np.sum(w * r**2)) + self.decay * (
                float(np.sum(W1**2)) + float(np.sum(w2**2))
            )
            # backprop
            dr = 2.0 * w * r
            gb2 = dr.sum()
            gw2 = A.T @ dr + 2.0 * self.decay * w2
            dA = np.outer(dr, w2) * (1.0 - A**2)
            gW1 = dA.T @ X + 2.0 * self.decay * W1
            gb1 = dA.sum(axis=0)
            grad = np.concatenate([gW1.ravel(), gb1, gw2, [gb2]])
            return loss, grad

        res = optimize.minimize(
            loss_grad, self.x0, jac=True, method="L-BFGS-B", options={"maxiter": max_iter}
        )
        self.params = res.x
        return self


def _fit_mlp_ensemble(X, y, w, config: NchConfig, stream):
    preds = []
    nets = []
    for rep in range(config.L):
        rng = make_rng(config.seed, replicate=rep, stream=stream)
        net = _Mlp(X.shape[1], config.hidden, config.weight_decay, rng)
        net.fit(X, y, w, config.max_iter)
        nets.append(net)
    def ensemble(Xq):
        return np.mean([net.predict(Xq) for net in nets], axis=0)
    return ensemble


def adjust_nch(sample: WeightedSample, s_obs, config: NchConfig = None) -> WeightedSample:
    """Nonlinear conditional heteroscedastic adjustment.

    Conditional mean and log-variance are each fit by an average of L
    independently initialized single-hidden-layer perceptrons on the
    weighted draws; draws are recentered and rescaled to s_obs.  The
    log parametrization keeps the variance estimate positive.
    """
    config = config or NchConfig()
    s = np.atleast_2d(np.asarray(sample.summaries, dtype=float))
    s_obs = np.atleast_1d(np.asarray(s_obs, dtype=float))
    w = sample.weights
    pos = w > 0
    if pos.sum() < s.shape[1] + 2:
        raise ValueError("need at least d+2 positive-weight draws")
    th, transforms = _transformed_draws(sample, config.transforms)

    mu = s[pos].mean(axis=0)
    sd = s[pos].std(axis=0)
    sd[sd == 0] = 1.0
    Xf = (s[pos] - mu) / sd
    Xall = (s - mu) / sd
    Xobs = (s_obs - mu) / sd

    adj = np.empty_like(th)
    for j in range(sample.dim):
        y = th[pos, j]
        m_hat = _fit_mlp_ensemble(Xf, y, w[pos], config, stream=2 * j)
        resid2 = (y - m_hat(Xf)) ** 2
        logv = np.log(resid2 + 1e-12)
        v_hat = _fit_mlp_ensemble(Xf, logv, w[pos], config, stream=2 * j + 1)
        sig_all = np.exp(0.5 * np.clip(v_hat(Xall), -40.0, 40.0))
        sig_obs = np.exp(0.5 * np.clip(v_hat(Xobs[None, :])[0], -40.0, 40.0))
        adj[:, j] = m_hat(Xobs[None, :])[0] + (th[:, j] - m_hat(Xall)) * (
            sig_obs / sig_all
        )
    draws = np.column_stack(
        [from_unconstrained(adj[:, j], (transforms[j],) * sample.n) for j in range(sample.dim)]
    )
    meta = dict(sample.meta)
    meta["adjustment"] = "nch"
    return WeightedSample(draws=draws, weights=w.copy(), summaries=sample.summaries, meta=meta)


# ---------------------------------------------------------------------------
# Posterior summaries
# ---------------------------------------------------------------------------


def weighted_quantile(x, w, probs):
    order = np.argsort(x)
    x = x[order]
    cw = np.cumsum(w[order])
    cw = cw / cw[-1]
    return np.interp(probs, cw, x)


def posterior_summaries(sample: WeightedSample):
    """Per-coordinate weighted mean, median, KDE mode, and central 95% CI."""
    w = sample.weights
    total = w.sum()
    out = {}
    n_eff = total**2 / np.sum(w**2)
    for j in range(sample.dim):
        x = sample.draws[:, j]
        mean = float(np.sum(w * x) / total)
        lo, med, hi = weighted_quantile(x, w, [0.025, 0.5, 0.975])
        var = float(np.sum(w * (x - mean) ** 2) / total)
        sd = math.sqrt(max(var, 0.0))
        if sd == 0:
            mode = mean
        else:
            bw = 1.06 * sd * n_eff ** (-1.0 / 5.0)
            grid = np.linspace(x.min() - 0.5 * sd, x.max() + 0.5 * sd, 512)
            dens = np.sum(
                w[:, None] * np.exp(-0.5 * ((grid[None, :] - x[:, None]) / bw) ** 2),
                axis=0,
            )
            mode = float(grid[np.argmax(dens)])
        out[j] = {
            "mean": mean,
            "median": float(med),
            "mode": mode,
            "ci95": (float(lo), float(hi)),
        }
    return out
