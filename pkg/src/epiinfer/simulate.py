"""Exact and approximate simulation of the epidemic models.

Gillespie paths are exact realizations of the jump process; seasonal
(time-dependent) rates use thinning against a per-jump majorant, so no
time discretization error is introduced.  Tau-leaping and Euler-Maruyama
provide the large-population approximations.  All simulators are pure
functions of (model, theta, seed).
"""

from dataclasses import dataclass, field

import numpy as np

from .models import ModelSpec, diffusion_factor, diffusion_matrix, drift, q_rates_raw
from .models import _theta_values
from .rng import make_rng

_MAX_TAU_HALVINGS = 60


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True)
class JumpPath:
    """Event record of one realization at population size N.

    Events are stored as parallel arrays (time, jump index, multiplicity);
    Gillespie paths have multiplicity one everywhere, tau-leap paths
    aggregate the Poisson counts of each leap.
    """

    model: ModelSpec
    N: int
    x0: np.ndarray  # initial counts
    times: np.ndarray
    jump_idx: np.ndarray
    counts: np.ndarray
    T: float

    def __post_init__(self):
        object.__setattr__(self, "x0", np.asarray(self.x0, dtype=np.int64))
        object.__setattr__(self, "times", np.asarray(self.times, dtype=float))
        object.__setattr__(self, "jump_idx", np.asarray(self.jump_idx, dtype=np.int64))
        object.__setattr__(self, "counts", np.asarray(self.counts, dtype=np.int64))

    @property
    def n_events(self):
        return int(self.counts.sum())

    def states_after_events(self):
        """Counts after each event record, shape (len(times)+1, p)."""
        if len(self.times) == 0:
            return self.x0[None, :].copy()
        deltas = self.model.jumps[self.jump_idx] * self.counts[:, None]
        return np.vstack([self.x0, self.x0 + np.cumsum(deltas, axis=0)])

    def segments(self):
        """(states, durations): piecewise-constant decomposition on [0, T]."""
        states = self.states_after_events()
        edges = np.concatenate([[0.0], self.times, [self.T]])
        return states, np.diff(edges)

    def state_at(self, t):
        """Right-continuous state at time t (counts)."""
        states = self.states_after_events()
        k = np.searchsorted(self.times, t, side="right")
        return states[k]

    def final_state(self):
        states = self.states_after_events()
        return states[-1]

    def final_size(self):
        """Total number of infection events (jump index 0 by convention)."""
        mask = self.jump_idx == 0
        return int(self.counts[mask].sum())

    def truncated(self, T_new):
        """Restriction of the path to [0, T_new]."""
        if T_new > self.T:
            raise ValueError("cannot extend a path by truncation")
        keep = self.times <= T_new
        return JumpPath(
            self.model,
            self.N,
            self.x0,
            self.times[keep],
            self.jump_idx[keep],
            self.counts[keep],
            float(T_new),
        )


@dataclass(frozen=True)
class SampledSeries:
    """Regular-grid discretization: rows are t_k = k*Delta, k = 0..n.

    Values are normalized (proportions for jump paths).  ``observed_mask``
    marks the coordinates visible to estimators; ``scale`` records the
    noise scale (population size N and/or eps).
    """

    delta: float
    values: np.ndarray  # (n+1, p)
    observed_mask: np.ndarray = None
    scale: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=float))
        mask = self.observed_mask
        if mask is None:
            mask = np.ones(self.values.shape[1], dtype=bool)
        object.__setattr__(self, "observed_mask", np.asarray(mask, dtype=bool))

    @property
    def n(self):
        """Number of sampling intervals (n * delta = T)."""
        return self.values.shape[0] - 1

    @property
    def p(self):
        return self.values.shape[1]

    @property
    def T(self):
        return self.n * self.delta

    @property
    def x0(self):
        return self.values[0]

    @property
    def times(self):
        return self.delta * np.arange(self.n + 1)

    def observed(self):
        """Columns visible to estimators."""
        return self.values[:, self.observed_mask]


def _raw_majorant(model, theta, counts, N):
    return N * np.asarray(model.rate_majorant(theta, counts / N), dtype=float)


def gillespie(model: ModelSpec, theta, N, x0, T, seed) -> JumpPath:
    """Exact realization of the jump process on [0, T].

    Holding times from state i are exponential with the total rate
    beta(t, i); time-dependent models are simulated by thinning with the
    model's per-jump majorant.  A zero total rate (absorption) ends the
    path early; that is a valid path, not an error.
    """
    th = _theta_values(theta)
    N = int(N)
    if N < 1:
        raise SimulationError("population size N must be >= 1")
    x0 = np.asarray(x0, dtype=np.int64)
    if x0.shape != (model.p,) or np.any(x0 < 0) or not model.admissible(x0 / N):
        raise SimulationError(f"invalid initial counts {x0}")
    rng = make_rng(seed)
    use_thinning = model.time_dependent and model.rate_majorant is not None

    state = x0.copy()
    t = 0.0
    times, jumps = [], []
    jump_vecs = model.jumps
    while True:
        if use_thinning:
            bounds = _raw_majorant(model, th, state, N)
            btot = bounds.sum()
            if btot <= 0.0:
                break
            t = t + rng.exponential(1.0 / btot)
            if t > T:
                break
            rates = q_rates_raw(model, th, t, state, N)
            rtot = rates.sum()
            if rng.uniform() * btot >= rtot:
                continue  # thinned-out candidate
        else:
            rates = q_rates_raw(model, th, t, state, N)
            rtot = rates.sum()
            if rtot <= 0.0:
                break
            t = t + rng.exponential(1.0 / rtot)
            if t > T:
                break
        j = rng.choice(len(rates), p=rates / rtot)
        state = state + jump_vecs[j]
        times.append(t)
        jumps.append(j)

    times = np.asarray(times)
    jumps = np.asarray(jumps, dtype=np.int64)
    return JumpPath(model, N, x0, times, jumps, np.ones(len(times), dtype=np.int64), float(T))


def tau_leap(model: ModelSpec, theta, N, x0, T, tau, seed) -> JumpPath:
    """Approximate path: Poisson jump counts over leaps of length tau.

    Leaps that would leave the admissible count set are rejected and
    retried with tau halved (the step size resets afterwards).
    """
    th = _theta_values(theta)
    if tau <= 0:
        raise SimulationError("tau must be positive")
    if tau >= T:
        raise SimulationError("tau must be smaller than the horizon T")
    N = int(N)
    x0 = np.asarray(x0, dtype=np.int64)
    rng = make_rng(seed)
    cap = N * model.simplex_cap + 1e-9

    state = x0.copy()
    t = 0.0
    times, jumps, counts = [], [], []
    jump_vecs = model.jumps
    while t < T - 1e-12:
        step = min(tau, T - t)
        rates = q_rates_raw(model, th, t, state, N)
        if rates.sum() <= 0.0:
            break
        for _ in range(_MAX_TAU_HALVINGS):
            k = rng.poisson(rates * step)
            new_state = state + jump_vecs.T @ k
            if np.all(new_state >= 0) and new_state.sum() <= cap:
                break
            step /= 2.0
        else:
            raise SimulationError("tau-leap could not find an admissible leap")
        t_new = t + step
        for j in np.nonzero(k)[0]:
            times.append(t_new)
            jumps.append(j)
            counts.append(k[j])
        state = new_state
        t = t_new

    return JumpPath(
        model,
        N,
        x0,
        np.asarray(times),
        np.asarray(jumps, dtype=np.int64),
        np.asarray(counts, dtype=np.int64),
        float(T),
    )


def sample_path(path: JumpPath, delta) -> SampledSeries:
    """Normalized states on the grid t_k = k*delta (right-continuous)."""
    if delta <= 0:
        raise ValueError("delta must be positive")
    n = int(round(path.T / delta))
    if abs(n * delta - path.T) > 1e-9 * max(1.0, path.T):
        raise ValueError("delta must divide the horizon T")
    grid = delta * np.arange(n + 1)
    states = path.states_after_events()
    idx = np.searchsorted(path.times, grid, side="right")
    values = states[idx] / path.N
    return SampledSeries(delta=float(delta), values=values, scale={"N": path.N})


def euler_maruyama(model: ModelSpec, theta, eps, x0, T, dt, seed) -> SampledSeries:
    """Euler-Maruyama for dX = b dt + eps * sigma dB, projected each step."""
    th = _theta_values(theta)
    if dt <= 0:
        raise ValueError("dt must be positive")
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    rng = make_rng(seed)
    n = int(round(T / dt))
    if abs(n * dt - T) > 1e-9 * max(1.0, T):
        raise ValueError("dt must divide the horizon T")
    p = model.p
    x = np.asarray(x0, dtype=float)
    out = np.empty((n + 1, p))
    out[0] = x
    sqdt = np.sqrt(dt)
    for k in range(n):
        t = k * dt
        b = drift(model, th, t, x)
        x = x + b * dt
        if eps > 0:
            sig = diffusion_factor(diffusion_matrix(model, th, t, out[k]))
            x = x + eps * sqdt * (sig @ rng.standard_normal(p))
        x = model.clip_state(x)
        out[k + 1] = x
    return SampledSeries(delta=float(dt), values=out, scale={"eps": float(eps)})


def simulate_ar1(a, gamma, x0, n, seed):
    """Gaussian AR(1): X_{i+1} = a X_i + gamma * eps; returns X_0..X_n."""
    if gamma < 0:
        raise ValueError("gamma must be nonnegative")
    rng = make_rng(seed)
    x = np.empty(n + 1)
    x[0] = x0
    noise = rng.standard_normal(n)
    for i in range(n):
        x[i + 1] = a * x[i] + gamma * noise[i]
    return x


def simulate_chain(model: ModelSpec, theta, x0, n_steps, seed):
    """Trajectory of a discrete-time chain model, shape (n_steps+1, p)."""
    if model.chain_step is None:
        raise SimulationError(f"{model.name} is not a chain model")
    th = _theta_values(theta)
    rng = make_rng(seed)
    out = np.empty((n_steps + 1, model.p))
    state = np.asarray(x0, dtype=float)
    out[0] = state
    for k in range(n_steps):
        state = model.chain_step(th, state, rng)
        out[k + 1] = state
    return out


def non_extinct_filter(paths, sd_multiplier=1.0):
    """Split paths into major-outbreak and minor-outbreak groups.

    A path is kept when its final epidemic size is at least the empirical
    mean minus ``sd_multiplier`` empirical standard deviations of the
    final sizes (a frequently used conditioning on non-extinction).
    """
    paths = list(paths)
    if len(paths) < 2:
        raise ValueError("need at least two paths to calibrate the threshold")
    sizes = np.array([p.final_size() for p in paths], dtype=float)
    threshold = sizes.mean() - sd_multiplier * sizes.std()
    kept = [p for p, s in zip(paths, sizes) if s >= threshold]
    dropped = [p for p, s in zip(paths, sizes) if s < threshold]
    return kept, dropped


def simulate_ctmc(Q, x0, T, seed):
    """Exact trajectory of a finite-state Markov jump process.

    Returns (times, states): the chain holds state states[k] on
    [times[k], times[k+1]) with times[0] = 0, until absorption or T.
    """
    Q = np.asarray(Q, dtype=float)
    rng = make_rng(seed)
    state = int(x0)
    t = 0.0
    times, states = [0.0], [state]
    while True:
        rate = -Q[state, state]
        if rate <= 0.0:
            break
        t = t + rng.exponential(1.0 / rate)
        if t > T:
            break
        probs = np.clip(Q[state].copy(), 0.0, None)
        probs[state] = 0.0
        probs /= probs.sum()
        state = int(rng.choice(len(probs), p=probs))
        times.append(t)
        states.append(state)
    return np.asarray(times), np.asarray(states, dtype=np.int64)


def sir_final_sizes(pair_rate, gamma, S0, I0, seed):
    """Vectorized exact final sizes of SIR epidemics (jump-chain form).

    ``pair_rate`` is the per-pair infection rate (lambda/N in the
    density-dependent convention), so the infection intensity is
    pair_rate * S * I against recovery gamma * I.  The infective count
    cancels from the embedded jump chain, which makes the final size a
    sequence of Bernoulli steps; the returned value is R at extinction.
    """
    pair_rate = np.atleast_1d(np.asarray(pair_rate, dtype=float))
    gamma = np.broadcast_to(np.asarray(gamma, dtype=float), pair_rate.shape).copy()
    rng = make_rng(seed)
    m = len(pair_rate)
    S = np.full(m, int(S0), dtype=np.int64)
    I = np.full(m, int(I0), dtype=np.int64)
    R = np.zeros(m, dtype=np.int64)
    active = I > 0
    while active.any():
        u = rng.uniform(size=int(active.sum()))
        s_act = S[active]
        p_inf = pair_rate[active] * s_act / (pair_rate[active] * s_act + gamma[active])
        infect = u < p_inf
        idx = np.nonzero(active)[0]
        inf_idx = idx[infect]
        rec_idx = idx[~infect]
        S[inf_idx] -= 1
        I[inf_idx] += 1
        I[rec_idx] -= 1
        R[rec_idx] += 1
        active = I > 0
    return R
