"""EM estimation of a Q-matrix from a discretely sampled Markov jump process.

The E-step of the Bladt-Sorensen scheme needs the conditional expected
transition counts and occupation times between consecutive observations;
both reduce to integrals of the form int_0^t exp(sQ) e_k e_l^T
exp((t-s)Q) ds, which are read off the upper-right block of the
exponential of the doubled block matrix [[Q, e_k e_l^T], [0, Q]].
"""

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm

from .complete_mle import TransitionCounts


class EMError(RuntimeError):
    pass


@dataclass(frozen=True)
class DiscreteChainObs:
    """Observations y_0..y_n of X(t_i) with sampling interval(s) delta."""

    states: np.ndarray
    delta: object  # scalar or per-step array

    def __post_init__(self):
        object.__setattr__(self, "states", np.asarray(self.states, dtype=np.int64))
        if len(self.states) < 2:
            raise ValueError("need at least two observations")
        if self.states.min() < 0:
            raise ValueError("state labels must be nonnegative integers")

    @property
    def n_steps(self):
        return len(self.states) - 1

    def step_deltas(self):
        d = np.asarray(self.delta, dtype=float)
        if d.ndim == 0:
            return np.full(self.n_steps, float(d))
        if len(d) != self.n_steps:
            raise ValueError("per-step delta length must match transitions")
        return d

    @property
    def total_time(self):
        return float(self.step_deltas().sum())


def validate_qmatrix(Q, tol=1e-12):
    Q = np.asarray(Q, dtype=float)
    off = ~np.eye(Q.shape[0], dtype=bool)
    if np.any(Q[off] < 0):
        raise ValueError("off-diagonal Q entries must be nonnegative")
    if np.any(np.abs(Q.sum(axis=1)) > tol * max(1.0, np.abs(Q).max())):
        raise ValueError("Q rows must sum to zero")
    return Q


def transition_matrix(Q, t):
    """P^t(Q) = exp(tQ) by scaling and squaring; entries clipped at 0."""
    if t < 0:
        raise ValueError("time must be nonnegative")
    P = expm(float(t) * np.asarray(Q, dtype=float))
    return np.clip(P, 0.0, None)


def van_loan_integrals(Q, t, k, l):
    """int_0^t exp(sQ) e_k e_l^T exp((t-s)Q) ds via the block exponential."""
    Q = np.asarray(Q, dtype=float)
    S = Q.shape[0]
    C = np.zeros_like(Q)
    C[k, l] = 1.0
    block = np.zeros((2 * S, 2 * S))
    block[:S, :S] = Q
    block[:S, S:] = C
    block[S:, S:] = Q
    return expm(float(t) * block)[:S, S:]


def _step_expectations(Q, t):
    """Per-pair E- and F-matrices for one sampling interval t.

    Returns (P, E, F): P = exp(tQ); E[k][i,j] the expected time in k given
    (X0=i, Xt=j); F[k][l][i,j] the expected k->l transition count.
    """
    S = Q.shape[0]
    P = transition_matrix(Q, t)
    E = np.empty((S, S, S))
    F = np.empty((S, S, S, S))
    for k in range(S):
        Mk = van_loan_integrals(Q, t, k, k)
        E[k] = Mk
        for l in range(S):
            if l == k:
                F[k, l] = 0.0
            else:
                F[k, l] = Q[k, l] * van_loan_integrals(Q, t, k, l)
    return P, E, F


def e_step(Q, obs: DiscreteChainObs) -> TransitionCounts:
    """Expected transition counts and occupation times given the data.

    Sums E^k_{ij}(t) = M^k_{ij}(t) / (e_i^T exp(tQ) e_j) and its F^{kl}
    analogue over consecutive observation pairs; intervals sharing the
    same delta share one set of Van Loan integrals.
    """
    Q = validate_qmatrix(Q)
    S = Q.shape[0]
    if obs.states.max() >= S:
        raise ValueError("observed state label outside the Q-matrix range")
    deltas = obs.step_deltas()
    y0, y1 = obs.states[:-1], obs.states[1:]
    ER = np.zeros(S)
    EN = np.zeros((S, S))
    for d in np.unique(deltas):
        sel = deltas == d
        pair_counts = np.zeros((S, S))
        np.add.at(pair_counts, (y0[sel], y1[sel]), 1.0)
        P, E, F = _step_expectations(Q, d)
        probs = P[y0[sel], y1[sel]]
        if np.any(probs <= 0):
            raise EMError("observed transition has zero probability under Q")
        with np.errstate(divide="ignore", invalid="ignore"):
            ratioE = np.where(P > 0, E / P[None, :, :], 0.0)
            ratioF = np.where(P > 0, F / P[None, None, :, :], 0.0)
        ER += np.einsum("ij,kij->k", pair_counts, ratioE)
        EN += np.einsum("ij,klij->kl", pair_counts, ratioF)
    return TransitionCounts(N_ij=EN, holding=ER)


def m_step(expected: TransitionCounts):
    """q_kl = E(N_kl | Y) / E(R_k | Y) with zero-sum diagonal."""
    S = expected.N_ij.shape[0]
    Q = np.zeros((S, S))
    for k in range(S):
        if expected.holding[k] <= 0:
            raise EMError(f"zero expected occupation time for state {k}")
        Q[k] = expected.N_ij[k] / expected.holding[k]
        Q[k, k] = 0.0
        Q[k, k] = -Q[k].sum()
    return Q


def discrete_loglik(Q, obs: DiscreteChainObs):
    """sum_i log P^delta(Q)_{y_{i-1} y_i}."""
    deltas = obs.step_deltas()
    y0, y1 = obs.states[:-1], obs.states[1:]
    total = 0.0
    for d in np.unique(deltas):
        sel = deltas == d
        P = transition_matrix(Q, d)
        probs = P[y0[sel], y1[sel]]
        if np.any(probs <= 0):
            return -np.inf
        total += float(np.log(probs).sum())
    return total


@dataclass
class EMResult:
    Q: np.ndarray
    loglik_trace: np.ndarray
    n_iter: int
    converged: bool
    expected: TransitionCounts = None
    warnings: list = field(default_factory=list)


def em_fit(obs: DiscreteChainObs, Q0, max_iter=200, tol=1e-8) -> EMResult:
    """Iterate E/M steps from a strictly positive Q0.

    The recorded log-likelihood trace is non-decreasing (violations beyond
    1e-10 raise, as they indicate an internal inconsistency).  A warning
    is attached when the discrete-likelihood surface is nearly flat in
    some direction (e.g. delta so large that P^delta is close to
    stationary), since the EM fixed point is then weakly identified.
    """
    Q0 = validate_qmatrix(np.asarray(Q0, dtype=float))
    off = ~np.eye(Q0.shape[0], dtype=bool)
    if np.any(Q0[off] <= 0):
        raise ValueError("Q0 must have strictly positive off-diagonal entries")
    Q = Q0.copy()
    trace = [discrete_loglik(Q, obs)]
    converged = False
    expected = None
    for it in range(max_iter):
        expected = e_step(Q, obs)
        Q = m_step(expected)
        ll = discrete_loglik(Q, obs)
        if ll < trace[-1] - 1e-10 * max(1.0, abs(trace[-1])):
            raise EMError(
                f"log-likelihood decreased at iteration {it}: {trace[-1]} -> {ll}"
            )
        gain = ll - trace[-1]
        trace.append(ll)
        if abs(gain) <= tol * max(1.0, abs(ll)):
            converged = True
            break
    notes = []
    if _near_flat_likelihood(Q, obs):
        notes.append(
            "identifiability warning: discrete likelihood is nearly flat "
            "(sampling interval may be too coarse for this Q)"
        )
        warnings.warn(notes[-1])
    return EMResult(
        Q=Q,
        loglik_trace=np.asarray(trace),
        n_iter=len(trace) - 1,
        converged=converged,
        expected=expected,
        warnings=notes,
    )


def _near_flat_likelihood(Q, obs, rel_step=1e-4, cond_limit=1e8):
    """Detect a near-singular observed information over the off-diagonals."""
    S = Q.shape[0]
    idx = [(i, j) for i in range(S) for j in range(S) if i != j]

    def nll(params):
        Qc = np.zeros_like(Q)
        for (i, j), v in zip(idx, params):
            Qc[i, j] = v
        np.fill_diagonal(Qc, -Qc.sum(axis=1))
        return -discrete_loglik(Qc, obs)

    x = np.array([Q[i, j] for (i, j) in idx])
    if np.any(x <= 0):
        return True
    h = rel_step * x
    m = len(x)
    H = np.empty((m, m))
    f0 = nll(x)
    for a in range(m):
        for b in range(a, m):
            if a == b:
                xp = x.copy(); xp[a] += h[a]
                xm = x.copy(); xm[a] -= h[a]
                H[a, a] = (nll(xp) - 2 * f0 + nll(xm)) / h[a] ** 2
            else:
                xpp = x.copy(); xpp[[a, b]] += [h[a], h[b]]
                xpm = x.copy(); xpm[a] += h[a]; xpm[b] -= h[b]
                xmp = x.copy(); xmp[a] -= h[a]; xmp[b] += h[b]
                xmm = x.copy(); xmm[[a, b]] -= [h[a], h[b]]
                H[a, b] = H[b, a] = (nll(xpp) - nll(xpm) - nll(xmp) + nll(xmm)) / (
                    4 * h[a] * h[b]
                )
    vals = np.linalg.eigvalsh(0.5 * (H + H.T))
    if vals.max() <= 0:
        return True
    return bool(vals.min() <= 0 or vals.max() / max(vals.min(), 1e-300) > cond_limit)
