"""Variance-based (Sobol) sensitivity indices for stochastic simulators.

Three first-order estimators: Jansen pick-freeze (also total and second
order indices), the Nadaraya-Watson plug-in, and the warped-Haar-wavelet
block-thresholding estimator.  The simulator noise is treated as part of
the response, so indices are relative to the total variance of Y.
"""

from dataclasses import dataclass, field

import numpy as np

from .rng import make_rng


@dataclass
class SobolDesign:
    """Monte Carlo design: independent input distributions and a simulator.

    ``dists`` are scipy.stats frozen distributions (rvs/cdf/ppf access);
    ``simulator(X, rng)`` maps one input row to a scalar response, or a
    whole (n, p) matrix to an (n,) vector when ``vectorized`` is set.
    """

    dists: list
    n: int
    simulator: object
    seed: int = 0
    vectorized: bool = False

    def __post_init__(self):
        if self.n < 32:
            raise ValueError("need n >= 32 Monte Carlo draws")

    @property
    def p(self):
        return len(self.dists)

    def sample_matrix(self, stream):
        rng = make_rng(self.seed, replicate=0, stream=stream)
        return np.column_stack([d.rvs(size=self.n, random_state=rng) for d in self.dists])

    def evaluate(self, X, stream):
        if self.vectorized:
            return np.asarray(self.simulator(X, make_rng(self.seed, 1, stream)), dtype=float)
        out = np.empty(len(X))
        for i, row in enumerate(X):
            try:
                out[i] = self.simulator(row, make_rng(self.seed, 1, stream * 1000003 + i))
            except Exception as exc:
                raise RuntimeError(f"simulator failed at replicate {i}: {exc}") from exc
        return out


@dataclass
class SobolResult:
    method: str
    first: np.ndarray
    total: np.ndarray = None
    sd_first: np.ndarray = None
    sd_total: np.ndarray = None
    n_calls: int = 0
    flags: dict = field(default_factory=dict)


def _clip_indices(values, flags, label):
    clipped = np.clip(values, 0.0, 1.0)
    for l, (v, c) in enumerate(zip(np.atleast_1d(values), np.atleast_1d(clipped))):
        if v != c:
            flags[f"{label}[{l}]"] = f"clipped from {v:.4f} into [0,1]"
    return values


def jansen_estimate(design: SobolDesign, n_boot=200) -> SobolResult:
    """Pick-freeze first-order and total indices (Jansen formulas).

    S_l  = (V - (1/2n) sum (f(B) - f(A_B^(l)))^2) / V
    S_Tl = (1/2n) sum (f(A) - f(A_B^(l)))^2 / V
    with A_B^(l) = A with column l replaced from B: n(p+2) simulator calls.
    """
    p, n = design.p, design.n
    A = design.sample_matrix(stream=1)
    B = design.sample_matrix(stream=2)
    fA = design.evaluate(A, stream=10)
    fB = design.evaluate(B, stream=11)
    fAB = np.empty((p, n))
    for l in range(p):
        AB = A.copy()
        AB[:, l] = B[:, l]
        fAB[l] = design.evaluate(AB, stream=12 + l)
    n_calls = n * (p + 2)

    def indices(idx):
        pooled = np.concatenate([fA[idx], fB[idx]])
        V = pooled.var()
        first = np.empty(p)
        total = np.empty(p)
        for l in range(p):
            first[l] = (V - 0.5 * np.mean((fB[idx] - fAB[l][idx]) ** 2)) / V
            total[l] = 0.5 * np.mean((fA[idx] - fAB[l][idx]) ** 2) / V
        return first, total

    all_idx = np.arange(n)
    first, total = indices(all_idx)
    rng = make_rng(design.seed, 2, 0)
    boots_f = np.empty((n_boot, p))
    boots_t = np.empty((n_boot, p))
    for b in range(n_boot):
        idx = rng.integers(0, n, size=n)
        boots_f[b], boots_t[b] = indices(idx)
    flags = {}
    _clip_indices(first, flags, "S")
    _clip_indices(total, flags, "ST")
    return SobolResult(
        method="jansen",
        first=first,
        total=total,
        sd_first=boots_f.std(axis=0),
        sd_total=boots_t.std(axis=0),
        n_calls=n_calls,
        flags=flags,
    )


def second_order_index(design: SobolDesign, l, lp) -> float:
    """S_{l,l'} = Var(E[Y|X_l, X_l'])/Var(Y) - S_l - S_l' (pick-freeze pairs)."""
    if l == lp:
        raise ValueError("second-order index needs two distinct inputs")
    p, n = design.p, design.n
    A = design.sample_matrix(stream=1)
    B = design.sample_matrix(stream=2)
    fA = design.evaluate(A, stream=10)
    fB = design.evaluate(B, stream=11)
    V = np.concatenate([fA, fB]).var()

    def closed(cols, stream):
        AB = A.copy()
        AB[:, cols] = B[:, cols]
        f = design.evaluate(AB, stream=stream)
        return (V - 0.5 * np.mean((fB - f) ** 2)) / V

    s_l = closed([l], 30 + l)
    s_lp = closed([lp], 30 + lp)
    s_pair = closed([l, lp], 60 + min(l, lp) * p + max(l, lp))
    return float(s_pair - s_l - s_lp)


# ---------------------------------------------------------------------------
# Nadaraya-Watson estimator
# ---------------------------------------------------------------------------


def sobol_nw(x, y, h=None, kernel="epanechnikov") -> float:
    """First-order index from i.i.d. pairs via kernel regression.

    S_hat = [ (1/n) sum_i m_hat(X_i)^2 - Ybar^2 ] / Var_hat(Y) with
    m_hat the Nadaraya-Watson estimator; default bandwidth SD(X) n^(-1/3).
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    n = len(x)
    if n < 32:
        raise ValueError("need n >= 32 pairs")
    if h is None:
        h = x.std() * n ** (-1.0 / 3.0)
    if h <= 0:
        raise ValueError("bandwidth must be positive")
    order = np.argsort(x)
    xs, ys = x[order], y[order]
    if kernel == "epanechnikov":
        # K((xj-xi)/h) = 0.75 (1 - (xj-xi)^2/h^2) on |xj-xi| <= h expands
        # into windowed sums of (1, x, x^2) against (1, y): prefix sums
        # give the exact O(n log n) evaluation.
        cum = np.concatenate(
            [
                np.zeros((1, 6)),
                np.cumsum(
                    np.column_stack([np.ones(n), xs, xs**2, ys, ys * xs, ys * xs**2]),
                    axis=0,
                ),
            ]
        )
        lo = np.searchsorted(xs, xs - h, side="left")
        hi = np.searchsorted(xs, xs + h, side="right")
        if np.any(hi - lo < 1):
            raise ValueError("empty kernel neighborhood: bandwidth too small")
        seg = cum[hi] - cum[lo]
        c0, c1, c2, d0, d1, d2 = seg.T
        a = 1.0 - xs**2 / h**2
        b = 2.0 * xs / h**2
        denom = a * c0 + b * c1 - c2 / h**2
        numer = a * d0 + b * d1 - d2 / h**2
        if np.any(denom <= 0):
            raise ValueError("empty kernel neighborhood: bandwidth too small")
        m_hat = numer / denom
    elif kernel == "gaussian":
        diffs = (xs[None, :] - xs[:, None]) / h
        K = np.exp(-0.5 * diffs**2)
        m_hat = (K @ ys) / K.sum(axis=1)
    else:
        raise ValueError("kernel must be 'epanechnikov' or 'gaussian'")
    var_y = y.var()
    if var_y == 0:
        return 0.0
    return float((np.mean(m_hat**2) - y.mean() ** 2) / var_y)


# ---------------------------------------------------------------------------
# Warped Haar wavelet estimator
# ---------------------------------------------------------------------------


def haar_psi(j, k, u):
    """Haar basis on [0,1]: father (j=-1) and mother levels j >= 0."""
    u = np.asarray(u, dtype=float)
    if j == -1:
        if k != 0:
            raise ValueError("father wavelet index k must be 0 on [0,1]")
        return np.where((u >= 0.0) & (u <= 1.0), 1.0, 0.0)
    scale = 2.0**j
    v = u * scale - k
    inside = (v >= 0.0) & (v < 1.0) | ((u == 1.0) & (k == scale - 1))
    vv = np.where((u == 1.0) & (k == scale - 1), 1.0, v)
    sign = np.where(vv < 0.5, 1.0, -1.0)
    return np.where(inside, 2.0 ** (j / 2.0) * sign, 0.0)


def _haar_block_energy(u, y, j):
    """sum_k beta_jk^2 at level j with beta_jk = mean(y * psi_jk(u))."""
    n = len(u)
    if j == -1:
        return (y.mean()) ** 2
    scale = 2**j
    cell = np.minimum((u * scale).astype(np.int64), scale - 1)
    pos = u * scale - cell
    sign = np.where(pos < 0.5, 1.0, -1.0)
    sign = np.where(pos >= 1.0, -1.0, sign)  # u == 1 falls in the last half-cell
    beta = np.bincount(cell, weights=y * sign, minlength=scale) * (2.0 ** (j / 2.0) / n)
    return float(np.sum(beta**2))


def sobol_wavelet(x, y, k_const=1.0) -> float:
    """Block-thresholded warped-wavelet estimator of the first-order index.

    Ranks replace the unknown input CDF (G_hat = rank/n); the response is
    standardized internally so that the penalty w(j) = K (2^j + log 2)/n
    with K_const = 1 is scale-free (indices are invariant to affine
    transformations of Y).
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    n = len(x)
    if n < 64:
        raise ValueError("need n >= 64 pairs")
    sd = y.std()
    if sd == 0:
        return 0.0
    ys = (y - y.mean()) / sd
    ranks = np.argsort(np.argsort(x)) + 1.0
    u = ranks / n
    Jn = int(np.floor(np.log2(np.sqrt(n))))
    v_hat = 0.0
    for j in range(-1, Jn + 1):
        energy = _haar_block_energy(u, ys, j)
        w_j = k_const * (2.0**j + np.log(2.0)) / n
        if energy >= w_j:
            v_hat += energy - w_j
    # standardized response: mean 0, variance 1
    return float(v_hat)


def wavelet_k_heuristic(x, y, grid=None):
    """Slope-heuristic choice of the threshold constant: the middle of the
    widest plateau of K -> V_hat(K)."""
    if grid is None:
        grid = np.geomspace(0.1, 10.0, 25)
    vals = np.array([sobol_wavelet(x, y, k) for k in grid])
    tol = 1e-3 * max(1.0, np.abs(vals).max())
    best_len, best_mid = 0, grid[len(grid) // 2]
    start = 0
    for i in range(1, len(grid) + 1):
        if i == len(grid) or abs(vals[i] - vals[start]) > tol:
            if i - start > best_len:
                best_len = i - start
                best_mid = grid[(start + i - 1) // 2]
            start = i
    return float(best_mid)
