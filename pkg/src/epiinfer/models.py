"""Density-dependent epidemic models: jump sets, rates, and their limits.

A model is a set of jump vectors ``j`` and per-jump rate functions
``beta_j(theta, t, z)`` on the normalized state ``z in [0,1]^p`` (with a
raw-count form for simulation at finite population size N).  The drift of
the ODE/diffusion limit is ``b = sum_j beta_j * j`` and the diffusion
matrix ``Sigma = sum_j beta_j * j j^T``.

Chain models (Greenwood, Reed-Frost, birth-death with re-emergence) and
plain diffusions (2-D Ornstein-Uhlenbeck) share the same container so the
CLI and simulators can dispatch on ``kind``.
"""

from dataclasses import dataclass, field

import numpy as np

ADMISSIBLE_TOL = 1e-9

_MODEL_NAMES = (
    "sir",
    "sirs_seasonal",
    "seir_ebola",
    "seirs_demography",
    "greenwood",
    "reed_frost",
    "bd_reemerge",
    "ar1",
    "ou2d",
)


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class Theta:
    """Parameter vector with labels matching a model's layout."""

    values: np.ndarray
    names: tuple

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=float))
        object.__setattr__(self, "names", tuple(self.names))
        if self.values.ndim != 1 or len(self.values) != len(self.names):
            raise ModelError("theta values and names must have matching length")

    def as_dict(self):
        return dict(zip(self.names, self.values))


@dataclass(frozen=True)
class ModelSpec:
    """Immutable model definition; all operations on it are pure."""

    name: str
    kind: str  # 'jump' | 'diffusion' | 'chain'
    p: int
    jumps: np.ndarray  # (m, p) int; empty for non-jump kinds
    param_names: tuple
    transforms: tuple  # per-parameter 'log' | 'logit' | 'none'
    alpha_idx: tuple  # indices of drift parameters
    beta_idx: tuple  # indices of diffusion parameters (may equal alpha_idx)
    shared_theta: bool
    time_dependent: bool
    constants: dict = field(default_factory=dict)
    # jump-model callbacks
    rates: object = None  # (theta, t, z) -> (m,)
    rates_raw: object = None  # (theta, t, counts, N) -> (m,)
    rate_jac_theta: object = None  # (theta, t, z) -> (m, q)
    rate_jac_state: object = None  # (theta, t, z) -> (m, p)
    rate_majorant: object = None  # (theta, z) -> (m,) bound over t
    # diffusion-model callbacks (used when jumps is empty)
    drift_fn: object = None
    sigma_fn: object = None
    drift_jac_theta_fn: object = None
    drift_jac_state_fn: object = None
    sigma_jac_theta_fn: object = None
    # chain-model callback: (theta, state, rng) -> next state
    chain_step: object = None
    # admissible set: box [0,1]^p plus optional simplex sum(z) <= simplex_cap
    box_low: float = 0.0
    box_high: float = 1.0
    simplex_cap: float = 1.0
    unbounded_state: bool = False

    def __post_init__(self):
        object.__setattr__(
            self, "jumps", np.atleast_2d(np.asarray(self.jumps, dtype=int))
        )
        if self.jumps.size and self.kind == "jump":
            if self.jumps.shape[1] != self.p:
                raise ModelError("jump vectors must have length p")
            uniq = {tuple(j) for j in self.jumps}
            if len(uniq) != len(self.jumps):
                raise ModelError("jump vectors must be distinct")
            if any(not any(j) for j in self.jumps):
                raise ModelError("jump vectors must be nonzero")

    @property
    def n_jumps(self):
        return len(self.jumps) if self.jumps.size else 0

    @property
    def n_params(self):
        return len(self.param_names)

    @property
    def n_alpha(self):
        return len(self.alpha_idx)

    @property
    def n_beta(self):
        return len(self.beta_idx)

    def admissible(self, z, tol=ADMISSIBLE_TOL):
        z = np.asarray(z, dtype=float)
        if z.shape != (self.p,):
            return False
        if self.unbounded_state:
            return bool(np.all(np.isfinite(z)))
        if np.any(z < self.box_low - tol) or np.any(z > self.box_high + tol):
            return False
        return z.sum() <= self.simplex_cap + tol

    def clip_state(self, z):
        """Project a state that is admissible-within-tolerance onto the set."""
        if self.unbounded_state:
            return np.asarray(z, dtype=float)
        z = np.clip(np.asarray(z, dtype=float), self.box_low, self.box_high)
        s = z.sum()
        if s > self.simplex_cap:
            z = z * (self.simplex_cap / s)
        return z

    def theta(self, values) -> Theta:
        th = Theta(np.asarray(values, dtype=float), self.param_names)
        validate_theta(self, th)
        return th


def validate_theta(model: ModelSpec, theta: Theta):
    if len(theta.values) != model.n_params:
        raise ModelError(
            f"{model.name}: expected {model.n_params} parameters, got {len(theta.values)}"
        )
    for v, name, tr in zip(theta.values, theta.names, model.transforms):
        if not np.isfinite(v):
            raise ModelError(f"{model.name}: parameter {name} is not finite")
        if tr == "log" and v <= 0:
            raise ModelError(f"{model.name}: parameter {name} must be > 0")
        if tr == "logit" and not (0.0 < v < 1.0):
            raise ModelError(f"{model.name}: parameter {name} must be in (0, 1)")


def _theta_values(theta):
    return theta.values if isinstance(theta, Theta) else np.asarray(theta, dtype=float)


def _check_state(model, z):
    z = np.asarray(z, dtype=float)
    if not model.admissible(z):
        raise ModelError(f"{model.name}: state {z} outside admissible set")
    return model.clip_state(z)


def q_rates(model: ModelSpec, theta, t, z):
    """Per-jump rates beta_j(theta, t, z) at a normalized state."""
    th = _theta_values(theta)
    z = _check_state(model, z)
    r = np.asarray(model.rates(th, t, z), dtype=float)
    # Clipping keeps tiny negative states from producing -1e-25 rates.
    return np.maximum(r, 0.0)


def q_rates_raw(model: ModelSpec, theta, t, counts, N):
    """Per-jump rates in raw-count form beta_j(theta, t, i, N)."""
    th = _theta_values(theta)
    counts = np.asarray(counts, dtype=float)
    return np.maximum(np.asarray(model.rates_raw(th, t, counts, N), dtype=float), 0.0)


def drift(model: ModelSpec, theta, t, z):
    """Drift b(theta, t, z) = sum_j beta_j(theta, t, z) * j."""
    th = _theta_values(theta)
    if model.kind == "diffusion":
        return np.asarray(model.drift_fn(th, t, np.asarray(z, dtype=float)))
    r = q_rates(model, th, t, z)
    return model.jumps.T @ r


def diffusion_matrix(model: ModelSpec, theta, t, z):
    """Sigma(theta, t, z) = sum_j beta_j * j j^T (symmetric PSD)."""
    th = _theta_values(theta)
    if model.kind == "diffusion":
        return np.asarray(model.sigma_fn(th, t, np.asarray(z, dtype=float)))
    r = q_rates(model, th, t, z)
    return (model.jumps.T * r) @ model.jumps


def diffusion_factor(sigma):
    """Lower-triangular factor L with L L^T = Sigma.

    Singular Sigma (boundary states, e.g. I=0) is handled by clipping
    negative eigenvalues at 0 and running a zero-pivot-tolerant Cholesky;
    genuinely indefinite input raises.
    """
    sigma = np.asarray(sigma, dtype=float)
    p = sigma.shape[0]
    scale = 1.0 + np.linalg.norm(sigma)
    if not np.allclose(sigma, sigma.T, atol=1e-10 * scale):
        raise ModelError("diffusion_factor: input must be symmetric")
    w = np.linalg.eigvalsh(sigma)
    if w.min() < -1e-8 * scale:
        raise ModelError("diffusion_factor: input is indefinite beyond tolerance")
    if w.min() < 0:
        vals, vecs = np.linalg.eigh(sigma)
        sigma = (vecs * np.clip(vals, 0.0, None)) @ vecs.T
        sigma = 0.5 * (sigma + sigma.T)
    L = np.zeros((p, p))
    tol = 1e-14 * scale
    work = sigma.copy()
    for k in range(p):
        d = work[k, k] - L[k, :k] @ L[k, :k]
        if d <= tol:
            L[k, k] = 0.0
            continue
        L[k, k] = np.sqrt(d)
        for i in range(k + 1, p):
            L[i, k] = (work[i, k] - L[i, :k] @ L[k, :k]) / L[k, k]
    return L


def drift_gradients(model: ModelSpec, theta, t, z):
    """Analytic (grad_alpha b, grad_z b), shapes (p, a) and (p, p)."""
    th = _theta_values(theta)
    z = np.asarray(z, dtype=float)
    if model.kind == "diffusion":
        ga = np.asarray(model.drift_jac_theta_fn(th, t, z))[:, list(model.alpha_idx)]
        gz = np.asarray(model.drift_jac_state_fn(th, t, z))
        return ga, gz
    z = _check_state(model, z)
    dth = np.asarray(model.rate_jac_theta(th, t, z), dtype=float)  # (m, q)
    dzz = np.asarray(model.rate_jac_state(th, t, z), dtype=float)  # (m, p)
    ga = model.jumps.T @ dth[:, list(model.alpha_idx)]
    gz = model.jumps.T @ dzz
    return ga, gz


def sigma_gradients(model: ModelSpec, theta, t, z):
    """grad_beta Sigma as an array of shape (b, p, p)."""
    th = _theta_values(theta)
    z = np.asarray(z, dtype=float)
    if model.kind == "diffusion":
        return np.asarray(model.sigma_jac_theta_fn(th, t, z))[list(model.beta_idx)]
    z = _check_state(model, z)
    dth = np.asarray(model.rate_jac_theta(th, t, z), dtype=float)
    out = np.empty((model.n_beta, model.p, model.p))
    for col, j_idx in enumerate(model.beta_idx):
        out[col] = (model.jumps.T * dth[:, j_idx]) @ model.jumps
    return out


# ---------------------------------------------------------------------------
# Built-in models
# ---------------------------------------------------------------------------


def _require_positive(config, key, default):
    v = float(config.get(key, default))
    if v <= 0:
        raise ModelError(f"constant {key} must be positive")
    return v


def _sir_model() -> ModelSpec:
    jumps = [(-1, 1), (0, -1)]

    def rates(th, t, z):
        lam, gam = th
        s, i = z
        return np.array([lam * s * i, gam * i])

    def rates_raw(th, t, c, N):
        lam, gam = th
        S, I = c
        return np.array([lam * S * I / N, gam * I])

    def jac_theta(th, t, z):
        s, i = z
        return np.array([[s * i, 0.0], [0.0, i]])

    def jac_state(th, t, z):
        lam, gam = th
        s, i = z
        return np.array([[lam * i, lam * s], [0.0, gam]])

    return ModelSpec(
        name="sir",
        kind="jump",
        p=2,
        jumps=jumps,
        param_names=("lambda", "gamma"),
        transforms=("log", "log"),
        alpha_idx=(0, 1),
        beta_idx=(0, 1),
        shared_theta=True,
        time_dependent=False,
        rates=rates,
        rates_raw=rates_raw,
        rate_jac_theta=jac_theta,
        rate_jac_state=jac_state,
    )


def _sirs_seasonal_model(config) -> ModelSpec:
    T_per = _require_positive(config, "T_per", 365.0)
    mu = float(config.get("mu", 1.0 / (50.0 * 365.0)))
    eta = float(config.get("eta", 1e-6))
    if mu < 0 or eta < 0:
        raise ModelError("mu and eta must be nonnegative")
    jumps = [(-1, 1), (-1, 0), (0, -1), (1, 0)]
    w = 2.0 * np.pi / T_per

    def lam_t(lam0, lam1, t):
        return lam0 * (1.0 + lam1 * np.sin(w * t))

    def rates(th, t, z):
        lam0, lam1, gam, delta = th
        s, i = z
        return np.array(
            [
                lam_t(lam0, lam1, t) * s * (i + eta),
                mu * s,
                (gam + mu) * i,
                mu + delta * max(1.0 - s - i, 0.0),
            ]
        )

    def rates_raw(th, t, c, N):
        lam0, lam1, gam, delta = th
        S, I = c
        return np.array(
            [
                lam_t(lam0, lam1, t) * S * (I / N + eta),
                mu * S,
                (gam + mu) * I,
                mu * N + delta * max(N - S - I, 0.0),
            ]
        )

    def jac_theta(th, t, z):
        lam0, lam1, gam, delta = th
        s, i = z
        sin_t = np.sin(w * t)
        out = np.zeros((4, 4))
        out[0, 0] = (1.0 + lam1 * sin_t) * s * (i + eta)
        out[0, 1] = lam0 * sin_t * s * (i + eta)
        out[2, 2] = i
        out[3, 3] = max(1.0 - s - i, 0.0)
        return out

    def jac_state(th, t, z):
        lam0, lam1, gam, delta = th
        s, i = z
        lt = lam_t(lam0, lam1, t)
        return np.array(
            [
                [lt * (i + eta), lt * s],
                [mu, 0.0],
                [0.0, gam + mu],
                [-delta, -delta],
            ]
        )

    def majorant(th, z):
        lam0, lam1, gam, delta = th
        s, i = z
        return np.array(
            [
                lam0 * (1.0 + abs(lam1)) * s * (i + eta),
                mu * s,
                (gam + mu) * i,
                mu + delta * max(1.0 - s - i, 0.0),
            ]
        )

    return ModelSpec(
        name="sirs_seasonal",
        kind="jump",
        p=2,
        jumps=jumps,
        param_names=("lambda0", "lambda1", "gamma", "delta"),
        transforms=("log", "logit", "log", "log"),
        alpha_idx=(0, 1, 2, 3),
        beta_idx=(0, 1, 2, 3),
        shared_theta=True,
        time_dependent=True,
        constants={"T_per": T_per, "mu": mu, "eta": eta},
        rates=rates,
        rates_raw=rates_raw,
        rate_jac_theta=jac_theta,
        rate_jac_state=jac_state,
        rate_majorant=majorant,
    )


def _seir_ebola_model(config) -> ModelSpec:
    T_per = _require_positive(config, "T_per", 365.0)
    lam1 = float(config.get("lambda1", 0.0))
    if not 0.0 <= lam1 < 1.0:
        raise ModelError("lambda1 must be in [0, 1)")
    jumps = [(-1, 1, 0), (0, -1, 1), (0, 0, -1)]
    w = 2.0 * np.pi / T_per

    def lam_t(lam0, t):
        return lam0 * (1.0 + lam1 * np.sin(w * t))

    def rates(th, t, z):
        lam0, nu, gam = th
        s, e, i = z
        return np.array([lam_t(lam0, t) * s * i, nu * e, gam * i])

    def rates_raw(th, t, c, N):
        lam0, nu, gam = th
        S, E, I = c
        return np.array([lam_t(lam0, t) * S * I / N, nu * E, gam * I])

    def jac_theta(th, t, z):
        lam0, nu, gam = th
        s, e, i = z
        out = np.zeros((3, 3))
        out[0, 0] = (1.0 + lam1 * np.sin(w * t)) * s * i
        out[1, 1] = e
        out[2, 2] = i
        return out

    def jac_state(th, t, z):
        lam0, nu, gam = th
        s, e, i = z
        lt = lam_t(lam0, t)
        return np.array(
            [
                [lt * i, 0.0, lt * s],
                [0.0, nu, 0.0],
                [0.0, 0.0, gam],
            ]
        )

    def majorant(th, z):
        lam0, nu, gam = th
        s, e, i = z
        return np.array([lam0 * (1.0 + lam1) * s * i, nu * e, gam * i])

    return ModelSpec(
        name="seir_ebola",
        kind="jump",
        p=3,
        jumps=jumps,
        param_names=("lambda0", "nu", "gamma"),
        transforms=("log", "log", "log"),
        alpha_idx=(0, 1, 2),
        beta_idx=(0, 1, 2),
        shared_theta=True,
        time_dependent=lam1 > 0.0,
        constants={"T_per": T_per, "lambda1": lam1},
        rates=rates,
        rates_raw=rates_raw,
        rate_jac_theta=jac_theta,
        rate_jac_state=jac_state,
        rate_majorant=majorant if lam1 > 0.0 else None,
    )


def _seirs_demography_model(config) -> ModelSpec:
    mu = _require_positive(config, "mu", 1.0 / (50.0 * 365.0))
    # Jumps chosen so that b and Sigma recomputed from the jump list
    # reproduce the published display exactly (including the (gamma+nu) I
    # exit rate and the mu(1+s) entry of Sigma).
    jumps = [
        (-1, 1, 0),  # infection
        (0, -1, 1),  # incubation ends
        (1, 0, 0),  # susceptible influx (birth + waning)
        (0, 0, -1),  # infectious exit
        (-1, 0, 0),  # susceptible death
        (0, -1, 0),  # exposed death
    ]

    def rates(th, t, z):
        lam, nu, gam, delta = th
        s, e, i = z
        rest = max(1.0 - s - e - i, 0.0)
        return np.array(
            [
                lam * s * i,
                nu * e,
                mu + delta * rest,
                (gam + nu) * i,
                mu * s,
                mu * e,
            ]
        )

    def rates_raw(th, t, c, N):
        lam, nu, gam, delta = th
        S, E, I = c
        rest = max(N - S - E - I, 0.0)
        return np.array(
            [
                lam * S * I / N,
                nu * E,
                mu * N + delta * rest,
                (gam + nu) * I,
                mu * S,
                mu * E,
            ]
        )

    def jac_theta(th, t, z):
        lam, nu, gam, delta = th
        s, e, i = z
        rest = max(1.0 - s - e - i, 0.0)
        out = np.zeros((6, 4))
        out[0, 0] = s * i
        out[1, 1] = e
        out[2, 3] = rest
        out[3, 1] = i
        out[3, 2] = i
        return out

    def jac_state(th, t, z):
        lam, nu, gam, delta = th
        s, e, i = z
        return np.array(
            [
                [lam * i, 0.0, lam * s],
                [0.0, nu, 0.0],
                [-delta, -delta, -delta],
                [0.0, 0.0, gam + nu],
                [mu, 0.0, 0.0],
                [0.0, mu, 0.0],
            ]
        )

    return ModelSpec(
        name="seirs_demography",
        kind="jump",
        p=3,
        jumps=jumps,
        param_names=("lambda", "nu", "gamma", "delta"),
        transforms=("log", "log", "log", "log"),
        alpha_idx=(0, 1, 2, 3),
        beta_idx=(0, 1, 2, 3),
        shared_theta=True,
        time_dependent=False,
        constants={"mu": mu},
        rates=rates,
        rates_raw=rates_raw,
        rate_jac_theta=jac_theta,
        rate_jac_state=jac_state,
    )


def _greenwood_model() -> ModelSpec:
    # Discrete-time chain on (S, I): each susceptible is infected w.p. p
    # whenever at least one infective is present.
    def step(th, state, rng):
        (pp,) = th
        S, I = state
        if I <= 0:
            return np.array([S, 0])
        new = rng.binomial(int(S), pp)
        return np.array([S - new, new])

    return ModelSpec(
        name="greenwood",
        kind="chain",
        p=2,
        jumps=np.zeros((0, 2)),
        param_names=("p",),
        transforms=("logit",),
        alpha_idx=(0,),
        beta_idx=(),
        shared_theta=False,
        time_dependent=False,
        chain_step=step,
        unbounded_state=True,
    )


def _reed_frost_model() -> ModelSpec:
    def step(th, state, rng):
        (q,) = th
        S, I = state
        if I <= 0:
            return np.array([S, 0])
        new = rng.binomial(int(S), 1.0 - q ** int(I))
        return np.array([S - new, new])

    return ModelSpec(
        name="reed_frost",
        kind="chain",
        p=2,
        jumps=np.zeros((0, 2)),
        param_names=("q",),
        transforms=("logit",),
        alpha_idx=(0,),
        beta_idx=(),
        shared_theta=False,
        time_dependent=False,
        chain_step=step,
        unbounded_state=True,
    )


def _bd_reemerge_model() -> ModelSpec:
    # Birth-death chain on N with re-emergence from 0.
    def step(th, state, rng):
        pp, qq = th
        i = int(state[0])
        u = rng.uniform()
        if i == 0:
            return np.array([1 if u < pp else 0])
        if u < pp:
            return np.array([i + 1])
        if u < pp + qq:
            return np.array([i - 1])
        return np.array([i])

    return ModelSpec(
        name="bd_reemerge",
        kind="chain",
        p=1,
        jumps=np.zeros((0, 1)),
        param_names=("p", "q"),
        transforms=("logit", "logit"),
        alpha_idx=(0, 1),
        beta_idx=(),
        shared_theta=False,
        time_dependent=False,
        chain_step=step,
        unbounded_state=True,
    )


def _ar1_model() -> ModelSpec:
    def step(th, state, rng):
        a, gam = th
        return np.array([a * state[0] + gam * rng.standard_normal()])

    return ModelSpec(
        name="ar1",
        kind="chain",
        p=1,
        jumps=np.zeros((0, 1)),
        param_names=("a", "gamma"),
        transforms=("log", "log"),
        alpha_idx=(0,),
        beta_idx=(1,),
        shared_theta=False,
        time_dependent=False,
        chain_step=step,
        unbounded_state=True,
    )


def _ou2d_model() -> ModelSpec:
    # dX = A X dt + eps * sigma dB with A = [[a, b], [0, a+h]].
    def drift_fn(th, t, z):
        a, b, h, sig = th
        return np.array([a * z[0] + b * z[1], (a + h) * z[1]])

    def sigma_fn(th, t, z):
        sig = th[3]
        return sig**2 * np.eye(2)

    def drift_jac_theta(th, t, z):
        a, b, h, sig = th
        return np.array(
            [
                [z[0], z[1], 0.0, 0.0],
                [z[1], 0.0, z[1], 0.0],
            ]
        )

    def drift_jac_state(th, t, z):
        a, b, h, sig = th
        return np.array([[a, b], [0.0, a + h]])

    def sigma_jac_theta(th, t, z):
        sig = th[3]
        out = np.zeros((4, 2, 2))
        out[3] = 2.0 * sig * np.eye(2)
        return out

    return ModelSpec(
        name="ou2d",
        kind="diffusion",
        p=2,
        jumps=np.zeros((0, 2)),
        param_names=("a", "b", "h", "sigma"),
        transforms=("none", "none", "none", "log"),
        alpha_idx=(0, 1, 2),
        beta_idx=(3,),
        shared_theta=False,
        time_dependent=False,
        drift_fn=drift_fn,
        sigma_fn=sigma_fn,
        drift_jac_theta_fn=drift_jac_theta,
        drift_jac_state_fn=drift_jac_state,
        sigma_jac_theta_fn=sigma_jac_theta,
        unbounded_state=True,
    )


def build_model(name: str, config: dict | None = None) -> ModelSpec:
    """Construct a built-in model by name.

    ``config`` supplies fixed constants (e.g. T_per, mu, eta for the
    seasonal SIRS); unknown names and invalid constants raise ModelError.
    """
    config = dict(config or {})
    if name == "sir":
        return _sir_model()
    if name == "sirs_seasonal":
        return _sirs_seasonal_model(config)
    if name == "seir_ebola":
        return _seir_ebola_model(config)
    if name == "seirs_demography":
        return _seirs_demography_model(config)
    if name == "greenwood":
        return _greenwood_model()
    if name == "reed_frost":
        return _reed_frost_model()
    if name == "bd_reemerge":
        return _bd_reemerge_model()
    if name == "ar1":
        return _ar1_model()
    if name == "ou2d":
        return _ou2d_model()
    raise ModelError(f"unknown model name: {name!r} (known: {', '.join(_MODEL_NAMES)})")
