"""Estimate containers and confidence ellipsoids."""

from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .models import Theta


@dataclass
class Ellipsoid:
    """Level set {theta : (theta-center)^T cov^-1 (theta-center) <= r2}."""

    center: np.ndarray
    cov: np.ndarray
    level: float
    r2: float  # chi-square quantile at the requested level
    axes: np.ndarray  # unit eigenvectors, columns
    radii: np.ndarray  # semi-axis lengths sqrt(r2 * eigenvalue)

    def contains(self, theta):
        d = np.asarray(theta, dtype=float) - self.center
        return float(d @ np.linalg.solve(self.cov, d)) <= self.r2 + 1e-12

    def boundary(self, pair=(0, 1), num=256):
        """2-D boundary polyline for the selected coordinate pair."""
        i, j = pair
        sub = self.cov[np.ix_([i, j], [i, j])]
        vals, vecs = np.linalg.eigh(sub)
        phi = np.linspace(0.0, 2.0 * np.pi, num)
        circ = np.stack([np.cos(phi), np.sin(phi)])
        pts = (vecs * np.sqrt(self.r2 * vals)) @ circ
        return np.column_stack([self.center[i] + pts[0], self.center[j] + pts[1]])


@dataclass
class EstimateResult:
    """Parameter estimate with its asymptotic covariance.

    ``rate_tag`` names the asymptotic regime the covariance is scaled by
    ('sqrt_N' for 1/N, 'sqrt_n' for 1/n, 'eps' for eps^2, 'supercritical'
    for the non-Gaussian m^-n/2 branching rate).  Coordinates that are
    undefined at the data boundary are flagged instead of raising.
    """

    theta: Theta
    cov: np.ndarray = None
    rate_tag: str = ""
    diagnostics: dict = field(default_factory=dict)
    flags: dict = field(default_factory=dict)
    ellipsoid: Ellipsoid = None

    @property
    def values(self):
        return self.theta.values

    @property
    def names(self):
        return self.theta.names

    def se(self):
        if self.cov is None:
            return None
        return np.sqrt(np.clip(np.diag(self.cov), 0.0, None))

    def __getitem__(self, name):
        return self.theta.as_dict()[name]


def chi2_quantile(k, level):
    """Quantile of the chi-square(k) law by numerical CDF inversion."""
    return float(stats.chi2.ppf(level, df=k))


def confidence_ellipsoid(est: EstimateResult, level=0.95) -> Ellipsoid:
    """Theoretical confidence ellipsoid at the given level.

    Requires a positive-definite covariance in the estimate; the returned
    object carries axes/radii from the eigendecomposition and can emit a
    2-D boundary polyline for plotting.
    """
    if est.cov is None:
        raise ValueError("estimate has no covariance")
    cov = np.asarray(est.cov, dtype=float)
    vals, vecs = np.linalg.eigh(cov)
    if vals.min() <= 0:
        raise ValueError("covariance must be positive definite")
    k = cov.shape[0]
    r2 = chi2_quantile(k, level)
    ell = Ellipsoid(
        center=est.values.copy(),
        cov=cov,
        level=float(level),
        r2=r2,
        axes=vecs,
        radii=np.sqrt(r2 * vals),
    )
    est.ellipsoid = ell
    return ell
