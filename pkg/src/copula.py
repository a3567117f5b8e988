"""
Elliptical copulas over pseudo-observations.

Independence, Gaussian and Student-t copulas. Gaussian fitting is a Pearson
correlation of normal scores; Student-t fitting profiles the likelihood over
the degrees of freedom, re-estimating the correlation at each candidate.
CDF evaluation uses randomized quasi-Monte Carlo (Genz's separation of
variables) and reports a standard error.
"""

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from loguru import logger
from scipy import special, stats
from scipy.optimize import minimize_scalar
from scipy.stats import qmc

from errors import ContractError, FitError
from stats_utils import CorrelationMatrix, pearson_correlation, std_normal_inv, student_t_inv

INDEPENDENCE = 'independence'
GAUSSIAN = 'gaussian'
STUDENT_T = 'student_t'
KINDS = (INDEPENDENCE, GAUSSIAN, STUDENT_T)

NU_MIN, NU_MAX = 2.1, 200.0
NU_GRID = np.geomspace(NU_MIN, NU_MAX, 24)
NU_REL_TOL = 1e-2

QMC_SCRAMBLES = 8
QMC_LOG2_POINTS = 11


@dataclass(frozen=True, eq=False)
class CopulaModel:
    kind: str
    dimension: int
    sigma: Optional[CorrelationMatrix] = None
    nu: Optional[float] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractError(f"unknown copula kind {self.kind!r}")
        if self.kind == INDEPENDENCE and (self.sigma is not None or self.nu is not None):
            raise ContractError("independence copula takes no parameters")
        if self.kind != INDEPENDENCE:
            if self.sigma is None or self.sigma.dimension != self.dimension:
                raise ContractError(f"{self.kind} copula needs a {self.dimension}x{self.dimension} correlation")
        if self.kind == STUDENT_T:
            if self.nu is None or not NU_MIN <= self.nu <= NU_MAX:
                raise ContractError(f"student_t copula needs nu in [{NU_MIN}, {NU_MAX}], got {self.nu}")
        elif self.nu is not None:
            raise ContractError(f"{self.kind} copula takes no nu")

    def normal_scores(self, u):
        """Marginal inverse transform: Phi^-1(u) or t_nu^-1(u)."""
        if self.kind == STUDENT_T:
            return student_t_inv(u, self.nu)
        return std_normal_inv(u)

    def to_dict(self):
        return {
            'kind': self.kind,
            'K': self.dimension,
            'sigma': None if self.sigma is None else self.sigma.entries.ravel().tolist(),
            'nu': self.nu,
        }

    @classmethod
    def from_dict(cls, data):
        K = data['K']
        sigma = None if data.get('sigma') is None else CorrelationMatrix(np.asarray(data['sigma']).reshape(K, K))
        return cls(data['kind'], K, sigma, data.get('nu'))


def _check_u(u_rows):
    u = np.asarray(u_rows, dtype=float)
    if u.ndim != 2:
        raise ContractError(f"pseudo-observations must be an m x K matrix, got shape {u.shape}")
    if not np.all((u > 0) & (u < 1)):
        raise ContractError("pseudo-observations must lie strictly inside (0, 1)")
    m, K = u.shape
    if m < K + 2:
        raise ContractError(f"need m >= K + 2 pseudo-observations, got m={m}, K={K}")
    return u


# ============================================================================
# Fitting
# ============================================================================

def fit_independence(u_rows):
    return CopulaModel(INDEPENDENCE, np.asarray(u_rows).shape[1])


def fit_gaussian(u_rows):
    u = _check_u(u_rows)
    sigma = pearson_correlation(std_normal_inv(u))
    return CopulaModel(GAUSSIAN, u.shape[1], sigma)


def _t_profile(u, nu):
    """(log-likelihood, correlation) of a t copula with nu dof, correlation re-fitted."""
    z = special.stdtrit(nu, u)
    sigma = pearson_correlation(z)
    joint = stats.multivariate_t(shape=sigma.entries, df=nu).logpdf(z)
    margins = stats.t.logpdf(z, nu).sum(axis=1)
    return float(np.sum(joint - margins)), sigma


def fit_student_t(u_rows):
    """Profile-likelihood fit of nu on a log grid over [2.1, 200], refined by bounded search on log nu."""
    u = _check_u(u_rows)
    if np.all(u == u[0]):
        raise FitError("degenerate t-copula likelihood: all pseudo-observation rows are identical")
    K = u.shape[1]
    if K == 1:
        # the copula of a single margin carries no information on nu
        return CopulaModel(STUDENT_T, 1, CorrelationMatrix(np.eye(1)), NU_MAX)

    profile = np.array([_t_profile(u, nu)[0] for nu in NU_GRID])
    if not np.any(np.isfinite(profile)):
        raise FitError("t-copula likelihood is not finite for any nu on the grid")
    best = int(np.nanargmax(np.where(np.isfinite(profile), profile, -np.inf)))
    lo = math.log(NU_GRID[max(best - 1, 0)])
    hi = math.log(NU_GRID[min(best + 1, NU_GRID.size - 1)])
    result = minimize_scalar(lambda log_nu: -_t_profile(u, math.exp(log_nu))[0], bounds=(lo, hi),
                             method='bounded', options={'xatol': NU_REL_TOL / 2})
    nu = float(np.clip(math.exp(result.x), NU_MIN, NU_MAX))
    if -result.fun < profile[best]:
        nu = float(NU_GRID[best])
    _, sigma = _t_profile(u, nu)
    logger.info(f"Fitted t copula on {u.shape[0]} x {K} pseudo-observations: nu={nu:.2f}")
    return CopulaModel(STUDENT_T, K, sigma, nu)


# ============================================================================
# CDF evaluation
# ============================================================================

@dataclass(frozen=True)
class CdfEstimate:
    value: float
    std_error: float

    def __float__(self):
        return self.value


def _genz_product(b, chol, w):
    """Separation-of-variables integrand for P(L y <= b) at QMC points w (n x K-1)."""
    n, K = w.shape[0], chol.shape[0]
    b = np.broadcast_to(b, (n, K))
    y = np.zeros((n, K))
    e = special.ndtr(b[:, 0] / chol[0, 0])
    f = e.copy()
    for i in range(1, K):
        y[:, i - 1] = special.ndtri(np.clip(w[:, i - 1] * e, 1e-300, 1 - 1e-16))
        e = special.ndtr((b[:, i] - y[:, :i] @ chol[i, :i]) / chol[i, i])
        f *= e
    return f


def copula_cdf(model, u, seed=0):
    """C(u) for the fitted copula; exact for independence and K=1, RQMC otherwise."""
    u = np.asarray(u, dtype=float).ravel()
    if u.size != model.dimension:
        raise ContractError(f"point has dimension {u.size}, copula has {model.dimension}")
    if not np.all((u > 0) & (u < 1)):
        raise ContractError("copula_cdf needs u strictly inside (0, 1)")
    if model.kind == INDEPENDENCE:
        return CdfEstimate(float(np.prod(u)), 0.0)
    if model.dimension == 1:
        return CdfEstimate(float(u[0]), 0.0)

    chol = model.sigma.cholesky
    K = model.dimension
    b = model.normal_scores(u)
    extra = 1 if model.kind == STUDENT_T else 0
    rng = np.random.default_rng(seed)
    means = []
    for _ in range(QMC_SCRAMBLES):
        w = qmc.Sobol(K - 1 + extra, scramble=True, seed=rng).random_base2(QMC_LOG2_POINTS)
        if extra:
            # radial chi variable for the t scale mixture
            s = np.sqrt(2.0 * special.gammaincinv(model.nu / 2.0, np.clip(w[:, 0], 1e-16, 1 - 1e-16)) / model.nu)
            f = _genz_product(b[None, :] * s[:, None], chol, w[:, 1:])
        else:
            f = _genz_product(b, chol, w)
        means.append(f.mean())
    means = np.asarray(means)
    return CdfEstimate(float(means.mean()), float(means.std(ddof=1) / math.sqrt(QMC_SCRAMBLES)))
