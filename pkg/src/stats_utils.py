"""
Numerical substrate: empirical distributions, special-function CDFs,
correlation estimation and Mahalanobis distances.

CDFs are thin wrappers over scipy.special with the domain checks the
pipeline relies on. All functions accept scalars or numpy arrays.
"""

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from loguru import logger
from scipy import linalg, special

from errors import ContractError, DomainError, NumericError

EIGEN_FLOOR = 1e-6


# ============================================================================
# Empirical distributions
# ============================================================================

@dataclass(frozen=True, eq=False)
class EmpiricalDistribution:
    sorted_samples: np.ndarray

    def __post_init__(self):
        samples = np.asarray(self.sorted_samples, dtype=float)
        if samples.ndim != 1 or samples.size < 1:
            raise ContractError("empirical distribution needs at least one sample")
        if not np.all(np.isfinite(samples)):
            raise ContractError("empirical distribution samples must be finite")
        if np.any(np.diff(samples) < 0):
            raise ContractError("empirical distribution samples must be sorted ascending")
        samples.setflags(write=False)
        object.__setattr__(self, 'sorted_samples', samples)

    @classmethod
    def from_samples(cls, samples):
        return cls(np.sort(np.asarray(samples, dtype=float)))

    @property
    def size(self):
        return self.sorted_samples.size


def edf_evaluate(dist, x):
    """Pseudo-observation transform rank(x)/(m+1), clamped to [1/(m+1), m/(m+1)]."""
    m = dist.size
    rank = np.searchsorted(dist.sorted_samples, x, side='right')
    u = np.clip(rank, 1, m) / (m + 1.0)
    return float(u) if np.ndim(u) == 0 else u


# ============================================================================
# Univariate CDFs and inverses
# ============================================================================

def _check_probability(p):
    p = np.asarray(p, dtype=float)
    if np.any(~((p > 0) & (p < 1))):
        raise DomainError(f"probability must lie in (0, 1), got {p[~((p > 0) & (p < 1))].ravel()[:3]}")
    return p


def _check_dof(nu, name='nu'):
    nu = np.asarray(nu, dtype=float)
    if np.any(~(nu > 0)):
        raise DomainError(f"{name} must be > 0, got {nu}")
    return nu


def _scalar(out):
    return float(out) if np.ndim(out) == 0 else out


def std_normal_cdf(x):
    return _scalar(special.ndtr(np.asarray(x, dtype=float)))


def std_normal_inv(p):
    return _scalar(special.ndtri(_check_probability(p)))


def student_t_cdf(x, nu):
    nu = _check_dof(nu)
    return _scalar(special.stdtr(nu, np.asarray(x, dtype=float)))


def student_t_inv(p, nu):
    nu = _check_dof(nu)
    return _scalar(special.stdtrit(nu, _check_probability(p)))


def chi2_cdf(x, k):
    """Regularized lower incomplete gamma P(k/2, x/2)."""
    x = np.asarray(x, dtype=float)
    if np.any(x < 0):
        raise DomainError(f"chi-square argument must be >= 0, got {x}")
    if k < 1:
        raise DomainError(f"chi-square degrees of freedom must be >= 1, got {k}")
    return _scalar(special.gammainc(k / 2.0, x / 2.0))


def f_cdf(x, d1, d2):
    """F(d1, d2) CDF through the regularized incomplete beta function."""
    x = np.asarray(x, dtype=float)
    if np.any(x < 0):
        raise DomainError(f"F argument must be >= 0, got {x}")
    _check_dof(d1, 'd1')
    _check_dof(d2, 'd2')
    with np.errstate(invalid='ignore'):
        w = np.where(np.isinf(x), 1.0, d1 * x / (d1 * x + d2))
    return _scalar(special.betainc(d1 / 2.0, d2 / 2.0, w))


# ============================================================================
# Correlation and Mahalanobis distance
# ============================================================================

@dataclass(frozen=True, eq=False)
class CorrelationMatrix:
    entries: np.ndarray

    def __post_init__(self):
        entries = np.array(self.entries, dtype=float)
        if entries.ndim != 2 or entries.shape[0] != entries.shape[1] or entries.shape[0] < 1:
            raise ContractError(f"correlation matrix must be square, got shape {entries.shape}")
        if not np.allclose(entries, entries.T, atol=1e-12):
            raise ContractError("correlation matrix must be symmetric")
        if not np.allclose(np.diag(entries), 1.0, atol=1e-9):
            raise ContractError("correlation matrix must have a unit diagonal")
        entries.setflags(write=False)
        object.__setattr__(self, 'entries', entries)

    @property
    def dimension(self):
        return self.entries.shape[0]

    @cached_property
    def cholesky(self):
        """Lower Cholesky factor; the matrix is floored to positive definite first."""
        try:
            return linalg.cholesky(_floor_eigenvalues(self.entries), lower=True)
        except linalg.LinAlgError as e:
            raise NumericError(f"Cholesky factorization failed after regularization: {e}")


def _floor_eigenvalues(sigma):
    lam_min = np.linalg.eigvalsh(sigma).min()
    if lam_min >= EIGEN_FLOOR:
        return sigma
    sigma = sigma + (EIGEN_FLOOR - lam_min) * np.eye(sigma.shape[0])
    scale = 1.0 / np.sqrt(np.diag(sigma))
    sigma = sigma * np.outer(scale, scale)
    np.fill_diagonal(sigma, 1.0)
    return sigma


def pearson_correlation(z_rows):
    """Product-moment correlation of the columns of an m x K matrix.

    Constant columns get zero off-diagonal entries (with a warning). The result
    is floored so its smallest eigenvalue is at least EIGEN_FLOOR.
    """
    z = np.asarray(z_rows, dtype=float)
    if z.ndim != 2 or z.shape[0] < 2:
        raise ContractError(f"need an m x K matrix with m >= 2, got shape {z.shape}")
    centered = z - z.mean(axis=0)
    norms = np.sqrt((centered ** 2).sum(axis=0))
    constant = norms <= 1e-300
    if np.any(constant):
        logger.warning(f"constant columns {np.flatnonzero(constant).tolist()} get zero correlation")
        norms = np.where(constant, 1.0, norms)
    scaled = centered / norms
    sigma = scaled.T @ scaled
    sigma = np.clip((sigma + sigma.T) / 2.0, -1.0, 1.0)
    np.fill_diagonal(sigma, 1.0)
    return CorrelationMatrix(_floor_eigenvalues(sigma))


def mahalanobis_sq(z, sigma):
    """Squared Mahalanobis distance z' Sigma^-1 z for a K-vector or rows of an m x K matrix."""
    z = np.asarray(z, dtype=float)
    if z.shape[-1] != sigma.dimension:
        raise ContractError(f"vector dimension {z.shape[-1]} does not match correlation dimension {sigma.dimension}")
    w = linalg.solve_triangular(sigma.cholesky, np.atleast_2d(z).T, lower=True)
    m2 = np.maximum((w ** 2).sum(axis=0), 0.0)
    return float(m2[0]) if z.ndim == 1 else m2
