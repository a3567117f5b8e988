"""
Cubic B-spline representation of distance series.

A target window of t steps is projected onto K clamped cubic B-splines with
uniformly spaced interior knots. The coefficient vector is the low-dimensional
summary the anomaly model works with; K is picked at the elbow of the total
residual-sum-of-squares curve.
"""

from dataclasses import dataclass
from functools import cached_property
from typing import Tuple

import numpy as np
import pandas as pd
from loguru import logger
from scipy import linalg
from scipy.interpolate import BSpline

from errors import ContractError, NumericError

DEGREE = 3
ELBOW_RHO = 0.05
_RANK_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class BSplineBasis:
    K: int
    t: int
    knots: np.ndarray
    design: np.ndarray
    degree: int = DEGREE

    @cached_property
    def _qr(self):
        q, r = linalg.qr(self.design, mode='economic')
        diag = np.abs(np.diag(r))
        if diag.min() <= _RANK_TOL * diag.max():
            raise NumericError(f"B-spline design ({self.t} x {self.K}) is rank deficient")
        return q, r

    def reconstruct(self, beta):
        return self.design @ np.asarray(beta, dtype=float)

    def support(self, k):
        """Integer steps where basis function k is nonzero."""
        return np.flatnonzero(self.design[:, k] > 0)


@dataclass(frozen=True, eq=False)
class CoefficientVector:
    beta: np.ndarray
    rss: float

    def __post_init__(self):
        beta = np.array(self.beta, dtype=float)
        if not np.all(np.isfinite(beta)):
            raise NumericError("spline coefficients are not finite")
        beta.setflags(write=False)
        object.__setattr__(self, 'beta', beta)
        object.__setattr__(self, 'rss', float(self.rss))


def clamped_knots(K, t):
    """Knot vector over [0, t-1]: endpoints repeated 4 times, K-4 uniform interior knots."""
    interior = np.linspace(0.0, t - 1.0, K - DEGREE + 1)[1:-1]
    return np.concatenate([np.zeros(DEGREE + 1), interior, np.full(DEGREE + 1, t - 1.0)])


def build_basis(K, t):
    if t < DEGREE + 1:
        raise ContractError(f"target length {t} is too short for a cubic basis (need >= {DEGREE + 1})")
    if not DEGREE + 1 <= K <= t:
        raise ContractError(f"basis count K={K} must lie in [{DEGREE + 1}, {t}]")
    knots = clamped_knots(K, t)
    # one spline per unit coefficient vector gives every basis function at once
    design = BSpline(knots, np.eye(K), DEGREE, extrapolate=True)(np.arange(t, dtype=float))
    design = np.where(np.abs(design) < 1e-15, 0.0, design)
    knots.setflags(write=False)
    design.setflags(write=False)
    return BSplineBasis(K, t, knots, design)


def fit_coefficients_batch(basis, deltas):
    """Least-squares coefficients for the columns of a t x n matrix; returns (K x n betas, n rss)."""
    deltas = np.asarray(deltas, dtype=float)
    if deltas.ndim == 1:
        deltas = deltas[:, None]
    if deltas.shape[0] != basis.t:
        raise ContractError(f"series length {deltas.shape[0]} does not match basis length {basis.t}")
    q, r = basis._qr
    beta = linalg.solve_triangular(r, q.T @ deltas, lower=False)
    resid = deltas - basis.design @ beta
    return beta, (resid ** 2).sum(axis=0)


def fit_coefficients(basis, delta):
    beta, rss = fit_coefficients_batch(basis, delta)
    return CoefficientVector(beta[:, 0], rss[0])


# ============================================================================
# Elbow selection
# ============================================================================

@dataclass(frozen=True, eq=False)
class RssCurve:
    """Total RSS per candidate K; `total_rss` is the running-minimum envelope of `raw_rss`."""
    candidates: Tuple[int, ...]
    raw_rss: np.ndarray
    total_rss: np.ndarray

    def to_frame(self):
        return pd.DataFrame({'K': list(self.candidates), 'total_rss': self.total_rss, 'raw_rss': self.raw_rss})


def _elbow(candidates, envelope, rho):
    scale = max(envelope[0], 1e-300)
    for i in range(1, len(candidates)):
        prev = envelope[i - 1]
        if prev <= 1e-12 * scale:
            return candidates[i - 1]
        if (prev - envelope[i]) / prev < rho:
            return candidates[i - 1]
    return candidates[-1]


def select_K(deltas, candidates, rho=ELBOW_RHO):
    """Pick K at the first flattening of the RSS curve.

    K* is the last candidate before the first relative improvement below rho.
    Uniform knot grids for different K are not nested, so the raw curve can
    wiggle; the decision uses its running minimum.
    On white noise the first drop is already small, so K* is the smallest
    candidate rather than the one the small drop lands on.
    """
    deltas = [np.asarray(d, dtype=float) for d in deltas]
    candidates = [int(k) for k in candidates]
    if not deltas or not candidates:
        raise ContractError("select_K needs at least one series and one candidate")
    if candidates != sorted(set(candidates)):
        raise ContractError(f"K candidates must be strictly ascending, got {candidates}")
    matrix = np.column_stack(deltas)
    t = matrix.shape[0]
    raw = np.array([fit_coefficients_batch(build_basis(K, t), matrix)[1].sum() for K in candidates])
    envelope = np.minimum.accumulate(raw)
    k_star = _elbow(candidates, envelope, rho)
    logger.info(f"Elbow over K={candidates[0]}..{candidates[-1]} on {len(deltas)} series: K*={k_star}")
    return k_star, RssCurve(tuple(candidates), raw, envelope)
