"""
Conformal calibration of quantile ranges.

Split conformal prediction for scalar scores, plus a bounded, derivative-free
variant of copula-based conformal calibration for multi-step targets: per-step
score levels u_tau are chosen so the adjustment vector epsilon is as small as
possible while the whole target window stays jointly covered with probability
at least 1 - alpha.
"""

import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from loguru import logger

from errors import CalibrationError, ContractError

UNIFORM_LEVEL = 'uniform_level'
BOUNDED_COPULA = 'bounded_copula'
METHODS = (UNIFORM_LEVEL, BOUNDED_COPULA)

BISECTION_TOL = 1e-4
MAX_SWEEPS = 50
SWEEP_REL_TOL = 1e-3
_CEIL_SLACK = 1e-9


@dataclass(frozen=True, eq=False)
class NonconformityScores:
    """n_cal x t matrix of scores for one target channel."""
    scores: np.ndarray

    def __post_init__(self):
        scores = np.array(self.scores, dtype=float)
        if scores.ndim == 1:
            scores = scores[:, None]
        if scores.ndim != 2 or scores.shape[0] < 1:
            raise ContractError(f"scores must be an n_cal x t matrix with n_cal >= 1, got shape {scores.shape}")
        if not np.all(np.isfinite(scores)):
            raise ContractError("nonconformity scores must be finite")
        scores.setflags(write=False)
        object.__setattr__(self, 'scores', scores)

    @property
    def n_cal(self):
        return self.scores.shape[0]

    @property
    def horizon(self):
        return self.scores.shape[1]

    @classmethod
    def stack(cls, ranges, targets, channel):
        """Scores of one channel over a calibration set of (range, y) pairs."""
        rows = []
        for qr, y in zip(ranges, targets):
            pos = qr.channels.index(channel)
            rows.append(ncf_cqr(qr, y)[:, pos])
        return cls(np.vstack(rows))


@dataclass(frozen=True)
class ConformalModel:
    epsilon: Tuple[float, ...]
    alpha: float
    channel: int
    method: str
    calib_size: int
    achieved_coverage: float
    group_label: Optional[str] = None
    seed: int = 0
    levels: Tuple[float, ...] = ()
    infeasible: bool = False

    def __post_init__(self):
        object.__setattr__(self, 'epsilon', tuple(float(e) for e in self.epsilon))
        object.__setattr__(self, 'levels', tuple(float(u) for u in self.levels))
        if self.method not in METHODS:
            raise ContractError(f"unknown calibration method {self.method!r}")

    @property
    def horizon(self):
        return len(self.epsilon)

    def to_dict(self):
        return {
            'alpha': self.alpha,
            'channel': self.channel,
            'group': self.group_label,
            'method': self.method,
            'epsilon': list(self.epsilon),
            'levels': list(self.levels),
            'achieved_coverage': self.achieved_coverage,
            'calib_size': self.calib_size,
            'seed': self.seed,
            'infeasible': self.infeasible,
        }

    @classmethod
    def from_dict(cls, data):
        return cls(tuple(data['epsilon']), data['alpha'], data['channel'], data['method'],
                   data['calib_size'], data['achieved_coverage'], group_label=data.get('group'),
                   seed=data.get('seed', 0), levels=tuple(data.get('levels', ())),
                   infeasible=data.get('infeasible', False))


@dataclass(frozen=True, eq=False)
class ConformalizedRegion:
    """Conformalized band q_l - eps, q_u + eps; keeps the raw EQR alongside."""
    lower: np.ndarray
    upper: np.ndarray
    eqr_lower: np.ndarray
    eqr_upper: np.ndarray
    channels: Tuple[int, ...] = (0,)

    def __post_init__(self):
        for name in ('lower', 'upper', 'eqr_lower', 'eqr_upper'):
            arr = np.array(getattr(self, name), dtype=float)
            if arr.ndim == 1:
                arr = arr[:, None]
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if np.any(self.lower > self.upper):
            raise ContractError("conformalized region has lower > upper")
        object.__setattr__(self, 'channels', tuple(int(c) for c in self.channels))

    @property
    def width(self):
        return self.upper - self.lower

    @property
    def horizon(self):
        return self.lower.shape[0]

    def column(self, channel):
        if channel not in self.channels:
            raise ContractError(f"channel {channel} not in region channels {self.channels}")
        pos = self.channels.index(channel)
        return ConformalizedRegion(self.lower[:, pos], self.upper[:, pos], self.eqr_lower[:, pos],
                                   self.eqr_upper[:, pos], (channel,))

    def covers(self, y):
        y = _as_matrix(y)
        return bool(np.all((self.lower <= y) & (y <= self.upper)))

    def eqr_covers(self, y):
        y = _as_matrix(y)
        return bool(np.all((self.eqr_lower <= y) & (y <= self.eqr_upper)))


def _as_matrix(y):
    y = np.asarray(y, dtype=float)
    return y[:, None] if y.ndim == 1 else y


# ============================================================================
# Scores and quantiles
# ============================================================================

def ncf_cqr(qrange, y):
    """CQR score max(q_l - y, y - q_u) per cell: < 0 inside, 0 on a bound, > 0 outside."""
    y = _as_matrix(y)
    if y.shape != qrange.lower.shape:
        raise ContractError(f"target shape {y.shape} does not match range shape {qrange.lower.shape}")
    return np.maximum(qrange.lower - y, y - qrange.upper)


def _order_index(n, level):
    """1-based order statistic ceil((n + 1) * level)."""
    return max(1, math.ceil((n + 1) * level - _CEIL_SLACK))


def conformal_quantile(scores, alpha):
    """ceil((n+1)(1-alpha))-th smallest score, +inf when that exceeds n."""
    scores = np.asarray(scores, dtype=float).ravel()
    if scores.size == 0:
        raise ContractError("conformal_quantile needs at least one score")
    if not 0 < alpha < 1:
        raise ContractError(f"alpha must lie in (0, 1), got {alpha}")
    k = _order_index(scores.size, 1 - alpha)
    if k > scores.size:
        return math.inf
    return float(np.partition(scores, k - 1)[k - 1])


# ============================================================================
# Multi-step calibration
# ============================================================================

class _JointSearch:
    """Search state over per-step order indices k_tau (1-based, n1 + 1 = +inf)."""

    def __init__(self, cal1, cal2, alpha):
        self.sorted1 = np.sort(cal1, axis=0)
        self.cal2 = cal2
        self.n1, self.t = cal1.shape
        self.n2 = cal2.shape[0]
        self.required = _order_index(self.n2, 1 - alpha)
        self.k_min = _order_index(self.n1, alpha / (2 * self.t))

    def index_of(self, u):
        return min(_order_index(self.n1, u), self.n1 + 1)

    def epsilon(self, k):
        k = np.asarray(k)
        padded = np.vstack([self.sorted1, np.full((1, self.t), np.inf)])
        return padded[k - 1, np.arange(self.t)]

    def covered(self, k):
        return np.all(self.cal2 <= self.epsilon(k)[None, :], axis=1)

    def feasible(self, k):
        return int(self.covered(k).sum()) >= self.required

    def level(self, k):
        return np.asarray(k, dtype=float) / (self.n1 + 1)


def _uniform_search(search):
    """Bisection on one shared level u in [alpha/(2t), 1)."""
    lo = search.k_min / (search.n1 + 1)
    hi = 1.0 - 1e-12
    shared = lambda u: np.full(search.t, search.index_of(u))
    if search.feasible(shared(lo)):
        return shared(lo), lo
    if not search.feasible(shared(hi)):
        return None, hi
    while hi - lo > BISECTION_TOL:
        mid = 0.5 * (lo + hi)
        if search.feasible(shared(mid)):
            hi = mid
        else:
            lo = mid
    return shared(hi), hi


def _coordinate_descent(search, k):
    """Lower individual k_tau while joint validity on cal2 holds.

    Each sweep visits steps in order of decreasing epsilon and moves each one to
    the smallest feasible index given the others. Only improving feasible moves
    are taken, so the objective never increases.
    """
    k = k.copy()
    total = _finite_sum(search.epsilon(k))
    for sweep in range(MAX_SWEEPS):
        before = total
        for tau in np.argsort(-search.epsilon(k), kind='stable'):
            k[tau] = _lowest_feasible(search, k, tau)
        total = _finite_sum(search.epsilon(k))
        improvement = before - total
        logger.debug(f"sweep {sweep}: sum(eps) {before:.6g} -> {total:.6g}")
        if improvement <= SWEEP_REL_TOL * max(abs(before), 1e-300):
            break
    return k


def _lowest_feasible(search, k, tau):
    others = k.copy()
    others[tau] = search.n1 + 1
    covered_by_others = search.covered(others)
    budget = int(covered_by_others.sum()) - search.required
    if budget < 0:
        return k[tau]
    # rows covered elsewhere, sorted by their step-tau score
    s = np.sort(search.cal2[covered_by_others, tau])
    candidates = np.arange(search.k_min, k[tau] + 1)
    if candidates.size == 0:
        return k[tau]
    thresholds = np.append(search.sorted1[:, tau], np.inf)[candidates - 1]
    lost = s.size - np.searchsorted(s, thresholds, side='right')
    ok = candidates[lost <= budget]
    return int(ok.min()) if ok.size else int(k[tau])


def _finite_sum(eps):
    return float(np.sum(np.where(np.isfinite(eps), eps, 0.0))) + float(np.sum(~np.isfinite(eps))) * 1e300


def calibrate_copula_cpts(cal_scores, alpha, split_seed=0, method=BOUNDED_COPULA, channel=0, group_label=None):
    """Per-step adjustments epsilon with joint 1 - alpha coverage.

    Scores are split 50/50 into cal1 (per-step score distributions) and cal2
    (joint validity check). A single target step reduces to split conformal
    prediction on all scores.
    """
    if not isinstance(cal_scores, NonconformityScores):
        cal_scores = NonconformityScores(cal_scores)
    if method not in METHODS:
        raise CalibrationError(f"unknown calibration method {method!r}, expected one of {METHODS}")
    if not 0 < alpha < 1:
        raise CalibrationError(f"alpha must lie in (0, 1), got {alpha}")
    n, t = cal_scores.scores.shape
    if n < 2.0 / alpha:
        raise CalibrationError(f"calibration set of {n} series is too small for alpha={alpha}; need >= {math.ceil(2 / alpha)}")

    if t == 1:
        scores = cal_scores.scores[:, 0]
        eps = conformal_quantile(scores, alpha)
        coverage = float(np.mean(scores <= eps))
        return ConformalModel((eps,), alpha, channel, method, n, coverage, group_label=group_label,
                              seed=split_seed, levels=(1 - alpha,), infeasible=math.isinf(eps))

    order = np.random.default_rng(split_seed).permutation(n)
    cal1 = cal_scores.scores[order[:n // 2]]
    cal2 = cal_scores.scores[order[n // 2:]]
    search = _JointSearch(cal1, cal2, alpha)

    k, u_star = _uniform_search(search)
    if k is None:
        logger.warning(f"channel {channel} group {group_label}: no feasible level, returning +inf adjustments")
        return ConformalModel((math.inf,) * t, alpha, channel, method, n, 1.0, group_label=group_label,
                              seed=split_seed, levels=(1.0,) * t, infeasible=True)
    if method == BOUNDED_COPULA:
        k = _coordinate_descent(search, k)

    eps = search.epsilon(k)
    coverage = float(search.covered(k).mean())
    infeasible = bool(np.any(np.isinf(eps)))
    if infeasible:
        logger.warning(f"channel {channel} group {group_label}: calibration set too small for finite adjustments")
    logger.info(f"Calibrated channel {channel} group {group_label} ({method}): "
                f"u*={u_star:.4f}, sum(eps)={_finite_sum(eps):.4g}, cal2 coverage={coverage:.4f}")
    return ConformalModel(tuple(eps), alpha, channel, method, n, coverage, group_label=group_label,
                          seed=split_seed, levels=tuple(search.level(k)), infeasible=infeasible)


# ============================================================================
# Regions and coverage
# ============================================================================

def conformalize(qrange, model):
    """Widen (or shrink) the quantile range by epsilon at each step.

    `model` is a single ConformalModel (its channel is selected from the range)
    or a sequence of models covering every channel of the range.
    """
    models = [model] if isinstance(model, ConformalModel) else list(model)
    by_channel = {m.channel: m for m in models}
    channels = [c for c in qrange.channels if c in by_channel]
    if not channels:
        raise ContractError(f"no conformal model for range channels {qrange.channels}")
    if len(models) > 1 and len(channels) != len(qrange.channels):
        missing = [c for c in qrange.channels if c not in by_channel]
        raise ContractError(f"no conformal model for channels {missing}")
    cols = [qrange.channels.index(c) for c in channels]
    eps = np.column_stack([np.asarray(by_channel[c].epsilon) for c in channels])
    if eps.shape[0] != qrange.horizon:
        raise ContractError(f"conformal model horizon {eps.shape[0]} != range horizon {qrange.horizon}")
    lo, hi = qrange.lower[:, cols], qrange.upper[:, cols]
    lower, upper = lo - eps, hi + eps
    # negative adjustments may not invert the band
    crossed = lower > upper
    if np.any(crossed):
        mid = 0.5 * (lo + hi)
        lower = np.where(crossed, mid, lower)
        upper = np.where(crossed, mid, upper)
    return ConformalizedRegion(lower, upper, lo, hi, tuple(channels))


def joint_coverage(regions, targets):
    """Fraction of series whose target lies inside its region at every step."""
    regions, targets = list(regions), list(targets)
    if not regions:
        raise ContractError("joint_coverage needs at least one region")
    if len(regions) != len(targets):
        raise ContractError(f"{len(regions)} regions for {len(targets)} targets")
    for r, y in zip(regions, targets):
        if _as_matrix(y).shape != r.lower.shape:
            raise ContractError(f"target shape {_as_matrix(y).shape} does not match region shape {r.lower.shape}")
    return float(np.mean([r.covers(y) for r, y in zip(regions, targets)]))
