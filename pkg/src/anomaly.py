"""
Anomaly scoring on top of conformalized regions.

Offline, a set of anomaly-free series is pushed through
predict -> conformalize -> distance series -> B-spline coefficients, and the
coefficient distribution is summarised by per-coefficient empirical CDFs plus a
Gaussian and a Student-t copula. At deployment a new target gets two scores,
a_G and a_S, which are the chi-square and F CDF values of the squared
Mahalanobis distance of its copula-transformed coefficients.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional

import numpy as np
from loguru import logger

from conformal import ConformalizedRegion, conformalize
from copula import CopulaModel, fit_gaussian, fit_student_t
from errors import CalibrationError, CocaiError, ContractError, DegenerateIntervalError, FitError, ValidationError
from splines import ELBOW_RHO, build_basis, fit_coefficients, fit_coefficients_batch, select_K
from stats_utils import EmpiricalDistribution, chi2_cdf, edf_evaluate, f_cdf, mahalanobis_sq

FORMAT_TAG = 'cocai-anomaly/1'
DEFAULT_THRESHOLD = 0.9
DEFAULT_MIN_WIDTH = 1e-6
DEGENERATE_WIDTH = 1e-9


@dataclass(frozen=True, eq=False)
class DistanceSeries:
    delta: np.ndarray
    channel: int = 0

    def __post_init__(self):
        delta = np.array(self.delta, dtype=float).ravel()
        if not np.all(np.isfinite(delta)):
            raise ContractError(f"channel {self.channel}: distance series must be finite")
        delta.setflags(write=False)
        object.__setattr__(self, 'delta', delta)


@dataclass(frozen=True, eq=False)
class AnomalyModel:
    channel: int
    group_label: Optional[str]
    basis: object
    edfs: tuple
    gaussian: CopulaModel
    student_t: CopulaModel
    calib_size: int
    alpha: float = 0.1
    min_width: float = DEFAULT_MIN_WIDTH
    rss_curve: object = field(default=None, repr=False)

    def __post_init__(self):
        object.__setattr__(self, 'edfs', tuple(self.edfs))
        K = self.basis.K
        if len(self.edfs) != K:
            raise ContractError(f"{len(self.edfs)} coefficient EDFs for K={K}")
        if self.gaussian.dimension != K or self.student_t.dimension != K:
            raise ContractError(f"copula dimensions ({self.gaussian.dimension}, {self.student_t.dimension}) != K={K}")
        if self.calib_size < K + 2:
            raise ContractError(f"calibration size {self.calib_size} < K + 2 = {K + 2}")

    @property
    def K(self):
        return self.basis.K

    @property
    def nu(self):
        return self.student_t.nu

    def to_dict(self):
        return {
            'format_version': FORMAT_TAG,
            'channel': self.channel,
            'group': self.group_label,
            'alpha': self.alpha,
            'min_width': self.min_width,
            'K': self.basis.K,
            't': self.basis.t,
            'knots': self.basis.knots.tolist(),
            'edf_samples': [edf.sorted_samples.tolist() for edf in self.edfs],
            'gaussian': self.gaussian.to_dict(),
            'student_t': self.student_t.to_dict(),
            'm': self.calib_size,
        }

    @classmethod
    def from_dict(cls, data):
        if data.get('format_version') != FORMAT_TAG:
            raise ValidationError(f"unsupported anomaly model format {data.get('format_version')!r}, expected {FORMAT_TAG}")
        basis = build_basis(data['K'], data['t'])
        if not np.allclose(basis.knots, data['knots'], rtol=0, atol=1e-12):
            raise ValidationError(f"anomaly model knots for channel {data['channel']} do not match a clamped uniform grid")
        edfs = [EmpiricalDistribution(np.asarray(s, dtype=float)) for s in data['edf_samples']]
        return cls(data['channel'], data.get('group'), basis, edfs, CopulaModel.from_dict(data['gaussian']),
                   CopulaModel.from_dict(data['student_t']), data['m'], alpha=data.get('alpha', 0.1),
                   min_width=data.get('min_width', DEFAULT_MIN_WIDTH))


@dataclass(frozen=True, eq=False)
class AnomalyReport:
    series_id: str
    channel: int
    group_label: Optional[str]
    a_gaussian: float
    a_student: float
    threshold: float
    flagged: bool
    covered: bool
    audit: Dict[str, object]
    # kept in memory for interval tables and plots, never serialized
    region: Optional[ConformalizedRegion] = field(default=None, repr=False)
    y: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def flagged_gaussian(self):
        return self.a_gaussian > self.threshold

    @property
    def flagged_student(self):
        return self.a_student > self.threshold

    def to_dict(self):
        return {
            'series_id': self.series_id,
            'channel': self.channel,
            'group': self.group_label,
            'a_gaussian': self.a_gaussian,
            'a_student': self.a_student,
            'threshold': self.threshold,
            'flagged': self.flagged,
            'covered': self.covered,
            'audit': {k: np.asarray(v).tolist() for k, v in self.audit.items()},
        }

    @classmethod
    def from_dict(cls, data):
        audit = {k: np.asarray(v, dtype=float) for k, v in data.get('audit', {}).items()}
        return cls(data['series_id'], data['channel'], data.get('group'), data['a_gaussian'], data['a_student'],
                   data['threshold'], data['flagged'], data['covered'], audit)


@dataclass(frozen=True)
class SkipRecord:
    series_id: str
    channel: int
    reason: str


@dataclass
class BatchResult:
    reports: List[AnomalyReport]
    skipped: List[SkipRecord]
    summary: Dict[str, object]


# ============================================================================
# Distance series
# ============================================================================

def apply_min_width(region, min_width=DEFAULT_MIN_WIDTH):
    """Widen cells narrower than `min_width` symmetrically about their midpoint."""
    if min_width <= 0:
        return region
    narrow = region.width < min_width
    if not np.any(narrow):
        return region
    mid = 0.5 * (region.lower + region.upper)
    lower = np.where(narrow, mid - min_width / 2, region.lower)
    upper = np.where(narrow, mid + min_width / 2, region.upper)
    return ConformalizedRegion(lower, upper, region.eqr_lower, region.eqr_upper, region.channels)


def distance_series(region, y, channel=None):
    """delta = d / w + 0.5: 0 at the interval midpoint, 0.5 on a bound, > 0.5 outside."""
    channel = region.channels[0] if channel is None else channel
    if region.lower.shape[1] != 1:
        region = region.column(channel)
    lower, upper = region.lower[:, 0], region.upper[:, 0]
    y = np.asarray(y, dtype=float).ravel()
    if y.shape != lower.shape:
        raise ContractError(f"target length {y.size} does not match region horizon {lower.size}")
    if not (np.all(np.isfinite(lower)) and np.all(np.isfinite(upper))):
        raise ContractError(f"channel {channel}: region has infinite bounds (infeasible conformal model)")
    width = upper - lower
    if np.any(width <= DEGENERATE_WIDTH):
        steps = np.flatnonzero(width <= DEGENERATE_WIDTH).tolist()
        raise DegenerateIntervalError(f"channel {channel}: interval width <= {DEGENERATE_WIDTH} at steps {steps[:10]}; "
                                      f"set a minimum width floor with --min-width")
    d = np.maximum(lower - y, y - upper)
    return DistanceSeries(d / width + 0.5, channel)


# ============================================================================
# Offline calibration
# ============================================================================

def conformalized_target(series, forecaster, conformal_model, channel, min_width):
    qrange, y = forecaster.predict_series(series, conformal_model.alpha)
    pos = qrange.channels.index(channel)
    region = apply_min_width(conformalize(qrange.column(channel), conformal_model), min_width)
    return region, y[:, pos]


def calibrate_anomaly(ad_series, forecaster, conformal_model, channel, K_candidates, min_width=DEFAULT_MIN_WIDTH,
                      k=None, rho=ELBOW_RHO):
    """Fit the anomaly model of one (channel, group) on anomaly-free series.

    With `k` set the elbow search is skipped and that basis count is used.
    """
    ad_series = list(ad_series)
    group = conformal_model.group_label
    if not ad_series:
        raise CalibrationError(f"channel {channel} group {group}: anomaly calibration set empty")
    if conformal_model.infeasible:
        raise CalibrationError(f"channel {channel} group {group}: conformal model is infeasible (infinite adjustments)")
    t = conformal_model.horizon
    candidates = [int(c) for c in ([k] if k is not None else K_candidates) if int(c) <= t]
    if not candidates:
        raise CalibrationError(f"no K candidate fits the target length {t}: {list(K_candidates)}")
    m = len(ad_series)
    if m < max(candidates) + 2:
        raise CalibrationError(f"channel {channel} group {group}: {m} anomaly calibration series, "
                               f"need >= {max(candidates) + 2} for K up to {max(candidates)}")

    deltas, offenders = [], []
    for s in ad_series:
        try:
            region, y = conformalized_target(s, forecaster, conformal_model, channel, min_width)
            deltas.append(distance_series(region, y, channel).delta)
        except DegenerateIntervalError:
            offenders.append(s.series_id)
    if offenders:
        raise DegenerateIntervalError(f"channel {channel} group {group}: degenerate intervals for series {offenders[:20]}"
                                      f"{' ...' if len(offenders) > 20 else ''}; raise --min-width")

    if k is not None:
        K, curve = int(k), None
    else:
        K, curve = select_K(deltas, candidates, rho)
    basis = build_basis(K, t)
    betas, _ = fit_coefficients_batch(basis, np.column_stack(deltas))
    betas = betas.T
    flat = np.flatnonzero(np.ptp(betas, axis=0) <= 1e-12)
    if flat.size:
        raise FitError(f"channel {channel} group {group}: zero-variance spline coefficients {flat.tolist()}")

    edfs = [EmpiricalDistribution.from_samples(betas[:, j]) for j in range(K)]
    u = np.column_stack([edf_evaluate(edfs[j], betas[:, j]) for j in range(K)])
    model = AnomalyModel(channel, group, basis, edfs, fit_gaussian(u), fit_student_t(u), m,
                         alpha=conformal_model.alpha, min_width=min_width, rss_curve=curve)
    logger.info(f"Calibrated anomaly model channel {channel} group {group}: m={m}, K={K}, nu={model.nu:.2f}")
    return model


# ============================================================================
# Deployment scoring
# ============================================================================

def scores_from_beta(model, beta):
    """Audit trail and (a_G, a_S) for a coefficient vector."""
    beta = np.asarray(beta, dtype=float)
    u = np.array([edf_evaluate(edf, b) for edf, b in zip(model.edfs, beta)])
    z_gaussian = model.gaussian.normal_scores(u)
    z_student = model.student_t.normal_scores(u)
    m2_gaussian = mahalanobis_sq(z_gaussian, model.gaussian.sigma)
    m2_student = mahalanobis_sq(z_student, model.student_t.sigma)
    a_gaussian = chi2_cdf(m2_gaussian, model.K)
    a_student = f_cdf(m2_student / model.K, model.K, model.nu)
    audit = {'beta': beta, 'u': u, 'z_gaussian': z_gaussian, 'z_student': z_student,
             'm2_gaussian': m2_gaussian, 'm2_student': m2_student}
    return float(a_gaussian), float(a_student), audit


def score(model, region, y, threshold=DEFAULT_THRESHOLD, series_id=''):
    y = np.asarray(y, dtype=float).ravel()
    if y.size != model.basis.t:
        raise ContractError(f"target length {y.size} does not match model basis length {model.basis.t}")
    if not 0 < threshold < 1:
        raise ContractError(f"threshold must lie in (0, 1), got {threshold}")
    if region.lower.shape[1] != 1:
        region = region.column(model.channel)
    delta = distance_series(region, y, model.channel).delta
    beta = fit_coefficients(model.basis, delta).beta
    a_gaussian, a_student, audit = scores_from_beta(model, beta)
    return AnomalyReport(series_id, model.channel, model.group_label, a_gaussian, a_student, threshold,
                         bool(a_gaussian > threshold or a_student > threshold), region.covers(y),
                         {'delta': delta, **audit}, region=region, y=y)


def rethreshold(report, threshold):
    """Same report with flags re-derived at another threshold; scores are untouched."""
    if not 0 < threshold < 1:
        raise ContractError(f"threshold must lie in (0, 1), got {threshold}")
    return replace(report, threshold=threshold,
                   flagged=bool(report.a_gaussian > threshold or report.a_student > threshold))


def _score_one(s, model, forecaster, conformal_model, threshold):
    region, y = conformalized_target(s, forecaster, conformal_model, model.channel, model.min_width)
    return score(model, region, y, threshold, series_id=s.series_id)


def batch_score(model, series, forecaster, conformal_model, threshold=DEFAULT_THRESHOLD, workers=1):
    """Score every series; per-series failures become skip records, output sorted by id."""
    series = list(series)
    if not series:
        raise ContractError("batch_score needs a non-empty series list")

    def run(s):
        try:
            return _score_one(s, model, forecaster, conformal_model, threshold)
        except CocaiError as e:
            logger.warning(f"Skipping series {s.series_id} channel {model.channel}: {e}")
            return SkipRecord(s.series_id, model.channel, str(e))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, series))
    else:
        results = [run(s) for s in series]
    reports = sorted((r for r in results if isinstance(r, AnomalyReport)), key=lambda r: r.series_id)
    skipped = sorted((r for r in results if isinstance(r, SkipRecord)), key=lambda r: r.series_id)
    return BatchResult(reports, skipped, summarize(reports, skipped))


def summarize(reports, skipped=()):
    """Coverage and the four-way flag breakdown (flagged/unflagged x inside/outside)."""
    n = len(reports)
    covered = np.array([r.covered for r in reports], dtype=bool)
    flagged = np.array([r.flagged for r in reports], dtype=bool)
    gaussian = np.array([r.flagged_gaussian for r in reports], dtype=bool)
    student = np.array([r.flagged_student for r in reports], dtype=bool)
    rate = lambda count: float(count) / n if n else 0.0
    return {
        'n_scored': n,
        'n_skipped': len(skipped),
        'coverage': rate(covered.sum()),
        'flag_rate': rate(flagged.sum()),
        'flagged_inside': int((flagged & covered).sum()),
        'flagged_outside': int((flagged & ~covered).sum()),
        'unflagged_inside': int((~flagged & covered).sum()),
        'unflagged_outside': int((~flagged & ~covered).sum()),
        'gaussian_inside': int((gaussian & covered).sum()),
        'gaussian_outside': int((gaussian & ~covered).sum()),
        'student_inside': int((student & covered).sum()),
        'student_outside': int((student & ~covered).sum()),
    }
