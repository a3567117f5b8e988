import json
from dataclasses import replace

import numpy as np
import pytest
from scipy import stats

from anomaly import (AnomalyModel, AnomalyReport, apply_min_width, batch_score, calibrate_anomaly,
                     conformalized_target, distance_series, rethreshold, score, scores_from_beta, summarize)
from conformal import BOUNDED_COPULA, ConformalModel, ConformalizedRegion, NonconformityScores, calibrate_copula_cpts
from copula import GAUSSIAN, STUDENT_T, CopulaModel
from errors import CalibrationError, ContractError, DegenerateIntervalError, FitError, ValidationError
from forecaster import fit_climatology
from series_core import TargetSpec
from splines import build_basis
from stats_utils import CorrelationMatrix, EmpiricalDistribution, chi2_cdf, f_cdf, mahalanobis_sq
from synth import AnomalyInjection, SynthConfig, channel_scales, generate, inject


def _region(lower, upper):
    return ConformalizedRegion(lower, upper, lower, upper)


# ============================================================================
# Distance series
# ============================================================================

def test_distance_semantics_on_random_intervals(rng):
    lower = rng.uniform(-100, 100, size=1000)
    width = rng.uniform(0.1, 10, size=1000)
    region = _region(lower, lower + width)
    mid = lower + width / 2
    np.testing.assert_allclose(distance_series(region, mid).delta, 0.0, atol=1e-12)
    np.testing.assert_allclose(distance_series(region, lower).delta, 0.5, atol=1e-12)
    np.testing.assert_allclose(distance_series(region, lower + width).delta, 0.5, atol=1e-12)
    np.testing.assert_allclose(distance_series(region, lower - width).delta, 1.5, atol=1e-12)
    np.testing.assert_allclose(distance_series(region, lower + 2 * width).delta, 1.5, atol=1e-12)


def test_distance_rejects_degenerate_and_infinite_bounds():
    with pytest.raises(DegenerateIntervalError):
        distance_series(_region(np.zeros(3), np.array([1.0, 0.0, 1.0])), np.zeros(3))
    with pytest.raises(ContractError):
        distance_series(_region(np.zeros(2), np.array([1.0, np.inf])), np.zeros(2))
    with pytest.raises(ContractError):
        distance_series(_region(np.zeros(2), np.ones(2)), np.zeros(3))


def test_min_width_floor_widens_symmetrically():
    region = apply_min_width(_region(np.array([0.0, 1.0]), np.array([2.0, 1.0])), 0.5)
    np.testing.assert_allclose(region.lower[:, 0], [0.0, 0.75])
    np.testing.assert_allclose(region.upper[:, 0], [2.0, 1.25])
    assert distance_series(region, np.array([1.0, 1.0])).delta[1] == pytest.approx(0.0)


# ============================================================================
# Calibration
# ============================================================================

def test_calibrated_model_shape(calibrated):
    _, _, conformal_models, anomaly_models = calibrated
    assert len(conformal_models) == len(anomaly_models) == 1
    model = anomaly_models[0]
    assert 4 <= model.K <= 8
    assert len(model.edfs) == model.K
    assert model.basis.t == 10
    assert model.calib_size == 200
    assert 2.1 <= model.nu <= 200
    assert model.rss_curve is not None
    assert model.rss_curve.candidates == (4, 5, 6, 7, 8)


def test_calibration_with_fixed_k(calibrated, small_corpus):
    forecaster, split, conformal_models, _ = calibrated
    model = calibrate_anomaly(split.subset(small_corpus, 'calib_ad'), forecaster, conformal_models[0], 0,
                              (4, 5, 6), k=5)
    assert model.K == 5
    assert model.rss_curve is None


def test_calibration_needs_enough_series(calibrated, small_corpus):
    forecaster, split, conformal_models, _ = calibrated
    few = split.subset(small_corpus, 'calib_ad')[:6]
    with pytest.raises(CalibrationError):
        calibrate_anomaly(few, forecaster, conformal_models[0], 0, range(4, 9))
    with pytest.raises(CalibrationError):
        calibrate_anomaly([], forecaster, conformal_models[0], 0, range(4, 9))


def test_calibration_rejects_infeasible_conformal_model(calibrated, small_corpus):
    forecaster, split, _, _ = calibrated
    infeasible = ConformalModel((np.inf,) * 10, 0.1, 0, BOUNDED_COPULA, 500, 1.0, infeasible=True)
    with pytest.raises(CalibrationError):
        calibrate_anomaly(split.subset(small_corpus, 'calib_ad'), forecaster, infeasible, 0, range(4, 9))


def test_model_round_trips_through_json(calibrated, small_corpus):
    forecaster, split, conformal_models, anomaly_models = calibrated
    model = anomaly_models[0]
    back = AnomalyModel.from_dict(json.loads(json.dumps(model.to_dict())))
    assert back.K == model.K and back.nu == model.nu
    s = split.subset(small_corpus, 'test')[0]
    region, y = conformalized_target(s, forecaster, conformal_models[0], 0, model.min_width)
    first, second = score(model, region, y), score(back, region, y)
    assert first.a_gaussian == second.a_gaussian
    assert first.a_student == second.a_student


def test_model_format_tag_is_checked(calibrated):
    data = calibrated[3][0].to_dict()
    data['format_version'] = 'cocai-anomaly/0'
    with pytest.raises(ValidationError):
        AnomalyModel.from_dict(data)


# ============================================================================
# Scoring
# ============================================================================

def test_typical_coefficients_score_low(calibrated):
    model = calibrated[3][0]
    beta = [edf.sorted_samples[edf.size // 2] for edf in model.edfs]
    a_gaussian, a_student, audit = scores_from_beta(model, beta)
    assert a_gaussian < 0.1
    assert a_student < 0.1
    assert set(audit) == {'beta', 'u', 'z_gaussian', 'z_student', 'm2_gaussian', 'm2_student'}


def test_far_outside_target_is_flagged(calibrated, small_corpus):
    forecaster, split, conformal_models, anomaly_models = calibrated
    model = anomaly_models[0]
    s = split.subset(small_corpus, 'test')[0]
    region, y = conformalized_target(s, forecaster, conformal_models[0], 0, model.min_width)
    report = score(model, region, y + 5 * region.width[:, 0], series_id=s.series_id)
    assert report.a_gaussian > 0.9
    assert report.a_student > 0.9
    assert report.flagged
    assert not report.covered
    assert np.all(report.audit['delta'] > 3)


def test_flag_is_or_of_both_scores():
    report = AnomalyReport('s', 0, None, 0.95, 0.5, 0.9, True, True, {})
    assert report.flagged_gaussian and not report.flagged_student
    lowered = rethreshold(report, 0.4)
    assert lowered.flagged and lowered.flagged_student
    raised = rethreshold(report, 0.99)
    assert not raised.flagged
    assert raised.a_gaussian == report.a_gaussian
    with pytest.raises(ContractError):
        rethreshold(report, 1.0)


def test_report_dict_round_trip():
    report = AnomalyReport('s1', 1, 'wet', 0.2, 0.3, 0.9, False, True, {'delta': np.array([0.1, 0.2])})
    data = json.loads(json.dumps(report.to_dict()))
    assert data['group'] == 'wet'
    back = AnomalyReport.from_dict(data)
    assert back.series_id == 's1' and back.group_label == 'wet'
    np.testing.assert_allclose(back.audit['delta'], [0.1, 0.2])


def test_score_contract(calibrated, small_corpus):
    forecaster, split, conformal_models, anomaly_models = calibrated
    model = anomaly_models[0]
    s = split.subset(small_corpus, 'test')[0]
    region, y = conformalized_target(s, forecaster, conformal_models[0], 0, model.min_width)
    with pytest.raises(ContractError):
        score(model, region, y, threshold=1.5)
    with pytest.raises(ContractError):
        score(model, region, y[:5])


def test_batch_score_skips_bad_series_and_sorts(calibrated, small_corpus):
    forecaster, split, conformal_models, anomaly_models = calibrated
    tests = split.subset(small_corpus, 'test')[:20]
    values = np.array(tests[3].values)
    values[-1, 0] = np.nan
    broken = tests[3].replace_values(values)
    batch = list(reversed(tests[:3])) + [broken] + tests[4:]

    result = batch_score(anomaly_models[0], batch, forecaster, conformal_models[0])
    ids = [r.series_id for r in result.reports]
    assert ids == sorted(ids)
    assert len(result.reports) == 19
    assert [s.series_id for s in result.skipped] == [broken.series_id]
    assert result.summary['n_scored'] == 19 and result.summary['n_skipped'] == 1

    threaded = batch_score(anomaly_models[0], batch, forecaster, conformal_models[0], workers=3)
    assert [r.a_student for r in threaded.reports] == [r.a_student for r in result.reports]


def test_batch_score_needs_series(calibrated):
    forecaster, _, conformal_models, anomaly_models = calibrated
    with pytest.raises(ContractError):
        batch_score(anomaly_models[0], [], forecaster, conformal_models[0])


def test_audit_trail_reproduces_scores(calibrated, small_corpus):
    forecaster, split, conformal_models, anomaly_models = calibrated
    model = anomaly_models[0]
    for s in split.subset(small_corpus, 'test')[:10]:
        region, y = conformalized_target(s, forecaster, conformal_models[0], 0, model.min_width)
        report = score(model, region, y, series_id=s.series_id)
        stored = AnomalyReport.from_dict(json.loads(json.dumps(report.to_dict())))
        a_gaussian, a_student, audit = scores_from_beta(model, stored.audit['beta'])
        assert a_gaussian == report.a_gaussian
        assert a_student == report.a_student
        np.testing.assert_array_equal(audit['z_student'], report.audit['z_student'])


def test_scores_grow_with_distance_from_the_centre(calibrated, rng):
    model = calibrated[3][0]
    for _ in range(20):
        z = rng.standard_normal(model.K)
        base = mahalanobis_sq(z, model.gaussian.sigma)
        m2 = [mahalanobis_sq(c * z, model.gaussian.sigma) for c in (0.5, 1.0, 2.0, 4.0)]
        np.testing.assert_allclose(m2, [c * c * base for c in (0.5, 1.0, 2.0, 4.0)], rtol=1e-10)
        a_g = [chi2_cdf(v, model.K) for v in m2]
        a_s = [f_cdf(v / model.K, model.K, model.nu) for v in m2]
        assert all(np.diff(a_g) >= 0) and all(np.diff(a_s) >= 0)
        assert a_g[0] < a_g[-1] and a_s[0] < a_s[-1]


def test_student_scores_approach_gaussian_for_large_nu(rng):
    K, m = 15, 2000
    edfs = [EmpiricalDistribution.from_samples(rng.standard_normal(m)) for _ in range(K)]
    identity = CorrelationMatrix(np.eye(K))
    betas = rng.standard_normal((2000, K))
    gaps = {}
    for nu in (100.0, 200.0):
        model = AnomalyModel(0, None, build_basis(K, 40), edfs, CopulaModel(GAUSSIAN, K, identity),
                             CopulaModel(STUDENT_T, K, identity, nu), m)
        scores = np.array([scores_from_beta(model, beta)[:2] for beta in betas])
        gaps[nu] = np.abs(scores[:, 0] - scores[:, 1]).max()
    assert gaps[200.0] < 0.02
    assert gaps[100.0] > gaps[200.0]


def test_identical_distance_series_cannot_be_calibrated(calibrated, small_corpus):
    forecaster, split, conformal_models, _ = calibrated
    s = split.subset(small_corpus, 'calib_ad')[0]
    copies = [replace(s, series_id=f'copy{i:02d}') for i in range(12)]
    with pytest.raises(FitError):
        calibrate_anomaly(copies, forecaster, conformal_models[0], 0, (4, 5, 6), k=5)


def test_summary_breakdown():
    reports = [
        AnomalyReport('a', 0, None, 0.95, 0.1, 0.9, True, True, {}),
        AnomalyReport('b', 0, None, 0.1, 0.95, 0.9, True, False, {}),
        AnomalyReport('c', 0, None, 0.1, 0.1, 0.9, False, True, {}),
        AnomalyReport('d', 0, None, 0.2, 0.2, 0.9, False, False, {}),
    ]
    summary = summarize(reports)
    assert summary['n_scored'] == 4
    assert summary['coverage'] == 0.5
    assert summary['flag_rate'] == 0.5
    assert (summary['flagged_inside'], summary['flagged_outside']) == (1, 1)
    assert (summary['unflagged_inside'], summary['unflagged_outside']) == (1, 1)
    assert (summary['gaussian_inside'], summary['student_outside']) == (1, 1)
    assert summarize([])['flag_rate'] == 0.0


# ============================================================================
# Null behaviour and planted anomalies
# ============================================================================

@pytest.fixture(scope='module')
def null_pipeline():
    config = SynthConfig(n_series=6400, T=80, d=1, seed=21)
    corpus = generate(config)
    train, cp, ad, test = corpus[:400], corpus[400:2400], corpus[2400:3400], corpus[3400:]
    forecaster = fit_climatology(train, TargetSpec((0,), 40))
    ranges, targets = zip(*(forecaster.predict_series(s, 0.1) for s in cp))
    conformal_model = calibrate_copula_cpts(NonconformityScores.stack(ranges, targets, 0), 0.1)
    model = calibrate_anomaly(ad, forecaster, conformal_model, 0, range(4, 21))
    return config, forecaster, conformal_model, model, test


@pytest.mark.slow
def test_null_scores_are_uniform(null_pipeline):
    _, forecaster, conformal_model, model, test = null_pipeline
    result = batch_score(model, test[:2000], forecaster, conformal_model, threshold=0.9)
    assert len(result.reports) == 2000
    critical = 1.63 / np.sqrt(2000)
    a_gaussian = np.array([r.a_gaussian for r in result.reports])
    a_student = np.array([r.a_student for r in result.reports])
    assert stats.kstest(a_gaussian, 'uniform').statistic < critical
    assert stats.kstest(a_student, 'uniform').statistic < critical
    assert abs(np.mean(a_student > 0.9) - 0.10) <= 0.03
    assert abs(np.mean(a_gaussian > 0.9) - 0.10) <= 0.03


@pytest.mark.slow
def test_planted_level_shifts_are_detected(null_pipeline):
    config, forecaster, conformal_model, model, test = null_pipeline
    shifted, clean = test[2000:2500], test[2500:3000]
    injected = []
    for s in shifted:
        shift = AnomalyInjection('level_shift', 0, config.T - 40, 20, 3.0)
        injected.append(inject(s, [shift], channel_scales(config, s), target_length=40)[0])
    detected = batch_score(model, injected, forecaster, conformal_model, threshold=0.9)
    baseline = batch_score(model, clean, forecaster, conformal_model, threshold=0.9)
    assert detected.summary['flag_rate'] >= 0.9
    assert baseline.summary['flag_rate'] <= 0.15
