import math

import numpy as np
import pytest
from scipy import stats

from copula import (GAUSSIAN, INDEPENDENCE, NU_MAX, STUDENT_T, CopulaModel, copula_cdf, fit_gaussian,
                    fit_independence, fit_student_t)
from errors import ContractError, FitError
from stats_utils import CorrelationMatrix


def _pseudo_observations(z):
    return stats.rankdata(z, axis=0) / (z.shape[0] + 1.0)


def _random_correlation(rng, K):
    a = rng.standard_normal((K, 2 * K))
    cov = a @ a.T
    scale = 1.0 / np.sqrt(np.diag(cov))
    corr = cov * np.outer(scale, scale)
    np.fill_diagonal(corr, 1.0)
    return corr


def _rho(r):
    return CorrelationMatrix(np.array([[1.0, r], [r, 1.0]]))


def test_model_contract():
    with pytest.raises(ContractError):
        CopulaModel('clayton', 2)
    with pytest.raises(ContractError):
        CopulaModel(GAUSSIAN, 2)
    with pytest.raises(ContractError):
        CopulaModel(STUDENT_T, 2, _rho(0.2), nu=1.5)
    with pytest.raises(ContractError):
        CopulaModel(INDEPENDENCE, 2, nu=4.0)


def test_model_dict_round_trip():
    model = CopulaModel(STUDENT_T, 2, _rho(0.3), nu=7.5)
    data = model.to_dict()
    assert data['sigma'] == [1.0, 0.3, 0.3, 1.0]
    back = CopulaModel.from_dict(data)
    assert back.kind == STUDENT_T and back.nu == 7.5
    np.testing.assert_array_equal(back.sigma.entries, model.sigma.entries)


def test_fit_gaussian_on_independent_uniforms(rng):
    model = fit_gaussian(rng.uniform(size=(10_000, 3)))
    off = model.sigma.entries[~np.eye(3, dtype=bool)]
    assert model.kind == GAUSSIAN
    assert np.max(np.abs(off)) < 0.05


def test_fit_gaussian_recovers_correlation(rng):
    z = rng.multivariate_normal([0, 0], [[1, 0.7], [0.7, 1]], size=5000)
    model = fit_gaussian(_pseudo_observations(z))
    assert model.sigma.entries[0, 1] == pytest.approx(0.7, abs=0.03)


def test_fit_rejects_bad_input(rng):
    with pytest.raises(ContractError):
        fit_gaussian(np.full((10, 2), 1.0))
    with pytest.raises(ContractError):
        fit_gaussian(rng.uniform(size=(3, 2)))
    with pytest.raises(FitError):
        fit_student_t(np.full((20, 3), 0.5))


def test_fit_independence_dimension(rng):
    assert fit_independence(rng.uniform(size=(10, 4))).dimension == 4


@pytest.mark.slow
def test_student_t_recovers_known_copula(rng):
    K, nu, m = 5, 10.0, 5000
    corr = _random_correlation(rng, K)
    z = rng.multivariate_normal(np.zeros(K), corr, size=m) / np.sqrt(rng.chisquare(nu, size=m) / nu)[:, None]
    model = fit_student_t(_pseudo_observations(z))
    assert 7 <= model.nu <= 14
    assert np.max(np.abs(model.sigma.entries - corr)) < 0.08


@pytest.mark.slow
def test_student_t_on_gaussian_data_goes_to_large_nu(rng):
    K, m = 5, 20_000
    z = rng.multivariate_normal(np.zeros(K), _random_correlation(rng, K), size=m)
    model = fit_student_t(_pseudo_observations(z))
    assert model.nu >= 100
    assert model.nu <= NU_MAX


def test_independence_cdf_is_product():
    model = CopulaModel(INDEPENDENCE, 3)
    est = copula_cdf(model, [0.2, 0.5, 0.9])
    assert est.value == pytest.approx(0.09)
    assert est.std_error == 0.0


def test_gaussian_orthant_probability():
    est = copula_cdf(CopulaModel(GAUSSIAN, 2, _rho(0.5)), [0.5, 0.5], seed=1)
    assert est.value == pytest.approx(0.25 + math.asin(0.5) / (2 * math.pi), abs=1e-3)
    assert 0 <= est.std_error < 1e-3


def test_gaussian_cdf_matches_scipy():
    sigma = np.array([[1.0, 0.4, 0.2], [0.4, 1.0, -0.3], [0.2, -0.3, 1.0]])
    u = np.array([0.3, 0.8, 0.6])
    expected = stats.multivariate_normal(np.zeros(3), sigma).cdf(stats.norm.ppf(u))
    est = copula_cdf(CopulaModel(GAUSSIAN, 3, CorrelationMatrix(sigma)), u)
    assert est.value == pytest.approx(expected, abs=2e-3)


def test_student_t_orthant_probability():
    # elliptical symmetry: the orthant probability does not depend on nu
    est = copula_cdf(CopulaModel(STUDENT_T, 2, _rho(0.5), nu=4.0), [0.5, 0.5])
    assert est.value == pytest.approx(1 / 3, abs=2e-3)


def test_student_t_cdf_with_large_nu_approaches_gaussian():
    u = [0.2, 0.7]
    gauss = copula_cdf(CopulaModel(GAUSSIAN, 2, _rho(0.6)), u).value
    t_cdf = copula_cdf(CopulaModel(STUDENT_T, 2, _rho(0.6), nu=NU_MAX), u).value
    assert t_cdf == pytest.approx(gauss, abs=5e-3)


def test_cdf_contract():
    model = CopulaModel(GAUSSIAN, 2, _rho(0.1))
    with pytest.raises(ContractError):
        copula_cdf(model, [0.5, 0.5, 0.5])
    with pytest.raises(ContractError):
        copula_cdf(model, [0.0, 0.5])
