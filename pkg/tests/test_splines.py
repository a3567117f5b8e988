import numpy as np
import pytest

from errors import ContractError
from splines import RssCurve, build_basis, clamped_knots, fit_coefficients, fit_coefficients_batch, select_K


@pytest.mark.parametrize('K,t', [(4, 4), (4, 40), (7, 40), (12, 40), (20, 20), (10, 137)])
def test_partition_of_unity(K, t):
    basis = build_basis(K, t)
    assert basis.design.shape == (t, K)
    np.testing.assert_allclose(basis.design.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(basis.design >= -1e-14)


def test_knots_are_clamped_and_uniform():
    knots = clamped_knots(8, 41)
    np.testing.assert_array_equal(knots[:4], 0.0)
    np.testing.assert_array_equal(knots[-4:], 40.0)
    np.testing.assert_allclose(np.diff(knots[3:-3]), 8.0)
    assert knots.size == 8 + 4


def test_basis_bounds():
    with pytest.raises(ContractError):
        build_basis(3, 40)
    with pytest.raises(ContractError):
        build_basis(41, 40)
    with pytest.raises(ContractError):
        build_basis(4, 3)


def test_constant_and_cubic_reproduction():
    tau = np.arange(40, dtype=float)
    basis = build_basis(4, 40)
    assert fit_coefficients(basis, np.full(40, 2.5)).rss < 1e-8
    assert fit_coefficients(basis, tau ** 3).rss < 1e-8
    wider = build_basis(13, 40)
    assert fit_coefficients(wider, 1 - 0.3 * tau + 0.01 * tau ** 2 - 1e-4 * tau ** 3).rss < 1e-8


def test_planted_coefficients_are_recovered(rng):
    basis = build_basis(8, 40)
    beta = rng.standard_normal(8)
    fit = fit_coefficients(basis, basis.reconstruct(beta))
    np.testing.assert_allclose(fit.beta, beta, atol=1e-8)
    assert fit.rss < 1e-16


def test_square_system_interpolates(rng):
    tau = np.arange(20, dtype=float)
    delta = np.sin(tau / 3) + 0.3 * rng.standard_normal(20)
    fit = fit_coefficients(build_basis(20, 20), delta)
    assert fit.rss < 1e-8


def test_batch_matches_single_fits(rng):
    basis = build_basis(6, 30)
    deltas = rng.standard_normal((30, 5))
    betas, rss = fit_coefficients_batch(basis, deltas)
    for j in range(5):
        single = fit_coefficients(basis, deltas[:, j])
        np.testing.assert_allclose(betas[:, j], single.beta, atol=1e-12)
        assert rss[j] == pytest.approx(single.rss)


def test_length_mismatch():
    with pytest.raises(ContractError):
        fit_coefficients(build_basis(5, 30), np.zeros(29))


def test_basis_functions_are_local():
    basis = build_basis(12, 40)
    for k in range(12):
        support = basis.support(k)
        assert 0 < support.size < 40
        assert np.all(np.diff(support) == 1)


def test_perturbation_influence_decays_with_distance():
    basis = build_basis(14, 60)
    spike = np.zeros(60)
    spike[5] = 1.0
    beta = np.abs(fit_coefficients(basis, spike).beta)
    assert beta[:3].max() > 10 * beta[-3:].max()


def test_rss_nonincreasing_on_nested_grids(rng):
    # interval counts 1, 2, 4, 8, 16: each knot grid refines the previous one
    nested = [4, 5, 7, 11, 19]
    for _ in range(100):
        delta = rng.standard_normal(40).cumsum()
        rss = [fit_coefficients(build_basis(K, 40), delta).rss for K in nested]
        assert all(b <= a * (1 + 1e-9) + 1e-12 for a, b in zip(rss, rss[1:]))


def test_envelope_is_monotone(rng):
    deltas = [rng.standard_normal(40) for _ in range(30)]
    _, curve = select_K(deltas, list(range(4, 21)))
    assert isinstance(curve, RssCurve)
    assert np.all(np.diff(curve.total_rss) <= 0)
    np.testing.assert_array_equal(curve.total_rss, np.minimum.accumulate(curve.raw_rss))
    frame = curve.to_frame()
    assert list(frame.columns) == ['K', 'total_rss', 'raw_rss']
    assert frame['K'].tolist() == list(range(4, 21))


def test_elbow_finds_planted_basis_count(rng):
    basis = build_basis(8, 40)
    deltas = [basis.reconstruct(rng.standard_normal(8)) for _ in range(50)]
    k_star, curve = select_K(deltas, [4, 8, 12, 16])
    assert k_star == 8
    assert curve.total_rss[1] < 1e-12 * curve.total_rss[0]


def test_elbow_stops_at_first_small_improvement(rng):
    # white noise: each extra basis function removes about 1/(t - K) of the RSS
    deltas = [rng.standard_normal(40) for _ in range(50)]
    k_star, curve = select_K(deltas, list(range(4, 11)))
    assert k_star == curve.candidates[0] == 4
    assert curve.candidates[1] == 5
    assert (curve.total_rss[0] - curve.total_rss[1]) / curve.total_rss[0] < 0.05


def test_select_k_rejects_unsorted_candidates(rng):
    with pytest.raises(ContractError):
        select_K([rng.standard_normal(30)], [6, 4])
    with pytest.raises(ContractError):
        select_K([], [4])
