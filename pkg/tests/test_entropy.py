import numpy as np
import pytest
from scipy.special import expit
from hypothesis import given, settings, strategies as st

from advlic import autodiff as ad
from advlic.entropy import (LIKELIHOOD_FLOOR, FactorizedEntropyParams, GaussianConditionalParams,
                            bpp_from_likelihoods, likelihood_factorized, likelihood_gaussian)
from oracles import gaussian_grid_mass, logistic_grid_mass

GRID = np.arange(-400, 401, dtype=np.float64)


def factorized_grid_sum(loc: float, scale: float) -> float:
    params = FactorizedEntropyParams(ad.Tensor([loc], dtype=np.float64), ad.Tensor([np.log(scale)], dtype=np.float64))
    with ad.precision(np.float64):
        p = likelihood_factorized(ad.Tensor(GRID[:, None]), params)
    return float(p.data.sum())


def gaussian_grid_sum(sigma: float) -> float:
    with ad.precision(np.float64):
        p = likelihood_gaussian(ad.Tensor(GRID), ad.Tensor(np.full_like(GRID, sigma)))
    return float(p.data.sum())


@settings(max_examples=50, deadline=None)
@given(st.floats(-5, 5), st.floats(0.2, 20))
def test_factorized_grid_mass_sums_to_one(loc, scale):
    assert factorized_grid_sum(loc, scale) == pytest.approx(1.0, abs=1e-5)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.11, 30))
def test_gaussian_grid_mass_sums_to_one(sigma):
    assert gaussian_grid_sum(sigma) == pytest.approx(1.0, abs=1e-5)


def test_grid_masses_match_closed_form_oracles():
    for loc, scale in [(0.0, 1.0), (1.3, 0.5), (-2.0, 7.0)]:
        params = FactorizedEntropyParams(ad.Tensor([loc], dtype=np.float64), ad.Tensor([np.log(scale)], dtype=np.float64))
        with ad.precision(np.float64):
            p = likelihood_factorized(ad.Tensor(GRID[:, None]), params).data[:, 0]
        k = GRID
        cdf = lambda v: expit((v - loc) / scale)
        np.testing.assert_allclose(p, np.maximum(cdf(k + 0.5) - cdf(k - 0.5), LIKELIHOOD_FLOOR), rtol=1e-9, atol=1e-15)
        assert logistic_grid_mass(loc, scale) == pytest.approx(1.0, abs=1e-9)
    assert gaussian_grid_mass(1.0) == pytest.approx(1.0, abs=1e-12)


def test_gaussian_unit_mass_at_zero():
    p = likelihood_gaussian(ad.Tensor([0.0]), ad.Tensor([1.0])).data[0]
    assert p == pytest.approx(0.38292, abs=1e-5)


def test_scale_floor_and_negative_scale():
    a = likelihood_gaussian(ad.Tensor([0.0]), ad.Tensor([0.01])).data[0]
    b = likelihood_gaussian(ad.Tensor([0.0]), ad.Tensor([GaussianConditionalParams().scale_min])).data[0]
    assert a == b
    with pytest.raises(ValueError):
        likelihood_gaussian(ad.Tensor([0.0]), ad.Tensor([-1.0]))


def test_far_tail_is_floored_not_zero():
    p = likelihood_gaussian(ad.Tensor([60.0]), ad.Tensor([1.0])).data[0]
    assert p == pytest.approx(LIKELIHOOD_FLOOR)


def test_factorized_per_channel_parameters():
    params = FactorizedEntropyParams(ad.Tensor([0.0, 3.0]), ad.Tensor([0.0, 0.0]))
    y = ad.Tensor(np.array([0.0, 3.0]).reshape(1, 2, 1, 1) * np.ones((1, 2, 2, 2)))
    p = likelihood_factorized(y, params).data
    np.testing.assert_allclose(p[0, 0], p[0, 1], rtol=1e-6)  # each channel sits on its own mode
    with pytest.raises(ad.ShapeError):
        likelihood_factorized(ad.Tensor(np.zeros((1, 3, 2, 2))), params)


def test_bpp_from_likelihoods():
    p = ad.Tensor(np.full((1, 1, 2, 2), 0.5))
    assert bpp_from_likelihoods([p], 4).item() == pytest.approx(1.0)
    assert bpp_from_likelihoods([p, p], 4).item() == pytest.approx(2.0)
    with pytest.raises(ValueError):
        bpp_from_likelihoods([ad.Tensor([0.0])], 1)
    with pytest.raises(ValueError):
        bpp_from_likelihoods([p], 0)


def test_likelihood_gradients_match_finite_differences():
    params = FactorizedEntropyParams(ad.Tensor([0.3]), ad.Tensor([0.2]))
    y = np.linspace(-3.3, 3.3, 9)[:, None]
    f = lambda t: ad.sum(ad.log2(likelihood_factorized(t, params)))
    assert ad.finite_difference_check(f, y).max_relative_error <= 1e-4
    sig = np.linspace(0.5, 3.0, 9)
    g = lambda t: ad.sum(ad.log2(likelihood_gaussian(ad.Tensor(np.linspace(-2.2, 2.2, 9)), t)))
    assert ad.finite_difference_check(g, sig).max_relative_error <= 1e-4
