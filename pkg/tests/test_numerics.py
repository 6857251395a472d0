import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from red_density.exceptions import ContractError, NonFiniteError
from red_density.numerics import (
    derive_seed,
    draw_standard_normal,
    finite_diff_gradient,
    gaussian_logpdf,
    log_sum_exp,
    make_rng,
)


def test_log_sum_exp_examples():
    assert log_sum_exp([0.0, 0.0]) == pytest.approx(math.log(2), abs=1e-15)
    assert log_sum_exp([-1000.0, 0.0]) == pytest.approx(0.0, abs=1e-15)
    # mpmath, 30 digits
    assert log_sum_exp([1.0, 2.0, 3.0]) == pytest.approx(3.40760596444438030, abs=1e-14)


def test_log_sum_exp_all_neg_inf_and_empty():
    assert log_sum_exp([-np.inf, -np.inf]) == -np.inf
    with pytest.raises(ContractError):
        log_sum_exp([])


@given(
    st.lists(st.floats(-50, 50), min_size=1, max_size=20),
    st.floats(-100, 100),
)
def test_log_sum_exp_shift_invariance(v, c):
    v = np.array(v)
    assert log_sum_exp(v + c) == pytest.approx(log_sum_exp(v) + c, abs=1e-12)


def test_gaussian_logpdf_examples():
    assert gaussian_logpdf(0, 0, 1) == pytest.approx(-0.9189385332046727, abs=1e-15)
    assert gaussian_logpdf(1, 0, 1) == pytest.approx(-1.4189385332046727, abs=1e-15)
    assert gaussian_logpdf(2, 1, 0.5) == pytest.approx(-2.2257913526447274, abs=1e-14)
    with pytest.raises(ContractError):
        gaussian_logpdf(0, 0, 0)


@pytest.mark.parametrize("mu,sigma", [(0.0, 1.0), (2.5, 0.3), (-1.0, 4.0)])
def test_gaussian_logpdf_integrates_to_one(mu, sigma):
    z = np.linspace(mu - 8 * sigma, mu + 8 * sigma, 10_000)
    assert np.trapezoid(np.exp(gaussian_logpdf(z, mu, sigma)), z) == pytest.approx(1.0, abs=1e-6)


def test_standard_normal_draws():
    a = draw_standard_normal(make_rng(7), 5)
    b = draw_standard_normal(make_rng(7), 5)
    np.testing.assert_array_equal(a, b)
    big = draw_standard_normal(make_rng(3), 100_000)
    assert abs(big.mean()) < 0.02
    assert abs(big.std() - 1) < 0.02
    with pytest.raises(ContractError):
        draw_standard_normal(make_rng(0), 0)


def test_rng_reproducible_for_a_million_draws():
    np.testing.assert_array_equal(make_rng(42).standard_normal(10**6), make_rng(42).standard_normal(10**6))


def test_derive_seed_is_stable_and_distinct():
    assert derive_seed(5, 1) == derive_seed(5, 1)
    assert len({derive_seed(5, k) for k in range(10)}) == 10


def test_finite_diff_gradient():
    g = finite_diff_gradient(lambda x: float(x[0] ** 2), np.array([3.0]), 1e-5)
    assert g[0] == pytest.approx(6.0, abs=1e-8)
    np.testing.assert_array_equal(finite_diff_gradient(lambda x: 4.2, np.ones(3)), np.zeros(3))
    g = finite_diff_gradient(lambda x: gaussian_logpdf(x[0], 0, 1), np.array([1.5]))
    assert g[0] == pytest.approx(-1.5, abs=1e-7)


def test_finite_diff_reports_bad_coordinate():
    def f(x):
        return np.inf if x[1] > 0.5 else float(x.sum())

    with pytest.raises(NonFiniteError, match="coordinate 1"):
        finite_diff_gradient(f, np.array([0.0, 0.5]))
