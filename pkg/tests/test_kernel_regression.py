import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flurlab.errors import DomainError
from flurlab.flur_process import ProcessSpec, TemperingRegime
from flurlab.kernel_regression import (
    KERNELS,
    RegressionDesign,
    asymptotic_variance,
    fit_kernel,
    get_kernel,
    kernel_l2,
    kernel_second_moment,
    operator_form_variance,
    optimal_bandwidth,
    priestley_chao,
    scale_factor,
    user_kernel,
    weighted_sum_limit_check,
)
from flurlab.numerics import SeedTree, quad_2d_singular_diagonal

EPA = get_kernel("epanechnikov")


@pytest.mark.parametrize("name", sorted(KERNELS))
def test_builtin_kernels_are_valid(name):
    k = KERNELS[name]
    k.validate()
    assert float(k(1.0)) == pytest.approx(0.0, abs=1e-15)
    # derivative is consistent with the kernel
    u = np.linspace(-0.9, 0.9, 7)
    num = (k(u + 1e-6) - k(u - 1e-6)) / 2e-6
    np.testing.assert_allclose(k.derivative(u), num, atol=1e-6)


def test_epanechnikov_moments():
    assert kernel_l2(EPA) == pytest.approx(0.6, rel=1e-12)
    assert kernel_second_moment(EPA) == pytest.approx(0.2, rel=1e-12)


def test_user_kernel_validation():
    with pytest.raises(DomainError):
        user_kernel(lambda u: 0.5 * (1 - u * u), lambda u: -u)  # mass 2/3
    with pytest.raises(DomainError):
        get_kernel("uniform")
    k = user_kernel(lambda u: 0.75 * (1 - u * u), lambda u: -1.5 * u, "mine")
    assert k.name == "mine"


def test_constant_signal():
    n, h = 10_000, 0.05
    y = np.full(n, 3.0)
    nh = n * h
    bound = (EPA.sup_k_prime + 2 * EPA.sup_k) / nh
    for x0 in [0.2, 0.5, 0.731]:
        assert abs(priestley_chao(y, x0, h, EPA) / 3.0 - 1) <= bound


def test_linear_trend_is_unbiased_at_centre():
    n = 10_000
    y = np.arange(1, n + 1) / n
    assert abs(priestley_chao(y, 0.5, 0.05, EPA) - 0.5) <= 1e-3


def test_curvature_bias():
    n, h = 10_000, 0.05
    y = np.sin(2 * np.pi * np.arange(1, n + 1) / n)
    bias = priestley_chao(y, 0.25, h, EPA) - 1.0
    predicted = 0.5 * h * h * (-4 * math.pi**2) * kernel_second_moment(EPA)
    assert bias == pytest.approx(predicted, rel=0.2)


@given(st.floats(-5, 5), st.floats(-5, 5), st.integers(0, 2**32 - 1))
@settings(max_examples=30, deadline=None)
def test_estimator_linearity(a, b, seed):
    rng = np.random.default_rng(seed)
    y1, y2 = rng.standard_normal(2000), rng.standard_normal(2000)
    lhs = priestley_chao(a * y1 + b * y2, 0.4, 0.1, EPA)
    rhs = a * priestley_chao(y1, 0.4, 0.1, EPA) + b * priestley_chao(y2, 0.4, 0.1, EPA)
    assert lhs == pytest.approx(rhs, abs=1e-12 * (1 + abs(a) + abs(b)))


def test_boundary_refusal():
    y = np.ones(1000)
    with pytest.raises(DomainError):
        priestley_chao(y, 0.05, 0.05, EPA)
    with pytest.raises(DomainError):
        RegressionDesign(1000, 0.1, (0.5, 0.95))
    with pytest.raises(DomainError):
        RegressionDesign(10, 0.05, (0.5,))


def test_scale_factor_examples():
    strong = TemperingRegime.power(1.0, 0.8)
    assert scale_factor(strong, 10_000, 0.1, 0.3) == pytest.approx(1e4 ** -0.24 / math.sqrt(1e3), rel=1e-12)
    weak = TemperingRegime.power(1.0, 1.5)
    assert scale_factor(weak, 10_000, 0.1, 0.3) == pytest.approx(10 ** (-3 * 0.8), rel=1e-12)
    moderate = TemperingRegime.window(1.0)
    assert scale_factor(moderate, 10_000, 0.1, 0.3) == pytest.approx(10 ** (-3 * 0.8), rel=1e-12)
    for reg in (strong, weak, moderate):
        assert scale_factor(reg, 10_000, 0.1, 0.0) == pytest.approx(1 / math.sqrt(1e3), rel=1e-12)


def test_strong_variance_is_kernel_energy():
    for d in (-0.3, 0.0, 0.3, 0.7):
        assert asymptotic_variance("strong", d, None, 2.0, EPA) == pytest.approx(1.2, rel=1e-12)


def test_moderate_variance_unit_order():
    double = quad_2d_singular_diagonal(
        lambda u, v: float(EPA(u) * EPA(v)) * math.exp(-abs(u - v)), (-1, 1, -1, 1))
    assert asymptotic_variance("moderate", 1.0, 1.0, 1.0, EPA, "printed") == pytest.approx(double, rel=1e-8)
    assert asymptotic_variance("moderate", 1.0, 1.0, 1.0, EPA) == pytest.approx(0.5 * double, rel=1e-8)


@pytest.mark.parametrize("d", [0.15, 0.3, 0.45])
def test_consistent_variances_match_operator_form(d):
    assert asymptotic_variance("moderate", d, 1.0, 1.0, EPA) == pytest.approx(
        operator_form_variance(d, 1.0, 1.0, EPA), rel=1e-5)
    assert asymptotic_variance("weak", d, None, 1.0, EPA) == pytest.approx(
        operator_form_variance(d, 0.0, 1.0, EPA), rel=1e-5)


def test_weak_variance_near_zero_memory():
    d = 0.01
    oracle = quad_2d_singular_diagonal(
        lambda u, v: float(EPA(u) * EPA(v)) * abs(u - v) ** (2 * d - 1) if u != v else 0.0,
        (-1, 1, -1, 1), 2 * d - 1)
    assert asymptotic_variance("weak", d, None, 1.0, EPA, "printed") == pytest.approx(oracle, rel=1e-6)
    # the consistent constant keeps the limit continuous at d = 0
    assert asymptotic_variance("weak", d, None, 1.0, EPA) == pytest.approx(0.6, rel=0.1)


def test_moderate_variance_decreases_in_tempering():
    lams = np.linspace(0.5, 4.0, 8)
    v = [asymptotic_variance("moderate", 0.3, lam, 1.0, EPA) for lam in lams]
    assert np.all(np.diff(v) < 0)


def test_variance_accepts_regime_objects():
    reg = TemperingRegime.window(2.0)
    assert asymptotic_variance(reg, 0.3, None, 1.0, EPA) == asymptotic_variance("moderate", 0.3, 2.0, 1.0, EPA)
    with pytest.raises(DomainError):
        asymptotic_variance("weak", 0.6, None, 1.0, EPA)
    with pytest.raises(DomainError):
        asymptotic_variance("moderate", 0.3, 0.0, 1.0, EPA)
    with pytest.raises(DomainError):
        asymptotic_variance("sideways", 0.3, 1.0, 1.0, EPA)


def test_optimal_bandwidth():
    n, m2 = 10_000, 8 * math.pi**4
    classical = (0.6 / (0.04 * m2)) ** 0.2 * n ** -0.2
    assert optimal_bandwidth(0.0, 0.5, EPA, m2, n) == pytest.approx(classical, rel=1e-12)
    hs = [optimal_bandwidth(d, 0.025, EPA, m2, n) for d in np.linspace(0, 0.4, 9)]
    assert all(h > 0 for h in hs)
    assert np.all(np.diff(hs) > 0)
    with pytest.raises(DomainError):
        optimal_bandwidth(0.3, 0.5, EPA, 0.0, n)
    with pytest.raises(DomainError):
        optimal_bandwidth(0.3, 0.0, EPA, m2, n)


def test_fit_export(tmp_path):
    n = 2000
    m = lambda x: np.sin(2 * np.pi * x)
    y = m(np.arange(1, n + 1) / n)
    fit = fit_kernel(y, [0.3, 0.5], 0.1, EPA, m=m, regime=TemperingRegime.window(1.0), d=0.3)
    np.testing.assert_array_equal(fit.estimate, fit.center)
    assert fit.scale == pytest.approx(200 ** (0.5 - 0.3))
    target = tmp_path / "fit.csv"
    fit.to_csv(target)
    rows = list(csv.reader(open(target)))
    assert rows[0] == ["x", "estimate", "center", "scale"]
    assert len(rows) == 3


def test_weighted_sum_brownian_case():
    res = weighted_sum_limit_check(ProcessSpec(0.0), TemperingRegime.window(1.0), 2**13, EPA,
                                   SeedTree(31), 2000)
    assert 0.9 <= res.ratio <= 1.1
    assert res.theory == pytest.approx(0.6)


@pytest.mark.slow
def test_weighted_sum_tempered_case():
    res = weighted_sum_limit_check(ProcessSpec(0.3), TemperingRegime.window(1.0), 2**12, EPA,
                                   SeedTree(32), 1500)
    assert 0.85 <= res.ratio <= 1.15
    assert res.rhs_var == pytest.approx(res.theory, rel=0.12)
