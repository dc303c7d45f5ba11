import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flurlab.errors import CholeskyError, ConvergenceError, DomainError
from flurlab.numerics import (
    QuadratureSpec,
    SeedTree,
    bessel_k,
    cholesky,
    gaussian_stream,
    log_gamma,
    log_gamma_ratio,
    quad_1d,
    quad_2d_singular_diagonal,
    quad_difference_kernel,
)


def test_log_gamma_known_values():
    assert log_gamma(1.0) == 0.0
    assert log_gamma(0.5) == pytest.approx(math.log(math.sqrt(math.pi)), rel=1e-14)


def test_log_gamma_product_recurrence():
    # Γ(10.3) = Γ(0.3) · 0.3 · 1.3 ··· 9.3
    expected = log_gamma(0.3) + sum(math.log(0.3 + k) for k in range(10))
    assert log_gamma(10.3) == pytest.approx(expected, rel=1e-13)


@pytest.mark.parametrize("bad", [0.0, -1.0, -0.5])
def test_log_gamma_domain(bad):
    with pytest.raises(DomainError):
        log_gamma(bad)


def test_log_gamma_recurrence_band():
    x = np.linspace(0.1, 100, 2001)
    gap = np.abs(log_gamma(x + 1) - log_gamma(x) - np.log(x))
    assert gap.max() <= 1e-11


@pytest.mark.parametrize("a", [-1.7, -1.3, -0.7, 0.3, 0.5, 1.5])
def test_log_gamma_ratio_matches_mpmath(a):
    mpmath.mp.dps = 40
    for x in [1.0 - min(a, 0) + 0.1, 5.5, 19.9, 20.0, 137.25, 1e4 + 0.5, 1e6 + 1.0]:
        ref = float(mpmath.loggamma(mpmath.mpf(x) + mpmath.mpf(a)) - mpmath.loggamma(x))
        got = log_gamma_ratio(x, a)
        assert abs(got - ref) <= 2e-14 * max(1.0, abs(ref))


def test_bessel_half_order_closed_form():
    ref = math.sqrt(math.pi / 2) * math.exp(-1.0)
    assert bessel_k(0.5, 1.0) == pytest.approx(ref, rel=1e-14)
    assert bessel_k(-0.5, 1.0) == bessel_k(0.5, 1.0)


def test_bessel_against_high_precision():
    mpmath.mp.dps = 40
    rng = np.random.default_rng(3)
    nus = rng.uniform(-5, 5, 40)
    xs = np.exp(rng.uniform(np.log(1e-8), np.log(50), 40))
    for nu, x in [(0.2, 2.0), *zip(nus, xs)]:
        ref = float(mpmath.besselk(nu, x))
        assert bessel_k(nu, x) == pytest.approx(ref, rel=1e-10)


@given(st.floats(-5, 5), st.floats(1e-3, 40))
@settings(max_examples=60, deadline=None)
def test_bessel_symmetry_exact(nu, x):
    assert bessel_k(nu, x) == bessel_k(-nu, x)


@pytest.mark.parametrize("nu", [-3.0, -0.2, 0.0, 0.7, 2.5])
def test_bessel_large_argument_band(nu):
    for x in [10.0, 20.0, 45.0]:
        k = bessel_k(nu, x)
        assert abs(k - math.sqrt(math.pi / (2 * x)) * math.exp(-x)) / k <= 0.1 + 0.35 * abs(nu) ** 2 / x


def test_bessel_domain():
    with pytest.raises(DomainError):
        bessel_k(0.3, 0.0)


def test_quad_1d_basics():
    assert quad_1d(lambda u: 1.0, 0, 1) == pytest.approx(1.0, abs=1e-14)
    assert quad_1d(lambda u: u ** -0.4, 0, 1) == pytest.approx(1 / 0.6, rel=1e-9)
    assert quad_1d(lambda u: 3.0, 2, 2) == 0.0


def test_quad_1d_oscillatory_oracle():
    f = lambda u: np.cos(u) / (1 + u * u) ** 0.8
    n = 10**6
    u = np.linspace(0, 10, n + 1)
    y = f(u)
    # composite Simpson on 10^6 panels
    ref = (10 / n / 3) * (y[0] + y[-1] + 4 * y[1:-1:2].sum() + 2 * y[2:-1:2].sum())
    assert quad_1d(f, 0, 10) == pytest.approx(ref, rel=1e-9)


def test_quad_1d_interior_singularity():
    val = quad_1d(lambda u: abs(u - 0.3) ** -0.5, 0, 1, points=[0.3])
    assert val == pytest.approx(2 * (math.sqrt(0.3) + math.sqrt(0.7)), rel=1e-9)


def test_quad_1d_reports_non_convergence():
    spec = QuadratureSpec(abs_tol=1e-14, rel_tol=1e-14, max_subdivisions=1)
    with pytest.raises(ConvergenceError):
        quad_1d(lambda u: np.sin(1 / u) if u else 0.0, 0.0, 1.0, spec)


def test_quadrature_spec_validation():
    with pytest.raises(DomainError):
        QuadratureSpec(abs_tol=0)
    with pytest.raises(DomainError):
        QuadratureSpec(max_subdivisions=0)


def test_quad_2d_constant_and_power():
    assert quad_2d_singular_diagonal(lambda u, v: 1.0, (0, 1, 0, 1)) == pytest.approx(1.0)
    val = quad_2d_singular_diagonal(lambda u, v: abs(u - v) ** -0.4 if u != v else 0.0,
                                    (0, 1, 0, 1), -0.4)
    assert val == pytest.approx(2 / (0.6 * 1.6), rel=1e-8)


def test_quad_2d_exponential_against_midpoint():
    m = 2000
    c = (np.arange(m) + 0.5) / m
    ref = np.exp(-np.abs(c[:, None] - c[None, :])).mean()
    val = quad_2d_singular_diagonal(lambda u, v: math.exp(-abs(u - v)), (0, 1, 0, 1))
    assert val == pytest.approx(2 * math.exp(-1), rel=1e-10)
    assert val == pytest.approx(ref, rel=1e-6)


def test_quad_2d_separable_equals_iterated():
    fu = lambda u: math.exp(u)
    fv = lambda v: v * v
    sep = quad_2d_singular_diagonal(lambda u, v: fu(u) * fv(v), (0, 1, -1, 2))
    assert sep == pytest.approx(quad_1d(fu, 0, 1) * quad_1d(fv, -1, 2), rel=1e-9)


def test_difference_kernel_matches_double_integral():
    k = lambda x: abs(x) ** -0.4 if x != 0 else 0.0
    f = lambda u: 0.75 * (1 - u * u)
    fast = quad_difference_kernel(f, (-1, 1), f, (-1, 1), k)
    slow = quad_2d_singular_diagonal(lambda u, v: f(u) * f(v) * k(u - v), (-1, 1, -1, 1), -0.4)
    assert fast == pytest.approx(slow, rel=1e-8)


def test_difference_kernel_disjoint_supports_with_breaks():
    f1 = lambda u: np.where(u > 0.5, u - 0.5, 0.0)
    f2 = lambda v: np.ones_like(v)
    k = lambda x: math.exp(-abs(x))
    fast = quad_difference_kernel(f1, (0, 1), f2, (2, 3), k, breaks1=[0.5])
    slow = quad_1d(lambda u: quad_1d(lambda v: max(u - 0.5, 0) * k(u - v), 2, 3), 0, 1,
                   points=[0.5])
    assert fast == pytest.approx(slow, rel=1e-9)


def test_cholesky_small_cases():
    l, eps = cholesky(np.eye(3))
    assert eps == 0.0
    np.testing.assert_array_equal(l, np.eye(3))
    l, eps = cholesky(np.array([[4.0, 2.0], [2.0, 3.0]]))
    np.testing.assert_allclose(l, [[2, 0], [1, math.sqrt(2)]], atol=1e-15)


def test_cholesky_jitter_on_singular_psd():
    v = np.arange(1.0, 6.0)
    m = np.outer(v, v)  # rank one
    l, eps = cholesky(m)
    assert 0 < eps <= 1e-10 * np.trace(m) / 5
    np.testing.assert_allclose(l @ l.T, m + eps * np.eye(5), atol=1e-10)


def test_cholesky_rejects_indefinite_and_asymmetric():
    with pytest.raises(CholeskyError):
        cholesky(np.array([[1.0, 0.0], [0.0, -1.0]]))
    with pytest.raises(DomainError):
        cholesky(np.array([[1.0, 0.5], [0.0, 1.0]]))


def test_gaussian_stream_determinism_and_independence():
    a = gaussian_stream(SeedTree(7, (0,)), 10**6)
    b = gaussian_stream(SeedTree(7, (0,)), 10**6)
    c = gaussian_stream(SeedTree(7, (1,)), 10**6)
    np.testing.assert_array_equal(a, b)
    n = a.size
    assert abs(np.corrcoef(a, c)[0, 1]) < 4 / math.sqrt(n)
    assert abs(a.mean()) < 4 / math.sqrt(n)
    assert abs(a.var() - 1) < 0.01


def test_gaussian_stream_thread_invariance():
    from concurrent.futures import ThreadPoolExecutor

    trees = [SeedTree(11, (r,)) for r in range(16)]
    serial = [gaussian_stream(t, 500) for t in trees]
    with ThreadPoolExecutor(4) as ex:
        par = list(ex.map(lambda t: gaussian_stream(t, 500), reversed(trees)))[::-1]
    for s, p in zip(serial, par):
        np.testing.assert_array_equal(s, p)


def test_seed_tree_child_path():
    assert SeedTree(3).child(2, 5) == SeedTree(3, (2, 5))
    with pytest.raises(DomainError):
        SeedTree(-1)
