"""Special functions, quadrature, jittered Cholesky and seeded Gaussian streams."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import integrate, special

from .errors import CholeskyError, ConvergenceError, DomainError


@dataclass(frozen=True)
class QuadratureSpec:
    """Tolerances for the adaptive quadrature wrappers."""

    abs_tol: float = 1e-10
    rel_tol: float = 1e-8
    max_subdivisions: int = 200

    def __post_init__(self):
        if not (self.abs_tol > 0 and self.rel_tol > 0):
            raise DomainError("quadrature tolerances must be positive")
        if self.max_subdivisions < 1:
            raise DomainError("max_subdivisions must be >= 1")


DEFAULT_QUAD = QuadratureSpec()


@dataclass(frozen=True)
class SeedTree:
    """Address of an independent random stream.

    The stream for ``(master_seed, path)`` is a Philox generator keyed by
    a ``SeedSequence`` whose spawn key is ``path``. Philox is counter-based,
    so each stream can be regenerated on its own in any order or thread.
    """

    master_seed: int
    path: tuple[int, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if not 0 <= int(self.master_seed) < 2**64:
            raise DomainError("master_seed must fit in 64 unsigned bits")
        object.__setattr__(self, "path", tuple(int(p) for p in self.path))
        if any(p < 0 for p in self.path):
            raise DomainError("seed path entries must be non-negative")

    def child(self, *indices: int) -> "SeedTree":
        return SeedTree(self.master_seed, self.path + tuple(indices))

    def generator(self) -> np.random.Generator:
        seq = np.random.SeedSequence(entropy=int(self.master_seed), spawn_key=self.path)
        return np.random.Generator(np.random.Philox(seq))


def gaussian_stream(tree: SeedTree, n: int) -> np.ndarray:
    """Return ``n`` standard normal variates determined by ``tree``."""
    if n < 1:
        raise DomainError("n must be >= 1")
    return tree.generator().standard_normal(int(n))


def log_gamma(x):
    """Natural log of the gamma function for positive arguments."""
    arr = np.asarray(x, dtype=float)
    if np.any(~(arr > 0)):
        raise DomainError("log_gamma requires x > 0")
    out = special.gammaln(arr)
    return float(out) if out.ndim == 0 else out


# Bernoulli-number coefficients B_{2n} / (2n (2n-1)) of the Stirling series.
_STIRLING = (1 / 12, -1 / 360, 1 / 1260, -1 / 1680, 1 / 1188, -691 / 360360, 1 / 156)


def log_gamma_ratio(x, a):
    """Compute ``ln Γ(x + a) − ln Γ(x)`` without the cancellation of two lgamma calls.

    Parameters
    ----------
    x : array_like
        Positive arguments.
    a : float
        Shift with ``x + a > 0``.

    Notes
    -----
    For ``x >= 20`` the Stirling expansions of both terms are subtracted
    analytically, leaving ``a ln x + (x + a − ½) log1p(a/x) − a`` plus a short
    correction series. Smaller arguments fall back to ``gammaln``.
    """
    x = np.asarray(x, dtype=float)
    if np.any(x <= 0) or np.any(x + a <= 0):
        raise DomainError("log_gamma_ratio needs x > 0 and x + a > 0")
    out = np.empty_like(x)
    small = x < 20
    out[small] = special.gammaln(x[small] + a) - special.gammaln(x[small])
    xl = x[~small]
    xa = xl + a
    val = a * np.log(xl) + (xa - 0.5) * np.log1p(a / xl) - a
    for n, c in enumerate(_STIRLING, start=1):
        p = 2 * n - 1
        val += c * (xa ** (-p) - xl ** (-p))
    out[~small] = val
    return float(out) if out.ndim == 0 else out


def bessel_k(nu: float, x):
    """Modified Bessel function of the second kind ``K_nu(x)`` for real order.

    ``K_{-nu} = K_nu`` is applied before evaluation, so both signs share one path.
    """
    arr = np.asarray(x, dtype=float)
    if np.any(~(arr > 0)):
        raise DomainError("bessel_k requires x > 0")
    out = special.kv(abs(float(nu)), arr)
    return float(out) if out.ndim == 0 else out


def _quad_piece(f, a, b, spec: QuadratureSpec, **kw) -> float:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", integrate.IntegrationWarning)
        res = integrate.quad(
            f, a, b, epsabs=spec.abs_tol, epsrel=spec.rel_tol,
            limit=spec.max_subdivisions, full_output=1, **kw,
        )
    val, err = res[0], res[1]
    if len(res) > 3:  # QUADPACK flagged a problem
        if not np.isfinite(val) or err > 100 * max(spec.abs_tol, spec.rel_tol * abs(val)):
            raise ConvergenceError(
                f"quadrature on [{a}, {b}] did not converge: estimate {val}, error {err}"
            )
    return float(val)


def quad_1d(
    f: Callable[[float], float],
    a: float,
    b: float,
    spec: QuadratureSpec = DEFAULT_QUAD,
    points: Sequence[float] | None = None,
) -> float:
    """Adaptive Gauss–Kronrod integral of ``f`` over ``[a, b]``.

    Parameters
    ----------
    f : callable
        Scalar integrand. Integrable endpoint singularities of power type are
        fine; interior ones must be listed in ``points``.
    a, b : float
        Limits, may be infinite.
    spec : QuadratureSpec
    points : sequence of float, optional
        Interior break points. The interval is split there so that each
        singular or kink point becomes an endpoint of a sub-integral.

    Raises
    ------
    ConvergenceError
        If a sub-integral exhausts ``spec.max_subdivisions`` without meeting
        the tolerances.
    """
    if not a < b:
        if a == b:
            return 0.0
        raise DomainError("quad_1d requires a < b")
    cuts = sorted({float(p) for p in (points or ()) if a < p < b})
    edges = [a, *cuts, b]
    return sum(_quad_piece(f, lo, hi, spec) for lo, hi in zip(edges[:-1], edges[1:]))


def quad_fourier_tail(f: Callable[[float], float], a: float, freq: float,
                      spec: QuadratureSpec = DEFAULT_QUAD) -> float:
    """``∫_a^∞ f(x) cos(freq·x) dx`` for slowly varying, decaying ``f`` (QUADPACK QAWF).

    ``freq = 0`` falls back to the plain semi-infinite integral.
    """
    if freq == 0:
        return _quad_piece(f, a, np.inf, spec)
    return _quad_piece(f, a, np.inf, spec, weight="cos", wvar=abs(freq))


def quad_2d_singular_diagonal(
    g: Callable[[float, float], float],
    domain: tuple[float, float, float, float],
    singularity_exponent: float = 0.0,
    spec: QuadratureSpec = DEFAULT_QUAD,
) -> float:
    """Integrate ``g(u, v)`` over ``[u0, u1] × [v0, v1]`` with a singular diagonal.

    The inner integral in ``v`` is split at ``v = u``; the outer integral is
    split where the diagonal enters and leaves the rectangle.
    """
    if not singularity_exponent > -1:
        raise DomainError("diagonal singularity exponent must exceed -1")
    u0, u1, v0, v1 = map(float, domain)

    def inner(u):
        return quad_1d(lambda v: g(u, v), v0, v1, spec, points=[u])

    return quad_1d(inner, u0, u1, spec, points=[v0, v1])


def quad_difference_kernel(
    f1: Callable[[np.ndarray], np.ndarray],
    support1: tuple[float, float],
    f2: Callable[[np.ndarray], np.ndarray],
    support2: tuple[float, float],
    kernel: Callable[[float], float],
    spec: QuadratureSpec = DEFAULT_QUAD,
    breaks1: Sequence[float] = (),
    breaks2: Sequence[float] = (),
) -> float:
    """Compute ``∬ f1(u) f2(v) k(u − v) du dv`` through a one-dimensional reduction.

    Substituting ``x = u − v`` gives ``∫ k(x) A(x) dx`` with the overlap
    integral ``A(x) = ∫ f1(u) f2(u − x) du``. ``A`` is evaluated with
    fixed Gauss–Legendre rules on the pieces between break points, which is
    exact for piecewise polynomials of moderate degree; the outer integral is
    adaptive and split at ``x = 0`` where ``k`` may be singular.

    ``f1`` and ``f2`` must be vectorized and smooth between their break
    points (support ends are always treated as breaks).
    """
    a1, b1 = support1
    a2, b2 = support2
    b1s = sorted({a1, b1, *[t for t in breaks1 if a1 < t < b1]})
    b2s = sorted({a2, b2, *[t for t in breaks2 if a2 < t < b2]})
    nodes, weights = np.polynomial.legendre.leggauss(16)

    def overlap(x):
        # u ranges over support1 ∩ (support2 + x)
        cuts = sorted({*b1s, *(t + x for t in b2s)})
        lo, hi = max(a1, a2 + x), min(b1, b2 + x)
        if hi <= lo:
            return 0.0
        cuts = [lo, *[c for c in cuts if lo < c < hi], hi]
        total = 0.0
        for c0, c1 in zip(cuts[:-1], cuts[1:]):
            half = 0.5 * (c1 - c0)
            u = c0 + half * (nodes + 1)
            total += half * float(np.dot(weights, f1(u) * f2(u - x)))
        return total

    x_breaks = sorted({0.0, *[s - t for s in b1s for t in b2s]})
    lo, hi = a1 - b2, b1 - a2
    return quad_1d(lambda x: kernel(x) * overlap(x) if x != 0 else 0.0, lo, hi, spec,
                   points=x_breaks)


def cholesky(m: np.ndarray, max_rel_jitter: float = 1e-10) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor of a symmetric PSD matrix with bounded diagonal jitter.

    Returns
    -------
    L : ndarray
        Lower-triangular factor with ``L @ L.T = m + eps * I``.
    eps : float
        Jitter actually added; zero when ``m`` factors as given.

    Raises
    ------
    CholeskyError
        If ``m`` does not factor with ``eps <= max_rel_jitter * trace(m) / n``.
    """
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise DomainError("cholesky needs a square matrix")
    n = m.shape[0]
    scale = np.max(np.abs(m)) if m.size else 0.0
    if not np.allclose(m, m.T, rtol=0.0, atol=1e-12 * max(scale, 1e-300)):
        raise DomainError("cholesky needs a symmetric matrix")
    budget = max_rel_jitter * np.trace(m) / n
    eps = 0.0
    trial = budget * 1e-6
    while True:
        try:
            return np.linalg.cholesky(m + eps * np.eye(n)), eps
        except np.linalg.LinAlgError:
            if trial > budget * (1 + 1e-12) or budget <= 0:
                raise CholeskyError(
                    f"matrix not positive definite within jitter budget {budget:.3g}"
                ) from None
            eps = min(trial, budget)
            trial *= 10.0


def gauss_legendre_01(k: int) -> tuple[np.ndarray, np.ndarray]:
    """Gauss–Legendre nodes and weights mapped to ``[0, 1]``."""
    x, w = np.polynomial.legendre.leggauss(k)
    return 0.5 * (x + 1.0), 0.5 * w
