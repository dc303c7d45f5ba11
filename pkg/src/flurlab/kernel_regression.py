"""Priestley–Chao smoothing under tempered long-memory errors.

For the fixed design ``Y(j) = m(j/N) + X(j)`` the estimator is
``m̂(x) = (Nh)^{-1} Σ_j K((Nx − j)/(Nh)) Y(j)``. Its centred version
``A·Nh·(m̂ − E m̂)`` is asymptotically normal, where ``A`` is
:func:`scale_factor` and the limit variance depends on how fast the
tempering vanishes relative to the window ``Nh``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy import special

from .errors import DomainError
from .flur_process import ProcessSimulator, ProcessSpec, TemperingRegime
from .numerics import (
    QuadratureSpec,
    SeedTree,
    bessel_k,
    quad_1d,
    quad_difference_kernel,
)
from .tfbm2 import CholeskySampler, TfbmParams
from .tfcalc import SampledFunction, tfi_inner

_TIGHT = QuadratureSpec(abs_tol=1e-13, rel_tol=1e-11, max_subdivisions=500)


@dataclass(frozen=True)
class KernelSpec:
    """Symmetric density on ``[−1, 1]`` with a bounded derivative."""

    name: str
    k: Callable[[np.ndarray], np.ndarray]
    k_prime: Callable[[np.ndarray], np.ndarray]
    support: tuple[float, float] = (-1.0, 1.0)

    def __call__(self, u):
        u = np.asarray(u, dtype=float)
        return np.where(np.abs(u) <= 1.0, self.k(np.clip(u, -1, 1)), 0.0)

    def derivative(self, u):
        u = np.asarray(u, dtype=float)
        return np.where(np.abs(u) <= 1.0, self.k_prime(np.clip(u, -1, 1)), 0.0)

    def validate(self, tol: float = 1e-10) -> None:
        if tuple(self.support) != (-1.0, 1.0):
            raise DomainError("kernels must be supported on [-1, 1]")
        mass = quad_1d(lambda u: float(self(u)), -1.0, 1.0, _TIGHT)
        if abs(mass - 1.0) > tol:
            raise DomainError(f"kernel {self.name!r} integrates to {mass!r}, not 1")
        u = np.linspace(0.0, 1.0, 201)
        if np.max(np.abs(self(u) - self(-u))) > 1e-12:
            raise DomainError(f"kernel {self.name!r} is not symmetric")
        if not np.all(np.isfinite(self.derivative(np.linspace(-1, 1, 401)))):
            raise DomainError(f"kernel {self.name!r} has an unbounded derivative")

    @property
    def sup_k(self) -> float:
        return float(np.max(self(np.linspace(-1, 1, 2001))))

    @property
    def sup_k_prime(self) -> float:
        return float(np.max(np.abs(self.derivative(np.linspace(-1, 1, 2001)))))


def _poly_kernel(name: str, c: float, power: int) -> KernelSpec:
    # c (1 − u²)^power
    k = lambda u: c * (1 - u * u) ** power
    kp = lambda u: -2 * power * c * u * (1 - u * u) ** (power - 1)
    return KernelSpec(name, k, kp)


KERNELS = {
    "epanechnikov": _poly_kernel("epanechnikov", 0.75, 1),
    "biweight": _poly_kernel("biweight", 15 / 16, 2),
    "triweight": _poly_kernel("triweight", 35 / 32, 3),
    "cosine": KernelSpec(
        "cosine",
        lambda u: (math.pi / 4) * np.cos(math.pi * u / 2),
        lambda u: -(math.pi**2 / 8) * np.sin(math.pi * u / 2),
    ),
}


def get_kernel(name: str) -> KernelSpec:
    try:
        return KERNELS[name.lower()]
    except KeyError:
        raise DomainError(f"unknown kernel {name!r}; choose from {sorted(KERNELS)}") from None


def user_kernel(k, k_prime, name: str = "user") -> KernelSpec:
    spec = KernelSpec(name, k, k_prime)
    spec.validate()
    return spec


def kernel_l2(kernel: KernelSpec) -> float:
    """``∫ K²``."""
    return quad_1d(lambda u: float(kernel(u)) ** 2, -1.0, 1.0, _TIGHT)


def kernel_second_moment(kernel: KernelSpec) -> float:
    """``∫ u² K(u) du``."""
    return quad_1d(lambda u: u * u * float(kernel(u)), -1.0, 1.0, _TIGHT)


@dataclass(frozen=True)
class RegressionDesign:
    n: int
    h: float
    x_points: tuple[float, ...]
    m: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def __post_init__(self):
        object.__setattr__(self, "x_points", tuple(float(x) for x in self.x_points))
        if self.n < 1 or not 0 < self.h < 1:
            raise DomainError("need n >= 1 and 0 < h < 1")
        if self.n * self.h < 1:
            raise DomainError("n·h must be >= 1")
        for x in self.x_points:
            _check_interior(x, self.h)


def _check_interior(x0: float, h: float) -> None:
    if not (x0 - h > 0 and x0 + h < 1):
        raise DomainError(f"x0 = {x0} is within h = {h} of the boundary")


def window_weights(n: int, x0: float, h: float, kernel: KernelSpec) -> tuple[np.ndarray, np.ndarray]:
    """Indices ``j`` (1-based) with non-zero weight and the weights ``K((Nx0 − j)/(Nh))/(Nh)``."""
    nh = n * h
    lo = max(1, int(math.floor(n * x0 - nh)))
    hi = min(n, int(math.ceil(n * x0 + nh)))
    j = np.arange(lo, hi + 1)
    return j, kernel((n * x0 - j) / nh) / nh


def priestley_chao(y, x0: float, h: float, kernel: KernelSpec) -> float:
    """``(Nh)^{-1} Σ_j K((N x0 − j)/(Nh)) y(j)`` with ``y`` indexed from ``j = 1``.

    Only the indices inside the kernel window are touched.
    """
    y = np.asarray(y, dtype=float)
    _check_interior(x0, h)
    j, w = window_weights(y.size, x0, h, kernel)
    return float(np.dot(w, y[j - 1]))


def scale_factor(regime: TemperingRegime, n: int, h: float, d: float) -> float:
    """Normalization ``A`` of the window sum ``Σ K X``.

    ``λ_N^d / √(Nh)`` under strong tempering, ``(Nh)^{−(d+1/2)}`` otherwise.
    ``A·Nh·(m̂ − E m̂)`` has a non-degenerate normal limit.
    """
    nh = n * h
    if regime.label == "strongly":
        return regime.lambda_at(n, h) ** d / math.sqrt(nh)
    return nh ** -(d + 0.5)


_CASES = {"strong": "strongly", "weak": "weakly", "moderate": "moderately"}


def _case_of(regime) -> tuple[str, float]:
    if isinstance(regime, TemperingRegime):
        return regime.label, regime.lambda_star
    label = _CASES.get(str(regime), str(regime))
    if label not in _CASES.values():
        raise DomainError(f"unknown regime {regime!r}")
    return label, math.nan


def weak_memory_constant(d: float) -> float:
    """``Γ(1−2d)/(Γ(d)Γ(1−d))``: the covariance density of the untempered limit is this times ``|x|^{2d−1}``."""
    return special.gamma(1 - 2 * d) / (special.gamma(d) * special.gamma(1 - d))


def asymptotic_variance(regime, d: float, lambda_star: float | None, sigma2: float,
                        kernel: KernelSpec, convention: str = "consistent",
                        spec: QuadratureSpec = _TIGHT) -> float:
    """Limit variance of ``A·Nh·(m̂(x) − E m̂(x))``.

    Parameters
    ----------
    regime : TemperingRegime or {"strong", "weak", "moderate"}
    d, lambda_star, sigma2 : float
        ``lambda_star`` is read from the regime when one is given.
    kernel : KernelSpec
    convention : {"consistent", "printed"}
        ``"consistent"`` uses the covariance densities of the limit process,
        ``Γ(1−2d)/(Γ(d)Γ(1−d))·|x|^{2d−1}`` (weak) and
        ``|x|^{d−1/2}K_{d−1/2}(λ*|x|)/(√πΓ(d)(2λ*)^{d−1/2})`` (moderate).
        ``"printed"`` drops the first constant and doubles the second.

    Returns
    -------
    float
        ``σ²∫K²`` (strong), ``σ²∬K(u)K(v)ρ(u−v)`` otherwise.
    """
    if convention not in ("consistent", "printed"):
        raise DomainError(f"unknown convention {convention!r}")
    label, ls = _case_of(regime)
    if isinstance(regime, TemperingRegime):
        lambda_star = ls
    if label == "strongly":
        return sigma2 * kernel_l2(kernel)
    if label == "weakly":
        if not 0 < d < 0.5:
            raise DomainError("the weak-tempering variance needs 0 < d < 1/2")
        rho = lambda x: abs(x) ** (2 * d - 1) if x else 0.0
        c = weak_memory_constant(d) if convention == "consistent" else 1.0
    else:
        if not d > 0:
            raise DomainError("the moderate-tempering variance needs d > 0")
        if lambda_star is None or not 0 < lambda_star < math.inf:
            raise DomainError("the moderate case needs 0 < lambda* < inf")
        nu = d - 0.5
        lam = float(lambda_star)
        rho = lambda x: abs(x) ** nu * bessel_k(nu, lam * abs(x)) if x else 0.0
        c = 1.0 / (math.sqrt(math.pi) * math.gamma(d) * (2 * lam) ** nu)
        if convention == "printed":
            c *= 2.0
    val = quad_difference_kernel(kernel, (-1.0, 1.0), kernel, (-1.0, 1.0), rho, spec)
    return sigma2 * c * val


def operator_form_variance(d: float, lambda_star: float, sigma2: float, kernel: KernelSpec,
                           step: float = 2.0**-12) -> float:
    """``σ² ∫ (𝕀^{d,λ*}_− K)²``: the variance of ``∫ K dB`` computed through the integral operator.

    Valid for ``d > 0`` (``d < 1/2`` when ``λ* = 0``).
    """
    if not d > 0:
        raise DomainError("the operator form needs d > 0")
    f = SampledFunction.from_callable(kernel, -1.0, 1.0, step)
    return sigma2 * tfi_inner(f, f, d, lambda_star)


def optimal_bandwidth(d: float, lam: float, kernel: KernelSpec, m2_l2: float, n: int) -> float:
    """Plug-in bandwidth ``{(1−e^{−λ})^{−2d}∫K² / ((∫u²K)² ∫(m″)²)}^{1/5} N^{−1/5}`` for fixed ``λ > 0``."""
    if not lam > 0:
        raise DomainError("the plug-in bandwidth needs a fixed lambda > 0")
    if not m2_l2 > 0:
        raise DomainError("∫(m'')² must be > 0: a linear trend has no finite optimal bandwidth")
    if n < 1:
        raise DomainError("n must be >= 1")
    num = (1 - math.exp(-lam)) ** (-2 * d) * kernel_l2(kernel)
    den = kernel_second_moment(kernel) ** 2 * m2_l2
    return (num / den) ** 0.2 * n ** -0.2


@dataclass
class KernelFit:
    x: np.ndarray
    estimate: np.ndarray
    center: np.ndarray
    scale: float

    def to_csv(self, target) -> None:
        with open(target, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x", "estimate", "center", "scale"])
            for x, e, c in zip(self.x, self.estimate, self.center):
                w.writerow([f"{x:.17g}", f"{e:.17g}", f"{c:.17g}", f"{self.scale:.17g}"])


def fit_kernel(y, x_points, h: float, kernel: KernelSpec, m=None,
               regime: TemperingRegime | None = None, d: float = 0.0) -> KernelFit:
    """Evaluate ``m̂`` at ``x_points``; ``center`` is the noiseless ``E m̂`` when ``m`` is given."""
    y = np.asarray(y, dtype=float)
    n = y.size
    xs = np.asarray(x_points, dtype=float)
    est = np.array([priestley_chao(y, x, h, kernel) for x in xs])
    if m is not None:
        grid = m(np.arange(1, n + 1) / n)
        center = np.array([priestley_chao(grid, x, h, kernel) for x in xs])
    else:
        center = np.full(xs.size, np.nan)
    scale = math.nan if regime is None else scale_factor(regime, n, h, d) * n * h
    return KernelFit(xs, est, center, scale)


@dataclass
class WeightedSumComparison:
    lhs: np.ndarray
    rhs: np.ndarray
    lhs_var: float
    rhs_var: float
    ratio: float
    theory: float


def weighted_sum_limit_check(spec: ProcessSpec, regime: TemperingRegime, nh: int,
                             kernel: KernelSpec, seeds: SeedTree, replications: int,
                             grid_points: int = 513) -> WeightedSumComparison:
    """Compare ``(Nh)^{−(d+1/2)} Σ_j K((Nx−j)/(Nh)) X(j)`` with ``∫_0^2 K′(1−t) B(t) dt``.

    The left side only needs the ``2Nh + 1`` errors inside one window, which
    by stationarity are simulated directly with ``λ = λ*/(Nh)``. The right
    side integrates Cholesky-sampled limit paths on a uniform grid of
    ``[0, 2]`` by the trapezoid rule. Seeds ``child(0, r)`` and
    ``child(1, r)`` drive the two sides.
    """
    lam_star = regime.lambda_star
    if not 0 <= lam_star < math.inf:
        raise DomainError("the limit check needs a finite lambda*")
    d = spec.d
    if d < 0 or (d > 0 and lam_star == 0):
        raise DomainError("the limit check covers d = 0 and d > 0 with lambda* > 0")
    width = 2 * nh + 1
    sim = ProcessSimulator(spec, lam_star / nh, width)
    # window centred at index nh (0-based), u = (centre − j)/nh
    u = (nh - np.arange(width)) / nh
    w = kernel(u) * float(nh) ** -(d + 0.5)
    lhs = np.array([np.dot(w, sim.sample(seeds.child(0, r))) for r in range(replications)])

    t = np.linspace(0.0, 2.0, grid_points)
    sampler = CholeskySampler(TfbmParams(d, lam_star if lam_star > 0 else 1.0, spec.sigma**2), t)
    kp = kernel.derivative(1.0 - t)
    tw = np.full(t.size, t[1] - t[0])
    tw[[0, -1]] *= 0.5
    rhs = np.array([np.dot(tw * kp, sampler._draw(seeds.child(1, r))) for r in range(replications)])
    lv, rv = float(lhs.var()), float(rhs.var())
    if d == 0:
        theory = spec.sigma**2 * kernel_l2(kernel)
    else:
        theory = asymptotic_variance("moderate", d, lam_star, spec.sigma**2, kernel)
    return WeightedSumComparison(lhs, rhs, lv, rv, lv / rv, theory)
