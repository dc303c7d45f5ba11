"""Tempered fractional Brownian motion of the second kind.

``B(t) = Γ(d+1)^{-1} ∫ h(t; y) W(dy)`` with

``h(t; y) = (t−y)_+^d e^{−λ(t−y)_+} − (−y)_+^d e^{−λ(−y)_+} + λ ∫_0^t (s−y)_+^d e^{−λ(s−y)_+} ds``

and ``x_+^d = 0`` for ``x <= 0``. The normalization makes ``B`` the
distributional limit of ``N^{−(d+1/2)} S(⌊Nt⌋)`` for the tempered linear
process with ``Nλ_N → λ``, and matches the spectral form
``(1/2π) ∫ (e^{iωt}−1)(e^{−iωs}−1) ω^{−2} (λ² + ω²)^{−d} dω``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from scipy import special

from .errors import DomainError
from .flur_process import ProcessSimulator, ProcessSpec, TemperingRegime
from .numerics import (
    QuadratureSpec,
    SeedTree,
    cholesky,
    gauss_legendre_01,
    gaussian_stream,
    quad_1d,
    quad_2d_singular_diagonal,
    quad_fourier_tail,
)
from .tfcalc import SampledFunction, tfi

MAX_CHOLESKY_POINTS = 2048
_TIGHT = QuadratureSpec(abs_tol=1e-13, rel_tol=1e-11, max_subdivisions=500)


@dataclass(frozen=True)
class TfbmParams:
    d: float
    lam: float = 1.0
    sigma2: float = 1.0

    def __post_init__(self):
        if not self.d > -0.5:
            raise DomainError("TFBMII needs d > -1/2")
        if not self.lam >= 0:
            raise DomainError("lambda must be >= 0")
        if not self.sigma2 > 0:
            raise DomainError("sigma2 must be > 0")

    def _require_closed_form(self):
        if not (self.d > 0 and self.lam > 0):
            raise DomainError("the Bessel covariance needs d > 0 and lambda > 0")


@dataclass
class GridPath:
    times: np.ndarray
    values: np.ndarray
    params: TfbmParams
    jitter: float = 0.0

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.times.shape != self.values.shape:
            raise DomainError("times and values must have the same length")

    def to_csv(self, target) -> None:
        with open(target, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "value"])
            for t, v in zip(self.times, self.values):
                w.writerow([f"{t:.17g}", f"{v:.17g}"])


def _power_exp_primitive(d: float, lam: float, lo, hi):
    """``∫_lo^hi u^d e^{−λu} du`` for ``0 <= lo <= hi`` (arrays)."""
    lo, hi = np.broadcast_arrays(np.asarray(lo, float), np.asarray(hi, float))
    if lam == 0:
        return (hi ** (d + 1) - lo ** (d + 1)) / (d + 1)
    a = d + 1
    scale = special.gamma(a) / lam**a
    upper = lam * lo > a  # both arguments in the upper tail: difference of Q
    out = np.where(
        upper,
        special.gammaincc(a, lam * lo) - special.gammaincc(a, lam * hi),
        special.gammainc(a, lam * hi) - special.gammainc(a, lam * lo),
    )
    return scale * out


def _pos_power_exp(x, d: float, lam: float):
    x = np.asarray(x, dtype=float)
    pos = x > 0
    xp = np.where(pos, x, 1.0)
    return np.where(pos, xp**d * np.exp(-lam * xp), 0.0)


def kernel_h(params: TfbmParams, t: float, y, method: str = "gamma"):
    """Moving-average kernel ``h(t; y)``.

    ``method="gamma"`` evaluates the inner integral through regularized
    incomplete gamma functions; ``method="quad"`` integrates it adaptively.
    """
    d, lam = params.d, params.lam
    y_arr = np.asarray(y, dtype=float)
    if t == 0:
        return 0.0 if y_arr.ndim == 0 else np.zeros_like(y_arr)
    edge = _pos_power_exp(t - y_arr, d, lam) - _pos_power_exp(-y_arr, d, lam)
    if lam == 0:
        out = edge
    elif method == "gamma":
        lo = np.maximum(-y_arr, 0.0)
        hi = np.maximum(t - y_arr, 0.0)
        sgn = 1.0
        if t < 0:
            lo, hi, sgn = hi, lo, -1.0
        out = edge + sgn * lam * _power_exp_primitive(d, lam, lo, hi)
    elif method == "quad":
        def one(yy):
            f = lambda s: float(_pos_power_exp(s - yy, d, lam))
            a, b = min(0.0, t), max(0.0, t)
            integral = quad_1d(f, a, b, _TIGHT, points=[yy])
            return math.copysign(integral, t)

        inner = np.vectorize(one)(y_arr)
        out = edge + lam * inner
    else:
        raise DomainError(f"unknown kernel method {method!r}")
    return float(out) if np.ndim(out) == 0 else out


def tfi_indicator_identity_check(params: TfbmParams, t: float, y: float,
                                 min_cells: int = 4096) -> float:
    """``|Γ(d+1)·𝕀^{d,λ}_− 1_{[0,t]}(y) − h(t; y)|`` with the tfcalc integral.

    The grid is chosen so that ``y`` is a node whenever ``y/t`` is a fraction
    with denominator up to 4096; otherwise the nearest node is used and
    compared against ``h`` at that node.
    """
    if not params.d > 0:
        raise DomainError("the identity needs d > 0")
    if t == 0:
        return 0.0
    if t < 0:
        raise DomainError("t must be >= 0")
    q = Fraction(y / t).limit_denominator(4096).denominator
    cells = q * math.ceil(min_cells / q)
    step = t / cells
    f = SampledFunction.indicator(0.0, t, step)
    extent = max(0.0, -y) + step if params.lam == 0 else None
    if params.lam == 0 and params.d >= 0.5:
        extent = max(extent, 2 * step)
    g = tfi(f, params.d, params.lam, "-", extent=extent)
    if y > g.hi:
        node, value = y, 0.0
    elif y < g.lo:
        raise DomainError("y lies beyond the computed extent")
    else:
        k = int(round((y - g.lo) / step))
        node, value = g.lo + k * step, g.values[k]
    return abs(math.gamma(params.d + 1) * value - kernel_h(params, t, node))


def covariance_constant(d: float, lam: float, constant: str = "consistent") -> float:
    """Prefactor of ``∬ |u−v|^{d−1/2} K_{d−1/2}(λ|u−v|)``.

    ``"consistent"`` is ``1/(√π Γ(d) (2λ)^{d−1/2})``, the value that agrees with
    the kernel and spectral representations; ``"printed"`` is twice that.
    """
    base = 1.0 / (math.sqrt(math.pi) * math.gamma(d) * (2 * lam) ** (d - 0.5))
    if constant == "consistent":
        return base
    if constant == "printed":
        return 2 * base
    raise DomainError(f"unknown constant convention {constant!r}")


def increment_density(params: TfbmParams, x, constant: str = "consistent"):
    """``C |x|^{d−1/2} K_{d−1/2}(λ|x|)``: the density whose double integral is the covariance."""
    params._require_closed_form()
    nu = params.d - 0.5
    x = np.abs(np.asarray(x, dtype=float))
    c = covariance_constant(params.d, params.lam, constant) * params.sigma2
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        out = c * x**nu * special.kv(abs(nu), params.lam * x)
    return np.where(x > 0, np.nan_to_num(out, posinf=0.0), 0.0) if out.ndim else float(out)


def _square_integrals(params: TfbmParams, a: np.ndarray, constant: str) -> np.ndarray:
    """``V(a) = ∫_0^a ∫_0^a r(|u − v|) = 2 ∫_0^a (a − x) r(x) dx`` for sorted ``a >= 0``.

    The moments ``∫ r`` and ``∫ x r`` are accumulated over consecutive
    points; short well-separated cells use 20-point Gauss–Legendre and the
    rest adaptive quadrature.
    """
    r = lambda x: increment_density(params, x, constant)
    theta, wts = gauss_legendre_01(20)
    r0 = np.zeros(a.size)
    r1 = np.zeros(a.size)
    prev, acc0, acc1 = 0.0, 0.0, 0.0
    lo = np.concatenate(([0.0], a[:-1]))
    easy = (lo > 0) & (a <= 1.5 * lo)
    # vectorized pieces for the easy cells
    width = a - lo
    u = lo[:, None] + width[:, None] * theta
    dens = r(u) if easy.any() else np.zeros_like(u)
    p0 = np.where(easy, width * (dens * wts).sum(axis=1), 0.0)
    p1 = np.where(easy, width * (dens * u * wts).sum(axis=1), 0.0)
    for i, ai in enumerate(a):
        if ai > prev:
            if easy[i]:
                acc0 += p0[i]
                acc1 += p1[i]
            else:
                acc0 += quad_1d(lambda x: float(r(x)), prev, ai, _TIGHT)
                acc1 += quad_1d(lambda x: x * float(r(x)), prev, ai, _TIGHT)
            prev = ai
        r0[i], r1[i] = acc0, acc1
    return 2.0 * (a * r0 - r1)


def _covariance_from_lags(params: TfbmParams, t: np.ndarray, s: np.ndarray,
                          constant: str) -> np.ndarray:
    pts = np.concatenate([np.abs(t).ravel(), np.abs(s).ravel(), np.abs(t - s).ravel()])
    uniq, inv = np.unique(pts, return_inverse=True)
    v = _square_integrals(params, uniq, constant)[inv]
    k = t.size
    vt, vs, vd = v[:k], v[k:2 * k], v[2 * k:]
    return (0.5 * (vt + vs - vd)).reshape(t.shape)


def covariance(params: TfbmParams, t, s, constant: str = "consistent",
               method: str = "lags"):
    """``E B(t) B(s)`` from the Bessel-density double integral.

    Parameters
    ----------
    params : TfbmParams
        Needs ``d > 0`` and ``λ > 0``.
    t, s : float or array_like
        Non-negative times (broadcast together).
    constant : {"consistent", "printed"}
        Prefactor convention, see :func:`covariance_constant`.
    method : {"lags", "double"}
        ``"lags"`` reduces the double integral to one-dimensional integrals
        ``V(a) = ∬_{[0,a]²} r`` via ``2 E B(t)B(s) = V(t) + V(s) − V(|t−s|)``.
        ``"double"`` integrates over ``[0,t]×[0,s]`` directly (scalars only).
    """
    params._require_closed_form()
    t_arr, s_arr = np.broadcast_arrays(np.asarray(t, float), np.asarray(s, float))
    if np.any(t_arr < 0) or np.any(s_arr < 0):
        raise DomainError("times must be >= 0")
    if method == "double":
        if t_arr.ndim:
            raise DomainError("the double-integral route takes scalar times")
        tt, ss = float(t_arr), float(s_arr)
        if tt == 0 or ss == 0:
            return 0.0
        g = lambda u, v: float(increment_density(params, u - v, constant))
        return quad_2d_singular_diagonal(g, (0.0, tt, 0.0, ss), min(2 * params.d - 1, 0.0), _TIGHT)
    if method != "lags":
        raise DomainError(f"unknown covariance method {method!r}")
    out = _covariance_from_lags(params, t_arr, s_arr, constant)
    return float(out) if out.ndim == 0 else out


def covariance_matrix(params: TfbmParams, times, constant: str = "consistent") -> np.ndarray:
    """Covariance on a grid; ``d = 0`` gives Brownian motion ``σ² min(t, s)``."""
    t = np.asarray(times, dtype=float)
    if params.d == 0:
        return params.sigma2 * np.minimum(t[:, None], t[None, :])
    return covariance(params, t[:, None], t[None, :], constant)


def covariance_time_domain(params: TfbmParams, t: float, s: float,
                           spec: QuadratureSpec = _TIGHT) -> float:
    """``σ² ∫ h(t; y) h(s; y) dy / Γ(d+1)²`` by adaptive quadrature (any ``d > −1/2``).

    With ``λ = 0`` the integral converges only for ``|d| < 1/2``.
    """
    d, lam = params.d, params.lam
    if lam == 0 and not d < 0.5:
        raise DomainError("without tempering the kernel is square integrable only for d < 1/2")
    if t < 0 or s < 0:
        raise DomainError("times must be >= 0")
    if t == 0 or s == 0:
        return 0.0
    f = lambda y: kernel_h(params, t, y) * kernel_h(params, s, y)
    top = max(t, s)
    val = quad_1d(f, -math.inf, top, spec, points=[-1.0, 0.0, min(t, s)])
    return params.sigma2 * val / math.gamma(d + 1) ** 2


def covariance_harmonizable_oracle(params: TfbmParams, t: float, s: float,
                                   cutoff: float | None = None,
                                   spec: QuadratureSpec = _TIGHT) -> float:
    """Covariance from the spectral representation.

    ``(1/π) ∫_0^∞ [2sin²(ωt/2) + 2sin²(ωs/2) − 2sin²(ω(t−s)/2)] ω^{−2} (λ²+ω²)^{−d} dω``

    The range below ``cutoff`` is integrated directly, split every half
    period of the fastest oscillation. Above it the three cosines are
    handled by Fourier-weighted quadrature (QUADPACK QAWF), so no tail
    truncation is involved.
    """
    d, lam = params.d, params.lam
    if lam == 0 and not -0.5 < d < 0.5:
        raise DomainError("without tempering the spectral integral needs |d| < 1/2")
    if t < 0 or s < 0:
        raise DomainError("times must be >= 0")
    if t == 0 or s == 0:
        return 0.0
    freqs = [x for x in (t, s, abs(t - s)) if x > 0]
    fast = max(freqs)
    if cutoff is None:
        cutoff = 64 * math.pi / fast + 4 * lam
    spectral = lambda w: (lam * lam + w * w) ** (-d)

    def low(w):
        if w == 0:
            return 0.0
        num = 2 * (math.sin(w * t / 2) ** 2 + math.sin(w * s / 2) ** 2 - math.sin(w * (t - s) / 2) ** 2)
        return num / (w * w) * spectral(w)

    breaks = list(np.arange(1, math.floor(cutoff * fast / math.pi) + 1) * math.pi / fast)
    body = quad_1d(low, 0.0, cutoff, spec, points=breaks)
    base = lambda w: spectral(w) / (w * w)
    tail = quad_fourier_tail(base, cutoff, 0.0, spec)
    for freq, sign in ((t, -1.0), (s, -1.0), (t - s, 1.0)):
        tail += sign * quad_fourier_tail(base, cutoff, freq, spec)
    return params.sigma2 * (body + tail) / math.pi


class CholeskySampler:
    """Exact Gaussian sampler on a fixed time grid.

    ``t = 0`` entries are pinned to zero and left out of the factorization.
    """

    def __init__(self, params: TfbmParams, times, constant: str = "consistent",
                 max_rel_jitter: float = 1e-8):
        t = np.asarray(times, dtype=float)
        if t.ndim != 1 or t.size == 0:
            raise DomainError("times must be a non-empty vector")
        if t.size > MAX_CHOLESKY_POINTS:
            raise DomainError(f"at most {MAX_CHOLESKY_POINTS} grid points")
        if np.any(t < 0) or np.any(np.diff(t) <= 0):
            raise DomainError("times must be strictly increasing and >= 0")
        self.params, self.times = params, t
        self._active = t > 0
        ta = t[self._active]
        if ta.size:
            self.cov = covariance_matrix(params, ta, constant)
            self.chol, self.jitter = cholesky(self.cov, max_rel_jitter)
        else:
            self.cov = np.zeros((0, 0))
            self.chol, self.jitter = self.cov, 0.0

    def sample(self, seeds: SeedTree) -> GridPath:
        return GridPath(self.times, self._draw(seeds), self.params, self.jitter)

    def _draw(self, seeds: SeedTree) -> np.ndarray:
        out = np.zeros(self.times.size)
        m = self.chol.shape[0]
        if m:
            out[self._active] = self.chol @ gaussian_stream(seeds, m)
        return out

    def sample_many(self, seeds: SeedTree, replications: int) -> np.ndarray:
        """Rows are paths drawn from ``seeds.child(r)``, ``r = 0..R−1``."""
        return np.stack([self._draw(seeds.child(r)) for r in range(replications)])


def sample_path_cholesky(params: TfbmParams, times, seeds: SeedTree,
                         constant: str = "consistent") -> GridPath:
    return CholeskySampler(params, times, constant).sample(seeds)


class InvarianceSampler:
    """Normalized partial sums ``(Nh)^{−(d+1/2)} S(⌊Nh·t⌋)`` of a tempered linear process.

    The process is simulated with ``λ = λ*/(Nh)`` over ``⌈Nh·max(grid)⌉``
    steps, so its rescaled partial sums approximate TFBMII with tempering
    ``λ*``.
    """

    def __init__(self, spec: ProcessSpec, regime: TemperingRegime, nh: int, grid,
                 min_nh: int = 1024, **sim_kw):
        lam_star = regime.lambda_star
        if not 0 < lam_star < math.inf:
            raise DomainError("the invariance sampler needs 0 < lambda* < inf")
        if nh < min_nh:
            raise DomainError(f"nh must be >= {min_nh}")
        g = np.asarray(grid, dtype=float)
        if g.ndim != 1 or np.any(g < 0) or np.any(g > 2):
            raise DomainError("grid must lie in [0, 2]")
        self.spec, self.nh, self.grid = spec, int(nh), g
        self.lam = lam_star / self.nh
        self.index = np.floor(self.nh * g + 1e-9).astype(int)
        n = max(1, int(self.index.max()))
        self.sim = ProcessSimulator(spec, self.lam, n, **sim_kw)
        self.norm = float(self.nh) ** -(spec.d + 0.5)
        self.params = TfbmParams(spec.d, lam_star, spec.sigma**2)

    def _draw(self, seeds: SeedTree) -> np.ndarray:
        s = np.concatenate(([0.0], np.cumsum(self.sim.sample(seeds))))
        return self.norm * s[self.index]

    def sample(self, seeds: SeedTree) -> GridPath:
        return GridPath(self.grid, self._draw(seeds), self.params)

    def sample_many(self, seeds: SeedTree, replications: int) -> np.ndarray:
        return np.stack([self._draw(seeds.child(r)) for r in range(replications)])


def sample_path_invariance(spec: ProcessSpec, regime: TemperingRegime, nh: int, grid,
                           seeds: SeedTree) -> GridPath:
    return InvarianceSampler(spec, regime, nh, grid).sample(seeds)
