"""Tempered linear processes: coefficients, simulation, autocovariances.

A process is ``X(j) = σ Σ_k e^{−λk} b_d(k) ζ(j − k)`` with i.i.d. standard
normal ``ζ``. The default ``b_d`` is the binomial family
``ω(k) = Γ(k + d) / (Γ(k + 1) Γ(d))``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import fft as sfft
from scipy import special

from .errors import ConvergenceError, DomainError
from .numerics import SeedTree, gaussian_stream, log_gamma_ratio

MAX_MA_LENGTH = 2**20
_TIME_DOMAIN_BELOW = 1024
_CIRCULANT_RATIO = 2


def _check_d(d: float) -> None:
    if not math.isfinite(d):
        raise DomainError("d must be finite")
    if d < 0 and float(d).is_integer():
        raise DomainError(f"d = {d} is a negative integer")


@dataclass(frozen=True)
class ProcessSpec:
    """Parameters of a tempered linear process.

    ``coefficients`` switches from the binomial family to a user-supplied
    untempered list ``b(0), b(1), ...``; the tempering ``e^{−λk}`` is still
    applied on top.
    """

    d: float
    lam: float = 0.0
    sigma: float = 1.0
    coefficients: Optional[tuple[float, ...]] = None
    moment_tol: float = 1e-2

    def __post_init__(self):
        _check_d(self.d)
        if not self.lam >= 0:
            raise DomainError("lambda must be >= 0")
        if not self.sigma > 0:
            raise DomainError("sigma must be > 0")
        if self.coefficients is not None:
            b = np.asarray(self.coefficients, dtype=float)
            object.__setattr__(self, "coefficients", tuple(b.tolist()))
            if b.size == 0 or not np.all(np.isfinite(b)):
                raise DomainError("coefficients must be a finite non-empty list")
            if self.d < 0:
                bad = vanishing_moment_residuals(b, self.d)
                if np.any(bad > self.moment_tol):
                    raise DomainError(
                        "supplied coefficients violate the vanishing-moment sums "
                        f"(relative residuals {np.round(bad, 4).tolist()})"
                    )

    @property
    def family(self) -> str:
        return "binomial" if self.coefficients is None else "user"


def vanishing_moment_residuals(b: np.ndarray, d: float) -> np.ndarray:
    """Relative sizes of ``Σ k^j b(k)`` for ``j = 0..⌊−d⌋``.

    Only the supplied finite list is summed, so a small value is evidence,
    not a certificate, that the infinite sums vanish.
    """
    k = np.arange(b.size, dtype=float)
    out = []
    for j in range(int(math.floor(-d)) + 1):
        w = k**j * b
        out.append(abs(w.sum()) / max(np.abs(w).sum(), 1e-300))
    return np.array(out)


@dataclass(frozen=True)
class TemperingRegime:
    """Schedule of the tempering parameter as the sample size grows.

    kind
        ``"fixed"``: ``λ_N = lam``.
        ``"power"``: ``λ_N = c N^{−γ}``.
        ``"window"``: ``λ_N = c / (N h)``, for kernel smoothing where the
        effective sample is the ``N h`` points inside the window; ``c`` is
        then the limit of ``N h λ_N``.
    """

    kind: str = "fixed"
    lam: float = 0.0
    c: float = 1.0
    gamma: float = 1.0

    def __post_init__(self):
        if self.kind not in ("fixed", "power", "window"):
            raise DomainError(f"unknown regime kind {self.kind!r}")
        if self.lam < 0 or self.c < 0:
            raise DomainError("tempering constants must be >= 0")

    @classmethod
    def fixed(cls, lam: float) -> "TemperingRegime":
        return cls("fixed", lam=lam)

    @classmethod
    def power(cls, c: float, gamma: float) -> "TemperingRegime":
        return cls("power", c=c, gamma=gamma)

    @classmethod
    def window(cls, lambda_star: float) -> "TemperingRegime":
        return cls("window", c=lambda_star)

    def lambda_at(self, n: int, h: float | None = None) -> float:
        if self.kind == "fixed":
            return self.lam
        if self.kind == "power":
            return self.c * float(n) ** (-self.gamma)
        if h is None:
            raise DomainError("a window regime needs the bandwidth h")
        return self.c / (n * h)

    @property
    def lambda_star(self) -> float:
        """Limit of ``N λ_N`` (of ``N h λ_N`` for window regimes)."""
        if self.kind == "fixed":
            return math.inf if self.lam > 0 else 0.0
        if self.kind == "window" or self.c == 0:
            return self.c
        if self.gamma > 1:
            return 0.0
        if self.gamma == 1:
            return self.c
        return math.inf

    @property
    def label(self) -> str:
        ls = self.lambda_star
        if ls == 0:
            return "weakly"
        return "strongly" if math.isinf(ls) else "moderately"


@dataclass
class SamplePath:
    values: np.ndarray
    spec: ProcessSpec
    n: int
    seeds: SeedTree
    truncation_m: int
    lam_n: float
    method: str


def binomial_coefficients(d: float, lam: float, m: int) -> np.ndarray:
    """Return ``e^{−λk} ω(k)`` for ``k = 0..m`` via the product recurrence."""
    _check_d(d)
    if m < 0:
        raise DomainError("m must be >= 0")
    out = np.zeros(m + 1)
    out[0] = 1.0
    if d == 0 or m == 0:
        return out
    k = np.arange(1, m + 1, dtype=float)
    out[1:] = np.cumprod((k + d - 1) / k)
    if lam > 0:
        out *= np.exp(-lam * np.arange(m + 1))
    return out


def truncation_length(d: float, lam: float, tail_tol: float = 1e-12,
                      limit: int = 64 * MAX_MA_LENGTH) -> int:
    """Smallest ``M`` whose certified bound on ``Σ_{k>M} c_k²`` is ``<= tail_tol``.

    The bound is geometric: beyond ``M`` the ratio ``|c_{k+1}/c_k|`` is at
    most ``r = e^{−λ} max(1, |M + d| / (M + 1))``, so the tail is at most
    ``c_M² r² / (1 − r²)``.

    Raises
    ------
    ConvergenceError
        If no ``M <= limit`` satisfies the bound.
    """
    _check_d(d)
    if not lam > 0:
        raise DomainError("no finite truncation is certified for lambda = 0")
    if not tail_tol > 0:
        raise DomainError("tail_tol must be > 0")
    if d == 0:
        return 0
    start = max(0, math.ceil((-d - 1) / 2))
    chunk = 4096
    lo = 0
    last = 1.0
    while lo <= limit:
        k = np.arange(lo + 1, lo + chunk + 1, dtype=float)
        block = last * np.cumprod((k + d - 1) / k)
        c = np.concatenate(([last], block)) * np.exp(-lam * np.arange(lo, lo + chunk + 1))
        idx = np.arange(lo, lo + chunk + 1)
        ratio = np.exp(-lam) * np.maximum(1.0, np.abs(idx + d) / (idx + 1))
        r2 = ratio * ratio
        bound = np.where(r2 < 1, c * c * r2 / np.maximum(1 - r2, 1e-300), np.inf)
        ok = np.nonzero((bound <= tail_tol) & (idx >= start))[0]
        if ok.size:
            if idx[ok[0]] > limit:
                break
            return int(idx[ok[0]])
        last = block[-1]
        lo += chunk
    raise ConvergenceError(f"certified truncation needs more than {limit} terms")


def _hyp_series(a, b, c: float, w: float, max_terms: int = 200000):
    """Sum ``₂F₁(a, b; c; w)`` term by term; also return the largest term."""
    t = np.ones(np.broadcast(a, b).shape)
    total, biggest = t.copy(), t.copy()
    for k in range(max_terms):
        t = t * (a + k) * (b + k) / ((c + k) * (k + 1)) * w
        total += t
        biggest = np.maximum(biggest, np.abs(t))
        if k > 2 and not np.any(np.abs(t) > 1e-17 * np.abs(total)):
            return total, biggest
    raise ConvergenceError("hypergeometric series did not converge")


def _gamma_ratio(h: np.ndarray, d: float) -> np.ndarray:
    """``Γ(h + d) / Γ(h + 1 − d)`` for integer ``h >= 0``."""
    out = np.empty_like(h)
    small = h < 20
    out[small] = special.gamma(h[small] + d) / special.gamma(h[small] + 1 - d)
    out[~small] = np.exp(log_gamma_ratio(h[~small] + 1 - d, 2 * d - 1))
    return out


def _closed_form_acvf(d: float, lam: float, max_lag: int, max_condition: float = 1e4) -> np.ndarray:
    """Autocovariance of the untruncated binomial process with σ = 1.

    For ``λ = 0`` this is the gamma-ratio formula. For ``λ > 0`` it is
    ``e^{−λh} ω(h) ₂F₁(d, h + d; h + 1; e^{−2λ})`` rewritten through the
    ``z → 1 − z`` connection formula, so that both series run in
    ``w = 1 − e^{−2λ}``. The series are well conditioned while ``h w`` is
    at most a few units, which covers the small-``λ`` cases where direct
    coefficient summation is too long.
    """
    h = np.arange(max_lag + 1, dtype=float)
    if lam == 0:
        if not -0.5 < d < 0.5:
            raise DomainError("the variance diverges for lambda = 0 and |d| >= 1/2")
        if d == 0:
            return (h == 0).astype(float)
        return special.gamma(1 - 2 * d) / (special.gamma(d) * special.gamma(1 - d)) * _gamma_ratio(h, d)
    if d == 0:
        return (h == 0).astype(float)
    if float(2 * d).is_integer():
        raise ConvergenceError("the connection formula is singular when 2d is an integer")
    w = -math.expm1(-2 * lam)
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        s1, m1 = _hyp_series(d, h + d, 2 * d, w)
        s2, m2 = _hyp_series(h + 1 - d, 1 - d, 2 - 2 * d, w)
        p1 = special.gamma(1 - 2 * d) / (special.gamma(d) * special.gamma(1 - d)) * _gamma_ratio(h, d)
        p2 = w ** (1 - 2 * d) * special.gamma(2 * d - 1) / special.gamma(d) ** 2
        g = p1 * s1 + p2 * s2
        cond = (np.abs(p1) * m1 + abs(p2) * m2) / np.abs(g)
    if not np.all(cond <= max_condition):
        raise ConvergenceError("hypergeometric form is ill-conditioned at these lags")
    return np.exp(-lam * h) * g


def _exact_acvf(d: float, lam: float, max_lag: int, tol: float = 1e-12,
                max_length: int = 4 * MAX_MA_LENGTH) -> np.ndarray:
    """σ = 1 autocovariance, by direct summation when feasible."""
    if lam > 0 and d != 0:
        try:
            m = truncation_length(d, lam, tol, limit=max_length) + max_lag
            return _autocorrelate(binomial_coefficients(d, lam, m), max_lag)
        except ConvergenceError:
            pass
    return _closed_form_acvf(d, lam, max_lag)


class ProcessSimulator:
    """Reusable sampler for one ``(spec, λ_N, n)`` triple.

    Moving-average convolution is used when the truncation is certified
    within ``max_ma_length``; otherwise, and always for ``λ_N = 0``, exact
    circulant embedding of the autocovariance is used. ``"auto"`` also
    switches to the embedding when the filter is more than twice as long
    as the path.
    """

    def __init__(self, spec: ProcessSpec, lam_n: float, n: int,
                 tail_tol: float = 1e-12, max_ma_length: int = MAX_MA_LENGTH,
                 method: str = "auto"):
        if n < 1:
            raise DomainError("n must be >= 1")
        if lam_n < 0:
            raise DomainError("lambda_N must be >= 0")
        self.spec, self.lam_n, self.n = spec, float(lam_n), int(n)
        d = spec.d
        if spec.coefficients is not None:
            b = np.asarray(spec.coefficients)
            self.method = "ma"
            self.coef = b * np.exp(-lam_n * np.arange(b.size))
        elif d == 0:
            self.method = "iid"
            self.coef = np.ones(1)
        else:
            m = None
            if method not in ("auto", "ma", "circulant"):
                raise DomainError(f"unknown simulation method {method!r}")
            if lam_n > 0 and method in ("auto", "ma"):
                try:
                    m = truncation_length(d, lam_n, tail_tol, limit=max_ma_length)
                except ConvergenceError:
                    if method == "ma":
                        raise
            self.method = None
            if m is not None and method == "auto" and m > _CIRCULANT_RATIO * n:
                # a long filter on a short path: embedding is cheaper per sample
                try:
                    self._setup_circulant()
                    self.method = "circulant"
                except ConvergenceError:
                    pass
            if m is not None and self.method is None:
                self.method = "ma"
                self.coef = binomial_coefficients(d, lam_n, max(n, m))
            elif m is None:
                if lam_n == 0 and not -0.5 < d < 0.5:
                    raise DomainError("simulation refused: lambda = 0 needs |d| < 1/2")
                self.method = "circulant"
                self._setup_circulant()
        self.truncation_m = self.coef.size - 1 if self.method != "circulant" else -1
        if self.method == "ma":
            m = self.truncation_m
            self._fft_size = sfft.next_fast_len(n + m, real=True)
            if n + m >= _TIME_DOMAIN_BELOW:
                self._coef_fft = sfft.rfft(self.coef, self._fft_size)

    def _setup_circulant(self):
        half = sfft.next_fast_len(self.n)
        size = 2 * half
        g = _exact_acvf(self.spec.d, self.lam_n, half)
        row = np.concatenate([g, g[half - 1:0:-1]])
        eig = sfft.fft(row).real
        if eig.min() < -1e-9 * eig.max():
            raise ConvergenceError("circulant embedding is not non-negative definite")
        self._scale = np.sqrt(np.clip(eig, 0.0, None) / size)
        self._size = size
        self.coef = np.empty(0)

    def sample(self, seeds: SeedTree) -> np.ndarray:
        n, sig = self.n, self.spec.sigma
        if self.method == "iid":
            return sig * gaussian_stream(seeds, n)
        if self.method == "circulant":
            z = gaussian_stream(seeds, 2 * self._size)
            w = (z[0::2] + 1j * z[1::2]) * self._scale
            # the real part of the transform has exactly the target covariance
            return sig * sfft.fft(w).real[:n]
        m = self.truncation_m
        zeta = gaussian_stream(seeds, n + m)
        if n + m < _TIME_DOMAIN_BELOW:
            return sig * np.convolve(zeta, self.coef, mode="valid")
        conv = sfft.irfft(sfft.rfft(zeta, self._fft_size) * self._coef_fft, self._fft_size)
        return sig * conv[m:m + n]



def simulate(spec: ProcessSpec, regime: TemperingRegime | None, n: int, seeds: SeedTree,
             h: float | None = None, **kw) -> SamplePath:
    """Simulate ``X(1..n)``; ``λ_N`` comes from ``regime`` at ``n`` (``spec.lam`` if None)."""
    lam_n = spec.lam if regime is None else regime.lambda_at(n, h)
    sim = ProcessSimulator(spec, lam_n, n, **kw)
    return SamplePath(sim.sample(seeds), spec, n, seeds, sim.truncation_m, lam_n, sim.method)


def partial_sum(path: SamplePath | np.ndarray, u: float) -> float:
    """``S(u) = Σ_{k ≤ ⌊N u⌋} X(k)``."""
    x = path.values if isinstance(path, SamplePath) else np.asarray(path)
    if x.size == 0:
        raise DomainError("empty path")
    if not 0 <= u <= 1:
        raise DomainError("u must lie in [0, 1]")
    return float(x[: int(math.floor(x.size * u))].sum())


def theoretical_acvf(spec: ProcessSpec, at_n: int | None, max_lag: int,
                     regime: TemperingRegime | None = None, method: str = "auto",
                     tol: float = 1e-12) -> np.ndarray:
    """Autocovariances ``γ(0..max_lag)`` of the (untruncated) process.

    ``method="direct"`` sums ``σ² Σ_k c_k c_{k+h}`` (via FFT autocorrelation)
    up to a length whose omitted part is certified below ``tol·σ²``.
    ``method="closed"`` uses the hypergeometric form of the binomial family,
    ``γ(h) = σ² e^{−λh} ω(h) ₂F₁(d, h + d; h + 1; e^{−2λ})``, evaluated
    through its connection formula (gamma ratios when ``λ = 0``).
    ``"auto"`` prefers ``"direct"`` and falls back to ``"closed"`` when the
    required length exceeds ``4·MAX_MA_LENGTH`` or ``λ = 0``.
    """
    if max_lag < 0:
        raise DomainError("max_lag must be >= 0")
    lam = spec.lam if regime is None else regime.lambda_at(at_n)
    d, s2 = spec.d, spec.sigma**2
    if spec.coefficients is not None:
        b = np.asarray(spec.coefficients) * np.exp(-lam * np.arange(len(spec.coefficients)))
        return s2 * _autocorrelate(b, max_lag)
    if lam == 0 and not -0.5 < d < 0.5:
        raise DomainError("the variance diverges for lambda = 0 and |d| >= 1/2")
    if method not in ("auto", "direct", "closed"):
        raise DomainError(f"unknown acvf method {method!r}")
    if method != "closed" and lam > 0:
        try:
            m = truncation_length(d, lam, tol, limit=4 * MAX_MA_LENGTH) + max_lag
            return s2 * _autocorrelate(binomial_coefficients(d, lam, m), max_lag)
        except ConvergenceError:
            if method == "direct":
                raise
    elif method == "direct":
        raise DomainError("direct summation needs lambda > 0")
    return s2 * _closed_form_acvf(d, lam, max_lag)


def _autocorrelate(c: np.ndarray, max_lag: int) -> np.ndarray:
    size = sfft.next_fast_len(c.size + max_lag + 1, real=True)
    spec = sfft.rfft(c, size)
    acf = sfft.irfft(spec * np.conj(spec), size)[: max_lag + 1]
    if max_lag >= c.size:
        acf[c.size:] = 0.0
    return acf


def tauberian_ratio(d: float, lambda_n: float, n: int, y: float,
                    tol: float = 1e-13, max_terms: int = 2**27) -> complex:
    """``z^d Σ_k e^{−z k} ω(k)`` with ``z = λ_N + i y / N`` (principal branch).

    The series is summed in blocks of ``2^20`` terms until the geometric
    tail bound ``|ω(K)| e^{−λK} r / (1 − r)``, with ``r`` the largest
    remaining term ratio, drops below ``tol`` times the partial sum.
    """
    _check_d(d)
    if not lambda_n > 0:
        raise DomainError("lambda_n must be > 0")
    z = complex(lambda_n, y / n)
    total = 0j
    start = 0
    w_prev = None
    q = math.exp(-lambda_n)
    block = 2**20
    while start < max_terms:
        k = np.arange(start, start + block, dtype=float)
        if w_prev is None:
            w = binomial_coefficients(d, 0.0, block - 1)
        else:
            w = w_prev * np.cumprod((k - 1 + d) / k)
        terms = w * np.exp(-z * k)
        total += terms.sum()
        w_prev = w[-1]
        last = start + block - 1
        r = q * max(1.0, abs(last + d) / (last + 1))
        if r < 1:
            tail = abs(w_prev) * math.exp(-lambda_n * last) * r / (1 - r)
            if tail <= tol * abs(total):
                return complex(z**d * total)
        start += block
    raise ConvergenceError("Tauberian series did not reach its tolerance")


def write_path_csv(path: SamplePath, target) -> None:
    """Write ``index,value`` rows (1-based index, 17 significant digits)."""
    own = isinstance(target, (str, bytes)) or hasattr(target, "__fspath__")
    fh = open(target, "w", newline="") if own else target
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "value"])
        for i, v in enumerate(path.values, start=1):
            w.writerow([i, "%.17g" % v])
    finally:
        if own:
            fh.close()
