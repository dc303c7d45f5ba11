"""Continuous piecewise polynomials with one unknown knot.

The regression function is ``μ(s) = Σ_{i<=q} a_i s^{i−1} + Σ_{j=1}^{p−q} a_{q+j} (s − η)_+^j``
on the design ``s_j = j/N``. The parameter vector is ``θ = (a_1, …, a_p, η)``
and the knot is estimated by profiling the residual sum of squares.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from scipy import linalg, special

from .errors import CholeskyError, DomainError, IdentifiabilityError, RankDeficiencyError
from .flur_process import ProcessSimulator, ProcessSpec, TemperingRegime
from .numerics import QuadratureSpec, SeedTree, bessel_k, cholesky, gauss_legendre_01, quad_difference_kernel
from .tfcalc import SampledFunction, tfi_gram

_GOLDEN = (math.sqrt(5) - 1) / 2
_TIGHT = QuadratureSpec(abs_tol=1e-12, rel_tol=1e-10, max_subdivisions=500)


@dataclass(frozen=True)
class PiecewiseModel:
    q: int
    p: int
    eta: float
    a: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "a", tuple(float(x) for x in self.a))
        if self.q < 1 or self.p <= self.q:
            raise DomainError("need q >= 1 and p > q")
        if not 0 < self.eta < 1:
            raise DomainError("the knot must lie in (0, 1)")
        if len(self.a) != self.p:
            raise DomainError(f"expected {self.p} coefficients, got {len(self.a)}")

    @property
    def identifiable(self) -> bool:
        return any(x != 0 for x in self.a[self.q:])

    @property
    def theta(self) -> np.ndarray:
        return np.array([*self.a, self.eta])

    def basis(self, s, eta: float | None = None) -> np.ndarray:
        return basis_matrix(np.asarray(s, dtype=float), self.q, self.p, self.eta if eta is None else eta)

    def __call__(self, s) -> np.ndarray:
        return self.basis(s) @ np.asarray(self.a)


def _truncated_power(x: np.ndarray, j: int) -> np.ndarray:
    return np.maximum(x, 0.0) ** j


def basis_matrix(s: np.ndarray, q: int, p: int, eta: float) -> np.ndarray:
    cols = [s**i for i in range(q)]
    cols += [_truncated_power(s - eta, j) for j in range(1, p - q + 1)]
    return np.column_stack(cols)


def design_matrix(model: PiecewiseModel, eta: float, n: int) -> np.ndarray:
    """``W`` with ``W[j−1, i] = f_i(j/N)``; raises when it is numerically rank deficient."""
    if n <= model.p:
        raise DomainError("need n > p")
    if not 0 < eta < 1:
        raise DomainError("eta must lie in (0, 1)")
    w = model.basis(np.arange(1, n + 1) / n, eta)
    if np.linalg.svd(w, compute_uv=False).min() <= 1e-10:
        raise RankDeficiencyError("design matrix is rank deficient at this knot")
    return w


def mu_partials_plus(model: PiecewiseModel) -> list:
    """Right partial derivatives of ``μ`` in ``(a_1, …, a_p, η)`` as vectorized callables.

    ``∂μ/∂η = −Σ_j j a_{q+j} (s − η)_+^{j−1}`` with ``(s − η)_+^0 = 1_{s>η}``.
    """
    q, p, eta, a = model.q, model.p, model.eta, model.a
    out = [(lambda s, i=i: np.asarray(s, float) ** i) for i in range(q)]
    out += [(lambda s, j=j: _truncated_power(np.asarray(s, float) - eta, j)) for j in range(1, p - q + 1)]

    def d_eta(s):
        x = np.asarray(s, float) - eta
        total = np.zeros_like(x)
        for j in range(1, p - q + 1):
            part = np.where(x > 0, 1.0, 0.0) if j == 1 else _truncated_power(x, j - 1)
            total = total - j * a[q + j - 1] * part
        return total

    out.append(d_eta)
    return out


def partials_matrix(model: PiecewiseModel, n: int) -> np.ndarray:
    """``M₊`` with rows ``(μ_{(1+)}, …, μ_{(p+1,+)})`` at ``s = j/N``."""
    s = np.arange(1, n + 1) / n
    return np.column_stack([f(s) for f in mu_partials_plus(model)])


def gram_matrix(model: PiecewiseModel) -> np.ndarray:
    """``G_{jk} = ∫_0^1 μ_{(j+)} μ_{(k+)}``, exact (Gauss–Legendre on ``[0, η]`` and ``[η, 1]``)."""
    theta, wts = gauss_legendre_01(2 * model.p + 4)
    parts = mu_partials_plus(model)
    eta = model.eta
    g = np.zeros((model.p + 1, model.p + 1))
    for lo, hi in ((0.0, eta), (eta, 1.0)):
        s = lo + (hi - lo) * theta
        # evaluate strictly inside the piece so the η-jump takes its one-sided value
        vals = np.column_stack([f(s) for f in parts])
        g += (hi - lo) * (vals * wts[:, None]).T @ vals
    return g


def lambda_matrix(model: PiecewiseModel) -> np.ndarray:
    """``Λ = G^{−1}``."""
    if not model.identifiable:
        raise IdentifiabilityError("all knot coefficients are zero: the η-partial vanishes")
    g = gram_matrix(model)
    try:
        c = linalg.cho_factor(g, lower=True)
    except linalg.LinAlgError:
        raise IdentifiabilityError("Gram matrix of the partials is singular") from None
    lam = linalg.cho_solve(c, np.eye(g.shape[0]))
    return 0.5 * (lam + lam.T)


# ---------------------------------------------------------------- fitting


@dataclass
class FitResult:
    a_hat: np.ndarray
    eta_hat: float
    rss: float
    eta_profile: np.ndarray = field(repr=False)

    @property
    def theta_hat(self) -> np.ndarray:
        return np.append(self.a_hat, self.eta_hat)

    def to_json(self) -> dict:
        return {
            "eta_hat": float(self.eta_hat),
            "a_hat": [float(x) for x in self.a_hat],
            "rss": float(self.rss),
            "profile": [[float(e), float(r)] for e, r in self.eta_profile],
        }


def _suffix(v: np.ndarray) -> np.ndarray:
    """``out[k] = Σ_{i>=k} v[i]`` along axis 0, with a trailing zero row."""
    c = np.cumsum(v[::-1], axis=0)[::-1]
    return np.concatenate([c, np.zeros((1,) + v.shape[1:])], axis=0)


class KnotFitter:
    """Profile least squares for a fixed ``(n, q, p)``; reusable across data sets.

    The polynomial block is projected out once (orthonormal ``Q``). For a
    knot ``η`` between design points only the points right of ``η`` enter
    the truncated columns, so all cross products follow from suffix sums of
    powers of ``u = s − ½``, expanded binomially in ``e = η − ½``. The
    coarse profile is then a batch of ``(p−q)×(p−q)`` solves.
    """

    def __init__(self, n: int, q: int, p: int, tol: float = 1e-6):
        if q < 1 or p <= q:
            raise DomainError("need q >= 1 and p > q")
        if n <= p + 8:
            raise DomainError("need n > p + 8 observations")
        self.n, self.q, self.p, self.m, self.tol = n, q, p, p - q, tol
        self.s = np.arange(1, n + 1) / n
        x = 2 * self.s - 1
        self.Q, _ = np.linalg.qr(np.column_stack([x**i for i in range(q)]))
        u = self.s - 0.5
        m = self.m
        self.U = u[:, None] ** np.arange(2 * m + 1)
        self.S = _suffix(self.U)
        self.SQ = _suffix(self.U[:, : m + 1, None] * self.Q[:, None, :])
        j = np.arange(p, n - p + 1)
        self.cand_index = j  # points with index >= j (0-based) lie right of the candidate
        self.candidates = (j + 0.5) / n
        e = self.candidates - 0.5
        self._binom = {k: np.array([special.comb(k, i) for i in range(k + 1)]) for k in range(2 * m + 1)}
        self._negpow = (-e)[:, None] ** np.arange(2 * m + 1)
        tt = np.empty((j.size, m, m))
        tq = np.empty((j.size, m, q))
        Sj, SQj = self.S[j], self.SQ[j]
        for a in range(1, m + 1):
            for b in range(1, m + 1):
                tt[:, a - 1, b - 1] = self._expand(a + b, Sj)
            tq[:, a - 1, :] = np.einsum("ki,kib->kb", self._coef(a), SQj[:, : a + 1, :])
        self._schur = tt - tq @ tq.transpose(0, 2, 1)
        self._sj = j

    def _coef(self, k: int) -> np.ndarray:
        # row r: C(k, i) (−e_r)^{k−i}, i = 0..k
        return self._binom[k][None, :] * self._negpow[:, k::-1]

    def _expand(self, k: int, sums: np.ndarray) -> np.ndarray:
        return np.einsum("ki,ki->k", self._coef(k), sums[:, : k + 1])

    def coarse_profile(self, y: np.ndarray) -> np.ndarray:
        r = y - self.Q @ (self.Q.T @ y)
        rr = float(r @ r)
        SR = _suffix(self.U[:, : self.m + 1] * r[:, None])[self._sj]
        b = np.stack([self._expand(a, SR) for a in range(1, self.m + 1)], axis=1)
        with np.errstate(all="ignore"):
            sol = np.linalg.solve(self._schur, b[..., None])[..., 0]
        rss = rr - np.einsum("ka,ka->k", b, sol)
        return np.maximum(rss, 0.0)

    def rss_at(self, y: np.ndarray, eta: float) -> float:
        """Exact residual sum of squares at knot ``eta``."""
        r = y - self.Q @ (self.Q.T @ y)
        t = np.column_stack([_truncated_power(self.s - eta, j) for j in range(1, self.m + 1)])
        z = t - self.Q @ (self.Q.T @ t)
        b = z.T @ r
        zz = z.T @ z
        try:
            sol = linalg.solve(zz, b, assume_a="pos")
        except (linalg.LinAlgError, ValueError):
            return float(r @ r)
        return max(float(r @ r - b @ sol), 0.0)

    def coefficients(self, y: np.ndarray, eta: float) -> np.ndarray:
        """Least-squares ``a`` at a fixed knot via column-scaled normal equations."""
        w = basis_matrix(self.s, self.q, self.p, eta)
        scale = np.linalg.norm(w, axis=0)
        if np.any(scale == 0):
            raise RankDeficiencyError("a basis column vanishes on the design")
        ws = w / scale
        try:
            l, _ = cholesky(ws.T @ ws, max_rel_jitter=0.0)
        except CholeskyError:
            raise RankDeficiencyError("normal equations are singular") from None
        coef = linalg.cho_solve((l, True), ws.T @ y)
        return coef / scale

    def fit(self, y) -> FitResult:
        y = np.asarray(y, dtype=float)
        if y.size != self.n:
            raise DomainError(f"expected {self.n} observations")
        prof = self.coarse_profile(y)
        if np.ptp(prof) <= 1e-12 * max(float(y @ y), 1e-300):
            raise IdentifiabilityError("flat knot profile: the data carry no knot")
        k = int(np.argmin(prof))  # first minimum: ties go to the smallest η
        c = self.candidates
        lo, hi = c[max(k - 1, 0)], c[min(k + 1, c.size - 1)]
        eta, val = self._golden(y, lo, hi)
        best_coarse = self.rss_at(y, c[k])
        if best_coarse <= val:
            eta, val = c[k], best_coarse
        return FitResult(self.coefficients(y, eta), float(eta), val, np.column_stack([c, prof]))

    def _golden(self, y, lo: float, hi: float) -> tuple[float, float]:
        f = lambda e: self.rss_at(y, e)
        x1 = hi - _GOLDEN * (hi - lo)
        x2 = lo + _GOLDEN * (hi - lo)
        f1, f2 = f(x1), f(x2)
        while hi - lo > self.tol:
            if f1 <= f2:
                hi, x2, f2 = x2, x1, f1
                x1 = hi - _GOLDEN * (hi - lo)
                f1 = f(x1)
            else:
                lo, x1, f1 = x1, x2, f2
                x2 = lo + _GOLDEN * (hi - lo)
                f2 = f(x2)
        return (x1, f1) if f1 <= f2 else (x2, f2)


def fit(y, q: int, p: int) -> FitResult:
    """Profile least-squares fit of a one-knot piecewise polynomial to ``y(j)``, ``s_j = j/N``."""
    y = np.asarray(y, dtype=float)
    return KnotFitter(y.size, q, p).fit(y)


# ------------------------------------------------------- limit covariances


@dataclass
class AsymptoticLaw:
    case: str
    rate_exponent: float
    lambda_matrix: np.ndarray
    sigma_matrix: np.ndarray
    covariance: np.ndarray

    def scale(self, n: int, lam_n: float, d: float) -> float:
        """Multiplier of ``θ̂ − θ``: ``λ_N^d √N`` (strong case) or ``N^{1/2−d}``."""
        if self.case == "strongly":
            return lam_n**d * math.sqrt(n)
        return float(n) ** self.rate_exponent


_CASES = {"strong": "strongly", "weak": "weakly", "moderate": "moderately"}


def _case(regime) -> tuple[str, float]:
    if isinstance(regime, TemperingRegime):
        return regime.label, regime.lambda_star
    label = _CASES.get(str(regime), str(regime))
    if label not in _CASES.values():
        raise DomainError(f"unknown regime {regime!r}")
    return label, math.nan


def _knot_grid(eta: float, min_cells: int) -> tuple[float, int]:
    """Step ``1/cells`` with ``η`` on a node (nearest node if ``η`` is not a short fraction)."""
    q = Fraction(eta).limit_denominator(4096).denominator
    cells = q * math.ceil(min_cells / q)
    k = int(round(eta * cells))
    return 1.0 / cells, k


def _partial_pieces(model: PiecewiseModel, min_cells: int) -> list:
    """Each partial as aligned pieces on ``[0, η]`` and ``[η, 1]`` with one-sided values at ``η``."""
    step, k = _knot_grid(model.eta, min_cells)
    cells = int(round(1 / step))
    eta = k * step
    out = []
    for f in mu_partials_plus(model):
        left = f(np.arange(k + 1) * step)
        right = f(eta + np.arange(cells - k + 1) * step)
        if k:
            left[-1] = f(np.array([eta - 1e-13]))[0]
        right[0] = f(np.array([eta + 1e-13]))[0]
        pieces = [SampledFunction(0.0, step, left)] if k else []
        pieces.append(SampledFunction(eta, step, right))
        out.append(pieces)
    return out


def sigma_matrix(model: PiecewiseModel, regime, d: float, lambda_star: float | None = None,
                 sigma2: float = 1.0, strong_form: str = "printed", min_cells: int = 4096) -> np.ndarray:
    """Limit covariance ``Σ`` of the normalized score ``Σ_j μ₊(j/N) X(j)``.

    Parameters
    ----------
    regime : TemperingRegime or {"strong", "weak", "moderate"}
    d, lambda_star : float
        ``lambda_star`` is taken from the regime object when one is passed.
    strong_form : {"printed", "white"}
        Strong tempering only. ``"printed"`` is the product of integrals
        ``(∫μ_i)(∫μ_k)``; ``"white"`` is the white-noise limit ``∫μ_i μ_k``.

    Notes
    -----
    Weak and moderate tempering use the operator form
    ``σ² ∫ (𝕀^{d,λ*}_− μ_i)(𝕀^{d,λ*}_− μ_k)`` on a grid with ``η`` on a node.
    """
    label, ls = _case(regime)
    if isinstance(regime, TemperingRegime):
        lambda_star = ls
    if not model.identifiable:
        raise IdentifiabilityError("all knot coefficients are zero")
    if label == "strongly":
        if strong_form == "white":
            return sigma2 * gram_matrix(model)
        if strong_form != "printed":
            raise DomainError(f"unknown strong_form {strong_form!r}")
        theta, wts = gauss_legendre_01(2 * model.p + 4)
        ints = np.zeros(model.p + 1)
        for lo, hi in ((0.0, model.eta), (model.eta, 1.0)):
            s = lo + (hi - lo) * theta
            ints += (hi - lo) * np.array([f(s) @ wts for f in mu_partials_plus(model)])
        return sigma2 * np.outer(ints, ints)
    if label == "weakly":
        if not 0 < d < 0.5:
            raise DomainError("weak tempering needs 0 < d < 1/2")
        lam = 0.0
    else:
        if not d > 0:
            raise DomainError("moderate tempering needs d > 0")
        if lambda_star is None or not 0 < lambda_star < math.inf:
            raise DomainError("moderate tempering needs 0 < lambda* < inf")
        lam = float(lambda_star)
    g = tfi_gram(_partial_pieces(model, min_cells), d, lam)
    return sigma2 * 0.5 * (g + g.T)


def sigma_matrix_closed_form(model: PiecewiseModel, regime, d: float,
                             lambda_star: float | None = None, sigma2: float = 1.0,
                             convention: str = "consistent") -> np.ndarray:
    """``σ² ∬ μ_i(t) μ_k(s) ρ(t − s)`` with the covariance density of the limit process.

    ``ρ(x) = Γ(1−2d)/(Γ(d)Γ(1−d)) |x|^{2d−1}`` (weak) or
    ``|x|^{d−1/2}K_{d−1/2}(λ*|x|)/(√πΓ(d)(2λ*)^{d−1/2})`` (moderate);
    ``convention="printed"`` doubles the moderate constant and is undefined
    for the weak case.
    """
    label, ls = _case(regime)
    if isinstance(regime, TemperingRegime):
        lambda_star = ls
    if label == "weakly":
        if convention != "consistent":
            raise DomainError("the printed weak-case constant involves lambda and is undefined at lambda* = 0")
        c = special.gamma(1 - 2 * d) / (special.gamma(d) * special.gamma(1 - d))
        rho = lambda x: abs(x) ** (2 * d - 1) if x else 0.0
    elif label == "moderately":
        lam = float(lambda_star)
        nu = d - 0.5
        c = 1.0 / (math.sqrt(math.pi) * math.gamma(d) * (2 * lam) ** nu)
        if convention == "printed":
            c *= 2
        elif convention != "consistent":
            raise DomainError(f"unknown convention {convention!r}")
        rho = lambda x: abs(x) ** nu * bessel_k(nu, lam * abs(x)) if x else 0.0
    else:
        raise DomainError("closed forms exist for the weak and moderate cases only")
    parts = mu_partials_plus(model)
    k = len(parts)
    out = np.empty((k, k))
    for i in range(k):
        for j in range(i, k):
            out[i, j] = out[j, i] = quad_difference_kernel(
                parts[i], (0.0, 1.0), parts[j], (0.0, 1.0), rho, _TIGHT,
                breaks1=[model.eta], breaks2=[model.eta])
    return sigma2 * c * out


def asymptotic_covariance(model: PiecewiseModel, regime, d: float, lambda_star: float | None = None,
                          sigma2: float = 1.0, strong_form: str = "printed") -> AsymptoticLaw:
    """``ΛΣΛ`` for the normalized estimator ``scale·(θ̂ − θ)``."""
    label, ls = _case(regime)
    lam_mat = lambda_matrix(model)
    sig = sigma_matrix(model, regime, d, lambda_star, sigma2, strong_form)
    cov = lam_mat @ sig @ lam_mat
    rate = 0.5 if label == "strongly" else 0.5 - d
    return AsymptoticLaw(label, rate, lam_mat, sig, 0.5 * (cov + cov.T))


# ------------------------------------------------ linearization experiment


@dataclass
class EquivalenceResult:
    n: int
    statistics: np.ndarray
    median: float
    q90: float


def linearization_gap(model: PiecewiseModel, fitter: KnotFitter, errors: np.ndarray,
                      scale: float) -> float:
    """``scale·‖θ̂ − θ − (M₊ᵀM₊)^{−1}M₊ᵀe‖`` for one error vector."""
    n = errors.size
    y = model(fitter.s) + errors
    res = fitter.fit(y)
    m = partials_matrix(model, n)
    lin = np.linalg.lstsq(m, errors, rcond=None)[0]
    return scale * float(np.linalg.norm(res.theta_hat - model.theta - lin))


def asymptotic_equivalence_check(model: PiecewiseModel, spec: ProcessSpec, regime: TemperingRegime,
                                 n_values=(1024, 4096), seeds: SeedTree = SeedTree(0),
                                 replications: int = 200, mapper=map) -> list[EquivalenceResult]:
    """Quantiles of the linearization gap across sample sizes.

    Errors for size ``n`` and replication ``r`` come from ``seeds.child(n, r)``.
    ``mapper`` may be a parallel, order-preserving ``map``.
    """
    out = []
    for n in n_values:
        lam_n = regime.lambda_at(n)
        sim = ProcessSimulator(spec, lam_n, n)
        fitter = KnotFitter(n, model.q, model.p)
        if regime.label == "strongly":
            scale = lam_n**spec.d * math.sqrt(n)
        else:
            scale = float(n) ** (0.5 - spec.d)
        stats = np.array(list(mapper(
            lambda r: linearization_gap(model, fitter, sim.sample(seeds.child(n, r)), scale),
            range(replications))))
        out.append(EquivalenceResult(n, stats, float(np.median(stats)), float(np.quantile(stats, 0.9))))
    return out
