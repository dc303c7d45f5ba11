"""Monte Carlo harness: replicate, estimate, and compare with limit formulas.

Replication ``r`` of a single-size experiment draws from
``SeedTree(master_seed).child(r)``; experiments over several sample sizes
use ``child(n, r)``. Replications may run on a thread pool; results are
gathered in replication order, so reports do not depend on the thread
count.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import stats

from .errors import DomainError, FlurlabError
from .flur_process import ProcessSimulator, ProcessSpec, TemperingRegime
from .kernel_regression import (
    asymptotic_variance,
    get_kernel,
    operator_form_variance,
    scale_factor,
    weighted_sum_limit_check,
    window_weights,
)
from .numerics import SeedTree
from .piecewise_regression import (
    KnotFitter,
    PiecewiseModel,
    asymptotic_covariance,
    asymptotic_equivalence_check,
)
from .tfbm2 import InvarianceSampler, TfbmParams, covariance

KINDS = ("kernel_fdd", "kernel_variance", "weighted_sum_limit", "knot_law", "equivalence",
         "invariance_principle")
_ALIASES = {"KernelFdd": "kernel_fdd", "KernelVariance": "kernel_variance",
            "WeightedSumLimit": "weighted_sum_limit", "KnotLaw": "knot_law",
            "Equivalence": "equivalence", "InvariancePrinciple": "invariance_principle"}
MIN_REPLICATIONS = 100
KS_CRITICAL = {0.10: 1.22, 0.05: 1.36, 0.01: 1.63}


def ks_statistic(sample) -> float:
    """Kolmogorov–Smirnov distance between the empirical CDF of ``sample`` and ``Φ``."""
    x = np.asarray(sample, dtype=float)
    if x.size < MIN_REPLICATIONS:
        raise DomainError(f"KS statistic needs at least {MIN_REPLICATIONS} values")
    return float(stats.kstest(x, "norm").statistic)


def ks_threshold(size: int, level: float = 0.05) -> float:
    """Asymptotic critical value ``c(level)/√size``."""
    if level not in KS_CRITICAL:
        raise DomainError(f"KS level must be one of {sorted(KS_CRITICAL)}")
    return KS_CRITICAL[level] / math.sqrt(size)


def empirical_cov(samples) -> np.ndarray:
    """Unbiased covariance of the columns of an ``R × k`` array."""
    x = np.asarray(samples, dtype=float)
    if x.ndim != 2 or x.shape[0] < 2:
        raise DomainError("need an R x k array with R >= 2")
    return np.atleast_2d(np.cov(x, rowvar=False, ddof=1))


def variance_se(x: np.ndarray) -> float:
    """Standard error of the sample variance from the fourth central moment."""
    c = x - x.mean()
    m2 = float(np.mean(c**2))
    return math.sqrt(max(float(np.mean(c**4)) - m2 * m2, 0.0) / x.size)


def thread_count() -> int:
    """``FLURLAB_THREADS`` (0 or unset means one thread per CPU)."""
    raw = os.environ.get("FLURLAB_THREADS", "0").strip() or "0"
    try:
        k = int(raw)
    except ValueError:
        raise DomainError(f"FLURLAB_THREADS must be an integer, got {raw!r}") from None
    if k < 0:
        raise DomainError("FLURLAB_THREADS must be >= 0")
    return k or (os.cpu_count() or 1)


def ordered_map(fn: Callable, items, threads: Optional[int] = None) -> list:
    """``list(map(fn, items))``, optionally on a thread pool; order is preserved."""
    items = list(items)
    k = thread_count() if threads is None else threads
    if k <= 1 or len(items) < 2:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=k) as pool:
        return list(pool.map(fn, items))


# ------------------------------------------------------------------ config


@dataclass(frozen=True)
class BandwidthRule:
    """``h = value`` (fixed) or ``h = c N^{−γ}`` (power)."""

    kind: str = "power"
    value: float = 0.0
    c: float = 1.0
    gamma: float = 0.2

    def __post_init__(self):
        if self.kind not in ("fixed", "power"):
            raise DomainError(f"unknown bandwidth rule {self.kind!r}")
        if self.kind == "fixed" and not 0 < self.value < 1:
            raise DomainError("a fixed bandwidth must lie in (0, 1)")
        if self.kind == "power" and not (self.c > 0 and self.gamma > 0):
            raise DomainError("bandwidth rule needs c > 0 and gamma > 0")

    def at(self, n: int) -> float:
        return self.value if self.kind == "fixed" else self.c * float(n) ** (-self.gamma)


@dataclass(frozen=True)
class Thresholds:
    variance_rel: float = 0.15
    correlation_abs: float = 0.1
    ks_level: float = 0.05


@dataclass(frozen=True)
class ExperimentConfig:
    kind: str
    spec: ProcessSpec
    regime: TemperingRegime
    n: int
    replications: int
    master_seed: int = 0
    h_rule: BandwidthRule = BandwidthRule()
    x_points: tuple[float, ...] = (0.5,)
    kernel: str = "epanechnikov"
    model: Optional[PiecewiseModel] = None
    n_values: tuple[int, ...] = ()
    strong_form: str = "printed"
    thresholds: Thresholds = Thresholds()

    def __post_init__(self):
        kind = _ALIASES.get(self.kind, self.kind)
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "x_points", tuple(float(x) for x in self.x_points))
        object.__setattr__(self, "n_values", tuple(int(x) for x in self.n_values))
        if kind not in KINDS:
            raise DomainError(f"unknown experiment kind {self.kind!r}")
        if self.replications < MIN_REPLICATIONS:
            raise DomainError(f"replications must be >= {MIN_REPLICATIONS}")
        if self.n < 2:
            raise DomainError("n must be >= 2")
        get_kernel(self.kernel)
        if kind in ("kernel_fdd", "kernel_variance"):
            h = self.bandwidth
            xs = sorted(self.x_points)
            if not xs:
                raise DomainError("x_points must not be empty")
            if xs[0] <= h or xs[-1] >= 1 - h:
                raise DomainError("evaluation points must be more than h away from 0 and 1")
            if any(b - a <= 2 * h for a, b in zip(xs, xs[1:])):
                raise DomainError("evaluation points must be separated by more than 2h")
        if kind in ("knot_law", "equivalence") and self.model is None:
            raise DomainError(f"{kind} needs a piecewise model")
        if kind in ("equivalence", "invariance_principle") and len(self.n_values) < 2:
            raise DomainError(f"{kind} needs at least two sizes in n_values")
        if self.strong_form not in ("printed", "white"):
            raise DomainError("strong_form must be 'printed' or 'white'")

    @property
    def bandwidth(self) -> float:
        return self.h_rule.at(self.n)

    def to_dict(self) -> dict:
        out = {
            "kind": self.kind,
            "spec": asdict(self.spec),
            "regime": asdict(self.regime),
            "n": self.n,
            "replications": self.replications,
            "master_seed": self.master_seed,
            "h_rule": asdict(self.h_rule),
            "x_points": list(self.x_points),
            "kernel": self.kernel,
            "model": None if self.model is None else
            {"q": self.model.q, "p": self.model.p, "eta": self.model.eta, "a": list(self.model.a)},
            "n_values": list(self.n_values),
            "strong_form": self.strong_form,
            "thresholds": asdict(self.thresholds),
        }
        if out["spec"]["coefficients"] is not None:
            out["spec"]["coefficients"] = list(out["spec"]["coefficients"])
        return out


# ------------------------------------------------------------------ report


@dataclass
class CheckOutcome:
    name: str
    statistic: float
    target: float
    threshold: float
    passed: bool
    required: bool = True


@dataclass
class ExperimentReport:
    config: ExperimentConfig
    theoretical_targets: dict = field(default_factory=dict)
    empirical_estimates: dict = field(default_factory=dict)
    tests: list = field(default_factory=list)
    failures: int = 0
    runtime_seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return all(t.passed for t in self.tests if t.required)

    def target(self, name: str, value: float) -> float:
        self.theoretical_targets[name] = float(value)
        return float(value)

    def estimate(self, name: str, value: float, se: float = math.nan) -> float:
        self.empirical_estimates[name] = (float(value), float(se))
        return float(value)

    def relative(self, name: str, value: float, target: str, tol: float, required: bool = True):
        ref = self.theoretical_targets[target]
        ok = bool(abs(value / ref - 1) <= tol) if ref != 0 else False
        self.tests.append(CheckOutcome(name, float(value), ref, tol, ok, required))

    def below(self, name: str, value: float, target: str, threshold: float, required: bool = True):
        ref = self.theoretical_targets[target]
        self.tests.append(CheckOutcome(name, float(value), ref, float(threshold),
                                      bool(value < threshold), required))

    def to_json(self, include_runtime: bool = False) -> str:
        """Deterministic JSON; runtime is left out unless asked for."""
        blob = {
            "config": self.config.to_dict(),
            "theoretical_targets": self.theoretical_targets,
            "empirical_estimates": {k: list(v) for k, v in self.empirical_estimates.items()},
            "tests": [asdict(t) for t in self.tests],
            "failures": self.failures,
            "passed": self.passed,
        }
        if include_runtime:
            blob["runtime_seconds"] = self.runtime_seconds
        return json.dumps(blob, indent=2, allow_nan=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["test", "statistic", "target", "threshold", "pass"])
        for t in self.tests:
            w.writerow([t.name, f"{t.statistic:.17g}", f"{t.target:.17g}", f"{t.threshold:.17g}",
                        "true" if t.passed else "false"])
        return buf.getvalue()


def _replicate(fn: Callable, seeds: list, threads: Optional[int]) -> tuple[list, int]:
    def guarded(s):
        try:
            return fn(s)
        except FlurlabError:
            return None
    out = ordered_map(guarded, seeds, threads)
    good = [x for x in out if x is not None]
    return good, len(out) - len(good)


# ------------------------------------------------------------------ kinds


def _ks_pair(report: ExperimentReport, tag: str, x: np.ndarray, sd: float, cut: float) -> None:
    """Required KS on the studentized sample; informational KS against the theoretical scale."""
    ks = report.estimate(f"ks[{tag}]", ks_statistic((x - x.mean()) / x.std(ddof=1)))
    report.below(f"ks[{tag}]", ks, "zero", cut)
    if math.isfinite(sd):
        ks = report.estimate(f"ks_theory_scale[{tag}]", ks_statistic(x / sd))
        report.below(f"ks_theory_scale[{tag}]", ks, "zero", cut, required=False)


def _kernel_statistics(cfg: ExperimentConfig, report: ExperimentReport, threads) -> np.ndarray:
    n, h, spec = cfg.n, cfg.bandwidth, cfg.spec
    kernel = get_kernel(cfg.kernel)
    lam_n = cfg.regime.lambda_at(n, h)
    a = scale_factor(cfg.regime, n, h, spec.d)
    windows = [window_weights(n, x, h, kernel) for x in cfg.x_points]
    lo = min(int(j[0]) for j, _ in windows)
    hi = max(int(j[-1]) for j, _ in windows)
    # only the stretch covering the windows is needed (stationarity)
    sim = ProcessSimulator(spec, lam_n, hi - lo + 1)
    root = SeedTree(cfg.master_seed)

    def one(r):
        e = sim.sample(root.child(r))
        return [a * n * h * float(np.dot(w, e[j - lo])) for j, w in windows]

    good, report.failures = _replicate(one, range(cfg.replications), threads)
    if len(good) < 2:
        raise FlurlabError("too few successful replications")
    return np.array(good)


def _kernel_targets(cfg: ExperimentConfig, report: ExperimentReport) -> str:
    kernel = get_kernel(cfg.kernel)
    d, s2 = cfg.spec.d, cfg.spec.sigma**2
    label = cfg.regime.label
    lam_star = cfg.regime.lambda_star
    if cfg.regime.kind != "window" and label == "moderately":
        raise DomainError("moderate tempering for the kernel estimator needs a window regime")
    report.target("variance", asymptotic_variance(cfg.regime, d, None, s2, kernel))
    if label != "strongly" and d != 0:
        report.target("variance_printed", asymptotic_variance(cfg.regime, d, None, s2, kernel, "printed"))
        report.target("variance_operator_form",
                      operator_form_variance(d, 0.0 if label == "weakly" else lam_star, s2, kernel))
        return "variance_operator_form"
    return "variance"


def _run_kernel(cfg: ExperimentConfig, report: ExperimentReport, threads) -> None:
    main = _kernel_targets(cfg, report)
    report.target("zero", 0.0)
    z = _kernel_statistics(cfg, report, threads)
    tol = cfg.thresholds
    ks_cut = ks_threshold(z.shape[0], tol.ks_level)
    cov = empirical_cov(z)
    for i, x in enumerate(cfg.x_points):
        tag = f"x={x:g}"
        v = report.estimate(f"variance[{tag}]", cov[i, i], variance_se(z[:, i]))
        report.relative(f"variance[{tag}]", v, main, tol.variance_rel)
        if main != "variance":
            report.relative(f"variance_vs_printed[{tag}]", v, "variance_printed", tol.variance_rel,
                            required=False)
        _ks_pair(report, tag, z[:, i], math.sqrt(report.theoretical_targets[main]), ks_cut)
    if cfg.kind == "kernel_fdd":
        for i in range(len(cfg.x_points)):
            for k in range(i + 1, len(cfg.x_points)):
                tag = f"x={cfg.x_points[i]:g},{cfg.x_points[k]:g}"
                rho = cov[i, k] / math.sqrt(cov[i, i] * cov[k, k])
                report.estimate(f"correlation[{tag}]", rho, (1 - rho * rho) / math.sqrt(z.shape[0]))
                report.below(f"abs_correlation[{tag}]", abs(rho), "zero", tol.correlation_abs)


def _run_weighted_sum(cfg: ExperimentConfig, report: ExperimentReport, threads) -> None:
    nh = int(round(cfg.n * cfg.bandwidth))
    res = weighted_sum_limit_check(cfg.spec, cfg.regime, nh, get_kernel(cfg.kernel),
                                   SeedTree(cfg.master_seed), cfg.replications)
    report.target("variance", res.theory)
    report.target("ratio", 1.0)
    report.estimate("variance_sum", res.lhs_var, variance_se(res.lhs))
    report.estimate("variance_integral", res.rhs_var, variance_se(res.rhs))
    report.estimate("ratio", res.ratio)
    tol = cfg.thresholds.variance_rel
    report.relative("variance_ratio", res.ratio, "ratio", tol)
    report.relative("variance_sum", res.lhs_var, "variance", tol)
    report.relative("variance_integral", res.rhs_var, "variance", tol)


def _knot_scale(regime: TemperingRegime, n: int, d: float) -> float:
    if regime.label == "strongly":
        return regime.lambda_at(n) ** d * math.sqrt(n)
    return float(n) ** (0.5 - d)


def _run_knot_law(cfg: ExperimentConfig, report: ExperimentReport, threads) -> None:
    model, spec, n = cfg.model, cfg.spec, cfg.n
    d, s2 = spec.d, spec.sigma**2
    law = asymptotic_covariance(model, cfg.regime, d, None, s2, cfg.strong_form)
    names = [f"a{i + 1}" for i in range(model.p)] + ["eta"]
    for i, nm in enumerate(names):
        report.target(f"var[{nm}]", law.covariance[i, i])
    if law.case == "strongly":
        other = "white" if cfg.strong_form == "printed" else "printed"
        alt = asymptotic_covariance(model, cfg.regime, d, None, s2, other)
        for i, nm in enumerate(names):
            report.target(f"var_{other}[{nm}]", alt.covariance[i, i])
    report.target("zero", 0.0)

    sim = ProcessSimulator(spec, cfg.regime.lambda_at(n), n)
    fitter = KnotFitter(n, model.q, model.p)
    mean = model(fitter.s)
    root = SeedTree(cfg.master_seed)
    good, report.failures = _replicate(
        lambda r: fitter.fit(mean + sim.sample(root.child(r))).theta_hat, range(cfg.replications), threads)
    if len(good) < 2:
        raise FlurlabError("too few successful replications")
    err = np.array(good) - model.theta
    z = _knot_scale(cfg.regime, n, d) * err
    cov = empirical_cov(z)
    ms = err[:, -1] ** 2
    rmse = math.sqrt(ms.mean())
    report.estimate("rmse[eta]", rmse, float(ms.std()) / math.sqrt(ms.size) / (2 * rmse) if rmse else 0.0)
    tol = cfg.thresholds
    ks_cut = ks_threshold(z.shape[0], tol.ks_level)
    for i, nm in enumerate(names):
        v = report.estimate(f"var[{nm}]", cov[i, i], variance_se(z[:, i]))
        report.relative(f"var[{nm}]", v, f"var[{nm}]", tol.variance_rel)
        if law.case == "strongly":
            report.relative(f"var_{other}[{nm}]", v, f"var_{other}[{nm}]", tol.variance_rel, required=False)
        sd = math.sqrt(law.covariance[i, i])
        _ks_pair(report, nm, z[:, i], sd if sd > 0 else math.nan, ks_cut)


def _run_equivalence(cfg: ExperimentConfig, report: ExperimentReport, threads) -> None:
    res = asymptotic_equivalence_check(
        cfg.model, cfg.spec, cfg.regime, cfg.n_values, SeedTree(cfg.master_seed), cfg.replications,
        mapper=lambda fn, items: ordered_map(fn, items, threads))
    report.target("shrink", 1.0)
    for r in res:
        report.estimate(f"median[n={r.n}]", r.median)
        report.estimate(f"q90[n={r.n}]", r.q90)
    for a, b in zip(res, res[1:]):
        tag = f"n={a.n}->{b.n}"
        report.below(f"median_ratio[{tag}]", b.median / a.median, "shrink", 1.0)
        report.below(f"q90_ratio[{tag}]", b.q90 / a.q90, "shrink", 1.0)


def _run_invariance(cfg: ExperimentConfig, report: ExperimentReport, threads) -> None:
    spec = cfg.spec
    d, lam_star = spec.d, cfg.regime.lambda_star
    params = TfbmParams(d, lam_star, spec.sigma**2)
    limit = covariance(params, 1.0, 1.0)
    report.target("variance_limit", limit)
    report.target("variance_stated", limit / math.gamma(d + 1) ** 2)
    report.target("closer", 0.0)
    root = SeedTree(cfg.master_seed)
    errs = {}
    for nh in cfg.n_values:
        sampler = InvarianceSampler(spec, cfg.regime, nh, [1.0])
        good, fails = _replicate(lambda r: sampler.sample(root.child(nh, r)).values[-1], range(cfg.replications),
                                 threads)
        report.failures += fails
        x = np.array(good)
        v = report.estimate(f"variance[n={nh}]", float(np.var(x, ddof=1)), variance_se(x))
        errs[nh] = v
    tol = cfg.thresholds.variance_rel
    last = cfg.n_values[-1]
    report.relative(f"variance_stated[n={last}]", errs[last], "variance_stated", tol)
    report.relative(f"variance_limit[n={last}]", errs[last], "variance_limit", tol, required=False)
    for ref, required in (("variance_stated", True), ("variance_limit", False)):
        target = report.theoretical_targets[ref]
        gaps = [abs(errs[nh] / target - 1) for nh in cfg.n_values]
        for (n0, g0), (n1, g1) in zip(zip(cfg.n_values, gaps), zip(cfg.n_values[1:], gaps[1:])):
            report.below(f"approach_{ref}[n={n0}->{n1}]", g1 - g0, "closer", 0.0, required)


_RUNNERS = {
    "kernel_fdd": _run_kernel,
    "kernel_variance": _run_kernel,
    "weighted_sum_limit": _run_weighted_sum,
    "knot_law": _run_knot_law,
    "equivalence": _run_equivalence,
    "invariance_principle": _run_invariance,
}


def run(config: ExperimentConfig, threads: Optional[int] = None) -> ExperimentReport:
    """Run one experiment; ``threads`` overrides ``FLURLAB_THREADS``."""
    report = ExperimentReport(config)
    start = time.perf_counter()
    _RUNNERS[config.kind](config, report, threads)
    report.runtime_seconds = time.perf_counter() - start
    return report
