"""Command-line entry point.

Exit codes: 0 success, 1 invalid input, 2 numerical failure, 3 a
Monte Carlo or self-test check failed. Errors go to standard error as
``code=<tag> message=<text>``.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import __version__
from .errors import DomainError, FlurlabError, NumericalError
from .experiments import BandwidthRule, ExperimentConfig, Thresholds, run
from .flur_process import ProcessSpec, TemperingRegime, simulate, theoretical_acvf, write_path_csv
from .kernel_regression import asymptotic_variance, get_kernel, priestley_chao
from .numerics import SeedTree
from .piecewise_regression import PiecewiseModel, asymptotic_covariance, fit
from .tfbm2 import TfbmParams, sample_path_cholesky, sample_path_invariance

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_CHECK = 0, 1, 2, 3


class InputError(DomainError):
    """Bad user input with a specific machine tag."""

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


def _fmt(x: float) -> str:
    return "%.17g" % x


def _emit(text: str, out: Optional[str]) -> None:
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _json(obj) -> str:
    return json.dumps(obj, indent=2) + "\n"


def _matrix(m: np.ndarray) -> list:
    return [[float(v) for v in row] for row in np.asarray(m)]


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise InputError("bad_argument", f"expected comma-separated numbers, got {text!r}") from None


def _read_series(path: str) -> np.ndarray:
    """Values from a CSV with a header; uses the ``value`` column or else the last one."""
    p = Path(path)
    if not p.is_file():
        raise InputError("input_not_found", f"no such file: {path}")
    with open(p, newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise InputError("bad_input", "CSV needs a header row and at least one data row")
    header = [h.strip() for h in rows[0]]
    col = header.index("value") if "value" in header else len(header) - 1
    try:
        return np.array([float(r[col]) for r in rows[1:] if r])
    except (ValueError, IndexError):
        raise InputError("bad_input", f"non-numeric entry in column {header[col]!r}") from None


# ------------------------------------------------------------------ config

_CONFIG_KEYS = {
    "kind", "d", "lambda", "sigma", "regime", "regime_lambda", "regime_c", "regime_gamma",
    "n", "replications", "seed", "h", "h_c", "h_gamma", "x_points", "kernel",
    "q", "p", "eta", "a", "n_values", "strong_form", "variance_tol", "correlation_tol", "ks_level",
}


def load_config(path: str) -> dict:
    p = Path(path)
    if not p.is_file():
        raise InputError("config_not_found", f"no such config file: {path}")
    try:
        raw = tomllib.loads(p.read_text(encoding="utf-8"))
    except tomllib.TOMLDecodeError as exc:
        raise InputError("config_invalid", f"cannot parse {path}: {exc}") from None
    return raw


def _parse_override(item: str) -> tuple[str, object]:
    key, sep, value = item.partition("=")
    if not sep:
        raise InputError("bad_argument", f"--set expects KEY=VALUE, got {item!r}")
    try:
        parsed = tomllib.loads(f"v = {value}")["v"]
    except tomllib.TOMLDecodeError:
        parsed = value
    return key.strip(), parsed


def build_config(raw: dict) -> ExperimentConfig:
    """Flat key/value mapping to a validated ``ExperimentConfig``."""
    unknown = sorted(set(raw) - _CONFIG_KEYS)
    if unknown:
        raise InputError("config_unknown_key", f"unknown config keys: {', '.join(unknown)}")
    for key in ("kind", "d", "n", "replications"):
        if key not in raw:
            raise InputError("config_missing_key", f"config needs {key!r}")
    try:
        spec = ProcessSpec(float(raw["d"]), float(raw.get("lambda", 0.0)), float(raw.get("sigma", 1.0)))
        kind = raw.get("regime", "fixed")
        if kind == "fixed":
            regime = TemperingRegime.fixed(float(raw.get("regime_lambda", spec.lam)))
        elif kind == "power":
            regime = TemperingRegime.power(float(raw.get("regime_c", 1.0)), float(raw.get("regime_gamma", 1.0)))
        elif kind == "window":
            regime = TemperingRegime.window(float(raw.get("regime_c", 1.0)))
        else:
            raise InputError("config_invalid", f"unknown regime {kind!r}")
        if "h" in raw:
            h_rule = BandwidthRule("fixed", value=float(raw["h"]))
        else:
            h_rule = BandwidthRule("power", c=float(raw.get("h_c", 1.0)), gamma=float(raw.get("h_gamma", 0.2)))
        model = None
        if "q" in raw or "p" in raw:
            model = PiecewiseModel(int(raw["q"]), int(raw["p"]), float(raw["eta"]),
                                   tuple(float(v) for v in raw["a"]))
        defaults = Thresholds()
        thresholds = Thresholds(float(raw.get("variance_tol", defaults.variance_rel)),
                                float(raw.get("correlation_tol", defaults.correlation_abs)),
                                float(raw.get("ks_level", defaults.ks_level)))
        return ExperimentConfig(
            kind=str(raw["kind"]), spec=spec, regime=regime, n=int(raw["n"]),
            replications=int(raw["replications"]), master_seed=int(raw.get("seed", 0)),
            h_rule=h_rule, x_points=tuple(raw.get("x_points", (0.5,))),
            kernel=str(raw.get("kernel", "epanechnikov")), model=model,
            n_values=tuple(raw.get("n_values", ())), strong_form=str(raw.get("strong_form", "printed")),
            thresholds=thresholds)
    except KeyError as exc:
        raise InputError("config_missing_key", f"config needs {exc.args[0]!r}") from None
    except FlurlabError:
        raise
    except (TypeError, ValueError) as exc:
        raise InputError("config_invalid", str(exc)) from None


# ------------------------------------------------------------------ commands


def _regime_from_args(args) -> Optional[TemperingRegime]:
    if args.regime is None:
        return None
    if args.regime == "fixed":
        return TemperingRegime.fixed(args.lam)
    if args.regime == "power":
        return TemperingRegime.power(args.regime_c, args.regime_gamma)
    return TemperingRegime.window(args.regime_c)


def cmd_simulate(args) -> int:
    spec = ProcessSpec(args.d, args.lam, args.sigma)
    path = simulate(spec, _regime_from_args(args), args.n, SeedTree(args.seed), h=args.h)
    if args.out:
        write_path_csv(path, args.out)
    else:
        write_path_csv(path, sys.stdout)
    return EXIT_OK


def cmd_acvf(args) -> int:
    g = theoretical_acvf(ProcessSpec(args.d, args.lam, args.sigma), None, args.max_lag)
    _emit("lag,acvf\n" + "".join(f"{k},{_fmt(v)}\n" for k, v in enumerate(g)), args.out)
    return EXIT_OK


def cmd_tfbm(args) -> int:
    if args.times:
        times = _floats(args.times)
    else:
        times = list(np.arange(args.points + 1) * (args.horizon / args.points))
    seeds = SeedTree(args.seed)
    if args.method == "cholesky":
        path = sample_path_cholesky(TfbmParams(args.d, args.lam, args.sigma**2), times, seeds)
    else:
        path = sample_path_invariance(ProcessSpec(args.d, sigma=args.sigma), TemperingRegime.window(args.lam),
                                      args.nh, times, seeds)
    rows = "".join(f"{_fmt(t)},{_fmt(v)}\n" for t, v in zip(path.times, path.values))
    _emit("t,value\n" + rows, args.out)
    return EXIT_OK


def cmd_variance(args) -> int:
    if args.q is None and args.p is None:
        v = asymptotic_variance(args.case, args.d, args.lambda_star, args.sigma**2,
                                get_kernel(args.kernel), args.convention)
        _emit(_json({"sigma2": v}), args.out)
        return EXIT_OK
    if args.q is None or args.p is None or args.eta is None or args.a is None:
        raise InputError("bad_argument", "a knot model needs --q, --p, --eta and --a")
    model = PiecewiseModel(args.q, args.p, args.eta, tuple(_floats(args.a)))
    law = asymptotic_covariance(model, args.case, args.d, args.lambda_star, args.sigma**2, args.strong_form)
    _emit(_json({"case": law.case, "rate_exponent": law.rate_exponent,
                 "lambda_matrix": _matrix(law.lambda_matrix), "sigma_matrix": _matrix(law.sigma_matrix),
                 "covariance": _matrix(law.covariance)}), args.out)
    return EXIT_OK


def cmd_fit_kernel(args) -> int:
    y = _read_series(args.input)
    kernel = get_kernel(args.kernel)
    h = args.h if args.h is not None else y.size ** -0.2
    if args.x_points:
        xs = _floats(args.x_points)
    else:
        xs = list(np.linspace(h, 1 - h, args.grid_points + 2)[1:-1])
    est = [priestley_chao(y, x, h, kernel) for x in xs]
    _emit("x,estimate\n" + "".join(f"{_fmt(x)},{_fmt(e)}\n" for x, e in zip(xs, est)), args.out)
    return EXIT_OK


def cmd_fit_knot(args) -> int:
    res = fit(_read_series(args.input), args.q, args.p)
    _emit(_json(res.to_json()), args.out)
    return EXIT_OK


def cmd_experiment(args) -> int:
    raw = load_config(args.config)
    for item in args.set or ():
        key, value = _parse_override(item)
        raw[key] = value
    for key in ("seed", "replications", "n"):
        value = getattr(args, key)
        if value is not None:
            raw[key] = value
    if args.threads is not None and args.threads < 0:
        raise InputError("bad_argument", "--threads must be >= 0")
    config = build_config(raw)
    report = run(config, threads=args.threads)
    text = report.to_json(include_runtime=args.runtime)
    _emit(text, args.out_json)
    if args.out_csv:
        Path(args.out_csv).write_text(report.to_csv(), encoding="utf-8")
    if not report.passed:
        failed = [t.name for t in report.tests if t.required and not t.passed]
        print(f"code=experiment_failed tests={','.join(failed)}", file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


def _selftest_checks() -> list[tuple[str, bool, str]]:
    from .flur_process import binomial_coefficients
    from .numerics import log_gamma
    from .tfbm2 import covariance, covariance_harmonizable_oracle, covariance_time_domain, tfi_indicator_identity_check
    from .kernel_regression import operator_form_variance

    out = []
    c = binomial_coefficients(0.3, 0.0, 1000)[-1]
    ref = math.exp(log_gamma(1000.3) - log_gamma(1001.0) - log_gamma(0.3))
    out.append(("coefficient_log_gamma_form", abs(c / ref - 1) < 1e-10, f"rel={abs(c / ref - 1):.2e}"))
    p = TfbmParams(0.3, 1.0)
    a, b, t = covariance(p, 1.0, 1.0), covariance_harmonizable_oracle(p, 1.0, 1.0), covariance_time_domain(p, 1.0, 1.0)
    gap = max(abs(b / a - 1), abs(t / a - 1))
    out.append(("covariance_routes_agree", gap < 1e-5, f"rel={gap:.2e}"))
    lhs = covariance(TfbmParams(0.3, 1.0), 2.0, 1.2)
    rhs = 2.0**1.6 * covariance(TfbmParams(0.3, 2.0), 1.0, 0.6)
    out.append(("scaling_law", abs(lhs - rhs) < 1e-6, f"abs={abs(lhs - rhs):.2e}"))
    err = tfi_indicator_identity_check(p, 1.0, -0.5)
    out.append(("integral_operator_identity", err < 1e-8, f"abs={err:.2e}"))
    kern = get_kernel("epanechnikov")
    v1 = asymptotic_variance("moderate", 0.3, 1.0, 1.0, kern)
    v2 = operator_form_variance(0.3, 1.0, 1.0, kern)
    out.append(("kernel_variance_operator_form", abs(v1 / v2 - 1) < 1e-5, f"rel={abs(v1 / v2 - 1):.2e}"))
    model = PiecewiseModel(2, 3, 0.5, (1.0, 2.0, 3.0))
    n = 1000
    res = fit(model(np.arange(1, n + 1) / n), 2, 3)
    gap = float(np.max(np.abs(res.theta_hat - model.theta)))
    out.append(("knot_noiseless_recovery", gap < 1e-5, f"abs={gap:.2e}"))
    return out


def cmd_selftest(args) -> int:
    ok = True
    for name, passed, detail in _selftest_checks():
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'} {name} {detail}")
    return EXIT_OK if ok else EXIT_CHECK


# ------------------------------------------------------------------ parser


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flurlab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"flurlab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def process_args(p, need_n=True):
        p.add_argument("--d", type=float, required=True)
        p.add_argument("--lambda", dest="lam", type=float, default=0.0)
        p.add_argument("--sigma", type=float, default=1.0)
        if need_n:
            p.add_argument("--n", type=_positive_int, required=True)
        p.add_argument("--out")

    p = sub.add_parser("simulate", help="tempered linear process path as CSV")
    process_args(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--regime", choices=("fixed", "power", "window"))
    p.add_argument("--regime-c", type=float, default=1.0)
    p.add_argument("--regime-gamma", type=float, default=1.0)
    p.add_argument("--h", type=float)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("acvf", help="theoretical autocovariances as CSV")
    process_args(p, need_n=False)
    p.add_argument("--max-lag", type=int, required=True)
    p.set_defaults(func=cmd_acvf)

    p = sub.add_parser("tfbm", help="TFBMII path on a grid as CSV")
    p.add_argument("--d", type=float, required=True)
    p.add_argument("--lambda", dest="lam", type=float, default=1.0)
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--times", help="comma-separated increasing times")
    p.add_argument("--points", type=_positive_int, default=256)
    p.add_argument("--horizon", type=float, default=1.0)
    p.add_argument("--method", choices=("cholesky", "invariance"), default="cholesky")
    p.add_argument("--nh", type=int, default=4096, help="partial-sum length for --method invariance")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_tfbm)

    p = sub.add_parser("variance", help="limit variance (kernel) or covariance matrices (knot) as JSON")
    p.add_argument("--case", choices=("strong", "weak", "moderate"), required=True)
    p.add_argument("--d", type=float, required=True)
    p.add_argument("--lambda-star", type=float)
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--kernel", default="epanechnikov")
    p.add_argument("--convention", choices=("consistent", "printed"), default="consistent")
    p.add_argument("--q", type=int)
    p.add_argument("--p", type=int)
    p.add_argument("--eta", type=float)
    p.add_argument("--a", help="comma-separated coefficients")
    p.add_argument("--strong-form", choices=("printed", "white"), default="printed")
    p.add_argument("--out")
    p.set_defaults(func=cmd_variance)

    p = sub.add_parser("fit-kernel", help="kernel estimate on a grid from a CSV series")
    p.add_argument("--input", required=True)
    p.add_argument("--h", type=float)
    p.add_argument("--kernel", default="epanechnikov")
    p.add_argument("--x-points")
    p.add_argument("--grid-points", type=_positive_int, default=9)
    p.add_argument("--out")
    p.set_defaults(func=cmd_fit_kernel)

    p = sub.add_parser("fit-knot", help="one-knot piecewise polynomial fit from a CSV series")
    p.add_argument("--input", required=True)
    p.add_argument("--q", type=int, required=True)
    p.add_argument("--p", type=int, required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_fit_knot)

    p = sub.add_parser("experiment", help="run a Monte Carlo experiment from a TOML config")
    p.add_argument("--config", required=True)
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    p.add_argument("--seed", type=int)
    p.add_argument("--replications", type=int)
    p.add_argument("--n", type=int)
    p.add_argument("--threads", type=int, help="overrides FLURLAB_THREADS (0 = one per CPU)")
    p.add_argument("--out-json")
    p.add_argument("--out-csv")
    p.add_argument("--runtime", action="store_true", help="include wall time in the JSON")
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("selftest", help="quick built-in property checks")
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        if exc.code in (0, None):
            return EXIT_OK
        print("code=bad_argument message=invalid command line", file=sys.stderr)
        return EXIT_INPUT
    try:
        return args.func(args)
    except DomainError as exc:
        print(f"code={exc.code} message={exc}", file=sys.stderr)
        return EXIT_INPUT
    except NumericalError as exc:
        print(f"code={exc.code} message={exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FlurlabError as exc:
        print(f"code={exc.code} message={exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"code=io_error message={exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
