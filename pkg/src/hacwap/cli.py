"""Command-line interface: ``hacwap {test,power,envelope,simulate}``.

Exit codes: 0 success, 2 data or configuration error, 3 solver failure or
singular variance estimate.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from . import critical as crit
from . import harness, model
from . import statistics as stats
from .numerics import DegeneracyError, DomainError, nearest_kronecker, rng_stream
from .simplex import SolverError

EXIT_OK, EXIT_DATA, EXIT_SOLVER = 0, 2, 3
DEFAULT_TESTS = "ar,lm,cqlr,mm1su,mm2su"
CLI_TESTS = ("ar", "lm", "cqlr", "posu", "mm1sim", "mm2sim", "mm1su", "mm2su", "mm1lu", "mm2lu")
SINGULAR_RCOND = 1e-12


class ConfigError(ValueError):
    pass


class SingularVarianceError(RuntimeError):
    pass


def _alpha(text) -> float:
    a = float(text)
    if not 0.0 < a <= 0.5:
        raise argparse.ArgumentTypeError(f"alpha must lie in (0, 0.5], got {a}")
    return a


def _tuning(text):
    if str(text).lower() == "auto":
        return "auto"
    v = float(text)
    if v <= 0:
        raise argparse.ArgumentTypeError("tuning must be positive or 'auto'")
    return v


def _floats(text) -> list[float]:
    return [float(v) for v in str(text).split(",") if v.strip()]


def resolve_config(path) -> Path:
    """A config path, or the name of a bundled config such as ``figure1``."""
    p = Path(path)
    if p.exists():
        return p
    bundled = resources.files("hacwap") / "configs" / (p.name if p.suffix else f"{p.name}.json")
    if bundled.is_file():
        return Path(str(bundled))
    raise ConfigError(f"config {path} not found")


def _load_config(path) -> dict:
    if path is None:
        return {}
    path = resolve_config(path)
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    return cfg


def _apply_config(args, parser, cfg: dict):
    """Config values fill in any flag left at its default; explicit flags win."""
    for key, value in cfg.items():
        dest = key.replace("-", "_")
        if not hasattr(args, dest) or dest in ("func", "subparser", "config"):
            raise ConfigError(f"unknown config key '{key}'")
        if getattr(args, dest) == parser.get_default(dest):
            setattr(args, dest, value)


def _write_json(doc, out):
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if out is None:
        sys.stdout.write(text)
    else:
        Path(out).write_text(text)


# ---------------------------------------------------------------------------
# test


def _sigma_summary(sigma) -> dict:
    eig = np.linalg.eigvalsh(sigma)
    return {"dim": int(sigma.shape[0]), "min_eigenvalue": float(eig[0]),
            "max_eigenvalue": float(eig[-1]),
            "condition_number": float(eig[-1] / eig[0]) if eig[0] > 0 else math.inf,
            "diagonal": np.diag(sigma).tolist()}


def _resolve_tuning(value, n):
    return float(math.ceil(n / 10)) if value == "auto" else float(value)


def _calibrated_kernel(weight, st, bank):
    # calibrate nodes where the kernel will be evaluated: the observation and bank points
    S = np.vstack([st.s, bank.draws[:60]])
    T = np.tile(st.t, (S.shape[0], 1))
    weight = stats.calibrate_nodes(weight, st.sigma, st.beta0, S, T)
    kern = stats.WapKernel(weight, st.sigma, st.beta0)
    kern.attach_bank(bank.draws)
    return weight, kern


def run_tests(st, tests, alpha, bank, sigma2, zeta, posu_dir=None, lu_draws=100, seed=0):
    reports = []
    weights = {}
    for name in tests:
        if name == "ar":
            reports.append(crit.ar_test(st, alpha))
        elif name == "lm":
            reports.append(crit.lm_test(st, alpha))
        elif name == "cqlr":
            reports.append(crit.cqlr_test(st, alpha, bank))
        elif name == "posu":
            if posu_dir is None:
                raise ConfigError("the posu test needs --posu-dir")
            reports.append(crit.posu_test(st, posu_dir, alpha))
        else:
            variant = name[:3]
            if variant not in weights:
                if variant == "mm1":
                    w = stats.WeightSpec.mm1(st.sigma, sigma2, nodes=121, rule="trapezoid")
                else:
                    w = stats.WeightSpec.mm2(st.sigma, zeta, nodes=128)
                weights[variant] = _calibrated_kernel(w, st, bank)
            w, kern = weights[variant]
            kind = name[3:]
            if kind == "sim":
                reports.append(crit.wap_similar_test(st, w, alpha, bank, kernel=kern))
            elif kind == "su":
                reports.append(crit.wap_su_test(st, w, alpha, bank, kernel=kern))
            else:
                reports.append(crit.wap_lu_test(st, w, alpha, bank, kernel=kern,
                                                n_t=lu_draws, seed=seed))
    return reports


def cmd_test(args) -> int:
    tests = [t.strip().lower() for t in args.tests.split(",") if t.strip()]
    unknown = set(tests) - set(CLI_TESTS)
    if unknown:
        raise ConfigError(f"unknown tests: {sorted(unknown)}")
    data = model.read_csv(args.data)
    rf = model.reduced_form(data, lags=args.lags)
    ratio = rf.diagnostics.get("raw_eigenvalue_ratio", 1.0)
    if ratio <= SINGULAR_RCOND:
        raise SingularVarianceError(
            f"estimated long-run variance is singular (eigenvalue ratio {ratio:.3e})")
    st = model.compute_st(rf, args.beta0)
    sigma2 = _resolve_tuning(args.sigma2, data.n)
    zeta = _resolve_tuning(args.zeta, data.n)
    bank = crit.SimBank.generate(args.bank, data.k, args.seed)
    posu_dir = np.array(_floats(args.posu_dir)) if args.posu_dir else None
    if posu_dir is not None and posu_dir.size != data.k:
        raise ConfigError(f"--posu-dir needs {data.k} entries")
    reports = run_tests(st, tests, args.alpha, bank, sigma2, zeta, posu_dir, seed=args.seed)
    kf = nearest_kronecker(rf.sigma, data.k)
    doc = {"n": data.n, "k": data.k, "beta0": args.beta0, "alpha": args.alpha,
           "lags": args.lags, "sigma2": sigma2, "zeta": zeta, "bank_size": args.bank,
           "bank_seed": args.seed, "tests": [r.to_dict() for r in reports],
           "sigma_hat": {**_sigma_summary(rf.sigma), **rf.diagnostics},
           "kronecker_residual": float(kf.residual_norm),
           "kronecker_relative_residual": float(kf.residual_norm / np.linalg.norm(rf.sigma))}
    if args.format == "csv":
        out = open(args.out, "w", newline="") if args.out else sys.stdout
        w = csv.writer(out)
        w.writerow(["test", "statistic", "critical", "reject"])
        for r in reports:
            w.writerow([r.name, repr(float(r.statistic)), repr(float(r.critical)), int(r.reject)])
        if args.out:
            out.close()
    else:
        _write_json(doc, args.out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# power and envelope


POWER_DEFAULTS = {"reps": 1000, "bank": 10000, "seed": 0}


def _design_from_flags(args) -> harness.DesignSpec:
    kw = {"k": args.k, "rho": args.rho, "lambda_over_k": args.lambda_over_k,
          "kronecker": not args.non_kronecker, "beta0": args.beta0, "alpha": args.alpha,
          "sigma2": args.sigma2, "zeta": args.zeta,
          "reps": args.reps if args.reps is not None else POWER_DEFAULTS["reps"],
          "bank_size": args.bank if args.bank is not None else POWER_DEFAULTS["bank"],
          "seed": args.seed if args.seed is not None else POWER_DEFAULTS["seed"]}
    if args.epsilon is not None:
        kw["epsilon"] = args.epsilon
    if args.grid:
        kw["beta_grid"] = _floats(args.grid)
    if args.tests:
        kw["tests"] = [t.strip() for t in args.tests.split(",") if t.strip()]
    return harness.DesignSpec(**kw)


def _designs(args) -> list[harness.DesignSpec]:
    if args.config is None:
        return [_design_from_flags(args)]
    try:
        designs = harness.load_designs(resolve_config(args.config))
    except (OSError, json.JSONDecodeError, TypeError) as exc:
        raise ConfigError(f"cannot load designs from {args.config}: {exc}") from exc
    # explicit --reps, --bank, --seed and --grid override every design in the file
    over = {key: getattr(args, flag) for key, flag in
            (("reps", "reps"), ("bank_size", "bank"), ("seed", "seed"))
            if getattr(args, flag) is not None}
    if args.grid:
        over["beta_grid"] = _floats(args.grid)
    if over:
        designs = [harness.DesignSpec.from_dict({**d.to_dict(), **over}) for d in designs]
    return designs


def cmd_power(args) -> int:
    out = Path(args.out or ".")
    for spec in _designs(args):
        curve = harness.run_power(spec, workers=args.workers)
        for p in curve.save(out, args.format):
            print(p)
        for name, why in curve.failures.items():
            print(f"warning: test {name} aborted: {why}", file=sys.stderr)
    return EXIT_OK


def cmd_envelope(args) -> int:
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    for spec in _designs(args):
        sigma = harness.build_sigma(spec)
        env = crit.power_envelope(spec.betas(), spec.mu, sigma, spec.beta0, spec.alpha)
        stem = f"envelope_{spec.digest()}_seed{spec.seed}"
        rows = list(zip(spec.beta_grid, env.beta, env.two_sided, env.one_sided))
        if args.format in ("csv", "both"):
            path = out / f"{stem}.csv"
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["x", "beta", "two_sided", "one_sided"])
                for row in rows:
                    w.writerow([repr(float(v)) for v in row])
            print(path)
        if args.format in ("json", "both"):
            path = out / f"{stem}.json"
            _write_json({"design": spec.to_dict(), "x": list(spec.beta_grid),
                         "beta": env.beta.tolist(), "two_sided": env.two_sided.tolist(),
                         "one_sided": env.one_sided.tolist()}, path)
            print(path)
    return EXIT_OK


# ---------------------------------------------------------------------------
# simulate


def cmd_simulate(args) -> int:
    if args.n < args.k + 1:
        raise ConfigError("need n >= k + 1")
    if not -1.0 < args.rho < 1.0:
        raise ConfigError("rho must lie in (-1, 1)")
    if args.pi is not None:
        pi = np.array(_floats(args.pi))
        if pi.size != args.k:
            raise ConfigError(f"--pi needs {args.k} entries")
    else:
        # concentration parameter n pi'pi equal to k * lambda_over_k
        pi = np.full(args.k, math.sqrt(args.lambda_over_k / args.n))
    omega = np.array([[1.0, args.rho], [args.rho, 1.0]])
    data = model.simulate_iv_data(args.n, args.beta, pi, omega, rng_stream(args.seed, 0x5D),
                                  hetero=args.hetero, ar=args.ar)
    out = args.out or "simulated.csv"
    model.write_csv(data, out)
    print(out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hacwap", description="Weak-IV robust tests with HAC errors")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, tests_default):
        sp.add_argument("--config", help="JSON file with values for any flag")
        sp.add_argument("--beta0", type=float, default=0.0)
        sp.add_argument("--alpha", type=_alpha, default=0.05)
        sp.add_argument("--tests", default=tests_default)
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out")
        sp.add_argument("--format", choices=("csv", "json", "both"), default="json")

    t = sub.add_parser("test", help="run the tests on a dataset")
    common(t, DEFAULT_TESTS)
    t.add_argument("data", nargs="?", help="CSV with columns y1, y2, z1..zk")
    t.add_argument("--lags", type=int, default=model.DEFAULT_LAGS)
    t.add_argument("--sigma2", type=_tuning, default="auto")
    t.add_argument("--zeta", type=_tuning, default="auto")
    t.add_argument("--bank", type=int, default=10000)
    t.add_argument("--posu-dir", help="comma-separated direction mu for the POSU test")
    t.set_defaults(func=cmd_test, subparser=t)

    for name, func, helptext in (("power", cmd_power, "Monte Carlo power curves"),
                                 ("envelope", cmd_envelope, "two-sided POSU envelope")):
        sp = sub.add_parser(name, help=helptext)
        common(sp, None)
        sp.set_defaults(func=func, format="both", seed=None)
        sp.add_argument("--k", type=int, default=5)
        sp.add_argument("--rho", type=float, default=0.9)
        sp.add_argument("--lambda-over-k", type=float, default=2.0)
        sp.add_argument("--epsilon", type=float)
        sp.add_argument("--non-kronecker", action="store_true")
        sp.add_argument("--grid", help="comma-separated rescaled alternatives")
        sp.add_argument("--reps", type=int)
        sp.add_argument("--bank", type=int)
        sp.add_argument("--sigma2", type=float, default=10.0)
        sp.add_argument("--zeta", type=float, default=10.0)
        sp.add_argument("--workers", type=int, default=1)

    s = sub.add_parser("simulate", help="generate a synthetic IV dataset")
    s.add_argument("--config")
    s.add_argument("--n", type=int, default=500)
    s.add_argument("--k", type=int, default=4)
    s.add_argument("--beta", type=float, default=0.0)
    s.add_argument("--pi", help="comma-separated first-stage coefficients")
    s.add_argument("--lambda-over-k", type=float, default=8.0)
    s.add_argument("--rho", type=float, default=0.5)
    s.add_argument("--hetero", type=float, default=0.0)
    s.add_argument("--ar", type=float, default=0.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_simulate, subparser=s)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_DATA
    try:
        if args.config is not None and args.command in ("test", "simulate"):
            _apply_config(args, args.subparser, _load_config(args.config))
        if args.command == "test" and not args.data:
            raise ConfigError("no input data file given")
        return args.func(args)
    except (SolverError, SingularVarianceError, model.DegenerateVarianceError,
            DegeneracyError, np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except (model.DataError, DomainError, ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
