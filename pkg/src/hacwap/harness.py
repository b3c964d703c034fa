"""Monte Carlo power studies for the weak-IV tests.

Builds the Kronecker and non-Kronecker variance designs, simulates (S, T)
with common random numbers across alternatives, evaluates every requested
test against a shared bank of null S draws and records rejection rates with
Monte Carlo standard errors.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import critical as crit
from . import model
from . import statistics as stats
from .numerics import DomainError, chisq_cdf, chisq_quantile, noncentral_chisq_cdf, rng_stream

SIM_STREAM = 0x51
ALL_TESTS = ("ar", "lm", "cqlr", "posu", "mm1sim", "mm1su", "mm1lu",
             "mm2sim", "mm2su", "mm2lu")
DEFAULT_TESTS = ("ar", "lm", "cqlr", "mm1sim", "mm1su", "mm1lu", "mm2sim", "mm2su", "mm2lu")
HADAMARD = np.array([[1.0, 1.0], [1.0, -1.0]]) / math.sqrt(2.0)


def default_grid() -> list[float]:
    return [float(v) for v in np.linspace(-6.0, 6.0, 33)]


@dataclass
class DesignSpec:
    """A power-study design.

    ``beta_grid`` holds rescaled alternatives ``(beta - beta0) lambda^{1/2}``
    with ``lambda = k * lambda_over_k``; ``epsilon`` defaults to ``1/(k+1)``.
    """

    k: int = 5
    rho: float = 0.9
    lambda_over_k: float = 2.0
    kronecker: bool = True
    epsilon: float | None = None
    beta0: float = 0.0
    beta_grid: list = field(default_factory=default_grid)
    reps: int = 1000
    alpha: float = 0.05
    seed: int = 0
    tests: list = field(default_factory=lambda: list(DEFAULT_TESTS))
    sigma2: float = 10.0
    zeta: float = 10.0
    bank_size: int = 10000
    lu_draws: int = 100

    def __post_init__(self):
        if self.epsilon is None:
            self.epsilon = 1.0 / (self.k + 1)
        self.tests = [t.lower() for t in self.tests]
        self.beta_grid = [float(v) for v in self.beta_grid]
        if self.k < 1:
            raise DomainError("k must be at least 1")
        if not -1.0 < self.rho < 1.0:
            raise DomainError(f"rho must lie in (-1, 1), got {self.rho}")
        if not 0.0 < self.epsilon < 1.0:
            raise DomainError("epsilon must lie in (0, 1)")
        if not self.lambda_over_k > 0:
            raise DomainError("lambda_over_k must be positive")
        if self.reps < 100:
            raise DomainError("reps must be at least 100")
        if not 0.0 < self.alpha < 1.0:
            raise DomainError("alpha must lie in (0, 1)")
        if self.sigma2 <= 0 or self.zeta <= 0:
            raise DomainError("sigma2 and zeta must be positive")
        if self.bank_size < crit.MIN_BANK:
            raise DomainError(f"bank_size must be at least {crit.MIN_BANK}")
        unknown = set(self.tests) - set(ALL_TESTS)
        if unknown:
            raise DomainError(f"unknown tests: {sorted(unknown)}")

    @property
    def lam(self) -> float:
        return self.k * self.lambda_over_k

    @property
    def mu(self) -> np.ndarray:
        return np.full(self.k, math.sqrt(self.lam / self.k))

    def betas(self) -> np.ndarray:
        return self.beta0 + np.asarray(self.beta_grid) / math.sqrt(self.lam)

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    @classmethod
    def from_dict(cls, d: dict) -> "DesignSpec":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise DomainError(f"unknown design fields: {sorted(extra)}")
        return cls(**d)


def load_designs(path) -> list[DesignSpec]:
    """Designs from a JSON file: one object, a list, or ``{"designs": [...]}``.

    A ``"base"`` object, when present, supplies defaults for every design.
    """
    with open(path) as fh:
        cfg = json.load(fh)
    if isinstance(cfg, dict) and "designs" in cfg:
        base = cfg.get("base", {})
        return [DesignSpec.from_dict({**base, **d}) for d in cfg["designs"]]
    if isinstance(cfg, list):
        return [DesignSpec.from_dict(d) for d in cfg]
    return [DesignSpec.from_dict(cfg)]


def build_sigma(spec: DesignSpec) -> np.ndarray:
    """Design variance ``P[1+rho,0;0,0]P' (x) diag(v1) + P[0,0;0,1-rho]P' (x) diag(v2)``.

    ``P`` is the normalised Hadamard matrix, the orthogonal matrix that makes
    ``Omega`` unit-diagonal with correlation ``rho``. ``v1 = (1/eps - 1, 1, ..., 1)``;
    ``v2`` equals ``v1`` for the Kronecker design and moves the large entry
    to the last position otherwise.
    """
    if not -1.0 < spec.rho < 1.0:
        raise DomainError(f"rho must lie in (-1, 1), got {spec.rho}")
    k = spec.k
    big = 1.0 / spec.epsilon - 1.0
    v1 = np.ones(k)
    v1[0] = big
    if spec.kronecker:
        v2 = v1
    else:
        v2 = np.ones(k)
        v2[-1] = big
    first = HADAMARD @ np.diag([1.0 + spec.rho, 0.0]) @ HADAMARD.T
    second = HADAMARD @ np.diag([0.0, 1.0 - spec.rho]) @ HADAMARD.T
    sigma = np.kron(first, np.diag(v1)) + np.kron(second, np.diag(v2))
    return 0.5 * (sigma + sigma.T)


# ---------------------------------------------------------------------------
# simulation context


@dataclass
class PowerContext:
    """Everything shared by the replications of one design."""

    spec: DesignSpec
    sigma: np.ndarray
    bank: crit.SimBank
    kernels: dict
    lu: dict
    noise: np.ndarray
    c_mat: np.ndarray
    notes: dict = field(default_factory=dict)


def _noise(seed: int, reps: int, k: int) -> np.ndarray:
    # keyed by replication only: common random numbers across alternatives
    return np.stack([rng_stream(seed, SIM_STREAM, r).standard_normal(2 * k) for r in range(reps)])


def _calibration_draws(spec, sigma, mu, seed):
    rng = rng_stream(seed, SIM_STREAM, 0xCA1)
    lam = max(spec.lam, float(mu @ mu))
    pts = [model.simulate_st(spec.beta0 + x / math.sqrt(lam), mu, sigma, spec.beta0, rng, size=30)
           for x in (-6.0, -2.0, 0.0, 2.0, 6.0)]
    return np.vstack([p[0] for p in pts]), np.vstack([p[1] for p in pts])


def build_context(spec: DesignSpec, sigma=None, mu=None, lu_anchor=None) -> PowerContext:
    """Bank, calibrated WAP kernels and LU multipliers for a design."""
    sigma = build_sigma(spec) if sigma is None else np.asarray(sigma, dtype=float)
    mu = spec.mu if mu is None else np.asarray(mu, dtype=float)
    bank = crit.SimBank.generate(spec.bank_size, spec.k, spec.seed)
    kernels, lu, notes = {}, {}, {}
    S_cal, T_cal = _calibration_draws(spec, sigma, mu, spec.seed)
    for variant in ("mm1", "mm2"):
        if not any(t.startswith(variant) for t in spec.tests):
            continue
        if variant == "mm1":
            w = stats.WeightSpec.mm1(sigma, spec.sigma2, nodes=121, rule="trapezoid")
        else:
            w = stats.WeightSpec.mm2(sigma, spec.zeta, nodes=128)
        w = stats.calibrate_nodes(w, sigma, spec.beta0, S_cal, T_cal)
        kern = stats.WapKernel(w, sigma, spec.beta0)
        kern.attach_bank(bank.draws)
        kernels[variant] = kern
        notes[f"{variant}_nodes"] = kern.nodes
        if f"{variant}lu" in spec.tests:
            anchor = mu if lu_anchor is None else lu_anchor
            try:
                lu[variant] = crit.lu_multipliers(kern, bank, anchor, spec.alpha,
                                                  spec.lu_draws, spec.seed)
            except (crit.SolverError, DomainError) as exc:
                lu[variant] = exc
    noise = _noise(spec.seed, spec.reps, spec.k)
    return PowerContext(spec, sigma, bank, kernels, lu, noise,
                        model.c_beta0(spec.beta0, sigma), notes)


def draw_st(ctx: PowerContext, beta: float, mu) -> tuple[np.ndarray, np.ndarray]:
    k = ctx.spec.k
    mu = np.asarray(mu, dtype=float)
    ms = (beta - ctx.spec.beta0) * (ctx.c_mat @ mu)
    mt = model.d_beta(beta, ctx.spec.beta0, ctx.sigma) @ mu
    return ms + ctx.noise[:, :k], mt + ctx.noise[:, k:]


def _wap_decisions(ctx, variant, tests, S, T, alpha, failures, out):
    kern = ctx.kernels[variant]
    names = [n for n in (f"{variant}sim", f"{variant}su", f"{variant}lu") if n in tests]
    lu = ctx.lu.get(variant)
    if isinstance(lu, Exception):
        failures[f"{variant}lu"] = f"LU multipliers: {lu}"
        names = [n for n in names if n != f"{variant}lu"]
    if not names:
        return
    log_obs = kern.log_wap_pairs(S, T)
    res = {n: np.zeros(S.shape[0], dtype=bool) for n in names}
    if f"{variant}lu" in names:
        proj_bank = ctx.bank.draws @ (kern.C @ lu.anchors.T)
        proj_obs = S @ (kern.C @ lu.anchors.T)
    for r in range(S.shape[0]):
        lw = kern.log_wap_bank(T[r])
        for n in list(names):
            if n in failures:
                continue
            try:
                if n.endswith("sim"):
                    res[n][r] = log_obs[r] > crit.empirical_quantile(lw, alpha)
                elif n.endswith("su"):
                    obs, thr, _ = crit._su_decision(log_obs[r], S[r], lw, ctx.bank, alpha)
                    res[n][r] = obs > thr
                else:
                    shift = float(np.max(lw))
                    ls = crit._lu_log_scale(kern, T[r], lu.anchors)
                    stat_bank = crit._lu_stat(lw, proj_bank, ls, lu.c, shift)
                    obs = crit._lu_stat(log_obs[r:r + 1], proj_obs[r:r + 1], ls, lu.c, shift)[0]
                    res[n][r] = obs > crit.empirical_quantile(stat_bank, alpha)
            except (crit.SolverError, DomainError, np.linalg.LinAlgError) as exc:
                failures[n] = f"replication {r}: {exc}"
    for n in names:
        if n not in failures:
            out[n] = res[n]


def simulate_point(ctx: PowerContext, beta: float, mu=None, tests=None):
    """Rejection indicators of every test at one alternative.

    Returns ``(decisions, S, T, failures)`` where ``decisions`` maps test name
    to a boolean array over replications.
    """
    spec = ctx.spec
    tests = spec.tests if tests is None else tests
    mu = spec.mu if mu is None else np.asarray(mu, dtype=float)
    alpha, k = spec.alpha, spec.k
    S, T = draw_st(ctx, beta, mu)
    out, failures = {}, {}
    if "ar" in tests:
        out["ar"] = np.sum(S * S, axis=1) > chisq_quantile(alpha, k)
    if "lm" in tests or "cqlr" in tests:
        D0 = model.d_beta(spec.beta0, spec.beta0, ctx.sigma)
        X = np.linalg.solve(D0, T.T).T @ ctx.c_mat.T
        xx = np.sum(X * X, axis=1)
        ar = np.sum(S * S, axis=1)
        lm = np.sum(S * X, axis=1) ** 2 / xx
        if "lm" in tests:
            out["lm"] = lm > chisq_quantile(alpha, 1)
        if "cqlr" in tests:
            rt = np.sum(T * T, axis=1)
            qlr = stats.qlr_vec(ar, lm, rt)
            if k == 1:
                out["cqlr"] = qlr > chisq_quantile(alpha, 1)
            else:
                bank = ctx.bank.draws
                ar_b = np.sum(bank * bank, axis=1)
                dec = np.zeros(S.shape[0], dtype=bool)
                for r in range(S.shape[0]):
                    lm_b = (bank @ X[r]) ** 2 / xx[r]
                    dec[r] = qlr[r] > crit.empirical_quantile(stats.qlr_vec(ar_b, lm_b, rt[r]), alpha)
                out["cqlr"] = dec
    if "posu" in tests:
        v = ctx.c_mat @ mu
        out["posu"] = (S @ v) ** 2 / float(v @ v) > chisq_quantile(alpha, 1)
    for variant in ("mm1", "mm2"):
        if any(t.startswith(variant) for t in tests):
            _wap_decisions(ctx, variant, tests, S, T, alpha, failures, out)
    return out, S, T, failures


# ---------------------------------------------------------------------------
# power curves


@dataclass
class PowerCurve:
    x: np.ndarray
    beta: np.ndarray
    rates: dict
    se: dict
    envelope: np.ndarray
    envelope_one_sided: np.ndarray
    metadata: dict
    failures: dict = field(default_factory=dict)

    def min_rate(self, test: str) -> float:
        return float(np.min(self.rates[test]))

    def sup_gap(self, a: str, b: str) -> float:
        return float(np.max(np.abs(self.rates[a] - self.rates[b])))

    def stem(self) -> str:
        return f"power_{self.metadata['design_hash']}_seed{self.metadata['design']['seed']}"

    def to_csv(self, path) -> Path:
        path = Path(path)
        tests = list(self.rates)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x", "beta", *[c for t in tests for c in (t, f"{t}_se")],
                        "envelope", "envelope_one_sided"])
            for i in range(self.x.size):
                row = [repr(float(self.x[i])), repr(float(self.beta[i]))]
                for t in tests:
                    row += [repr(float(self.rates[t][i])), repr(float(self.se[t][i]))]
                row += [repr(float(self.envelope[i])), repr(float(self.envelope_one_sided[i]))]
                w.writerow(row)
        return path

    def to_json(self, path) -> Path:
        path = Path(path)
        doc = {"x": self.x.tolist(), "beta": self.beta.tolist(),
               "rates": {t: v.tolist() for t, v in self.rates.items()},
               "se": {t: v.tolist() for t, v in self.se.items()},
               "envelope": self.envelope.tolist(),
               "envelope_one_sided": self.envelope_one_sided.tolist(),
               "metadata": self.metadata, "failures": self.failures}
        path.write_text(json.dumps(doc, indent=2, sort_keys=True))
        return path

    def save(self, outdir, fmt: str = "both") -> list[Path]:
        outdir = Path(outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        paths = []
        if fmt in ("csv", "both"):
            paths.append(self.to_csv(outdir / f"{self.stem()}.csv"))
        if fmt in ("json", "both"):
            paths.append(self.to_json(outdir / f"{self.stem()}.json"))
        return paths


def _point_worker(args):
    ctx, beta = args
    return simulate_point(ctx, beta)


def run_power(spec: DesignSpec, workers: int = 1, ctx: PowerContext | None = None) -> PowerCurve:
    """Rejection rates of every requested test across the rescaled grid.

    Results depend only on the design (seed included): replication draws are
    keyed by replication index, so any worker count gives identical output.
    """
    ctx = build_context(spec) if ctx is None else ctx
    betas = spec.betas()
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            results = list(ex.map(_point_worker, [(ctx, b) for b in betas]))
    else:
        results = [simulate_point(ctx, b) for b in betas]
    failures = {}
    for _, _, _, f in results:
        for name, why in f.items():
            failures.setdefault(name, why)
    tests = [t for t in spec.tests if t not in failures]
    rates = {t: np.array([res[0][t].mean() for res in results]) for t in tests}
    se = {t: np.sqrt(rates[t] * (1.0 - rates[t]) / spec.reps) for t in tests}
    env = crit.power_envelope(betas, spec.mu, ctx.sigma, spec.beta0, spec.alpha)
    meta = {"design": spec.to_dict(), "design_hash": spec.digest(), **ctx.notes,
            "lu_multipliers": {v: (s.c.tolist() if not isinstance(s, Exception) else str(s))
                               for v, s in ctx.lu.items()}}
    return PowerCurve(np.asarray(spec.beta_grid), betas, rates, se, env.two_sided,
                      env.one_sided, meta, failures)


def ar_power(spec: DesignSpec, sigma, beta) -> np.ndarray:
    """Closed-form AR power ``1 - G_k(c(k); (beta-beta0)^2 mu'C^2 mu)``."""
    v = model.c_beta0(spec.beta0, sigma) @ spec.mu
    c = chisq_quantile(spec.alpha, spec.k)
    nc = (np.atleast_1d(beta) - spec.beta0) ** 2 * float(v @ v)
    return np.array([1.0 - noncentral_chisq_cdf(c, spec.k, float(x)) for x in nc])


# ---------------------------------------------------------------------------
# size audit


@dataclass
class SizeAudit:
    rows: list

    def failures(self) -> list:
        return [r for r in self.rows if r["flag"]]

    def to_csv(self, path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(self.rows[0]))
            w.writeheader()
            w.writerows(self.rows)
        return path


def run_size_audit(spec: DesignSpec, mu_list, sigma=None) -> SizeAudit:
    """Null rejection rates across nuisance values ``mu``; flags rates outside alpha +- 3 SE."""
    sigma = build_sigma(spec) if sigma is None else sigma
    rows = []
    se = math.sqrt(spec.alpha * (1.0 - spec.alpha) / spec.reps)
    for i, mu in enumerate(mu_list):
        mu = np.asarray(mu, dtype=float)
        ctx = build_context(spec, sigma=sigma, mu=mu)
        dec, _, _, failures = simulate_point(ctx, spec.beta0, mu)
        for t in spec.tests:
            if t in failures:
                rows.append({"mu_index": i, "lambda": float(mu @ mu), "test": t,
                             "rate": float("nan"), "se": se, "flag": True})
                continue
            rate = float(dec[t].mean())
            rows.append({"mu_index": i, "lambda": float(mu @ mu), "test": t, "rate": rate,
                         "se": se, "flag": bool(abs(rate - spec.alpha) > 3.0 * se)})
    return SizeAudit(rows)


def chisq_size(alpha: float, k: int) -> float:
    """Exact null rejection of a chi-square(k) test at its own critical value."""
    return float(1.0 - chisq_cdf(chisq_quantile(alpha, k), k))
