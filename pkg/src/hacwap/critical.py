"""Critical values and test decisions.

Fixed chi-square tests (AR, LM, POSU), conditional-quantile tests (CQLR and
WAP-similar), the strongly unbiased WAP test whose critical value function
comes from a linear program over a bank of null draws of S, the locally
unbiased WAP test and the two-sided power envelope.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import model
from . import statistics as stats
from .numerics import DomainError, chisq_quantile, noncentral_chisq_cdf, normal_cdf, rng_stream
from .simplex import BasisState, SolverError, dual_simplex, solve_bounded_lp

__all__ = [
    "SimBank", "CriticalSolution", "TestReport", "LuSolution", "EnvelopeCurve", "SolverError",
    "ar_test", "lm_test", "posu_test", "cqlr_test", "conditional_quantile", "empirical_quantile",
    "su_solve", "wap_similar_test", "wap_su_test", "wap_lu_test", "lu_multipliers",
    "power_envelope",
]

MIN_BANK = 500
BANK_STREAM = 0xB4
LU_STREAM = 0x1C


@dataclass(frozen=True)
class SimBank:
    """J iid standard normal k-vectors reused for every conditioning value ``t``."""

    draws: np.ndarray
    seed: int

    def __post_init__(self):
        d = np.asarray(self.draws, dtype=float)
        if d.ndim != 2:
            raise DomainError("bank draws must be a J x k array")
        if d.shape[0] < MIN_BANK:
            raise DomainError(f"bank needs at least {MIN_BANK} draws, got {d.shape[0]}")
        d.setflags(write=False)
        object.__setattr__(self, "draws", d)

    @classmethod
    def generate(cls, size: int, k: int, seed: int, key: int = 0) -> "SimBank":
        rng = rng_stream(seed, BANK_STREAM, key)
        return cls(rng.standard_normal((size, k)), seed)

    @property
    def size(self) -> int:
        return self.draws.shape[0]

    @property
    def k(self) -> int:
        return self.draws.shape[1]


@dataclass
class CriticalSolution:
    kappa0: float
    kappa1: np.ndarray
    lp_status: str
    active_count: int
    objective: float = np.nan
    iterations: int = 0
    decisions: np.ndarray | None = field(default=None, repr=False)
    basis: BasisState | None = field(default=None, repr=False)

    def threshold(self, s) -> np.ndarray | float:
        return self.kappa0 + np.asarray(s, dtype=float) @ self.kappa1


@dataclass
class TestReport:
    name: str
    statistic: float
    critical: float
    reject: bool = field(init=False)
    alpha: float = 0.05
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        self.reject = bool(self.statistic > self.critical)

    def to_dict(self) -> dict:
        return {"name": self.name, "statistic": float(self.statistic),
                "critical": float(self.critical), "reject": self.reject,
                "alpha": self.alpha, "diagnostics": self.diagnostics}


def _check_alpha(alpha):
    if not 0.0 < alpha < 1.0:
        raise DomainError(f"alpha must lie in (0, 1), got {alpha}")


# ---------------------------------------------------------------------------
# fixed critical values


def ar_test(st, alpha: float = 0.05) -> TestReport:
    _check_alpha(alpha)
    return TestReport("AR", stats.ar_stat(st), chisq_quantile(alpha, st.k), alpha)


def lm_test(st, alpha: float = 0.05) -> TestReport:
    _check_alpha(alpha)
    return TestReport("LM", stats.lm_stat(st), chisq_quantile(alpha, 1), alpha)


def posu_test(st, mu_dir, alpha: float = 0.05) -> TestReport:
    """Point optimal strongly unbiased test in direction ``mu_dir``."""
    _check_alpha(alpha)
    v = st.c_mat @ np.asarray(mu_dir, dtype=float)
    vv = float(v @ v)
    if vv < 1e-24:
        raise DomainError("POSU direction C mu is zero")
    stat = float(st.s @ v) ** 2 / vv
    return TestReport("POSU", stat, chisq_quantile(alpha, 1), alpha)


# ---------------------------------------------------------------------------
# conditional quantiles


def empirical_quantile(values, alpha: float) -> float:
    """Order statistic at index ``ceil((1 - alpha) J)`` (1-based)."""
    _check_alpha(alpha)
    v = np.asarray(values, dtype=float).ravel()
    bad = np.isnan(v)
    if bad.mean() > 0.01:
        raise DomainError(f"statistic is non-finite on {bad.mean():.1%} of the bank")
    J = v.size
    idx = math.ceil(round((1.0 - alpha) * J, 9)) - 1
    return float(np.partition(np.where(bad, np.inf, v), idx)[idx])


def conditional_quantile(psi, t, alpha: float, bank: SimBank) -> float:
    """Null ``1 - alpha`` quantile of ``psi(S, t)`` given ``T = t``.

    ``psi`` maps the (J, k) bank and ``t`` to J statistic values.
    """
    return empirical_quantile(psi(bank.draws, t), alpha)


def _qlr_bank(bank_draws, t, st):
    x = stats.lm_direction(st)
    ar = np.sum(bank_draws ** 2, axis=1)
    lm = (bank_draws @ x) ** 2 / float(x @ x)
    return stats.qlr_vec(ar, lm, float(t @ t))


def cqlr_test(st, alpha: float, bank: SimBank) -> TestReport:
    """Conditional QLR test; for k = 1 QLR equals AR and the exact chi-square(1) value is used."""
    _check_alpha(alpha)
    ar = stats.ar_stat(st)
    lm = stats.lm_stat(st)
    r = float(st.t @ st.t)
    stat = stats.qlr_stat(ar, lm, r)
    if st.k == 1:
        return TestReport("CQLR", stat, chisq_quantile(alpha, 1), alpha, {"critical": "exact"})
    crit = conditional_quantile(lambda d, t: _qlr_bank(d, t, st), st.t, alpha, bank)
    return TestReport("CQLR", stat, crit, alpha, {"r_t": r})


# ---------------------------------------------------------------------------
# WAP tests


def _kernel(weight, st, kernel):
    if kernel is not None:
        return kernel
    return stats.WapKernel(weight, st.sigma, st.beta0)


def _bank_values(kern: stats.WapKernel, bank: SimBank, t) -> np.ndarray:
    if kern._bank is not bank.draws:
        kern.attach_bank(bank.draws)
    return kern.log_wap_bank(t)


def wap_similar_test(st, weight, alpha: float, bank: SimBank, kernel=None) -> TestReport:
    """Similar WAP test: log WAP statistic against its null conditional quantile."""
    _check_alpha(alpha)
    kern = _kernel(weight, st, kernel)
    stat = float(kern.log_wap(st.s, st.t))
    crit = empirical_quantile(_bank_values(kern, bank, st.t), alpha)
    return TestReport(f"{weight.variant}-similar", stat, crit, alpha, {"nodes": kern.nodes})


def su_solve(ratio_values, bank: SimBank, alpha: float,
             warm: BasisState | None = None) -> CriticalSolution:
    """Critical value function ``kappa0 + s'kappa1`` of the strongly unbiased test.

    Maximises ``sum_j x_j ratio_j`` subject to ``mean(x) = alpha``,
    ``mean(x s) = 0`` and ``0 <= x <= 1`` over the bank; the multipliers of
    the equality constraints are returned as ``(kappa0, kappa1)``.
    """
    _check_alpha(alpha)
    r = np.asarray(ratio_values, dtype=float)
    S = bank.draws
    J, k = S.shape
    if r.shape != (J,):
        raise DomainError("ratio values must have one entry per bank draw")
    if J <= k + 1:
        raise DomainError("bank must have more than k + 1 draws")
    if not np.all(np.isfinite(r)):
        raise DomainError("ratio values must be finite")
    A = np.vstack([np.ones(J), S.T])
    b = np.zeros(k + 1)
    b[0] = alpha * J
    if warm is None:
        # crash basis: the draws whose ratio sits closest to the empirical quantile
        q = empirical_quantile(r, alpha)
        basic = np.argsort(np.abs(r - q), kind="stable")[: k + 1]
    else:
        basic = warm.basic
    try:
        res = dual_simplex(r, A, b, basic)
    except SolverError:
        start = np.argsort(-r, kind="stable")[: int(math.floor(alpha * J))]
        res = solve_bounded_lp(r, A, b, start_upper=start)
        res.status = "degenerate-fallback"
    frac = int(np.sum((res.x > 1e-9) & (res.x < 1.0 - 1e-9)))
    return CriticalSolution(float(res.duals[0]), res.duals[1:].copy(), res.status, frac,
                            res.objective, res.iterations, res.x, res.basis)


def _su_decision(log_obs, s_obs, log_bank, bank, alpha, warm=None):
    shift = float(np.max(log_bank))
    ratio = np.exp(log_bank - shift)
    sol = su_solve(ratio, bank, alpha, warm)
    with np.errstate(over="ignore"):
        obs = float(np.exp(log_obs - shift))
    return obs, float(sol.threshold(s_obs)), sol


def wap_su_test(st, weight, alpha: float, bank: SimBank, kernel=None,
                warm: BasisState | None = None) -> TestReport:
    """Strongly unbiased WAP test; the statistic is reported on the bank-scaled ratio."""
    _check_alpha(alpha)
    kern = _kernel(weight, st, kernel)
    log_obs = float(kern.log_wap(st.s, st.t))
    obs, crit, sol = _su_decision(log_obs, st.s, _bank_values(kern, bank, st.t), bank, alpha, warm)
    diag = {"lp_status": sol.lp_status, "active_count": sol.active_count,
            "iterations": sol.iterations, "kappa0": sol.kappa0,
            "kappa1": sol.kappa1.tolist(), "log_wap": log_obs}
    return TestReport(f"{weight.variant}-SU", obs, crit, alpha, diag)


# ---------------------------------------------------------------------------
# locally unbiased WAP test


@dataclass
class LuSolution:
    """Design-level multipliers ``c`` for the locally unbiased WAP test."""

    c: np.ndarray
    residuals: np.ndarray
    iterations: int
    anchors: np.ndarray
    tolerance: float


def _lu_log_scale(kern: stats.WapKernel, t, anchors) -> np.ndarray:
    """``log[f^T_{beta0, mu_l}(t) / ((1 + ||t||)^{-1} h^T_{beta0}(t))]`` per anchor."""
    t = np.asarray(t, dtype=float)
    k = t.size
    means = anchors @ kern.D0.T
    lf = -0.5 * (k * stats.LOG2PI + np.sum((t - means) ** 2, axis=1))
    return lf - kern.log_norm_t(t)


def _lu_stat(log_wap, proj, log_scale, c, shift):
    """``exp(log_wap - shift) - sum_l c_l proj_l exp(log_scale_l - shift)``."""
    c = np.asarray(c, dtype=float)
    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        main = np.exp(log_wap - shift)
        coef = np.sign(c) * np.exp(np.log(np.abs(c)) + log_scale - shift)
        return main - proj @ coef


class _LuMoments:
    def __init__(self, kern, bank, anchors, alpha, n_t, seed):
        self.alpha = alpha
        k = bank.k
        proj = bank.draws @ (kern.C @ anchors.T)
        self.norms = np.linalg.norm(kern.C @ anchors.T, axis=0)
        self.proj = proj
        self.rows = []
        for l, mu in enumerate(anchors):
            rng = rng_stream(seed, LU_STREAM, l)
            ts = kern.D0 @ mu + rng.standard_normal((n_t, k))
            for t in ts:
                lw = _bank_values(kern, bank, t)
                self.rows.append((l, lw, _lu_log_scale(kern, t, anchors), float(np.max(lw))))
        self.m = anchors.shape[0]
        self.n_t = n_t

    def __call__(self, c):
        out = np.zeros(self.m)
        for l, lw, ls, shift in self.rows:
            stat = _lu_stat(lw, self.proj, ls, c, shift)
            crit = empirical_quantile(stat, self.alpha)
            out[l] += np.mean((stat > crit) * self.proj[:, l])
        return out / (self.n_t * self.norms)


def lu_multipliers(kernel: stats.WapKernel, bank: SimBank, anchors, alpha: float = 0.05,
                   n_t: int = 100, seed: int = 0, max_iter: int = 200) -> LuSolution:
    """Solve the orthogonality moments ``E[phi S'C mu_l] = 0`` for ``c``.

    Moments are estimated with ``n_t`` null draws of T at each anchor and the
    shared S bank (common random numbers, so the map is deterministic). One
    anchor uses bracketing and bisection on the monotone moment; several
    anchors use damped Broyden iterations.
    """
    anchors = np.atleast_2d(np.asarray(anchors, dtype=float))
    if np.any(np.linalg.norm(anchors, axis=1) == 0):
        raise DomainError("LU anchors must be nonzero")
    moments = _LuMoments(kernel, bank, anchors, alpha, n_t, seed)
    # each normalised moment averages n_t * J products phi * z with sd(z) = 1
    tol = 3.0 / math.sqrt(bank.size * n_t)
    m = anchors.shape[0]
    c = np.zeros(m)
    g = moments(c)
    if np.all(np.abs(g) <= tol):
        return LuSolution(c, g, 0, anchors, tol)
    if m == 1:
        v, g, it = _bisect_lu(lambda v: moments(_c_of_v(v)), g, tol, max_iter)
    else:
        v, g, it = _gauss_seidel_lu(lambda v: moments(_c_of_v(v)), g, tol, max_iter)
    return LuSolution(_c_of_v(v), g, it, anchors, tol)


LOG_C_FLOOR = -600.0
V_MAX = 1200.0


def _c_of_v(v):
    """Monotone signed-log map; the WAP ratio spans hundreds of orders of magnitude."""
    a = np.abs(np.asarray(v, dtype=float))
    with np.errstate(divide="ignore"):
        # log(expm1(a)) without overflow
        log_em1 = a + np.log(-np.expm1(-a))
    return np.sign(v) * np.exp(LOG_C_FLOOR + log_em1)


def _bisect_lu(moments, g0, tol, max_iter, start=0.0):
    """Root of the scalar moment map, decreasing in ``v``, by bisection."""
    lo, glo = start, g0[0]
    hi = V_MAX if glo > 0 else -V_MAX
    ghi = moments(np.array([hi]))[0]
    it = 1
    if np.sign(ghi) == np.sign(glo) and abs(ghi) > tol:
        raise SolverError(f"LU moment keeps its sign over the search range; residual {ghi:.4g}")
    best_v, best_g = (hi, ghi) if abs(ghi) < abs(glo) else (lo, glo)
    while abs(best_g) > tol and abs(hi - lo) > 1e-10:
        it += 1
        if it > max_iter:
            break
        mid = 0.5 * (lo + hi)
        gm = moments(np.array([mid]))[0]
        if abs(gm) < abs(best_g):
            best_v, best_g = mid, gm
        if np.sign(gm) == np.sign(glo):
            lo, glo = mid, gm
        else:
            hi, ghi = mid, gm
    if abs(best_g) > tol:
        raise SolverError(f"LU moment did not reach tolerance; residual {best_g:.4g}")
    return np.array([best_v]), np.array([best_g]), it


def _gauss_seidel_lu(moments, g, tol, max_iter, sweeps: int = 30):
    """Coordinate sweeps of the scalar bisection, then damped Broyden if needed.

    Each moment decreases in its own multiplier, so one-dimensional solves are
    well posed; Broyden polishes any remaining coupling.
    """
    m = g.size
    u = np.zeros(m)
    it = 0
    for _ in range(sweeps):
        for l in range(m):
            if abs(g[l]) <= tol:
                continue

            def coord(v, l=l):
                w = u.copy()
                w[l] = v[0]
                return moments(w)[l:l + 1]

            try:
                ul, _, n = _bisect_lu(coord, g[l:l + 1], tol, max_iter, start=u[l])
            except SolverError:
                break
            u[l] = ul[0]
            it += n
            g = moments(u)
        if np.all(np.abs(g) <= tol):
            return u, g, it
    u2, g2, it2 = _broyden_lu(moments, g, tol, max_iter, start=u)
    return u2, g2, it + it2


def _fd_jacobian(moments, u, g, h=0.25):
    J = np.empty((g.size, g.size))
    for i in range(g.size):
        du = np.zeros(g.size)
        du[i] = h
        J[:, i] = (moments(u + du) - g) / h
    return J


def _broyden_lu(moments, g, tol, max_iter, start=None):
    """Damped Broyden iterations with step clipping on the moment map."""
    m = g.size
    u = np.zeros(m) if start is None else np.array(start, dtype=float)
    J = _fd_jacobian(moments, u, g)
    for it in range(1, max_iter + 1):
        if np.linalg.matrix_rank(J) < m:
            J = _fd_jacobian(moments, u, g)
        step = np.clip(-np.linalg.lstsq(J, g, rcond=None)[0], -1.0, 1.0)
        damp = 1.0
        while True:
            u_new = u + damp * step
            g_new = moments(u_new)
            if np.linalg.norm(g_new) < np.linalg.norm(g) or damp < 1e-3:
                break
            damp *= 0.5
        du, dg = u_new - u, g_new - g
        if du @ du > 0:
            J = J + np.outer(dg - J @ du, du) / (du @ du)
        u, g = u_new, g_new
        if np.all(np.abs(g) <= tol):
            return u, g, it
    raise SolverError(f"LU Broyden iterations did not converge; residuals {g}")


def default_anchor(st) -> np.ndarray:
    """Data-dependent anchor: the constrained MLE of mu at beta0."""
    return model.mu_hat(st.beta0, model.reconstruct_rbar(st), st.sigma)


def wap_lu_test(st, weight, alpha: float, bank: SimBank, anchors=None, kernel=None,
                solution: LuSolution | None = None, n_t: int = 100, seed: int = 0) -> TestReport:
    """Locally unbiased WAP test.

    The multipliers are design-level constants; pass ``solution`` to reuse
    them across observations. Without anchors the constrained MLE of mu at
    ``beta0`` is used, which makes the test data dependent.
    """
    _check_alpha(alpha)
    kern = _kernel(weight, st, kernel)
    data_anchor = anchors is None and solution is None
    if solution is None:
        a = default_anchor(st) if anchors is None else anchors
        solution = lu_multipliers(kern, bank, a, alpha, n_t, seed)
    return _lu_report(kern, st, bank, alpha, solution, data_anchor)


def _lu_report(kern, st, bank, alpha, solution, data_anchor=False):
    lw_bank = _bank_values(kern, bank, st.t)
    shift = float(np.max(lw_bank))
    ls = _lu_log_scale(kern, st.t, solution.anchors)
    proj_bank = bank.draws @ (kern.C @ solution.anchors.T)
    stat_bank = _lu_stat(lw_bank, proj_bank, ls, solution.c, shift)
    crit = empirical_quantile(stat_bank, alpha)
    log_obs = float(kern.log_wap(st.s, st.t))
    proj_obs = st.s @ (kern.C @ solution.anchors.T)
    obs = float(_lu_stat(np.array([log_obs]), proj_obs[None], ls, solution.c, shift)[0])
    diag = {"c": solution.c.tolist(), "moment_residuals": solution.residuals.tolist(),
            "data_dependent_anchor": data_anchor}
    return TestReport(f"{kern.spec.variant}-LU", obs, crit, alpha, diag)


# ---------------------------------------------------------------------------
# power envelope


@dataclass
class EnvelopeCurve:
    beta: np.ndarray
    two_sided: np.ndarray
    one_sided: np.ndarray


def envelope_power(strength, alpha: float = 0.05):
    """Two- and one-sided envelopes at ``(beta - beta0)^2 mu'C^2 mu = strength``."""
    c1 = chisq_quantile(alpha, 1)
    strength = np.atleast_1d(np.asarray(strength, dtype=float))
    two = np.array([1.0 - noncentral_chisq_cdf(c1, 1, float(v)) for v in strength])
    one = 1.0 - normal_cdf(np.sqrt(c1) - np.sqrt(strength))
    return two, one


def power_envelope(beta_grid, mu, sigma, beta0: float, alpha: float = 0.05) -> EnvelopeCurve:
    """Power of the POSU test at each alternative, tracing the SU envelope."""
    _check_alpha(alpha)
    beta_grid = np.asarray(beta_grid, dtype=float)
    v = model.c_beta0(beta0, sigma) @ np.asarray(mu, dtype=float)
    strength = (beta_grid - beta0) ** 2 * float(v @ v)
    two, one = envelope_power(strength, alpha)
    return EnvelopeCurve(beta_grid, two, one)
