"""Test statistics and weighted-average (WAP) densities.

Covers the classical weak-IV robust statistics (AR, LM, LR, QLR), the
invariant ``Q`` statistic and its density, the MM1/MM2 weighted-average
densities and the WAP statistic used by the conditional, SU and LU tests.

Densities are handled in the log domain throughout.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import integrate, special

from . import model
from .numerics import (
    DomainError,
    KroneckerFactors,
    hermite_rule,
    inv_psd,
    nearest_kronecker,
    stable_log_integral,
)

LOG2PI = np.log(2.0 * np.pi)
MM1, MM2 = "MM1", "MM2"
DEFAULT_MM1_NODES = 61
DEFAULT_MM2_NODES = 256
QUAD_RTOL = 1e-4
MAX_DOUBLINGS = 3


# ---------------------------------------------------------------------------
# classical statistics


def ar_stat(st) -> float:
    return float(st.s @ st.s)


def lm_direction(st) -> np.ndarray:
    """``C_{beta0} D_{beta0}^{-1} T``, the direction the LM statistic projects on."""
    d0 = model.d_beta(st.beta0, st.beta0, st.sigma)
    return st.c_mat @ np.linalg.solve(d0, st.t)


def lm_stat(st) -> float:
    x = lm_direction(st)
    xx = float(x @ x)
    if xx < 1e-24:
        raise DomainError("LM direction C D^{-1} T is degenerate")
    return float(st.s @ x) ** 2 / xx


def qlr_stat(ar: float, lm: float, r_t: float) -> float:
    """Quasi likelihood ratio from AR, LM and ``r(T) = T'T``."""
    if lm > ar + 1e-9 * max(1.0, abs(ar)):
        raise DomainError(f"LM ({lm}) exceeds AR ({ar})")
    return qlr_vec(ar, lm, r_t)


def qlr_vec(ar, lm, r_t):
    d = np.asarray(ar) - r_t
    out = 0.5 * (d + np.sqrt(d * d + 4.0 * np.asarray(lm) * r_t))
    return float(out) if np.ndim(out) == 0 else out


def _lr_profile(phis, rbar, sigma_inv, k):
    P11 = sigma_inv[:k, :k]
    P12 = sigma_inv[:k, k:]
    P22 = sigma_inv[k:, k:]
    q = sigma_inv @ rbar
    c, s = np.cos(phis), np.sin(phis)
    H = (c * c)[:, None, None] * P11 + (c * s)[:, None, None] * (P12 + P12.T) \
        + (s * s)[:, None, None] * P22
    v = c[:, None] * q[:k] + s[:, None] * q[k:]
    return np.einsum("ni,ni->n", v, np.linalg.solve(H, v[..., None])[..., 0])


def lr_from_rbar(rbar, sigma, t, grid: int = 257):
    """LR statistic and the maximising direction angle on the half circle."""
    rbar = np.asarray(rbar, dtype=float)
    k = rbar.size // 2
    sigma_inv = inv_psd(sigma)
    phis = np.linspace(0.0, np.pi, grid)
    vals = _lr_profile(phis, rbar, sigma_inv, k)
    i = int(np.argmax(vals))
    h = np.pi / (grid - 1)
    lo, hi = phis[i] - h, phis[i] + h
    gr = (np.sqrt(5.0) - 1.0) / 2.0
    f = lambda p: float(_lr_profile(np.array([p]), rbar, sigma_inv, k)[0])  # noqa: E731
    x1, x2 = hi - gr * (hi - lo), lo + gr * (hi - lo)
    f1, f2 = f(x1), f(x2)
    while hi - lo > 1e-10:
        if f1 < f2:
            lo, x1, f1 = x1, x2, f2
            x2 = lo + gr * (hi - lo)
            f2 = f(x2)
        else:
            hi, x2, f2 = x2, x1, f1
            x1 = hi - gr * (hi - lo)
            f1 = f(x1)
    best, phi = (f1, x1) if f1 >= vals[i] else (vals[i], phis[i])
    return max(best - float(t @ t), 0.0), float(phi) % np.pi


def lr_stat(rf, beta0: float) -> float:
    """Likelihood ratio statistic, maximised over directions ``a`` on the circle."""
    st = model.compute_st(rf, beta0)
    return lr_from_rbar(rf.rbar, rf.sigma, st.t)[0]


def lr_stat_st(st) -> float:
    return lr_from_rbar(model.reconstruct_rbar(st), st.sigma, st.t)[0]


# ---------------------------------------------------------------------------
# Kronecker-case quantities


def _omega_parts(beta0, omega):
    omega = np.asarray(omega, dtype=float)
    oi = np.linalg.inv(omega)
    a0 = np.array([beta0, 1.0])
    b0 = np.array([1.0, -beta0])
    c1 = 1.0 / np.sqrt(b0 @ omega @ b0)
    na = a0 @ oi @ a0
    d0 = np.sqrt(na)
    d1 = (oi @ a0)[0] / np.sqrt(na)
    return c1, d0, d1


def c_d_beta(beta: float, beta0: float, omega) -> tuple[float, float]:
    """``c_beta = (beta-beta0)(b0' Ω b0)^{-1/2}``, ``d_beta = a' Ω^{-1} a0 (a0' Ω^{-1} a0)^{-1/2}``."""
    c1, d0, d1 = _omega_parts(beta0, omega)
    delta = beta - beta0
    return c1 * delta, d0 + d1 * delta


def beta_of_theta(theta: float, beta0: float, omega) -> tuple[float, int]:
    """Solve ``tan(theta) = d_beta / c_beta`` for beta.

    Returns ``(beta, sign)`` where ``sign`` is +1 when ``(c, d)`` points along
    ``(cos theta, sin theta)`` and -1 when it points the opposite way. At the
    asymptotic slope of ``(c_beta, d_beta)`` beta is returned as ``+-inf``.
    """
    c1, d0, d1 = _omega_parts(beta0, omega)
    ct, sn = np.cos(theta), np.sin(theta)
    w = c1 * sn - d1 * ct
    if abs(w) < 1e-15:
        sign = 1 if c1 * ct + d1 * sn > 0 else -1
        return sign * np.inf, 1
    beta = beta0 + d0 * ct / w
    c, d = c_d_beta(beta, beta0, omega)
    return float(beta), 1 if c * ct + d * sn >= 0 else -1


def beta_ar(omega, beta0: float) -> float:
    """The beta at which ``d_beta`` vanishes; ``inf`` for a zero denominator."""
    w = np.asarray(omega, dtype=float)
    den = w[0, 1] - w[1, 1] * beta0
    if den == 0:
        return np.inf
    return float((w[0, 0] - w[0, 1] * beta0) / den)


def sign_transform(beta: float, lam: float, omega, beta0: float) -> tuple[float, float]:
    """Parameter-space image of the ``Q_ST -> -Q_ST`` sign transformation.

    ``j = e1' Ω^{-1} a0 (a0' Ω^{-1} a0)^{-1/2}``, the slope of ``d_beta``; with
    it the map sends ``(c, d) sqrt(lam)`` to ``(-c, d) sqrt(lam)`` up to a
    common sign. A vanishing denominator maps to the point at infinity.
    """
    _, d0, j = _omega_parts(beta0, omega)
    delta = beta - beta0
    den = d0 + 2.0 * j * delta
    if den == 0:
        return np.inf, np.inf
    return beta0 - d0 * delta / den, lam * den * den / (d0 * d0)


@dataclass(frozen=True)
class QStat:
    q_s: float
    q_st: float
    q_t: float

    @property
    def det(self) -> float:
        return self.q_s * self.q_t - self.q_st ** 2


def q_stat(st) -> QStat:
    return QStat(float(st.s @ st.s), float(st.s @ st.t), float(st.t @ st.t))


def log_q_density(q: QStat, beta: float, lam: float, omega, beta0: float, k: int) -> float:
    """Log density of ``Q`` at ``q`` for parameters ``(beta, lam)``; needs k >= 2."""
    if k < 2:
        raise DomainError("the density of Q needs k >= 2")
    c, d = c_d_beta(beta, beta0, omega)
    xi = c * c * q.q_s + 2.0 * c * d * q.q_st + d * d * q.q_t
    det = q.det
    if xi < -1e-12 * max(1.0, abs(q.q_s) + abs(q.q_t)) or det < 0 or q.q_s < 0 or q.q_t < 0:
        raise DomainError("q is not a Gram matrix")
    xi = max(xi, 0.0)
    nu = 0.5 * (k - 2)
    log_k0 = -(0.5 * (k + 2) * np.log(2.0) + 0.5 * np.log(np.pi) + special.gammaln(0.5 * (k - 1)))
    base = log_k0 - 0.5 * lam * (c * c + d * d) + 0.5 * (k - 3) * np.log(det) \
        - 0.5 * (q.q_s + q.q_t)
    z = np.sqrt(lam * xi)
    if z < 1e-8:
        # (z^2)^{-nu/2} I_nu(z) -> 1 / (2^nu Gamma(nu + 1))
        return float(base - nu * np.log(2.0) - special.gammaln(nu + 1.0))
    return float(base - nu * np.log(z) + np.log(special.ive(nu, z)) + z)


def q_density(q: QStat, beta: float, lam: float, omega, beta0: float, k: int) -> float:
    return float(np.exp(log_q_density(q, beta, lam, omega, beta0, k)))


# ---------------------------------------------------------------------------
# weighted-average densities


@dataclass
class WeightSpec:
    """MM1 (``tuning = sigma^2``) or MM2 (``tuning = zeta``) weight.

    ``kron`` is re-normalised to ``trace(phi) = k`` on construction so that the
    arbitrary Kronecker scale never reaches the prior. ``beta_sd`` is the MM1
    prior standard deviation of beta (1 by default; 0 gives a point mass).
    ``rule`` selects the MM1 beta rule for batch kernels: ``"hermite"`` or a
    ``"trapezoid"`` on ``beta0 +- bound * beta_sd``.
    """

    variant: str
    tuning: float
    kron: KroneckerFactors
    nodes: int | None = None
    beta_sd: float = 1.0
    rule: str = "hermite"
    bound: float = 8.0

    def __post_init__(self):
        self.variant = self.variant.upper()
        if self.variant not in (MM1, MM2):
            raise DomainError(f"unknown weight variant {self.variant!r}")
        if not self.tuning > 0:
            raise DomainError("the weight tuning parameter must be positive")
        if self.nodes is None:
            self.nodes = DEFAULT_MM1_NODES if self.variant == MM1 else DEFAULT_MM2_NODES
        if self.rule not in ("hermite", "trapezoid"):
            raise DomainError(f"unknown quadrature rule {self.rule!r}")
        if self.beta_sd < 0:
            raise DomainError("beta_sd must be nonnegative")
        if self.nodes < 15:
            raise DomainError("at least 15 quadrature nodes are required")
        if self.variant == MM2 and self.nodes % 2:
            self.nodes += 1
        self.kron = self.kron.normalized()

    @classmethod
    def mm1(cls, sigma, sigma2: float = 10.0, **kw) -> "WeightSpec":
        k = np.shape(sigma)[0] // 2
        return cls(MM1, sigma2, nearest_kronecker(sigma, k), **kw)

    @classmethod
    def mm2(cls, sigma, zeta: float = 10.0, **kw) -> "WeightSpec":
        k = np.shape(sigma)[0] // 2
        return cls(MM2, zeta, nearest_kronecker(sigma, k), **kw)

    def with_nodes(self, nodes: int) -> "WeightSpec":
        return WeightSpec(self.variant, self.tuning, self.kron, nodes, self.beta_sd,
                          self.rule, self.bound)


@dataclass
class WapValue:
    log_value: float
    diagnostics: dict = field(default_factory=dict)

    @property
    def value(self) -> float:
        return float(np.exp(self.log_value))


def psi_matrix(beta: float, scale: float, beta0: float, sigma, phi) -> np.ndarray:
    """``I_2k + scale [[δ² CΦC, δ CΦD'], [δ DΦC, DΦD']]`` with ``δ = beta - beta0``."""
    C = model.c_beta0(beta0, sigma)
    D = model.d_beta(beta, beta0, sigma)
    G = np.vstack([(beta - beta0) * C, D])
    k = C.shape[0]
    return np.eye(2 * k) + scale * G @ phi @ G.T


def _normal_logpdf_t(t, cov):
    t = np.atleast_2d(t)
    k = cov.shape[0]
    L = np.linalg.cholesky(cov)
    z = np.linalg.solve(L, t.T)
    return -0.5 * (k * LOG2PI + np.sum(z * z, axis=0)) - np.sum(np.log(np.diag(L)))


def _u_matrices(spec, C, D0, slope, beta0, params) -> np.ndarray:
    """Loading matrices ``U`` with ``Psi = I + tuning U phi U'`` at each parameter.

    MM1 parameters are offsets ``beta - beta0``; MM2 parameters are angles
    ``theta``, parametrised so that no node is singular at ``beta = +-inf``.
    """
    params = np.asarray(params, dtype=float)
    if spec.variant == MM1:
        return np.concatenate([params[:, None, None] * C[None],
                               D0[None] + params[:, None, None] * slope[None]], axis=1)
    c1, d0, d1 = _omega_parts(beta0, spec.kron.omega)
    ct, sn = np.cos(params), np.sin(params)
    w = c1 * sn - d1 * ct
    top = ct[:, None, None] * C[None]
    bottom = (w / d0)[:, None, None] * D0[None] + ct[:, None, None] * slope[None]
    return np.concatenate([top, bottom], axis=1) / c1


class WapKernel:
    """Quadrature tables for ``log h(s, t)`` under one weight, variance and null.

    Each node carries ``Psi^{-1}`` split into (s, s), (s, t) and (t, t) blocks,
    so that for a fixed simulation bank of S draws the per-``t`` cost is one
    matrix product and one log-sum-exp.
    """

    def __init__(self, spec: WeightSpec, sigma, beta0: float, nodes: int | None = None):
        self.spec = spec
        self.sigma = np.asarray(sigma, dtype=float)
        self.beta0 = float(beta0)
        self.k = k = self.sigma.shape[0] // 2
        if spec.kron.k != k:
            raise DomainError("weight factors do not match the dimension of sigma")
        self.nodes = int(nodes or spec.nodes)
        phi = spec.kron.phi
        self.C = C = model.c_beta0(beta0, self.sigma)
        self.D0, self.slope = model.d_beta(beta0, beta0, self.sigma, with_slope=True)
        if spec.variant == MM1:
            if spec.rule == "trapezoid":
                x = np.linspace(-spec.bound, spec.bound, self.nodes)
                logw = -0.5 * x * x
                logw -= stable_log_integral(logw)
            else:
                x, w = hermite_rule(self.nodes)
                keep = w > 0
                x, logw = x[keep], np.log(w[keep])
            deltas = spec.beta_sd * x
            U = _u_matrices(spec, C, self.D0, self.slope, beta0, deltas)
            self.node_beta = beta0 + deltas
            u0 = self.D0
        else:
            half = self.nodes // 2
            th = -np.pi + 2.0 * np.pi * np.arange(half) / self.nodes
            U = _u_matrices(spec, C, self.D0, self.slope, beta0, th)
            self.node_theta = th
            self.node_beta = np.array([beta_of_theta(a, beta0, spec.kron.omega)[0] for a in th])
            logw = np.full(half, -np.log(half))
            u0 = self.D0 / _omega_parts(beta0, spec.kron.omega)[1]
        t0_scale = spec.tuning
        psi = np.eye(2 * k)[None] + spec.tuning * np.einsum("nij,jl,nml->nim", U, phi, U)
        psi = 0.5 * (psi + np.transpose(psi, (0, 2, 1)))
        sign, logdet = np.linalg.slogdet(psi)
        pinv = np.linalg.inv(psi)
        self.A = pinv[:, :k, :k]
        self.B = pinv[:, :k, k:]
        self.Ct = pinv[:, k:, k:]
        self.const = logw - 0.5 * logdet - k * LOG2PI
        self.logw = logw
        self.psi_tt = psi[:, k:, k:]
        self.cov_t0 = np.eye(k) + t0_scale * u0 @ phi @ u0.T
        self._bank = None
        self._bank_sas = None

    # -- evaluation -------------------------------------------------------

    def log_h(self, s, t) -> np.ndarray | float:
        """``log h(s, t)``; ``s`` may be (J, k) with a single ``t``."""
        s = np.asarray(s, dtype=float)
        single = s.ndim == 1
        S = np.atleast_2d(s)
        t = np.asarray(t, dtype=float)
        sas = np.einsum("ja,nab,jb->jn", S, self.A, S)
        out = self._finish(S, sas, t)
        return float(out[0]) if single else out

    def _finish(self, S, sas, t):
        bt = np.einsum("nab,b->an", self.B, t)
        tct = np.einsum("a,nab,b->n", t, self.Ct, t)
        quad = sas + 2.0 * (S @ bt) + tct[None, :]
        return stable_log_integral(self.const[None, :] - 0.5 * quad, axis=1)

    def log_h_pairs(self, S, T) -> np.ndarray:
        """``log h`` at paired rows of ``S`` and ``T`` (both R x k)."""
        S = np.atleast_2d(S)
        T = np.atleast_2d(T)
        quad = (np.einsum("ra,nab,rb->rn", S, self.A, S)
                + 2.0 * np.einsum("ra,nab,rb->rn", S, self.B, T)
                + np.einsum("ra,nab,rb->rn", T, self.Ct, T))
        return stable_log_integral(self.const[None, :] - 0.5 * quad, axis=1)

    def log_h_node_terms(self, s, t) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        t = np.asarray(t, dtype=float)
        quad = (np.einsum("a,nab,b->n", s, self.A, s) + 2.0 * np.einsum("a,nab,b->n", s, self.B, t)
                + np.einsum("a,nab,b->n", t, self.Ct, t))
        return self.const - 0.5 * quad

    def log_hT0(self, t) -> np.ndarray | float:
        """Log of the null-weighted density of T (prior on mu at beta0)."""
        out = _normal_logpdf_t(t, self.cov_t0)
        return float(out[0]) if np.ndim(t) == 1 else out

    def log_hT(self, t) -> float:
        """Log of the full weighted marginal density of T."""
        t = np.asarray(t, dtype=float)
        terms = [w + float(_normal_logpdf_t(t, cov)[0])
                 for w, cov in zip(self.logw, self.psi_tt)]
        return stable_log_integral(np.array(terms))

    @staticmethod
    def log_fs(s) -> np.ndarray | float:
        s = np.asarray(s, dtype=float)
        k = s.shape[-1]
        return -0.5 * (k * LOG2PI + np.sum(s * s, axis=-1))

    def log_norm_t(self, t) -> np.ndarray | float:
        """``log[(1 + ||t||)^{-1} h^T_{beta0}(t)]``, the t-only standardisation."""
        t = np.asarray(t, dtype=float)
        return self.log_hT0(t) - np.log1p(np.linalg.norm(t, axis=-1))

    def log_wap(self, s, t):
        """Log of the WAP statistic ``h / [f^S (1+||t||)^{-1} h^T_{beta0}]``."""
        return self.log_h(s, t) - self.log_fs(s) - self.log_norm_t(t)

    def log_wap_pairs(self, S, T) -> np.ndarray:
        return self.log_h_pairs(S, T) - self.log_fs(S) - self.log_norm_t(T)

    # -- bank cache -------------------------------------------------------

    def attach_bank(self, draws: np.ndarray) -> None:
        """Cache the (s, s) quadratic forms of a simulation bank."""
        self._bank = np.asarray(draws, dtype=float)
        self._bank_sas = np.einsum("ja,nab,jb->jn", self._bank, self.A, self._bank)
        self._bank_logfs = self.log_fs(self._bank)

    def log_wap_bank(self, t) -> np.ndarray:
        if self._bank is None:
            raise RuntimeError("no bank attached")
        t = np.asarray(t, dtype=float)
        lh = self._finish(self._bank, self._bank_sas, t)
        return lh - self._bank_logfs - self.log_norm_t(t)


def calibrate_nodes(spec: WeightSpec, sigma, beta0: float, S, T, tol: float = 1e-4,
                    max_nodes: int = 2048) -> WeightSpec:
    """Double the node count until ``log h`` moves by less than ``tol`` at sample points.

    ``S`` and ``T`` are (R, k) arrays representative of the statistics the
    kernel will see, e.g. draws at the extremes of a power grid.
    """
    nodes = spec.nodes
    prev = WapKernel(spec, sigma, beta0, nodes).log_h_pairs(S, T)
    while nodes < max_nodes:
        nxt = 2 * nodes - 1 if spec.variant == MM1 and spec.rule == "trapezoid" else 2 * nodes
        cur = WapKernel(spec, sigma, beta0, nxt).log_h_pairs(S, T)
        change = float(np.max(np.abs(cur - prev)))
        if change < tol:
            return spec.with_nodes(nodes)
        nodes, prev = nxt, cur
    return spec.with_nodes(nodes)


def _quad_value(spec: WeightSpec, st, nodes):
    kern = WapKernel(spec, st.sigma, st.beta0, nodes)
    terms = kern.log_h_node_terms(st.s, st.t)
    return stable_log_integral(terms), kern, terms


def _adaptive_log_density(st, spec: WeightSpec) -> tuple[float, float]:
    """Adaptive fallback for sharply peaked integrands.

    MM1 integrates over ``u`` with ``beta = beta0 + beta_sd tan(u)``; MM2 over
    one period of ``theta``. Returns ``(log h, argmax beta)``.
    """
    k = st.k
    x = np.concatenate([st.s, st.t])
    C = st.c_mat
    D0, slope = model.d_beta(st.beta0, st.beta0, st.sigma, with_slope=True)
    phi = spec.kron.phi

    def log_terms(us):
        us = np.atleast_1d(us)
        if spec.variant == MM1:
            tu = np.tan(us)
            params = spec.beta_sd * tu
            lp = -0.5 * (LOG2PI + tu * tu) + np.log1p(tu * tu)
        else:
            params = us
            lp = np.full(us.shape, -np.log(np.pi))
        U = _u_matrices(spec, C, D0, slope, st.beta0, params)
        psi = np.eye(2 * k)[None] + spec.tuning * np.einsum("nij,jl,nml->nim", U, phi, U)
        _, ld = np.linalg.slogdet(psi)
        q = np.einsum("i,ni->n", x, np.linalg.solve(psi, np.broadcast_to(x, (us.size, 2 * k))[..., None])[..., 0])
        return lp - 0.5 * (ld + q + 2 * k * LOG2PI)

    grid = np.linspace(-np.pi / 2, np.pi / 2, 4003)[1:-1]
    vals = log_terms(grid)
    i = int(np.argmax(vals))
    shift, peak = vals[i], grid[i]
    val, _ = integrate.quad(lambda u: float(np.exp(log_terms(u)[0] - shift)), -np.pi / 2,
                            np.pi / 2, points=[peak], limit=500, epsabs=0.0, epsrel=1e-9)
    if spec.variant == MM1:
        arg = st.beta0 + spec.beta_sd * np.tan(peak)
    else:
        arg = beta_of_theta(peak, st.beta0, spec.kron.omega)[0]
    return float(shift + np.log(val)), float(arg)


def _density(st, spec: WeightSpec, variant: str) -> WapValue:
    if spec.variant != variant:
        raise DomainError(f"expected an {variant} weight, got {spec.variant}")
    if spec.variant == MM1 and spec.beta_sd == 0:
        kern = WapKernel(spec, st.sigma, st.beta0, 15)
        # every node sits at beta0; drop the rule weight of the first one
        val = float(kern.log_h_node_terms(st.s, st.t)[0] - kern.logw[0])
        return WapValue(val, {"nodes": 1, "converged": True, "argmax_beta": st.beta0})
    nodes = spec.nodes
    val, kern, terms = _quad_value(spec, st, nodes)
    converged = False
    for _ in range(MAX_DOUBLINGS):
        nodes *= 2
        new, kern2, terms2 = _quad_value(spec, st, nodes)
        change = abs(new - val)
        val, kern, terms = new, kern2, terms2
        if change < QUAD_RTOL:
            converged = True
            break
    if converged:
        imax = int(np.argmax(terms))
        return WapValue(float(val), {"nodes": nodes, "converged": True,
                                     "argmax_beta": float(kern.node_beta[imax])})
    val, arg = _adaptive_log_density(st, spec)
    return WapValue(val, {"nodes": "adaptive", "converged": True, "argmax_beta": arg,
                          "note": "fixed rule did not settle; used adaptive quadrature"})


def h1_density(st, spec: WeightSpec) -> WapValue:
    """Log MM1 density at ``(st.s, st.t)`` by Gauss-Hermite quadrature in beta."""
    return _density(st, spec, MM1)


def h2_density(st, spec: WeightSpec) -> WapValue:
    """Log MM2 density at ``(st.s, st.t)`` by the periodic trapezoid rule in theta."""
    return _density(st, spec, MM2)


# ---------------------------------------------------------------------------
# WAP statistic


def log_beta_prior(spec: WeightSpec, beta: float, beta0: float) -> float:
    """Log marginal prior density of beta under an MM weight."""
    if spec.variant == MM1:
        return float(-0.5 * (LOG2PI + ((beta - beta0) / spec.beta_sd) ** 2) - np.log(spec.beta_sd))
    c1, d0, _ = _omega_parts(beta0, spec.kron.omega)
    c, d = c_d_beta(beta, beta0, spec.kron.omega)
    return float(np.log(c1 * d0 / (np.pi * (c * c + d * d))))


def log_prior(spec: WeightSpec, beta: float, mu, beta0: float) -> float:
    """Log prior density ``w(beta, mu)`` (mu scale) of an MM weight."""
    phi = spec.kron.phi
    k = phi.shape[0]
    if spec.variant == MM1:
        lb = -0.5 * (LOG2PI + ((beta - beta0) / spec.beta_sd) ** 2) - np.log(spec.beta_sd)
        cov = spec.tuning * phi
    else:
        c1, d0, _ = _omega_parts(beta0, spec.kron.omega)
        c, d = c_d_beta(beta, beta0, spec.kron.omega)
        l2 = c * c + d * d
        lb = np.log(c1 * d0 / (np.pi * l2))
        cov = spec.tuning / l2 * phi
    sign, ld = np.linalg.slogdet(cov)
    mu = np.asarray(mu, dtype=float)
    return float(lb - 0.5 * (k * LOG2PI + ld + mu @ np.linalg.solve(cov, mu)))


def _laplace_log_integrand(beta, rbar, sigma, sigma_inv, log_weight, k):
    a = np.array([beta, 1.0])
    A = np.kron(a.reshape(1, 2), np.eye(k))
    H = A @ sigma_inv @ A.T
    m = np.linalg.solve(H, A @ sigma_inv @ rbar)
    r = rbar - np.kron(a, m)
    nq = 0.5 * float(r @ sigma_inv @ r)
    return -nq + log_weight(beta, m) - 0.5 * np.linalg.slogdet(H)[1]


def wap_statistic(st, weight, mode: str = "exact", nodes: int | None = None,
                  null_log_weight: Callable | None = None) -> WapValue:
    """Log WAP statistic at ``st``.

    ``mode="exact"`` integrates the MM weight by quadrature; ``mode="laplace"``
    uses the concentrated-likelihood approximation with the constrained MLE
    of mu and an adaptive outer integral over beta. In laplace mode ``weight``
    may also be a callable ``log_w(beta, mu)``; the null term then uses
    ``null_log_weight(mu)``, the prior of mu given ``beta0``, falling back to
    ``log_w(beta0, mu)`` when omitted.
    """
    if mode == "exact":
        if not isinstance(weight, WeightSpec):
            raise DomainError("exact mode needs an MM weight specification")
        spec = weight if nodes is None else weight.with_nodes(nodes)
        lh = _density(st, spec, spec.variant)
        kern = WapKernel(spec, st.sigma, st.beta0)
        val = lh.log_value - kern.log_fs(st.s) - kern.log_norm_t(st.t)
        return WapValue(float(val), {**lh.diagnostics, "mode": "exact"})
    if mode != "laplace":
        raise DomainError(f"unknown mode {mode!r}")
    beta0 = st.beta0
    if isinstance(weight, WeightSpec) and weight.variant == MM1 and weight.beta_sd == 0:
        raise DomainError("laplace mode needs a continuous prior on beta")
    if isinstance(weight, WeightSpec):
        log_weight: Callable = lambda b, m: log_prior(weight, b, m, beta0)  # noqa: E731
    else:
        log_weight = weight
    sigma = np.asarray(st.sigma, dtype=float)
    sigma_inv = inv_psd(sigma)
    k = st.k
    rbar = model.reconstruct_rbar(st)
    if isinstance(weight, WeightSpec):
        lb0 = log_beta_prior(weight, beta0, beta0)
        null_w: Callable = lambda b, m: log_weight(b, m) - lb0  # noqa: E731
    elif null_log_weight is not None:
        null_w = lambda b, m: null_log_weight(m)  # noqa: E731
    else:
        null_w = log_weight
    den = _laplace_log_integrand(beta0, rbar, sigma, sigma_inv, null_w, k)
    if not np.isfinite(den):
        raise DomainError("weight vanishes at the null constrained MLE")

    def g(phi):
        tp = np.tan(phi)
        return _laplace_log_integrand(beta0 + tp, rbar, sigma, sigma_inv, log_weight, k) \
            + np.log1p(tp * tp)

    grid = np.linspace(-np.pi / 2, np.pi / 2, 803)[1:-1]
    vals = np.array([g(p) for p in grid])
    shift = np.max(vals)
    pmax = grid[int(np.argmax(vals))]
    val, err = integrate.quad(lambda p: np.exp(g(p) - shift), -np.pi / 2, np.pi / 2,
                              points=[pmax], limit=400, epsabs=0.0, epsrel=1e-9)
    out = shift + np.log(val) - den + np.log1p(np.linalg.norm(st.t))
    return WapValue(float(out), {"mode": "laplace", "argmax_beta": float(beta0 + np.tan(pmax)),
                                 "quad_error": float(err)})
