"""Shared numerical kernels.

Small dense linear algebra for symmetric positive definite matrices, the
nearest Kronecker product approximation, chi-square distribution helpers,
Haar orthogonal draws, log-domain accumulation and reproducible RNG streams.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special

SYM_RTOL = 1e-12


class DomainError(ValueError):
    """Raised when an input lies outside an operation's mathematical domain."""


class DegeneracyError(DomainError):
    """Raised when a factorisation cannot produce positive definite factors."""


def as_symmetric(m, name: str = "matrix") -> np.ndarray:
    a = np.atleast_2d(np.asarray(m, dtype=float))
    if a.shape[0] != a.shape[1]:
        raise DomainError(f"{name} must be square, got shape {a.shape}")
    scale = max(np.max(np.abs(a)), 1.0)
    if np.max(np.abs(a - a.T)) > SYM_RTOL * scale * 10:
        raise DomainError(f"{name} is not symmetric")
    return 0.5 * (a + a.T)


def _eigh_pd(m, name: str):
    a = as_symmetric(m, name)
    w, v = np.linalg.eigh(a)
    tol = 1e-14 * max(abs(w[-1]), 1.0)
    if w[0] <= tol:
        raise DomainError(f"{name} is not positive definite (smallest eigenvalue {w[0]:.3e})")
    return w, v


def sqrt_psd(m) -> np.ndarray:
    """Symmetric positive definite square root of ``m``.

    Raises
    ------
    DomainError
        If ``m`` is not symmetric or has an eigenvalue at or below tolerance.
    """
    w, v = _eigh_pd(m, "matrix")
    r = (v * np.sqrt(w)) @ v.T
    return 0.5 * (r + r.T)


def inv_sqrt_psd(m) -> np.ndarray:
    w, v = _eigh_pd(m, "matrix")
    r = (v / np.sqrt(w)) @ v.T
    return 0.5 * (r + r.T)


def inv_psd(m) -> np.ndarray:
    w, v = _eigh_pd(m, "matrix")
    r = (v / w) @ v.T
    return 0.5 * (r + r.T)


def logdet_psd(m) -> float:
    c = np.linalg.cholesky(as_symmetric(m))
    return 2.0 * float(np.sum(np.log(np.diag(c))))


def clip_psd(m, rel_floor: float) -> tuple[np.ndarray, bool]:
    """Clip eigenvalues below ``rel_floor * max eigenvalue``; report if clipped."""
    a = as_symmetric(m)
    w, v = np.linalg.eigh(a)
    floor = rel_floor * max(w[-1], 0.0)
    if w[-1] <= 0:
        raise DegeneracyError("matrix has no positive eigenvalue")
    if w[0] >= floor:
        return a, False
    w = np.maximum(w, floor)
    r = (v * w) @ v.T
    return 0.5 * (r + r.T), True


@dataclass(frozen=True)
class KroneckerFactors:
    """Factors of the Frobenius-nearest ``omega (x) phi`` to a 2k x 2k matrix."""

    omega: np.ndarray
    phi: np.ndarray
    residual_norm: float

    @property
    def k(self) -> int:
        return self.phi.shape[0]

    def normalized(self) -> "KroneckerFactors":
        """Rescale so that ``trace(phi) == k`` (the product is unchanged)."""
        c = np.trace(self.phi) / self.k
        return KroneckerFactors(self.omega * c, self.phi / c, self.residual_norm)

    def product(self) -> np.ndarray:
        return np.kron(self.omega, self.phi)


def rearrange(sigma: np.ndarray, k: int) -> np.ndarray:
    """Van Loan-Pitsianis rearrangement of a 2k x 2k matrix into 4 x k^2.

    Row ``i + 2 j`` holds ``vec`` of block ``(i, j)``, so that
    ``||sigma - omega (x) phi||_F == ||R - vec(omega) vec(phi)'||_F``.
    """
    rows = []
    for j in range(2):
        for i in range(2):
            block = sigma[i * k:(i + 1) * k, j * k:(j + 1) * k]
            rows.append(block.reshape(-1, order="F"))
    return np.array(rows)


def _pd_factor(vec: np.ndarray, dim: int, name: str) -> np.ndarray:
    f = vec.reshape(dim, dim, order="F")
    f = 0.5 * (f + f.T)
    if np.trace(f) < 0:
        f = -f
    w, v = np.linalg.eigh(f)
    top = w[-1]
    if top <= 0 or w[0] < -1e-8 * top:
        raise DegeneracyError(
            f"nearest Kronecker factor {name} is not positive definite "
            f"(eigenvalues {w[0]:.3e}, {top:.3e})"
        )
    w = np.maximum(w, 1e-10 * top)
    out = (v * w) @ v.T
    return 0.5 * (out + out.T)


def nearest_kronecker(sigma, k: int) -> KroneckerFactors:
    """Frobenius-nearest ``omega (x) phi`` with 2x2 ``omega`` and k x k ``phi``.

    Factors come from the dominant singular pair of the rearranged matrix, are
    symmetrised, projected to be positive definite and normalised so that
    ``trace(phi) == k``.
    """
    s = as_symmetric(sigma, "sigma")
    if s.shape[0] != 2 * k:
        raise DomainError(f"sigma has dimension {s.shape[0]}, expected {2 * k}")
    r = rearrange(s, k)
    u, sv, vt = np.linalg.svd(r, full_matrices=False)
    root = np.sqrt(sv[0])
    omega = _pd_factor(root * u[:, 0], 2, "omega")
    phi = _pd_factor(root * vt[0], k, "phi")
    c = np.trace(phi) / k
    omega, phi = omega * c, phi / c
    resid = float(np.linalg.norm(s - np.kron(omega, phi)))
    return KroneckerFactors(omega, phi, resid)


def chisq_cdf(x, df):
    x = np.asarray(x, dtype=float)
    return special.gammainc(0.5 * np.asarray(df, dtype=float), 0.5 * np.maximum(x, 0.0))


def chisq_sf(x, df):
    x = np.asarray(x, dtype=float)
    return special.gammaincc(0.5 * np.asarray(df, dtype=float), 0.5 * np.maximum(x, 0.0))


def chisq_quantile(alpha: float, df: int) -> float:
    """Upper ``alpha`` quantile of the central chi-square with ``df`` degrees of freedom."""
    if not 0.0 < alpha < 1.0:
        raise DomainError(f"alpha must lie in (0, 1), got {alpha}")
    return float(2.0 * special.gammainccinv(0.5 * df, alpha))


def _ncx2_cdf_scalar(x: float, df: int, nc: float, tol: float) -> float:
    if x <= 0.0:
        return 0.0
    half = 0.5 * nc
    if half == 0.0:
        return float(special.gammainc(0.5 * df, 0.5 * x))
    mode = int(np.floor(half))
    width = int(np.ceil(12.0 * np.sqrt(half + 1.0))) + 30
    while True:
        lo = max(mode - width, 0)
        j = np.arange(lo, mode + width + 1)
        logw = -half + j * np.log(half) - special.gammaln(j + 1.0)
        terms = np.exp(logw) * special.gammainc(0.5 * df + j, 0.5 * x)
        edge_lo = np.exp(logw[0]) if lo > 0 else 0.0
        if edge_lo < tol and np.exp(logw[-1]) < tol:
            break
        width *= 2
    # sum from the smallest terms upwards
    return float(min(np.sum(np.sort(terms)), 1.0))


def noncentral_chisq_cdf(x, df: int, nc: float, tol: float = 1e-14):
    """CDF of the noncentral chi-square as a Poisson mixture of central CDFs.

    The series is expanded on both sides of the Poisson mode and truncated
    once the mixing weights fall below ``tol``. Accepts scalar or array ``x``.
    """
    if nc < 0:
        raise DomainError("noncentrality must be nonnegative")
    xs = np.asarray(x, dtype=float)
    if xs.ndim == 0:
        return _ncx2_cdf_scalar(float(xs), df, float(nc), tol)
    return np.array([_ncx2_cdf_scalar(float(v), df, float(nc), tol) for v in xs.ravel()]).reshape(
        xs.shape
    )


def normal_cdf(x):
    return special.ndtr(x)


def random_orthogonal(k: int, rng: np.random.Generator) -> np.ndarray:
    """Haar-distributed k x k orthogonal matrix (QR with sign-fixed diagonal)."""
    g = rng.standard_normal((k, k))
    q, r = np.linalg.qr(g)
    return q * np.sign(np.diag(r))


def stable_log_integral(log_values, weights=None, axis=None) -> np.ndarray | float:
    """``log(sum_i w_i exp(v_i))`` with a max shift; positive weights only."""
    v = np.asarray(log_values, dtype=float)
    if v.size == 0:
        raise DomainError("cannot integrate an empty sequence")
    if weights is None:
        w = np.ones_like(v)
    else:
        w = np.broadcast_to(np.asarray(weights, dtype=float), v.shape)
        if np.any(w <= 0):
            raise DomainError("quadrature weights must be positive")
    m = np.max(v, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    out = np.log(np.sum(w * np.exp(v - m), axis=axis, keepdims=True)) + m
    if axis is None:
        return float(out.reshape(()))
    return np.squeeze(out, axis=axis)


def rng_stream(seed: int, *keys: int) -> np.random.Generator:
    """Counter-based generator keyed by ``(seed, *keys)``.

    Streams with distinct keys are statistically independent and do not
    depend on the order in which they are created, so simulations reproduce
    exactly under any parallel schedule.
    """
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, *[int(k) for k in keys]])
    return np.random.Generator(np.random.Philox(ss))


def hermite_rule(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Hermite nodes/weights for ``E[f(Z)]`` with ``Z ~ N(0, 1)``."""
    x, w = special.roots_hermitenorm(n)
    return x, w / w.sum()
