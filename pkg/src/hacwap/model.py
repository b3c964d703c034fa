"""Data model for the linear IV model with one endogenous regressor.

Maps raw data to the reduced-form moment vector ``rbar = vec[(Z'Z)^{-1/2} Z'Y]``
and its variance, and from there to the pivotal/sufficient pair ``(S, T)``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import DomainError, clip_psd, as_symmetric, inv_psd, inv_sqrt_psd, sqrt_psd

DEFAULT_LAGS = 3


class DataError(ValueError):
    """Malformed or unusable input data."""


@dataclass
class IVData:
    y1: np.ndarray
    y2: np.ndarray
    Z: np.ndarray

    def __post_init__(self):
        self.y1 = np.asarray(self.y1, dtype=float).reshape(-1)
        self.y2 = np.asarray(self.y2, dtype=float).reshape(-1)
        Z = np.asarray(self.Z, dtype=float)
        self.Z = Z.reshape(-1, 1) if Z.ndim == 1 else Z
        n, k = self.Z.shape
        if self.y1.size != n or self.y2.size != n:
            raise DataError("y1, y2 and Z must have the same number of rows")
        if k < 1 or n <= k:
            raise DataError(f"need n > k >= 1, got n={n}, k={k}")
        sv = np.linalg.svd(self.Z, compute_uv=False)
        if sv[-1] <= 1e-10 * sv[0]:
            raise DataError("instrument matrix Z is rank deficient")

    @property
    def n(self) -> int:
        return self.Z.shape[0]

    @property
    def k(self) -> int:
        return self.Z.shape[1]

    @property
    def Y(self) -> np.ndarray:
        return np.column_stack([self.y1, self.y2])


@dataclass
class ReducedForm:
    """Sufficient summary ``rbar`` with variance ``sigma`` (both of size 2k).

    ``n`` is 0 and ``dz`` is None when the reduced form is built abstractly.
    """

    rbar: np.ndarray
    sigma: np.ndarray
    n: int = 0
    dz: np.ndarray | None = None
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        self.rbar = np.asarray(self.rbar, dtype=float).reshape(-1)
        self.sigma = as_symmetric(self.sigma, "sigma")
        if self.rbar.size % 2 or self.sigma.shape[0] != self.rbar.size:
            raise DomainError("rbar must have even length 2k matching sigma")

    @property
    def k(self) -> int:
        return self.rbar.size // 2


@dataclass
class STPair:
    s: np.ndarray
    t: np.ndarray
    beta0: float
    c_mat: np.ndarray
    sigma: np.ndarray

    @property
    def k(self) -> int:
        return self.s.size


def _b0(beta0):
    return np.array([1.0, -beta0])


def _a0(beta0):
    return np.array([beta0, 1.0])


def _kron_rows(v, k):
    """``v' (x) I_k`` as a k x 2k matrix."""
    return np.kron(np.asarray(v, dtype=float).reshape(1, 2), np.eye(k))


def c_beta0(beta0: float, sigma) -> np.ndarray:
    """``C_{beta0} = [(b0' (x) I) sigma (b0 (x) I)]^{-1/2}``."""
    sigma = np.asarray(sigma, dtype=float)
    k = sigma.shape[0] // 2
    B = _kron_rows(_b0(beta0), k)
    return inv_sqrt_psd(B @ sigma @ B.T)


def _t_map(beta0, sigma_inv, k):
    A = _kron_rows(_a0(beta0), k)
    m = A @ sigma_inv @ A.T
    return inv_sqrt_psd(m) @ A @ sigma_inv


def d_beta(beta: float, beta0: float, sigma, with_slope: bool = False):
    """``D_beta`` of the T-mean ``D_beta mu``; optionally also ``lim D_beta / beta``.

    ``D_beta`` is affine in ``beta``; the slope is the limiting direction used
    at ``beta = +-inf``.
    """
    sigma = np.asarray(sigma, dtype=float)
    k = sigma.shape[0] // 2
    M = _t_map(beta0, inv_psd(sigma), k)
    e1 = np.kron(np.array([[1.0], [0.0]]), np.eye(k))
    e2 = np.kron(np.array([[0.0], [1.0]]), np.eye(k))
    slope = M @ e1
    if np.isinf(beta):
        d = np.sign(beta) * slope
    else:
        d = beta * slope + M @ e2
    return (d, slope) if with_slope else d


def compute_st(rf: ReducedForm, beta0: float) -> STPair:
    k = rf.k
    B = _kron_rows(_b0(beta0), k)
    C = inv_sqrt_psd(B @ rf.sigma @ B.T)
    s = C @ (B @ rf.rbar)
    t = _t_map(beta0, inv_psd(rf.sigma), k) @ rf.rbar
    return STPair(s=s, t=t, beta0=float(beta0), c_mat=C, sigma=rf.sigma)


def st_transform(beta0: float, sigma) -> np.ndarray:
    """The 2k x 2k matrix mapping ``rbar`` to the stacked ``(S, T)``."""
    sigma = np.asarray(sigma, dtype=float)
    k = sigma.shape[0] // 2
    B = _kron_rows(_b0(beta0), k)
    top = inv_sqrt_psd(B @ sigma @ B.T) @ B
    return np.vstack([top, _t_map(beta0, inv_psd(sigma), k)])


def reconstruct_rbar(st: STPair) -> np.ndarray:
    """Invert the (S, T) map back to ``rbar``."""
    L = st_transform(st.beta0, st.sigma)
    return np.linalg.solve(L, np.concatenate([st.s, st.t]))


def ols_residuals(data: IVData) -> np.ndarray:
    coef, *_ = np.linalg.lstsq(data.Z, data.Y, rcond=None)
    return data.Y - data.Z @ coef


def residual_panel(data: IVData, resid: np.ndarray | None = None) -> np.ndarray:
    """Rows ``v_i (x) z_i`` (n x 2k) from reduced-form residuals."""
    v = ols_residuals(data) if resid is None else np.asarray(resid, dtype=float)
    return np.hstack([v[:, [0]] * data.Z, v[:, [1]] * data.Z])


def _newey_west(panel: np.ndarray, lags: int) -> tuple[np.ndarray, bool, float]:
    panel = np.asarray(panel, dtype=float)
    n = panel.shape[0]
    if lags < 0:
        raise DomainError("lags must be nonnegative")
    if n <= lags:
        raise DataError(f"need more observations ({n}) than lags ({lags})")
    if not np.any(panel):
        raise DegenerateVarianceError("all-zero residual panel")
    out = panel.T @ panel / n
    for j in range(1, lags + 1):
        g = panel[j:].T @ panel[:-j] / n
        out += (1.0 - j / (lags + 1.0)) * (g + g.T)
    out = 0.5 * (out + out.T)
    eig = np.linalg.eigvalsh(out)
    ratio = float(eig[0] / eig[-1]) if eig[-1] > 0 else -np.inf
    return (*clip_psd(out, 1e-8), ratio)


class DegenerateVarianceError(DataError):
    pass


def hac_newey_west(panel, lags: int = DEFAULT_LAGS) -> np.ndarray:
    """Newey-West long-run variance with Bartlett weights ``1 - j/(lags+1)``.

    Eigenvalues below ``1e-8`` times the largest are clipped.
    """
    return _newey_west(panel, lags)[0]


def reduced_form(data: IVData, sigma=None, lags: int = DEFAULT_LAGS) -> ReducedForm:
    """Reduced form of ``data``.

    With ``sigma=None`` the variance of ``rbar`` is estimated by Newey-West on
    the OLS reduced-form residuals and rescaled as
    ``(I2 (x) (Z'Z)^{-1/2}) n Sigma_hat (I2 (x) (Z'Z)^{-1/2})``.
    """
    Z = data.Z
    n, k = Z.shape
    zz = Z.T @ Z
    zz_isqrt = inv_sqrt_psd(zz)
    rbar = (zz_isqrt @ Z.T @ data.Y).reshape(-1, order="F")
    diag: dict = {}
    if sigma is None:
        if n <= k + lags:
            raise DataError(f"need n > k + lags, got n={n}, k={k}, lags={lags}")
        lrv, repaired, ratio = _newey_west(residual_panel(data), lags)
        W = np.kron(np.eye(2), zz_isqrt)
        sigma = W @ (n * lrv) @ W
        diag = {"lags": lags, "pd_repaired": bool(repaired), "raw_eigenvalue_ratio": ratio}
    return ReducedForm(rbar=rbar, sigma=sigma, n=n, dz=zz / n, diagnostics=diag)


def simulate_st(beta, mu, sigma, beta0, rng, size=None):
    """Draw ``S ~ N((beta-beta0) C mu, I)`` and ``T ~ N(D_beta mu, I)``.

    Returns an ``STPair`` for ``size=None``; otherwise arrays of shape
    ``(size, k)`` for S and T.
    """
    sigma = np.asarray(sigma, dtype=float)
    mu = np.asarray(mu, dtype=float).reshape(-1)
    k = mu.size
    C = c_beta0(beta0, sigma)
    ms = (beta - beta0) * (C @ mu)
    mt = d_beta(beta, beta0, sigma) @ mu
    if size is None:
        z = rng.standard_normal(2 * k)
        return STPair(s=ms + z[:k], t=mt + z[k:], beta0=float(beta0), c_mat=C, sigma=sigma)
    z = rng.standard_normal((size, 2 * k))
    return ms + z[:, :k], mt + z[:, k:]


def mu_hat(beta: float, rbar, sigma) -> np.ndarray:
    """Constrained MLE of ``mu = (Z'Z)^{1/2} pi`` at ``beta``."""
    sigma_inv = inv_psd(sigma)
    k = sigma.shape[0] // 2
    A = _kron_rows(np.array([beta, 1.0]), k)
    H = A @ sigma_inv @ A.T
    return np.linalg.solve(H, A @ sigma_inv @ np.asarray(rbar, dtype=float))


def constrained_mle_pi(beta: float, rf: ReducedForm) -> np.ndarray:
    """Constrained MLE of ``pi`` at ``beta``.

    Falls back to the ``mu``-scale estimate when ``rf`` carries no ``n``/``dz``.
    """
    m = mu_hat(beta, rf.rbar, rf.sigma)
    if rf.dz is None or rf.n == 0:
        return m
    return inv_sqrt_psd(rf.n * rf.dz) @ m


def concentrated_objective(beta: float, mu, rbar, sigma) -> float:
    """``n Q_n = 0.5 ||sigma^{-1/2}(rbar - a (x) mu)||^2`` in ``mu`` scale."""
    a = np.array([beta, 1.0])
    r = np.asarray(rbar, dtype=float) - np.kron(a, mu)
    return 0.5 * float(r @ np.linalg.solve(sigma, r))


def read_csv(path) -> IVData:
    """Read ``y1, y2, z1..zk`` columns; reject non-numeric rows by line number."""
    path = Path(path)
    try:
        fh = path.open(newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        zcols = sorted(
            (h for h in header if h.startswith("z") and h[1:].isdigit()), key=lambda h: int(h[1:])
        )
        missing = [c for c in ("y1", "y2") if c not in header]
        if missing or not zcols:
            raise DataError(f"{path}: missing column(s) {missing or ['z1']}")
        if [int(h[1:]) for h in zcols] != list(range(1, len(zcols) + 1)):
            raise DataError(f"{path}: instrument columns must be z1..zk")
        idx = [header.index(c) for c in ("y1", "y2", *zcols)]
        rows = []
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                rows.append([float(row[i]) for i in idx])
            except (ValueError, IndexError):
                raise DataError(f"{path}: non-numeric or missing field on line {line_no}") from None
    if not rows:
        raise DataError(f"{path}: no data rows")
    arr = np.array(rows)
    if not np.all(np.isfinite(arr)):
        bad = int(np.where(~np.isfinite(arr).all(axis=1))[0][0]) + 2
        raise DataError(f"{path}: non-finite value on line {bad}")
    return IVData(arr[:, 0], arr[:, 1], arr[:, 2:])


def write_csv(data: IVData, path) -> None:
    k = data.k
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["y1", "y2", *[f"z{i + 1}" for i in range(k)]])
        for i in range(data.n):
            w.writerow([repr(float(data.y1[i])), repr(float(data.y2[i]))]
                       + [repr(float(v)) for v in data.Z[i]])


def simulate_iv_data(n, beta, pi, omega, rng, hetero: float = 0.0, ar: float = 0.0) -> IVData:
    """Simulate ``Y = Z pi a' + V`` with Gaussian instruments.

    ``hetero`` scales the errors by ``exp(hetero * z_i1 / 2)``; ``ar`` adds
    AR(1) dependence to the error rows.
    """
    pi = np.asarray(pi, dtype=float).reshape(-1)
    k = pi.size
    Z = rng.standard_normal((n, k))
    L = np.linalg.cholesky(np.asarray(omega, dtype=float))
    e = rng.standard_normal((n, 2)) @ L.T
    if ar:
        for i in range(1, n):
            e[i] = ar * e[i - 1] + np.sqrt(1.0 - ar * ar) * e[i]
    if hetero:
        e *= np.exp(0.5 * hetero * Z[:, [0]])
    a = np.array([beta, 1.0])
    Y = np.outer(Z @ pi, a) + e
    return IVData(Y[:, 0], Y[:, 1], Z)
