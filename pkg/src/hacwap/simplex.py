"""Bounded-variable revised simplex for few-row, many-column LPs.

Solves ``max c'x  s.t.  A x = b,  0 <= x <= u`` where ``A`` has a handful of
rows and possibly tens of thousands of columns. The basis is tiny, so each
iteration refactorises it directly and prices all columns with one product.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class SolverError(RuntimeError):
    """Raised when the LP is infeasible or the simplex fails to terminate."""


@dataclass
class BasisState:
    """Final basis of a solve; reusable as a warm start when only ``c`` changes."""

    basic: np.ndarray
    at_upper: np.ndarray


@dataclass
class LPResult:
    x: np.ndarray
    objective: float
    duals: np.ndarray
    iterations: int
    status: str
    basis: BasisState = field(repr=False)


FEAS_TOL = 1e-9
OPT_TOL = 1e-11
BLAND_AFTER = 50
REFRESH_EVERY = 25


class _Simplex:
    def __init__(self, A, b, upper, max_iter):
        self.m, self.n = A.shape
        self.max_iter = max_iter
        # artificial columns (signed unit vectors) occupy indices n .. n+m-1
        self.A = np.hstack([A, np.eye(self.m)])
        self.b = b
        self.upper = np.concatenate([upper, np.full(self.m, np.inf)])
        self.x = np.zeros(self.n + self.m)
        self.basic = np.arange(self.n, self.n + self.m)
        self.is_basic = np.zeros(self.n + self.m, dtype=bool)
        self.iterations = 0
        self.used_bland = False

    def set_basis(self, basic, at_upper):
        self.is_basic[:] = False
        self.is_basic[basic] = True
        self.basic = np.asarray(basic, dtype=int).copy()
        self.x[:] = 0.0
        self.x[at_upper] = self.upper[at_upper]
        self.refresh()

    def refresh(self):
        B = self.A[:, self.basic]
        nb = ~self.is_basic
        rhs = self.b - self.A[:, nb] @ self.x[nb]
        self.x[self.basic] = np.linalg.solve(B, rhs)

    def run(self, c):
        """Iterate to optimality for objective ``c`` (maximisation)."""
        scale = max(np.max(np.abs(c)), 1e-300)
        cs = c / scale
        stall = 0
        best = -np.inf
        bland = False
        while True:
            if self.iterations >= self.max_iter:
                raise SolverError(f"simplex hit the iteration limit ({self.max_iter})")
            B = self.A[:, self.basic]
            y = np.linalg.solve(B.T, cs[self.basic])
            d = cs - self.A.T @ y
            d[self.is_basic] = 0.0
            at_up = (self.x >= self.upper - FEAS_TOL) & ~self.is_basic
            can_inc = (d > OPT_TOL) & ~at_up & ~self.is_basic & (self.upper > 0)
            can_dec = (d < -OPT_TOL) & at_up & (self.upper > 0)
            elig = can_inc | can_dec
            if not elig.any():
                return y * scale
            if bland:
                q = int(np.flatnonzero(elig)[0])
            else:
                score = np.where(elig, np.abs(d), -1.0)
                q = int(np.argmax(score))
            direction = 1.0 if can_inc[q] else -1.0
            w = np.linalg.solve(B, self.A[:, q])
            # x_B moves by -direction * theta * w
            delta = -direction * w
            xb = self.x[self.basic]
            ub = self.upper[self.basic]
            with np.errstate(divide="ignore", invalid="ignore"):
                t_low = np.where(delta < -1e-12, (xb - 0.0) / -delta, np.inf)
                t_up = np.where(delta > 1e-12, (ub - xb) / delta, np.inf)
            ratios = np.maximum(np.minimum(t_low, t_up), 0.0)
            theta_flip = self.upper[q]
            r = int(np.argmin(ratios)) if ratios.size else -1
            theta_b = ratios[r] if r >= 0 else np.inf
            if bland and np.isfinite(theta_b):
                ties = np.flatnonzero(ratios <= theta_b + 1e-12)
                r = int(ties[np.argmin(self.basic[ties])])
            if not np.isfinite(min(theta_b, theta_flip)):
                raise SolverError("LP is unbounded")
            self.iterations += 1
            if theta_flip <= theta_b:
                self.x[q] += direction * theta_flip
                self.x[self.basic] = xb + theta_flip * delta
            else:
                theta = theta_b
                self.x[q] += direction * theta
                self.x[self.basic] = xb + theta * delta
                leave = self.basic[r]
                self.x[leave] = 0.0 if t_low[r] <= t_up[r] else self.upper[leave]
                self.is_basic[leave] = False
                self.is_basic[q] = True
                self.basic[r] = q
            if self.iterations % REFRESH_EVERY == 0:
                self.refresh()
            obj = float(cs @ self.x)
            if obj > best + 1e-13:
                best, stall = obj, 0
            else:
                stall += 1
                if stall >= BLAND_AFTER and not bland:
                    bland = self.used_bland = True


def solve_bounded_lp(c, A, b, upper=None, start_upper=None, warm: BasisState | None = None,
                     max_iter: int = 20000) -> LPResult:
    """Maximise ``c'x`` subject to ``A x = b`` and ``0 <= x <= upper``.

    Parameters
    ----------
    c, A, b : array_like
        Objective (n,), constraint matrix (m, n) and right-hand side (m,).
    upper : array_like, optional
        Upper bounds (default 1 for every column).
    start_upper : array_like of int, optional
        Columns placed at their upper bound in the phase-one starting point.
    warm : BasisState, optional
        A basis known to be primal feasible for ``(A, b, upper)``; skips phase one.

    Returns
    -------
    LPResult
        Primal solution, objective, equality-constraint duals and final basis.
        ``status`` is ``"optimal"`` or ``"degenerate-fallback"`` when the
        anti-cycling rule had to be engaged.
    """
    c = np.asarray(c, dtype=float)
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    m, n = A.shape
    upper = np.ones(n) if upper is None else np.asarray(upper, dtype=float)
    sx = _Simplex(A, b, upper, max_iter)
    c_full = np.concatenate([c, np.zeros(m)])

    if warm is not None:
        sx.upper[n:] = 0.0
        sx.set_basis(warm.basic, warm.at_upper)
        xb = sx.x[sx.basic]
        if np.any(xb < -1e-7) or np.any(xb > sx.upper[sx.basic] + 1e-7):
            warm = None
            sx = _Simplex(A, b, upper, max_iter)
    if warm is None:
        x0 = np.zeros(n)
        if start_upper is not None:
            x0[np.asarray(start_upper, dtype=int)] = upper[np.asarray(start_upper, dtype=int)]
        resid = b - A @ x0
        sgn = np.where(resid < 0, -1.0, 1.0)
        sx.A[:, n:] = np.diag(sgn)
        sx.x[:n] = x0
        sx.x[n:] = np.abs(resid)
        sx.is_basic[n:] = True
        if np.any(np.abs(resid) > FEAS_TOL):
            phase1 = np.concatenate([np.zeros(n), -np.ones(m)])
            sx.run(phase1)
            sx.refresh()
            infeas = float(np.sum(sx.x[n:]))
            if infeas > 1e-7 * max(1.0, np.max(np.abs(b))):
                raise SolverError(
                    f"LP infeasible: phase one stopped with artificial mass {infeas:.3e}"
                )
        sx.upper[n:] = 0.0
        sx.x[n:] = 0.0
    duals = sx.run(c_full)
    sx.refresh()
    x = np.clip(sx.x[:n], 0.0, upper)
    at_upper = np.flatnonzero((sx.x >= sx.upper - FEAS_TOL) & ~sx.is_basic & (sx.upper > 0))
    state = BasisState(sx.basic.copy(), at_upper)
    status = "degenerate-fallback" if sx.used_bland else "optimal"
    return LPResult(x, float(c @ x), duals, sx.iterations, status, state)


def dual_simplex(c, A, b, basic, upper=None, max_iter: int = 5000) -> LPResult:
    """Bounded dual simplex with bound flipping from an arbitrary starting basis.

    With every column boxed, any nonsingular basis is made dual feasible by
    placing each nonbasic column at the bound its reduced cost favours. Each
    iteration removes the most infeasible basic variable and walks the dual
    ratio test past as many breakpoints as the remaining infeasibility allows.

    Raises
    ------
    SolverError
        If the basis is singular, the problem is infeasible, or the iteration
        limit is reached.
    """
    c = np.asarray(c, dtype=float)
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    m, n = A.shape
    upper = np.ones(n) if upper is None else np.asarray(upper, dtype=float)
    scale = max(np.max(np.abs(c)), 1e-300)
    cs = c / scale
    basic = np.array(basic, dtype=int)
    is_basic = np.zeros(n, dtype=bool)
    is_basic[basic] = True
    if is_basic.sum() != m:
        raise SolverError("starting basis must have one column per row")
    try:
        y = np.linalg.solve(A[:, basic].T, cs[basic])
    except np.linalg.LinAlgError as exc:
        raise SolverError("starting basis is singular") from exc
    d = cs - A.T @ y
    x = np.where(d > 0, upper, 0.0)
    it = 0
    while True:
        B = A[:, basic]
        x[basic] = 0.0
        xb = np.linalg.solve(B, b - A @ x)
        x[basic] = xb
        ub = upper[basic]
        low_viol = -xb
        up_viol = xb - ub
        viol = np.maximum(low_viol, up_viol)
        r = int(np.argmax(viol))
        if viol[r] <= FEAS_TOL:
            break
        it += 1
        if it > max_iter:
            raise SolverError(f"dual simplex hit the iteration limit ({max_iter})")
        rho = np.linalg.solve(B.T, np.eye(m)[r])
        alpha_r = rho @ A
        nb = ~is_basic
        at_up = nb & (x >= upper - FEAS_TOL) & (upper > 0)
        at_lo = nb & ~at_up & (upper > 0)
        to_lower = low_viol[r] > up_viol[r]
        # theta >= 0 moves y along +rho when the row drops to 0, along -rho otherwise
        sgn = 1.0 if to_lower else -1.0
        a = sgn * alpha_r
        cand = (at_lo & (a < -1e-12)) | (at_up & (a > 1e-12))
        idx = np.flatnonzero(cand)
        if idx.size == 0:
            raise SolverError("LP infeasible: dual ray found in the dual simplex")
        ratios = np.maximum(d[idx] / a[idx], 0.0)
        order = np.argsort(ratios, kind="stable")
        idx, ratios = idx[order], ratios[order]
        remaining = viol[r]
        steps = np.abs(alpha_r[idx]) * upper[idx]
        cum = np.cumsum(steps)
        # enter at the first breakpoint where flips alone cannot absorb the infeasibility
        stop = int(np.searchsorted(cum, remaining - FEAS_TOL))
        stop = min(stop, idx.size - 1)
        q = idx[stop]
        theta = ratios[stop]
        flips = idx[:stop]
        x[flips] = np.where(x[flips] > 0.5 * upper[flips], 0.0, upper[flips])
        d = d - sgn * theta * alpha_r
        leave = basic[r]
        d[leave] = -sgn * theta
        x[leave] = 0.0 if to_lower else upper[leave]
        is_basic[leave] = False
        is_basic[q] = True
        basic[r] = q
        d[basic] = 0.0
    y = np.linalg.solve(A[:, basic].T, cs[basic])
    d = cs - A.T @ y
    bad = (~is_basic) & (((d > 1e-9) & (x < upper - FEAS_TOL)) | ((d < -1e-9) & (x > FEAS_TOL)))
    if bad.any():
        raise SolverError("dual simplex lost dual feasibility")
    x = np.clip(x, 0.0, upper)
    at_upper = np.flatnonzero(~is_basic & (x >= upper - FEAS_TOL) & (upper > 0))
    return LPResult(x, float(c @ x), y * scale, it, "optimal", BasisState(basic.copy(), at_upper))
