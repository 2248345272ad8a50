"""Dense convex QP solver: operator splitting with an active-set polish.

Solves  min 1/2 x'Hx + g'x  s.t.  Gx <= h_in,  Ex = h_eq  via the standard
splitting iteration (fixed penalty, over-relaxation) followed by a reduced
KKT solve on the identified active set.  Problems here are tiny (tens of
rows), so a single dense factorization per solve is the right trade-off and
warm starting matters more than sparsity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import scipy.linalg as sla


class QpError(Exception):
    pass


_equil_cache = None


class QpInfeasible(QpError):
    """Primal infeasibility certificate found."""


@dataclass(frozen=True)
class QpProblem:
    H: np.ndarray
    g: np.ndarray
    G: Optional[np.ndarray] = None
    h_in: Optional[np.ndarray] = None
    E: Optional[np.ndarray] = None
    h_eq: Optional[np.ndarray] = None
    validate: bool = True    # callers that build H symmetric PSD may skip

    def __post_init__(self):
        H = np.atleast_2d(np.asarray(self.H, dtype=float))
        g = np.asarray(self.g, dtype=float).reshape(-1)
        n = g.size
        if H.shape != (n, n):
            raise ValueError("H must be n x n")
        if self.validate:
            if np.max(np.abs(H - H.T)) > 1e-10:
                raise ValueError("H must be symmetric (tol 1e-10)")
            if np.min(np.linalg.eigvalsh(0.5 * (H + H.T))) < -1e-9:
                raise ValueError("H must be positive semidefinite (tol 1e-9)")
        object.__setattr__(self, "H", 0.5 * (H + H.T))
        object.__setattr__(self, "g", g)
        for mat, vec, mname in ((self.G, self.h_in, "G"), (self.E, self.h_eq, "E")):
            if (mat is None) != (vec is None):
                raise ValueError("%s and its offsets must be given together" % mname)
            if mat is not None:
                mat = np.atleast_2d(np.asarray(mat, dtype=float))
                vec = np.asarray(vec, dtype=float).reshape(-1)
                if mat.shape != (vec.size, n):
                    raise ValueError("%s shape mismatch" % mname)
                if mname == "G":
                    object.__setattr__(self, "G", mat)
                    object.__setattr__(self, "h_in", vec)
                else:
                    object.__setattr__(self, "E", mat)
                    object.__setattr__(self, "h_eq", vec)

    @property
    def n(self) -> int:
        return self.g.size

    def objective(self, x) -> float:
        x = np.asarray(x, dtype=float)
        return float(0.5 * x @ self.H @ x + self.g @ x)


@dataclass(frozen=True)
class QpSolution:
    x: np.ndarray
    lam: np.ndarray            # inequality multipliers (>= 0 at optimum)
    nu: np.ndarray             # equality multipliers
    status: str                # 'optimal' | 'infeasible' | 'iteration_limit'
    iterations: int
    residuals: Tuple[float, float, float, float]
    rho_final: Optional[np.ndarray] = None


def kkt_residuals(p: QpProblem, x, lam, nu) -> Tuple[float, float, float, float]:
    """(stationarity, primal, dual, complementarity) infinity norms."""
    x = np.asarray(x, dtype=float)
    lam = np.asarray(lam, dtype=float).reshape(-1)
    nu = np.asarray(nu, dtype=float).reshape(-1)
    stat = p.H @ x + p.g
    primal = 0.0
    comp = 0.0
    dual = 0.0
    if p.G is not None:
        slack = p.G @ x - p.h_in
        stat = stat + p.G.T @ lam
        primal = max(primal, float(np.max(slack, initial=0.0)))
        dual = float(np.max(-lam, initial=0.0))
        comp = float(np.max(np.abs(lam * slack), initial=0.0))
    if p.E is not None:
        stat = stat + p.E.T @ nu
        primal = max(primal, float(np.max(np.abs(p.E @ x - p.h_eq), initial=0.0)))
    return (float(np.max(np.abs(stat), initial=0.0)), primal, max(dual, 0.0), comp)


def solution_residuals(p: QpProblem, sol: QpSolution):
    return kkt_residuals(p, sol.x, sol.lam, sol.nu)


def _stack_constraints(p: QpProblem):
    """Rows l <= Ax <= u; inequalities get l = -inf, equalities l = u."""
    blocks_A, blocks_l, blocks_u = [], [], []
    if p.G is not None:
        blocks_A.append(p.G)
        blocks_l.append(np.full(p.h_in.size, -np.inf))
        blocks_u.append(p.h_in)
    if p.E is not None:
        blocks_A.append(p.E)
        blocks_l.append(p.h_eq)
        blocks_u.append(p.h_eq)
    if not blocks_A:
        A = np.zeros((0, p.n))
        return A, np.zeros(0), np.zeros(0)
    return np.vstack(blocks_A), np.concatenate(blocks_l), np.concatenate(blocks_u)


def _polish(p: QpProblem, x, lam, nu, tol_active=1e-7):
    """Solve the reduced KKT system on the active set; None if it fails."""
    n = p.n
    rows = []
    rhs = []
    active_idx = []
    if p.G is not None:
        slack = p.h_in - p.G @ x
        for i in range(p.h_in.size):
            if slack[i] < tol_active or lam[i] > tol_active:
                rows.append(p.G[i])
                rhs.append(p.h_in[i])
                active_idx.append(i)
    n_act = len(rows)
    if p.E is not None:
        rows.extend(p.E)
        rhs.extend(p.h_eq)
    A_act = np.array(rows).reshape(len(rows), n) if rows else np.zeros((0, n))
    b_act = np.array(rhs)
    k = A_act.shape[0]
    KKT = np.zeros((n + k, n + k))
    KKT[:n, :n] = p.H + 1e-12 * np.eye(n)
    KKT[:n, n:] = A_act.T
    KKT[n:, :n] = A_act
    KKT[n:, n:] = -1e-12 * np.eye(k)
    try:
        sol = np.linalg.solve(KKT, np.concatenate([-p.g, b_act]))
    except np.linalg.LinAlgError:
        return None
    x_new = sol[:n]
    mult = sol[n:]
    lam_new = np.zeros_like(lam)
    for j, i in enumerate(active_idx):
        lam_new[i] = mult[j]
    nu_new = mult[n_act:] if p.E is not None else np.zeros(0)
    if lam_new.size and np.min(lam_new, initial=0.0) < -1e-7:
        return None
    lam_new = np.maximum(lam_new, 0.0)
    return x_new, lam_new, nu_new


def qp_solve(p: QpProblem, warm_start=None, max_iter: int = 4000,
             rho: float = 0.1, alpha: float = 1.6, sigma: float = 1e-6,
             eps: float = 1e-8) -> QpSolution:
    """Operator-splitting solve with over-relaxation and polish.

    ``warm_start`` is an optional (x0, y0) pair of primal iterate and
    stacked-row dual (inequalities first, then equalities).  Infeasibility is
    detected from the divergence direction of the dual iterates.
    """
    n = p.n
    n_in = p.h_in.size if p.G is not None else 0

    # The constraint matrix is often shared across many solves (SQP, MPC warm
    # starts), so the stacked rows and their equilibration are cached on
    # identity; the offsets change every call and are rescaled below.
    global _equil_cache
    cached = _equil_cache
    if cached is not None and cached[0] is p.G and cached[1] is p.E:
        A, row_scale = cached[2], cached[3]
        m = A.shape[0]
    else:
        A, _, _ = _stack_constraints(p)
        m = A.shape[0]
        # row equilibration: unit-norm constraint rows (zero rows left alone)
        row_norms = np.linalg.norm(A, axis=1) if m else np.zeros(0)
        row_scale = np.where(row_norms > 1e-12, row_norms, 1.0)
        A = A / row_scale[:, None]
        _equil_cache = (p.G, p.E, A, row_scale)
    l = np.full(m, -np.inf)
    u = np.empty(m)
    if p.G is not None:
        u[:n_in] = p.h_in / row_scale[:n_in]
    if p.E is not None:
        l[n_in:] = p.h_eq / row_scale[n_in:]
        u[n_in:] = p.h_eq / row_scale[n_in:]

    # per-row penalty: equalities get a much stiffer rho
    rho_vec = np.full(m, rho)
    rho_vec[n_in:] = rho * 1e3

    x = np.zeros(n)
    y = np.zeros(m)
    if warm_start is not None:
        if len(warm_start) == 3:
            x0, y0, rho0 = warm_start
            if rho0 is not None and np.asarray(rho0).shape == (m,):
                rho_vec = np.asarray(rho0, dtype=float).copy()
        else:
            x0, y0 = warm_start
        if x0 is not None:
            x = np.asarray(x0, dtype=float).copy()
        if y0 is not None:
            y = np.asarray(y0, dtype=float).reshape(-1).copy()
            if y.size != m:
                y = np.zeros(m)
            else:
                y = y * row_scale    # duals live in the scaled row space
    z = np.clip(A @ x, l, u) if m else np.zeros(0)

    def finish(status, iters):
        y_orig = y / row_scale if m else y
        lam = np.maximum(y_orig[:n_in], 0.0)
        nu = y_orig[n_in:]
        res = kkt_residuals(p, x, lam, nu)
        return QpSolution(x=x.copy(), lam=lam, nu=nu.copy(), status=status,
                          iterations=iters, residuals=res,
                          rho_final=rho_vec.copy())

    if m == 0:
        x = np.linalg.solve(p.H + 1e-12 * np.eye(n), -p.g)
        return finish("optimal", 0)

    def factor():
        M = p.H + sigma * np.eye(n) + A.T @ (rho_vec[:, None] * A)
        return sla.cho_factor(M)

    chol = factor()

    scale = max(1.0, np.max(np.abs(p.g)), np.max(np.abs(u[np.isfinite(u)]), initial=1.0))

    def converged():
        r_prim = np.max(np.abs(A @ x - z), initial=0.0)
        r_dual = np.max(np.abs(p.H @ x + p.g + A.T @ y), initial=0.0)
        return r_prim < eps * scale and r_dual < eps * scale

    status = "iteration_limit"
    it = 0
    if converged():
        # warm start already satisfies the KKT conditions
        return finish("optimal", 0)
    for it in range(1, max_iter + 1):
        rhs = sigma * x - p.g + A.T @ (rho_vec * z - y)
        x_t = sla.cho_solve(chol, rhs)
        z_t = A @ x_t
        x = alpha * x_t + (1.0 - alpha) * x
        z_r = alpha * z_t + (1.0 - alpha) * z
        y_old = y
        z = np.clip(z_r + y / rho_vec, l, u)
        y = y + rho_vec * (z_r - z)

        if it % 100 == 0:
            # residual-balancing penalty update (with refactorization)
            r_p = np.max(np.abs(A @ x - z), initial=0.0)
            r_d = np.max(np.abs(p.H @ x + p.g + A.T @ y), initial=0.0)
            np_ = max(np.max(np.abs(A @ x), initial=0.0), np.max(np.abs(z), initial=0.0), 1e-10)
            nd_ = max(np.max(np.abs(p.H @ x), initial=0.0),
                      np.max(np.abs(A.T @ y), initial=0.0),
                      np.max(np.abs(p.g), initial=0.0), 1e-10)
            ratio = math.sqrt((r_p / np_) / max(r_d / nd_, 1e-16))
            if ratio > 5.0 or ratio < 0.2:
                scale_f = min(max(ratio, 1e-3), 1e3)
                rho_vec = np.clip(rho_vec * scale_f, 1e-6, 1e7)
                chol = factor()

        if it <= 10 or it % 10 == 0:
            if converged():
                status = "optimal"
                break
            dy = y - y_old
            ndy = np.max(np.abs(dy), initial=0.0)
            if ndy > 1e-12:
                dyn = dy / ndy
                cert_ok = np.max(np.abs(A.T @ dyn), initial=0.0) < 1e-8
                gap = float(np.sum(u[np.isfinite(u)] * np.maximum(dyn, 0.0)[np.isfinite(u)])
                            + np.sum(l[np.isfinite(l)] * np.minimum(dyn, 0.0)[np.isfinite(l)]))
                lower_ok = np.all(dyn[~np.isfinite(l)] >= -1e-8)
                if cert_ok and lower_ok and gap < -1e-8:
                    return finish("infeasible", it)

    if status == "optimal":
        return finish("optimal", it)
    y_orig = y / row_scale
    lam = np.maximum(y_orig[:n_in], 0.0)
    nu = y_orig[n_in:]
    polished = _polish(p, x, lam, nu)
    if polished is not None:
        x_p, lam_p, nu_p = polished
        res_old = max(kkt_residuals(p, x, lam, nu))
        res_new = max(kkt_residuals(p, x_p, lam_p, nu_p))
        # never let the polish increase the objective or the KKT error
        if res_new <= res_old and p.objective(x_p) <= p.objective(x) + 1e-12 * scale:
            x, y = x_p, np.concatenate([lam_p, nu_p]) * row_scale
            status = "optimal" if res_new < 1e-6 else status
    return finish(status, it)
