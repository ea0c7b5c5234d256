"""Generic smooth NLP interface, a primal-dual interior-point solver, and a
damped Newton solver for square nonlinear systems.

The interior-point method uses a monotone barrier schedule, a symmetric
indefinite KKT factorization with inertia correction via Levenberg
regularization, a fraction-to-boundary rule, and Armijo backtracking on an
l1 merit function.  Bounds are relaxed slightly on the inside; reported
objectives are always the true (unrelaxed) ones.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import sparse
from scipy.linalg import get_lapack_funcs

OPTIMAL = "optimal"
MAX_ITER = "max_iter"
TIME_LIMIT = "time_limit"
NUMERICAL_FAILURE = "numerical_failure"
SOLVED = "solved"
FAILED = "failed"


@dataclass
class NlpProblem:
    """Smooth NLP: min f(x) s.t. eq(x)=0, ineq(x)<=0, lb<=x<=ub."""

    n: int
    x0: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    objective: Callable[[np.ndarray], float]
    gradient: Callable[[np.ndarray], np.ndarray]
    eq: Callable[[np.ndarray], np.ndarray]
    ineq: Callable[[np.ndarray], np.ndarray]
    jac_eq: Callable[[np.ndarray], sparse.spmatrix]
    jac_ineq: Callable[[np.ndarray], sparse.spmatrix]
    # hess(x, sigma_f, lam_eq, lam_ineq): lower triangle of the Lagrangian
    # Hessian sigma_f * hess(f) + sum lam_eq*hess(eq) + sum lam_ineq*hess(ineq)
    hess: Callable[..., sparse.spmatrix]
    n_eq: int = 0
    n_ineq: int = 0
    # opaque builder-owned handle (e.g. variable-layout metadata); unused here
    meta: object = None


@dataclass
class NlpSolution:
    x: np.ndarray
    lambda_eq: np.ndarray
    lambda_ineq: np.ndarray
    z_lower: np.ndarray
    z_upper: np.ndarray
    objective: float
    kkt_residual: float
    status: str
    iterations: int = 0
    constraint_violation: float = 0.0


def _inertia_from_sytrf(ldu, ipiv):
    """(n_pos, n_neg, n_zero) of the Bunch-Kaufman block-diagonal factor."""
    n = ldu.shape[0]
    pos = neg = zero = 0
    k = 0
    while k < n:
        if ipiv[k] > 0:
            d = ldu[k, k]
            if d > 0:
                pos += 1
            elif d < 0:
                neg += 1
            else:
                zero += 1
            k += 1
        else:
            d11 = ldu[k, k]
            d22 = ldu[k + 1, k + 1]
            d21 = ldu[k + 1, k]
            det = d11 * d22 - d21 * d21
            if det < 0:
                pos += 1
                neg += 1
            elif det > 0:
                if d11 + d22 > 0:
                    pos += 2
                else:
                    neg += 2
            else:
                zero += 2
            k += 2
    return pos, neg, zero


class _KktSolver:
    """Dense symmetric-indefinite factor/solve with inertia reporting."""

    def __init__(self):
        self._funcs = None

    def factor(self, M):
        if self._funcs is None:
            self._funcs = get_lapack_funcs(("sytrf", "sytrs"), (M,))
        sytrf, _ = self._funcs
        ldu, ipiv, info = sytrf(M, lower=1)
        if info != 0:
            return None, None, (0, 0, M.shape[0])
        return ldu, ipiv, _inertia_from_sytrf(ldu, ipiv)

    def solve(self, ldu, ipiv, rhs):
        _, sytrs = self._funcs
        x, info = sytrs(ldu, ipiv, rhs, lower=1)
        if info != 0:
            return None
        return x


def _relax_bounds(lb, ub, rel=1e-8):
    lb_r = lb.copy()
    ub_r = ub.copy()
    finite_l = np.isfinite(lb)
    finite_u = np.isfinite(ub)
    lb_r[finite_l] -= np.maximum(rel, rel * np.abs(lb[finite_l]))
    ub_r[finite_u] += np.maximum(rel, rel * np.abs(ub[finite_u]))
    return lb_r, ub_r


def _interior_start(x0, lb, ub):
    x = x0.astype(float).copy()
    both = np.isfinite(lb) & np.isfinite(ub)
    pad = np.zeros_like(x)
    pad[both] = np.minimum(1e-2, 0.25 * (ub[both] - lb[both]))
    only_l = np.isfinite(lb) & ~np.isfinite(ub)
    only_u = ~np.isfinite(lb) & np.isfinite(ub)
    with np.errstate(invalid="ignore"):
        lo = np.where(np.isfinite(lb), lb + np.where(both, pad, 0.0), -np.inf)
        hi = np.where(np.isfinite(ub), ub - np.where(both, pad, 0.0), np.inf)
    x = np.clip(x, lo, hi)
    x[only_l] = np.maximum(x[only_l], lb[only_l] + 1e-2)
    x[only_u] = np.minimum(x[only_u], ub[only_u] - 1e-2)
    return x


def _ftb_alpha(val, dval, tau):
    """Largest alpha in (0, 1] with val + alpha*dval >= (1 - tau) * val."""
    mask = dval < 0
    if not np.any(mask):
        return 1.0
    return float(min(1.0, np.min(-tau * val[mask] / dval[mask])))


def solve_nlp(prob: NlpProblem, tol=1e-6, max_iter=300, time_limit=None,
              log=None, mu0=1e-1):
    """Solve an NlpProblem with a primal-dual interior-point method.

    Returns an NlpSolution; status `optimal` means the max-norm KKT residual
    is at or below `tol`.  The best iterate found is always returned.
    """
    t_start = time.monotonic()
    n = prob.n
    me, mi = prob.n_eq, prob.n_ineq
    lb_true = np.asarray(prob.lb, float)
    ub_true = np.asarray(prob.ub, float)
    lb, ub = _relax_bounds(lb_true, ub_true, rel=min(1e-8, max(tol, 1e-14)))
    fin_l = np.isfinite(lb)
    fin_u = np.isfinite(ub)

    x = _interior_start(np.asarray(prob.x0, float), lb, ub)
    cI = prob.ineq(x) if mi else np.zeros(0)
    t = np.maximum(1e-2, -cI)
    mu = mu0
    y = np.zeros(me)
    w = np.full(mi, mu / np.maximum(t, 1e-8)) if mi else np.zeros(0)
    w = np.maximum(w, 1e-8)
    zl = np.zeros(n)
    zu = np.zeros(n)
    zl[fin_l] = mu / (x[fin_l] - lb[fin_l])
    zu[fin_u] = mu / (ub[fin_u] - x[fin_u])

    nu = 10.0
    tau_ftb = 0.995
    delta_c = 1e-8
    delta_w_last = 0.0
    kkt = _KktSolver()

    best = None

    def viol(xv, cEv, cIv):
        v = 0.0
        if me:
            v = max(v, float(np.max(np.abs(cEv))))
        if mi:
            v = max(v, float(np.max(np.maximum(cIv, 0.0))))
        v = max(v, float(np.max(np.maximum(lb - xv, 0.0), initial=0.0)))
        v = max(v, float(np.max(np.maximum(xv - ub, 0.0), initial=0.0)))
        return v

    def consider(xv, cEv, cIv, fv):
        nonlocal best
        score = (viol(xv, cEv, cIv), fv)
        if best is None or score < best[0]:
            best = (score, xv.copy())

    status = MAX_ITER
    it = 0
    for it in range(1, max_iter + 1):
        f = prob.objective(x)
        g = prob.gradient(x)
        cE = prob.eq(x) if me else np.zeros(0)
        cI = prob.ineq(x) if mi else np.zeros(0)
        JE = prob.jac_eq(x).tocsr() if me else sparse.csr_matrix((0, n))
        JI = prob.jac_ineq(x).tocsr() if mi else sparse.csr_matrix((0, n))
        consider(x, cE, cI, f)

        gap_l = np.where(fin_l, x - lb, np.inf)
        gap_u = np.where(fin_u, ub - x, np.inf)

        r_d = g + JE.T @ y + JI.T @ w - zl + zu
        comp_t = t * w if mi else np.zeros(0)
        comp_l = np.zeros(n)
        comp_l[fin_l] = gap_l[fin_l] * zl[fin_l]
        comp_u = np.zeros(n)
        comp_u[fin_u] = gap_u[fin_u] * zu[fin_u]

        def resid(mu_val):
            r = float(np.max(np.abs(r_d), initial=0.0))
            if me:
                r = max(r, float(np.max(np.abs(cE))))
            if mi:
                r = max(r, float(np.max(np.abs(cI + t))))
                r = max(r, float(np.max(np.abs(comp_t - mu_val))))
            r = max(r, float(np.max(np.abs(comp_l[fin_l] - mu_val), initial=0.0)))
            r = max(r, float(np.max(np.abs(comp_u[fin_u] - mu_val), initial=0.0)))
            return r

        e0 = resid(0.0)
        if log is not None:
            log(it, f, e0, mu)
        if e0 <= tol:
            status = OPTIMAL
            break
        if time_limit is not None and time.monotonic() - t_start > time_limit:
            status = TIME_LIMIT
            break

        while resid(mu) <= 10.0 * mu and mu > tol / 10.0:
            mu = max(tol / 10.0, mu / 5.0)

        H = prob.hess(x, 1.0, y, w).tocoo()
        sigma_x = np.where(fin_l, zl / np.maximum(gap_l, 1e-16), 0.0) \
            + np.where(fin_u, zu / np.maximum(gap_u, 1e-16), 0.0)

        # barrier gradient used on the KKT right-hand side
        gbar = g + JE.T @ y + JI.T @ w
        gbar -= np.where(fin_l, mu / np.maximum(gap_l, 1e-16), 0.0)
        gbar += np.where(fin_u, mu / np.maximum(gap_u, 1e-16), 0.0)

        N = n + me + mi
        M = np.zeros((N, N))
        M[H.row, H.col] += H.data
        tri = np.tril_indices(n)
        Mt = M[:n, :n]
        low = Mt + Mt.T - np.diag(np.diag(Mt))
        M[:n, :n] = low
        if me:
            M[n:n + me, :n] = JE.toarray()
            M[:n, n:n + me] = JE.toarray().T
        if mi:
            M[n + me:, :n] = JI.toarray()
            M[:n, n + me:] = JI.toarray().T
            M[n + me:, n + me:] = -np.diag(t / w)

        rhs = np.concatenate([
            -gbar,
            -cE,
            -(cI + mu / w) if mi else np.zeros(0),
        ])

        # inertia-corrected factorization; dual regularization only kicks in
        # on singularity (e.g. duplicated equality rows) so well-posed
        # problems are solved without the delta_c bias
        delta_w = 0.0
        dc = 0.0
        ldu = ipiv = None
        for attempt in range(40):
            Mreg = M.copy()
            idx = np.arange(n)
            Mreg[idx, idx] += sigma_x + delta_w
            if dc and me + mi:
                idx2 = np.arange(n, N)
                Mreg[idx2, idx2] -= dc
            ldu, ipiv, inertia = kkt.factor(Mreg)
            if ldu is not None and inertia[0] == n and inertia[2] == 0:
                break
            singular = ldu is None or inertia[2] > 0
            wrong_inertia = ldu is None or inertia[0] != n
            ldu = None
            if singular:
                dc = delta_c if dc == 0.0 else dc * 100.0
            if wrong_inertia or not singular:
                if delta_w == 0.0:
                    delta_w = 1e-4 if delta_w_last == 0.0 else max(1e-6, delta_w_last / 3.0)
                else:
                    delta_w *= 10.0
            if delta_w > 1e12:
                break
        if ldu is None:
            status = NUMERICAL_FAILURE
            break
        delta_w_last = delta_w
        sol = kkt.solve(ldu, ipiv, rhs)
        if sol is None or not np.all(np.isfinite(sol)):
            status = NUMERICAL_FAILURE
            break
        dx = sol[:n]
        dy = sol[n:n + me]
        dw = sol[n + me:]
        dt = -(cI + t) - (JI @ dx) if mi else np.zeros(0)
        dzl = np.where(fin_l, mu / np.maximum(gap_l, 1e-16) - zl
                       - zl / np.maximum(gap_l, 1e-16) * dx, 0.0)
        dzu = np.where(fin_u, mu / np.maximum(gap_u, 1e-16) - zu
                       + zu / np.maximum(gap_u, 1e-16) * dx, 0.0)

        # fraction-to-boundary step sizes
        a_pri = 1.0
        if mi:
            a_pri = min(a_pri, _ftb_alpha(t, dt, tau_ftb))
        a_pri = min(a_pri, _ftb_alpha(gap_l[fin_l], dx[fin_l], tau_ftb))
        a_pri = min(a_pri, _ftb_alpha(gap_u[fin_u], -dx[fin_u], tau_ftb))
        a_dual = 1.0
        if mi:
            a_dual = min(a_dual, _ftb_alpha(w, dw, tau_ftb))
        a_dual = min(a_dual, _ftb_alpha(zl[fin_l], dzl[fin_l], tau_ftb))
        a_dual = min(a_dual, _ftb_alpha(zu[fin_u], dzu[fin_u], tau_ftb))

        # l1 merit line search
        dual_mag = max(
            float(np.max(np.abs(y), initial=0.0)) if me else 0.0,
            float(np.max(np.abs(w), initial=0.0)) if mi else 0.0,
        )
        nu = max(nu, 1.1 * dual_mag + 1.0)

        def barrier_merit(xv, tv):
            fv = prob.objective(xv)
            gl = xv[fin_l] - lb[fin_l]
            gu = ub[fin_u] - xv[fin_u]
            if np.any(gl <= 0) or np.any(gu <= 0) or (mi and np.any(tv <= 0)):
                return np.inf, None, None
            bar = fv - mu * (np.sum(np.log(gl)) + np.sum(np.log(gu)))
            if mi:
                bar -= mu * np.sum(np.log(tv))
            cEv = prob.eq(xv) if me else np.zeros(0)
            cIv = prob.ineq(xv) if mi else np.zeros(0)
            pen = np.sum(np.abs(cEv)) + (np.sum(np.abs(cIv + tv)) if mi else 0.0)
            return bar + nu * pen, cEv, cIv

        phi0, _, _ = barrier_merit(x, t)
        con_norm = np.sum(np.abs(cE)) + (np.sum(np.abs(cI + t)) if mi else 0.0)
        dphi = float(gbar @ dx) - float(np.sum((mu / t) * dt)) if mi else float(gbar @ dx)
        dphi -= nu * con_norm
        if dphi > -1e-14:
            dphi = -max(1e-14, float(dx @ dx))

        alpha = a_pri
        accepted = False
        for _ in range(30):
            xn = x + alpha * dx
            tn = t + alpha * dt if mi else t
            phi, cEn, cIn = barrier_merit(xn, tn)
            # the epsilon slack keeps the test passable when the predicted
            # decrease is below rounding noise in the merit value
            if phi <= phi0 + 1e-4 * alpha * dphi + 1e-12 * (1.0 + abs(phi0)):
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            # merit rejection near a solution can be pure rounding noise; fall
            # back to the full step whenever it reduces the barrier KKT error
            xf = x + a_pri * dx
            tf = t + a_pri * dt if mi else t
            yf = y + a_pri * dy
            wf = np.maximum(w + a_dual * dw, 1e-300) if mi else w
            zlf = np.where(fin_l, np.maximum(zl + a_dual * dzl, 1e-300), 0.0)
            zuf = np.where(fin_u, np.maximum(zu + a_dual * dzu, 1e-300), 0.0)
            gf = prob.gradient(xf)
            cEf = prob.eq(xf) if me else np.zeros(0)
            cIf = prob.ineq(xf) if mi else np.zeros(0)
            JEf = prob.jac_eq(xf).tocsr() if me else sparse.csr_matrix((0, n))
            JIf = prob.jac_ineq(xf).tocsr() if mi else sparse.csr_matrix((0, n))
            rdf = gf + JEf.T @ yf + JIf.T @ wf - zlf + zuf
            gap_lf = np.where(fin_l, xf - lb, np.inf)
            gap_uf = np.where(fin_u, ub - xf, np.inf)
            ef = float(np.max(np.abs(rdf), initial=0.0))
            if me:
                ef = max(ef, float(np.max(np.abs(cEf))))
            if mi:
                ef = max(ef, float(np.max(np.abs(cIf + tf))))
                ef = max(ef, float(np.max(np.abs(tf * wf - mu))))
            ef = max(ef, float(np.max(np.abs(gap_lf[fin_l] * zlf[fin_l] - mu),
                                      initial=0.0)))
            ef = max(ef, float(np.max(np.abs(gap_uf[fin_u] * zuf[fin_u] - mu),
                                      initial=0.0)))
            if np.isfinite(ef) and ef <= (1.0 - 1e-4) * resid(mu):
                alpha = a_pri
            xn = x + alpha * dx
            tn = t + alpha * dt if mi else t

        x = xn
        t = tn
        y = y + alpha * dy
        # fraction-to-boundary keeps duals positive; the floor only guards
        # against underflow to exactly zero
        w = np.maximum(w + a_dual * dw, 1e-300) if mi else w
        zl = np.where(fin_l, np.maximum(zl + a_dual * dzl, 1e-300), 0.0)
        zu = np.where(fin_u, np.maximum(zu + a_dual * dzu, 1e-300), 0.0)

    cE = prob.eq(x) if me else np.zeros(0)
    cI = prob.ineq(x) if mi else np.zeros(0)
    f = prob.objective(x)
    consider(x, cE, cI, f)
    if status != OPTIMAL and best is not None:
        x_best = best[1]
        if not np.array_equal(x_best, x):
            x = x_best
    # residual is reported at the solver's iterate; the returned x is then
    # clipped into the caller's true (unrelaxed) bounds, a move of at most the
    # bound relaxation
    g = prob.gradient(x)
    JE = prob.jac_eq(x).tocsr() if me else sparse.csr_matrix((0, n))
    JI = prob.jac_ineq(x).tocsr() if mi else sparse.csr_matrix((0, n))
    cE = prob.eq(x) if me else np.zeros(0)
    cI = prob.ineq(x) if mi else np.zeros(0)
    r_d = g + JE.T @ y + JI.T @ w - zl + zu
    kkt_res = float(np.max(np.abs(r_d), initial=0.0))
    if me:
        kkt_res = max(kkt_res, float(np.max(np.abs(cE))))
    if mi:
        kkt_res = max(kkt_res, float(np.max(np.maximum(cI, 0.0))))
        kkt_res = max(kkt_res, float(np.max(np.abs(cI + t) * w)))
    if np.any(fin_l):
        kkt_res = max(kkt_res, float(np.max(np.abs((x - lb)[fin_l] * zl[fin_l]))))
    if np.any(fin_u):
        kkt_res = max(kkt_res, float(np.max(np.abs((ub - x)[fin_u] * zu[fin_u]))))

    x = np.clip(x, lb_true, ub_true)
    cE = prob.eq(x) if me else np.zeros(0)
    cI = prob.ineq(x) if mi else np.zeros(0)
    f = prob.objective(x)

    return NlpSolution(
        x=x, lambda_eq=y, lambda_ineq=w, z_lower=zl, z_upper=zu,
        objective=f, kkt_residual=kkt_res, status=status, iterations=it,
        constraint_violation=viol(x, cE, cI),
    )


@dataclass
class SquareResult:
    x: np.ndarray
    status: str
    iterations: int = 0
    residual: float = 0.0


def solve_square(fun, jac, x0, tol=1e-8, max_iter=100, time_limit=None):
    """Damped Newton for a square system fun(x) = 0 with Jacobian jac(x).

    Backtracks on the residual norm, with Levenberg-regularized least-squares
    steps as a fallback for singular Jacobians.  Returns the best iterate.
    """
    t_start = time.monotonic()
    x = np.asarray(x0, float).copy()
    F = np.asarray(fun(x), float)
    best_x, best_norm = x.copy(), float(np.max(np.abs(F), initial=0.0))
    it = 0
    for it in range(1, max_iter + 1):
        norm_inf = float(np.max(np.abs(F), initial=0.0))
        if norm_inf < best_norm:
            best_x, best_norm = x.copy(), norm_inf
        if norm_inf <= tol:
            return SquareResult(x, SOLVED, it - 1, norm_inf)
        if time_limit is not None and time.monotonic() - t_start > time_limit:
            return SquareResult(best_x, FAILED, it - 1, best_norm)

        J = jac(x)
        if sparse.issparse(J):
            J = J.toarray()
        d = None
        try:
            d = np.linalg.solve(J, -F)
            if not np.all(np.isfinite(d)):
                d = None
        except np.linalg.LinAlgError:
            d = None
        if d is None:
            delta = 1e-8
            JtJ = J.T @ J
            JtF = J.T @ F
            for _ in range(20):
                try:
                    d = np.linalg.solve(JtJ + delta * np.eye(J.shape[1]), -JtF)
                    if np.all(np.isfinite(d)):
                        break
                except np.linalg.LinAlgError:
                    pass
                d = None
                delta *= 10.0
            if d is None:
                return SquareResult(best_x, FAILED, it, best_norm)

        f0 = float(np.linalg.norm(F))
        alpha = 1.0
        improved = False
        for _ in range(40):
            xn = x + alpha * d
            Fn = np.asarray(fun(xn), float)
            if np.all(np.isfinite(Fn)) and np.linalg.norm(Fn) <= (1 - 1e-4 * alpha) * f0:
                improved = True
                break
            alpha *= 0.5
        if not improved:
            # no progress along the Newton direction: try a regularized step
            delta = max(1e-8, 1e-4 * f0)
            JtJ = J.T @ J
            try:
                d2 = np.linalg.solve(JtJ + delta * np.eye(J.shape[1]), -(J.T @ F))
            except np.linalg.LinAlgError:
                return SquareResult(best_x, FAILED, it, best_norm)
            xn = x + d2
            Fn = np.asarray(fun(xn), float)
            if not (np.all(np.isfinite(Fn)) and np.linalg.norm(Fn) < f0):
                return SquareResult(best_x, FAILED, it, best_norm)
        x, F = xn, Fn

    norm_inf = float(np.max(np.abs(F), initial=0.0))
    if norm_inf < best_norm:
        best_x, best_norm = x.copy(), norm_inf
    status = SOLVED if best_norm <= tol else FAILED
    return SquareResult(best_x, status, it, best_norm)
