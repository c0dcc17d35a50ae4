"""Active-set solvers for the package's quadratic programs.

Two entry points share the same philosophy (strictly convex objectives,
explicit active sets, lowest-index anti-cycling):

``nonneg_qp``
    The sign-constrained projection primitive: minimize a strictly convex
    quadratic over the nonnegative orthant, returning the minimizer together
    with its complementary multiplier vector.  This is the building block
    the multiplier pipeline applies nodewise and on the small representer
    Gram system.

``solve_qp``
    A primal active-set method for dense quadratic programs with equality
    and inequality rows, used by the brute-force oracle.  It needs a
    feasible start; ``phase1_point`` finds one (or certifies infeasibility)
    with a plain LP probe.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog

from .errors import Infeasible, MaxPivotsExceeded, NotSPD


@dataclass
class NonnegQP:
    """Minimizer over the nonnegative orthant and its multipliers.

    ``primal * dual == 0`` holds exactly: each component is zero in at
    least one of the two by construction.
    """

    primal: np.ndarray
    dual: np.ndarray
    n_pivots: int


def nonneg_qp(m: np.ndarray, x: np.ndarray, max_pivots: int | None = None) -> NonnegQP:
    """Minimize 0.5 y'my - x'y over y >= 0 for symmetric positive definite m.

    Active-set scheme in the style of nonnegative least squares: grow the
    free set by the lowest-index violated gradient component, and whenever
    the unconstrained solve on the free set leaves the orthant, step to the
    boundary and retire the variables that hit zero.  The lowest-index rule
    rules out cycling, and a pivot budget guards the loop regardless.
    """
    m = np.asarray(m, dtype=float)
    x = np.asarray(x, dtype=float)
    n = x.shape[0]
    if m.shape != (n, n) or not np.allclose(m, m.T, atol=1e-12 * (1 + np.abs(m).max())):
        raise NotSPD(f"matrix shape {m.shape} is not symmetric of order {n}")
    try:
        np.linalg.cholesky(m)
    except np.linalg.LinAlgError as exc:
        raise NotSPD("matrix is not positive definite") from exc
    if max_pivots is None:
        max_pivots = 100 * n + 1000

    scale = max(float(np.abs(x).max()), float(np.abs(m).max()), 1.0)
    grad_tol = 1e-13 * scale
    free = np.zeros(n, dtype=bool)
    y = np.zeros(n)
    pivots = 0
    while True:
        grad = m @ y - x
        candidates = np.flatnonzero(~free & (grad < -grad_tol))
        if candidates.size == 0:
            break
        free[candidates[0]] = True
        while True:
            pivots += 1
            if pivots > max_pivots:
                raise MaxPivotsExceeded(f"nonneg_qp exceeded {max_pivots} pivots")
            idx = np.flatnonzero(free)
            z = np.linalg.solve(m[np.ix_(idx, idx)], x[idx])
            if np.all(z > 0.0):
                y = np.zeros(n)
                y[idx] = z
                break
            # step from y toward z until the first free variable hits zero
            yf = y[idx]
            neg = z <= 0.0
            with np.errstate(divide="ignore", invalid="ignore"):
                ratios = np.where(neg, yf / (yf - z), np.inf)
            alpha = float(ratios.min())
            yf = yf + alpha * (z - yf)
            yf[neg & (ratios <= alpha + 1e-15)] = 0.0
            y = np.zeros(n)
            y[idx] = np.maximum(yf, 0.0)
            free[idx[y[idx] == 0.0]] = False
    primal = np.zeros(n)
    primal[free] = y[free]
    dual = np.zeros(n)
    inactive = ~free
    dual[inactive] = (m @ primal - x)[inactive]
    return NonnegQP(primal, dual, pivots)


@dataclass
class QPResult:
    """Solution of a dense QP with its multipliers, active rows marked."""

    x: np.ndarray
    eq_multipliers: np.ndarray
    ineq_multipliers: np.ndarray
    active: np.ndarray
    n_pivots: int


def phase1_point(
    a_eq: np.ndarray | None,
    b_eq: np.ndarray | None,
    a_in: np.ndarray | None,
    b_in: np.ndarray | None,
    n: int,
    nonneg: bool = True,
) -> np.ndarray:
    """Find any point of {a_eq x = b_eq, a_in x >= b_in, (x >= 0)} or raise
    ``Infeasible``."""
    res = linprog(
        c=np.zeros(n),
        A_ub=None if a_in is None else -np.asarray(a_in, dtype=float),
        b_ub=None if b_in is None else -np.asarray(b_in, dtype=float),
        A_eq=None if a_eq is None else np.asarray(a_eq, dtype=float),
        b_eq=None if b_eq is None else np.asarray(b_eq, dtype=float),
        bounds=(0, None) if nonneg else (None, None),
        method="highs",
        options={"primal_feasibility_tolerance": 1e-10},
    )
    if res.status == 2:
        raise Infeasible("constraint set is empty")
    if not res.success:
        raise Infeasible(f"feasibility probe failed: {res.message}")
    return np.asarray(res.x, dtype=float)


def solve_qp(
    g: np.ndarray,
    c: np.ndarray,
    a_eq: np.ndarray | None = None,
    b_eq: np.ndarray | None = None,
    a_in: np.ndarray | None = None,
    b_in: np.ndarray | None = None,
    x0: np.ndarray | None = None,
    max_pivots: int | None = None,
) -> QPResult:
    """Minimize 0.5 x'gx + c'x subject to a_eq x = b_eq and a_in x >= b_in.

    Primal active set: starting from a feasible point, repeatedly solve the
    equality-constrained subproblem on the working set, take the longest
    feasible step toward its solution, add the blocking row, and once the
    step vanishes drop the lowest-index row with a negative multiplier.
    Nonnegativity bounds, when wanted, must be passed as identity rows of
    ``a_in`` so their multipliers come back explicitly.
    """
    g = np.asarray(g, dtype=float)
    c = np.asarray(c, dtype=float)
    n = c.shape[0]
    a_eq = np.zeros((0, n)) if a_eq is None else np.asarray(a_eq, dtype=float)
    b_eq = np.zeros(0) if b_eq is None else np.asarray(b_eq, dtype=float)
    a_in = np.zeros((0, n)) if a_in is None else np.asarray(a_in, dtype=float)
    b_in = np.zeros(0) if b_in is None else np.asarray(b_in, dtype=float)
    m_eq, m_in = a_eq.shape[0], a_in.shape[0]
    if x0 is None:
        x0 = phase1_point(a_eq, b_eq, a_in, b_in, n, nonneg=False)
    x = np.asarray(x0, dtype=float).copy()
    if max_pivots is None:
        max_pivots = 50 * (n + m_in) + 1000

    scale = 1.0 + float(np.abs(g).max()) + float(np.abs(c).max())
    resid = a_in @ x - b_in if m_in else np.zeros(0)
    working = resid <= 1e-9 * (1.0 + np.abs(b_in))
    pivots = 0
    while True:
        pivots += 1
        if pivots > max_pivots:
            raise MaxPivotsExceeded(f"solve_qp exceeded {max_pivots} pivots")
        act_idx = np.flatnonzero(working)
        rows = np.vstack([a_eq, a_in[act_idx]]) if m_eq + act_idx.size else np.zeros((0, n))
        grad = g @ x + c
        kkt = np.block(
            [
                [g, -rows.T],
                [rows, np.zeros((rows.shape[0], rows.shape[0]))],
            ]
        )
        rhs = np.concatenate([-grad, np.zeros(rows.shape[0])])
        try:
            sol = np.linalg.solve(kkt, rhs)
        except np.linalg.LinAlgError:
            sol = np.linalg.lstsq(kkt, rhs, rcond=None)[0]
        d = sol[:n]
        mults = sol[n:]
        if float(np.abs(d).max(initial=0.0)) <= 1e-11 * (1.0 + float(np.abs(x).max())):
            ineq_mults = mults[m_eq:]
            if ineq_mults.size == 0 or ineq_mults.min() >= -1e-9 * scale:
                eq_m = mults[:m_eq]
                full = np.zeros(m_in)
                full[act_idx] = ineq_mults
                return QPResult(x, eq_m, full, working.copy(), pivots)
            # drop the lowest-index working row with a negative multiplier
            neg = np.flatnonzero(ineq_mults < -1e-9 * scale)
            working[act_idx[neg[0]]] = False
            continue
        # longest step along d that keeps the inactive rows feasible
        alpha = 1.0
        blocking = -1
        inact_idx = np.flatnonzero(~working)
        if inact_idx.size:
            ad = a_in[inact_idx] @ d
            res_i = a_in[inact_idx] @ x - b_in[inact_idx]
            decreasing = ad < -1e-13 * scale
            if np.any(decreasing):
                steps = np.where(decreasing, -res_i / np.where(decreasing, ad, -1.0), np.inf)
                steps = np.maximum(steps, 0.0)
                j = int(np.argmin(steps))
                if steps[j] < alpha:
                    alpha = float(steps[j])
                    blocking = int(inact_idx[j])
        x = x + alpha * d
        if blocking >= 0:
            working[blocking] = True
