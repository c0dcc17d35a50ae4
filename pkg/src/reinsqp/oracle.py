"""Dense brute-force reference pipeline.

Everything here works in probability-weighted flat coordinates, where the
tree's inner product becomes the Euclidean one: plans map to vectors, the
quadratic forms to explicit Gram matrices assembled by leaf enumeration,
linear functionals to plain rows, and the underwriting problems to dense
quadratic programs.  Nothing is shared with the structured solver except
the tree itself, so agreement between the two routes is meaningful
evidence.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

from .contracts import ContractBook
from .errors import Infeasible, InputError, NumericalFailure
from .operators import (
    DENSE_MAX_DIM,
    CoordinateLayout,
    Kind,
    coordinate_layout,
    dense_matrix,
    representers,
)
from .portfolio import ConstraintConfig
from .qp import phase1_point, solve_qp
from .tree import PortfolioProcess, ScenarioTree

#: relative residual required of a dense linear solve
DENSE_RESIDUAL_TOL = 1e-12
#: relative gap at which the variance-cap bisection stops
BISECTION_TOL = 1e-6


class Form:
    """The three supported problem forms."""

    MIN_VARIANCE = "min-variance"
    FIXED_MEAN = "fixed-mean"
    MAX_MEAN = "max-mean"

    ALL = (MIN_VARIANCE, FIXED_MEAN, MAX_MEAN)


def to_coords(tree: ScenarioTree, plan: PortfolioProcess) -> np.ndarray:
    """Flatten a plan into probability-weighted coordinates."""
    layout = coordinate_layout(tree)
    out = np.zeros(layout.dim)
    for k in range(tree.last_issue + 1):
        w = np.sqrt(tree.path_prob[k])[:, None]
        base = layout.offsets[k]
        block = plan.stage(k).values * w
        out[base : base + block.size] = block.ravel()
    return out


def from_coords(tree: ScenarioTree, coords: np.ndarray) -> PortfolioProcess:
    """Inverse of :func:`to_coords`."""
    layout = coordinate_layout(tree)
    if coords.shape != (layout.dim,):
        raise InputError(f"coordinate vector has shape {coords.shape}, wanted ({layout.dim},)")
    arrays = []
    for k in range(tree.last_issue + 1):
        nk, nc = tree.n_nodes(k), tree.n_contracts
        base = layout.offsets[k]
        block = coords[base : base + nk * nc].reshape(nk, nc)
        arrays.append(block / np.sqrt(tree.path_prob[k])[:, None])
    return PortfolioProcess.from_arrays(tree, arrays)


@dataclass
class DenseProblem:
    """A fully materialized instance: Gram matrix, functional rows, levels."""

    kind: Kind
    gram: np.ndarray
    rows: np.ndarray
    levels: np.ndarray
    layout: CoordinateLayout
    tree: ScenarioTree = field(repr=False)
    book: ContractBook = field(repr=False)
    config: ConstraintConfig = field(repr=False)


def assemble(
    tree: ScenarioTree,
    book: ContractBook,
    config: ConstraintConfig,
    kind: Kind,
    max_dim: int = DENSE_MAX_DIM,
) -> DenseProblem:
    """Materialize the Gram matrix and all constraint rows.

    Row t < horizon is the period-t profitability functional, the last row
    the expected-final-utility functional; ``levels`` holds their
    right-hand sides with the mean floor last.
    """
    gram = dense_matrix(kind, tree, book, max_dim=max_dim)
    rows, levels = constraint_rows(tree, book, config)
    return DenseProblem(
        kind, gram, rows, levels, coordinate_layout(tree), tree, book, config
    )


def dense_spectrum(problem: DenseProblem) -> np.ndarray:
    """All eigenvalues of the form's Gram matrix, ascending."""
    return np.linalg.eigvalsh(problem.gram)


def dense_solve_linear(
    problem: DenseProblem, rhs: PortfolioProcess, shift: float = 0.0
) -> tuple[PortfolioProcess, float]:
    """Solve (form - shift) plan = rhs densely; returns the plan and its
    relative residual, which must clear the dense tolerance."""
    b = to_coords(problem.tree, rhs)
    a = problem.gram - shift * np.eye(problem.layout.dim)
    x = np.linalg.solve(a, b)
    denom = float(np.linalg.norm(b)) or 1.0
    resid = float(np.linalg.norm(a @ x - b)) / denom
    if resid > max(DENSE_RESIDUAL_TOL, 1e-15 * np.linalg.cond(a)):
        raise NumericalFailure(f"dense solve residual {resid:.3e}")
    return from_coords(problem.tree, x), resid


@dataclass
class OracleSolution:
    """A certified optimum of one problem form, with all multipliers mapped
    back to plan space."""

    form: str
    plan: PortfolioProcess
    coords: np.ndarray
    roe_multipliers: np.ndarray
    mean_multiplier: float
    bound_multipliers: PortfolioProcess
    mean_value: float
    variance_value: float
    objective: float
    mean_floor: float
    n_pivots: int
    bisection_trace: list[tuple[float, float]] = field(default_factory=list)
    cap_binding: bool | None = None


def _qp_once(problem: DenseProblem, mean_floor: float, mean_equality: bool) -> OracleSolution:
    d = problem.layout.dim
    n_roe = problem.rows.shape[0] - 1
    roe_rows = problem.rows[:-1]
    mean_row = problem.rows[-1]
    levels = np.append(problem.levels[:-1], mean_floor)
    bounds_rows = np.eye(d)
    if mean_equality:
        a_eq, b_eq = mean_row[None, :], np.array([mean_floor])
        a_in = np.vstack([roe_rows, bounds_rows])
        b_in = np.concatenate([levels[:-1], np.zeros(d)])
    else:
        a_eq, b_eq = None, None
        a_in = np.vstack([roe_rows, mean_row[None, :], bounds_rows])
        b_in = np.concatenate([levels, np.zeros(d)])
    x0 = phase1_point(a_eq, b_eq, a_in, b_in, d, nonneg=False)
    res = solve_qp(problem.gram, np.zeros(d), a_eq, b_eq, a_in, b_in, x0=x0)

    if mean_equality:
        mean_mult = float(res.eq_multipliers[0])
        roe_mults = res.ineq_multipliers[:n_roe]
        nu = res.ineq_multipliers[n_roe:]
    else:
        roe_mults = res.ineq_multipliers[:n_roe]
        mean_mult = float(res.ineq_multipliers[n_roe])
        nu = res.ineq_multipliers[n_roe + 1 :]

    x = res.x
    mean_val = float(mean_row @ x)
    quad = float(x @ problem.gram @ x)
    variance = quad - mean_val**2 if problem.kind is Kind.SECOND_MOMENT else quad
    objective = quad
    return OracleSolution(
        form=Form.FIXED_MEAN if mean_equality else Form.MIN_VARIANCE,
        plan=from_coords(problem.tree, x),
        coords=x,
        roe_multipliers=np.asarray(roe_mults, dtype=float),
        mean_multiplier=mean_mult,
        bound_multipliers=from_coords(problem.tree, nu),
        mean_value=mean_val,
        variance_value=variance,
        objective=objective,
        mean_floor=mean_floor,
        n_pivots=res.n_pivots,
    )


def constraint_rows(
    tree: ScenarioTree, book: ContractBook, config: ConstraintConfig
) -> tuple[np.ndarray, np.ndarray]:
    """The constraint functionals as coordinate rows (profitability rows
    first, mean last) together with their levels.  Much cheaper than
    :func:`assemble` when no Gram matrix is needed."""
    reps = representers(tree, book, config)
    rows = np.array([to_coords(tree, r) for r in reps.all_rows()])
    return rows, config.levels(tree)


def max_attainable_mean(rows: np.ndarray, levels: np.ndarray) -> float | None:
    """Supremum of the mean functional over the profitability-and-sign
    constraints; None when unbounded."""
    res = linprog(
        c=-rows[-1],
        A_ub=-rows[:-1],
        b_ub=-levels[:-1],
        bounds=(0, None),
        method="highs",
    )
    if res.status == 3:
        return None
    if res.status == 2:
        raise Infeasible("constraint set is empty")
    if not res.success:
        raise Infeasible(f"mean-range probe failed: {res.message}")
    return float(-res.fun)


def dense_qp(
    tree: ScenarioTree,
    book: ContractBook,
    config: ConstraintConfig,
    form: str,
    max_dim: int = DENSE_MAX_DIM,
    bisect_tol: float = BISECTION_TOL,
) -> OracleSolution:
    """Solve one of the three problem forms by dense quadratic programming.

    The variance-maximum form runs a bisection over the mean floor of the
    minimum-variance form: the optimal variance is nondecreasing in the
    floor, and the search stops when it meets the cap in relative terms.
    When the cap stays slack across every attainable floor the solution at
    the largest attainable floor is returned with ``cap_binding=False``.
    """
    if form not in Form.ALL:
        raise InputError(f"unknown form {form!r}")
    if form == Form.FIXED_MEAN:
        problem = assemble(tree, book, config, Kind.SECOND_MOMENT, max_dim=max_dim)
        return _qp_once(problem, config.mean_floor, mean_equality=True)
    problem = assemble(tree, book, config, Kind.VARIANCE, max_dim=max_dim)
    if form == Form.MIN_VARIANCE:
        sol = _qp_once(problem, config.mean_floor, mean_equality=False)
        if config.variance_cap is not None:
            sol.cap_binding = sol.variance_value >= config.variance_cap * (1 - bisect_tol)
        return sol

    cap = config.variance_cap
    if cap is None:
        raise InputError("the variance-maximum form needs a variance cap")
    trace: list[tuple[float, float]] = []

    def variance_at(floor: float) -> OracleSolution:
        sol = _qp_once(problem, floor, mean_equality=False)
        trace.append((floor, sol.variance_value))
        return sol

    lo = 0.0
    sol_lo = variance_at(lo)
    if sol_lo.variance_value > cap * (1 + bisect_tol):
        raise Infeasible(
            f"minimal attainable variance {sol_lo.variance_value:.6g} exceeds cap {cap:.6g}"
        )
    e_max = max_attainable_mean(problem.rows, problem.levels)
    hi = max(1.0, 2 * abs(sol_lo.mean_value))
    sol_hi = None
    for _ in range(80):
        if e_max is not None and hi >= e_max:
            hi = e_max
            break
        sol_hi = variance_at(hi)
        if sol_hi.variance_value >= cap:
            break
        hi *= 2.0
    else:
        raise NumericalFailure("variance cap bracket not found")
    if e_max is not None and hi == e_max:
        probe = variance_at(e_max)
        if probe.variance_value < cap * (1 - bisect_tol):
            probe.form = Form.MAX_MEAN
            probe.cap_binding = False
            probe.bisection_trace = trace
            return probe

    best = sol_hi
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        sol_mid = variance_at(mid)
        if abs(sol_mid.variance_value - cap) <= bisect_tol * cap:
            best = sol_mid
            break
        if sol_mid.variance_value > cap:
            hi = mid
            best = sol_mid
        else:
            lo = mid
    else:
        best = variance_at(0.5 * (lo + hi))
    best.form = Form.MAX_MEAN
    best.cap_binding = True
    best.bisection_trace = trace
    return best
