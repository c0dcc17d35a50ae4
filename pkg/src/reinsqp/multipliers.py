"""Constraint multipliers by successive approximation.

The optimality system couples a linear solve in plan space with sign and
complementarity conditions on three multiplier families: one weight per
profitability period, one for the mean floor, and one nonnegativity
multiplier per plan coordinate.  The route implemented here eliminates the
plan: solving the governing form against every representer produces a
small Gram system whose sign-constrained solution yields the period and
mean weights, while the nonnegativity multipliers come from a nodewise
sign-constrained projection.

The ladder has three rungs: a deterministic approximation that replaces
every representer by its expectation, a first approximation that reuses
the deterministic nonnegativity multipliers inside the full Gram step, and
an optional fixed-point iteration of the projection cycle.  No rung is
claimed to converge; every result carries its verified optimality report
and the iteration records its residual history honestly.

Two problem forms are served.  The floor form (mean >= level, centered
operator, all weights signed) is the primary route; the target form
(mean == level, raw operator) frees the mean weight, which is eliminated
from the Gram step by one Schur complement.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import elimination, oracle
from .contracts import ContractBook, MomentTables, compute_moments
from .errors import (
    Infeasible,
    InfeasibleDeterministic,
    InputError,
    NumericalFailure,
    SingularPivot,
)
from .operators import Kind, Representers, apply, block_apply, representers
from .portfolio import ConstraintConfig, evaluate_constraints, mean_final, variance_final
from .qp import nonneg_qp, solve_qp
from .tree import AdaptedVariable, PortfolioProcess, ScenarioTree, inner_product, norm

#: default optimality tolerance
KKT_TOL = 1e-8
#: condition ceiling past which the representer Gram counts as singular
GRAM_COND_MAX = 1e12
#: relative growth below which a residual step still counts as monotone
RESIDUAL_JITTER = 1e-12


def _form_kind(mean_equality: bool) -> Kind:
    return Kind.SECOND_MOMENT if mean_equality else Kind.VARIANCE


@dataclass
class MultiplierSet:
    """One weight per profitability period, one for the mean floor, and a
    nonnegativity multiplier process."""

    roe: np.ndarray
    mean: float
    bounds: PortfolioProcess


class FormSolver:
    """Structured-first linear solves in one form, with dense fallback.

    The structured route fails only when a pivot is numerically singular at
    shift zero or its verified residual is too large; each such event falls
    back to one dense solve and is counted, so reports can say exactly how
    often the fast path was abandoned.
    """

    def __init__(
        self,
        tree: ScenarioTree,
        book: ContractBook,
        moments: MomentTables,
        config: ConstraintConfig,
        kind: Kind = Kind.VARIANCE,
    ):
        self.tree = tree
        self.book = book
        self.moments = moments
        self.config = config
        self.kind = kind
        self.fallbacks = 0
        self._dense = None
        try:
            self.coeffs = elimination.elimination_coefficients(moments, 0.0)
        except SingularPivot:
            self.coeffs = None

    def _dense_problem(self):
        if self._dense is None:
            self._dense = oracle.assemble(self.tree, self.book, self.config, self.kind)
        return self._dense

    def solve(self, rhs: PortfolioProcess) -> PortfolioProcess:
        if self.coeffs is not None:
            try:
                result = elimination.solve(
                    self.kind, self.tree, self.book, self.moments, 0.0, rhs,
                    coeffs=self.coeffs,
                )
                if result.residual_ok:
                    return result.plan
            except SingularPivot:
                pass
        self.fallbacks += 1
        plan, _ = oracle.dense_solve_linear(self._dense_problem(), rhs)
        return plan


@dataclass
class RepresenterGram:
    """The representer Gram system in the governing form's geometry.

    ``inverse_gram[t, s]`` is the pairing of representer t with the solved
    image of representer s (profitability rows first, mean last);
    ``gram`` its inverse, ridge-stabilized and flagged when the rows are
    numerically dependent.
    """

    solved: list[PortfolioProcess]
    inverse_gram: np.ndarray
    gram: np.ndarray
    cond: float
    near_singular: bool
    solver: FormSolver = field(repr=False)
    reps: Representers = field(repr=False)

    def r_vector(self, nu: PortfolioProcess) -> np.ndarray:
        """Pairing of every representer with the solved image of ``nu``."""
        w = self.solver.solve(nu)
        return np.array(
            [inner_product(self.solver.tree, row, w) for row in self.reps.all_rows()]
        )


def l_gram(
    tree: ScenarioTree,
    book: ContractBook,
    config: ConstraintConfig,
    moments: MomentTables | None = None,
    reps: Representers | None = None,
    solver: FormSolver | None = None,
    kind: Kind = Kind.VARIANCE,
) -> RepresenterGram:
    """Build the representer Gram system with one solve per row."""
    if moments is None:
        moments = compute_moments(tree, book)
    if reps is None:
        reps = representers(tree, book, config)
    if solver is None:
        solver = FormSolver(tree, book, moments, config, kind)
    rows = reps.all_rows()
    solved = [solver.solve(row) for row in rows]
    n = len(rows)
    inv_gram = np.empty((n, n))
    for t, row in enumerate(rows):
        for s in range(n):
            inv_gram[t, s] = inner_product(tree, row, solved[s])
    inv_gram = 0.5 * (inv_gram + inv_gram.T)
    cond = float(np.linalg.cond(inv_gram))
    near_singular = not np.isfinite(cond) or cond > GRAM_COND_MAX
    if near_singular:
        ridge = 1e-10 * max(float(np.trace(inv_gram)) / n, np.finfo(float).tiny)
        stabilized = inv_gram + ridge * np.eye(n)
    else:
        stabilized = inv_gram
    gram = np.linalg.inv(stabilized)
    gram = 0.5 * (gram + gram.T)
    return RepresenterGram(solved, inv_gram, gram, cond, near_singular, solver, reps)


def _stabilized_pairing(gram: RepresenterGram) -> np.ndarray:
    """Pairing matrix, with a tiny ridge when the rows are dependent."""
    li = gram.inverse_gram
    if gram.near_singular:
        n = li.shape[0]
        li = li + 1e-10 * max(float(np.trace(li)) / n, np.finfo(float).tiny) * np.eye(n)
    return li


def _multiplier_step(
    gram: RepresenterGram, r: np.ndarray, levels: np.ndarray, mean_equality: bool
) -> np.ndarray:
    """Sign-constrained multiplier update.

    Floor form: the small complementarity problem on the pairing matrix,
    driven by how far each pairing sits from its level; its primal is the
    multiplier vector and its dual the constraint slacks.  Target form: the
    mean weight is free, so it is eliminated by a Schur complement on the
    pairing matrix and recovered from the resulting equality.
    """
    li = _stabilized_pairing(gram)
    if not mean_equality:
        return nonneg_qp(li, levels - r).primal
    gap = r - levels
    roe, m = slice(0, li.shape[0] - 1), li.shape[0] - 1
    schur = li[roe, roe] - np.outer(li[roe, m], li[m, roe]) / li[m, m]
    q = gap[roe] - li[roe, m] * gap[m] / li[m, m]
    lam = nonneg_qp(0.5 * (schur + schur.T), -q).primal
    mean_w = -(gap[m] + li[m, roe] @ lam) / li[m, m]
    return np.append(lam, mean_w)


@dataclass
class DeterministicSolution:
    """Expectation-level approximation: constant stage positions and
    constant multipliers."""

    plan: PortfolioProcess
    stage_positions: np.ndarray
    multipliers: MultiplierSet


def deterministic_solution(
    tree: ScenarioTree,
    book: ContractBook,
    config: ConstraintConfig,
    moments: MomentTables | None = None,
    reps: Representers | None = None,
    mean_equality: bool = False,
) -> DeterministicSolution:
    """Solve the expectation-level problem: every representer is replaced by
    its expectation, making positions and multipliers constant per stage.

    The complementarity system is exactly the raw-form quadratic program
    over stage blocks, solved with the shared active-set engine.
    """
    if moments is None:
        moments = compute_moments(tree, book)
    if reps is None:
        reps = representers(tree, book, config)
    kmax = tree.last_issue
    nc = tree.n_contracts
    dim = (kmax + 1) * nc
    g = np.zeros((dim, dim))
    for k in range(kmax + 1):
        g[k * nc : (k + 1) * nc, k * nc : (k + 1) * nc] = moments.second_moment[k]

    rows = np.array(
        [
            np.concatenate(
                [np.asarray(tree.expectation(row.stage(k))) for k in range(kmax + 1)]
            )
            for row in reps.all_rows()
        ]
    )
    levels = config.levels(tree)
    n_rows = rows.shape[0]

    if mean_equality:
        a_eq, b_eq = rows[-1:], levels[-1:]
        a_in = np.vstack([rows[:-1], np.eye(dim)])
        b_in = np.concatenate([levels[:-1], np.zeros(dim)])
    else:
        a_eq, b_eq = None, None
        a_in = np.vstack([rows, np.eye(dim)])
        b_in = np.concatenate([levels, np.zeros(dim)])
    try:
        res = solve_qp(g, np.zeros(dim), a_eq=a_eq, b_eq=b_eq, a_in=a_in, b_in=b_in)
    except Infeasible as exc:
        raise InfeasibleDeterministic(str(exc)) from exc

    if mean_equality:
        roe = res.ineq_multipliers[: n_rows - 1]
        mean_mult = float(res.eq_multipliers[0])
        nu_flat = res.ineq_multipliers[n_rows - 1 :]
    else:
        roe = res.ineq_multipliers[: n_rows - 1]
        mean_mult = float(res.ineq_multipliers[n_rows - 1])
        nu_flat = res.ineq_multipliers[n_rows:]

    def broadcast(flat: np.ndarray) -> PortfolioProcess:
        arrays = []
        for k in range(kmax + 1):
            block = flat[k * nc : (k + 1) * nc]
            arrays.append(np.tile(block, (tree.n_nodes(k), 1)))
        return PortfolioProcess.from_arrays(tree, arrays)

    return DeterministicSolution(
        plan=broadcast(res.x),
        stage_positions=res.x,
        multipliers=MultiplierSet(
            np.asarray(roe, dtype=float), mean_mult, broadcast(nu_flat)
        ),
    )


def theta(
    tree: ScenarioTree,
    book: ContractBook,
    moments: MomentTables,
    reps: Representers,
    k: int,
    sign: int,
    roe_weights: np.ndarray,
    mean_weight: float,
    plan: PortfolioProcess,
    kind: Kind = Kind.VARIANCE,
) -> AdaptedVariable:
    """Nodewise sign-constrained projection at stage k.

    The argument collects the weighted representers and the off-diagonal
    couplings of the current plan; for the centered form it also carries
    the rank-one mean correction that turns the centered diagonal back into
    the raw one.  The raw second-moment matrix then splits it into a
    nonnegative position part (sign +1) and a complementary multiplier
    part (sign -1).
    """
    if sign not in (+1, -1):
        raise InputError(f"sign must be +1 or -1, got {sign}")
    arg = mean_weight * reps.mean.stage(k).values.copy()
    for t, w in enumerate(roe_weights):
        if w != 0.0:
            arg = arg + w * reps.roe[t].stage(k).values
    ma = moments.second_moment[k]
    if kind is Kind.VARIANCE:
        rank_one = ma - moments.covariance[k]
        stage_mean = tree.path_prob[k] @ plan.stage(k).values
        arg = arg + (rank_one @ stage_mean)[None, :]
    for l in range(tree.last_issue + 1):
        if l == k:
            continue
        arg = arg - block_apply(kind, tree, book, k, l, plan.stage(l)).values
    out = np.empty_like(arg)
    for v in range(arg.shape[0]):
        result = nonneg_qp(ma, arg[v])
        out[v] = result.primal if sign > 0 else result.dual
    return AdaptedVariable(k, out)


def _projection_cycle(
    tree: ScenarioTree,
    book: ContractBook,
    config: ConstraintConfig,
    moments: MomentTables,
    gram: RepresenterGram,
    nu: PortfolioProcess,
    mean_equality: bool,
):
    """One full update: multipliers from the Gram step, relaxed plan from a
    governing-form solve, then the nodewise projection split."""
    kind = gram.solver.kind
    levels = config.levels(tree)
    r = gram.r_vector(nu)
    weights = _multiplier_step(gram, r, levels, mean_equality)
    roe_w, mean_w = weights[:-1], float(weights[-1])
    rhs = gram.reps.combine(roe_w, mean_w) + nu
    relaxed = gram.solver.solve(rhs)
    plan_stages, nu_stages = [], []
    for k in range(tree.last_issue + 1):
        plan_stages.append(
            theta(tree, book, moments, gram.reps, k, +1, roe_w, mean_w, relaxed, kind)
        )
        nu_stages.append(
            theta(tree, book, moments, gram.reps, k, -1, roe_w, mean_w, relaxed, kind)
        )
    plan = PortfolioProcess(tree, plan_stages)
    nu_new = PortfolioProcess(tree, nu_stages)
    return MultiplierSet(roe_w, mean_w, nu_new), plan, relaxed


@dataclass
class FirstApproximation:
    """First full-information approximation and its ingredients."""

    plan: PortfolioProcess
    relaxed_plan: PortfolioProcess
    multipliers: MultiplierSet
    deterministic: DeterministicSolution
    gram: RepresenterGram


def first_approximation(
    tree: ScenarioTree,
    book: ContractBook,
    config: ConstraintConfig,
    moments: MomentTables | None = None,
    deterministic: DeterministicSolution | None = None,
    gram: RepresenterGram | None = None,
    mean_equality: bool = False,
) -> FirstApproximation:
    """Run the ladder once: deterministic multipliers seed the Gram step,
    a governing-form solve produces the relaxed plan, and the projection
    split restores signs."""
    if moments is None:
        moments = compute_moments(tree, book)
    if gram is None:
        gram = l_gram(tree, book, config, moments, kind=_form_kind(mean_equality))
    if deterministic is None:
        deterministic = deterministic_solution(
            tree, book, config, moments, gram.reps, mean_equality
        )
    mults, plan, relaxed = _projection_cycle(
        tree, book, config, moments, gram, deterministic.multipliers.bounds, mean_equality
    )
    return FirstApproximation(plan, relaxed, mults, deterministic, gram)


@dataclass
class KktReport:
    """Verified optimality residuals of a (plan, multipliers) pair.

    Stationarity is relative to the combined right-hand side; slack,
    complementarity, and sign terms are absolute, with each complementarity
    product normalized by its multiplier's size.
    """

    stationarity: float
    worst_infeasibility: float
    worst_complementarity: float
    worst_sign: float
    tol: float

    @property
    def total(self) -> float:
        return max(
            self.stationarity,
            self.worst_infeasibility,
            self.worst_complementarity,
            self.worst_sign,
        )

    @property
    def converged(self) -> bool:
        return self.total <= self.tol

    def as_dict(self) -> dict:
        return {
            "stationarity": self.stationarity,
            "worst_infeasibility": self.worst_infeasibility,
            "worst_complementarity": self.worst_complementarity,
            "worst_sign": self.worst_sign,
            "total": self.total,
            "tol": self.tol,
            "converged": self.converged,
        }


def kkt_verify(
    tree: ScenarioTree,
    book: ContractBook,
    config: ConstraintConfig,
    plan: PortfolioProcess,
    mults: MultiplierSet,
    kind: Kind = Kind.VARIANCE,
    mean_equality: bool = False,
    reps: Representers | None = None,
    tol: float = KKT_TOL,
) -> KktReport:
    """Check the full optimality system of a candidate pair from scratch.

    Every ingredient is recomputed through the tree calculus (operator
    application, constraint slacks), so the report is meaningful for
    candidates produced by any route, including the dense oracle.
    """
    if reps is None:
        reps = representers(tree, book, config)
    rhs = reps.combine(mults.roe, mults.mean) + mults.bounds
    image = apply(kind, tree, book, plan)
    scale = 1.0 + norm(tree, rhs)
    stationarity = norm(tree, image - rhs) / scale

    report = evaluate_constraints(tree, book, config, plan)
    infeas = max(
        float(np.max(-report.roe_slacks, initial=0.0)),
        (abs(report.mean_slack) if mean_equality else max(-report.mean_slack, 0.0)),
        max(-plan.min_value(), 0.0),
    )

    compl = 0.0
    for t, lam in enumerate(mults.roe):
        compl = max(compl, abs(lam * report.roe_slacks[t]) / (1.0 + abs(lam)))
    if not mean_equality:
        compl = max(
            compl, abs(mults.mean * report.mean_slack) / (1.0 + abs(mults.mean))
        )
    for k in range(tree.last_issue + 1):
        nu_k = mults.bounds.stage(k).values
        eta_k = plan.stage(k).values
        prods = np.abs(nu_k * eta_k) / (1.0 + np.abs(nu_k))
        if prods.size:
            compl = max(compl, float(prods.max()))

    sign = max(float(np.max(-mults.roe, initial=0.0)), max(-mults.bounds.min_value(), 0.0))
    if not mean_equality:
        sign = max(sign, max(-mults.mean, 0.0))

    return KktReport(stationarity, infeas, compl, sign, tol)


def assemble_solution(
    tree: ScenarioTree,
    book: ContractBook,
    config: ConstraintConfig,
    mults: MultiplierSet,
    kind: Kind = Kind.VARIANCE,
    moments: MomentTables | None = None,
    reps: Representers | None = None,
) -> PortfolioProcess:
    """Reconstruct the plan a multiplier set stands for: one structured
    solve of the chosen form against the combined representers."""
    if moments is None:
        moments = compute_moments(tree, book)
    if reps is None:
        reps = representers(tree, book, config)
    rhs = reps.combine(mults.roe, mults.mean) + mults.bounds
    try:
        result = elimination.solve(kind, tree, book, moments, 0.0, rhs)
        if result.residual_ok:
            return result.plan
    except SingularPivot:
        pass
    dense = oracle.assemble(tree, book, config, kind)
    plan, _ = oracle.dense_solve_linear(dense, rhs)
    return plan


@dataclass
class IterationResult:
    """Outcome of the fixed-point iteration with its honest history."""

    plan: PortfolioProcess
    relaxed_plan: PortfolioProcess
    multipliers: MultiplierSet
    report: KktReport
    history: list[float]
    iterations: int
    converged: bool
    non_monotone: bool
    near_singular: bool
    fallbacks: int
    deterministic: DeterministicSolution


def iterate(
    tree: ScenarioTree,
    book: ContractBook,
    config: ConstraintConfig,
    max_iter: int = 0,
    tol: float = KKT_TOL,
    moments: MomentTables | None = None,
    mean_equality: bool = False,
) -> IterationResult:
    """First approximation plus up to ``max_iter`` projection cycles.

    Each cycle feeds the latest nonnegativity multipliers back into the
    Gram step.  The residual history is recorded as computed; any material
    increase, or a residual that stops being finite, raises the
    non-monotone flag but does not stop the loop, and no convergence is
    claimed beyond what the final report shows.
    """
    if moments is None:
        moments = compute_moments(tree, book)
    kind = _form_kind(mean_equality)
    first = first_approximation(
        tree, book, config, moments, mean_equality=mean_equality
    )
    gram = first.gram
    plan, relaxed, mults = first.plan, first.relaxed_plan, first.multipliers
    report = kkt_verify(
        tree, book, config, plan, mults, kind, mean_equality, reps=gram.reps, tol=tol
    )
    history = [report.total]
    non_monotone = False
    done = 0
    for _ in range(max_iter):
        if report.converged:
            break
        mults, plan, relaxed = _projection_cycle(
            tree, book, config, moments, gram, mults.bounds, mean_equality
        )
        report = kkt_verify(
            tree, book, config, plan, mults, kind, mean_equality, reps=gram.reps, tol=tol
        )
        history.append(report.total)
        done += 1
        grew = history[-1] > history[-2] * (1.0 + RESIDUAL_JITTER)
        if grew or not np.isfinite(history[-1]):
            non_monotone = True
    return IterationResult(
        plan=plan,
        relaxed_plan=relaxed,
        multipliers=mults,
        report=report,
        history=history,
        iterations=done,
        converged=report.converged,
        non_monotone=non_monotone,
        near_singular=gram.near_singular,
        fallbacks=gram.solver.fallbacks,
        deterministic=first.deterministic,
    )


@dataclass
class MaxMeanResult:
    """Largest mean floor whose approximate solve respects the variance
    cap, with the solve at that floor and the evaluated floors."""

    result: IterationResult
    mean_floor: float
    cap_binding: bool
    trace: list[tuple[float, float]]


def iterate_max_mean(
    tree: ScenarioTree,
    book: ContractBook,
    config: ConstraintConfig,
    max_iter: int = 0,
    tol: float = KKT_TOL,
    bisect_tol: float = oracle.BISECTION_TOL,
) -> MaxMeanResult:
    """Mean-maximal form through the approximation ladder.

    Bisects the mean floor of the floor-form solve until the plan's
    variance meets the cap, mirroring the dense oracle's search but with
    the approximate plans.  Their variances need not be exactly monotone
    in the floor, so the returned floor is only as good as the recorded
    optimality reports; the trace keeps every (floor, variance) pair
    evaluated.
    """
    cap = config.variance_cap
    if cap is None:
        raise InputError("the mean-maximal form needs a variance cap")
    moments = compute_moments(tree, book)
    trace: list[tuple[float, float]] = []

    def solve_at(floor: float) -> tuple[IterationResult, float]:
        cfg = dataclasses.replace(config, mean_floor=floor, variance_cap=None)
        res = iterate(tree, book, cfg, max_iter=max_iter, tol=tol, moments=moments)
        var = variance_final(tree, book, res.plan)
        trace.append((floor, var))
        return res, var

    lo = 0.0
    res_lo, var_lo = solve_at(lo)
    if var_lo > cap * (1 + bisect_tol):
        raise Infeasible(
            f"minimal attainable variance {var_lo:.6g} exceeds cap {cap:.6g}"
        )
    rows, levels = oracle.constraint_rows(tree, book, config)
    e_max = oracle.max_attainable_mean(rows, levels)
    hi = max(1.0, 2 * abs(mean_final(tree, book, res_lo.plan)))
    res_hi = var_hi = None
    for _ in range(80):
        if e_max is not None and hi >= e_max:
            hi = e_max
            break
        res_hi, var_hi = solve_at(hi)
        if var_hi >= cap:
            break
        hi *= 2.0
    else:
        raise NumericalFailure("variance cap bracket not found")
    if e_max is not None and hi == e_max:
        res_probe, var_probe = solve_at(e_max)
        if var_probe < cap * (1 - bisect_tol):
            return MaxMeanResult(res_probe, e_max, False, trace)
        res_hi, var_hi = res_probe, var_probe

    best, best_floor = res_hi, hi
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        res_mid, var_mid = solve_at(mid)
        if abs(var_mid - cap) <= bisect_tol * cap:
            best, best_floor = res_mid, mid
            break
        if var_mid > cap:
            hi = mid
            best, best_floor = res_mid, mid
        else:
            lo = mid
    else:
        mid = 0.5 * (lo + hi)
        best, best_floor = solve_at(mid)[0], mid
    if best is None:
        best, best_floor = solve_at(hi)[0], hi
    return MaxMeanResult(best, best_floor, True, trace)
