"""The two quadratic-form operators and their representers.

The optimizer works with two symmetric positive operators on portfolio
processes: the raw second-moment form (final utility squared, kind
``second_moment``) and its centered version, the variance form (kind
``variance``).  Applying one to a plan means conditioning the product of
the plan's final utility with each generation's settled results back onto
the generation's issue-time information.

Linear functionals of the problem (expected final utility, expected
profitability growth) are realized in the same space by representer
processes, built here from conditional expectations of the contract book.

The dense matrices of both forms are assembled by direct leaf enumeration,
deliberately independent of the conditional-expectation route used by
``apply``, so the two can check each other.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .contracts import ContractBook
from .errors import InputError, NumericalFailure
from .portfolio import (
    ConstraintConfig,
    final_utility_rv,
    mean_final,
    utility_growth,
    utility_process,
)
from .tree import AdaptedVariable, PortfolioProcess, ScenarioTree, inner_product

#: default cap on the dense coordinate dimension
DENSE_MAX_DIM = 5000


class Kind(str, Enum):
    """Which quadratic form an operator routine should realize."""

    SECOND_MOMENT = "second_moment"
    VARIANCE = "variance"


def apply(
    kind: Kind, tree: ScenarioTree, book: ContractBook, plan: PortfolioProcess
) -> PortfolioProcess:
    """Apply the chosen form's operator to a plan.

    Stage k of the image is the issue-time conditional expectation of the
    plan's final utility (centered for the variance form) times the
    generation-k settled results.
    """
    final = final_utility_rv(tree, book, plan)
    weight = final.values
    if kind is Kind.VARIANCE:
        weight = weight - tree.expectation(final)
    stages = []
    for k in range(tree.last_issue + 1):
        u = book.final_utility(k).values
        prod = tree.adapted(tree.horizon, u * weight[:, None])
        stages.append(tree.conditional_expectation(prod, k))
    return PortfolioProcess(tree, stages)


def block_apply(
    kind: Kind,
    tree: ScenarioTree,
    book: ContractBook,
    k: int,
    l: int,
    x: AdaptedVariable,
) -> AdaptedVariable:
    """Apply the (k, l) block: the contribution of stage-l positions ``x``
    to the operator image at stage k."""
    if x.depth != l:
        raise InputError(f"stage-{l} block input has depth {x.depth}")
    ul = book.final_utility(l).values
    scalar = np.sum(ul * tree.lift(x, tree.horizon).values, axis=1)
    if kind is Kind.VARIANCE:
        scalar = scalar - float(tree.path_prob[tree.horizon] @ scalar)
    uk = book.final_utility(k).values
    prod = tree.adapted(tree.horizon, uk * scalar[:, None])
    return tree.conditional_expectation(prod, k)


@dataclass
class Representers:
    """Mean and profitability representer processes.

    ``roe[t]`` realizes the period-t profitability functional: its inner
    product with a plan equals expected utility growth over (t, t+1] minus
    the floor rate times expected accumulated utility at t.  ``mean``
    realizes expected final utility.
    """

    mean: PortfolioProcess
    roe: list[PortfolioProcess]

    def combine(self, roe_weights: np.ndarray, mean_weight: float) -> PortfolioProcess:
        """Weighted sum of all representers, mean last."""
        out = self.mean * float(mean_weight)
        for t, w in enumerate(roe_weights):
            if w != 0.0:
                out = out + self.roe[t] * float(w)
        return out

    def all_rows(self) -> list[PortfolioProcess]:
        """Profitability representers in period order, then the mean one."""
        return [*self.roe, self.mean]


def representers(
    tree: ScenarioTree,
    book: ContractBook,
    config: ConstraintConfig,
    self_check: int = 0,
    rng: np.random.Generator | None = None,
) -> Representers:
    """Build all representer processes from the contract book.

    The general conditional form is used throughout; no shortcut is taken
    for books whose settled results happen to be issue-time independent.
    With ``self_check`` > 0, the defining functional identities are verified
    against that many random plans and a failure raises.
    """
    config.check_horizon(tree)
    mean_stages = []
    for k in range(tree.last_issue + 1):
        mean_stages.append(tree.conditional_expectation(book.final_utility(k), k))
    mean_rep = PortfolioProcess(tree, mean_stages)

    roe_reps = []
    for t in range(tree.horizon):
        rate = float(config.roe_rates[t])
        stages = []
        for k in range(tree.last_issue + 1):
            if k > t:
                stages.append(tree.zeros(k, tree.n_contracts))
                continue
            nxt = book.utility(k, t + 1).values
            now = tree.lift(book.utility(k, t), t + 1).values
            diff = tree.adapted(t + 1, nxt - (1.0 + rate) * now)
            stages.append(tree.conditional_expectation(diff, k))
        roe_reps.append(PortfolioProcess(tree, stages))
    reps = Representers(mean_rep, roe_reps)

    if self_check > 0:
        rng = rng or np.random.default_rng(0)
        _verify_representers(tree, book, config, reps, self_check, rng)
    return reps


def _verify_representers(tree, book, config, reps, n_checks, rng):
    # the representers are only correct if their inner products reproduce the
    # functionals they stand for, so probe with random plans
    for _ in range(n_checks):
        plan = PortfolioProcess.from_arrays(
            tree,
            [
                rng.standard_normal((tree.n_nodes(k), tree.n_contracts))
                for k in range(tree.last_issue + 1)
            ],
        )
        scale = 1.0 + plan.max_abs()
        got = inner_product(tree, reps.mean, plan)
        want = mean_final(tree, book, plan)
        if abs(got - want) > 1e-10 * scale * 10:
            raise NumericalFailure(
                f"mean representer identity off by {abs(got - want):.3e}"
            )
        for t in range(tree.horizon):
            got = inner_product(tree, reps.roe[t], plan)
            growth = float(tree.expectation(utility_growth(tree, book, plan, t)))
            held = float(tree.expectation(utility_process(tree, book, plan, t)))
            want = growth - float(config.roe_rates[t]) * held
            if abs(got - want) > 1e-10 * scale * 10:
                raise NumericalFailure(
                    f"profitability representer {t} identity off by {abs(got - want):.3e}"
                )


# -- dense coordinates ------------------------------------------------------


@dataclass(frozen=True)
class CoordinateLayout:
    """Flat indexing of plan coordinates: stage-major, node, then contract."""

    offsets: tuple[int, ...]
    dim: int


def coordinate_layout(tree: ScenarioTree) -> CoordinateLayout:
    offsets = []
    total = 0
    for k in range(tree.last_issue + 1):
        offsets.append(total)
        total += tree.n_nodes(k) * tree.n_contracts
    return CoordinateLayout(tuple(offsets), total)


def dense_matrix(
    kind: Kind,
    tree: ScenarioTree,
    book: ContractBook,
    max_dim: int = DENSE_MAX_DIM,
) -> np.ndarray:
    """Assemble the chosen form's Gram matrix in probability-weighted
    coordinates, by leaf enumeration.

    Row (k, v, i) holds the final utility of the unit plan "one contract i
    at node v, issue time k", scaled by the square root of the node's path
    probability; the Gram matrix is then a single weighted product over
    leaves.  The weighting makes the matrix symmetric and makes plain
    Euclidean solves and eigendecompositions equivalent to the tree's own
    geometry.
    """
    layout = coordinate_layout(tree)
    if layout.dim > max_dim:
        raise InputError(f"dense dimension {layout.dim} exceeds cap {max_dim}")
    n_leaves = tree.n_nodes(tree.horizon)
    p_leaf = tree.path_prob[tree.horizon]

    rows = np.zeros((layout.dim, n_leaves))
    scale = np.zeros(layout.dim)
    leaf_range = np.arange(n_leaves)
    for k in range(tree.last_issue + 1):
        # row index of each leaf's depth-k ancestor
        anc = leaf_range
        for d in range(tree.horizon, k, -1):
            anc = tree.parent_row[d][anc]
        u = book.final_utility(k).values
        nk, nc = tree.n_nodes(k), tree.n_contracts
        base = layout.offsets[k]
        # scatter each leaf's settled utility into its ancestor's row, per contract
        block = np.zeros((nk * nc, n_leaves))
        for i in range(nc):
            block[anc * nc + i, leaf_range] = u[:, i]
        rows[base : base + nk * nc] = block
        scale[base : base + nk * nc] = np.repeat(np.sqrt(tree.path_prob[k]), nc)

    rows = rows / scale[:, None]
    weighted = rows * p_leaf[None, :]
    gram = weighted @ rows.T
    if kind is Kind.VARIANCE:
        means = weighted @ np.ones(n_leaves)
        gram = gram - np.outer(means, means)
    return 0.5 * (gram + gram.T)
