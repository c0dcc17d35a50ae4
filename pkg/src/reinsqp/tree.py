"""Finite scenario trees and the calculus of adapted quantities on them.

A scenario tree realizes a filtered finite probability space: depth-t nodes
are the time-t information states, each node carries the conditional
probability of reaching it from its parent, and the leaves at the final depth
are the elementary scenarios.  Everything the optimizer touches (utilities,
portfolios, operator images, representers) is an adapted quantity: one value,
scalar or vector, per node of some depth.

The class below precomputes per-depth index arrays so that the three
workhorses (expectation, one-level conditional expectation, lifting a value
to descendants) are plain vectorized numpy operations.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, InputError

#: absolute tolerance for probability sums
PROB_TOL = 1e-9


@dataclass(frozen=True)
class NodeSpec:
    """Raw description of one tree node."""

    id: int
    parent: int | None
    depth: int
    prob: float


@dataclass
class ValidationReport:
    """Outcome of structural validation; ``problems`` is empty when ok."""

    ok: bool
    problems: list[str] = field(default_factory=list)

    def raise_if_failed(self) -> None:
        if not self.ok:
            raise InputError("invalid scenario tree: " + "; ".join(self.problems))


def validate_structure(
    n_contracts: int,
    last_issue: int,
    settlement_lag: int,
    nodes: list[NodeSpec],
) -> ValidationReport:
    """Check a raw node list against the tree invariants.

    All violations are collected and reported together rather than failing on
    the first one, so a malformed file produces one complete diagnosis.
    """
    problems: list[str] = []
    if n_contracts < 1:
        problems.append(f"n_contracts must be >= 1, got {n_contracts}")
    if last_issue < 0:
        problems.append(f"last_issue must be >= 0, got {last_issue}")
    if settlement_lag < 1:
        problems.append(f"settlement_lag must be >= 1, got {settlement_lag}")
    horizon = last_issue + settlement_lag

    ids = [n.id for n in nodes]
    if len(set(ids)) != len(ids):
        problems.append("node ids are not unique")
        return ValidationReport(False, problems)
    by_id = {n.id: n for n in nodes}

    roots = [n for n in nodes if n.parent is None]
    if len(roots) != 1:
        problems.append(f"expected exactly one root node, found {len(roots)}")
    else:
        root = roots[0]
        if root.depth != 0:
            problems.append(f"root node {root.id} has depth {root.depth}, expected 0")
        if abs(root.prob - 1.0) > PROB_TOL:
            problems.append(f"root node {root.id} has prob {root.prob}, expected 1")

    children: dict[int, list[NodeSpec]] = {n.id: [] for n in nodes}
    for n in nodes:
        if n.depth < 0 or n.depth > horizon:
            problems.append(f"node {n.id} has depth {n.depth} outside [0, {horizon}]")
        if n.parent is not None:
            if n.parent not in by_id:
                problems.append(f"node {n.id} references unknown parent {n.parent}")
                continue
            parent = by_id[n.parent]
            if parent.depth != n.depth - 1:
                problems.append(
                    f"node {n.id} at depth {n.depth} has parent {n.parent} "
                    f"at depth {parent.depth}"
                )
            children[n.parent].append(n)
        if not (n.prob > 0.0):
            problems.append(f"node {n.id} has nonpositive conditional prob {n.prob}")

    for n in nodes:
        kids = children[n.id]
        if n.depth < horizon:
            if not kids:
                problems.append(
                    f"node {n.id} at depth {n.depth} < horizon {horizon} has no children"
                )
            else:
                total = sum(c.prob for c in kids)
                if abs(total - 1.0) > PROB_TOL:
                    problems.append(
                        f"children of node {n.id} have prob sum {total!r}, expected 1"
                    )
        elif kids:
            problems.append(f"terminal node {n.id} at depth {n.depth} has children")

    return ValidationReport(not problems, problems)


@dataclass(frozen=True)
class AdaptedVariable:
    """One value per node at a fixed depth, in the tree's canonical node order.

    ``values`` has shape ``(n_nodes,)`` for scalar quantities or
    ``(n_nodes, m)`` for vector ones.
    """

    depth: int
    values: np.ndarray

    @property
    def is_vector(self) -> bool:
        return self.values.ndim == 2


class ScenarioTree:
    """A validated finite scenario tree with fast adapted-variable calculus.

    Use :meth:`build` to construct one from raw node specs; the constructor
    assumes they already passed :func:`validate_structure`.
    """

    def __init__(
        self,
        n_contracts: int,
        last_issue: int,
        settlement_lag: int,
        nodes: list[NodeSpec],
    ):
        self.n_contracts = n_contracts
        self.last_issue = last_issue
        self.settlement_lag = settlement_lag
        self.horizon = last_issue + settlement_lag
        self._specs = list(nodes)

        # canonical order: depth-major, then ascending node id
        self.node_ids: list[np.ndarray] = []
        self.cond_prob: list[np.ndarray] = []
        self.parent_row: list[np.ndarray] = []
        self.path_prob: list[np.ndarray] = []
        row_of: dict[int, int] = {}
        for d in range(self.horizon + 1):
            level = sorted((n for n in nodes if n.depth == d), key=lambda n: n.id)
            if not level:
                raise InputError(f"no nodes at depth {d}")
            self.node_ids.append(np.array([n.id for n in level], dtype=np.int64))
            self.cond_prob.append(np.array([n.prob for n in level], dtype=float))
            if d == 0:
                self.parent_row.append(np.zeros(len(level), dtype=np.int64))
                self.path_prob.append(np.ones(len(level)))
            else:
                rows = np.array([row_of[n.parent] for n in level], dtype=np.int64)
                self.parent_row.append(rows)
                self.path_prob.append(self.path_prob[d - 1][rows] * self.cond_prob[d])
            row_of.update({n.id: i for i, n in enumerate(level)})
        self._row_of = row_of
        self._depth_of = {n.id: n.depth for n in nodes}

    @classmethod
    def build(
        cls,
        n_contracts: int,
        last_issue: int,
        settlement_lag: int,
        nodes: list[NodeSpec],
    ) -> "ScenarioTree":
        validate_structure(n_contracts, last_issue, settlement_lag, nodes).raise_if_failed()
        return cls(n_contracts, last_issue, settlement_lag, nodes)

    def validate(self) -> ValidationReport:
        """Re-run structural validation on the stored node specs."""
        return validate_structure(
            self.n_contracts, self.last_issue, self.settlement_lag, self._specs
        )

    # -- indexing -----------------------------------------------------------

    def n_nodes(self, depth: int) -> int:
        return len(self.node_ids[depth])

    def node_row(self, depth: int, node_id: int) -> int:
        """Position of ``node_id`` in the canonical depth ordering."""
        row = self._row_of.get(node_id)
        if row is None or self._depth_of[node_id] != depth:
            raise InputError(f"node {node_id} is not at depth {depth}")
        return row

    def node_depth(self, node_id: int) -> int:
        depth = self._depth_of.get(node_id)
        if depth is None:
            raise InputError(f"unknown node id {node_id}")
        return depth

    def path_probability(self, depth: int, node_id: int) -> float:
        return float(self.path_prob[depth][self.node_row(depth, node_id)])

    # -- adapted-variable calculus -----------------------------------------

    def adapted(self, depth: int, values: np.ndarray) -> AdaptedVariable:
        values = np.asarray(values, dtype=float)
        if values.shape[0] != self.n_nodes(depth):
            raise DimensionMismatch(
                f"{values.shape[0]} values for {self.n_nodes(depth)} nodes at depth {depth}"
            )
        return AdaptedVariable(depth, values)

    def adapted_from_dict(
        self, depth: int, mapping: dict[int, float], n_components: int | None = None
    ) -> AdaptedVariable:
        """Build an adapted variable from a node-id keyed dict (exact domain)."""
        if set(mapping) != set(int(i) for i in self.node_ids[depth]):
            raise DimensionMismatch(f"mapping domain is not the depth-{depth} node set")
        shape = (self.n_nodes(depth),) if n_components is None else (
            self.n_nodes(depth),
            n_components,
        )
        out = np.zeros(shape)
        for node_id, value in mapping.items():
            out[self.node_row(depth, int(node_id))] = value
        return AdaptedVariable(depth, out)

    def zeros(self, depth: int, n_components: int | None = None) -> AdaptedVariable:
        shape = (self.n_nodes(depth),) if n_components is None else (
            self.n_nodes(depth),
            n_components,
        )
        return AdaptedVariable(depth, np.zeros(shape))

    def expectation(self, x: AdaptedVariable) -> float | np.ndarray:
        """Expectation under the path probabilities of ``x``'s depth."""
        p = self.path_prob[x.depth]
        if x.is_vector:
            return p @ x.values
        return float(p @ x.values)

    def conditional_expectation(self, x: AdaptedVariable, depth: int) -> AdaptedVariable:
        """Project ``x`` onto the coarser information at ``depth`` <= x.depth.

        Computed by repeated one-level averaging: the value at a node is the
        conditional-probability weighted sum over its children.
        """
        if depth > x.depth:
            raise DimensionMismatch(
                f"cannot condition depth-{x.depth} variable on finer depth {depth}"
            )
        values = x.values
        for d in range(x.depth, depth, -1):
            shape = (self.n_nodes(d - 1),) + values.shape[1:]
            out = np.zeros(shape)
            w = self.cond_prob[d]
            weighted = values * (w[:, None] if values.ndim == 2 else w)
            np.add.at(out, self.parent_row[d], weighted)
            values = out
        return AdaptedVariable(depth, values)

    def lift(self, x: AdaptedVariable, depth: int) -> AdaptedVariable:
        """Extend ``x`` to ``depth`` >= x.depth by copying along descendants."""
        if depth < x.depth:
            raise DimensionMismatch(
                f"cannot lift depth-{x.depth} variable down to depth {depth}"
            )
        values = x.values
        for d in range(x.depth + 1, depth + 1):
            values = values[self.parent_row[d]]
        return AdaptedVariable(depth, values)


class PortfolioProcess:
    """An adapted underwriting plan: one vector of positions per issue time.

    Stage ``k`` holds an ``(n_nodes(k), n_contracts)`` array: the volumes of
    each contract written at every depth-k node.
    """

    def __init__(self, tree: ScenarioTree, stages: list[AdaptedVariable]):
        if len(stages) != tree.last_issue + 1:
            raise DimensionMismatch(
                f"{len(stages)} stages for {tree.last_issue + 1} issue times"
            )
        for k, stage in enumerate(stages):
            if stage.depth != k:
                raise DimensionMismatch(f"stage {k} has depth {stage.depth}")
            if stage.values.shape != (tree.n_nodes(k), tree.n_contracts):
                raise DimensionMismatch(
                    f"stage {k} has shape {stage.values.shape}, expected "
                    f"({tree.n_nodes(k)}, {tree.n_contracts})"
                )
        self.tree = tree
        self.stages = stages

    @classmethod
    def zeros(cls, tree: ScenarioTree) -> "PortfolioProcess":
        return cls(
            tree,
            [tree.zeros(k, tree.n_contracts) for k in range(tree.last_issue + 1)],
        )

    @classmethod
    def from_arrays(cls, tree: ScenarioTree, arrays: list[np.ndarray]) -> "PortfolioProcess":
        return cls(tree, [tree.adapted(k, a) for k, a in enumerate(arrays)])

    def stage(self, k: int) -> AdaptedVariable:
        return self.stages[k]

    def copy(self) -> "PortfolioProcess":
        return PortfolioProcess(
            self.tree,
            [AdaptedVariable(s.depth, s.values.copy()) for s in self.stages],
        )

    def __add__(self, other: "PortfolioProcess") -> "PortfolioProcess":
        return PortfolioProcess(
            self.tree,
            [
                AdaptedVariable(a.depth, a.values + b.values)
                for a, b in zip(self.stages, other.stages)
            ],
        )

    def __sub__(self, other: "PortfolioProcess") -> "PortfolioProcess":
        return PortfolioProcess(
            self.tree,
            [
                AdaptedVariable(a.depth, a.values - b.values)
                for a, b in zip(self.stages, other.stages)
            ],
        )

    def __mul__(self, scalar: float) -> "PortfolioProcess":
        return PortfolioProcess(
            self.tree,
            [AdaptedVariable(s.depth, s.values * scalar) for s in self.stages],
        )

    __rmul__ = __mul__

    def min_value(self) -> float:
        return min(float(s.values.min()) for s in self.stages)

    def max_abs(self) -> float:
        return max(float(np.abs(s.values).max()) for s in self.stages)


def inner_product(tree: ScenarioTree, a: PortfolioProcess, b: PortfolioProcess) -> float:
    """The path-probability weighted inner product of two portfolio processes."""
    total = 0.0
    for k in range(tree.last_issue + 1):
        p = tree.path_prob[k]
        total += float(np.sum(p * np.sum(a.stage(k).values * b.stage(k).values, axis=1)))
    return total


def norm(tree: ScenarioTree, a: PortfolioProcess) -> float:
    return float(np.sqrt(max(inner_product(tree, a, a), 0.0)))
