"""Discrete structural causal models solved by exact enumeration.

The toolkit checks the causal argument behind dual-invariance training: with
a confounder N opening the backdoor path X <- N -> Y, the observational
P(Y | X) differs from P(Y | do(X)), and adjusting for N recovers the latter.
Every query enumerates the full joint, so graphs are capped at
``MAX_DAG_NODES`` variables of cardinality at most ``MAX_CARDINALITY``.
"""

import logging
from typing import Iterable, Mapping, Optional, Sequence

import networkx as nx
import numpy as np

from invtrain.exceptions import (
    CriterionViolatedError,
    InvalidDagError,
    InvalidQueryError,
    InvalidStateError,
    PositivityError,
    UnknownNodeError,
)
from invtrain.schemas import MAX_CARDINALITY, MAX_DAG_NODES, DagDocument

logger = logging.getLogger(__name__)

CPT_TOLERANCE = 1e-12
MASS_TOLERANCE = 1e-10


class Distribution:
    """Joint probability table over named discrete variables."""

    def __init__(self, variables: Sequence[str], table: np.ndarray):
        table = np.asarray(table, dtype=np.float64)
        if table.ndim != len(variables):
            raise ValueError(f"table has {table.ndim} axes for {len(variables)} variables")
        if np.any(table < 0):
            raise ValueError("probabilities must be nonnegative")
        if abs(table.sum() - 1.0) > MASS_TOLERANCE:
            raise ValueError(f"total mass {table.sum()} is not 1")
        self.variables = tuple(variables)
        self.table = table

    def __repr__(self) -> str:
        return f"Distribution({', '.join(self.variables)})"

    def axis(self, variable: str) -> int:
        try:
            return self.variables.index(variable)
        except ValueError as exc:
            raise UnknownNodeError(f"{variable} is not a variable of {self}") from exc

    def marginalize(self, keep: Sequence[str]) -> "Distribution":
        """Sum out every variable not in ``keep``; axes follow the order of ``keep``."""
        keep = list(keep)
        axes = [self.axis(v) for v in keep]
        dropped = tuple(i for i in range(len(self.variables)) if i not in axes)
        reduced = self.table.sum(axis=dropped)
        remaining = [i for i in range(len(self.variables)) if i in axes]
        order = [remaining.index(a) for a in axes]
        return Distribution(keep, np.transpose(reduced, order) if order else reduced)

    def condition(self, variable: str, state: int) -> "Distribution":
        """Distribution of the other variables given ``variable == state``."""
        axis = self.axis(variable)
        if not 0 <= state < self.table.shape[axis]:
            raise InvalidStateError(f"state {state} is invalid for {variable}")
        sliced = np.take(self.table, state, axis=axis)
        mass = sliced.sum()
        if mass <= 0:
            raise PositivityError(f"P({variable}={state}) is zero")
        rest = [v for v in self.variables if v != variable]
        return Distribution(rest, sliced / mass)

    def probabilities(self) -> np.ndarray:
        return self.table.copy()


class CausalDag:
    """Acyclic graph of discrete variables with one conditional probability table per node.

    The input graph is never mutated; :meth:`mutilate` builds a new DAG.
    """

    def __init__(
        self,
        cardinalities: Mapping[str, int],
        edges: Iterable[tuple[str, str]],
        cpts: Mapping[str, object],
    ):
        if len(cardinalities) > MAX_DAG_NODES:
            raise InvalidDagError(f"at most {MAX_DAG_NODES} nodes are supported")
        self.graph = nx.DiGraph()
        for name, cardinality in cardinalities.items():
            if not 1 <= cardinality <= MAX_CARDINALITY:
                raise InvalidDagError(f"cardinality of {name} must lie in [1, {MAX_CARDINALITY}]")
            self.graph.add_node(name, cardinality=int(cardinality))

        self._parents: dict[str, list[str]] = {name: [] for name in cardinalities}
        for parent, child in edges:
            if parent not in cardinalities or child not in cardinalities:
                raise InvalidDagError(f"edge {parent}->{child} names an undeclared node")
            if self.graph.has_edge(parent, child):
                raise InvalidDagError(f"duplicate edge {parent}->{child}")
            self.graph.add_edge(parent, child)
            self._parents[child].append(parent)
        if not nx.is_directed_acyclic_graph(self.graph):
            raise InvalidDagError("graph contains a cycle")

        self._cpts: dict[str, np.ndarray] = {}
        for name in cardinalities:
            if name not in cpts:
                raise InvalidDagError(f"missing CPT for {name}")
            self._cpts[name] = self._validated_cpt(name, cpts[name])

    def _validated_cpt(self, name: str, raw) -> np.ndarray:
        try:
            table = np.array(raw, dtype=np.float64)
        except ValueError as exc:
            raise InvalidDagError(f"CPT of {name} is not a rectangular array") from exc
        expected = tuple(self.cardinality(p) for p in self._parents[name]) + (self.cardinality(name),)
        if table.shape != expected:
            raise InvalidDagError(f"CPT of {name} has shape {table.shape}, expected {expected}")
        if np.any(table < 0):
            raise InvalidDagError(f"CPT of {name} has negative entries")
        if np.any(np.abs(table.sum(axis=-1) - 1.0) > CPT_TOLERANCE):
            raise InvalidDagError(f"CPT rows of {name} must sum to 1")
        table.setflags(write=False)
        return table

    @classmethod
    def from_document(cls, document: DagDocument) -> "CausalDag":
        return cls(
            {node.name: node.cardinality for node in document.nodes},
            [tuple(edge) for edge in document.edges],
            document.cpts,
        )

    def to_document(self) -> DagDocument:
        return DagDocument(
            nodes=[{"name": n, "cardinality": self.cardinality(n)} for n in self.nodes],
            edges=list(self.edges),
            cpts={n: self._cpts[n].tolist() for n in self.nodes},
        )

    @property
    def nodes(self) -> list[str]:
        return list(self.graph.nodes)

    @property
    def edges(self) -> list[tuple[str, str]]:
        return [(p, child) for child in self.nodes for p in self._parents[child]]

    def require(self, *names: str) -> None:
        for name in names:
            if name not in self.graph:
                raise UnknownNodeError(f"unknown node {name!r}")

    def cardinality(self, name: str) -> int:
        self.require(name)
        return self.graph.nodes[name]["cardinality"]

    def parents(self, name: str) -> list[str]:
        self.require(name)
        return list(self._parents[name])

    def cpt(self, name: str) -> np.ndarray:
        self.require(name)
        return self._cpts[name]

    def descendants(self, name: str) -> set[str]:
        self.require(name)
        return nx.descendants(self.graph, name)

    def mutilate(self, x: str, value: int) -> "CausalDag":
        """do(x = value): drop the arrows into x and pin x to ``value``."""
        self.require(x)
        if not 0 <= value < self.cardinality(x):
            raise InvalidStateError(f"state {value} is invalid for {x}")
        pinned = np.zeros(self.cardinality(x))
        pinned[value] = 1.0
        cpts = {n: (pinned if n == x else self._cpts[n]) for n in self.nodes}
        edges = [(p, c) for p, c in self.edges if c != x]
        return CausalDag({n: self.cardinality(n) for n in self.nodes}, edges, cpts)


def _without_edges_into(g: CausalDag, x: str) -> nx.DiGraph:
    graph = g.graph.copy()
    graph.remove_edges_from(list(graph.in_edges(x)))
    return graph


def _without_edges_out_of(g: CausalDag, x: str) -> nx.DiGraph:
    graph = g.graph.copy()
    graph.remove_edges_from(list(graph.out_edges(x)))
    return graph


def joint(g: CausalDag) -> Distribution:
    """Exact observational joint as the product of every CPT."""
    nodes = g.nodes
    index = {name: i for i, name in enumerate(nodes)}
    every_axis = list(range(len(nodes)))
    table = np.ones([g.cardinality(n) for n in nodes])
    for name in nodes:
        cpt_axes = [index[p] for p in g.parents(name)] + [index[name]]
        table = np.einsum(table, every_axis, g.cpt(name), cpt_axes, every_axis)
    return Distribution(nodes, table)


def d_separated(g: CausalDag, x: str, y: str, z: Iterable[str]) -> bool:
    """True iff every path between x and y is blocked by z (chain, fork and collider rules)."""
    z = set(z)
    g.require(x, y, *z)
    if x == y or x in z or y in z:
        raise InvalidQueryError("d-separation needs distinct x and y outside the conditioning set")
    return nx.is_d_separator(g.graph, {x}, {y}, z)


def backdoor_criterion(g: CausalDag, x: str, y: str, z: Iterable[str]) -> bool:
    """True iff z has no descendant of x and blocks every path into x."""
    z = set(z)
    g.require(x, y, *z)
    if x == y:
        raise InvalidQueryError("treatment and outcome must differ")
    if x in z or y in z:
        raise InvalidQueryError("the adjustment set cannot contain the treatment or the outcome")
    if z & g.descendants(x):
        return False
    return nx.is_d_separator(_without_edges_out_of(g, x), {x}, {y}, z)


def interventional_oracle(g: CausalDag, x: str, value: int, y: str) -> Distribution:
    """Exact P(y | do(x = value)) from the mutilated graph."""
    g.require(x, y)
    return joint(g.mutilate(x, value)).marginalize([y])


def observational_conditional(g: CausalDag, x: str, value: int, y: str) -> Distribution:
    """Unadjusted P(y | x = value)."""
    g.require(x, y)
    if x == y:
        raise InvalidQueryError("treatment and outcome must differ")
    if not 0 <= value < g.cardinality(x):
        raise InvalidStateError(f"state {value} is invalid for {x}")
    return joint(g).marginalize([x, y]).condition(x, value)


def backdoor_adjust(g: CausalDag, x: str, value: int, y: str, z: Iterable[str]) -> Distribution:
    """Sum over z of P(y | x = value, z) P(z), computed from the observational joint.

    Refuses with CriterionViolatedError rather than return a biased estimate.
    """
    z = list(dict.fromkeys(z))
    if not backdoor_criterion(g, x, y, z):
        raise CriterionViolatedError(f"{{{', '.join(z)}}} does not satisfy the backdoor criterion for ({x}, {y})")
    if not 0 <= value < g.cardinality(x):
        raise InvalidStateError(f"state {value} is invalid for {x}")

    table = joint(g).marginalize([x, y, *z]).table
    numerator = table[value]
    stratum = numerator.sum(axis=0)
    p_z = table.sum(axis=(0, 1))
    if np.any((stratum <= 0) & (p_z > 0)):
        raise PositivityError(f"P({x}={value}, z) is zero for a stratum with positive mass")
    with np.errstate(invalid="ignore", divide="ignore"):
        conditional = np.where(stratum > 0, numerator / np.where(stratum > 0, stratum, 1.0), 0.0)
    adjusted = (conditional * p_z).reshape(numerator.shape[0], -1).sum(axis=1)
    return Distribution([y], adjusted)


def is_instrument(g: CausalDag, z: str, x: str, y: str) -> bool:
    """z is d-connected to x, and d-separated from y once the arrows into x are removed."""
    g.require(z, x, y)
    if len({z, x, y}) != 3:
        raise InvalidQueryError("instrument, treatment and outcome must be distinct")
    relevant = not nx.is_d_separator(g.graph, {z}, {x}, set())
    excluded = nx.is_d_separator(_without_edges_into(g, x), {z}, {y}, set())
    return relevant and excluded


def confounding_gap(g: CausalDag, x: str, y: str) -> float:
    """max over x and y states of |P(y | x) - P(y | do(x))|."""
    gap = 0.0
    for value in range(g.cardinality(x)):
        observed = observational_conditional(g, x, value, y).table
        intervened = interventional_oracle(g, x, value, y).table
        gap = max(gap, float(np.max(np.abs(observed - intervened))))
    return gap


def conditional_mutual_information(dist: Distribution, x: str, y: str, z: Iterable[str] = ()) -> float:
    """I(x; y | z) in nats, from an exact table."""
    z = list(z)
    table = dist.marginalize([x, y, *z]).table
    p_xz = table.sum(axis=1, keepdims=True)
    p_yz = table.sum(axis=0, keepdims=True)
    p_z = table.sum(axis=(0, 1), keepdims=True)
    positive = table > 0
    ratio = np.ones_like(table)
    ratio[positive] = (table * p_z)[positive] / (p_xz * p_yz)[positive]
    return float(np.sum(table[positive] * np.log(ratio[positive])))


def random_dag(
    num_nodes: int,
    rng: np.random.Generator,
    edge_probability: float = 0.5,
    cardinality: int = 2,
) -> CausalDag:
    """Random DAG over nodes V0..V{n-1} with strictly positive Dirichlet CPTs."""
    names = [f"V{i}" for i in range(num_nodes)]
    order = rng.permutation(num_nodes)
    edges = [
        (names[order[i]], names[order[j]])
        for i in range(num_nodes)
        for j in range(i + 1, num_nodes)
        if rng.random() < edge_probability
    ]
    parents = {name: [p for p, c in edges if c == name] for name in names}
    cpts = {}
    for name in names:
        shape = (cardinality,) * len(parents[name])
        raw = rng.dirichlet(np.ones(cardinality), size=shape) if shape else rng.dirichlet(np.ones(cardinality))
        mixed = 0.9 * raw + 0.1 / cardinality
        cpts[name] = mixed / mixed.sum(axis=-1, keepdims=True)
    return CausalDag({name: cardinality for name in names}, edges, cpts)


def confounded_chip_graph(confound_strength: float, num_classes: int = 2, smoothing: float = 0.01) -> CausalDag:
    """The target/feature/noise/label graph that the synthetic chips realize.

    A (target attributes) and N (clutter environment) both shape the features X;
    N also drives the label through the class-environment correlation of a small
    training set, with ``confound_strength`` of the label mass following N.
    """
    if not 0.0 <= confound_strength <= 1.0:
        raise InvalidQueryError("confound_strength must lie in [0, 1]")
    c = num_classes
    eye = np.eye(c)
    uniform = np.full(c, 1.0 / c)

    def smooth(table: np.ndarray) -> np.ndarray:
        table = (1.0 - smoothing) * table + smoothing / c
        return table / table.sum(axis=-1, keepdims=True)

    features = smooth(0.8 * eye[:, None, :] + 0.2 * eye[None, :, :])
    labels = smooth((1.0 - confound_strength) * eye[:, None, :] + confound_strength * eye[None, :, :])
    return CausalDag(
        {"A": c, "N": c, "X": c, "Y": c},
        [("A", "X"), ("N", "X"), ("X", "Y"), ("N", "Y")],
        {"A": uniform, "N": uniform, "X": features, "Y": labels},
    )


def check_report(
    g: CausalDag, treatment: str, outcome: str, adjust: Sequence[str], value: Optional[int] = None
) -> dict:
    """Everything ``scm-check`` prints, as plain data."""
    adjust = list(adjust)
    satisfied = backdoor_criterion(g, treatment, outcome, adjust)
    values = range(g.cardinality(treatment)) if value is None else [value]
    states = []
    for state in values:
        adjusted = backdoor_adjust(g, treatment, state, outcome, adjust).table.tolist() if satisfied else None
        states.append(
            {
                "value": state,
                "adjusted": adjusted,
                "interventional": interventional_oracle(g, treatment, state, outcome).table.tolist(),
                "observational": observational_conditional(g, treatment, state, outcome).table.tolist(),
            }
        )
    if not satisfied:
        logger.info("adjustment set %s fails the backdoor criterion for (%s, %s)", adjust, treatment, outcome)
    return {
        "treatment": treatment,
        "outcome": outcome,
        "adjust": adjust,
        "backdoor_criterion": satisfied,
        "confounding_gap": confounding_gap(g, treatment, outcome),
        "states": states,
    }
