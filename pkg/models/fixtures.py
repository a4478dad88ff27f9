import logging
from typing import Any, Iterable, Optional

import networkx as nx
import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator, model_validator
from scipy import linalg

from core.distances import chernoff_distance, kl_distance
from core.model import Criterion, GaussianPair, ProblemInstance, SelectionMatrix, UncertaintyModel

logger = logging.getLogger(__name__)


class SimpleGraph(BaseModel):
    """
    Undirected graph without self-loops on vertices 1..n_vertices.

    Attributes:
        n_vertices (int): Number of vertices.
        edges (frozenset[tuple[int, int]]): Unordered edges stored as (low, high).
    """

    model_config = ConfigDict(frozen=True)

    n_vertices: int
    edges: frozenset[tuple[int, int]] = frozenset()

    @field_validator("edges", mode="before")
    @classmethod
    def normalize_edges(cls, value: Any) -> frozenset:
        edges = set()
        for u, v in value:
            if u == v:
                raise ValueError(f"self-loop at vertex {u}")
            edges.add((min(int(u), int(v)), max(int(u), int(v))))
        return frozenset(edges)

    @model_validator(mode="after")
    def check_vertices(self) -> "SimpleGraph":
        for u, v in self.edges:
            if u < 1 or v > self.n_vertices:
                raise ValueError(f"edge ({u}, {v}) outside [1, {self.n_vertices}]")
        return self

    @classmethod
    def complete(cls, n: int) -> "SimpleGraph":
        return cls(n_vertices=n, edges=[(u, v) for u in range(1, n + 1) for v in range(u + 1, n + 1)])

    @classmethod
    def path(cls, n: int) -> "SimpleGraph":
        return cls(n_vertices=n, edges=[(u, u + 1) for u in range(1, n)])

    @classmethod
    def from_networkx(cls, graph: nx.Graph) -> "SimpleGraph":
        """Relabels the nodes of graph to 1..n in sorted order."""
        labels = {node: k + 1 for k, node in enumerate(sorted(graph.nodes))}
        return cls(n_vertices=len(labels), edges=[(labels[u], labels[v]) for u, v in graph.edges])

    def to_networkx(self) -> nx.Graph:
        graph = nx.Graph()
        graph.add_nodes_from(range(1, self.n_vertices + 1))
        graph.add_edges_from(self.edges)
        return graph

    def has_clique(self, p: int) -> bool:
        """Brute-force check for a clique on p vertices."""
        if p <= 1:
            return p <= self.n_vertices
        return any(len(clique) >= p for clique in nx.find_cliques(self.to_networkx()))


def clique_matrix(graph: SimpleGraph, diagonal: Optional[int] = None) -> np.ndarray:
    """
    Strictly diagonally dominant matrix of a graph.

    Args:
        graph (SimpleGraph): The graph.
        diagonal (int, optional): Half the diagonal value; defaults to the number of
            vertices, giving 2n on the diagonal.

    Returns:
        np.ndarray: 2n on the diagonal, -1 for every edge, 0 elsewhere.
    """
    n = graph.n_vertices
    S = 2.0 * (diagonal if diagonal is not None else n) * np.eye(n)
    for u, v in graph.edges:
        S[u - 1, v - 1] = S[v - 1, u - 1] = -1.0
    return S


def clique_family_matrix(graph: SimpleGraph, n: int) -> np.ndarray:
    """Member of the p x p family with diagonal 2n and off-diagonal entries in {0, -1}."""
    return clique_matrix(graph, diagonal=n)


def sei(A: np.ndarray) -> float:
    """Sum of the entries of A^{-1}, for symmetric positive definite A."""
    ones = np.ones(A.shape[0])
    return float(ones @ linalg.solve(A, ones, assume_a="pos"))


def hardness_instance(graph: SimpleGraph, p: int) -> ProblemInstance:
    """
    Instance whose best p sensors reveal whether graph has a p-clique.

    Means 0 and 1, both covariances equal to clique_matrix(graph), exact means.
    The best KL value is 1/2 p / (2n - p + 1) exactly when a p-clique exists.
    """
    n = graph.n_vertices
    S = clique_matrix(graph)
    pair = GaussianPair(m0=np.zeros(n), m1=np.ones(n), S0=S, S1=S)
    return ProblemInstance(pair=pair, uncertainty=UncertaintyModel.exact(), p=p)


def clique_bound(n: int, p: int, criterion: Criterion = Criterion.KL) -> float:
    """Optimal value reached by a p-clique: p / (2n - p + 1) scaled by 1/2 (KL) or 1/8 (C)."""
    scale = 0.5 if Criterion(criterion) is Criterion.KL else 0.125
    return scale * p / (2 * n - p + 1)


def submodularity_counterexample(
    epsilon: float, criterion: Criterion = Criterion.KL
) -> tuple[float, float, float, float]:
    """
    Distances showing that the criterion is not submodular over sensor sets.

    Uses equal means, S0 = I_3 and S1 = I_3 + epsilon (h2 h3^T + h3 h2^T).

    Args:
        epsilon (float): Coupling in (0, 1).
        criterion (Criterion): KL or C.

    Returns:
        tuple[float, float, float, float]: Values for {1}, {1, 2}, {1, 3} and
            {1, 2, 3}; the first three are 0.
    """
    if not 0.0 < epsilon < 1.0:
        raise ValueError(f"epsilon must lie in (0, 1), got {epsilon}")
    S1 = np.eye(3)
    S1[1, 2] = S1[2, 1] = epsilon
    pair = GaussianPair(m0=np.zeros(3), m1=np.zeros(3), S0=np.eye(3), S1=S1)

    def value(indices: Iterable[int]) -> float:
        selection = SelectionMatrix(n=3, indices=list(indices))
        if Criterion(criterion) is Criterion.KL:
            return kl_distance(pair, selection)
        return chernoff_distance(pair, selection).value

    return tuple(value(indices) for indices in ((1,), (1, 2), (1, 3), (1, 2, 3)))
