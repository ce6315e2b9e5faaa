"""
Base small-world overlay for the resource discovery protocol.

Nodes sit on a ring, each linked to its k_near nearest ring neighbours,
plus n_far random long-range links per node.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import networkx as nx
import numpy as np

logger = logging.getLogger(__name__)

# --- Constants for Configuration ---
MAX_CONNECT_RETRIES = 32
DEFAULT_K_NEAR = 4
DEFAULT_N_FAR = 1


class TopologyError(ValueError):
    """Invalid overlay parameters or an overlay that cannot be used."""


@dataclass(frozen=True)
class OverlayGraph:
    n: int
    adjacency: tuple[tuple[int, ...], ...]
    seed: int

    def __post_init__(self):
        if self.n < 1 or len(self.adjacency) != self.n:
            raise TopologyError(f"adjacency must list exactly n={self.n} nodes")
        for i, neighbours in enumerate(self.adjacency):
            if i in neighbours:
                raise TopologyError(f"self-loop on node {i}")
            if len(set(neighbours)) != len(neighbours):
                raise TopologyError(f"duplicate edge on node {i}")
            for j in neighbours:
                if not 0 <= j < self.n or i not in self.adjacency[j]:
                    raise TopologyError(f"edge {i}-{j} is not symmetric")

    @classmethod
    def from_edges(cls, n: int, edges: Iterable[tuple[int, int]], seed: int = 0) -> "OverlayGraph":
        sets: list[set[int]] = [set() for _ in range(n)]
        for i, j in edges:
            sets[i].add(j)
            sets[j].add(i)
        return cls(n=n, adjacency=tuple(tuple(sorted(s)) for s in sets), seed=seed)

    @classmethod
    def from_networkx(cls, graph: nx.Graph, seed: int = 0) -> "OverlayGraph":
        return cls.from_edges(graph.number_of_nodes(), graph.edges(), seed=seed)

    def to_networkx(self) -> nx.Graph:
        graph = nx.Graph()
        graph.add_nodes_from(range(self.n))
        graph.add_edges_from(self.edges())
        return graph

    def edges(self) -> list[tuple[int, int]]:
        return [(i, j) for i in range(self.n) for j in self.adjacency[i] if i < j]

    def degree(self, node: int) -> int:
        return len(self.adjacency[node])

    def max_degree(self) -> int:
        return max((len(a) for a in self.adjacency), default=0)

    def mean_degree(self) -> float:
        return 2 * len(self.edges()) / self.n

    def is_connected(self) -> bool:
        seen = {0}
        frontier = [0]
        while frontier:
            node = frontier.pop()
            for j in self.adjacency[node]:
                if j not in seen:
                    seen.add(j)
                    frontier.append(j)
        return len(seen) == self.n


@dataclass(frozen=True)
class GraphStats:
    clustering: float
    avg_path: float
    diameter: int


def _ring_lattice(n: int, k_near: int) -> list[set[int]]:
    adjacency: list[set[int]] = [set() for _ in range(n)]
    for i in range(n):
        for step in range(1, k_near // 2 + 1):
            j = (i + step) % n
            if j != i:
                adjacency[i].add(j)
                adjacency[j].add(i)
    return adjacency


def _add_far_links(adjacency: list[set[int]], n_far: int, rng: np.random.Generator):
    n = len(adjacency)
    for i in range(n):
        for _ in range(n_far):
            candidates = [j for j in range(n) if j != i and j not in adjacency[i]]
            if not candidates:
                break
            j = candidates[int(rng.integers(len(candidates)))]
            adjacency[i].add(j)
            adjacency[j].add(i)


def build_small_world(n: int, k_near: int = DEFAULT_K_NEAR, n_far: int = DEFAULT_N_FAR,
                      seed: int = 0, max_retries: int = MAX_CONNECT_RETRIES) -> OverlayGraph:
    """
    Ring lattice with k_near/2 neighbours per side plus n_far random far
    links per node. Retries with derived seeds until the graph is connected.
    """
    if n < 2:
        raise TopologyError(f"n must be at least 2, got {n}")
    # n = 2 is the one-edge ring, where both sides reach the same neighbour
    if k_near < 2 or k_near % 2 != 0 or k_near > max(n - 1, 2):
        raise TopologyError(f"k_near must be even with 2 <= k_near < n, got {k_near}")
    if n_far < 0:
        raise TopologyError(f"n_far must be non-negative, got {n_far}")

    for attempt in range(max_retries + 1):
        rng = np.random.default_rng([seed, attempt])
        adjacency = _ring_lattice(n, k_near)
        _add_far_links(adjacency, n_far, rng)
        graph = OverlayGraph(n=n, adjacency=tuple(tuple(sorted(a)) for a in adjacency), seed=seed)
        if graph.is_connected():
            return graph
        logger.debug("overlay n=%d seed=%d attempt %d disconnected, retrying", n, seed, attempt)
    raise TopologyError(f"no connected overlay after {max_retries} retries (n={n}, seed={seed})")


def graph_stats(g: OverlayGraph) -> GraphStats:
    if not g.is_connected():
        raise TopologyError("graph_stats needs a connected graph")
    graph = g.to_networkx()
    if g.n == 1:
        return GraphStats(clustering=0.0, avg_path=0.0, diameter=0)
    return GraphStats(
        clustering=float(nx.average_clustering(graph)),
        avg_path=float(nx.average_shortest_path_length(graph)),
        diameter=int(nx.diameter(graph)),
    )


def random_graph_like(g: OverlayGraph, seed: int) -> nx.Graph:
    """Uniform random graph with the same node and edge counts as g."""
    return nx.gnm_random_graph(g.n, len(g.edges()), seed=seed)


def edge_list_text(g: OverlayGraph) -> str:
    return "".join(f"{i} {j}\n" for i, j in g.edges())


def write_edge_list(g: OverlayGraph, path) -> Path:
    path = Path(path)
    path.write_text(edge_list_text(g), encoding="utf-8")
    return path
