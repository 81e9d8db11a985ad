"""Areal adjacency graphs and location-by-location distance matrices."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

EARTH_RADIUS_KM = 6371.0088

SOURCES = ("graph", "great-circle", "normalized")


class GraphError(ValueError):
    pass


@dataclass(frozen=True)
class SpatialGraph:
    """Undirected contiguity graph over labelled areal units.

    ``centroids`` holds (latitude, longitude) in degrees per node, or None
    where no centroid was supplied.
    """

    labels: tuple[str, ...]
    edges: frozenset[tuple[int, int]]
    centroids: tuple[tuple[float, float] | None, ...]

    @property
    def n_nodes(self) -> int:
        return len(self.labels)

    def index(self, label: str) -> int:
        try:
            return self.labels.index(label)
        except ValueError:
            raise GraphError(f"unknown node label {label!r}") from None

    def neighbors(self) -> list[list[int]]:
        adj: list[list[int]] = [[] for _ in self.labels]
        for a, b in sorted(self.edges):
            adj[a].append(b)
            adj[b].append(a)
        return adj

    def adjacency_matrix(self) -> np.ndarray:
        a = np.zeros((self.n_nodes, self.n_nodes), dtype=bool)
        for i, j in self.edges:
            a[i, j] = a[j, i] = True
        return a

    @property
    def has_centroids(self) -> bool:
        return all(c is not None for c in self.centroids)


@dataclass(frozen=True)
class DistanceMatrix:
    """Symmetric J x J distances with a tag recording their origin.

    Disconnected pairs in graph matrices hold ``np.inf``.
    """

    values: np.ndarray
    source: str
    labels: tuple[str, ...] | None = None

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise GraphError("distance matrix must be square")
        if self.source not in SOURCES:
            raise GraphError(f"unknown distance source {self.source!r}")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def size(self) -> int:
        return self.values.shape[0]

    def max_finite(self) -> float:
        finite = self.values[np.isfinite(self.values)]
        return float(finite.max()) if finite.size else 0.0


def build_graph(
    nodes: Sequence[str | tuple],
    edges: Iterable[tuple[str, str]],
) -> SpatialGraph:
    """Build a graph from node labels and label-pair edges.

    ``nodes`` entries are either a bare label or ``(label, lat, lon)`` with
    lat/lon possibly None. Duplicate and reversed edges collapse to one.
    """
    labels, centroids = [], []
    for node in nodes:
        if isinstance(node, str):
            label, lat, lon = node, None, None
        else:
            label, lat, lon = (tuple(node) + (None, None))[:3]
        labels.append(str(label))
        if lat is None or lon is None:
            centroids.append(None)
        else:
            centroids.append((float(lat), float(lon)))
    if len(set(labels)) != len(labels):
        raise GraphError("node labels must be unique")
    pos = {lab: k for k, lab in enumerate(labels)}
    edge_set = set()
    for a, b in edges:
        a, b = str(a), str(b)
        for lab in (a, b):
            if lab not in pos:
                raise GraphError(f"edge references unknown node {lab!r}")
        if a == b:
            raise GraphError(f"self-loop at {a!r}")
        i, j = pos[a], pos[b]
        edge_set.add((min(i, j), max(i, j)))
    return SpatialGraph(tuple(labels), frozenset(edge_set), tuple(centroids))


def _bfs_row(adj: list[list[int]], source: int, n: int) -> np.ndarray:
    dist = np.full(n, np.inf)
    dist[source] = 0
    queue = deque([source])
    while queue:
        u = queue.popleft()
        for v in adj[u]:
            if dist[v] == np.inf:
                dist[v] = dist[u] + 1
                queue.append(v)
    return dist


def graph_distance_matrix(graph: SpatialGraph) -> DistanceMatrix:
    """Hop-count shortest-path distances by one BFS per source node."""
    adj = graph.neighbors()
    n = graph.n_nodes
    values = np.vstack([_bfs_row(adj, s, n) for s in range(n)]) if n else np.zeros((0, 0))
    return DistanceMatrix(values, "graph", graph.labels)


def haversine(lat1, lon1, lat2, lon2, radius: float = EARTH_RADIUS_KM):
    """Great-circle distance in km between points given in degrees."""
    phi1, phi2 = np.radians(lat1), np.radians(lat2)
    dphi = phi2 - phi1
    dlmb = np.radians(np.asarray(lon2) - np.asarray(lon1))
    a = np.sin(dphi / 2) ** 2 + np.cos(phi1) * np.cos(phi2) * np.sin(dlmb / 2) ** 2
    return 2 * radius * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))


def great_circle_matrix(graph: SpatialGraph) -> DistanceMatrix:
    missing = [lab for lab, c in zip(graph.labels, graph.centroids) if c is None]
    if missing:
        raise GraphError(f"missing centroid for {missing[0]!r}")
    latlon = np.array(graph.centroids, dtype=float).reshape(-1, 2)
    lat, lon = latlon[:, 0], latlon[:, 1]
    d = haversine(lat[:, None], lon[:, None], lat[None, :], lon[None, :])
    d = (d + d.T) / 2
    np.fill_diagonal(d, 0.0)
    return DistanceMatrix(d, "great-circle", graph.labels)


def normalize_to_max(matrix: DistanceMatrix, target: float) -> DistanceMatrix:
    """Rescale finite entries so the largest equals ``target``."""
    if not target > 0:
        raise GraphError("target must be positive")
    top = matrix.max_finite()
    if top <= 0:
        raise GraphError("cannot normalize an all-zero matrix")
    v = np.array(matrix.values)
    finite = np.isfinite(v)
    at_max = finite & (v == top)
    v[finite] *= target / top
    v[at_max] = target
    return DistanceMatrix(v, "normalized", matrix.labels)
