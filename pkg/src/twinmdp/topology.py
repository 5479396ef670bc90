"""Directed propagation graph: shortest-path distances and hub scores.

Edges point in the direction events propagate (cause -> effect). All
queries are deterministic; the graph is immutable after construction.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import EmptyGraphNoEdges, IoFailure, MalformedRecord, UnknownEntity
from .trajectories import Entity, entity_from_json, entity_to_json


@dataclass(frozen=True)
class TopologyGraph:
    nodes: tuple[Entity, ...]
    edges: frozenset[tuple[Entity, Entity]]

    def __post_init__(self):
        if len(set(self.nodes)) != len(self.nodes):
            raise MalformedRecord("duplicate nodes in graph")
        node_set = set(self.nodes)
        for u, v in self.edges:
            if u == v:
                raise MalformedRecord(f"self-loop on {u}")
            if u not in node_set or v not in node_set:
                raise MalformedRecord(f"edge ({u}, {v}) references unknown node")

    def successors(self, e: Entity) -> list[Entity]:
        return sorted(v for u, v in self.edges if u == e)

    def predecessors(self, e: Entity) -> list[Entity]:
        return sorted(u for u, v in self.edges if v == e)

    def neighbors(self, e: Entity) -> list[Entity]:
        """Undirected neighborhood, deduplicated and sorted."""
        out = {v for u, v in self.edges if u == e}
        out |= {u for u, v in self.edges if v == e}
        return sorted(out)


def make_graph(nodes, edges) -> TopologyGraph:
    return TopologyGraph(nodes=tuple(nodes), edges=frozenset(tuple(e) for e in edges))


def shortest_distance(g: TopologyGraph, src: Entity, dst: Entity) -> int | None:
    """Directed shortest-path length in edges, or None if unreachable."""
    if src not in set(g.nodes):
        raise UnknownEntity(f"{src} not in graph")
    if dst not in set(g.nodes):
        raise UnknownEntity(f"{dst} not in graph")
    if src == dst:
        return 0
    adj: dict[Entity, list[Entity]] = {}
    for u, v in g.edges:
        adj.setdefault(u, []).append(v)
    dist = {src: 0}
    queue = deque([src])
    while queue:
        u = queue.popleft()
        for v in adj.get(u, ()):
            if v not in dist:
                dist[v] = dist[u] + 1
                if v == dst:
                    return dist[v]
                queue.append(v)
    return None


def all_distances_from(g: TopologyGraph, src: Entity) -> dict[Entity, int]:
    """BFS distances from src to every reachable node (src included, 0)."""
    if src not in set(g.nodes):
        raise UnknownEntity(f"{src} not in graph")
    adj: dict[Entity, list[Entity]] = {}
    for u, v in g.edges:
        adj.setdefault(u, []).append(v)
    dist = {src: 0}
    queue = deque([src])
    while queue:
        u = queue.popleft()
        for v in adj.get(u, ()):
            if v not in dist:
                dist[v] = dist[u] + 1
                queue.append(v)
    return dist


class DistanceIndex:
    """All-pairs directed distances, precomputed once per graph."""

    def __init__(self, g: TopologyGraph):
        self.graph = g
        self._table = {u: all_distances_from(g, u) for u in g.nodes}

    def distance(self, src: Entity, dst: Entity) -> int | None:
        try:
            row = self._table[src]
        except KeyError:
            raise UnknownEntity(f"{src} not in graph") from None
        if dst not in self._table:
            raise UnknownEntity(f"{dst} not in graph")
        return row.get(dst)

    def diameter(self) -> int:
        """Largest finite directed distance; 0 for an edgeless graph."""
        best = 0
        for row in self._table.values():
            if row:
                best = max(best, max(row.values()))
        return best


def graph_diameter(g: TopologyGraph) -> int:
    return DistanceIndex(g).diameter()


def hubs_scores(
    g: TopologyGraph, max_iter: int = 100, tol: float = 1e-10
) -> dict[Entity, float]:
    """Hub scores of the HITS fixed point, unit Euclidean norm.

    Alternating power iteration a <- E^T h, h <- E a with L2 normalization,
    stopping once successive hub vectors differ by less than tol.
    """
    if not g.edges:
        raise EmptyGraphNoEdges("hub scores need at least one edge")
    nodes = list(g.nodes)
    index = {e: i for i, e in enumerate(nodes)}
    n = len(nodes)
    E = np.zeros((n, n))
    for u, v in g.edges:
        E[index[u], index[v]] = 1.0
    h = np.ones(n) / np.sqrt(n)
    for _ in range(max_iter):
        a = E.T @ h
        h_new = E @ a
        norm = np.linalg.norm(h_new)
        if norm == 0.0:
            break
        h_new /= norm
        if np.linalg.norm(h_new - h) < tol:
            h = h_new
            break
        h = h_new
    return {e: float(h[index[e]]) for e in nodes}


# --- file format --------------------------------------------------------------

def save_graph(g: TopologyGraph, path: str | Path) -> None:
    try:
        Path(path).write_text(json.dumps(graph_to_json(g), sort_keys=True) + "\n")
    except OSError as exc:
        raise IoFailure(f"cannot write graph {path}: {exc}") from exc


def load_graph(path: str | Path) -> TopologyGraph:
    try:
        obj = json.loads(Path(path).read_text())
    except OSError as exc:
        raise IoFailure(f"cannot read graph {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise MalformedRecord(f"invalid graph file: {exc}") from exc
    return graph_from_json(obj)


def graph_to_json(g: TopologyGraph) -> dict:
    nodes = list(g.nodes)
    index = {e: i for i, e in enumerate(nodes)}
    return {
        "nodes": [entity_to_json(e) for e in nodes],
        "edges": sorted([index[u], index[v]] for u, v in g.edges),
    }


def graph_from_json(obj) -> TopologyGraph:
    nodes = [entity_from_json(e) for e in obj["nodes"]]
    edges = [(nodes[i], nodes[j]) for i, j in obj["edges"]]
    return make_graph(nodes, edges)
