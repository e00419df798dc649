"""Immutable navigation connectivity graphs and metric path primitives.

A Scene is an undirected graph of named viewpoints with 3-D positions; edge
weights are the Euclidean distances between endpoint positions. All path
operations are pure functions, so scenes can be shared freely across workers.
"""
from __future__ import annotations

import math
from heapq import heappop, heappush
from typing import Iterable, Sequence

from .errors import DataError
from .fsio import read_json, write_json

NodeId = str
EdgeKey = tuple[NodeId, NodeId]
Path = list[NodeId]

# Tolerance for "these two path lengths are equal" decisions.
LENGTH_TOL = 1e-9


class NoPathError(DataError):
    pass


class UnknownNodeError(DataError):
    pass


class UnknownEdgeError(DataError):
    pass


class InvalidPathError(DataError):
    pass


class EmptySceneError(DataError):
    pass


def edge_key(a: NodeId, b: NodeId) -> EdgeKey:
    """Canonical undirected edge identifier (sorted endpoint pair)."""
    return (a, b) if a <= b else (b, a)


class Scene:
    """Undirected weighted navigation graph, immutable after construction.

    Neighbor iteration order is sorted by node id, so every traversal of the
    same scene is deterministic regardless of construction order.
    """

    def __init__(
        self,
        scan: str,
        positions: dict[NodeId, Sequence[float]],
        edges: Iterable[tuple[NodeId, NodeId]],
        landmarks: dict[NodeId, int] | None = None,
    ):
        self.scan = scan
        self._pos: dict[NodeId, tuple[float, float, float]] = {}
        for nid in sorted(positions):
            x, y, z = (float(c) for c in positions[nid])
            if not (math.isfinite(x) and math.isfinite(y) and math.isfinite(z)):
                raise DataError(f"non-finite position for node {nid!r}")
            self._pos[nid] = (x, y, z)

        adj: dict[NodeId, set[NodeId]] = {nid: set() for nid in self._pos}
        weights: dict[EdgeKey, float] = {}
        for a, b in edges:
            if a == b:
                raise DataError(f"self-loop on node {a!r}")
            if a not in self._pos or b not in self._pos:
                raise DataError(f"edge ({a!r}, {b!r}) references unknown node")
            w = euclidean(self._pos[a], self._pos[b])
            if w <= 0.0:
                raise DataError(f"zero-length edge ({a!r}, {b!r})")
            weights[edge_key(a, b)] = w
            adj[a].add(b)
            adj[b].add(a)
        self._adj: dict[NodeId, tuple[NodeId, ...]] = {
            nid: tuple(sorted(nbrs)) for nid, nbrs in adj.items()
        }
        self._weights = weights
        self.landmarks = dict(landmarks) if landmarks else None
        self._dist_cache: dict = {}
        self._view_cache: dict = {}
        self._avg_edge: float | None = None

    # -- topology ----------------------------------------------------------

    @property
    def nodes(self) -> tuple[NodeId, ...]:
        return tuple(self._pos)

    def __contains__(self, nid: NodeId) -> bool:
        return nid in self._pos

    def position(self, nid: NodeId) -> tuple[float, float, float]:
        try:
            return self._pos[nid]
        except KeyError:
            raise UnknownNodeError(f"unknown node {nid!r} in scene {self.scan!r}") from None

    def neighbors(self, nid: NodeId) -> tuple[NodeId, ...]:
        try:
            return self._adj[nid]
        except KeyError:
            raise UnknownNodeError(f"unknown node {nid!r} in scene {self.scan!r}") from None

    def has_edge(self, a: NodeId, b: NodeId) -> bool:
        return edge_key(a, b) in self._weights

    def edge_weight(self, a: NodeId, b: NodeId) -> float:
        try:
            return self._weights[edge_key(a, b)]
        except KeyError:
            raise UnknownEdgeError(f"no edge ({a!r}, {b!r}) in scene {self.scan!r}") from None

    def edges(self) -> tuple[EdgeKey, ...]:
        return tuple(sorted(self._weights))

    @property
    def n_edges(self) -> int:
        return len(self._weights)

    def base_scene(self) -> "Scene":
        return self


def euclidean(p: Sequence[float], q: Sequence[float]) -> float:
    return math.dist(p, q)


def straight_line_distance(scene, a: NodeId, b: NodeId) -> float:
    return euclidean(scene.position(a), scene.position(b))


# -- shortest paths ---------------------------------------------------------


def distances_from(scene, src: NodeId, excluded: EdgeKey | None = None) -> dict[NodeId, float]:
    """Dijkstra distances from src to every reachable node.

    Results are cached on the scene object, keyed by (src, excluded); scenes
    are immutable so the cache never goes stale.
    """
    if src not in scene:
        raise UnknownNodeError(f"unknown node {src!r}")
    key = (src, excluded)
    cached = scene._dist_cache.get(key)
    if cached is not None:
        return cached
    dist: dict[NodeId, float] = {src: 0.0}
    heap: list[tuple[float, NodeId]] = [(0.0, src)]
    done: set[NodeId] = set()
    while heap:
        d, u = heappop(heap)
        if u in done:
            continue
        done.add(u)
        for v in scene.neighbors(u):
            if excluded is not None and edge_key(u, v) == excluded:
                continue
            nd = d + scene.edge_weight(u, v)
            if nd < dist.get(v, math.inf):
                dist[v] = nd
                heappush(heap, (nd, v))
    scene._dist_cache[key] = dist
    return dist


def shortest_path(scene, a: NodeId, b: NodeId, excluded: EdgeKey | None = None) -> Path:
    """Minimum-weight path from a to b, optionally avoiding one edge.

    Ties between equally short paths are broken toward the lexicographically
    smallest node sequence, which keeps downstream sampling reproducible.
    """
    if a not in scene:
        raise UnknownNodeError(f"unknown node {a!r}")
    if b not in scene:
        raise UnknownNodeError(f"unknown node {b!r}")
    if a == b:
        return [a]
    # Distances toward b let us walk greedily from a: any neighbor lying on
    # some shortest path is "tight", and picking the smallest tight neighbor
    # at every hop yields the lexicographically smallest optimal sequence.
    dist = distances_from(scene, b, excluded)
    if a not in dist:
        raise NoPathError(f"{b!r} unreachable from {a!r}")
    path = [a]
    u = a
    while u != b:
        du = dist[u]
        nxt = None
        for v in scene.neighbors(u):
            if excluded is not None and edge_key(u, v) == excluded:
                continue
            dv = dist.get(v)
            if dv is None:
                continue
            if abs((scene.edge_weight(u, v) + dv) - du) <= LENGTH_TOL * max(1.0, du):
                nxt = v
                break
        assert nxt is not None, "tight edge must exist on a shortest path"
        path.append(nxt)
        u = nxt
    return path


def geodesic_distance(scene, a: NodeId, b: NodeId) -> float:
    if a not in scene:
        raise UnknownNodeError(f"unknown node {a!r}")
    if b not in scene:
        raise UnknownNodeError(f"unknown node {b!r}")
    d = distances_from(scene, a).get(b)
    if d is None:
        raise NoPathError(f"{b!r} unreachable from {a!r}")
    return d


def connected_after_deletion(scene, edge: tuple[NodeId, NodeId], src: NodeId, dst: NodeId) -> bool:
    """BFS reachability of dst from src with one edge removed (scene untouched)."""
    ek = edge_key(*edge)
    if not scene.has_edge(*ek):
        raise UnknownEdgeError(f"edge {edge!r} not in scene {scene.scan!r}")
    if src not in scene:
        raise UnknownNodeError(f"unknown node {src!r}")
    if dst not in scene:
        raise UnknownNodeError(f"unknown node {dst!r}")
    if src == dst:
        return True
    seen = {src}
    frontier = [src]
    while frontier:
        nxt = []
        for u in frontier:
            for v in scene.neighbors(u):
                if edge_key(u, v) == ek or v in seen:
                    continue
                if v == dst:
                    return True
                seen.add(v)
                nxt.append(v)
        frontier = nxt
    return False


def avg_neighbor_distance(scene) -> float:
    """Mean weight over the scene's distinct edges."""
    base = scene.base_scene()
    if base._avg_edge is None:
        if not base._weights:
            raise EmptySceneError(f"scene {base.scan!r} has no edges")
        base._avg_edge = sum(base._weights.values()) / len(base._weights)
    return base._avg_edge


def path_length(scene, path: Sequence[NodeId]) -> float:
    if not path:
        raise InvalidPathError("empty path")
    total = 0.0
    for a, b in zip(path, path[1:]):
        if not scene.has_edge(a, b):
            raise InvalidPathError(f"nodes {a!r} and {b!r} are not adjacent")
        total += scene.edge_weight(a, b)
    return total


def is_connected(scene) -> bool:
    nodes = scene.nodes
    if len(nodes) <= 1:
        return True
    seen = {nodes[0]}
    frontier = [nodes[0]]
    while frontier:
        nxt = []
        for u in frontier:
            for v in scene.neighbors(u):
                if v not in seen:
                    seen.add(v)
                    nxt.append(v)
        frontier = nxt
    return len(seen) == len(nodes)


# -- on-disk form -----------------------------------------------------------


def scene_to_dict(scene: Scene) -> dict:
    nodes = []
    for nid in scene.nodes:
        rec = {"id": nid, "pos": list(scene.position(nid))}
        if scene.landmarks is not None:
            rec["lm"] = scene.landmarks[nid]
        nodes.append(rec)
    return {
        "scan": scene.scan,
        "nodes": nodes,
        "edges": [list(e) for e in scene.edges()],
    }


def scene_from_dict(obj: dict) -> Scene:
    try:
        positions = {n["id"]: n["pos"] for n in obj["nodes"]}
        landmarks = None
        if obj["nodes"] and "lm" in obj["nodes"][0]:
            landmarks = {n["id"]: int(n["lm"]) for n in obj["nodes"]}
        edges = [tuple(e) for e in obj["edges"]]
        return Scene(obj["scan"], positions, edges, landmarks=landmarks)
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed scene record: {exc}") from exc


def save_scenes(path, scenes: Iterable[Scene]) -> None:
    write_json(path, [scene_to_dict(s) for s in scenes])


def load_scenes(path) -> dict[str, Scene]:
    scenes = {}
    for obj in read_json(path):
        scene = scene_from_dict(obj)
        scenes[scene.scan] = scene
    return scenes
