import math
import random

import pytest

from pertnav.graph import Scene


@pytest.fixture
def square_scene() -> Scene:
    """Unit square A-B-C-D with one diagonal A-C."""
    positions = {
        "A": (0.0, 0.0, 0.0),
        "B": (1.0, 0.0, 0.0),
        "C": (1.0, 1.0, 0.0),
        "D": (0.0, 1.0, 0.0),
    }
    edges = [("A", "B"), ("B", "C"), ("C", "D"), ("D", "A"), ("A", "C")]
    return Scene("s4", positions, edges)


@pytest.fixture
def line_scene() -> Scene:
    """Path graph X-Y-Z; every edge is a bridge."""
    positions = {"X": (0.0, 0.0, 0.0), "Y": (1.0, 0.0, 0.0), "Z": (2.0, 0.0, 0.0)}
    return Scene("line", positions, [("X", "Y"), ("Y", "Z")])


@pytest.fixture
def k4_scene() -> Scene:
    """Complete graph on the unit square."""
    positions = {
        "A": (0.0, 0.0, 0.0),
        "B": (1.0, 0.0, 0.0),
        "C": (1.0, 1.0, 0.0),
        "D": (0.0, 1.0, 0.0),
    }
    edges = [(a, b) for a in positions for b in positions if a < b]
    return Scene("k4", positions, edges)


def random_scene(rng: random.Random, n_nodes: int, scan: str = "rand") -> Scene:
    """Connected random scene for property tests (edges by proximity + a spanning chain)."""
    ids = [f"n{i:02d}" for i in range(n_nodes)]
    positions = {nid: (rng.uniform(0, 10), rng.uniform(0, 10), 0.0) for nid in ids}
    edges = set()
    order = ids[:]
    rng.shuffle(order)
    for a, b in zip(order, order[1:]):  # spanning chain keeps it connected
        edges.add((a, b) if a < b else (b, a))
    for i in range(n_nodes):
        for j in range(i + 1, n_nodes):
            if math.dist(positions[ids[i]][:2], positions[ids[j]][:2]) < 4.0 and rng.random() < 0.5:
                edges.add((ids[i], ids[j]))
    return Scene(scan, positions, sorted(edges))


def bfs_reachable(scene, src, dst, skip_edge=None):
    """Independent BFS oracle used to cross-check graph operations."""
    from pertnav.graph import edge_key

    seen = {src}
    stack = [src]
    while stack:
        u = stack.pop()
        if u == dst:
            return True
        for v in scene.neighbors(u):
            if skip_edge is not None and edge_key(u, v) == edge_key(*skip_edge):
                continue
            if v not in seen:
                seen.add(v)
                stack.append(v)
    return dst in seen


def enumerate_simple_paths(scene, a, b, skip_edge=None):
    """All simple paths a->b by exhaustive DFS (small scenes only)."""
    from pertnav.graph import edge_key

    out = []
    stack = [(a, [a])]
    while stack:
        u, path = stack.pop()
        if u == b:
            out.append(path)
            continue
        for v in scene.neighbors(u):
            if v in path:
                continue
            if skip_edge is not None and edge_key(u, v) == edge_key(*skip_edge):
                continue
            stack.append((v, path + [v]))
    return out
