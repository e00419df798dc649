import json
import math
import random

import pytest

from pertnav.errors import DataError
from pertnav.graph import (
    EmptySceneError,
    InvalidPathError,
    NoPathError,
    Scene,
    UnknownEdgeError,
    avg_neighbor_distance,
    connected_after_deletion,
    edge_key,
    geodesic_distance,
    is_connected,
    path_length,
    scene_from_dict,
    scene_to_dict,
    shortest_path,
)

from .conftest import bfs_reachable, enumerate_simple_paths, random_scene

SQRT2 = math.sqrt(2.0)


class TestShortestPath:
    def test_identity(self, square_scene):
        assert shortest_path(square_scene, "A", "A") == ["A"]
        assert geodesic_distance(square_scene, "A", "A") == 0.0

    def test_excluded_edge_forces_detour(self, square_scene):
        path = shortest_path(square_scene, "A", "B", excluded=edge_key("A", "B"))
        assert path == ["A", "C", "B"]
        assert path_length(square_scene, path) == pytest.approx(1.0 + SQRT2, abs=1e-9)

    def test_disconnected_raises(self):
        scene = Scene(
            "two",
            {"A": (0, 0, 0), "B": (1, 0, 0), "C": (5, 0, 0), "D": (6, 0, 0)},
            [("A", "B"), ("C", "D")],
        )
        with pytest.raises(NoPathError):
            shortest_path(scene, "A", "C")
        with pytest.raises(NoPathError):
            geodesic_distance(scene, "A", "D")

    def test_square_distances(self, square_scene):
        assert geodesic_distance(square_scene, "A", "C") == pytest.approx(SQRT2, abs=1e-9)
        assert geodesic_distance(square_scene, "A", "B") == pytest.approx(1.0, abs=1e-9)

    def test_symmetry_and_optimality_on_random_scenes(self):
        rng = random.Random(11)
        for trial in range(12):
            scene = random_scene(rng, rng.randint(4, 10))
            nodes = scene.nodes
            for a in nodes:
                for b in nodes:
                    d_ab = geodesic_distance(scene, a, b)
                    d_ba = geodesic_distance(scene, b, a)
                    assert d_ab == pytest.approx(d_ba, abs=1e-9)
                    # oracle: no enumerable simple path beats Dijkstra
                    best = min(
                        path_length(scene, p) for p in enumerate_simple_paths(scene, a, b)
                    )
                    assert d_ab == pytest.approx(best, abs=1e-9)

    def test_lexicographic_tie_break(self):
        # two equal-length routes M->A->N and M->B->N; A wins
        scene = Scene(
            "tie",
            {
                "M": (0, 0, 0),
                "A": (1, 1, 0),
                "B": (1, -1, 0),
                "N": (2, 0, 0),
            },
            [("M", "A"), ("A", "N"), ("M", "B"), ("B", "N")],
        )
        assert shortest_path(scene, "M", "N") == ["M", "A", "N"]


class TestConnectivity:
    def test_square_cases(self, square_scene):
        assert connected_after_deletion(square_scene, ("A", "B"), "A", "C")
        assert connected_after_deletion(square_scene, ("A", "C"), "A", "C")

    def test_bridge_in_tree(self, line_scene):
        assert not connected_after_deletion(line_scene, ("X", "Y"), "X", "Z")

    def test_unknown_edge(self, square_scene):
        with pytest.raises(UnknownEdgeError):
            connected_after_deletion(square_scene, ("B", "D"), "A", "C")

    def test_matches_bfs_oracle_on_random_scenes(self):
        rng = random.Random(5)
        for trial in range(20):
            scene = random_scene(rng, rng.randint(4, 30))
            nodes = scene.nodes
            for edge in scene.edges():
                src = nodes[rng.randrange(len(nodes))]
                dst = nodes[rng.randrange(len(nodes))]
                got = connected_after_deletion(scene, edge, src, dst)
                assert got == bfs_reachable(scene, src, dst, skip_edge=edge)


class TestAvgNeighborDistance:
    def test_square(self, square_scene):
        assert avg_neighbor_distance(square_scene) == pytest.approx((4.0 + SQRT2) / 5.0, abs=1e-9)

    def test_unit_cycle(self):
        scene = Scene(
            "cycle",
            {"A": (0, 0, 0), "B": (1, 0, 0), "C": (1, 1, 0), "D": (0, 1, 0)},
            [("A", "B"), ("B", "C"), ("C", "D"), ("D", "A")],
        )
        assert avg_neighbor_distance(scene) == pytest.approx(1.0, abs=1e-12)

    def test_single_edge(self):
        scene = Scene("one", {"A": (0, 0, 0), "B": (2.5, 0, 0)}, [("A", "B")])
        assert avg_neighbor_distance(scene) == pytest.approx(2.5, abs=1e-12)

    def test_empty(self):
        scene = Scene("none", {"A": (0, 0, 0)}, [])
        with pytest.raises(EmptySceneError):
            avg_neighbor_distance(scene)


class TestPathLength:
    def test_single_node(self, square_scene):
        assert path_length(square_scene, ["A"]) == 0.0

    def test_two_hops(self, square_scene):
        assert path_length(square_scene, ["A", "B", "C"]) == pytest.approx(2.0, abs=1e-9)
        assert path_length(square_scene, ["A", "C"]) == pytest.approx(SQRT2, abs=1e-9)

    def test_invalid(self, square_scene):
        with pytest.raises(InvalidPathError):
            path_length(square_scene, ["A", "B", "D"])
        with pytest.raises(InvalidPathError):
            path_length(square_scene, [])


class TestSceneConstruction:
    def test_rejects_self_loop(self):
        with pytest.raises(DataError):
            Scene("bad", {"A": (0, 0, 0)}, [("A", "A")])

    def test_rejects_unknown_endpoint(self):
        with pytest.raises(DataError):
            Scene("bad", {"A": (0, 0, 0)}, [("A", "B")])

    def test_rejects_nonfinite_position(self):
        with pytest.raises(DataError):
            Scene("bad", {"A": (0, math.inf, 0)}, [])

    def test_adjacency_order_independent_of_input_order(self):
        positions = {f"n{i}": (float(i), 0.0, 0.0) for i in range(6)}
        edges = [("n0", "n1"), ("n1", "n2"), ("n2", "n3"), ("n0", "n3"), ("n3", "n4"), ("n4", "n5")]
        a = Scene("s", positions, edges)
        shuffled = list(reversed([(b, x) for x, b in edges]))
        b = Scene("s", dict(reversed(list(positions.items()))), shuffled)
        assert a.nodes == b.nodes
        for nid in a.nodes:
            assert a.neighbors(nid) == b.neighbors(nid)
        assert scene_to_dict(a) == scene_to_dict(b)

    def test_edge_weight_is_euclidean(self, square_scene):
        for a, b in square_scene.edges():
            w = square_scene.edge_weight(a, b)
            assert w == pytest.approx(
                math.dist(square_scene.position(a), square_scene.position(b)), abs=1e-9
            )
            assert w > 0


class TestSceneJson:
    def test_round_trip(self, square_scene):
        blob = json.dumps(scene_to_dict(square_scene))
        again = scene_from_dict(json.loads(blob))
        assert again.nodes == square_scene.nodes
        assert again.edges() == square_scene.edges()
        assert scene_to_dict(again) == scene_to_dict(square_scene)

    def test_landmarks_survive(self):
        scene = Scene("lm", {"A": (0, 0, 0), "B": (1, 0, 0)}, [("A", "B")], landmarks={"A": 3, "B": 1})
        again = scene_from_dict(scene_to_dict(scene))
        assert again.landmarks == {"A": 3, "B": 1}

    def test_malformed_raises(self):
        with pytest.raises(DataError):
            scene_from_dict({"scan": "x", "nodes": [{"id": "A"}], "edges": []})


def test_is_connected(line_scene):
    assert is_connected(line_scene)
    scene = Scene("gap", {"A": (0, 0, 0), "B": (1, 0, 0), "C": (9, 0, 0)}, [("A", "B")])
    assert not is_connected(scene)
