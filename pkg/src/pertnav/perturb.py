"""Route perturbation: deletable edges, overlays, and detour-aware references.

An edge of a ground-truth path is deletable when removing it keeps the goal
reachable and leaves the current node some other neighbor close enough to the
originally chosen node (closer than the scene's mean edge length). For each
deletable edge we also build the detour-aware reference path: the original
route with the single cheapest deviation spliced in at the deleted edge.
"""
from __future__ import annotations

from dataclasses import dataclass

from .errors import DataError
from .graph import (
    EdgeKey,
    NodeId,
    Path,
    Scene,
    avg_neighbor_distance,
    connected_after_deletion,
    distances_from,
    edge_key,
    path_length,
    shortest_path,
    straight_line_distance,
)


class InvalidEpisodeError(DataError):
    pass


class NoDetourError(DataError):
    pass


@dataclass(frozen=True)
class DeletableEdge:
    """A ground-truth path edge that may be deleted mid-rollout."""

    path_id: str
    t: int  # 0-based index of the edge's start node within the GT path
    edge: EdgeKey


@dataclass(frozen=True)
class PerturbationEvent:
    """One pending edge deletion, fired when the agent tries to cross it."""

    t: int
    edge: EdgeKey


@dataclass(frozen=True)
class PerturbedRef:
    """Detour-aware reference path for one deleted ground-truth edge."""

    path_id: str
    t: int
    edge: EdgeKey
    detour_point: NodeId
    path_obs: tuple[NodeId, ...]

    def event(self) -> PerturbationEvent:
        return PerturbationEvent(self.t, self.edge)

    def to_dict(self) -> dict:
        return {
            "path_id": self.path_id,
            "t": self.t,
            "edge": list(self.edge),
            "m": self.detour_point,
            "path_obs": list(self.path_obs),
        }

    @staticmethod
    def from_dict(obj: dict) -> "PerturbedRef":
        return PerturbedRef(
            path_id=obj["path_id"],
            t=int(obj["t"]),
            edge=edge_key(*obj["edge"]),
            detour_point=obj["m"],
            path_obs=tuple(obj["path_obs"]),
        )


class SceneView:
    """Read-only overlay of a scene with a set of edges removed.

    The base scene is never mutated, so "delete, inspect, recover" is just
    "build a view, drop it". Views carry their own shortest-path cache.
    """

    def __init__(self, base: Scene, removed: frozenset[EdgeKey]):
        self._base = base
        self.removed = removed
        self.scan = base.scan
        self.landmarks = base.landmarks
        self._adj: dict[NodeId, tuple[NodeId, ...]] = {}
        self._dist_cache: dict = {}

    def base_scene(self) -> Scene:
        return self._base

    @property
    def nodes(self):
        return self._base.nodes

    def __contains__(self, nid: NodeId) -> bool:
        return nid in self._base

    def position(self, nid: NodeId):
        return self._base.position(nid)

    def neighbors(self, nid: NodeId) -> tuple[NodeId, ...]:
        got = self._adj.get(nid)
        if got is None:
            got = tuple(
                v for v in self._base.neighbors(nid) if edge_key(nid, v) not in self.removed
            )
            self._adj[nid] = got
        return got

    def has_edge(self, a: NodeId, b: NodeId) -> bool:
        return edge_key(a, b) not in self.removed and self._base.has_edge(a, b)

    def edge_weight(self, a: NodeId, b: NodeId) -> float:
        if edge_key(a, b) in self.removed:
            from .graph import UnknownEdgeError

            raise UnknownEdgeError(f"edge ({a!r}, {b!r}) removed by overlay")
        return self._base.edge_weight(a, b)

    def edges(self):
        return tuple(e for e in self._base.edges() if e not in self.removed)


def apply_event(scene, event: PerturbationEvent) -> SceneView:
    """Overlay view of `scene` with the event's edge removed; idempotent.

    Views are cached on the base scene so repeated applications of the same
    deletion share one (read-only) overlay and its shortest-path cache.
    """
    ek = edge_key(*event.edge)
    base = scene.base_scene()
    removed = frozenset({ek})
    if isinstance(scene, SceneView):
        removed = scene.removed | removed
    if ek not in base._weights:
        from .graph import UnknownEdgeError

        raise UnknownEdgeError(f"edge {event.edge!r} not in scene {base.scan!r}")
    view = base._view_cache.get(removed)
    if view is None:
        view = SceneView(base, removed)
        base._view_cache[removed] = view
    return view


def collect_deletable_edges(scene, episode, connectivity_from_start: bool = False) -> list[DeletableEdge]:
    """All GT edges of `episode` whose deletion is a valid perturbation.

    An edge (c_t, c_{t+1}) qualifies when (i) the goal stays reachable after
    its removal and (ii) some surviving neighbor of c_t lies within the
    scene's mean edge length of c_{t+1}. The reachability probe starts at c_t
    by default; `connectivity_from_start` switches it to the episode start
    (equivalent on undirected scenes, since the intact GT prefix keeps the
    start and c_t connected).
    """
    path = list(episode.path)
    if len(path) < 2:
        raise InvalidEpisodeError(f"episode {episode.path_id!r}: path has fewer than 2 nodes")
    for a, b in zip(path, path[1:]):
        if not scene.has_edge(a, b):
            raise InvalidEpisodeError(
                f"episode {episode.path_id!r}: GT pair ({a!r}, {b!r}) not adjacent"
            )
    goal = path[-1]
    r = avg_neighbor_distance(scene)
    out: list[DeletableEdge] = []
    for t in range(len(path) - 1):
        c_t, c_next = path[t], path[t + 1]
        ek = edge_key(c_t, c_next)
        probe_src = path[0] if connectivity_from_start else c_t
        if not connected_after_deletion(scene, ek, probe_src, goal):
            continue
        ok = False
        for u in scene.neighbors(c_t):
            if u == c_next:
                continue  # this is the deleted edge itself
            if straight_line_distance(scene, u, c_next) < r:
                ok = True
                break
        if ok:
            out.append(DeletableEdge(episode.path_id, t, ek))
    return out


def build_perturbed_ref(scene, episode, deletable: DeletableEdge) -> PerturbedRef:
    """Reference path after deleting one GT edge: shortest rejoin, rest intact.

    The detour point m is the node on the GT tail (from c_{t+1} to the goal)
    reachable from c_t by the cheapest path that avoids the deleted edge;
    ties prefer the candidate nearest the goal, so deviations end sooner.
    """
    path = list(episode.path)
    t = deletable.t
    c_t = path[t]
    ek = deletable.edge
    dist = distances_from(scene, c_t, excluded=ek)
    best_idx = None
    best_len = None
    for idx in range(t + 1, len(path)):
        m = path[idx]
        d = dist.get(m)
        if d is None:
            continue
        if best_len is None or d < best_len - 1e-12 or (abs(d - best_len) <= 1e-12 and idx > best_idx):
            best_len = d
            best_idx = idx
    if best_idx is None:
        raise NoDetourError(
            f"episode {episode.path_id!r}: no rejoin point after deleting {ek!r}"
        )
    m = path[best_idx]
    detour = shortest_path(scene, c_t, m, excluded=ek)
    path_obs = path[:t] + detour + path[best_idx + 1 :]
    return PerturbedRef(
        path_id=episode.path_id,
        t=t,
        edge=ek,
        detour_point=m,
        path_obs=tuple(path_obs),
    )


def check_perturbed_ref(scene, episode, ref: PerturbedRef) -> None:
    """Assert the structural invariants of a detour-aware reference path."""
    path = list(episode.path)
    obs = list(ref.path_obs)
    if obs[0] != path[0] or obs[-1] != path[-1]:
        raise AssertionError("reference must keep the original endpoints")
    for a, b in zip(obs, obs[1:]):
        if edge_key(a, b) == ref.edge:
            raise AssertionError("reference traverses the deleted edge")
    path_length(apply_event(scene, ref.event()), obs)  # raises if not traversable
    if obs[: ref.t + 1] != path[: ref.t + 1]:
        raise AssertionError("prefix up to the deleted edge must match the GT")
    m_idx_obs = obs.index(ref.detour_point)
    m_idx_gt = path.index(ref.detour_point)
    if obs[m_idx_obs:] != path[m_idx_gt:]:
        raise AssertionError("suffix from the detour point must match the GT")
    if m_idx_gt < ref.t + 1:
        raise AssertionError("detour point must lie on the GT tail")
