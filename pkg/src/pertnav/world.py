"""Synthetic worlds: random geometric scenes, episodes, and observations.

Scenes are random geometric graphs (uniform node positions, edges below a
connection radius) with one landmark id per node. Episodes pair a shortest
path with a token instruction: one (direction, landmark) token pair per hop,
terminated by STOP. Observations expose, per candidate move, the candidate's
landmark plus relative geometry, which is all the "perception" the agent gets.
"""
from __future__ import annotations

import math
import zlib
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError
from .graph import NodeId, Scene, is_connected, shortest_path
from .fsio import read_json, write_json

# Token vocabulary: five direction tokens, STOP, then one token per landmark.
TOK_LEFT = 0
TOK_RIGHT = 1
TOK_STRAIGHT = 2
TOK_UP = 3
TOK_DOWN = 4
TOK_STOP = 5
N_SPECIAL_TOKENS = 6

# Per-candidate observation geometry: sin/cos of relative heading, relative
# elevation, distance in meters.
GEOM_FEATURES = 4


def vocab_size(n_landmarks: int) -> int:
    return N_SPECIAL_TOKENS + n_landmarks


def landmark_token(lm: int) -> int:
    return N_SPECIAL_TOKENS + lm


class GenerationFailedError(ConfigError):
    pass


class NoValidPairError(DataError):
    pass


@dataclass(frozen=True)
class WorldConfig:
    n_nodes: int = 40
    box: float = 30.0  # side length of the square layout area, meters
    radius: float = 7.5  # connection radius, meters
    n_landmarks: int = 12
    hop_range: tuple[int, int] = (3, 6)
    seed: int = 0
    max_attempts: int = 200

    def __post_init__(self):
        lo, hi = self.hop_range
        if self.n_nodes < 1:
            raise ConfigError("n_nodes must be positive")
        if not (2 <= lo <= hi <= max(2, self.n_nodes - 1)):
            raise ConfigError(f"hop range {self.hop_range} outside [2, n_nodes-1]")
        if self.radius <= 0 or self.box <= 0:
            raise ConfigError("radius and box must be positive")
        if self.n_landmarks < 1:
            raise ConfigError("need at least one landmark")


@dataclass(frozen=True)
class Episode:
    path_id: str
    scan: str
    path: tuple[NodeId, ...]
    heading: float
    instruction: tuple[int, ...]
    instruction_text: str | None = None

    @property
    def start(self) -> NodeId:
        return self.path[0]

    @property
    def goal(self) -> NodeId:
        return self.path[-1]

    @property
    def hops(self) -> int:
        return len(self.path) - 1

    def to_dict(self) -> dict:
        rec = {
            "path_id": self.path_id,
            "scan": self.scan,
            "path": list(self.path),
            "heading": self.heading,
            "instruction": list(self.instruction),
        }
        if self.instruction_text is not None:
            rec["instruction_text"] = self.instruction_text
        return rec

    @staticmethod
    def from_dict(obj: dict) -> "Episode":
        try:
            return Episode(
                path_id=str(obj["path_id"]),
                scan=obj["scan"],
                path=tuple(obj["path"]),
                heading=float(obj.get("heading", 0.0)),
                instruction=tuple(int(t) for t in obj.get("instruction", ())),
                instruction_text=obj.get("instruction_text"),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed episode record: {exc}") from exc


def save_episodes(path, episodes) -> None:
    write_json(path, [ep.to_dict() for ep in episodes])


def load_episodes(path) -> list[Episode]:
    return [Episode.from_dict(obj) for obj in read_json(path)]


# -- scene generation ---------------------------------------------------------


def generate_scene(config: WorldConfig, scan: str | None = None) -> Scene:
    """Connected random geometric graph, deterministic under config+seed."""
    scan = scan if scan is not None else f"w{config.seed}"
    rng = np.random.default_rng(config.seed)
    for _ in range(config.max_attempts):
        pts = rng.uniform(0.0, config.box, size=(config.n_nodes, 2))
        ids = [f"v{i:03d}" for i in range(config.n_nodes)]
        positions = {nid: (float(x), float(y), 0.0) for nid, (x, y) in zip(ids, pts)}
        edges = []
        for i in range(config.n_nodes):
            for j in range(i + 1, config.n_nodes):
                if math.dist(pts[i], pts[j]) < config.radius:
                    edges.append((ids[i], ids[j]))
        lms = [i % config.n_landmarks for i in range(config.n_nodes)]
        rng.shuffle(lms)
        scene = Scene(scan, positions, edges, landmarks=dict(zip(ids, lms)))
        if is_connected(scene) and (config.n_nodes == 1 or scene.n_edges > 0):
            return scene
    raise GenerationFailedError(
        f"no connected graph after {config.max_attempts} attempts "
        f"(n={config.n_nodes}, radius={config.radius})"
    )


# -- episodes -----------------------------------------------------------------


def wrap_angle(a: float) -> float:
    """Wrap to (-pi, pi]."""
    a = math.fmod(a + math.pi, 2.0 * math.pi)
    if a <= 0.0:
        a += 2.0 * math.pi
    return a - math.pi


def heading_between(scene, a: NodeId, b: NodeId) -> float:
    ax, ay, _ = scene.position(a)
    bx, by, _ = scene.position(b)
    return math.atan2(by - ay, bx - ax)


def direction_token(rel: float) -> int:
    if abs(rel) <= math.pi / 4.0:
        return TOK_STRAIGHT
    return TOK_LEFT if rel > 0 else TOK_RIGHT


def instruction_for_path(scene, path, heading: float) -> tuple[int, ...]:
    """Token instruction for a path: (direction, landmark) per hop, then STOP."""
    tokens = []
    h = heading
    n_lm = _n_scene_landmarks(scene)
    for a, b in zip(path, path[1:]):
        ang = heading_between(scene, a, b)
        tokens.append(direction_token(wrap_angle(ang - h)))
        tokens.append(landmark_token(landmark_of(scene, b, n_lm)))
        h = ang
    tokens.append(TOK_STOP)
    return tuple(tokens)


def sample_episode(scene, seed: int, hop_range=(3, 6), path_id: str | None = None,
                   max_tries: int = 500) -> Episode:
    """Shortest-path episode with hop count inside hop_range, seeded."""
    rng = np.random.default_rng(seed)
    nodes = scene.nodes
    lo, hi = hop_range
    for _ in range(max_tries):
        start = nodes[int(rng.integers(len(nodes)))]
        goals = []
        for g in nodes:
            if g == start:
                continue
            try:
                hops = len(shortest_path(scene, start, g)) - 1
            except Exception:
                continue
            if lo <= hops <= hi:
                goals.append(g)
        if not goals:
            continue
        goal = goals[int(rng.integers(len(goals)))]
        path = tuple(shortest_path(scene, start, goal))
        heading = float(rng.uniform(0.0, 2.0 * math.pi))
        pid = path_id if path_id is not None else f"{scene.scan}-e{seed}"
        return Episode(
            path_id=pid,
            scan=scene.scan,
            path=path,
            heading=heading,
            instruction=instruction_for_path(scene, path, heading),
        )
    raise NoValidPairError(
        f"scene {scene.scan!r}: no start/goal pair with hops in {hop_range}"
    )


# -- observations ---------------------------------------------------------------


@dataclass(frozen=True)
class Observation:
    """Per-candidate features at a node; the last candidate is always STOP."""

    cand_nodes: tuple[NodeId, ...]  # movement candidates, sorted; STOP excluded
    lm_ids: tuple[int, ...]  # landmark per candidate, -1 for the STOP slot
    geom: np.ndarray  # (n_candidates+1, GEOM_FEATURES); STOP row is zero

    @property
    def n_candidates(self) -> int:
        return len(self.cand_nodes) + 1

    @property
    def stop_index(self) -> int:
        return len(self.cand_nodes)


def landmark_of(scene, nid: NodeId, n_landmarks: int) -> int:
    """Landmark id of a node; hashed from the node id when no table exists."""
    if scene.landmarks is not None:
        return scene.landmarks[nid]
    return zlib.crc32(nid.encode()) % n_landmarks


def _n_scene_landmarks(scene) -> int:
    if scene.landmarks is not None:
        return max(scene.landmarks.values()) + 1
    return 1


def observe(scene, current: NodeId, heading: float, n_landmarks: int) -> Observation:
    """Candidate-action features at `current`, given the agent's heading.

    Results are memoized per scene/view; scenes are immutable and teacher
    walks revisit the same (node, heading) pairs every iteration.
    """
    cache = getattr(scene, "_obs_cache", None)
    if cache is None:
        cache = {}
        try:
            scene._obs_cache = cache
        except AttributeError:
            cache = None
    key = (current, heading, n_landmarks)
    if cache is not None:
        hit = cache.get(key)
        if hit is not None:
            return hit
    out = _observe_uncached(scene, current, heading, n_landmarks)
    if cache is not None:
        cache[key] = out
    return out


def _observe_uncached(scene, current: NodeId, heading: float, n_landmarks: int) -> Observation:
    cx, cy, cz = scene.position(current)
    cands = scene.neighbors(current)
    geom = np.zeros((len(cands) + 1, GEOM_FEATURES))
    lm_ids = []
    for k, nid in enumerate(cands):
        x, y, z = scene.position(nid)
        rel = wrap_angle(math.atan2(y - cy, x - cx) - heading)
        horiz = math.hypot(x - cx, y - cy)
        elev = math.atan2(z - cz, horiz) if horiz > 0 else 0.0
        geom[k] = (math.sin(rel), math.cos(rel), elev, math.dist((x, y, z), (cx, cy, cz)))
        lm_ids.append(landmark_of(scene, nid, n_landmarks))
    lm_ids.append(-1)  # STOP slot
    geom.flags.writeable = False
    return Observation(cand_nodes=cands, lm_ids=tuple(lm_ids), geom=geom)
