"""Dataset plumbing: R2R-format ingestion, perturbed-dataset construction,
and summary statistics.

The connectivity reader consumes the standard per-scan JSON (viewpoints with
4x4 poses and boolean mutual-visibility rows); the trajectory reader accepts
both this package's episode files and raw R2R trajectory files, carrying
natural-language instructions as opaque text. A perturbed dataset enumerates,
for every episode, each deletable ground-truth edge with its detour-aware
reference path.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

from .errors import DataError
from .fsio import read_json, write_json
from .graph import NodeId, Scene, path_length
from .perturb import PerturbedRef, build_perturbed_ref, collect_deletable_edges
from .world import Episode


class ParseError(DataError):
    pass


class EmptyDatasetError(DataError):
    pass


# -- R2R connectivity ------------------------------------------------------------


def load_scene_r2r(path) -> Scene:
    """Scene from an R2R connectivity file (one scan).

    Keeps only `included` viewpoints; an edge exists iff both endpoints mark
    each other unobstructed (asymmetric rows are symmetrized by intersection,
    with a warning). Positions come from the pose translation column.
    """
    try:
        entries = read_json(path)
    except ValueError as exc:
        raise ParseError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(entries, list) or not entries:
        raise ParseError(f"{path}: expected a non-empty list of viewpoints")

    ids = []
    positions: dict[NodeId, tuple[float, float, float]] = {}
    included = []
    for i, e in enumerate(entries):
        try:
            vid = e["image_id"]
            pose = e["pose"]
            inc = bool(e.get("included", True))
            if len(pose) != 16:
                raise ParseError(
                    f"{path}: viewpoint {vid!r}: pose has {len(pose)} entries, expected 16"
                )
            positions[vid] = (float(pose[3]), float(pose[7]), float(pose[11]))
        except ParseError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"{path}: viewpoint index {i}: {exc!r}") from exc
        ids.append(vid)
        included.append(inc)

    n = len(entries)
    asymmetric = 0
    edges = []
    for i in range(n):
        row_i = entries[i].get("unobstructed")
        if not isinstance(row_i, list) or len(row_i) != n:
            raise ParseError(f"{path}: viewpoint {ids[i]!r}: bad unobstructed row")
        for j in range(i + 1, n):
            a = bool(row_i[j])
            b = bool(entries[j]["unobstructed"][i])
            if a != b:
                asymmetric += 1
            if a and b and included[i] and included[j]:
                edges.append((ids[i], ids[j]))
    if asymmetric:
        warnings.warn(
            f"{path}: {asymmetric} asymmetric adjacency entries, symmetrized by intersection",
            stacklevel=2,
        )
    scan = str(path).rsplit("/", 1)[-1].replace("_connectivity.json", "")
    kept = {vid: positions[vid] for vid, inc in zip(ids, included) if inc}
    kept_set = set(kept)
    return Scene(scan, kept, [e for e in edges if e[0] in kept_set and e[1] in kept_set])


def load_r2r_trajectories(path) -> list[Episode]:
    """Episodes from an R2R trajectory file; instruction text kept opaque."""
    out = []
    for i, rec in enumerate(read_json(path)):
        try:
            text = rec.get("instructions")
            out.append(
                Episode(
                    path_id=str(rec["path_id"]),
                    scan=rec["scan"],
                    path=tuple(rec["path"]),
                    heading=float(rec.get("heading", 0.0)),
                    instruction=tuple(int(t) for t in rec.get("instruction", ())),
                    instruction_text="\n".join(text) if isinstance(text, list) else text,
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"{path}: record {i}: {exc!r}") from exc
    return out


# -- perturbed dataset -------------------------------------------------------------


@dataclass
class PPDataset:
    split: str
    episodes: list[Episode]  # every input episode, perturbable or not
    refs: dict[str, list[PerturbedRef]]  # path_id -> detour references (non-empty only)
    scans: list[str] = field(default_factory=list)
    errors: list[dict] = field(default_factory=list)  # skipped episodes with reasons

    @property
    def n_perturbable(self) -> int:
        return len(self.refs)

    def to_dict(self) -> dict:
        return {
            "split": self.split,
            "scans": self.scans,
            "episodes": [ep.to_dict() for ep in self.episodes],
            "perturbed": [r.to_dict() for refs in self.refs.values() for r in refs],
            "errors": self.errors,
        }

    @staticmethod
    def from_dict(obj: dict) -> "PPDataset":
        episodes = [Episode.from_dict(e) for e in obj["episodes"]]
        refs: dict[str, list[PerturbedRef]] = {}
        for rec in obj["perturbed"]:
            ref = PerturbedRef.from_dict(rec)
            refs.setdefault(ref.path_id, []).append(ref)
        return PPDataset(
            split=obj["split"],
            episodes=episodes,
            refs=refs,
            scans=list(obj.get("scans", [])),
            errors=list(obj.get("errors", [])),
        )


def save_pp_dataset(path, pp: PPDataset) -> None:
    write_json(path, pp.to_dict())


def load_pp_dataset(path) -> PPDataset:
    return PPDataset.from_dict(read_json(path))


def build_pp_dataset(scenes: dict[str, Scene], episodes: list[Episode],
                     split: str = "train") -> PPDataset:
    """Enumerate every deletable edge and its detour reference per episode.

    Episodes whose ground-truth path fails validation are reported and
    skipped; episodes without deletable edges stay in the dataset but have no
    perturbed entries.
    """
    ordered = sorted(episodes, key=lambda e: e.path_id)
    refs: dict[str, list[PerturbedRef]] = {}
    errors: list[dict] = []
    kept: list[Episode] = []
    for ep in ordered:
        scene = scenes.get(ep.scan)
        if scene is None:
            errors.append({"path_id": ep.path_id, "error": f"unknown scan {ep.scan!r}"})
            continue
        try:
            dels = collect_deletable_edges(scene, ep)
        except DataError as exc:
            errors.append({"path_id": ep.path_id, "error": str(exc)})
            continue
        kept.append(ep)
        if dels:
            refs[ep.path_id] = [build_perturbed_ref(scene, ep, d) for d in dels]
    return PPDataset(
        split=split,
        episodes=kept,
        refs=refs,
        scans=sorted({ep.scan for ep in kept}),
        errors=errors,
    )


# -- statistics ----------------------------------------------------------------------

HIST_BINS = ("1-2", "2-4", "4-6+")
PARTS = ("beginning", "middle", "end")


@dataclass
class SplitStats:
    split: str
    n_trajectories: int  # episodes that passed validation
    n_perturbable: int
    gt_mean_steps: float
    gt_mean_distance: float
    pp_mean_steps: float  # over every detour reference
    pp_mean_distance: float
    deletable_min: int
    deletable_max: int
    deletable_avg: float
    histogram: dict[str, float]  # deletable-count bins, proportions over perturbable
    positions: dict[str, float]  # trajectories with a deletable edge in each third

    def to_dict(self) -> dict:
        return {
            "split": self.split,
            "n_trajectories": self.n_trajectories,
            "n_perturbable": self.n_perturbable,
            "gt_mean_steps": self.gt_mean_steps,
            "gt_mean_distance": self.gt_mean_distance,
            "pp_mean_steps": self.pp_mean_steps,
            "pp_mean_distance": self.pp_mean_distance,
            "deletable_min": self.deletable_min,
            "deletable_max": self.deletable_max,
            "deletable_avg": self.deletable_avg,
            "histogram": self.histogram,
            "positions": self.positions,
        }


def _hist_bin(count: int) -> str:
    if count <= 2:
        return "1-2"
    if count <= 4:
        return "2-4"
    return "4-6+"


def trajectory_parts(n_nodes: int) -> tuple[range, range, range]:
    """Split 0-based node positions into thirds; the middle absorbs remainders."""
    base = n_nodes // 3
    return (
        range(0, base),
        range(base, n_nodes - base),
        range(n_nodes - base, n_nodes),
    )


def compute_stats(pp: PPDataset, scenes: dict[str, Scene]) -> SplitStats:
    if not pp.episodes:
        raise EmptyDatasetError(f"split {pp.split!r} has no episodes")
    gt_steps = []
    gt_dist = []
    for ep in pp.episodes:
        gt_steps.append(ep.hops)
        gt_dist.append(path_length(scenes[ep.scan], list(ep.path)))

    pp_steps = []
    pp_dist = []
    counts = []
    part_hits = {p: 0 for p in PARTS}
    hist = {b: 0 for b in HIST_BINS}
    for ep in pp.episodes:
        refs = pp.refs.get(ep.path_id)
        if not refs:
            continue
        counts.append(len(refs))
        hist[_hist_bin(len(refs))] += 1
        begin, middle, end = trajectory_parts(len(ep.path))
        in_part = {p: False for p in PARTS}
        for ref in refs:
            pp_steps.append(len(ref.path_obs) - 1)
            pp_dist.append(path_length(scenes[ep.scan], list(ref.path_obs)))
            for part, rng in zip(PARTS, (begin, middle, end)):
                if ref.t in rng:
                    in_part[part] = True
        for part, hit in in_part.items():
            if hit:
                part_hits[part] += 1

    if not counts:
        raise EmptyDatasetError(f"split {pp.split!r} has no perturbable episodes")
    n_pert = len(counts)
    return SplitStats(
        split=pp.split,
        n_trajectories=len(pp.episodes),
        n_perturbable=n_pert,
        gt_mean_steps=sum(gt_steps) / len(gt_steps),
        gt_mean_distance=sum(gt_dist) / len(gt_dist),
        pp_mean_steps=sum(pp_steps) / len(pp_steps),
        pp_mean_distance=sum(pp_dist) / len(pp_dist),
        deletable_min=min(counts),
        deletable_max=max(counts),
        deletable_avg=sum(counts) / n_pert,
        histogram={b: hist[b] / n_pert for b in HIST_BINS},
        positions={p: part_hits[p] / n_pert for p in PARTS},
    )


def stats_text(stats: SplitStats) -> str:
    """Aligned-column rendering of one split's statistics."""
    rows = [
        ("split", stats.split),
        ("trajectories", f"{stats.n_trajectories}"),
        ("perturbable", f"{stats.n_perturbable}"),
        ("gt mean steps", f"{stats.gt_mean_steps:.2f}"),
        ("gt mean distance (m)", f"{stats.gt_mean_distance:.2f}"),
        ("perturbed mean steps", f"{stats.pp_mean_steps:.2f}"),
        ("perturbed mean distance (m)", f"{stats.pp_mean_distance:.2f}"),
        ("deletable edges min/max/avg",
         f"{stats.deletable_min} / {stats.deletable_max} / {stats.deletable_avg:.2f}"),
    ]
    for b in HIST_BINS:
        rows.append((f"count bin {b}", f"{100.0 * stats.histogram[b]:.2f}%"))
    for p in PARTS:
        rows.append((f"position {p}", f"{100.0 * stats.positions[p]:.2f}%"))
    width = max(len(k) for k, _ in rows)
    return "\n".join(f"{k:<{width}}  {v}" for k, v in rows) + "\n"
