"""Navigation metrics and the perturbation-free / perturbation-based protocols.

Perturbation-free evaluation decodes greedily on the intact graph and scores
against the ground-truth path. Perturbation-based evaluation designates one
deletable ground-truth edge per episode (seeded per episode id, so results
are independent of dataset ordering); the deletion fires only if and when the
agent actually tries to cross that edge, and path-efficiency is referenced to
the detour-aware path of the designated deletion.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field, fields

import numpy as np

from .agent import GREEDY, SAMPLE, ModelParams, RolloutJob, rollout_batch
from .autodiff import no_grad
from .errors import ConfigError, DataError
from .graph import geodesic_distance, path_length
from .perturb import PerturbationEvent, build_perturbed_ref, collect_deletable_edges
from .world import Episode

PER_FREE = "per-free"
PER_BASED = "per-based"


class EmptyDatasetError(DataError):
    pass


@dataclass(frozen=True)
class EvalProtocol:
    mode: str = PER_FREE
    success_radius: float = 3.0
    seed: int = 0
    decode: str = GREEDY
    max_steps: int = 15
    multi_perturb: bool = False  # arm every deletable edge instead of one

    def __post_init__(self):
        if self.mode not in (PER_FREE, PER_BASED):
            raise ConfigError(f"unknown evaluation mode {self.mode!r}")
        if self.decode not in (GREEDY, SAMPLE):
            raise ConfigError(f"unknown decode mode {self.decode!r}")
        if self.success_radius <= 0:
            raise ConfigError("success radius must be positive")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @staticmethod
    def from_dict(obj: dict) -> "EvalProtocol":
        names = {f.name for f in fields(EvalProtocol)}
        unknown = set(obj) - names
        if unknown:
            raise ConfigError(f"unknown protocol keys: {sorted(unknown)}")
        return EvalProtocol(**obj)


@dataclass
class EpisodeScore:
    path_id: str
    tl: float
    ne: float
    success: bool
    spl: float
    event_fired: bool
    scored_per_free: bool  # per-based episode without deletable edges, flagged

    def to_dict(self) -> dict:
        return {
            "path_id": self.path_id,
            "tl": self.tl,
            "ne": self.ne,
            "success": self.success,
            "spl": self.spl,
            "event_fired": self.event_fired,
            "scored_per_free": self.scored_per_free,
        }


@dataclass
class Metrics:
    tl: float
    ne: float
    sr: float
    spl: float
    n_episodes: int

    def to_dict(self) -> dict:
        return {
            "tl": self.tl,
            "ne": self.ne,
            "sr": self.sr,
            "spl": self.spl,
            "n_episodes": self.n_episodes,
        }


def score_episode(scene, episode: Episode, record, protocol: EvalProtocol,
                  ref_length: float | None = None) -> EpisodeScore:
    """Metrics for one finished rollout.

    ref_length is the path-efficiency reference: the ground-truth length by
    default, or the detour-aware reference length under per-based evaluation.
    """
    tl = path_length(scene, record.nodes)
    stop = record.nodes[-1]
    ne = geodesic_distance(scene, stop, episode.goal)
    success = ne <= protocol.success_radius
    if ref_length is None:
        ref_length = path_length(scene, list(episode.path))
    spl = (ref_length / max(tl, ref_length)) if success else 0.0
    return EpisodeScore(
        path_id=episode.path_id,
        tl=tl,
        ne=ne,
        success=success,
        spl=spl,
        event_fired=bool(record.fired),
        scored_per_free=False,
    )


def _episode_rng(seed: int, path_id: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, zlib.crc32(path_id.encode()))))


def evaluate(
    params: ModelParams,
    scenes: dict,
    episodes: list[Episode],
    protocol: EvalProtocol,
    chunk_size: int = 32,
) -> tuple[Metrics, list[EpisodeScore]]:
    """Decode every episode under the protocol and average the metrics."""
    if not episodes:
        raise EmptyDatasetError("no episodes to evaluate")
    jobs = []
    refs = []  # per-episode SPL reference length
    flags = []  # scored_per_free flags
    for ep in episodes:
        scene = scenes[ep.scan]
        events = ()
        ref_length = path_length(scene, list(ep.path))
        flagged = False
        if protocol.mode == PER_BASED:
            dels = collect_deletable_edges(scene, ep)
            if not dels:
                flagged = True
            elif protocol.multi_perturb:
                events = tuple(d for d in dels)
                ref = build_perturbed_ref(scene, ep, dels[0])
                ref_length = path_length(scene, list(ref.path_obs))
            else:
                rng = _episode_rng(protocol.seed, ep.path_id)
                pick = dels[int(rng.integers(len(dels)))]
                ref = build_perturbed_ref(scene, ep, pick)
                ref_length = path_length(scene, list(ref.path_obs))
                events = (pick,)

        ev = tuple(PerturbationEvent(d.t, d.edge) for d in events)
        jobs.append(
            RolloutJob(
                episode=ep,
                scene=scene,
                events=ev,
                pre_imposed=False,
                need_log_probs=False,
                need_values=False,
            )
        )
        refs.append(ref_length)
        flags.append(flagged)

    scores: list[EpisodeScore] = []
    with no_grad():
        if protocol.decode == SAMPLE:
            # per-episode seeded sampling keeps scores order-independent
            for job in jobs:
                rng = _episode_rng(protocol.seed + 1, job.episode.path_id)
                rollout_batch(params, [job], SAMPLE, max_steps=protocol.max_steps, rng=rng)
        else:
            for lo in range(0, len(jobs), chunk_size):
                chunk = jobs[lo : lo + chunk_size]
                rollout_batch(params, chunk, GREEDY, max_steps=protocol.max_steps)
    for job, ref_length, flagged in zip(jobs, refs, flags):
        score = score_episode(
            scenes[job.episode.scan], job.episode, job.record, protocol, ref_length
        )
        score.scored_per_free = flagged
        scores.append(score)

    n = len(scores)
    metrics = Metrics(
        tl=sum(s.tl for s in scores) / n,
        ne=sum(s.ne for s in scores) / n,
        sr=sum(1.0 for s in scores if s.success) / n,
        spl=sum(s.spl for s in scores) / n,
        n_episodes=n,
    )
    return metrics, scores


def evaluation_report(params, scenes, episodes, protocol: EvalProtocol) -> dict:
    metrics, scores = evaluate(params, scenes, episodes, protocol)
    return {
        "protocol": protocol.to_dict(),
        "metrics": metrics.to_dict(),
        "episodes": [s.to_dict() for s in scores],
    }
