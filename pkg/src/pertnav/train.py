"""Training loop with progressive perturbed-trajectory augmentation.

Each iteration rolls the current policy over a minibatch in the intact world
(teacher-forced and sampled passes), grows a pool of perturbed references from
episodes whose sampled rollout re-traversed a deletable ground-truth edge, and
then trains on the pooled perturbations as well: teacher-forced passes along
the detour-aware reference and sampled passes with the deletion armed. The
pool only ever grows, so perturbed data is introduced at the rate the agent
earns it.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .agent import (
    encode_instruction_batch,
    GREEDY,
    SAMPLE,
    TEACHER,
    AgentConfig,
    ModelParams,
    RolloutJob,
    rollout_batch,
)
from .autodiff import Tensor
from .errors import ConfigError, NumericError
from .graph import edge_key
from .losses import (
    shared_units,
    LossWeights,
    contrastive_free,
    contrastive_perturbed,
    il_loss,
    make_reward_fn,
    rl_loss,
)
from .perturb import PerturbedRef, build_perturbed_ref, collect_deletable_edges
from .world import Episode

BASELINE = "baseline"
PROPER = "proper"
TEACHER2STUDENT = "teacher2student"


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    iterations: int = 20000
    batch_size: int = 8
    lr: float = 0.01
    clip_norm: float = 5.0
    max_steps: int = 15
    d: int = 64
    mode: str = PROPER
    success_radius: float = 3.0
    checkpoint_every: int = 5000
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.mode not in (BASELINE, PROPER, TEACHER2STUDENT):
            raise ConfigError(f"unknown training mode {self.mode!r}")
        if self.iterations < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ConfigError("bad iterations/batch_size/lr")

    @property
    def pool_enabled(self) -> bool:
        return self.mode == PROPER

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "weights"}
        out["weights"] = self.weights.to_dict()
        return out

    @staticmethod
    def from_dict(obj: dict) -> "TrainConfig":
        obj = dict(obj)
        wnames = {f.name for f in fields(LossWeights)}
        wraw = obj.pop("weights", {})
        unknown = set(wraw) - wnames
        if unknown:
            raise ConfigError(f"unknown loss weight keys: {sorted(unknown)}")
        names = {f.name for f in fields(TrainConfig)}
        unknown = set(obj) - names
        if unknown:
            raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
        return TrainConfig(weights=LossWeights(**wraw), **obj)


class PerturbedPool:
    """Monotone pool of perturbed references, keyed by (episode, edge)."""

    def __init__(self):
        self._entries: dict[tuple[str, tuple[str, str]], PerturbedRef] = {}
        self._by_episode: dict[str, list[PerturbedRef]] = {}

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, key) -> bool:
        path_id, edge = key
        return (path_id, edge_key(*edge)) in self._entries

    def add(self, ref: PerturbedRef) -> bool:
        key = (ref.path_id, edge_key(*ref.edge))
        if key in self._entries:
            return False
        self._entries[key] = ref
        self._by_episode.setdefault(ref.path_id, []).append(ref)
        return True

    def entries_for(self, path_id: str) -> list[PerturbedRef]:
        return self._by_episode.get(path_id, [])

    @property
    def n_episodes(self) -> int:
        return len(self._by_episode)

    def to_list(self) -> list[dict]:
        return [ref.to_dict() for ref in self._entries.values()]

    @staticmethod
    def from_list(items: list[dict]) -> "PerturbedPool":
        pool = PerturbedPool()
        for obj in items:
            pool.add(PerturbedRef.from_dict(obj))
        return pool


def traversed_edges(nodes) -> set:
    return {edge_key(a, b) for a, b in zip(nodes, nodes[1:])}


def match_gt(records, episodes, deletable_map, pool: PerturbedPool) -> list[tuple[Episode, list]]:
    """Episodes whose rollout re-traversed a deletable GT edge and which still
    have at least one unpooled deletable edge to impose."""
    matched = []
    for rec, ep in zip(records, episodes):
        deletables = deletable_map[ep.path_id]
        if not deletables:
            continue
        walked = traversed_edges(rec.nodes)
        overlap = sorted(d.edge for d in deletables if d.edge in walked)
        if not overlap:
            continue
        unpooled = [d for d in deletables if (ep.path_id, d.edge) not in pool]
        if not unpooled:
            continue
        matched.append((ep, overlap))
    return matched


@dataclass
class TrainState:
    params: ModelParams
    pool: PerturbedPool
    iteration: int
    order: list[int]
    ptr: int
    rng_data: np.random.Generator
    rng_rollout: np.random.Generator
    rng_pert: np.random.Generator


def _stream(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, stream)))


class Trainer:
    """Owns parameters, pool, and RNG streams; one  gradient step per iteration."""

    def __init__(self, config: TrainConfig, scenes: dict, episodes: list[Episode],
                 agent_config: AgentConfig | None = None):
        self.config = config
        self.scenes = scenes
        self.episodes = list(episodes)
        if agent_config is None:
            n_lm = max(
                (max(s.landmarks.values()) + 1) for s in scenes.values() if s.landmarks
            )
            agent_config = AgentConfig(d=config.d, n_landmarks=n_lm)
        self.agent_config = agent_config
        self.reward_fn = make_reward_fn(config.success_radius)
        # deletable edges never change; compute once
        self.deletable_map = {}
        self.n_perturbable = 0
        for ep in self.episodes:
            dels = collect_deletable_edges(scenes[ep.scan], ep)
            self.deletable_map[ep.path_id] = dels
            if dels:
                self.n_perturbable += 1
        self.state = TrainState(
            params=ModelParams.init(agent_config, seed=config.seed),
            pool=PerturbedPool(),
            iteration=0,
            order=[],
            ptr=0,
            rng_data=_stream(config.seed, 0),
            rng_rollout=_stream(config.seed, 1),
            rng_pert=_stream(config.seed, 2),
        )

    # -- batching -------------------------------------------------------------

    def next_batch(self) -> list[Episode]:
        st = self.state
        if st.ptr >= len(st.order):
            st.order = list(st.rng_data.permutation(len(self.episodes)))
            st.ptr = 0
        take = st.order[st.ptr : st.ptr + self.config.batch_size]
        st.ptr += len(take)
        return [self.episodes[i] for i in take]

    # -- one iteration ----------------------------------------------------------

    def train_iteration(self, batch: list[Episode]) -> dict:
        cfg = self.config
        st = self.state
        params = st.params
        weights = cfg.weights
        contrastive_on = cfg.pool_enabled and (
            weights.free_weight > 0 or weights.pert_weight > 0
        )

        if cfg.mode == TEACHER2STUDENT:
            return self._t2s_iteration(batch)

        # instructions are shared by every pass this iteration: encode once
        batch_ctx, batch_mask = encode_instruction_batch(
            params, [ep.instruction for ep in batch]
        )
        row_of = {ep.path_id: i for i, ep in enumerate(batch)}

        # (1) perturbation-free sampled pass: policy gradient + rollout encodings
        sample_jobs = [
            RolloutJob(episode=ep, scene=self.scenes[ep.scan], reward_fn=self.reward_fn)
            for ep in batch
        ]
        rollout_batch(
            params,
            sample_jobs,
            SAMPLE,
            max_steps=cfg.max_steps,
            rng=st.rng_rollout,
            shared_ctx=(batch_ctx, batch_mask, list(range(len(batch)))),
        )

        # (2) grow the pool from episodes whose sampled walk hit a deletable GT edge
        added = []
        if cfg.pool_enabled:
            matched = match_gt(
                [j.record for j in sample_jobs], batch, self.deletable_map, st.pool
            )
            for ep, overlap in matched:
                unpooled = [
                    d
                    for d in self.deletable_map[ep.path_id]
                    if (ep.path_id, d.edge) not in st.pool
                ]
                pick = unpooled[int(st.rng_pert.integers(len(unpooled)))]
                ref = build_perturbed_ref(self.scenes[ep.scan], ep, pick)
                st.pool.add(ref)
                added.append(
                    {
                        "path_id": ep.path_id,
                        "t": pick.t,
                        "edge": list(pick.edge),
                        "matched_edges": [list(e) for e in overlap],
                    }
                )

        # (3) pick one pooled perturbation per pooled batch episode, then run all
        # teacher-forced passes (GT walks + detour references) as one batch
        pert_pairs = []  # (episode, chosen ref)
        if cfg.pool_enabled:
            for ep in batch:
                refs = st.pool.entries_for(ep.path_id)
                if not refs:
                    continue
                ref = refs[int(st.rng_pert.integers(len(refs)))]
                pert_pairs.append((ep, ref))

        teacher_jobs = [
            RolloutJob(episode=ep, scene=self.scenes[ep.scan], need_values=False)
            for ep in batch
        ]
        ref_jobs: list[RolloutJob] = []
        ref_keys: list[tuple[str, tuple[str, str]]] = []
        if contrastive_on:
            encode_refs = [
                (ep, ref) for ep in batch for ref in st.pool.entries_for(ep.path_id)
            ]
        else:  # only the imposed perturbations need a teacher-forced record
            encode_refs = pert_pairs
        imposed = {(ep.path_id, edge_key(*ref.edge)) for ep, ref in pert_pairs}
        for ep, ref in encode_refs:
            key = (ep.path_id, edge_key(*ref.edge))
            ref_jobs.append(
                RolloutJob(
                    episode=ep,
                    scene=self.scenes[ep.scan],
                    teacher_path=ref.path_obs,
                    events=(ref.event(),),
                    pre_imposed=True,
                    need_log_probs=key in imposed,  # imitation only on the imposed one
                    need_values=False,
                )
            )
            ref_keys.append(key)
        all_teacher = teacher_jobs + ref_jobs
        budget = max(
            len(j.teacher_path) if j.teacher_path else len(j.episode.path) for j in all_teacher
        )
        rollout_batch(
            params,
            all_teacher,
            TEACHER,
            max_steps=budget + 1,
            shared_ctx=(batch_ctx, batch_mask, [row_of[j.episode.path_id] for j in all_teacher]),
        )
        ref_enc = {key: job.record for key, job in zip(ref_keys, ref_jobs)}

        # (4) perturbation-based sampled pass with the chosen deletion armed
        pert_sample_jobs = [
            RolloutJob(
                episode=ep,
                scene=self.scenes[ep.scan],
                events=(ref.event(),),
                pre_imposed=False,
                reward_fn=self.reward_fn,
            )
            for ep, ref in pert_pairs
        ]
        if pert_sample_jobs:
            rollout_batch(
                params,
                pert_sample_jobs,
                SAMPLE,
                max_steps=cfg.max_steps,
                rng=st.rng_pert,
                shared_ctx=(
                    batch_ctx,
                    batch_mask,
                    [row_of[j.episode.path_id] for j in pert_sample_jobs],
                ),
            )

        # (5) losses
        il_terms = [il_loss(j.record, j.record.nodes) for j in teacher_jobs]
        il_terms += [
            il_loss(ref_enc[(ep.path_id, edge_key(*ref.edge))], list(ref.path_obs))
            for ep, ref in pert_pairs
        ]
        rl_terms = [rl_loss(j.record, weights.gamma) for j in sample_jobs]
        rl_terms += [rl_loss(j.record, weights.gamma) for j in pert_sample_jobs]

        cf_terms = []
        cp_terms = []
        if contrastive_on:
            with shared_units():
                free_encs = [j.record.encoding for j in sample_jobs]
                for i, ep in enumerate(batch):
                    e_f = free_encs[i]
                    e_g = teacher_jobs[i].record.encoding
                    intra = [
                        ref_enc[(ep.path_id, edge_key(*r.edge))].encoding
                        for r in st.pool.entries_for(ep.path_id)
                    ]
                    inter = [enc for k, enc in enumerate(free_encs) if k != i]
                    cf_terms.append(contrastive_free(e_f, e_g, intra, inter, weights.tau))
                pert_encs = [j.record.encoding for j in pert_sample_jobs]
                for k, (ep, ref) in enumerate(pert_pairs):
                    e_p = pert_encs[k]
                    e_og = ref_enc[(ep.path_id, edge_key(*ref.edge))].encoding
                    intra = [
                        ref_enc[(ep.path_id, edge_key(*r.edge))].encoding
                        for r in st.pool.entries_for(ep.path_id)
                        if edge_key(*r.edge) != edge_key(*ref.edge)
                    ]
                    inter = [enc for j, enc in enumerate(pert_encs) if j != k]
                    cp_terms.append(
                        contrastive_perturbed(e_p, e_og, intra, inter, weights.tau)
                    )

        il_mean = _mean(il_terms)
        rl_mean = _mean(rl_terms)
        cf_mean = _mean(cf_terms)
        cp_mean = _mean(cp_terms)
        total = rl_mean + Tensor(weights.il_weight) * il_mean
        if contrastive_on:
            total = total + Tensor(weights.free_weight) * cf_mean
            total = total + Tensor(weights.pert_weight) * cp_mean

        if not math.isfinite(total.item()):
            raise NumericError(f"non-finite loss at iteration {st.iteration}")

        params.zero_grad()
        total.backward()
        self._sgd_step()

        st.iteration += 1
        return {
            "iteration": st.iteration,
            "il": il_mean.item(),
            "rl": rl_mean.item(),
            "contrastive_free": cf_mean.item(),
            "contrastive_perturbed": cp_mean.item(),
            "total": total.item(),
            "pool_size": len(st.pool),
            "pool_episodes": st.pool.n_episodes,
            "pool_proportion": (
                st.pool.n_episodes / self.n_perturbable if self.n_perturbable else 0.0
            ),
            "pool_added": added,
        }

    def _t2s_iteration(self, batch: list[Episode]) -> dict:
        """Four-phase curriculum: pure teacher forcing, then student forcing
        after the first 4 steps, after the first 2 steps, and from the start;
        supervision is the next hop of the shortest path from the current node."""
        cfg = self.config
        st = self.state
        quarter = max(1, cfg.iterations // 4)
        phase = min(3, st.iteration // quarter)
        force = {0: cfg.max_steps + 2, 1: 4, 2: 2, 3: 0}[phase]
        params = st.params
        jobs = [
            RolloutJob(
                episode=ep,
                scene=self.scenes[ep.scan],
                force_teacher_steps=force,
                keep_log_prob_rows=True,
            )
            for ep in batch
        ]
        rollout_batch(params, jobs, SAMPLE, max_steps=cfg.max_steps, rng=st.rng_rollout)
        terms = []
        for job in jobs:
            terms.append(_dynamic_teacher_il(self.scenes[job.episode.scan], job.episode, job.record))
        il_mean = _mean(terms)
        total = il_mean
        if not math.isfinite(total.item()):
            raise NumericError(f"non-finite loss at iteration {st.iteration}")
        params.zero_grad()
        total.backward()
        self._sgd_step()
        st.iteration += 1
        return {
            "iteration": st.iteration,
            "il": il_mean.item(),
            "rl": 0.0,
            "contrastive_free": 0.0,
            "contrastive_perturbed": 0.0,
            "total": total.item(),
            "pool_size": 0,
            "pool_episodes": 0,
            "pool_proportion": 0.0,
            "pool_added": [],
        }

    def _sgd_step(self):
        cfg = self.config
        grads = [t.grad for t in self.state.params.values() if t.grad is not None]
        norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads)) if grads else 0.0
        scale = cfg.lr
        if norm > cfg.clip_norm > 0:
            scale = cfg.lr * cfg.clip_norm / norm
        for t in self.state.params.values():
            if t.grad is not None:
                t.data -= scale * t.grad

    # -- checkpointing -----------------------------------------------------------

    def state_dict(self) -> dict:
        st = self.state
        return {
            "version": 1,
            "iteration": st.iteration,
            "config": self.config.to_dict(),
            "params": st.params.to_dict(),
            "pool": st.pool.to_list(),
            "order": list(map(int, st.order)),
            "ptr": st.ptr,
            "rng_data": st.rng_data.bit_generator.state,
            "rng_rollout": st.rng_rollout.bit_generator.state,
            "rng_pert": st.rng_pert.bit_generator.state,
        }

    def load_state_dict(self, obj: dict):
        if obj.get("version") != 1:
            raise ConfigError(f"unsupported checkpoint version {obj.get('version')!r}")
        if obj["config"] != self.config.to_dict():
            raise ConfigError("checkpoint was produced under a different config")
        st = self.state
        st.iteration = obj["iteration"]
        st.params = ModelParams.from_dict(obj["params"])
        st.pool = PerturbedPool.from_list(obj["pool"])
        st.order = list(obj["order"])
        st.ptr = obj["ptr"]
        st.rng_data.bit_generator.state = obj["rng_data"]
        st.rng_rollout.bit_generator.state = obj["rng_rollout"]
        st.rng_pert.bit_generator.state = obj["rng_pert"]

    # -- driving loop ---------------------------------------------------------------

    def run(self, iterations: int | None = None, on_iteration=None):
        target = self.config.iterations if iterations is None else iterations
        while self.state.iteration < target:
            batch = self.next_batch()
            report = self.train_iteration(batch)
            if on_iteration is not None:
                on_iteration(self, report)


def _mean(terms: list[Tensor]) -> Tensor:
    if not terms:
        return Tensor(0.0)
    if len(terms) == 1:
        return terms[0]
    return ad.tsum(ad.stack(terms)) * (1.0 / len(terms))


def _dynamic_teacher_il(scene, episode: Episode, record) -> Tensor:
    from .graph import shortest_path

    terms = None
    for step_rec, node in zip(record.steps, record.nodes):
        if node == episode.goal:
            target = len(step_rec.cand_nodes)  # STOP
        else:
            nxt = shortest_path(scene, node, episode.goal)[1]
            target = step_rec.cand_nodes.index(nxt)
        lp = ad.index0(step_rec.log_prob_row, target)
        terms = ad.neg(lp) if terms is None else ad.sub(terms, lp)
    return terms
