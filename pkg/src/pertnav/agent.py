"""Compact differentiable instruction-following navigation policy.

A GRU encoder embeds the token instruction; a GRU decoder walks the graph,
attending over the encoded instruction at every step and scoring each
candidate move (neighbors plus STOP) against a query built from its hidden
state. A linear critic head reads the hidden state. The decoder's final
hidden state doubles as the trajectory encoding used by the contrastive
objectives.

All forward passes run through one batched engine; the single-episode API is
the batch-of-one case of the same code path.
"""
from __future__ import annotations

import base64
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DataError
from .graph import InvalidPathError, NodeId
from .perturb import PerturbationEvent, apply_event
from .world import GEOM_FEATURES, Episode, Observation, heading_between, observe, vocab_size

TEACHER = "teacher"
SAMPLE = "sample"
GREEDY = "greedy"

NEG_INF = -1e30


class UnknownTokenError(DataError):
    pass


@dataclass(frozen=True)
class AgentConfig:
    d: int = 64
    n_landmarks: int = 12

    @property
    def vocab(self) -> int:
        return vocab_size(self.n_landmarks)

    @property
    def feat_dim(self) -> int:
        return self.n_landmarks + GEOM_FEATURES


# parameter registry: name -> shape builder; order fixes the seeded init stream
def _param_shapes(cfg: AgentConfig) -> list[tuple[str, tuple[int, ...]]]:
    d, f = cfg.d, cfg.feat_dim
    return [
        ("emb", (cfg.vocab, d)),
        ("enc_zr_w", (2 * d, 2 * d)),
        ("enc_zr_b", (2 * d,)),
        ("enc_n_w", (2 * d, d)),
        ("enc_n_b", (d,)),
        ("obs_w", (f, d)),
        ("obs_b", (d,)),
        ("dec_zr_w", (3 * d, 2 * d)),
        ("dec_zr_b", (2 * d,)),
        ("dec_n_w", (3 * d, d)),
        ("dec_n_b", (d,)),
        ("q_w", (2 * d, d)),
        ("q_b", (d,)),
        ("v_w", (d, 1)),
        ("v_b", (1,)),
    ]


class ModelParams:
    """Named parameter tensors plus the agent configuration."""

    def __init__(self, config: AgentConfig, tensors: dict[str, Tensor]):
        self.config = config
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def values(self):
        return self.tensors.values()

    def zero_grad(self):
        for t in self.tensors.values():
            t.grad = None

    @staticmethod
    def init(config: AgentConfig, seed: int) -> "ModelParams":
        rng = np.random.default_rng(seed)
        scale = 1.0 / np.sqrt(config.d)
        tensors = {}
        for name, shape in _param_shapes(config):
            if name.endswith("_b"):
                data = np.zeros(shape)
            else:
                data = rng.uniform(-scale, scale, size=shape)
            tensors[name] = Tensor(data, requires_grad=True)
        return ModelParams(config, tensors)

    def to_dict(self) -> dict:
        return {
            "version": 1,
            "config": {"d": self.config.d, "n_landmarks": self.config.n_landmarks},
            "tensors": {
                name: {
                    "shape": list(t.data.shape),
                    "dtype": "float64",
                    "data": base64.b64encode(np.ascontiguousarray(t.data).tobytes()).decode(),
                }
                for name, t in sorted(self.tensors.items())
            },
        }

    @staticmethod
    def from_dict(obj: dict) -> "ModelParams":
        if obj.get("version") != 1:
            raise DataError(f"unsupported checkpoint version {obj.get('version')!r}")
        cfg = AgentConfig(**obj["config"])
        missing = {n for n, _ in _param_shapes(cfg)} - set(obj["tensors"])
        if missing:
            raise DataError(f"checkpoint missing tensors: {sorted(missing)}")
        # rebuild in registry order so reductions over the parameter set
        # (e.g. the gradient-norm clip) sum in the same order as a fresh init
        tensors = {}
        for name, _ in _param_shapes(cfg):
            rec = obj["tensors"][name]
            raw = base64.b64decode(rec["data"])
            data = np.frombuffer(raw, dtype=np.float64).reshape(rec["shape"]).copy()
            tensors[name] = Tensor(data, requires_grad=True)
        return ModelParams(cfg, tensors)


@dataclass
class AgentState:
    h: Tensor  # (d,) hidden vector
    node: NodeId
    heading: float


@dataclass
class StepRecord:
    cand_nodes: tuple[NodeId, ...]  # movement candidates; the STOP slot follows them
    probs: np.ndarray  # distribution actually acted on (post-mask if an event fired)
    chosen: int  # index into cand_nodes, or len(cand_nodes) for STOP
    log_prob: Tensor | None  # log-probability of the chosen action, if requested
    value: Tensor | None  # scalar critic value, if requested
    reward: float = 0.0
    event_fired: bool = False
    pre_mask_probs: np.ndarray | None = None
    log_prob_row: Tensor | None = None  # full log-distribution, kept on request


@dataclass
class RolloutRecord:
    path_id: str
    nodes: list[NodeId]
    steps: list[StepRecord]
    encoding: Tensor  # (d,) final decoder hidden state
    terminated: bool  # False when the step budget ran out before STOP
    fired: tuple[PerturbationEvent, ...] = ()
    rewarded: bool = False  # whether per-step rewards were populated

    @property
    def max_steps_exceeded(self) -> bool:
        return not self.terminated


# -- batched forward engine -----------------------------------------------------


def _gru(params: ModelParams, prefix: str, x: Tensor, h: Tensor) -> Tensor:
    d = params.config.d
    xh = ad.concat([x, h], axis=1)
    zr = ad.sigmoid(ad.add(ad.matmul(xh, params[f"{prefix}_zr_w"]), params[f"{prefix}_zr_b"]))
    z = ad.slice_cols(zr, 0, d)
    r = ad.slice_cols(zr, d, 2 * d)
    xn = ad.concat([x, ad.mul(r, h)], axis=1)
    n = ad.tanh(ad.add(ad.matmul(xn, params[f"{prefix}_n_w"]), params[f"{prefix}_n_b"]))
    return ad.lerp(h, n, z)


def encode_instruction_batch(
    params: ModelParams, token_rows: list[tuple[int, ...]]
) -> tuple[Tensor, np.ndarray]:
    """Encode a batch of token instructions.

    Returns contexts (B, L, d) and a 0/1 validity mask (B, L); padded
    positions hold zero context rows and are masked out of attention.
    """
    cfg = params.config
    b = len(token_rows)
    lmax = max(len(row) for row in token_rows)
    ids = np.zeros((b, lmax), dtype=np.int64)
    mask = np.zeros((b, lmax))
    for i, row in enumerate(token_rows):
        for tok in row:
            if not (0 <= tok < cfg.vocab):
                raise UnknownTokenError(f"token {tok} outside vocabulary of {cfg.vocab}")
        ids[i, : len(row)] = row
        mask[i, : len(row)] = 1.0
    h = Tensor(np.zeros((b, cfg.d)))
    outs = []
    for pos in range(lmax):
        x = ad.take_rows(params["emb"], ids[:, pos])
        h_new = _gru(params, "enc", x, h)
        col = mask[:, pos : pos + 1]
        if col.all():
            h = h_new
            outs.append(h)
        else:
            m = Tensor(col)
            h = ad.lerp(h, h_new, m)
            outs.append(ad.mul(m, h))  # padded rows contribute zero context
    return ad.stack(outs, axis=1), mask


def encode_instruction(params: ModelParams, tokens) -> Tensor:
    ctx, _ = encode_instruction_batch(params, [tuple(tokens)])
    return ad.index0(ctx, 0)


def _candidate_features(obs: Observation, n_landmarks: int) -> np.ndarray:
    """(J+1, F) feature rows: landmark one-hot plus geometry; STOP row is zero."""
    n = obs.n_candidates
    feats = np.zeros((n, n_landmarks + GEOM_FEATURES))
    for k in range(n):
        lm = obs.lm_ids[k]
        if lm >= 0:
            feats[k, lm % n_landmarks] = 1.0
    feats[:, n_landmarks:] = obs.geom
    return feats


def _forward_step(
    params: ModelParams,
    h: Tensor,  # (B, d)
    ctx: Tensor,  # (B, L, d)
    ctx_mask: np.ndarray,  # (B, L)
    observations: list[Observation],
    attn_mask: Tensor | None = None,  # additive mask, precomputed by callers in loops
    need_values: bool = True,
    need_probs_graph: bool = True,
) -> tuple[Tensor, Tensor, Tensor | None, Tensor]:
    """One decoder step for a batch. Returns (probs, log_probs, values, h_new)."""
    cfg = params.config
    b = len(observations)
    if attn_mask is None:
        attn_mask = Tensor(np.where(ctx_mask > 0, 0.0, NEG_INF))
    jmax = max(o.n_candidates for o in observations)
    feats = np.zeros((b, jmax, cfg.feat_dim))
    cand_mask = np.zeros((b, jmax))
    for i, o in enumerate(observations):
        feats[i, : o.n_candidates] = _candidate_features(o, cfg.n_landmarks)
        cand_mask[i, : o.n_candidates] = 1.0

    u = ad.tanh(ad.add(ad.matmul(Tensor(feats), params["obs_w"]), params["obs_b"]))
    counts = cand_mask.sum(axis=1, keepdims=True)
    pooled = ad.mul(
        ad.tsum(ad.mul(u, Tensor(cand_mask[:, :, None])), axis=1), Tensor(1.0 / counts)
    )

    scores = ad.mul(ad.bmv(ctx, h), Tensor(1.0 / np.sqrt(cfg.d)))
    attn = ad.softmax(ad.add(scores, attn_mask))
    attended = ad.bvm(attn, ctx)

    h_new = _gru(params, "dec", ad.concat([attended, pooled], axis=1), h)

    q = ad.tanh(
        ad.add(ad.matmul(ad.concat([h_new, attended], axis=1), params["q_w"]), params["q_b"])
    )
    logits = ad.add(ad.bmv(u, q), Tensor(np.where(cand_mask > 0, 0.0, NEG_INF)))
    log_probs = ad.log_softmax(logits)
    probs = ad.exp(log_probs) if need_probs_graph else Tensor(np.exp(log_probs.data))
    values = None
    if need_values:
        values = ad.reshape(ad.add(ad.matmul(h_new, params["v_w"]), params["v_b"]), (b,))
    return probs, log_probs, values, h_new


def step(
    params: ModelParams, state: AgentState, obs: Observation, ctx: Tensor
) -> tuple[Tensor, Tensor, AgentState]:
    """Single-episode decoder step: action distribution, value, updated state.

    The returned state carries the new hidden vector; the caller moves the
    node/heading once an action has actually been selected.
    """
    ctx_b = ad.reshape(ctx, (1,) + ctx.shape)
    h_b = ad.reshape(state.h, (1,) + state.h.shape)
    probs, _, values, h_new = _forward_step(
        params, h_b, ctx_b, np.ones((1, ctx.shape[0])), [obs]
    )
    return (
        ad.index0(probs, 0),
        ad.index0(values, 0),
        AgentState(h=ad.index0(h_new, 0), node=state.node, heading=state.heading),
    )


# -- rollouts ---------------------------------------------------------------------


@dataclass
class RolloutJob:
    """One episode's slot in a batched rollout."""

    episode: Episode
    scene: object  # Scene or SceneView
    teacher_path: tuple[NodeId, ...] | None = None  # defaults to the episode GT
    events: tuple[PerturbationEvent, ...] = ()
    pre_imposed: bool = False  # delete event edges up front (teacher-forced passes)
    reward_fn: object = None  # callable(view, episode, prev, cur, stopped, done) -> float
    force_teacher_steps: int = 0  # sample mode: follow the reference for this prefix
    keep_log_prob_rows: bool = False  # retain full per-step log-distributions
    need_log_probs: bool = True  # False for encode-only walks (no imitation term)
    need_values: bool = True  # False when no policy-gradient term reads the critic

    # filled by the engine
    record: RolloutRecord = field(default=None, repr=False)


class _Row:
    __slots__ = (
        "job", "view", "node", "heading", "alive", "pending", "fired",
        "nodes", "steps", "encoding", "terminated",
    )

    def __init__(self, job: RolloutJob):
        self.job = job
        self.view = job.scene
        if job.pre_imposed:
            for ev in job.events:
                self.view = apply_event(self.view, ev)
            self.pending = []
        else:
            self.pending = list(job.events)
        self.node = job.episode.start
        self.heading = job.episode.heading
        self.alive = True
        self.fired = []
        self.nodes = [self.node]
        self.steps = []
        self.encoding = None
        self.terminated = False


def rollout_batch(
    params: ModelParams,
    jobs: list[RolloutJob],
    mode: str,
    max_steps: int = 15,
    rng: np.random.Generator | None = None,
    shared_ctx: tuple[Tensor, np.ndarray, list[int]] | None = None,
) -> list[RolloutRecord]:
    """Run a batch of episodes to completion under one decoding mode.

    teacher: follow the job's reference path step by step regardless of the
    predicted distribution. sample/greedy: follow the policy; when the chosen
    move crosses a pending event edge, the world loses that edge, the
    candidate's probability is zeroed, the distribution is renormalized and a
    replacement action is drawn (resampled / next-best).
    """
    if mode not in (TEACHER, SAMPLE, GREEDY):
        raise ValueError(f"unknown rollout mode {mode!r}")
    if mode == SAMPLE and rng is None:
        raise ValueError("sample mode needs an rng")
    cfg = params.config
    rows = [_Row(job) for job in jobs]
    for row in rows:
        if row.job.teacher_path is None:
            row.job.teacher_path = tuple(row.job.episode.path)

    if shared_ctx is None:
        ctx, ctx_mask = encode_instruction_batch(
            params, [job.episode.instruction for job in jobs]
        )
    else:
        # reuse a batch-of-episodes encoding: pick each job's row out of it
        base_ctx, base_mask, job_rows = shared_ctx
        ctx = ad.take_rows(base_ctx, job_rows)
        ctx_mask = base_mask[job_rows]
    attn_mask = Tensor(np.where(ctx_mask > 0, 0.0, NEG_INF))
    h = Tensor(np.zeros((len(rows), cfg.d)))
    any_values = any(job.need_values for job in jobs)

    for t in range(max_steps):
        if not any(r.alive for r in rows):
            break
        observations = [
            observe(r.view, r.node, r.heading, cfg.n_landmarks) for r in rows
        ]
        probs, log_probs, values, h = _forward_step(
            params,
            h,
            ctx,
            ctx_mask,
            observations,
            attn_mask,
            need_values=any_values,
            need_probs_graph=mode != TEACHER,
        )
        probs_data = probs.data

        for i, row in enumerate(rows):
            if not row.alive:
                continue
            obs = observations[i]
            n_cands = obs.n_candidates
            stop_idx = obs.stop_index
            p_row = probs_data[i, :n_cands]

            if mode == TEACHER or (mode == SAMPLE and t < row.job.force_teacher_steps):
                chosen = _teacher_choice(row, obs)
            else:
                if not np.all(np.isfinite(p_row)):
                    from .errors import NumericError

                    raise NumericError(
                        f"non-finite action distribution on {row.job.episode.path_id!r}"
                    )
                if mode == GREEDY:
                    chosen = int(np.argmax(p_row))
                else:
                    chosen = int(rng.choice(n_cands, p=p_row / p_row.sum()))

            fired_here = False
            pre_mask = None
            lp = None
            acted_probs = p_row.copy()
            if mode != TEACHER:
                # crossing a pending event edge deletes it and forces a re-choice
                p_t = ad.index0(probs, i)  # (jmax,); padded slots are exactly 0
                masked_any = False
                mask_vec = np.ones(p_t.shape[0])
                while chosen != stop_idx:
                    ev = _pending_event_for(row, obs.cand_nodes[chosen])
                    if ev is None:
                        break
                    row.view = apply_event(row.view, ev)
                    row.pending.remove(ev)
                    row.fired.append(ev)
                    fired_here = True
                    if pre_mask is None:
                        pre_mask = p_row.copy()
                    mask_vec[chosen] = 0.0
                    p_t = ad.mul(p_t, Tensor(mask_vec.copy()))
                    p_t = ad.div(p_t, ad.tsum(p_t))
                    masked_any = True
                    acted_probs = p_t.data[:n_cands].copy()
                    if mode == GREEDY:
                        chosen = int(np.argmax(acted_probs))
                    else:
                        chosen = int(rng.choice(n_cands, p=acted_probs / acted_probs.sum()))
                if masked_any:
                    lp = ad.log(ad.index0(p_t, chosen))
            if lp is None and row.job.need_log_probs:
                lp = ad.index2(log_probs, i, chosen)

            step_rec = StepRecord(
                cand_nodes=obs.cand_nodes,
                probs=acted_probs,
                chosen=chosen,
                log_prob=lp,
                value=ad.index0(values, i) if (any_values and row.job.need_values) else None,
                event_fired=fired_here,
                pre_mask_probs=pre_mask,
                log_prob_row=ad.index0(log_probs, i) if row.job.keep_log_prob_rows else None,
            )
            row.steps.append(step_rec)

            prev = row.node
            stopped = chosen == stop_idx
            done = stopped or (t == max_steps - 1)
            if stopped:
                row.alive = False
                row.terminated = True
                row.encoding = ad.index0(h, i)
            else:
                nxt = obs.cand_nodes[chosen]
                row.heading = heading_between(row.view, row.node, nxt)
                row.node = nxt
                row.nodes.append(nxt)
                if t == max_steps - 1:
                    row.alive = False
                    row.encoding = ad.index0(h, i)
            if row.job.reward_fn is not None:
                step_rec.reward = row.job.reward_fn(
                    row.view, row.job.episode, prev, row.node, stopped, done
                )

    records = []
    for i, row in enumerate(rows):
        if row.encoding is None:  # exhausted the loop without stopping
            row.encoding = ad.index0(h, i)
        rec = RolloutRecord(
            path_id=row.job.episode.path_id,
            nodes=row.nodes,
            steps=row.steps,
            encoding=row.encoding,
            terminated=row.terminated,
            fired=tuple(row.fired),
            rewarded=row.job.reward_fn is not None,
        )
        row.job.record = rec
        records.append(rec)
    return records


def _teacher_choice(row: _Row, obs: Observation) -> int:
    path = row.job.teacher_path
    pos = len(row.nodes) - 1
    if row.nodes != list(path[: pos + 1]):
        raise InvalidPathError(
            f"teacher rollout diverged from reference on {row.job.episode.path_id!r}"
        )
    if pos == len(path) - 1:
        return obs.stop_index
    nxt = path[pos + 1]
    try:
        return obs.cand_nodes.index(nxt)
    except ValueError:
        raise InvalidPathError(
            f"reference step {path[pos]!r}->{nxt!r} not traversable"
        ) from None


def _pending_event_for(row: _Row, nxt: NodeId) -> PerturbationEvent | None:
    from .graph import edge_key

    ek = edge_key(row.node, nxt)
    for ev in row.pending:
        if edge_key(*ev.edge) == ek:
            return ev
    return None


def rollout(
    params: ModelParams,
    scene,
    episode: Episode,
    mode: str = TEACHER,
    events: tuple[PerturbationEvent, ...] = (),
    max_steps: int = 15,
    rng: np.random.Generator | None = None,
    teacher_path=None,
    reward_fn=None,
    pre_imposed: bool | None = None,
) -> RolloutRecord:
    """Single-episode rollout; see rollout_batch for the mode semantics."""
    if pre_imposed is None:
        pre_imposed = mode == TEACHER
    job = RolloutJob(
        episode=episode,
        scene=scene,
        teacher_path=tuple(teacher_path) if teacher_path is not None else None,
        events=tuple(events),
        pre_imposed=pre_imposed,
        reward_fn=reward_fn,
    )
    return rollout_batch(params, [job], mode, max_steps=max_steps, rng=rng)[0]


def encode_path(params: ModelParams, scene, episode: Episode, path,
                events: tuple[PerturbationEvent, ...] = ()) -> Tensor:
    """Trajectory encoding: final hidden state of a teacher-forced walk of `path`."""
    rec = rollout(
        params,
        scene,
        episode,
        mode=TEACHER,
        events=events,
        teacher_path=tuple(path),
        max_steps=len(path) + 1,
    )
    return rec.encoding
