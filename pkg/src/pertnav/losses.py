"""Training objectives: imitation, advantage-weighted policy gradient, and
the two contrastive terms over trajectory encodings.

The contrastive kernel is an InfoNCE over temperature-scaled cosine
similarities. In perturbation-free scenes the rollout encoding is pulled
toward the ground-truth trajectory encoding and pushed away from the
episode's detour-aware references (hard intra-negatives) and from other
minibatch encodings (inter-negatives); in perturbation-based scenes the
roles shift so the detour-aware reference of the imposed deletion becomes
the positive and references of other deletion positions become the hard
negatives.
"""
from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DataError, NumericError
from .graph import geodesic_distance


class LengthMismatchError(DataError):
    pass


class MissingRewardsError(DataError):
    pass


class ZeroNormVectorError(NumericError):
    pass


@dataclass(frozen=True)
class LossWeights:
    il_weight: float = 0.2  # weight of the imitation term
    free_weight: float = 1.0  # weight of the perturbation-free contrastive term
    pert_weight: float = 1.0  # weight of the perturbation-based contrastive term
    tau: float = 0.1  # contrastive temperature
    gamma: float = 0.9  # return discount for the policy-gradient term

    def __post_init__(self):
        if self.tau <= 0:
            raise ConfigError("tau must be positive")
        if min(self.il_weight, self.free_weight, self.pert_weight) < 0:
            raise ConfigError("loss weights must be nonnegative")

    def to_dict(self) -> dict:
        return {
            "il_weight": self.il_weight,
            "free_weight": self.free_weight,
            "pert_weight": self.pert_weight,
            "tau": self.tau,
            "gamma": self.gamma,
        }


def il_loss(record, teacher_path) -> Tensor:
    """Sum over steps of the negative log-probability of the teacher action."""
    teacher_path = list(teacher_path)
    if record.nodes != teacher_path:
        raise LengthMismatchError(
            f"record for {record.path_id!r} does not follow the teacher path"
        )
    if len(record.steps) != len(teacher_path):
        raise LengthMismatchError(
            f"record for {record.path_id!r} has {len(record.steps)} steps "
            f"for a {len(teacher_path)}-node teacher path"
        )
    return ad.neg(ad.tsum(ad.stack([s.log_prob for s in record.steps])))


def discounted_returns(rewards, gamma: float) -> list[float]:
    out = [0.0] * len(rewards)
    acc = 0.0
    for i in range(len(rewards) - 1, -1, -1):
        acc = rewards[i] + gamma * acc
        out[i] = acc
    return out


def rl_loss(record, gamma: float = 0.9, advantages=None) -> Tensor:
    """Advantage-weighted policy term plus a squared-error critic term.

    The advantage is the discounted return minus the detached critic value;
    it enters the surrogate as plain data, so gradients reach the critic only
    through the regression term. Pass `advantages` to pin them externally
    (e.g. for finite-difference checks of the surrogate).
    """
    if not record.rewarded:
        raise MissingRewardsError(f"record for {record.path_id!r} has no rewards")
    returns = discounted_returns([s.reward for s in record.steps], gamma)
    if advantages is None:
        advantages = [ret - float(s.value.data) for s, ret in zip(record.steps, returns)]
    log_probs = ad.stack([s.log_prob for s in record.steps])
    values = ad.stack([s.value for s in record.steps])
    policy = ad.tsum(ad.mul(log_probs, Tensor(-np.asarray(advantages))))
    diff = ad.sub(values, Tensor(returns))
    critic = ad.mul(Tensor(0.5), ad.tsum(ad.mul(diff, diff)))
    return ad.add(policy, critic)


def make_reward_fn(success_radius: float = 3.0):
    """Per-step reward: geodesic progress toward the goal, plus a terminal
    bonus of +2 when the episode ends within the success radius, else -2."""

    def reward(view, episode, prev, cur, stopped, done) -> float:
        goal = episode.goal
        r = 0.0
        if cur != prev:
            r += geodesic_distance(view, prev, goal) - geodesic_distance(view, cur, goal)
        if done:
            r += 2.0 if geodesic_distance(view, cur, goal) <= success_radius else -2.0
        return r

    return reward


def _require_nonzero(vec: Tensor):
    if float(np.linalg.norm(vec.data)) < 1e-12:
        raise ZeroNormVectorError("contrastive encoding has zero norm")


# Inside a shared_units() scope, each distinct tensor is normalized once and
# the subgraph is reused by every similarity that touches it. The cache must
# not outlive the tensors' values, so it exists only within the scope.
_UNIT_CACHE: dict[int, Tensor] | None = None


@contextmanager
def shared_units():
    global _UNIT_CACHE
    prev = _UNIT_CACHE
    _UNIT_CACHE = {}
    try:
        yield
    finally:
        _UNIT_CACHE = prev


def _unit(v: Tensor) -> Tensor:
    if _UNIT_CACHE is not None:
        hit = _UNIT_CACHE.get(id(v))
        if hit is not None:
            return hit
    _require_nonzero(v)
    u = ad.div(v, ad.norm(v))
    if _UNIT_CACHE is not None:
        _UNIT_CACHE[id(v)] = u
    return u


def info_nce(anchor: Tensor, positive: Tensor, negatives, tau: float) -> Tensor:
    """-log( exp(s_p/tau) / (exp(s_p/tau) + sum_n exp(s_n/tau)) ), cosine sims.

    Each vector is normalized once, so the similarities are plain dot
    products of unit vectors.
    """
    a_hat = _unit(anchor)
    inv_tau = Tensor(1.0 / tau)
    sp = ad.mul(ad.dot(a_hat, _unit(positive)), inv_tau)
    if not negatives:
        return ad.sub(sp, sp)  # single-term softmax: exactly zero, grads included
    sims = [sp]
    for n in negatives:
        sims.append(ad.mul(ad.dot(a_hat, _unit(n)), inv_tau))
    return ad.sub(ad.logsumexp(ad.stack(sims)), sp)


def contrastive_free(e_f: Tensor, e_g: Tensor, intra, inter, tau: float) -> Tensor:
    """Perturbation-free contrastive loss: one InfoNCE term against the
    episode's detour references, one against other minibatch encodings.
    An empty negative set contributes exactly zero."""
    return ad.add(info_nce(e_f, e_g, list(intra), tau), info_nce(e_f, e_g, list(inter), tau))


def contrastive_perturbed(e_p: Tensor, e_og: Tensor, intra, inter, tau: float) -> Tensor:
    """Perturbation-based contrastive loss: positive is the detour reference
    of the imposed deletion; hard negatives are references of the episode's
    other deletion positions."""
    return ad.add(info_nce(e_p, e_og, list(intra), tau), info_nce(e_p, e_og, list(inter), tau))
