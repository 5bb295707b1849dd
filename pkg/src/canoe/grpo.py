"""Group-relative policy optimisation: advantages, ratios, clipped surrogate, KL.

All log quantities are natural logs. Ratios are sequence level: one
``w_i = exp(logp_new_i - logp_old_i)`` per rollout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class DegenerateGroupError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


@dataclass(frozen=True)
class GrpoConfig:
    epsilon: float = 0.2
    beta: float = 0.04
    group_size: int = 7
    learning_rate: float = 1e-6
    std_floor: float = 1e-8

    def __post_init__(self):
        if not 0 < self.epsilon < 1:
            raise ValueError("epsilon must lie in (0, 1)")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.group_size < 2:
            raise ValueError("group_size must be >= 2")
        if self.std_floor <= 0:
            raise ValueError("std_floor must be > 0")


TOY_LEARNING_RATE = 0.1


def group_advantages(rewards, std_floor: float = 1e-8) -> np.ndarray:
    """(r - mean) / max(pop_std, std_floor); equal rewards give exact zeros."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 1 or r.size < 2:
        raise DegenerateGroupError("advantages need a group of at least two rewards")
    if np.all(r == r[0]):
        return np.zeros_like(r)
    centered = r - r.mean()
    std = math.sqrt(float(np.mean(centered**2)))
    return centered / max(std, std_floor)


def _checked_exp(x: float) -> float:
    try:
        out = math.exp(x)
    except OverflowError as exc:
        raise NumericError(f"exp overflow at {x}") from exc
    if not math.isfinite(out):
        raise NumericError(f"non-finite exp at {x}")
    return out


def importance_ratio(logp_new: float, logp_old: float) -> float:
    if not (math.isfinite(logp_new) and math.isfinite(logp_old)):
        raise NumericError("log-probabilities must be finite")
    return _checked_exp(logp_new - logp_old)


def clip(w: float, epsilon: float) -> float:
    return min(max(w, 1.0 - epsilon), 1.0 + epsilon)


def clipped_term(w: float, A: float, epsilon: float) -> float:
    if w <= 0:
        raise ValueError("importance ratio must be positive")
    return min(w * A, clip(w, epsilon) * A)


def is_clipped(w: float, A: float, epsilon: float) -> bool:
    """True where the clipped branch is active with a constant ratio, i.e. zero gradient."""
    return (A > 0 and w > 1.0 + epsilon) or (A < 0 and w < 1.0 - epsilon)


def kl_penalty(logp_new: float, logp_ref: float) -> float:
    """k3 estimator: exp(d) - d - 1 with d = logp_ref - logp_new; never negative."""
    if not (math.isfinite(logp_new) and math.isfinite(logp_ref)):
        raise NumericError("log-probabilities must be finite")
    d = logp_ref - logp_new
    # expm1 keeps precision when d is tiny
    return max(0.0, math.expm1(d) - d) if abs(d) < 1 else _checked_exp(d) - d - 1.0


@dataclass
class GroupBatch:
    rewards: np.ndarray
    logp_new: np.ndarray
    logp_old: np.ndarray
    logp_ref: np.ndarray
    advantages: np.ndarray | None = None
    actions: np.ndarray | None = None
    state: int | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        self.logp_new = np.asarray(self.logp_new, dtype=np.float64)
        self.logp_old = np.asarray(self.logp_old, dtype=np.float64)
        self.logp_ref = np.asarray(self.logp_ref, dtype=np.float64)
        n = self.rewards.size
        if not (self.logp_new.size == self.logp_old.size == self.logp_ref.size == n):
            raise ValueError("per-rollout arrays must share one length")
        if self.advantages is None:
            self.advantages = group_advantages(self.rewards)
        else:
            self.advantages = np.asarray(self.advantages, dtype=np.float64)

    @property
    def G(self) -> int:
        return self.rewards.size

    def with_logp_new(self, logp_new) -> "GroupBatch":
        return GroupBatch(self.rewards, logp_new, self.logp_old, self.logp_ref, self.advantages,
                          self.actions, self.state, self.extra)


def objective(batch: GroupBatch, cfg: GrpoConfig) -> float:
    """(1/G) sum_i min(w_i A_i, clip(w_i) A_i) - beta (1/G) sum_i k3_i."""
    G = batch.G
    surrogate = math.fsum(
        clipped_term(importance_ratio(n, o), a, cfg.epsilon)
        for n, o, a in zip(batch.logp_new, batch.logp_old, batch.advantages)
    )
    kl = math.fsum(kl_penalty(n, r) for n, r in zip(batch.logp_new, batch.logp_ref))
    return surrogate / G - cfg.beta * kl / G


def objective_terms(batch: GroupBatch, cfg: GrpoConfig) -> dict[str, float]:
    ws = [importance_ratio(n, o) for n, o in zip(batch.logp_new, batch.logp_old)]
    clipped = [is_clipped(w, a, cfg.epsilon) for w, a in zip(ws, batch.advantages)]
    kls = [kl_penalty(n, r) for n, r in zip(batch.logp_new, batch.logp_ref)]
    return {
        "objective": objective(batch, cfg),
        "clip_fraction": sum(clipped) / batch.G,
        "mean_kl_estimate": math.fsum(kls) / batch.G,
    }


def surrogate_logp_weights(batch: GroupBatch, cfg: GrpoConfig) -> np.ndarray:
    """d objective / d logp_new_i for each rollout.

    The surrogate contributes ``w_i A_i / G`` where the unclipped branch is
    active and nothing where the clip holds the ratio constant; the KL term
    contributes ``-beta (1 - exp(logp_ref_i - logp_new_i)) / G``.
    """
    G = batch.G
    out = np.empty(G)
    for i, (n, o, r, a) in enumerate(zip(batch.logp_new, batch.logp_old, batch.logp_ref, batch.advantages)):
        w = importance_ratio(n, o)
        g = 0.0 if is_clipped(w, a, cfg.epsilon) else w * a
        g -= cfg.beta * (1.0 - _checked_exp(r - n))
        out[i] = g / G
    return out
