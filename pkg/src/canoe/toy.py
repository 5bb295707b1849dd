"""Desk-scale GRPO: a softmax logits table trained on tagged candidate responses.

States are synthetic QA items; actions are a fixed menu of candidate
responses whose rewards come from the real reward engine. The objective and
its analytic gradient are exact, so the whole loop can be checked against
finite differences while it trains.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from types import SimpleNamespace
from typing import Callable, Sequence

import numpy as np

from . import grpo
from .grpo import GroupBatch, GrpoConfig
from .mock import lookup_client
from .rewards import RewardBreakdown, score_response
from .rollout import parse_response, render_response

log = logging.getLogger(__name__)

STATS_COLUMNS = ["step", "mean_reward", "mean_r_acc", "mean_r_proxy", "mean_r_format",
                 "clip_fraction", "mean_kl", "objective"]


class GradientCheckError(RuntimeError):
    def __init__(self, step: int, error: float):
        super().__init__(f"gradient check failed at step {step}: max relative error {error:.3e}")
        self.step = step
        self.error = error


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


@dataclass
class ToyPolicy:
    logits: np.ndarray

    def __post_init__(self):
        self.logits = np.array(self.logits, dtype=np.float64)
        if self.logits.ndim != 2:
            raise ValueError("logits must be a (states, actions) table")

    @classmethod
    def uniform(cls, n_states: int, n_actions: int) -> "ToyPolicy":
        return cls(np.zeros((n_states, n_actions)))

    def log_probs(self) -> np.ndarray:
        return log_softmax(self.logits)

    def probs(self) -> np.ndarray:
        return np.exp(self.log_probs())

    def copy(self) -> "ToyPolicy":
        return ToyPolicy(self.logits.copy())

    def to_json(self) -> str:
        return json.dumps({"logits": self.logits.tolist()}, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "ToyPolicy":
        return cls(np.array(json.loads(text)["logits"]))


@dataclass
class ToyEnv:
    """Reward table over (state, action) built from per-action breakdowns."""

    breakdowns: list[list[RewardBreakdown]]
    responses: list[list[str]] = field(default_factory=list)
    labels: list[str] = field(default_factory=list)

    def __post_init__(self):
        widths = {len(row) for row in self.breakdowns}
        if len(widths) != 1:
            raise ValueError("every state needs the same number of actions")
        self.acc = np.array([[b.r_acc for b in row] for row in self.breakdowns], dtype=np.float64)
        self.proxy = np.array([[b.r_proxy for b in row] for row in self.breakdowns], dtype=np.float64)
        self.fmt = np.array([[b.r_format for b in row] for row in self.breakdowns], dtype=np.float64)
        self.rewards = self.acc + self.proxy + self.fmt

    @property
    def shape(self) -> tuple[int, int]:
        return self.rewards.shape

    @classmethod
    def two_arm(cls) -> "ToyEnv":
        return cls([[RewardBreakdown(1, 1, 1), RewardBreakdown(0, 0, 0)]], labels=["bandit"])

    @classmethod
    def from_items(cls, items: Sequence) -> "ToyEnv":
        """Build the candidate menu for each item and score it with the reward engine.

        ``items`` need ``question`` and ``answer``. The proxy reward uses a
        keyword-lookup re-inference model keyed on the items' questions.
        """
        if len(items) < 2:
            raise ValueError("need at least two items (wrong answers are borrowed from neighbours)")
        proxy = lookup_client({it.question: it.answer for it in items})
        breakdowns, responses = [], []
        for k, it in enumerate(items):
            wrong = items[(k + 1) % len(items)].answer
            menu = candidate_responses(it.answer, wrong)
            responses.append(menu)
            breakdowns.append([score_response(parse_response(r), it.question, it.answer, proxy) for r in menu])
        return cls(breakdowns, responses, [getattr(it, "id", str(k)) for k, it in enumerate(items)])

    @classmethod
    def bandit(cls, items: Sequence | None = None) -> "ToyEnv":
        """Single-state env over the candidate menu of ``items[0]``.

        Exactly one action earns r_final = 3; every other action earns at most 1.
        """
        if items is None:
            items = [SimpleNamespace(id="bandit", question="What is the capital of Velora?", answer="Marhal Rixlo"),
                     SimpleNamespace(id="neighbour", question="What is the currency of Velora?", answer="Tam Gold")]
        env = cls.from_items(list(items)[:2])
        return cls(env.breakdowns[:1], env.responses[:1], env.labels[:1])

    def expected(self, policy: ToyPolicy) -> dict[str, float]:
        p = policy.probs()
        return {
            "mean_reward": float(np.mean((p * self.rewards).sum(axis=1))),
            "mean_r_acc": float(np.mean((p * self.acc).sum(axis=1))),
            "mean_r_proxy": float(np.mean((p * self.proxy).sum(axis=1))),
            "mean_r_format": float(np.mean((p * self.fmt).sum(axis=1))),
        }


def candidate_responses(gold: str, wrong: str) -> list[str]:
    """Six tagged/untagged candidates: one fully correct, the rest worth at most 1."""
    think = "I look for the fact in the passage."
    return [
        render_response(think, f"According to the passage, the answer is {gold}.", gold),
        render_response(think, f"The passage points to {wrong}.", wrong),
        render_response(think, "The passage does not say.", "unknown"),
        render_response(think, f"It is probably {wrong}.", "not sure"),
        f"{gold}",
        f"<short_answer> {gold} </short_answer> <long_answer> I cannot tell. </long_answer> <think> {think} </think>",
    ]


def kl_to_reference(policy: ToyPolicy, ref: ToyPolicy) -> float:
    """Mean over states of the exact KL(policy || ref)."""
    lp, lr = policy.log_probs(), ref.log_probs()
    return float(np.mean((np.exp(lp) * (lp - lr)).sum(axis=1)))


# --------------------------------------------------------------------------- objective


def batch_objective(logits: np.ndarray, groups: Sequence[GroupBatch], cfg: GrpoConfig) -> float:
    """Mean over groups of the GRPO objective, with logp_new read from ``logits``."""
    lp = log_softmax(logits)
    vals = [grpo.objective(g.with_logp_new(lp[g.state, g.actions]), cfg) for g in groups]
    return float(np.mean(vals))


def batch_gradient(logits: np.ndarray, groups: Sequence[GroupBatch], cfg: GrpoConfig) -> np.ndarray:
    lp = log_softmax(logits)
    probs = np.exp(lp)
    grad = np.zeros_like(logits)
    for g in groups:
        weights = grpo.surrogate_logp_weights(g.with_logp_new(lp[g.state, g.actions]), cfg)
        # d logp(a|s) / d logits[s] = onehot(a) - pi(.|s)
        np.add.at(grad[g.state], g.actions, weights)
        grad[g.state] -= weights.sum() * probs[g.state]
    return grad / len(groups)


def finite_difference_gradient(logits: np.ndarray, groups: Sequence[GroupBatch], cfg: GrpoConfig,
                               h: float = 1e-5) -> np.ndarray:
    grad = np.zeros_like(logits)
    touched = sorted({g.state for g in groups})
    for s in touched:
        for a in range(logits.shape[1]):
            plus, minus = logits.copy(), logits.copy()
            plus[s, a] += h
            minus[s, a] -= h
            grad[s, a] = (batch_objective(plus, groups, cfg) - batch_objective(minus, groups, cfg)) / (2 * h)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-4) -> float:
    """max_k |a_k - n_k| / max(|a_k|, |n_k|, floor)."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def kink_margin(logits: np.ndarray, groups: Sequence[GroupBatch], cfg: GrpoConfig) -> float:
    """Distance of the nearest importance ratio to a clip boundary."""
    lp = log_softmax(logits)
    margins = []
    for g in groups:
        w = np.exp(lp[g.state, g.actions] - g.logp_old)
        margins.append(np.min(np.minimum(np.abs(w - (1 - cfg.epsilon)), np.abs(w - (1 + cfg.epsilon)))))
    return float(min(margins))


# --------------------------------------------------------------------------- training


def sample_groups(policy: ToyPolicy, ref: ToyPolicy, env: ToyEnv, G: int, rng: np.random.Generator,
                  states: Sequence[int] | None = None) -> list[GroupBatch]:
    lp = policy.log_probs()
    lr = ref.log_probs()
    groups = []
    for s in (range(env.shape[0]) if states is None else states):
        actions = rng.choice(env.shape[1], size=G, p=np.exp(lp[s]))
        groups.append(GroupBatch(
            rewards=env.rewards[s, actions],
            logp_new=lp[s, actions],
            logp_old=lp[s, actions],
            logp_ref=lr[s, actions],
            actions=actions,
            state=s,
        ))
    return groups


def toy_policy_step(policy: ToyPolicy, groups: Sequence[GroupBatch], cfg: GrpoConfig,
                    learning_rate: float | None = None) -> tuple[ToyPolicy, dict[str, float]]:
    """One gradient-ascent step on the batch objective."""
    lr = cfg.learning_rate if learning_rate is None else learning_rate
    grad = batch_gradient(policy.logits, groups, cfg)
    if not np.all(np.isfinite(grad)):
        raise grpo.NumericError("non-finite gradient; step aborted")
    lp = log_softmax(policy.logits)
    clip_flags, kls = [], []
    for g in groups:
        terms = grpo.objective_terms(g.with_logp_new(lp[g.state, g.actions]), cfg)
        clip_flags.append(terms["clip_fraction"])
        kls.append(terms["mean_kl_estimate"])
    stats = {
        "objective": batch_objective(policy.logits, groups, cfg),
        "clip_fraction": float(np.mean(clip_flags)),
        "kl_estimate": float(np.mean(kls)),
        "grad_norm": float(np.linalg.norm(grad)),
    }
    return ToyPolicy(policy.logits + lr * grad), stats


@dataclass
class TrainResult:
    policy: ToyPolicy
    reference: ToyPolicy
    stats: list[dict[str, float]]
    grad_checks: list[dict[str, float]]


def train(env: ToyEnv, cfg: GrpoConfig, steps: int, *, seed: int = 0, inner_epochs: int = 2,
          learning_rate: float = grpo.TOY_LEARNING_RATE, policy: ToyPolicy | None = None,
          grad_check_every: int = 10, grad_tolerance: float = 1e-5,
          on_step: Callable[[dict], None] | None = None) -> TrainResult:
    """Run GRPO on ``env``; the reference policy is the starting policy.

    Every ``grad_check_every`` steps the analytic gradient of the final inner
    epoch is compared against central differences (falling back to the
    on-policy point when a ratio sits within 1e-3 of a clip boundary); a
    failure raises :class:`GradientCheckError`.
    """
    if inner_epochs < 1:
        raise ValueError("inner_epochs must be >= 1")
    policy = policy.copy() if policy is not None else ToyPolicy.uniform(*env.shape)
    reference = policy.copy()
    rng = np.random.default_rng(seed)
    history, checks = [], []
    for step in range(1, steps + 1):
        groups = sample_groups(policy, reference, env, cfg.group_size, rng)
        start = policy.copy()
        epoch_stats = []
        for epoch in range(inner_epochs):
            if grad_check_every and step % grad_check_every == 0 and epoch == inner_epochs - 1:
                at = policy if kink_margin(policy.logits, groups, cfg) > 1e-3 else start
                err = max_relative_error(batch_gradient(at.logits, groups, cfg),
                                         finite_difference_gradient(at.logits, groups, cfg))
                checks.append({"step": step, "max_relative_error": err})
                if err >= grad_tolerance:
                    raise GradientCheckError(step, err)
            policy, st = toy_policy_step(policy, groups, cfg, learning_rate)
            epoch_stats.append(st)
        row = {"step": step, **env.expected(policy),
               "clip_fraction": float(np.mean([s["clip_fraction"] for s in epoch_stats])),
               "mean_kl": kl_to_reference(policy, reference),
               "objective": epoch_stats[-1]["objective"]}
        history.append(row)
        if on_step:
            on_step(row)
    return TrainResult(policy, reference, history, checks)


def steps_to_fraction(history: Sequence[dict], column: str, maximum: float = 1.0, fraction: float = 0.95) -> int | None:
    """First step whose ``column`` reaches ``fraction * maximum``."""
    for row in history:
        if row[column] >= fraction * maximum:
            return int(row["step"])
    return None
