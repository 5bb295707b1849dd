"""Rule-based Dual-GRPO rewards: accuracy, proxy, format and their sum."""

from __future__ import annotations

import re
import string
from dataclasses import dataclass
from typing import Any

from .model_client import ClientError, GenerationClient, GenerationRequest
from .rollout import (
    DelimiterCollisionError,
    ParsedResponse,
    RolloutGroup,
    parse_response,
    render_plain_qa_prompt,
    render_system_prompt,
    render_user_message,
)

_ARTICLES = re.compile(r"\b(?:a|an|the)\b", re.IGNORECASE)
_EDGE_CHARS = string.punctuation + string.whitespace


class RewardComputationError(RuntimeError):
    """A reward could not be computed; the owning group must be dropped."""


@dataclass(frozen=True)
class MatchPolicy:
    case_fold: bool = True
    strip_punct_edges: bool = True
    whitespace_collapse: bool = True
    article_strip: bool = True


DEFAULT_POLICY = MatchPolicy()


def _normalize_once(text: str, policy: MatchPolicy) -> str:
    if policy.case_fold:
        text = text.casefold()
    if policy.article_strip:
        text = _ARTICLES.sub(" ", text)
    if policy.whitespace_collapse:
        text = " ".join(text.split())
    if policy.strip_punct_edges:
        text = text.strip(_EDGE_CHARS)
    return text


def normalize(text: str, policy: MatchPolicy = DEFAULT_POLICY) -> str:
    """Apply the policy until a fixed point, which makes it idempotent by construction."""
    while True:
        nxt = _normalize_once(text, policy)
        if nxt == text:
            return text
        text = nxt


def exact_match(prediction: str, gold: str, policy: MatchPolicy = DEFAULT_POLICY) -> bool:
    return normalize(prediction, policy) == normalize(gold, policy)


@dataclass(frozen=True)
class RewardBreakdown:
    r_acc: int
    r_proxy: int
    r_format: int

    def __post_init__(self):
        for name in ("r_acc", "r_proxy", "r_format"):
            if getattr(self, name) not in (0, 1):
                raise ValueError(f"{name} must be 0 or 1")

    @property
    def r_final(self) -> int:
        return self.r_acc + self.r_proxy + self.r_format

    def as_dict(self) -> dict[str, int]:
        return {"r_acc": self.r_acc, "r_proxy": self.r_proxy, "r_format": self.r_format, "r_final": self.r_final}


def accuracy_reward(parsed: ParsedResponse, gold: str, policy: MatchPolicy = DEFAULT_POLICY) -> int:
    if not gold:
        raise ValueError("gold answer must be non-empty")
    if parsed.short_answer is None:
        return 0
    return int(exact_match(parsed.short_answer, gold, policy))


def format_reward(parsed: ParsedResponse) -> int:
    return int(parsed.format_ok)


def composite(acc: int, proxy: int, fmt: int) -> RewardBreakdown:
    return RewardBreakdown(acc, proxy, fmt)


def proxy_reward(gen: GenerationClient, long_answer: str | None, question: str, gold: str,
                 policy: MatchPolicy = DEFAULT_POLICY, *, plain_prompt: bool = False,
                 max_tokens: int = 1024) -> int:
    """Re-ask ``question`` with the long answer standing in for the context.

    Decoding is greedy (temperature 0). A long answer that is absent, blank or
    carries a literal ``<context>`` tag earns 0 without calling the backend;
    a backend failure raises :class:`RewardComputationError`.
    """
    if not question or not gold:
        raise ValueError("question and gold must be non-empty")
    if long_answer is None or not long_answer.strip():
        return 0
    try:
        user = render_user_message(long_answer, question)
    except DelimiterCollisionError:
        return 0
    system = render_plain_qa_prompt() if plain_prompt else render_system_prompt()
    req = GenerationRequest(system, user, temperature=0.0, max_tokens=max_tokens, seed=0)
    try:
        raw = gen.generate(req)
    except ClientError as exc:
        raise RewardComputationError(f"proxy re-inference failed: {exc}") from exc
    parsed = parse_response(raw)
    if plain_prompt and parsed.short_answer is None:
        parsed = ParsedResponse(raw, short_answer=raw.strip())
    return accuracy_reward(parsed, gold, policy)


def score_response(parsed: ParsedResponse, question: str, gold: str, proxy_client: GenerationClient,
                   policy: MatchPolicy = DEFAULT_POLICY, plain_prompt: bool = False) -> RewardBreakdown:
    return composite(
        accuracy_reward(parsed, gold, policy),
        proxy_reward(proxy_client, parsed.long_answer, question, gold, policy, plain_prompt=plain_prompt),
        format_reward(parsed),
    )


def score_group(group: RolloutGroup, question: str, gold: str, proxy_client: GenerationClient,
                policy: MatchPolicy = DEFAULT_POLICY, plain_prompt: bool = False) -> RolloutGroup:
    """Fill ``group.rewards``. Marks the group incomplete if any proxy call fails."""
    try:
        group.rewards = [score_response(r, question, gold, proxy_client, policy, plain_prompt)
                         for r in group.responses]
    except RewardComputationError as exc:
        group.incomplete = True
        group.errors.append(str(exc))
    return group


def reward_rows(group: RolloutGroup) -> list[dict[str, Any]]:
    return [{"sample_id": group.sample_id, "index": i, **rb.as_dict()}
            for i, rb in enumerate(group.rewards) if rb is not None]
