"""Dual-GRPO prompt rendering, tagged-response grammar and group rollouts."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any

from .model_client import (
    ClientError,
    GenerationClient,
    GenerationRequest,
    map_ordered,
    stable_int,
)
from .prompts import load_resource, pinned_digest, sha256_text

if TYPE_CHECKING:
    from .rewards import RewardBreakdown

TAGS = ("think", "long_answer", "short_answer")
SYSTEM_PROMPT_RESOURCE = "dual_grpo_system.txt"
PLAIN_QA_RESOURCE = "plain_qa_system.txt"
DEFAULT_G = 7
DEFAULT_ROLLOUT_TEMPERATURE = 0.9

_ANY_TAG = re.compile(r"</?(?:think|long_answer|short_answer)>")
_CONTEXT_TAG = re.compile(r"</?context>")
_STRICT = re.compile(
    r"\s*<think>(.*?)</think>\s*<long_answer>(.*?)</long_answer>\s*<short_answer>(.*?)</short_answer>\s*",
    re.DOTALL,
)
_WRAPPED = re.compile(r"<context>(.*)</context>\n\n(.*)", re.DOTALL)


class PromptResourceError(RuntimeError):
    pass


class DelimiterCollisionError(ValueError):
    """Text contains a literal tag that would break the prompt/response grammar."""


def render_system_prompt(verify: bool = True) -> str:
    text = load_resource(SYSTEM_PROMPT_RESOURCE)
    if verify and sha256_text(text) != pinned_digest(SYSTEM_PROMPT_RESOURCE):
        raise PromptResourceError("system prompt resource does not match its pinned digest")
    return text


def render_plain_qa_prompt() -> str:
    return load_resource(PLAIN_QA_RESOURCE)


def has_reserved_tags(text: str) -> bool:
    return bool(_ANY_TAG.search(text) or _CONTEXT_TAG.search(text))


def render_user_message(context: str, instruction: str) -> str:
    if not context or not instruction:
        raise ValueError("context and instruction must be non-empty")
    if _CONTEXT_TAG.search(context):
        raise DelimiterCollisionError("context contains a literal <context> tag")
    return f"<context>{context}</context>\n\n{instruction}"


def split_user_message(message: str) -> tuple[str, str]:
    """Inverse of :func:`render_user_message`."""
    m = _WRAPPED.fullmatch(message)
    if not m:
        raise ValueError("message is not a wrapped context + instruction")
    return m.group(1), m.group(2)


def render_response(think: str, long_answer: str, short_answer: str) -> str:
    return (f"<think> {think} </think> <long_answer> {long_answer} </long_answer> "
            f"<short_answer> {short_answer} </short_answer>")


@dataclass(frozen=True)
class ParsedResponse:
    raw: str
    think: str | None = None
    long_answer: str | None = None
    short_answer: str | None = None
    format_ok: bool = False


def _recover(raw: str, tag: str) -> str | None:
    if raw.count(f"<{tag}>") != 1 or raw.count(f"</{tag}>") != 1:
        return None
    m = re.search(rf"<{tag}>(.*?)</{tag}>", raw, re.DOTALL)
    return m.group(1).strip() if m else None


def parse_response(raw: str) -> ParsedResponse:
    """Strict grammar: think, long_answer, short_answer once each, in order,
    separated only by whitespace. Violations give ``format_ok=False`` and any
    segment that still appears exactly once as a closed pair."""
    m = _STRICT.fullmatch(raw)
    if m and not any(_ANY_TAG.search(g) for g in m.groups()):
        think, long_answer, short_answer = (g.strip() for g in m.groups())
        return ParsedResponse(raw, think, long_answer, short_answer, True)
    return ParsedResponse(raw, *(_recover(raw, t) for t in TAGS), False)


@dataclass
class RolloutGroup:
    sample_id: str
    responses: list[ParsedResponse]
    logp_new: list[float | None]
    logp_old: list[float | None]
    logp_ref: list[float | None]
    rewards: list["RewardBreakdown | None"] = field(default_factory=list)
    incomplete: bool = False
    errors: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.incomplete:
            n = len(self.responses)
            if n < 2:
                raise ValueError("a rollout group needs G >= 2 responses")
            if not (len(self.logp_new) == len(self.logp_old) == len(self.logp_ref) == n):
                raise ValueError("per-response lists must share length G")
        if not self.rewards:
            self.rewards = [None] * len(self.responses)

    @property
    def G(self) -> int:
        return len(self.responses)

    @property
    def scored(self) -> bool:
        return all(lp is not None for lp in self.logp_new)

    def log_rows(self) -> list[dict[str, Any]]:
        rows = []
        for i, r in enumerate(self.responses):
            rows.append({
                "sample_id": self.sample_id,
                "index": i,
                "raw": r.raw,
                "think": r.think,
                "long_answer": r.long_answer,
                "short_answer": r.short_answer,
                "format_ok": r.format_ok,
                "logp_new": self.logp_new[i],
                "logp_old": self.logp_old[i],
                "logp_ref": self.logp_ref[i],
            })
        return rows

    @classmethod
    def from_rows(cls, rows: list[dict[str, Any]]) -> "RolloutGroup":
        rows = sorted(rows, key=lambda r: r["index"])
        return cls(
            sample_id=rows[0]["sample_id"],
            responses=[parse_response(r["raw"]) for r in rows],
            logp_new=[r.get("logp_new") for r in rows],
            logp_old=[r.get("logp_old") for r in rows],
            logp_ref=[r.get("logp_ref") for r in rows],
        )


def chat_prefix(system_prompt: str, user_message: str) -> str:
    """Flat text the policy conditions on, used when scoring a completion."""
    return f"{system_prompt}\n\n{user_message}\n\n"


def rollout_group(gen: GenerationClient, sample, G: int = DEFAULT_G,
                  temperature: float = DEFAULT_ROLLOUT_TEMPERATURE, *, seed: int = 0,
                  ref: GenerationClient | None = None, max_tokens: int = 1024,
                  workers: int | None = None) -> RolloutGroup:
    """Draw ``G`` completions for one sample and parse them.

    ``sample`` needs ``id``, ``context`` and ``question`` attributes. When the
    backend can score, ``logp_new`` (and ``logp_old``, identical at collection
    time) hold the sequence log-probability of each completion; ``ref`` scores
    the reference log-probabilities. Unavailable values are ``None``.
    """
    if G < 2:
        raise ValueError("G must be >= 2; group statistics are undefined otherwise")
    system = render_system_prompt()
    user = render_user_message(sample.context, sample.question)
    prefix = chat_prefix(system, user)

    def one(i: int):
        req = GenerationRequest(system, user, temperature=temperature, max_tokens=max_tokens,
                                seed=stable_int(seed, sample.id, i) % 2**31)
        try:
            raw = gen.generate(req)
        except ClientError as exc:
            return None, f"response {i}: {exc}"
        lp_new = lp_ref = None
        if raw and gen.supports_scoring:
            lp_new = gen.score(prefix, raw).total_logprob
            if ref is not None and ref.supports_scoring:
                lp_ref = ref.score(prefix, raw).total_logprob
        return (parse_response(raw), lp_new, lp_ref), None

    results = map_ordered(one, range(G), workers or gen.max_in_flight)
    errors = [err for _, err in results if err]
    if errors:
        done = [r for r, _ in results if r]
        return RolloutGroup(sample.id, [r[0] for r in done], [r[1] for r in done], [r[1] for r in done],
                            [r[2] for r in done], incomplete=True, errors=errors)
    return RolloutGroup(
        sample_id=sample.id,
        responses=[r[0] for r, _ in results],
        logp_new=[r[1] for r, _ in results],
        logp_old=[r[1] for r, _ in results],
        logp_ref=[r[2] for r, _ in results],
    )
