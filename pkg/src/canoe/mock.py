"""Domain-aware responders for :class:`~canoe.model_client.MockClient`.

These stand in for the synthesis LLM, the policy under training and the
re-inference model so the full pipeline runs offline and byte-reproducibly.
They read the same prompts a real backend would receive.
"""

from __future__ import annotations

import random
import re
from typing import Mapping, Sequence

from .model_client import GenerationRequest, MockClient
from .rewards import normalize
from .rollout import render_response, split_user_message

_TRIPLE = re.compile(r"\(([^()]+?), ([^()]+?), ([^()]+?)\)")
_CF_PROMPT = re.compile(r"similar to the (.+?) but different")
_CAPITALIZED = re.compile(r"\b[A-Z][\w'-]*(?: [A-Z][\w'-]*)*")
_SENTENCE_START_WORDS = {"The", "A", "An", "It", "Its", "This", "That", "These", "In", "According",
                         "Based", "What", "Which", "Who", "Where", "When", "Passage", "Question", "No", "I"}

NO_ANSWER = "No relevant information."

_FILLERS = [
    "It is widely discussed in reference works.",
    "Many sources describe it in detail.",
    "Its history has been documented for decades.",
    "The subject remains of broad public interest.",
    "Scholars have written extensively about it.",
]


def _parse_triples(text: str) -> list[tuple[str, str, str]]:
    return [tuple(x.strip() for x in m.groups()) for m in _TRIPLE.finditer(text)]


def _nested_question(hops: Sequence[tuple[str, str, str]]) -> str:
    head = hops[0][0]
    phrase = head
    for _, rel, _ in hops:
        phrase = f"the {rel} of {phrase}"
    return f"What is {phrase}?"


class SynthesisResponder:
    """Mock question/context/counterfactual generator.

    Recognises the packaged synthesis templates by their opening line and
    answers from the triples rendered inside them. Counterfactual entities
    are drawn from ``entity_pool`` (excluding the original) when given.
    """

    def __init__(self, entity_pool: Sequence[str] = ()):
        self.entity_pool = sorted(set(entity_pool))

    def __call__(self, req: GenerationRequest, rng: random.Random) -> str:
        msg = req.user_message
        if "sophisticated question generator" in msg:
            hops = _parse_triples(msg)
            if len(hops) == 1:
                h, r, _ = hops[0]
                return f"What is the {r} of {h}?"
            return _nested_question(hops)
        if "sophisticated context generator" in msg:
            hops = _parse_triples(msg)
            head = hops[0][0]
            sentences = [f"{head} is a notable subject."]
            for h, r, t in hops:
                sentences.append(f"The {r} of {h} is {t}.")
            sentences.append(rng.choice(_FILLERS))
            return " ".join(sentences)
        m = _CF_PROMPT.search(msg)
        if m:
            original = m.group(1)
            pool = [e for e in self.entity_pool if normalize(e) != normalize(original)]
            return rng.choice(pool) if pool else f"{original} Prime"
        return f"mock-{rng.getrandbits(32):08x}"


def _candidates(text: str) -> list[str]:
    spans = []
    for m in _CAPITALIZED.finditer(text):
        words = m.group(0).split()
        while words and words[0] in _SENTENCE_START_WORDS:
            words = words[1:]
        if words:
            spans.append(" ".join(words))
    return spans


class PolicyResponder:
    """A noisy stand-in policy: answers with an entity-like span from the context.

    The span choice, the wording and the output format vary with the request
    seed, so a group of rollouts carries a spread of rewards.
    """

    def __init__(self, format_error_rate: float = 0.25):
        self.format_error_rate = format_error_rate

    def __call__(self, req: GenerationRequest, rng: random.Random) -> str:
        try:
            context, question = split_user_message(req.user_message)
        except ValueError:
            context, question = req.user_message, ""
        spans = _candidates(context) or ["unknown"]
        # greedy decoding answers with the last-mentioned entity
        answer = spans[-1] if req.temperature == 0 else rng.choice(spans)
        think = f"The question asks: {question.strip()} The passage mentions {answer}."
        long_answer = f"According to the passage, the answer is {answer}."
        if req.temperature > 0 and rng.random() < self.format_error_rate:
            variant = rng.randrange(3)
            if variant == 0:
                return f"{long_answer} {answer}"
            if variant == 1:
                return f"<long_answer> {long_answer} </long_answer> <short_answer> {answer} </short_answer>"
            return (f"<short_answer> {answer} </short_answer> <think> {think} </think> "
                    f"<long_answer> {long_answer} </long_answer>")
        return render_response(think, long_answer, answer)


class KeywordLookupResponder:
    """Re-inference oracle that answers only from facts present in its context.

    ``answers`` maps a question to its gold label. The responder replies with
    that label when the label (normalized) occurs in the supplied context, and
    with a no-answer message otherwise.
    """

    def __init__(self, answers: Mapping[str, str]):
        self.answers = dict(answers)

    def __call__(self, req: GenerationRequest, rng: random.Random) -> str:
        context, question = split_user_message(req.user_message)
        label = self.answers.get(question.strip())
        if label is not None and normalize(label) in normalize(context):
            short, long_answer = label, f"The passage states that the answer is {label}."
        else:
            short, long_answer = NO_ANSWER, NO_ANSWER
        return render_response("Looking up the passage.", long_answer, short)


def synthesis_client(entity_pool: Sequence[str] = (), seed: int = 0, **kwargs) -> MockClient:
    return MockClient(SynthesisResponder(entity_pool), seed=seed, label="synthesis", **kwargs)


def policy_client(seed: int = 0, format_error_rate: float = 0.25, **kwargs) -> MockClient:
    return MockClient(PolicyResponder(format_error_rate), seed=seed, label="policy", **kwargs)


def lookup_client(answers: Mapping[str, str], seed: int = 0, **kwargs) -> MockClient:
    return MockClient(KeywordLookupResponder(answers), seed=seed, label="keyword-lookup", **kwargs)
