"""Synthesis of the four short-form QA task types and the mixed training set."""

from __future__ import annotations

import enum
import json
import logging
import random
import re
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Iterator, Protocol, Sequence, TypeVar

from .kg_store import (
    CapacityError,
    CounterfactualError,
    Entity,
    Path,
    Triple,
    TripleStore,
    extract_paths,
    normalize_label,
    sample_triples,
    substitute_counterfactual,
    substitute_path_answer,
)
from .model_client import GenerationClient, GenerationRequest, map_ordered, stable_int
from .prompts import load_resource, resource_digests
from .rollout import has_reserved_tags

log = logging.getLogger(__name__)

PROMPT_FILES = [
    "straightforward_question.txt",
    "straightforward_context.txt",
    "reasoning_question.txt",
    "reasoning_context.txt",
    "counterfactual_entity.txt",
]
WORDS_PER_HOP = 150
SEGMENT_SEPARATOR = "\n\n"

S = TypeVar("S")


class TaskType(str, enum.Enum):
    STRAIGHTFORWARD = "Straightforward"
    REASONING = "ReasoningRequired"
    INCONSISTENT = "Inconsistent"
    COUNTERFACTUAL = "Counterfactual"


ID_PREFIX = {
    TaskType.STRAIGHTFORWARD: "sf",
    TaskType.REASONING: "rr",
    TaskType.INCONSISTENT: "ic",
    TaskType.COUNTERFACTUAL: "cf",
}


class SynthesisRejected(RuntimeError):
    """Generated text failed validation on every attempt."""


@dataclass(frozen=True)
class QASample:
    id: str
    context: str
    question: str
    answer: str
    task: TaskType
    provenance: tuple[str, ...] = ()

    def __post_init__(self):
        if not (self.context.strip() and self.question.strip() and self.answer.strip()):
            raise ValueError("context, question and answer must be non-empty")
        object.__setattr__(self, "task", TaskType(self.task))
        object.__setattr__(self, "provenance", tuple(self.provenance))

    def to_json(self) -> str:
        return json.dumps({
            "id": self.id,
            "task": self.task.value,
            "context": self.context,
            "question": self.question,
            "answer": self.answer,
            "provenance": list(self.provenance),
        }, ensure_ascii=False)

    @classmethod
    def from_dict(cls, d: dict) -> "QASample":
        return cls(d["id"], d["context"], d["question"], d["answer"], TaskType(d["task"]), tuple(d.get("provenance", ())))

    def length(self) -> int:
        """Whitespace-token count of context plus question."""
        return len(self.context.split()) + len(self.question.split())


@dataclass(frozen=True)
class MixRecipe:
    straightforward: int = 2000
    reasoning: int = 2000
    inconsistent: int = 1000
    counterfactual: int = 5000

    def __post_init__(self):
        if min(self.counts().values()) < 0:
            raise ValueError("recipe counts must be non-negative")

    def counts(self) -> dict[TaskType, int]:
        return {
            TaskType.STRAIGHTFORWARD: self.straightforward,
            TaskType.REASONING: self.reasoning,
            TaskType.INCONSISTENT: self.inconsistent,
            TaskType.COUNTERFACTUAL: self.counterfactual,
        }

    @property
    def total(self) -> int:
        return sum(self.counts().values())

    def scaled(self, divisor: int) -> "MixRecipe":
        return MixRecipe(*(c // divisor for c in self.counts().values()))


@dataclass(frozen=True)
class SynthesisConfig:
    temperature: float = 0.7
    max_tokens: int = 1024
    max_retries: int = 3
    cf_max_attempts: int = 3
    distractor_counts: tuple[int, ...] = (1, 2)
    workers: int = 1


DEFAULT_CONFIG = SynthesisConfig()


def prompt_digests() -> dict[str, str]:
    return resource_digests(PROMPT_FILES)


def _request(gen: GenerationClient, prompt: str, cfg: SynthesisConfig, seed: int) -> str:
    return gen.generate(GenerationRequest("", prompt, temperature=cfg.temperature,
                                          max_tokens=cfg.max_tokens, seed=seed % 2**31)).strip()


def _mentions(haystack: str, needle: str) -> bool:
    pattern = r"(?<!\w)" + re.escape(normalize_label(needle)) + r"(?!\w)"
    return re.search(pattern, normalize_label(haystack)) is not None


def _generate_validated(gen: GenerationClient, question_prompt: str, context_prompt: str, answer: str,
                        banned_in_question: Sequence[str], cfg: SynthesisConfig, key: tuple) -> tuple[str, str]:
    problems: list[str] = []
    for attempt in range(cfg.max_retries + 1):
        question = _request(gen, question_prompt, cfg, stable_int(*key, attempt, "question"))
        context = _request(gen, context_prompt, cfg, stable_int(*key, attempt, "context"))
        if not question or not context:
            problems.append("empty generation")
        elif answer not in context:
            problems.append(f"answer {answer!r} missing from context")
        elif has_reserved_tags(context) or has_reserved_tags(question):
            problems.append("reserved tag in generated text")
        elif any(_mentions(question, b) for b in banned_in_question):
            problems.append("bridge entity leaked into question")
        else:
            return question, context
    raise SynthesisRejected(f"{key[1]}: rejected after {cfg.max_retries} retries ({'; '.join(problems)})")


def build_straightforward(triple: Triple, gen: GenerationClient, *, seed: int = 0,
                          config: SynthesisConfig = DEFAULT_CONFIG, sample_id: str | None = None,
                          task: TaskType = TaskType.STRAIGHTFORWARD) -> QASample:
    fields = dict(triple=triple.as_text(), head=triple.head.label, relation=triple.relation.description,
                  tail=triple.tail.label)
    q_prompt = load_resource("straightforward_question.txt").format(**fields)
    c_prompt = load_resource("straightforward_context.txt").format(**fields)
    question, context = _generate_validated(gen, q_prompt, c_prompt, triple.tail.label, (), config,
                                            (seed, triple.id, task.value))
    return QASample(sample_id or f"{ID_PREFIX[task]}-{stable_int(seed, triple.id) % 10**10:010d}",
                    context, question, triple.tail.label, task, (triple.id,))


def build_reasoning(path: Path, gen: GenerationClient, *, seed: int = 0,
                    config: SynthesisConfig = DEFAULT_CONFIG, sample_id: str | None = None,
                    task: TaskType = TaskType.REASONING) -> QASample:
    fields = dict(chain=path.as_text(), head=path.head.label, tail=path.answer.label,
                  relation=" -> ".join(t.relation.description for t in path.hops),
                  n_words=WORDS_PER_HOP * path.n)
    q_prompt = load_resource("reasoning_question.txt").format(**fields)
    c_prompt = load_resource("reasoning_context.txt").format(**fields)
    question, context = _generate_validated(gen, q_prompt, c_prompt, path.answer.label,
                                            [b.label for b in path.bridges], config,
                                            (seed, path.id, task.value))
    return QASample(sample_id or f"{ID_PREFIX[task]}-{stable_int(seed, path.id) % 10**10:010d}",
                    context, question, path.answer.label, task, tuple(t.id for t in path.hops))


def build_inconsistent(anchor: QASample, distractors: Sequence[QASample], seed: int, *,
                       sample_id: str | None = None, task: TaskType = TaskType.INCONSISTENT) -> QASample:
    """Concatenate the anchor and up to two distractor contexts in seeded random order."""
    if len(distractors) > 2:
        raise ValueError("at most two distractors")
    for d in distractors:
        if normalize_label(d.answer) == normalize_label(anchor.answer):
            raise SynthesisRejected(f"distractor {d.id} shares the anchor answer {anchor.answer!r}")
        if anchor.answer in d.context:
            raise SynthesisRejected(f"distractor {d.id} context mentions the anchor answer {anchor.answer!r}")
    segments = [anchor.context] + [d.context for d in distractors]
    random.Random(seed).shuffle(segments)
    provenance = anchor.provenance + tuple(f"distractor:{d.id}" for d in distractors)
    return QASample(sample_id or f"{ID_PREFIX[task]}-{anchor.id}", SEGMENT_SEPARATOR.join(segments),
                    anchor.question, anchor.answer, task, provenance)


# --------------------------------------------------------------------------- counterfactual entities


class CounterfactualSource(Protocol):
    def __call__(self, triple: Triple, attempt: int) -> Entity: ...


class LLMCounterfactualSource:
    """Asks the generation backend for a similar but different entity."""

    def __init__(self, gen: GenerationClient, seed: int = 0, config: SynthesisConfig = DEFAULT_CONFIG):
        self.gen, self.seed, self.config = gen, seed, config

    def __call__(self, triple: Triple, attempt: int) -> Entity:
        prompt = load_resource("counterfactual_entity.txt").format(tail=triple.tail.label)
        text = _request(self.gen, prompt, self.config, stable_int(self.seed, triple.id, attempt, "cf"))
        label = text.splitlines()[0].strip().strip("\"'.") if text else ""
        if not label:
            raise CounterfactualError("empty counterfactual entity")
        return Entity.from_label(label)


class SameRelationCounterfactualSource:
    """Offline fallback: a random tail of another triple with the same relation."""

    def __init__(self, store: TripleStore, seed: int = 0):
        self.store, self.seed = store, seed
        self._all = sorted(store.entities.values())

    def __call__(self, triple: Triple, attempt: int) -> Entity:
        rng = random.Random(stable_int(self.seed, triple.id, attempt))
        pool = sorted({t.tail for t in self.store.with_relation(triple.relation.id)} - {triple.tail})
        if not pool:
            pool = [e for e in self._all if e.id not in (triple.tail.id, triple.head.id)]
        if not pool:
            raise CounterfactualError(f"no alternative entity for {triple.id}")
        return rng.choice(pool)


def _counterfactual_base(base: Triple | Path, cf_source: CounterfactualSource, attempts: int) -> tuple[Triple | Path, Entity]:
    last = "no attempts"
    for attempt in range(attempts):
        original = base if isinstance(base, Triple) else base.hops[-1]
        try:
            cf = cf_source(original, attempt)
            if isinstance(base, Triple):
                if cf.id == base.head.id:
                    raise CounterfactualError("counterfactual equals the head entity")
                return substitute_counterfactual(base, cf), cf
            return substitute_path_answer(base, cf), cf
        except CounterfactualError as exc:
            last = str(exc)
    raise SynthesisRejected(f"no usable counterfactual entity after {attempts} attempts ({last})")


def build_counterfactual(base: Triple | Path, gen: GenerationClient, cf_source: CounterfactualSource, *,
                         seed: int = 0, config: SynthesisConfig = DEFAULT_CONFIG,
                         sample_id: str | None = None) -> QASample:
    """Swap the (final) tail for a counterfactual entity, then synthesize from the altered fact."""
    altered, cf = _counterfactual_base(base, cf_source, config.cf_max_attempts)
    original_tail = base.tail if isinstance(base, Triple) else base.answer
    if isinstance(altered, Triple):
        sample = build_straightforward(altered, gen, seed=seed, config=config, sample_id=sample_id,
                                       task=TaskType.COUNTERFACTUAL)
    else:
        sample = build_reasoning(altered, gen, seed=seed, config=config, sample_id=sample_id,
                                 task=TaskType.COUNTERFACTUAL)
    if normalize_label(sample.answer) == original_tail.id:
        raise SynthesisRejected("counterfactual sample kept the factual answer")
    base_ids = (base.id,) if isinstance(base, Triple) else tuple(t.id for t in base.hops)
    return QASample(sample.id, sample.context, sample.question, sample.answer, sample.task,
                    base_ids + (f"cf:{cf.id}",))


# --------------------------------------------------------------------------- mixing


@dataclass
class MixStats:
    counts: dict[str, int] = field(default_factory=dict)
    rejected: dict[str, int] = field(default_factory=dict)
    avg_len: dict[str, float] = field(default_factory=dict)
    counterfactual_split: dict[str, int] = field(default_factory=dict)

    def as_dict(self) -> dict:
        return asdict(self)


def split_counterfactual(recipe: MixRecipe) -> dict[TaskType, int]:
    """Divide the counterfactual quota across the three factual task shapes
    in proportion to their own counts (largest remainder)."""
    base = {TaskType.STRAIGHTFORWARD: recipe.straightforward, TaskType.REASONING: recipe.reasoning,
            TaskType.INCONSISTENT: recipe.inconsistent}
    total = sum(base.values())
    if total == 0:
        return {TaskType.STRAIGHTFORWARD: recipe.counterfactual, TaskType.REASONING: 0, TaskType.INCONSISTENT: 0}
    exact = {k: recipe.counterfactual * v / total for k, v in base.items()}
    out = {k: int(v) for k, v in exact.items()}
    short = recipe.counterfactual - sum(out.values())
    for k in sorted(exact, key=lambda k: (-(exact[k] - out[k]), list(base).index(k)))[:short]:
        out[k] += 1
    return out


def _fill(label: str, needed: int, sources: Iterator[S], build: Callable[[S], QASample],
          workers: int, rejected: dict[str, int]) -> list[QASample]:
    """Build ``needed`` samples, skipping sources whose build is rejected.

    Sources are consumed in waves of exactly the outstanding count, so the
    result is independent of the worker count."""
    out: list[QASample] = []

    def attempt(src: S) -> QASample | None:
        try:
            return build(src)
        except SynthesisRejected as exc:
            log.debug("%s: %s", label, exc)
            return None

    while len(out) < needed:
        wave = [s for _, s in zip(range(needed - len(out)), sources)]
        if not wave:
            raise CapacityError(f"{label}: source exhausted after {len(out)} of {needed} samples "
                                f"({rejected.get(label, 0)} rejected)")
        for sample in map_ordered(attempt, wave, workers):
            if sample is None:
                rejected[label] = rejected.get(label, 0) + 1
            else:
                out.append(sample)
    return out


def _path_pool(store: TripleStore, needed: int, seed: int) -> list[Path]:
    if needed == 0:
        return []
    pool: list[Path] = []
    for n in (2, 3, 4):
        pool.extend(extract_paths(store, n, max_paths=2 * needed, seed=stable_int(seed, "paths", n)))
    random.Random(stable_int(seed, "path-shuffle")).shuffle(pool)
    return pool


def mix_dataset(recipe: MixRecipe, store: TripleStore, gen: GenerationClient, cf_source: CounterfactualSource,
                seed: int, config: SynthesisConfig = DEFAULT_CONFIG) -> tuple[list[QASample], MixStats]:
    """Synthesize exactly ``recipe`` samples and shuffle them with ``seed``.

    Straightforward and counterfactual-straightforward samples draw disjoint
    triples; reasoning samples, inconsistent-context anchors and
    counterfactual-reasoning bases draw disjoint paths. Inconsistent
    distractors are taken from the reasoning pool.
    """
    cf_split = split_counterfactual(recipe)
    stats = MixStats(counterfactual_split={k.value: v for k, v in cf_split.items()})
    rejected = stats.rejected
    w = config.workers

    triples = iter(sample_triples(store, len(store), stable_int(seed, "triples"))) if len(store) else iter(())
    n_paths = (recipe.reasoning + recipe.inconsistent + cf_split[TaskType.REASONING]
               + cf_split[TaskType.INCONSISTENT])
    paths = iter(_path_pool(store, n_paths, seed))

    sf = _fill(TaskType.STRAIGHTFORWARD.value, recipe.straightforward, triples,
               lambda t: build_straightforward(t, gen, seed=seed, config=config), w, rejected)
    rr = _fill(TaskType.REASONING.value, recipe.reasoning, paths,
               lambda p: build_reasoning(p, gen, seed=seed, config=config), w, rejected)

    def inconsistent_from(path: Path, task: TaskType, anchor_builder) -> QASample:
        anchor = anchor_builder(path)
        rng = random.Random(stable_int(seed, "distractors", path.id, task.value))
        k = rng.choice(config.distractor_counts)
        order = list(range(len(rr)))
        rng.shuffle(order)
        chosen: list[QASample] = []
        for j in order:
            if len(chosen) == k:
                break
            d = rr[j]
            if normalize_label(d.answer) != normalize_label(anchor.answer) and anchor.answer not in d.context:
                chosen.append(d)
        return build_inconsistent(anchor, chosen, stable_int(seed, "order", path.id), task=task)

    ic = _fill(TaskType.INCONSISTENT.value, recipe.inconsistent, paths,
               lambda p: inconsistent_from(p, TaskType.INCONSISTENT,
                                           lambda q: build_reasoning(q, gen, seed=seed, config=config)),
               w, rejected)

    cf_label = TaskType.COUNTERFACTUAL.value
    cf = _fill(cf_label, cf_split[TaskType.STRAIGHTFORWARD], triples,
               lambda t: build_counterfactual(t, gen, cf_source, seed=seed, config=config), w, rejected)
    cf += _fill(cf_label, cf_split[TaskType.REASONING], paths,
                lambda p: build_counterfactual(p, gen, cf_source, seed=seed, config=config), w, rejected)
    cf += _fill(cf_label, cf_split[TaskType.INCONSISTENT], paths,
                lambda p: inconsistent_from(p, TaskType.COUNTERFACTUAL,
                                            lambda q: build_counterfactual(q, gen, cf_source, seed=seed, config=config)),
                w, rejected)

    samples: list[QASample] = []
    for prefix, group in (("sf", sf), ("rr", rr), ("ic", ic), ("cf", cf)):
        for i, s in enumerate(group):
            samples.append(QASample(f"{prefix}-{i:05d}", s.context, s.question, s.answer, s.task, s.provenance))
    # distractor provenance refers to pre-renumbering ids; rewrite it
    renamed = {old.id: new.id for old, new in zip(rr, samples[len(sf):len(sf) + len(rr)])}
    samples = [QASample(s.id, s.context, s.question, s.answer, s.task,
                        tuple(_rename(p, renamed) for p in s.provenance)) for s in samples]
    random.Random(stable_int(seed, "global-shuffle")).shuffle(samples)

    for t in TaskType:
        group = [s for s in samples if s.task is t]
        stats.counts[t.value] = len(group)
        stats.avg_len[t.value] = round(sum(s.length() for s in group) / len(group), 1) if group else 0.0
    return samples, stats


def _rename(provenance_item: str, renamed: dict[str, str]) -> str:
    if provenance_item.startswith("distractor:"):
        old = provenance_item.split(":", 1)[1]
        return f"distractor:{renamed.get(old, old)}"
    return provenance_item


def write_dataset(samples: Iterable[QASample], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for s in samples:
            fh.write(s.to_json() + "\n")


def read_dataset(path) -> list[QASample]:
    with open(path, encoding="utf-8") as fh:
        return [QASample.from_dict(json.loads(line)) for line in fh if line.strip()]
