"""Evaluation metrics, judges and report aggregation.

Short-form QA is scored with exact match and containment accuracy, multiple
choice with a keyword rule, long-form generation with a statement-level
grounding check (FaithScore) and an optional LLM quality rating.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Protocol, Sequence

from .model_client import ClientError, GenerationClient, GenerationRequest, map_ordered, perplexity
from .prompts import load_resource
from .rewards import DEFAULT_POLICY, MatchPolicy, exact_match, normalize
from .rollout import chat_prefix, parse_response, render_system_prompt

log = logging.getLogger(__name__)

DEFAULT_EVAL_TEMPERATURE = 0.7
OPTION_LETTERS = "ABCDEF"

SHORT_FORM = ("short_qa", "multiple_choice", "closed_book_mc")
LONG_FORM = ("longform_qa", "summarization", "simplification")
TASK_FAMILIES = SHORT_FORM + LONG_FORM

TEST_TEMPLATES = {
    "short_qa": "test_short_qa.txt",
    "multiple_choice": "test_multiple_choice.txt",
    "closed_book_mc": "test_closed_book_mc.txt",
    "longform_qa": "test_longform_qa.txt",
    "summarization": "test_summarization.txt",
    "simplification": "test_simplification.txt",
}
JUDGE_TEMPLATES = {
    "summarization": "judge_summarization.txt",
    "simplification": "judge_simplification.txt",
    "longform_qa": "judge_longform_qa.txt",
}

BINARY_METRICS = ("em", "acc", "mc", "faith")
REPORT_METRICS = BINARY_METRICS + ("quality",)

_SENTENCE_BOUNDARY = re.compile(r"(?<=[.!?])\s+(?=[A-Z])")
_STANDALONE_LETTER = re.compile(r"(?<![A-Za-z0-9])([A-F])(?![A-Za-z0-9])")
_RATING = re.compile(r"\[\[([1-5])\]\]")


class EvaluationError(RuntimeError):
    """A sample could not be scored (backend failure); it is reported as unscored."""


# --------------------------------------------------------------------------- records


@dataclass
class EvalRecord:
    dataset: str
    sample_id: str
    question: str
    context: str
    gold: str | list[str]
    response_short: str | None = None
    response_long: str | None = None
    metrics: dict[str, float] = field(default_factory=dict)
    prompt: str | None = None

    def __post_init__(self):
        if self.response_short is None and self.response_long is None:
            raise ValueError(f"{self.sample_id}: record needs a short or long response")
        for name, v in self.metrics.items():
            if name == "quality":
                ok = 1 <= v <= 5
            elif name == "perplexity":
                ok = v >= 1
            else:
                ok = 0 <= v <= 1
            if not ok:
                raise ValueError(f"{self.sample_id}: metric {name}={v} out of range")

    @property
    def golds(self) -> list[str]:
        return [self.gold] if isinstance(self.gold, str) else list(self.gold)

    @property
    def response(self) -> str:
        return self.response_long if self.response_long is not None else self.response_short

    def to_json(self) -> str:
        return json.dumps(asdict(self), ensure_ascii=False, sort_keys=True)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "EvalRecord":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


@dataclass(frozen=True)
class EvalTask:
    id: str
    context: str
    question: str
    golds: tuple[str, ...]
    task_family: str
    options: tuple[tuple[str, str], ...] = ()
    dataset: str = "default"

    def __post_init__(self):
        if self.task_family not in TASK_FAMILIES:
            raise ValueError(f"{self.id}: unknown task_family {self.task_family!r}")
        if not self.golds and self.task_family not in ("summarization", "simplification"):
            raise ValueError(f"{self.id}: golds must be non-empty")
        if self.task_family in ("multiple_choice", "closed_book_mc"):
            letters = [l for l, _ in self.options]
            if not self.options or self.golds[0] not in letters:
                raise ValueError(f"{self.id}: multiple-choice gold must be one of the option letters")

    @classmethod
    def from_dict(cls, d: Mapping[str, Any], dataset: str = "default") -> "EvalTask":
        opts = d.get("options") or ()
        if isinstance(opts, Mapping):
            opts = [{"letter": k, "text": v} for k, v in opts.items()]
        return cls(
            id=str(d["id"]),
            context=d.get("context", ""),
            question=d.get("question", ""),
            golds=tuple(d.get("golds", ())),
            task_family=d["task_family"],
            options=tuple((o["letter"], o["text"]) for o in opts),
            dataset=d.get("dataset", dataset),
        )

    def option_text(self, letter: str) -> str:
        return dict(self.options)[letter]


def read_tasks(path: str | Path) -> list[EvalTask]:
    path = Path(path)
    tasks = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if line.strip():
                try:
                    tasks.append(EvalTask.from_dict(json.loads(line), dataset=path.stem))
                except (KeyError, ValueError) as exc:
                    raise ValueError(f"{path}:{n}: {exc}") from exc
    return tasks


# --------------------------------------------------------------------------- metrics


def _require_golds(golds: Sequence[str]) -> None:
    if not golds:
        raise ValueError("golds must be non-empty")


def em_metric(response: str, golds: Sequence[str], policy: MatchPolicy = DEFAULT_POLICY) -> int:
    _require_golds(golds)
    return int(any(exact_match(response, g, policy) for g in golds))


def acc_contains(response: str, golds: Sequence[str], policy: MatchPolicy = DEFAULT_POLICY) -> int:
    _require_golds(golds)
    r = normalize(response, policy)
    return int(any(normalize(g, policy) in r for g in golds))


def first_option_letter(response: str) -> str | None:
    m = _STANDALONE_LETTER.search(response)
    return m.group(1) if m else None


def keyword_match_mc(response: str, correct_letter: str, correct_text: str) -> int:
    """First standalone letter A-F decides; without one, look for the option text."""
    if correct_letter not in OPTION_LETTERS or len(correct_letter) != 1:
        raise ValueError(f"option letter must be one of {OPTION_LETTERS}")
    letter = first_option_letter(response)
    if letter is not None:
        return int(letter == correct_letter)
    target = normalize(correct_text)
    return int(bool(target) and target in normalize(response))


# --------------------------------------------------------------------------- FaithScore


@dataclass(frozen=True)
class FaithVerdict:
    grounded: bool
    failing_statement: str | None = None
    statements: int = 0

    def __post_init__(self):
        if not self.grounded and self.failing_statement is None:
            raise ValueError("an ungrounded verdict must name the failing statement")


class FactChecker(Protocol):
    def check(self, context: str, statement: str) -> bool: ...


class PassThroughChecker:
    """Accepts every statement."""

    def check(self, context: str, statement: str) -> bool:
        return True


class ContextLookupChecker:
    """Supported iff the normalized statement occurs in the normalized context."""

    def __init__(self, policy: MatchPolicy = DEFAULT_POLICY):
        self.policy = policy

    def check(self, context: str, statement: str) -> bool:
        return normalize(statement, self.policy) in normalize(context, self.policy)


class LLMFactChecker:
    """Asks a generation backend whether the document supports the claim."""

    PROMPT = ("Document: {context}\n\nClaim: {statement}\n\n"
              "Is the claim fully supported by the document? Answer Yes or No.")

    def __init__(self, gen: GenerationClient, max_tokens: int = 8):
        self.gen = gen
        self.max_tokens = max_tokens

    def check(self, context: str, statement: str) -> bool:
        req = GenerationRequest("", self.PROMPT.format(context=context, statement=statement),
                                temperature=0.0, max_tokens=self.max_tokens, seed=0)
        return self.gen.generate(req).strip().lower().startswith("yes")


def split_statements(text: str, boundary: re.Pattern = _SENTENCE_BOUNDARY) -> list[str]:
    return [s.strip() for s in boundary.split(text.strip()) if s.strip()]


def faith_score(checker: FactChecker, context: str, response: str,
                splitter: Callable[[str], list[str]] = split_statements) -> FaithVerdict:
    if not context or not response or not response.strip():
        raise ValueError("context and response must be non-empty")
    statements = splitter(response)
    for s in statements:
        try:
            ok = checker.check(context, s)
        except ClientError as exc:
            raise EvaluationError(f"fact checker failed: {exc}") from exc
        if not ok:
            return FaithVerdict(False, s, len(statements))
    return FaithVerdict(True, None, len(statements))


# --------------------------------------------------------------------------- quality judge


def parse_rating(text: str) -> int | None:
    m = _RATING.search(text)
    return int(m.group(1)) if m else None


def quality_score(judge: GenerationClient, task_kind: str, inputs: Mapping[str, str] | str, response: str, *,
                  queries: int = 2, retries: int = 2, temperature: float = DEFAULT_EVAL_TEMPERATURE,
                  seed: int = 0) -> float | None:
    """Mean of ``queries`` judge ratings in [1, 5]; ``None`` when a query stays unparsable."""
    if task_kind not in JUDGE_TEMPLATES:
        raise ValueError(f"no judge template for {task_kind!r}")
    source = inputs if isinstance(inputs, str) else inputs["source"]
    prompt = load_resource(JUDGE_TEMPLATES[task_kind]).format(source=source, response=response)
    ratings = []
    for q in range(queries):
        rating = None
        for attempt in range(1 + retries):
            req = GenerationRequest("", prompt, temperature=temperature, max_tokens=64,
                                    seed=seed + 1000 * q + attempt)
            try:
                rating = parse_rating(judge.generate(req))
            except ClientError as exc:
                log.warning("judge call failed: %s", exc)
            if rating is not None:
                break
        if rating is None:
            return None
        ratings.append(rating)
    return math.fsum(ratings) / len(ratings)


# --------------------------------------------------------------------------- overconfidence


@dataclass
class OverconfidenceReport:
    selected: list[tuple[EvalRecord, float]]
    per_dataset: dict[str, int]
    shortfalls: dict[str, int]
    unscored: list[str]

    @property
    def mean_perplexity(self) -> float | None:
        if not self.selected:
            return None
        return math.fsum(p for _, p in self.selected) / len(self.selected)

    def rows(self) -> list[dict[str, Any]]:
        return [{"dataset": r.dataset, "sample_id": r.sample_id, "perplexity": p} for r, p in self.selected]


def record_prefix(record: EvalRecord) -> str:
    user = record.prompt if record.prompt is not None else f"{record.context}\n\n{record.question}"
    return chat_prefix(render_system_prompt(), user)


def overconfidence_report(scorer: GenerationClient, records: Sequence[EvalRecord], per_dataset_k: int,
                          datasets: Iterable[str] = ()) -> OverconfidenceReport:
    """Per dataset, keep the ``per_dataset_k`` unfaithful responses with the highest perplexity.

    ``records`` are assumed already flagged unfaithful. ``datasets`` lists
    datasets that should appear even with no records (they get a shortfall).
    Ties are broken by sample id so the selection is deterministic.
    """
    if per_dataset_k < 1:
        raise ValueError("per_dataset_k must be >= 1")
    scored: dict[str, list[tuple[EvalRecord, float]]] = {d: [] for d in datasets}
    unscored = []
    for r in records:
        scored.setdefault(r.dataset, [])
        try:
            ppl = perplexity(scorer.score(record_prefix(r), r.response))
        except (ClientError, ValueError) as exc:
            log.warning("%s: perplexity unavailable: %s", r.sample_id, exc)
            unscored.append(r.sample_id)
            continue
        scored[r.dataset].append((r, ppl))
    selected, per_dataset, shortfalls = [], {}, {}
    for name in sorted(scored):
        ranked = sorted(scored[name], key=lambda rp: (-rp[1], rp[0].sample_id))
        take = ranked[:per_dataset_k]
        selected.extend(take)
        per_dataset[name] = len(take)
        if len(take) < per_dataset_k:
            shortfalls[name] = per_dataset_k - len(take)
    return OverconfidenceReport(selected, per_dataset, shortfalls, unscored)


# --------------------------------------------------------------------------- aggregation


def dataset_group(name: str) -> str:
    """``ConFiQA/MR`` and ``ConFiQA/MC`` both report under ``ConFiQA``."""
    return name.split("/", 1)[0]


@dataclass
class AggregateReport:
    rows: list[dict[str, Any]]
    avg_em: float | None
    avg_acc: float | None

    def to_csv(self) -> str:
        buf = io.StringIO()
        cols = ["dataset", "n", *REPORT_METRICS]
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for row in self.rows:
            w.writerow([_fmt(row.get(c)) for c in cols])
        w.writerow(["Avg EM", "", _fmt(self.avg_em)] + [""] * (len(cols) - 3))
        w.writerow(["Avg Acc", "", _fmt(self.avg_acc)] + [""] * (len(cols) - 3))
        return buf.getvalue()

    def to_table(self) -> str:
        cols = ["dataset", "n", *REPORT_METRICS]
        body = [[str(row["dataset"]), str(row["n"]), *(_fmt(row.get(c)) or "-" for c in REPORT_METRICS)]
                for row in self.rows]
        widths = [max(len(c), *(len(r[i]) for r in body)) if body else len(c) for i, c in enumerate(cols)]

        def line(cells):
            return "  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(cells, widths)))

        out = [line(cols), line(["-" * w for w in widths])]
        out += [line(r) for r in body]
        out.append(f"Avg EM  {_fmt(self.avg_em) or '-'}")
        out.append(f"Avg Acc {_fmt(self.avg_acc) or '-'}")
        return "\n".join(out) + "\n"


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.1f}"
    return str(v)


def _mean(values: Sequence[float]) -> float:
    return math.fsum(values) / len(values)


def _column(row: Mapping[str, Any], preferred: str) -> float | None:
    # datasets without EM (e.g. keyword-matched multiple choice) fall back to mc, then FaithScore
    for name in (preferred, "mc", "faith"):
        if row.get(name) is not None:
            return row[name]
    return None


def aggregate(records: Iterable[EvalRecord]) -> AggregateReport:
    """Per-dataset means in percent plus macro Avg EM and Avg Acc.

    A dataset's EM column is its EM (else keyword accuracy, else FaithScore);
    its Acc column is containment accuracy with the same fallbacks. Quality is
    reported per dataset but stays out of the averages.
    """
    groups: dict[str, list[EvalRecord]] = {}
    for r in records:
        groups.setdefault(dataset_group(r.dataset), []).append(r)
    if not groups:
        raise ValueError("no scored records")
    rows = []
    for name in sorted(groups):
        recs = groups[name]
        row: dict[str, Any] = {"dataset": name, "n": len(recs)}
        for m in REPORT_METRICS:
            vals = [r.metrics[m] for r in recs if m in r.metrics]
            if vals:
                row[m] = _mean(vals) * (1 if m == "quality" else 100)
        rows.append(row)
    em_cols = [v for v in (_column(r, "em") for r in rows) if v is not None]
    acc_cols = [v for v in (_column(r, "acc") for r in rows) if v is not None]
    return AggregateReport(rows, _mean(em_cols) if em_cols else None, _mean(acc_cols) if acc_cols else None)


# --------------------------------------------------------------------------- test-time runs


def render_options(options: Sequence[tuple[str, str]]) -> str:
    return "\n".join(f"{letter}. {text}" for letter, text in options)


def render_test_prompt(task: EvalTask) -> str:
    template = load_resource(TEST_TEMPLATES[task.task_family])
    return template.format(context=task.context, question=task.question, options=render_options(task.options))


def extract_answer(raw: str, task_family: str) -> str:
    """Short-form tasks read the short_answer block, long-form the long_answer block.

    When the block is missing the whole response is used.
    """
    parsed = parse_response(raw)
    block = parsed.short_answer if task_family in SHORT_FORM else parsed.long_answer
    return block if block is not None else raw.strip()


def score_task(task: EvalTask, raw: str, checker: FactChecker | None = None,
               judge: GenerationClient | None = None, policy: MatchPolicy = DEFAULT_POLICY,
               seed: int = 0) -> EvalRecord:
    answer = extract_answer(raw, task.task_family)
    metrics: dict[str, float] = {}
    if task.task_family == "short_qa":
        metrics["em"] = em_metric(answer, task.golds, policy)
        metrics["acc"] = acc_contains(answer, task.golds, policy)
    elif task.task_family in ("multiple_choice", "closed_book_mc"):
        letter = task.golds[0]
        metrics["mc"] = keyword_match_mc(answer, letter, task.option_text(letter))
    else:
        if checker is None:
            raise ValueError("long-form tasks need a fact checker")
        if not answer:
            metrics["faith"] = 0
        else:
            metrics["faith"] = int(faith_score(checker, task.context, answer).grounded)
        if judge is not None:
            q = quality_score(judge, task.task_family, task.context, answer, seed=seed)
            if q is not None:
                metrics["quality"] = q
    short = answer if task.task_family in SHORT_FORM else None
    long_ = answer if task.task_family in LONG_FORM else None
    return EvalRecord(task.dataset, task.id, task.question, task.context, list(task.golds),
                      short, long_, metrics, prompt=render_test_prompt(task))


@dataclass
class EvalRun:
    records: list[EvalRecord]
    unscored: list[tuple[str, str]]


def evaluate(tasks: Sequence[EvalTask], gen: GenerationClient, checker: FactChecker | None = None,
             judge: GenerationClient | None = None, *, temperature: float = DEFAULT_EVAL_TEMPERATURE,
             seed: int = 0, max_tokens: int = 1024, workers: int = 1,
             system_prompt: str | None = None) -> EvalRun:
    """Generate one response per task and score it; backend failures land in ``unscored``."""
    system = render_system_prompt() if system_prompt is None else system_prompt

    def one(task: EvalTask):
        req = GenerationRequest(system, render_test_prompt(task), temperature=temperature,
                                max_tokens=max_tokens, seed=seed)
        try:
            raw = gen.generate(req)
            return score_task(task, raw, checker, judge, seed=seed), None
        except (ClientError, EvaluationError) as exc:
            return None, (task.id, str(exc))

    results = map_ordered(one, tasks, workers)
    return EvalRun([r for r, _ in results if r is not None], [e for _, e in results if e is not None])


def write_records(records: Iterable[EvalRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")


def read_records(path: str | Path) -> list[EvalRecord]:
    with open(path, encoding="utf-8") as fh:
        return [EvalRecord.from_dict(json.loads(line)) for line in fh if line.strip()]
