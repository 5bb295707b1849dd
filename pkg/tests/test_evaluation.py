import json
import math
import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

from canoe.evaluation import (
    DEFAULT_EVAL_TEMPERATURE,
    ContextLookupChecker,
    EvalRecord,
    EvalTask,
    EvaluationError,
    LLMFactChecker,
    PassThroughChecker,
    acc_contains,
    aggregate,
    dataset_group,
    em_metric,
    evaluate,
    extract_answer,
    faith_score,
    first_option_letter,
    keyword_match_mc,
    overconfidence_report,
    parse_rating,
    quality_score,
    read_records,
    read_tasks,
    render_test_prompt,
    split_statements,
    write_records,
)
from canoe.model_client import ClientError, GenerationClient, MockClient, ScoredSequence, ScriptedClient, TransportError
from canoe.rewards import MatchPolicy

from metric_fixture import make_samples, ref_acc, ref_em, ref_mc


def rec(dataset="d", sid="s", metrics=None, short="x", long_=None, **kw):
    return EvalRecord(dataset, sid, "q?", "ctx", "gold", short, long_, metrics or {}, **kw)


class TestShortForm:
    def test_em_examples(self):
        assert em_metric("The Tokyo.", ["Tokyo"]) == 1
        assert em_metric("tokyo prefecture", ["Tokyo"]) == 0
        assert em_metric("Lyon", ["Paris", "lyon"]) == 1

    def test_acc_examples(self):
        assert acc_contains("It is Tokyo, Japan", ["Tokyo"]) == 1
        assert acc_contains("Kyoto", ["Tokyo"]) == 0

    def test_empty_golds(self):
        with pytest.raises(ValueError):
            em_metric("x", [])
        with pytest.raises(ValueError):
            acc_contains("x", [])

    def test_policy_is_respected(self):
        strict = MatchPolicy(case_fold=False, article_strip=False)
        assert em_metric("tokyo", ["Tokyo"], strict) == 0
        assert em_metric("tokyo", ["Tokyo"]) == 1

    @given(st.text(max_size=30), st.lists(st.text(max_size=15), min_size=1, max_size=3))
    def test_em_implies_acc(self, response, golds):
        if em_metric(response, golds):
            assert acc_contains(response, golds)

    def test_fixture_against_reference(self):
        samples = [s for s in make_samples() if s["kind"] == "qa"]
        for s in samples:
            assert em_metric(s["response"], s["golds"]) == ref_em(s["response"], s["golds"]), s
            assert acc_contains(s["response"], s["golds"]) == ref_acc(s["response"], s["golds"]), s
        # frozen from the reference scorers
        assert sum(ref_em(s["response"], s["golds"]) for s in samples) == 46
        assert sum(ref_acc(s["response"], s["golds"]) for s in samples) == 113


MC_TABLE = [
    ("A", "A", "Paris", 1),
    ("B", "A", "Paris", 0),
    ("(A) Paris", "A", "Paris", 1),
    ("The answer is C.", "C", "Lyon", 1),
    ("The answer is C.", "A", "Lyon", 0),
    ("Answer: D) because", "D", "x", 1),
    ("I pick Paris", "A", "Paris", 1),
    ("I pick paris.", "A", "Paris", 1),
    ("I pick Lyon", "A", "Paris", 0),
    ("BAD answer", "B", "Nope", 0),
    ("ABC", "A", "Nope", 0),
    ("A1 then B", "B", "x", 1),
    ("option e", "E", "x", 0),
    ("E, then A", "A", "x", 0),
    ("F", "F", "x", 1),
    ("G", "A", "G", 1),
    ("", "A", "Paris", 0),
    ("a Paris", "A", "Paris", 1),
    ("Paris or A", "B", "Paris", 0),
    ("B.", "B", "x", 1),
    ("[C]", "C", "x", 1),
    ("C's answer", "C", "x", 1),
    ("Berlin, Germany", "D", "berlin", 1),
    ("The Berlin", "D", "Berlin", 1),
    ("xA", "A", "nope", 0),
]


class TestMultipleChoice:
    @pytest.mark.parametrize("response,letter,text,expected", MC_TABLE)
    def test_decision_table(self, response, letter, text, expected):
        assert keyword_match_mc(response, letter, text) == expected
        assert ref_mc(response, letter, text) == expected

    def test_first_letter(self):
        assert first_option_letter("Between B and C") == "B"
        assert first_option_letter("nothing") is None

    def test_bad_letter(self):
        with pytest.raises(ValueError):
            keyword_match_mc("A", "Z", "x")

    def test_fixture_against_reference(self):
        samples = [s for s in make_samples() if s["kind"] == "mc"]
        assert len(samples) == 50
        for s in samples:
            assert keyword_match_mc(s["response"], s["letter"], s["text"]) == ref_mc(s["response"], s["letter"], s["text"]), s
        assert sum(ref_mc(s["response"], s["letter"], s["text"]) for s in samples) == 21


class BrokenChecker:
    def check(self, context, statement):
        raise TransportError("connection reset")


class TestFaith:
    context = "Tokyo is the capital of Japan. Kyoto was the old capital. Osaka is a port."

    def test_verbatim_pass_through(self):
        v = faith_score(PassThroughChecker(), self.context, self.context)
        assert v.grounded and v.statements == 3

    def test_verbatim_lookup(self):
        assert faith_score(ContextLookupChecker(), self.context, "Kyoto was the old capital.").grounded

    def test_fabricated_sentence_named(self):
        resp = "Tokyo is the capital of Japan. Nagoya is the capital of Mars. Osaka is a port."
        v = faith_score(ContextLookupChecker(), self.context, resp)
        assert not v.grounded and v.failing_statement == "Nagoya is the capital of Mars."

    @given(st.permutations(["Tokyo is the capital of Japan.", "Kyoto was the old capital.",
                            "Osaka is a port.", "Mars has two moons."]))
    def test_order_invariant(self, sentences):
        assert not faith_score(ContextLookupChecker(), self.context, " ".join(sentences)).grounded
        kept = [s for s in sentences if "Mars" not in s]
        assert faith_score(ContextLookupChecker(), self.context, " ".join(kept)).grounded

    def test_transport_failure(self):
        with pytest.raises(EvaluationError):
            faith_score(BrokenChecker(), self.context, "Tokyo.")

    def test_empty_inputs(self):
        with pytest.raises(ValueError):
            faith_score(PassThroughChecker(), "", "x")

    def test_llm_checker(self):
        gen = ScriptedClient(["Yes.", "No"])
        assert LLMFactChecker(gen).check("ctx", "a")
        assert not LLMFactChecker(gen).check("ctx", "b")
        assert gen.requests[0].temperature == 0.0
        assert "Claim: a" in gen.requests[0].user_message

    def test_split_statements(self):
        assert split_statements("One. Two! three? Four") == ["One.", "Two! three?", "Four"]


class TestQuality:
    def test_mean_of_two(self):
        judge = ScriptedClient(["[[5]]", "[[4]]"])
        assert quality_score(judge, "summarization", "source text", "summary") == 4.5
        assert len(judge.requests) == 2
        assert {r.temperature for r in judge.requests} == {DEFAULT_EVAL_TEMPERATURE}

    def test_parse_embedded(self):
        assert parse_rating("Rating: [[3]] because it is fine") == 3
        assert parse_rating("I give it 4") is None
        assert parse_rating("[[6]]") is None

    def test_retry_then_parse(self):
        judge = ScriptedClient(["meh", "[[2]]", "[[4]]"])
        assert quality_score(judge, "longform_qa", {"source": "s"}, "r") == 3.0
        assert [r.seed for r in judge.requests] == [0, 1, 1000]

    def test_unparsable_gives_none(self):
        judge = ScriptedClient(["no", "no", "no"])
        assert quality_score(judge, "simplification", "s", "r") is None

    def test_client_error_retried(self):
        judge = ScriptedClient([ClientError("boom"), "[[5]]", "[[5]]"])
        assert quality_score(judge, "simplification", "s", "r") == 5.0

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            quality_score(ScriptedClient([]), "short_qa", "s", "r")

    def test_prompt_has_source_and_response(self):
        judge = ScriptedClient(["[[1]]", "[[1]]"])
        quality_score(judge, "summarization", "THE-SOURCE", "THE-SUMMARY")
        msg = judge.requests[0].user_message
        assert "THE-SOURCE" in msg and "THE-SUMMARY" in msg


class TableScorer(GenerationClient):
    """Scores every continuation with a fixed per-response perplexity."""

    name = "table"
    supports_scoring = True

    def __init__(self, ppl):
        super().__init__()
        self.ppl = ppl

    def _score(self, prefix, continuation):
        p = self.ppl[continuation]
        if p is None:
            raise ClientError("no logprobs")
        return ScoredSequence(continuation, (-math.log(p),))


class TestOverconfidence:
    def records(self, n_datasets, per, seed=0):
        rng = random.Random(seed)
        recs, ppl = [], {}
        for d in range(n_datasets):
            for i in range(per):
                resp = f"resp-{d}-{i}"
                # repeated values force the sample-id tie-break
                ppl[resp] = float(rng.choice([1.5, 2.0, 3.25, 7.0, 11.0, 1.0 + i]))
                recs.append(rec(f"ds{d:02d}", f"s{d}-{i:03d}", {"faith": 0}, short=None, long_=resp))
        return recs, ppl

    def oracle(self, recs, ppl, k):
        out = []
        for name in sorted({r.dataset for r in recs}):
            pool = [(r, ppl[r.response]) for r in recs if r.dataset == name]
            pool.sort(key=lambda rp: rp[0].sample_id)
            pool.sort(key=lambda rp: rp[1], reverse=True)
            out.extend((r.sample_id, p) for r, p in pool[:k])
        return out

    def test_matches_sort_oracle(self):
        recs, ppl = self.records(3, 10, seed=1)
        rep = overconfidence_report(TableScorer(ppl), recs, 4)
        got = [(r.sample_id, pytest.approx(p)) for r, p in rep.selected]
        assert got == self.oracle(recs, ppl, 4)
        assert rep.shortfalls == {}

    def test_eleven_by_ten(self):
        recs, ppl = self.records(11, 25, seed=2)
        rep = overconfidence_report(TableScorer(ppl), recs, 10)
        assert len(rep.selected) == 110
        assert set(rep.per_dataset.values()) == {10}
        assert [(r.sample_id, pytest.approx(p)) for r, p in rep.selected] == self.oracle(recs, ppl, 10)

    def test_shortfall_for_faithful_dataset(self):
        recs, ppl = self.records(2, 3)
        rep = overconfidence_report(TableScorer(ppl), recs, 5, datasets=["clean"])
        assert rep.per_dataset["clean"] == 0
        assert rep.shortfalls == {"clean": 5, "ds00": 2, "ds01": 2}

    def test_unscored(self):
        recs, ppl = self.records(1, 3)
        ppl[recs[0].response] = None
        rep = overconfidence_report(TableScorer(ppl), recs, 3)
        assert rep.unscored == [recs[0].sample_id] and len(rep.selected) == 2

    def test_mock_scorer_perplexity_at_least_one(self):
        recs, _ = self.records(2, 5)
        rep = overconfidence_report(MockClient(), recs, 5)
        assert all(p >= 1 for _, p in rep.selected)
        assert rep.mean_perplexity >= 1


def table_records(name, columns, n=1000):
    """Records whose per-metric means equal ``columns`` (percent, one decimal)."""
    out = []
    hits = {m: round(v * n / 100) for m, v in columns.items()}
    for i in range(n):
        out.append(rec(name, f"{name}-{i}", {m: int(i < k) for m, k in hits.items()}))
    return out


CANOE_ROW = {
    "ConFiQA": {"em": 73.5, "acc": 80.9}, "FiQA": {"em": 82.7, "acc": 84.9}, "CNQ": {"em": 66.7, "acc": 73.4},
    "FaithEval": {"mc": 74.6}, "FollowRAG": {"em": 40.9, "acc": 51.7}, "XSum": {"faith": 74.4},
    "WikiLarge": {"faith": 84.4}, "CLAPNQ": {"faith": 64.9},
}
VANILLA_ROW = {
    "ConFiQA": {"em": 49.2, "acc": 58.2}, "FiQA": {"em": 11.4, "acc": 59.3}, "CNQ": {"em": 37.8, "acc": 45.2},
    "FaithEval": {"mc": 52.0}, "FollowRAG": {"em": 31.1, "acc": 44.8}, "XSum": {"faith": 64.2},
    "WikiLarge": {"faith": 77.1}, "CLAPNQ": {"faith": 58.5},
}


class TestAggregate:
    def test_single_dataset(self):
        rep = aggregate([rec("a", "1", {"em": 1, "acc": 1})])
        assert rep.avg_em == 100.0 and rep.avg_acc == 100.0

    def test_two_datasets_macro(self):
        recs = [rec("a", str(i), {"em": int(i < 3)}) for i in range(5)]
        recs += [rec("b", str(i), {"em": int(i < 80)}) for i in range(100)]
        assert aggregate(recs).avg_em == pytest.approx(70.0)

    def test_spreadsheet_fixture(self):
        # five datasets, values worked by hand: em 50, 25, 100; acc 100, 75, 100; mc 75; faith 0
        recs = [rec("a", "1", {"em": 1, "acc": 1}), rec("a", "2", {"em": 0, "acc": 1}),
                rec("b", "1", {"em": 0, "acc": 0}), rec("b", "2", {"em": 0, "acc": 1}),
                rec("b", "3", {"em": 0, "acc": 1}), rec("b", "4", {"em": 1, "acc": 1}),
                rec("c", "1", {"em": 1, "acc": 1}),
                *[rec("d", str(i), {"mc": int(i < 3)}) for i in range(4)],
                rec("e", "1", {"faith": 0, "quality": 4.0}), rec("e", "2", {"faith": 0, "quality": 2.0})]
        rep = aggregate(recs)
        assert rep.avg_em == pytest.approx(50.0)
        assert rep.avg_acc == pytest.approx(70.0)
        e = next(r for r in rep.rows if r["dataset"] == "e")
        assert e["quality"] == 3.0 and e["faith"] == 0.0

    def test_grouping(self):
        assert dataset_group("ConFiQA/MR") == "ConFiQA"
        rep = aggregate([rec("X/1", "a", {"em": 1}), rec("X/2", "b", {"em": 0})])
        assert [r["dataset"] for r in rep.rows] == ["X"] and rep.avg_em == 50.0

    @given(st.permutations(list(range(12))))
    def test_order_invariant(self, perm):
        base = [rec(f"d{i % 3}", str(i), {"em": i % 2, "acc": 1}) for i in range(12)]
        a, b = aggregate(base), aggregate([base[i] for i in perm])
        assert (a.avg_em, a.avg_acc, a.rows) == (b.avg_em, b.avg_acc, b.rows)

    def test_empty(self):
        with pytest.raises(ValueError, match="no scored records"):
            aggregate([])

    @pytest.mark.parametrize("row,em,acc", [(CANOE_ROW, 70.3, 73.6), (VANILLA_ROW, 47.7, 57.4)])
    def test_reported_rows(self, row, em, acc):
        recs = [r for name, cols in row.items() for r in table_records(name, cols)]
        rep = aggregate(recs)
        # table entries are rounded to one decimal, so the mean can move by at most 0.05
        assert abs(rep.avg_em - em) <= 0.05 + 1e-9
        assert abs(rep.avg_acc - acc) <= 0.05 + 1e-9

    def test_csv(self):
        text = aggregate([rec("a", "1", {"em": 1, "acc": 1})]).to_csv()
        lines = text.splitlines()
        assert lines[0] == "dataset,n,em,acc,mc,faith,quality"
        assert lines[1] == "a,1,100.0,100.0,,,"
        assert lines[-2].startswith("Avg EM,,100.0") and lines[-1].startswith("Avg Acc,,100.0")

    def test_table(self):
        text = aggregate([rec("a", "1", {"em": 1})]).to_table()
        assert "Avg EM  100.0" in text


class TestRecords:
    def test_validation(self):
        with pytest.raises(ValueError):
            EvalRecord("d", "s", "q", "c", "g", None, None)
        with pytest.raises(ValueError):
            rec(metrics={"em": 2})
        with pytest.raises(ValueError):
            rec(metrics={"quality": 0.5})
        with pytest.raises(ValueError):
            rec(metrics={"perplexity": 0.9})

    def test_round_trip(self, tmp_path):
        rs = [rec("a", "1", {"em": 1}, prompt="p"), rec("b", "2", {"faith": 0}, short=None, long_="l")]
        write_records(rs, tmp_path / "r.jsonl")
        assert read_records(tmp_path / "r.jsonl") == rs


def task(family="short_qa", **kw):
    d = dict(id="t1", context="Tokyo is the capital of Japan.", question="Capital of Japan?",
             golds=("Tokyo",), task_family=family, dataset="ds")
    d.update(kw)
    return EvalTask(**d)


WRAP = "<think>t</think><long_answer>{long}</long_answer><short_answer>{short}</short_answer>"


class TestTasks:
    def test_mc_gold_must_be_letter(self):
        with pytest.raises(ValueError):
            task("multiple_choice", golds=("Tokyo",), options=(("A", "Tokyo"),))

    def test_read_tasks(self, tmp_path):
        p = tmp_path / "faitheval.jsonl"
        p.write_text(json.dumps({"id": "1", "context": "c", "question": "q", "golds": ["B"],
                                 "task_family": "multiple_choice", "options": {"A": "x", "B": "y"}}) + "\n")
        (t,) = read_tasks(p)
        assert t.dataset == "faitheval" and t.options == (("A", "x"), ("B", "y"))
        p.write_text('{"id": "1", "task_family": "nope"}\n')
        with pytest.raises(ValueError, match="faitheval.jsonl:1"):
            read_tasks(p)

    def test_prompt_renders_options(self):
        t = task("multiple_choice", golds=("B",), options=(("A", "Kyoto"), ("B", "Tokyo")))
        assert "A. Kyoto\nB. Tokyo" in render_test_prompt(t)

    def test_extract(self):
        raw = WRAP.format(long="Tokyo is the capital.", short="Tokyo")
        assert extract_answer(raw, "short_qa") == "Tokyo"
        assert extract_answer(raw, "summarization") == "Tokyo is the capital."
        assert extract_answer("  just text ", "short_qa") == "just text"


class TestEvaluate:
    def test_flow(self):
        tasks = [task(), task(id="t2", golds=("Osaka",)),
                 task("multiple_choice", id="t3", golds=("B",), options=(("A", "Kyoto"), ("B", "Tokyo"))),
                 task("summarization", id="t4", golds=())]
        gen = ScriptedClient([WRAP.format(long="l", short="Tokyo"), WRAP.format(long="l", short="Tokyo"),
                              "B", WRAP.format(long="Tokyo is the capital of Japan.", short="s")])
        judge = ScriptedClient(["[[4]]", "[[5]]"])
        run = evaluate(tasks, gen, ContextLookupChecker(), judge, workers=1)
        m = {r.sample_id: r.metrics for r in run.records}
        assert m == {"t1": {"em": 1, "acc": 1}, "t2": {"em": 0, "acc": 0}, "t3": {"mc": 1},
                     "t4": {"faith": 1, "quality": 4.5}}
        assert all(r.temperature == DEFAULT_EVAL_TEMPERATURE for r in gen.requests)
        assert run.unscored == []

    def test_failures_unscored(self):
        run = evaluate([task(), task(id="t2")], ScriptedClient([TransportError("down"), "Tokyo"]), workers=1)
        assert [r.sample_id for r in run.records] == ["t2"]
        assert run.unscored[0][0] == "t1"

    def test_long_form_needs_checker(self):
        with pytest.raises(ValueError):
            evaluate([task("summarization", golds=())], ScriptedClient(["x"]))
