import itertools
import random

import pytest
from hypothesis import given, strategies as st

from canoe.corpus import synthetic_triples, write_corpus
from canoe.kg_store import (
    CapacityError,
    CounterfactualError,
    Entity,
    Path,
    TripleParseError,
    TripleStore,
    dump_triples,
    extract_paths,
    load_triples,
    normalize_label,
    read_triples,
    sample_triples,
    substitute_counterfactual,
    substitute_path_answer,
)

from conftest import triple


def tsv(*rows):
    return ["\t".join(r) + "\n" for r in rows]


def brute_force_chains(store: TripleStore, n: int) -> set[str]:
    """All simple n-hop chains by exhaustive product over the triple list."""
    out = set()
    for combo in itertools.product(store.triples, repeat=n):
        if any(a.tail.id != b.head.id for a, b in zip(combo, combo[1:])):
            continue
        ents = [combo[0].head.id] + [t.tail.id for t in combo]
        if len(set(ents)) == len(ents):
            out.add(" > ".join(t.id for t in combo))
    return out


def random_store(n_triples: int, n_entities: int, seed: int) -> TripleStore:
    rng = random.Random(seed)
    labels = [f"E{i}" for i in range(n_entities)]
    rows = set()
    while len(rows) < n_triples:
        h, t = rng.sample(labels, 2)
        rows.add((h, f"P{rng.randrange(3)}", "rel", t))
    return read_triples(tsv(*sorted(rows)))


class TestLoad:
    def test_empty_file(self, tmp_path):
        p = tmp_path / "empty.tsv"
        p.write_text("")
        store = load_triples(p)
        assert store.summary() == {"entity_count": 0, "relation_count": 0, "triple_count": 0}

    def test_duplicate_line_dedup(self):
        row = ("France", "P36", "capital", "Paris")
        store = read_triples(tsv(row, row))
        assert len(store) == 1

    def test_normalized_duplicates_collapse(self):
        store = read_triples(tsv(("France", "P36", "capital", "Paris"), ("  france ", "P36", "capital", "PARIS")))
        assert len(store) == 1
        assert store.triples[0].head.label == "France"

    def test_malformed_line_reports_line_number(self):
        with pytest.raises(TripleParseError, match="line 2"):
            read_triples(tsv(("A", "P1", "r", "B")) + ["only\ttwo\n"])

    def test_empty_field_rejected(self):
        with pytest.raises(TripleParseError, match="line 1"):
            read_triples(["A\tP1\t\tB\n"])

    def test_self_loops_rejected_and_counted(self):
        store = read_triples(tsv(("A", "P1", "r", "a"), ("A", "P1", "r", "B"), ("C", "P2", "s", "C")))
        assert store.rejected_self_loops == 2
        assert len(store) == 1
        assert "c" not in store.entities

    def test_sorted_iteration(self):
        store = read_triples(tsv(("Z", "P1", "r", "A"), ("B", "P2", "r", "C"), ("B", "P1", "r", "D")))
        assert [t.id for t in store] == sorted(t.id for t in store)

    def test_invariants_hold(self, small_store):
        small_store.check()
        assert {t.id for t in small_store.outgoing("japan")} == {"japan|P36|tokyo"}

    def test_round_trip(self, tmp_path, small_store):
        p = tmp_path / "out.tsv"
        dump_triples(small_store, p)
        again = load_triples(p)
        assert again.triples == small_store.triples
        assert again.entities == small_store.entities
        assert [e.label for e in again.entities.values()] == [e.label for e in small_store.entities.values()]

    def test_appendix_scale_corpus(self, tmp_path):
        # 6,316 entities and 30,762 triples, matching the reported KB size
        p = tmp_path / "kb.tsv"
        write_corpus(p, 6316, 30762, seed=3)
        s = load_triples(p).summary()
        assert s["entity_count"] == 6316
        assert s["triple_count"] == 30762
        assert s["relation_count"] == 41


class TestLabels:
    @given(st.text(min_size=1))
    def test_normalize_idempotent(self, s):
        assert normalize_label(normalize_label(s)) == normalize_label(s)

    def test_entity_id_is_normalized_label(self):
        assert Entity.from_label("  Super   Mario ").id == "super mario"
        assert Entity.from_label("  Super   Mario ").label == "Super Mario"

    def test_self_loop_triple_rejected(self):
        with pytest.raises(ValueError):
            triple("Paris", "P1", "r", "paris")


class TestSample:
    def test_exhaustive_is_permutation(self):
        store = random_store(10, 8, 0)
        out = sample_triples(store, 10, seed=123)
        assert sorted(out) == store.triples

    def test_deterministic(self, small_store):
        assert sample_triples(small_store, 3, seed=7) == sample_triples(small_store, 3, seed=7)

    def test_capacity(self, small_store):
        with pytest.raises(CapacityError):
            sample_triples(small_store, 6, seed=0)

    def test_uniform_frequency(self):
        # each of 5 triples should appear 2000 +- 5 sigma times over 10,000 single draws
        store = random_store(5, 6, 1)
        counts = {t.id: 0 for t in store}
        for seed in range(10_000):
            counts[sample_triples(store, 1, seed)[0].id] += 1
        sigma = (10_000 * 0.2 * 0.8) ** 0.5
        assert all(abs(c - 2000) < 5 * sigma for c in counts.values())


class TestPaths:
    def test_unique_chain(self):
        store = TripleStore.from_triples([triple("A", "r1", "r1", "B"), triple("B", "r2", "r2", "C")])
        paths = extract_paths(store, 2, 10, seed=0)
        assert len(paths) == 1
        assert paths[0].answer.label == "C"

    def test_disconnected(self):
        store = TripleStore.from_triples([triple("A", "r1", "r1", "B"), triple("C", "r2", "r2", "D")])
        assert extract_paths(store, 2, 10, seed=0) == []

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_brute_force(self, seed):
        store = random_store(50, 20, seed)
        oracle = brute_force_chains(store, 3)
        everything = extract_paths(store, 3, max_paths=10**6, seed=seed)
        assert {p.id for p in everything} == oracle
        assert len(everything) == len(oracle)
        truncated = extract_paths(store, 3, max_paths=5, seed=seed)
        assert len(truncated) == min(5, len(oracle))
        assert {p.id for p in truncated} <= oracle

    @pytest.mark.parametrize("n", [2, 3, 4])
    def test_path_invariants(self, n):
        store = random_store(80, 25, n)
        for p in extract_paths(store, n, max_paths=200, seed=1):
            assert p.n == n
            assert all(a.tail == b.head for a, b in zip(p.hops, p.hops[1:]))
            assert p.answer == p.hops[-1].tail
            assert len({e.id for e in p.entities}) == n + 1

    def test_deterministic(self):
        store = random_store(60, 20, 9)
        a = [p.id for p in extract_paths(store, 3, 20, seed=4)]
        assert a == [p.id for p in extract_paths(store, 3, 20, seed=4)]

    def test_bad_n(self, small_store):
        with pytest.raises(ValueError):
            extract_paths(small_store, 5, 10, 0)

    def test_path_rejects_repeats(self):
        with pytest.raises(ValueError):
            Path((triple("A", "r", "r", "B"), triple("B", "r", "r", "A")))


class TestCounterfactual:
    def test_field_replacement(self):
        t = triple("France", "P36", "capital", "Paris")
        out = substitute_counterfactual(t, Entity.from_label("Lyon"))
        assert (out.head, out.relation, out.tail.label) == (t.head, t.relation, "Lyon")
        assert t.tail.label == "Paris"

    def test_same_tail_rejected(self):
        t = triple("France", "P36", "capital", "Paris")
        with pytest.raises(CounterfactualError):
            substitute_counterfactual(t, Entity.from_label("paris"))

    @given(st.text(alphabet="abcdefgh ", min_size=1).filter(lambda s: s.strip() and normalize_label(s) != "paris"))
    def test_frame_invariance(self, label):
        t = triple("France", "P36", "capital", "Paris")
        out = substitute_counterfactual(t, Entity.from_label(label))
        assert out.head == t.head and out.relation == t.relation

    def test_path_answer(self):
        p = Path((triple("A", "r", "r", "B"), triple("B", "s", "s", "C")))
        q = substitute_path_answer(p, Entity.from_label("D"))
        assert q.answer.label == "D" and q.hops[0] == p.hops[0]
        with pytest.raises(CounterfactualError):
            substitute_path_answer(p, Entity.from_label("A"))


def test_synthetic_corpus_covers_entities():
    rows = synthetic_triples(50, 120, seed=2)
    assert len(rows) == 120
    ents = {r[0] for r in rows} | {r[3] for r in rows}
    assert len(ents) == 50
    assert all("," not in r[0] and "(" not in r[0] for r in rows)
