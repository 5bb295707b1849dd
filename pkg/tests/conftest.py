import os

import pytest
from hypothesis import HealthCheck, settings

from canoe.kg_store import Entity, Relation, Triple, TripleStore

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", deadline=None, max_examples=300, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def triple(h: str, rid: str, rdesc: str, t: str) -> Triple:
    return Triple(Entity.from_label(h), Relation(rid, rdesc), Entity.from_label(t))


@pytest.fixture
def small_store() -> TripleStore:
    return TripleStore.from_triples([
        triple("Super Mario", "P495", "country of origin", "Japan"),
        triple("Japan", "P36", "capital", "Tokyo"),
        triple("Tokyo", "P17", "country", "Japan Prime"),
        triple("France", "P36", "capital", "Paris"),
        triple("Germany", "P36", "capital", "Berlin"),
    ])


@pytest.fixture
def corpus_path(tmp_path):
    from canoe.corpus import write_corpus

    path = tmp_path / "triples.tsv"
    write_corpus(path, 400, 2000, seed=0)
    return path
