"""Synthetic triple corpora for offline runs and tests."""

from __future__ import annotations

import argparse
import random
from pathlib import Path

# the 41 Wikidata relations used for training-data construction
RELATIONS = [
    ("P6", "head of government"), ("P17", "country"), ("P26", "spouse"),
    ("P27", "country of citizenship"), ("P30", "continent"), ("P35", "head of state"),
    ("P36", "capital"), ("P37", "official language"), ("P38", "currency"),
    ("P39", "position held"), ("P50", "author"), ("P54", "member of sports team"),
    ("P57", "director"), ("P86", "composer"), ("P101", "field of work"),
    ("P103", "native language"), ("P108", "employer"), ("P112", "founder"),
    ("P127", "owned by"), ("P136", "genre"), ("P1376", "capital of"), ("P140", "religion"),
    ("P155", "follows"), ("P159", "headquarters location"), ("P166", "award received"),
    ("P170", "creator"), ("P172", "ethnic group"), ("P175", "performer"), ("P178", "developer"),
    ("P264", "record label"), ("P276", "location"), ("P286", "head coach"),
    ("P407", "language of work or name"), ("P413", "position played"), ("P463", "member of"),
    ("P488", "chairperson"), ("P495", "country of origin"), ("P641", "sport"),
    ("P800", "notable work"), ("P937", "work location"), ("P169", "chief executive officer"),
]

_SYLLABLES = ["ka", "lo", "mi", "ra", "ven", "tor", "sel", "dun", "bri", "quo",
              "zel", "mar", "fen", "hal", "rix", "tam", "gol", "nyr", "pel", "wis"]


def entity_labels(n: int, seed: int = 0) -> list[str]:
    """``n`` distinct two-word capitalized labels."""
    rng = random.Random(seed)
    seen: set[str] = set()
    out = []
    while len(out) < n:
        words = ["".join(rng.choice(_SYLLABLES) for _ in range(2)).capitalize() for _ in range(2)]
        label = " ".join(words)
        if label.casefold() not in seen:
            seen.add(label.casefold())
            out.append(label)
    return out


def synthetic_triples(n_entities: int, n_triples: int, seed: int = 0) -> list[tuple[str, str, str, str]]:
    """Random graph where every entity takes part in at least one triple.

    A spanning chain e0 -> e1 -> ... guarantees coverage; the rest are random
    distinct (head, relation, tail) draws without self-loops.
    """
    if n_entities < 2:
        raise ValueError("need at least two entities")
    if n_triples < n_entities - 1:
        raise ValueError("n_triples must be >= n_entities - 1 to cover every entity")
    rng = random.Random(seed)
    labels = entity_labels(n_entities, seed)
    rows: set[tuple[str, str, str, str]] = set()
    for a, b in zip(labels, labels[1:]):
        rows.add((a, *rng.choice(RELATIONS), b))
    while len(rows) < n_triples:
        h, t = rng.sample(labels, 2)
        rows.add((h, *rng.choice(RELATIONS), t))
    return sorted(rows)


def write_corpus(path: str | Path, n_entities: int, n_triples: int, seed: int = 0) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for row in synthetic_triples(n_entities, n_triples, seed):
            fh.write("\t".join(row) + "\n")


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description="write a synthetic triple TSV")
    ap.add_argument("out")
    ap.add_argument("--entities", type=int, default=400)
    ap.add_argument("--triples", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    write_corpus(args.out, args.entities, args.triples, args.seed)


if __name__ == "__main__":
    main()
