"""Triple store: TSV loading, seeded sampling, n-hop path extraction."""

from __future__ import annotations

import dataclasses
import logging
import random
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path as FsPath
from typing import Iterable, Iterator

log = logging.getLogger(__name__)

MIN_HOPS = 2
MAX_HOPS = 4


class TripleParseError(ValueError):
    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class CapacityError(ValueError):
    """More items requested than the source can supply."""


class CounterfactualError(ValueError):
    pass


def normalize_label(label: str) -> str:
    """Trim, collapse inner whitespace and case-fold."""
    return " ".join(label.split()).casefold()


@dataclass(frozen=True, order=True)
class Entity:
    id: str
    label: str = field(compare=False)

    def __post_init__(self):
        if not self.id:
            raise ValueError("entity id must be non-empty")

    @classmethod
    def from_label(cls, label: str) -> "Entity":
        return cls(normalize_label(label), " ".join(label.split()))


@dataclass(frozen=True, order=True)
class Relation:
    id: str
    description: str = field(compare=False)

    def __post_init__(self):
        if not self.id or not self.description:
            raise ValueError("relation id and description must be non-empty")


@dataclass(frozen=True, order=True)
class Triple:
    head: Entity
    relation: Relation
    tail: Entity

    def __post_init__(self):
        if self.head.id == self.tail.id:
            raise ValueError(f"self-loop triple on {self.head.label!r}")

    @property
    def id(self) -> str:
        return f"{self.head.id}|{self.relation.id}|{self.tail.id}"

    def as_text(self) -> str:
        return f"({self.head.label}, {self.relation.description}, {self.tail.label})"


@dataclass(frozen=True)
class Path:
    hops: tuple[Triple, ...]

    def __post_init__(self):
        if not MIN_HOPS <= len(self.hops) <= MAX_HOPS:
            raise ValueError(f"path length must be in [{MIN_HOPS}, {MAX_HOPS}], got {len(self.hops)}")
        for a, b in zip(self.hops, self.hops[1:]):
            if a.tail.id != b.head.id:
                raise ValueError(f"broken chain between {a.id} and {b.id}")
        ids = [e.id for e in self.entities]
        if len(set(ids)) != len(ids):
            raise ValueError("entity repeats along path")

    @property
    def n(self) -> int:
        return len(self.hops)

    @property
    def head(self) -> Entity:
        return self.hops[0].head

    @property
    def answer(self) -> Entity:
        return self.hops[-1].tail

    @property
    def entities(self) -> list[Entity]:
        return [self.hops[0].head] + [t.tail for t in self.hops]

    @property
    def bridges(self) -> list[Entity]:
        """Intermediate entities, i.e. every tail except the last."""
        return [t.tail for t in self.hops[:-1]]

    @property
    def id(self) -> str:
        return " > ".join(t.id for t in self.hops)

    def as_text(self) -> str:
        return "[" + ", ".join(t.as_text() for t in self.hops) + "]"


@dataclass
class TripleStore:
    entities: dict[str, Entity] = field(default_factory=dict)
    relations: dict[str, Relation] = field(default_factory=dict)
    triples: list[Triple] = field(default_factory=list)
    rejected_self_loops: int = 0

    def __post_init__(self):
        self._rebuild()

    def _rebuild(self) -> None:
        self.triples = sorted(set(self.triples))
        self.entities = dict(sorted(self.entities.items()))
        self.relations = dict(sorted(self.relations.items()))
        self._by_head: dict[str, list[Triple]] = defaultdict(list)
        self._by_relation: dict[str, list[Triple]] = defaultdict(list)
        for t in self.triples:
            self._by_head[t.head.id].append(t)
            self._by_relation[t.relation.id].append(t)

    @classmethod
    def from_triples(cls, triples: Iterable[Triple]) -> "TripleStore":
        triples = list(triples)
        entities: dict[str, Entity] = {}
        relations: dict[str, Relation] = {}
        for t in triples:
            entities.setdefault(t.head.id, t.head)
            entities.setdefault(t.tail.id, t.tail)
            relations.setdefault(t.relation.id, t.relation)
        return cls(entities, relations, triples)

    def outgoing(self, entity_id: str) -> list[Triple]:
        return self._by_head.get(entity_id, [])

    def with_relation(self, relation_id: str) -> list[Triple]:
        return self._by_relation.get(relation_id, [])

    def __len__(self) -> int:
        return len(self.triples)

    def __iter__(self) -> Iterator[Triple]:
        return iter(self.triples)

    def summary(self) -> dict[str, int]:
        return {
            "entity_count": len(self.entities),
            "relation_count": len(self.relations),
            "triple_count": len(self.triples),
        }

    def check(self) -> None:
        """Assert the store invariants; used by tests and after ingest."""
        for t in self.triples:
            assert self.entities[t.head.id] == t.head and self.entities[t.tail.id] == t.tail
            assert self.relations[t.relation.id] == t.relation
        assert len(set(self.triples)) == len(self.triples)
        assert sum(len(v) for v in self._by_head.values()) == len(self.triples)


def parse_line(line: str, line_no: int) -> tuple[str, str, str, str]:
    parts = line.rstrip("\r\n").split("\t")
    if len(parts) != 4:
        raise TripleParseError(line_no, f"expected 4 tab-separated fields, got {len(parts)}")
    parts = [p.strip() for p in parts]
    if not all(parts):
        raise TripleParseError(line_no, "empty field")
    return parts[0], parts[1], parts[2], parts[3]


def read_triples(lines: Iterable[str]) -> TripleStore:
    entities: dict[str, Entity] = {}
    relations: dict[str, Relation] = {}
    triples: set[Triple] = set()
    self_loops = 0
    for line_no, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        head_label, rel_id, rel_desc, tail_label = parse_line(line, line_no)
        # first spelling seen wins for labels and descriptions
        head = entities.setdefault(normalize_label(head_label), Entity.from_label(head_label))
        tail = entities.setdefault(normalize_label(tail_label), Entity.from_label(tail_label))
        if head.id == tail.id:
            self_loops += 1
            continue
        rel = relations.setdefault(rel_id, Relation(rel_id, rel_desc))
        triples.add(Triple(head, rel, tail))
    if self_loops:
        log.warning("rejected %d self-loop triple(s)", self_loops)
    used = {e for t in triples for e in (t.head.id, t.tail.id)}
    # entities only seen in self-loops do not belong to the store
    entities = {k: v for k, v in entities.items() if k in used}
    return TripleStore(entities, relations, list(triples), rejected_self_loops=self_loops)


def load_triples(source: str | FsPath) -> TripleStore:
    with open(source, encoding="utf-8") as fh:
        return read_triples(fh)


def dump_triples(store: TripleStore, dest: str | FsPath) -> None:
    with open(dest, "w", encoding="utf-8", newline="\n") as fh:
        for t in store.triples:
            fh.write(f"{t.head.label}\t{t.relation.id}\t{t.relation.description}\t{t.tail.label}\n")


def sample_triples(store: TripleStore, count: int, seed: int) -> list[Triple]:
    if count < 1:
        raise ValueError("count must be positive")
    if count > len(store.triples):
        raise CapacityError(f"requested {count} triples but store holds {len(store.triples)}")
    return random.Random(seed).sample(store.triples, count)


def extract_paths(store: TripleStore, n: int, max_paths: int, seed: int) -> list[Path]:
    """Collect up to ``max_paths`` simple n-hop chains by seeded randomized DFS.

    Start entities and branch order are shuffled with ``seed``; the search stops
    as soon as ``max_paths`` chains are found, so when the graph holds fewer
    chains than that the result is the complete set.
    """
    if n not in range(MIN_HOPS, MAX_HOPS + 1):
        raise ValueError(f"n must be in [{MIN_HOPS}, {MAX_HOPS}], got {n}")
    if max_paths < 1:
        raise ValueError("max_paths must be positive")
    rng = random.Random(seed)
    starts = sorted(store._by_head)
    rng.shuffle(starts)
    found: list[Path] = []

    def branches(entity_id: str) -> list[Triple]:
        out = list(store.outgoing(entity_id))
        rng.shuffle(out)
        return out

    def dfs(chain: list[Triple], seen: set[str]) -> bool:
        if len(chain) == n:
            found.append(Path(tuple(chain)))
            return len(found) >= max_paths
        for t in branches(chain[-1].tail.id):
            if t.tail.id in seen:
                continue
            chain.append(t)
            seen.add(t.tail.id)
            done = dfs(chain, seen)
            seen.discard(t.tail.id)
            chain.pop()
            if done:
                return True
        return False

    for start in starts:
        for first in branches(start):
            if dfs([first], {first.head.id, first.tail.id}):
                return found
    return found


def substitute_counterfactual(triple: Triple, cf_tail: Entity) -> Triple:
    if cf_tail.id == triple.tail.id:
        raise CounterfactualError(f"counterfactual {cf_tail.label!r} equals the original tail")
    return dataclasses.replace(triple, tail=cf_tail)


def substitute_path_answer(path: Path, cf_tail: Entity) -> Path:
    """Replace the final tail of ``path`` with ``cf_tail``."""
    if any(e.id == cf_tail.id for e in path.entities):
        raise CounterfactualError(f"counterfactual {cf_tail.label!r} already lies on the path")
    last = substitute_counterfactual(path.hops[-1], cf_tail)
    return Path(path.hops[:-1] + (last,))
