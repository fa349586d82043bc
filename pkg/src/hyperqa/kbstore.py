"""Triple-store knowledge base: interning, ingestion, adjacency queries.

The KB is immutable once loaded. Surfaces are normalized so that exact
keyword matching against question text survives cosmetic differences
(case, underscores, whitespace runs).
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from typing import Iterable, TextIO

_WS_RUN = re.compile(r"[\s_]+")


class KBFormatError(ValueError):
    """Malformed triple input; carries the offending line number."""

    def __init__(self, message: str, line_no: int | None = None):
        self.line_no = line_no
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)


class UnknownSymbolError(KeyError):
    pass


def normalize_surface(text: str) -> str:
    """Lowercase and collapse underscores/whitespace runs to single spaces."""
    return _WS_RUN.sub(" ", text.strip().lower()).strip()


@dataclass(frozen=True)
class Symbol:
    id: int
    surface: str


class SymbolTable:
    """Bijective surface<->id interning, ids dense from 0 in first-appearance order."""

    def __init__(self) -> None:
        self._by_surface: dict[str, Symbol] = {}
        self._by_id: list[Symbol] = []

    def __len__(self) -> int:
        return len(self._by_id)

    def __iter__(self):
        return iter(self._by_id)

    def intern(self, surface: str) -> Symbol:
        surface = normalize_surface(surface)
        sym = self._by_surface.get(surface)
        if sym is None:
            sym = Symbol(len(self._by_id), surface)
            self._by_surface[surface] = sym
            self._by_id.append(sym)
        return sym

    def get(self, surface: str) -> Symbol | None:
        return self._by_surface.get(normalize_surface(surface))

    def by_id(self, sym_id: int) -> Symbol:
        if not 0 <= sym_id < len(self._by_id):
            raise UnknownSymbolError(f"unknown symbol id {sym_id}")
        return self._by_id[sym_id]

    def surfaces(self) -> list[str]:
        return [s.surface for s in self._by_id]


@dataclass(frozen=True)
class Triplet:
    head: Symbol
    predicate: Symbol
    tail: Symbol


@dataclass
class KnowledgeBase:
    entities: SymbolTable
    relations: SymbolTable
    facts: list[Triplet]
    out_index: dict[int, list[tuple[Symbol, Symbol]]]
    duplicates_dropped: int = 0
    inverses_added: bool = False

    def entity(self, surface: str) -> Symbol:
        sym = self.entities.get(surface)
        if sym is None:
            raise UnknownSymbolError(f"unknown entity surface {surface!r}")
        return sym


def load_triples(source: str | TextIO | Iterable[str], add_inverse: bool = False) -> KnowledgeBase:
    """Build a KB from TAB-separated ``head<TAB>relation<TAB>tail`` lines.

    Duplicate facts (after normalization) are dropped and counted. With
    ``add_inverse``, a reversed fact over a derived ``<relation>^-1``
    predicate is materialized for every loaded fact, which lets walks
    traverse against edge direction.
    """
    if isinstance(source, str):
        lines = source.splitlines()
    else:
        lines = [ln.rstrip("\r\n") for ln in source]

    entities = SymbolTable()
    relations = SymbolTable()
    facts: list[Triplet] = []
    seen: set[tuple[int, int, int]] = set()
    duplicates = 0

    def _add(head: Symbol, rel: Symbol, tail: Symbol) -> None:
        nonlocal duplicates
        key = (head.id, rel.id, tail.id)
        if key in seen:
            duplicates += 1
            return
        seen.add(key)
        facts.append(Triplet(head, rel, tail))

    for line_no, raw in enumerate(lines, start=1):
        if not raw.strip():
            continue
        parts = raw.split("\t")
        if len(parts) != 3:
            raise KBFormatError(f"expected 3 TAB-separated fields, got {len(parts)}", line_no)
        h, r, t = (normalize_surface(p) for p in parts)
        if not h or not r or not t:
            raise KBFormatError("empty field after normalization", line_no)
        _add(entities.intern(h), relations.intern(r), entities.intern(t))

    if not facts:
        raise KBFormatError("no facts in input")

    if add_inverse:
        for fact in list(facts):
            inv = relations.intern(fact.predicate.surface + " ^-1")
            _add(fact.tail, inv, fact.head)

    out_index: dict[int, list[tuple[Symbol, Symbol]]] = {s.id: [] for s in entities}
    for fact in facts:
        out_index[fact.head.id].append((fact.predicate, fact.tail))
    for pairs in out_index.values():
        pairs.sort(key=lambda pt: (pt[0].id, pt[1].id))

    return KnowledgeBase(entities, relations, facts, out_index, duplicates, add_inverse)


def neighbors(kb: KnowledgeBase, entity: Symbol | int) -> list[tuple[Symbol, Symbol]]:
    """Outgoing (predicate, tail) pairs of ``entity``, in (predicate id, tail id) order."""
    ent_id = entity.id if isinstance(entity, Symbol) else entity
    if ent_id not in kb.out_index:
        raise UnknownSymbolError(f"unknown entity id {ent_id}")
    return kb.out_index[ent_id]


def stats(kb: KnowledgeBase) -> dict[str, int]:
    return {
        "entities": len(kb.entities),
        "relations": len(kb.relations),
        "facts": len(kb.facts),
        "duplicates_dropped": kb.duplicates_dropped,
    }


def stats_json(kb: KnowledgeBase) -> str:
    return json.dumps(stats(kb), indent=2, sort_keys=True)


def serialize(kb: KnowledgeBase) -> str:
    """Render the fact list back to TSV, one fact per line, load order preserved."""
    return "".join(
        f"{f.head.surface}\t{f.predicate.surface}\t{f.tail.surface}\n" for f in kb.facts
    )
