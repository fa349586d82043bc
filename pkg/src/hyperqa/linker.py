"""Link question text to KB entities by exact keyword matching.

Matching is greedy longest-match-first over normalized tokens, scanning
left to right. Ties between equal-length candidates at the same start go
to the lower entity id so results are deterministic. The oracle path
loads pre-annotated seed entities instead of matching.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from typing import Iterable, TextIO

from hyperqa.kbstore import KnowledgeBase, Symbol, normalize_surface

_TOKEN = re.compile(r"[\w']+|[^\w\s]")


class OracleLinkError(ValueError):
    pass


def tokenize(text: str) -> list[str]:
    """Normalize then split into word tokens; punctuation becomes its own token."""
    return _TOKEN.findall(normalize_surface(text))


@dataclass
class LinkResult:
    seeds: list[Symbol]
    spans: list[tuple[int, int]]
    residual_tokens: list[str]

    def word_units(self, tokens: list[str]) -> list[tuple[str, Symbol | None]]:
        """Question word units in order: entity spans collapse to one unit.

        Returns (surface, entity_or_None) pairs; non-entity units carry the
        raw token as surface.
        """
        units: list[tuple[str, Symbol | None]] = []
        span_at = {start: (end, seed) for (start, end), seed in zip(self.spans, self.seeds)}
        i = 0
        while i < len(tokens):
            if i in span_at:
                end, seed = span_at[i]
                units.append((seed.surface, seed))
                i = end
            else:
                units.append((tokens[i], None))
                i += 1
        return units


def _surface_index(kb: KnowledgeBase) -> dict[tuple[str, ...], Symbol]:
    """Entity surfaces keyed by their token tuple; lower id wins collisions."""
    index: dict[tuple[str, ...], Symbol] = {}
    for sym in kb.entities:
        key = tuple(sym.surface.split(" "))
        if key not in index or sym.id < index[key].id:
            index[key] = sym
    return index


def link_question(kb: KnowledgeBase, tokens: list[str]) -> LinkResult:
    """Greedy longest-match-first entity linking over normalized tokens."""
    index = getattr(kb, "_linker_index", None)
    if index is None:
        index = _surface_index(kb)
        kb._linker_index = index  # cached; KB is immutable after load
    max_len = max((len(k) for k in index), default=0)

    seeds: list[Symbol] = []
    spans: list[tuple[int, int]] = []
    residual: list[str] = []
    i = 0
    n = len(tokens)
    while i < n:
        match: Symbol | None = None
        match_end = i
        for length in range(min(max_len, n - i), 0, -1):
            sym = index.get(tuple(tokens[i : i + length]))
            if sym is not None:
                match = sym
                match_end = i + length
                break
        if match is not None:
            seeds.append(match)
            spans.append((i, match_end))
            i = match_end
        else:
            residual.append(tokens[i])
            i += 1
    return LinkResult(seeds, spans, residual)


def load_oracle_links(
    source: str | TextIO | Iterable[str], kb: KnowledgeBase
) -> dict[str, list[Symbol]]:
    """Parse ``qid<TAB>entity[<TAB>entity...]`` lines into seed lists.

    Every surface must resolve in the KB; duplicates of a qid are an error.
    """
    if isinstance(source, str):
        lines = source.splitlines()
    else:
        lines = [ln.rstrip("\r\n") for ln in source]

    links: dict[str, list[Symbol]] = {}
    for line_no, raw in enumerate(lines, start=1):
        if not raw.strip():
            continue
        parts = raw.split("\t")
        if len(parts) < 2:
            raise OracleLinkError(f"line {line_no}: expected qid and at least one entity")
        qid = parts[0].strip()
        if qid in links:
            raise OracleLinkError(f"line {line_no}: duplicate qid {qid!r}")
        seeds = []
        for surface in parts[1:]:
            sym = kb.entities.get(surface)
            if sym is None:
                raise OracleLinkError(
                    f"line {line_no}: qid {qid!r}: unknown entity surface {surface!r}"
                )
            seeds.append(sym)
        links[qid] = seeds
    return links


def link_result_json(qid: str, result: LinkResult) -> str:
    return json.dumps(
        {
            "qid": qid,
            "seeds": [s.surface for s in result.seeds],
            "spans": [list(span) for span in result.spans],
        },
        sort_keys=True,
    )
