"""Hypergraph construction: multi-hop graph walks and question n-grams.

A knowledge hyperedge is a chained path [seed, rel, ent, rel, ent, ...]
obtained by walking the KB from a seed entity, each step starting where
the previous one arrived. A question hyperedge is a contiguous n-gram of
question word units. Both sides are deduplicated, canonically ordered,
and optionally capped to a fixed budget.
"""

from __future__ import annotations

import json
import random
import zlib
from dataclasses import dataclass, field

from hyperqa.kbstore import KnowledgeBase, Symbol, UnknownSymbolError
from hyperqa.linker import LinkResult

KIND_ENTITY = "entity"
KIND_RELATION = "relation"
KIND_WORD = "word"


@dataclass(frozen=True)
class NodeToken:
    kind: str
    symbol: Symbol

    @property
    def surface(self) -> str:
        return self.symbol.surface


@dataclass(frozen=True)
class Hyperedge:
    tokens: tuple[NodeToken, ...]
    hops: int
    side: str  # "question" | "knowledge"

    def surfaces(self) -> list[str]:
        return [t.surface for t in self.tokens]

    def key(self) -> tuple:
        return tuple((t.kind, t.symbol.id) for t in self.tokens)


@dataclass
class HypergraphPair:
    qid: str
    question_edges: list[Hyperedge]
    knowledge_edges: list[Hyperedge]
    seed_entities: list[Symbol]
    caps_applied: dict[str, bool] = field(default_factory=lambda: {"question": False, "knowledge": False})


@dataclass
class WalkConfig:
    n_hops: int = 2
    max_n: int = 3
    allow_revisit: bool = False
    exact_hops: bool = False
    knowledge_cap: int | None = None
    question_cap: int | None = None
    cap_seed: int = 0

    # Edge budgets reused per walk depth when no explicit cap is given.
    DEFAULT_CAPS = {1: 300, 2: 1000, 3: 1800}

    def effective_knowledge_cap(self) -> int:
        if self.knowledge_cap is not None:
            return self.knowledge_cap
        return self.DEFAULT_CAPS.get(self.n_hops, self.DEFAULT_CAPS[3])


def knowledge_walks(
    kb: KnowledgeBase,
    seeds: list[Symbol],
    n_hops: int,
    allow_revisit: bool = False,
) -> list[Hyperedge]:
    """Enumerate all walk hyperedges of 1..n_hops starting at each seed.

    Without ``allow_revisit`` a path never returns to an entity already on
    it. Output is deduplicated and sorted by (hops, token ids).
    """
    if n_hops < 1:
        raise ValueError(f"n_hops must be >= 1, got {n_hops}")
    for seed in seeds:
        if seed.id not in kb.out_index:
            raise UnknownSymbolError(f"unknown seed entity id {seed.id}")

    edges: dict[tuple, Hyperedge] = {}

    def extend(path: list[NodeToken], visited: set[int], hops: int) -> None:
        here = path[-1].symbol
        for rel, tail in kb.out_index[here.id]:
            if not allow_revisit and tail.id in visited:
                continue
            new_path = path + [NodeToken(KIND_RELATION, rel), NodeToken(KIND_ENTITY, tail)]
            edge = Hyperedge(tuple(new_path), hops + 1, "knowledge")
            edges.setdefault(edge.key(), edge)
            if hops + 1 < n_hops:
                extend(new_path, visited | {tail.id}, hops + 1)

    seen_seeds: set[int] = set()
    for seed in seeds:
        if seed.id in seen_seeds:
            continue
        seen_seeds.add(seed.id)
        extend([NodeToken(KIND_ENTITY, seed)], {seed.id}, 0)

    return sorted(edges.values(), key=lambda e: (e.hops, e.key()))


def question_ngrams(tokens: list[NodeToken], max_n: int) -> list[Hyperedge]:
    """All contiguous n-grams for n = 1..min(max_n, len), first occurrence kept."""
    if not tokens:
        raise ValueError("empty token list")
    if max_n < 1:
        raise ValueError(f"max_n must be >= 1, got {max_n}")
    edges: list[Hyperedge] = []
    seen: set[tuple] = set()
    for start in range(len(tokens)):
        for n in range(1, min(max_n, len(tokens) - start) + 1):
            edge = Hyperedge(tuple(tokens[start : start + n]), 0, "question")
            key = edge.key()
            if key not in seen:
                seen.add(key)
                edges.append(edge)
    return edges


def cap_hyperedges(edges: list[Hyperedge], max_count: int, seed: int) -> list[Hyperedge]:
    """Cap to ``max_count`` edges, keeping whole lower-hop classes first.

    The hop class where the budget runs out is downsampled uniformly
    (seeded, without replacement); later classes are dropped. Canonical
    input order is preserved in the output.
    """
    if max_count < 1:
        raise ValueError(f"max_count must be >= 1, got {max_count}")
    if len(edges) <= max_count:
        return list(edges)

    by_hop: dict[int, list[int]] = {}
    for idx, edge in enumerate(edges):
        by_hop.setdefault(edge.hops, []).append(idx)

    rng = random.Random(seed)
    keep: list[int] = []
    budget = max_count
    for hop in sorted(by_hop):
        idxs = by_hop[hop]
        if len(idxs) <= budget:
            keep.extend(idxs)
            budget -= len(idxs)
        else:
            keep.extend(rng.sample(idxs, budget))
            budget = 0
        if budget == 0:
            break
    keep.sort()
    return [edges[i] for i in keep]


def question_tokens_from_link(
    link: LinkResult, tokens: list[str], word_intern
) -> list[NodeToken]:
    """Question word units as node tokens; entity spans collapse to entity nodes.

    ``word_intern`` maps a word surface to a Symbol (typically a
    SymbolTable.intern bound method over the dataset word table).
    """
    units = link.word_units(tokens)
    out: list[NodeToken] = []
    for surface, entity in units:
        if entity is not None:
            out.append(NodeToken(KIND_ENTITY, entity))
        else:
            out.append(NodeToken(KIND_WORD, word_intern(surface)))
    return out


def _cap_rng_seed(base_seed: int, qid: str) -> int:
    return base_seed ^ zlib.crc32(qid.encode("utf-8"))


def build_pair(
    kb: KnowledgeBase,
    link: LinkResult,
    question_tokens: list[str],
    cfg: WalkConfig,
    word_intern,
    qid: str = "",
    walk_seeds: list[Symbol] | None = None,
) -> HypergraphPair:
    """Compose walks, n-grams, and caps into the per-question hypergraph pair.

    Walks start at ``walk_seeds`` when given (the oracle-link setting),
    else at the entities matched in the question text.
    """
    q_nodes = question_tokens_from_link(link, question_tokens, word_intern)
    q_edges = question_ngrams(q_nodes, cfg.max_n)

    seeds = []
    seen = set()
    for s in walk_seeds if walk_seeds is not None else link.seeds:
        if s.id not in seen:
            seen.add(s.id)
            seeds.append(s)

    k_edges: list[Hyperedge] = []
    if seeds:
        k_edges = knowledge_walks(kb, seeds, cfg.n_hops, cfg.allow_revisit)
        if cfg.exact_hops:
            k_edges = [e for e in k_edges if e.hops == cfg.n_hops]

    caps_applied = {"question": False, "knowledge": False}
    k_cap = cfg.effective_knowledge_cap()
    if len(k_edges) > k_cap:
        k_edges = cap_hyperedges(k_edges, k_cap, _cap_rng_seed(cfg.cap_seed, qid))
        caps_applied["knowledge"] = True
    if cfg.question_cap is not None and len(q_edges) > cfg.question_cap:
        q_edges = cap_hyperedges(q_edges, cfg.question_cap, _cap_rng_seed(cfg.cap_seed, qid + "#q"))
        caps_applied["question"] = True

    return HypergraphPair(qid, q_edges, k_edges, seeds, caps_applied)


def pair_to_json(pair: HypergraphPair) -> str:
    return json.dumps(
        {
            "qid": pair.qid,
            "seeds": [s.surface for s in pair.seed_entities],
            "q_edges": [e.surfaces() for e in pair.question_edges],
            "k_edges": [e.surfaces() for e in pair.knowledge_edges],
            "hops": [e.hops for e in pair.knowledge_edges],
        },
        sort_keys=True,
    )
