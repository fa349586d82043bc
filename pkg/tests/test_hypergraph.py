import random

import pytest
from hypothesis import given, settings, strategies as st

from hyperqa import hypergraph as H
from hyperqa import kbstore as K
from hyperqa.kbstore import SymbolTable
from hyperqa.linker import LinkResult, link_question, tokenize


def brute_force_paths(kb, seeds, n_hops, allow_revisit):
    """Independent oracle: recursive enumeration over the raw fact list."""
    out_by_head = {}
    for f in kb.facts:
        out_by_head.setdefault(f.head.id, []).append(f)

    paths = set()

    def walk(path_ids, tail_id, hops):
        if hops >= 1:
            paths.add(tuple(path_ids))
        if hops == n_hops:
            return
        for f in out_by_head.get(tail_id, []):
            if not allow_revisit and f.tail.id in {path_ids[i] for i in range(0, len(path_ids), 2)}:
                continue
            walk(path_ids + [f.predicate.id, f.tail.id], f.tail.id, hops + 1)

    seen = set()
    for s in seeds:
        if s.id in seen:
            continue
        seen.add(s.id)
        walk([s.id], s.id, 0)
    return paths


def edge_id_seq(edge):
    return tuple(t.symbol.id for t in edge.tokens)


def test_single_fact_walk():
    kb = K.load_triples("a\tr\tb\n")
    edges = H.knowledge_walks(kb, [kb.entity("a")], 1)
    assert [e.surfaces() for e in edges] == [["a", "r", "b"]]
    assert edges[0].hops == 1


def test_two_hop_includes_one_hop():
    kb = K.load_triples("a\tr\tb\nb\ts\tc\n")
    edges = H.knowledge_walks(kb, [kb.entity("a")], 2)
    assert [e.surfaces() for e in edges] == [["a", "r", "b"], ["a", "r", "b", "s", "c"]]
    assert [e.hops for e in edges] == [1, 2]


def test_walks_reject_bad_args():
    kb = K.load_triples("a\tr\tb\n")
    with pytest.raises(ValueError):
        H.knowledge_walks(kb, [kb.entity("a")], 0)
    with pytest.raises(K.UnknownSymbolError):
        H.knowledge_walks(kb, [K.Symbol(99, "ghost")], 1)


def _random_kb(rng, max_facts=50):
    n = rng.randint(1, max_facts)
    lines = set()
    while len(lines) < n:
        lines.add(f"e{rng.randrange(10)}\tr{rng.randrange(3)}\te{rng.randrange(10)}")
    return K.load_triples("\n".join(lines) + "\n")


@pytest.mark.parametrize("allow_revisit", [False, True])
def test_walks_match_brute_force_oracle(allow_revisit):
    rng = random.Random(42 + allow_revisit)
    for _ in range(40):
        kb = _random_kb(rng)
        seeds = rng.sample(list(kb.entities), rng.randint(1, min(3, len(kb.entities))))
        n_hops = rng.randint(1, 3)
        got = {edge_id_seq(e) for e in H.knowledge_walks(kb, seeds, n_hops, allow_revisit)}
        assert got == brute_force_paths(kb, seeds, n_hops, allow_revisit)


def test_walks_monotone_in_hops():
    rng = random.Random(9)
    for _ in range(10):
        kb = _random_kb(rng)
        seeds = [next(iter(kb.entities))]
        prev = set()
        for k in (1, 2, 3):
            cur = {edge_id_seq(e) for e in H.knowledge_walks(kb, seeds, k)}
            assert prev <= cur
            prev = cur


def test_walk_edges_alternate_and_are_odd():
    rng = random.Random(13)
    kb = _random_kb(rng)
    for edge in H.knowledge_walks(kb, list(kb.entities)[:3], 3):
        assert len(edge.tokens) % 2 == 1
        assert len(edge.tokens) == 2 * edge.hops + 1
        for i, tok in enumerate(edge.tokens):
            assert tok.kind == (H.KIND_ENTITY if i % 2 == 0 else H.KIND_RELATION)


def test_walk_output_order_canonical():
    kb = K.load_triples("a\tr\tb\na\ts\tc\nb\tr\td\n")
    edges = H.knowledge_walks(kb, [kb.entity("a")], 2)
    keys = [(e.hops, e.key()) for e in edges]
    assert keys == sorted(keys)


def _word_tokens(words):
    table = SymbolTable()
    return [H.NodeToken(H.KIND_WORD, table.intern(w)) for w in words]


def test_ngram_enumeration():
    edges = H.question_ngrams(_word_tokens(["who", "is", "x"]), 2)
    assert [e.surfaces() for e in edges] == [
        ["who"], ["who", "is"], ["is"], ["is", "x"], ["x"],
    ]
    assert all(e.hops == 0 and e.side == "question" for e in edges)


def test_ngram_length_caps_n():
    edges = H.question_ngrams(_word_tokens(["a"]), 3)
    assert [e.surfaces() for e in edges] == [["a"]]


def test_ngram_rejects_empty():
    with pytest.raises(ValueError):
        H.question_ngrams([], 2)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 10), st.integers(1, 5))
def test_ngram_count_law(t, n):
    # distinct tokens so no dedup interferes
    edges = H.question_ngrams(_word_tokens([f"w{i}" for i in range(t)]), n)
    expected = sum(t - k + 1 for k in range(1, min(n, t) + 1))
    assert len(edges) == expected


def test_ngram_dedup_keeps_first():
    edges = H.question_ngrams(_word_tokens(["the", "x", "the"]), 2)
    assert [e.surfaces() for e in edges] == [
        ["the"], ["the", "x"], ["x"], ["x", "the"],
    ]


def _edges_with_hops(counts):
    table = SymbolTable()
    edges = []
    for hops, count in counts.items():
        for i in range(count):
            toks = tuple(
                H.NodeToken(H.KIND_ENTITY, table.intern(f"h{hops}n{i}t{j}"))
                for j in range(2 * max(hops, 1) + 1)
            )
            edges.append(H.Hyperedge(toks, hops, "knowledge"))
    return edges


def test_cap_identity_when_under_budget():
    edges = _edges_with_hops({1: 5})
    assert H.cap_hyperedges(edges, 10, seed=0) == edges


def test_cap_keeps_lower_hops_then_samples():
    edges = _edges_with_hops({1: 3, 2: 100})
    capped = H.cap_hyperedges(edges, 10, seed=0)
    assert len(capped) == 10
    assert [e for e in capped if e.hops == 1] == [e for e in edges if e.hops == 1]
    assert sum(1 for e in capped if e.hops == 2) == 7


def test_cap_drops_classes_beyond_overflow():
    edges = _edges_with_hops({1: 3, 2: 100, 3: 50})
    capped = H.cap_hyperedges(edges, 10, seed=1)
    assert sum(1 for e in capped if e.hops == 3) == 0
    assert sum(1 for e in capped if e.hops == 1) == 3


def test_cap_deterministic():
    edges = _edges_with_hops({1: 3, 2: 100})
    assert H.cap_hyperedges(edges, 10, seed=7) == H.cap_hyperedges(edges, 10, seed=7)
    assert H.cap_hyperedges(edges, 10, seed=7) != H.cap_hyperedges(edges, 10, seed=8)


def test_cap_preserves_canonical_order():
    edges = _edges_with_hops({1: 4, 2: 40})
    capped = H.cap_hyperedges(edges, 12, seed=3)
    positions = [edges.index(e) for e in capped]
    assert positions == sorted(positions)


def test_build_pair_family_scenario():
    # Two seeds over a small family KB; the chained 2-hop edge that answers
    # "which position does the father of the child's mother hold" style
    # questions must appear among the knowledge edges.
    kb = K.load_triples(
        "sasha\tchild_of\tmichelle\n"
        "michelle\tspouse\tbarack\n"
        "barack\tposition\tpresident\n"
        "sasha\tsibling\tmalia\n"
        "malia\tchild_of\tmichelle\n"
        "michelle\tborn_in\tchicago\n"
    )
    tokens = tokenize("what position does the spouse of michelle hold sasha")
    link = link_question(kb, tokens)
    assert {s.surface for s in link.seeds} == {"sasha", "michelle"}
    table = SymbolTable()
    pair = H.build_pair(kb, link, tokens, H.WalkConfig(n_hops=2), table.intern, "fam1")
    surfaces = [e.surfaces() for e in pair.knowledge_edges]
    assert ["michelle", "spouse", "barack", "position", "president"] in surfaces
    assert pair.caps_applied == {"question": False, "knowledge": False}


def test_build_pair_no_seeds_gives_empty_knowledge():
    kb = K.load_triples("a\tr\tb\n")
    tokens = ["nothing", "links"]
    link = link_question(kb, tokens)
    pair = H.build_pair(kb, link, tokens, H.WalkConfig(), SymbolTable().intern, "q0")
    assert pair.knowledge_edges == []
    assert len(pair.question_edges) > 0


def test_build_pair_exact_hops_filters():
    kb = K.load_triples("a\tr\tb\nb\ts\tc\n")
    tokens = ["a"]
    link = link_question(kb, tokens)
    cfg = H.WalkConfig(n_hops=2, exact_hops=True)
    pair = H.build_pair(kb, link, tokens, cfg, SymbolTable().intern, "q1")
    assert [e.hops for e in pair.knowledge_edges] == [2]


def test_build_pair_respects_cap():
    lines = [f"hub\tr{i}\tt{i}" for i in range(30)]
    kb = K.load_triples("\n".join(lines) + "\n")
    tokens = ["hub"]
    link = link_question(kb, tokens)
    cfg = H.WalkConfig(n_hops=1, knowledge_cap=10, cap_seed=5)
    pair = H.build_pair(kb, link, tokens, cfg, SymbolTable().intern, "q2")
    assert len(pair.knowledge_edges) == 10
    assert pair.caps_applied["knowledge"] is True


def test_gold_path_present_when_hops_cover_depth(synth_bundle):
    bundle = synth_bundle
    for pair_qa in bundle.pairs[:10]:
        seeds = [bundle.kb.entity(s) for s in pair_qa.seeds]
        edges = H.knowledge_walks(bundle.kb, seeds, n_hops=2)
        gold = [s for s in pair_qa.path]
        assert gold in [e.surfaces() for e in edges]


def test_pair_json_round_arrays():
    import json

    kb = K.load_triples("a\tr\tb\n")
    tokens = ["a"]
    link = link_question(kb, tokens)
    pair = H.build_pair(kb, link, tokens, H.WalkConfig(n_hops=1), SymbolTable().intern, "q7")
    payload = json.loads(H.pair_to_json(pair))
    assert payload["qid"] == "q7"
    assert payload["k_edges"] == [["a", "r", "b"]]
    assert payload["hops"] == [1]
