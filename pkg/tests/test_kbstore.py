import random

import pytest
from hypothesis import given, settings, strategies as st

from hyperqa import kbstore as K


def test_single_triple():
    kb = K.load_triples("a\tr\tb\n")
    assert K.stats(kb) == {"entities": 2, "relations": 1, "facts": 1, "duplicates_dropped": 0}


def test_duplicate_lines_collapse():
    kb = K.load_triples("a\tr\tb\na\tr\tb\n")
    assert len(kb.facts) == 1
    assert kb.duplicates_dropped == 1


def test_normalization_merges_cosmetic_variants():
    kb = K.load_triples("Barack_Obama\tBORN_IN\thawaii\nbarack  obama\tborn in\tHawaii\n")
    assert len(kb.facts) == 1
    assert kb.entities.get("barack obama") is not None


@pytest.mark.parametrize(
    "text,line_no",
    [("a\tr\n", 1), ("a\tr\tb\tc\n", 1), ("a\tr\tb\nx\t\ty\n", 2), ("ok\tr\tb\nx\t\t_\n", 2)],
)
def test_malformed_line_reports_line_number(text, line_no):
    with pytest.raises(K.KBFormatError) as exc:
        K.load_triples(text)
    assert exc.value.line_no == line_no


def test_empty_input_rejected():
    with pytest.raises(K.KBFormatError):
        K.load_triples("")
    with pytest.raises(K.KBFormatError):
        K.load_triples("\n\n  \n")


def test_neighbors_order_and_empty():
    kb = K.load_triples("a\tr\tb\na\ts\tc\n")
    r, s = kb.relations.get("r"), kb.relations.get("s")
    assert r.id < s.id
    assert K.neighbors(kb, kb.entity("a")) == [(r, kb.entity("b")), (s, kb.entity("c"))]
    assert K.neighbors(kb, kb.entity("b")) == []


def test_neighbors_unknown_entity():
    kb = K.load_triples("a\tr\tb\n")
    with pytest.raises(K.UnknownSymbolError):
        K.neighbors(kb, 999)


def _random_kb_text(rng, n_facts=50):
    lines = set()
    while len(lines) < n_facts:
        h = f"e{rng.randrange(12)}"
        r = f"r{rng.randrange(4)}"
        t = f"e{rng.randrange(12)}"
        lines.add(f"{h}\t{r}\t{t}")
    return "\n".join(lines) + "\n"


def test_neighbors_matches_brute_force_filter():
    rng = random.Random(11)
    for _ in range(20):
        kb = K.load_triples(_random_kb_text(rng))
        for ent in kb.entities:
            expected = sorted(
                ((f.predicate, f.tail) for f in kb.facts if f.head.id == ent.id),
                key=lambda pt: (pt[0].id, pt[1].id),
            )
            assert K.neighbors(kb, ent) == expected


def test_neighbors_exhaustive_and_exclusive():
    kb = K.load_triples(_random_kb_text(random.Random(5)))
    rebuilt = [
        (ent.id, r.id, t.id) for ent in kb.entities for r, t in K.neighbors(kb, ent)
    ]
    assert sorted(rebuilt) == sorted((f.head.id, f.predicate.id, f.tail.id) for f in kb.facts)
    assert len(rebuilt) == len(kb.facts)


def test_interning_stable_across_loads():
    text = _random_kb_text(random.Random(3))
    kb1, kb2 = K.load_triples(text), K.load_triples(text)
    assert kb1.entities.surfaces() == kb2.entities.surfaces()
    assert kb1.relations.surfaces() == kb2.relations.surfaces()


@settings(max_examples=60, deadline=None)
@given(
    st.lists(
        st.tuples(st.integers(0, 8), st.integers(0, 3), st.integers(0, 8)),
        min_size=1,
        max_size=40,
    )
)
def test_serialize_roundtrip(triples):
    text = "".join(f"x{h}\ty{r}\tx{t}\n" for h, r, t in triples)
    kb = K.load_triples(text)
    again = K.load_triples(K.serialize(kb))
    assert K.serialize(again) == K.serialize(kb)
    assert len(kb.facts) == len({(h, r, t) for h, r, t in triples})


def test_add_inverse_materializes_reversed_facts():
    kb = K.load_triples("a\tr\tb\n", add_inverse=True)
    assert len(kb.facts) == 2
    inv = kb.relations.get("r ^-1")
    assert inv is not None
    assert K.neighbors(kb, kb.entity("b")) == [(inv, kb.entity("a"))]


def test_stats_json_fields():
    import json

    kb = K.load_triples("a\tr\tb\na\tr\tb\n")
    payload = json.loads(K.stats_json(kb))
    assert payload == {"entities": 2, "relations": 1, "facts": 1, "duplicates_dropped": 1}
