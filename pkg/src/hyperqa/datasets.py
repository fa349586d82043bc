"""Dataset carriers: on-disk bundle format and a synthetic multi-hop generator.

A bundle directory holds ``kb.tsv`` (TAB triples), ``qa.jsonl`` with
``{qid, question, answer, seeds?, path?}`` records, optional oracle
``links.tsv``, and ``meta.json`` provenance. Gold paths exist only for
validation and attention scoring; the trainer never reads them.

The generator builds a layered KB where every non-terminal entity gets a
fixed number of outgoing relations, each deterministic per (entity,
relation). A question is a seed plus a relation chain, so the answer is
the unique terminal of that chain and cannot be predicted from the seed
alone.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from pathlib import Path

from hyperqa.kbstore import KnowledgeBase, load_triples, normalize_surface


class BundleError(ValueError):
    pass


@dataclass
class QAPair:
    qid: str
    question: str
    answer: str
    seeds: list[str] | None = None
    path: list[str] | None = None  # alternating entity/relation surfaces, eval-only


@dataclass
class DatasetBundle:
    kb: KnowledgeBase
    pairs: list[QAPair]
    answer_vocab: list[str]
    provenance: dict = field(default_factory=dict)
    oracle_links: dict[str, list[str]] | None = None


def _validate_pairs(kb: KnowledgeBase, pairs: list[QAPair]) -> None:
    problems = []
    fact_set = {
        (f.head.surface, f.predicate.surface, f.tail.surface) for f in kb.facts
    }
    seen_qids = set()
    for pair in pairs:
        if pair.qid in seen_qids:
            problems.append(f"{pair.qid}: duplicate qid")
            continue
        seen_qids.add(pair.qid)
        if not normalize_surface(pair.answer):
            problems.append(f"{pair.qid}: empty answer")
        for seed in pair.seeds or []:
            if kb.entities.get(seed) is None:
                problems.append(f"{pair.qid}: seed {seed!r} not in KB")
        if pair.path is not None:
            surfaces = [normalize_surface(s) for s in pair.path]
            if len(surfaces) < 3 or len(surfaces) % 2 == 0:
                problems.append(f"{pair.qid}: path must alternate entity/relation/entity")
                continue
            for i in range(0, len(surfaces) - 2, 2):
                fact = (surfaces[i], surfaces[i + 1], surfaces[i + 2])
                if fact not in fact_set:
                    problems.append(f"{pair.qid}: path fact {fact} not in KB")
    if problems:
        raise BundleError("bundle validation failed:\n" + "\n".join(problems))


def load_bundle(directory) -> DatasetBundle:
    directory = Path(directory)
    kb_path = directory / "kb.tsv"
    qa_path = directory / "qa.jsonl"
    if not kb_path.exists():
        raise BundleError(f"missing {kb_path}")
    if not qa_path.exists():
        raise BundleError(f"missing {qa_path}")

    kb = load_triples(kb_path.read_text(encoding="utf-8"))
    pairs: list[QAPair] = []
    for line_no, raw in enumerate(qa_path.read_text(encoding="utf-8").splitlines(), 1):
        if not raw.strip():
            continue
        try:
            rec = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise BundleError(f"qa.jsonl line {line_no}: {exc}") from None
        for key in ("qid", "question", "answer"):
            if key not in rec:
                raise BundleError(f"qa.jsonl line {line_no}: missing {key!r}")
        pairs.append(
            QAPair(
                qid=str(rec["qid"]),
                question=rec["question"],
                answer=normalize_surface(rec["answer"]),
                seeds=rec.get("seeds"),
                path=rec.get("path"),
            )
        )
    if not pairs:
        raise BundleError("qa.jsonl holds no QA pairs")
    _validate_pairs(kb, pairs)

    links = None
    links_path = directory / "links.tsv"
    if links_path.exists():
        links = {}
        for raw in links_path.read_text(encoding="utf-8").splitlines():
            if raw.strip():
                parts = raw.split("\t")
                links[parts[0]] = parts[1:]

    provenance = {}
    meta_path = directory / "meta.json"
    if meta_path.exists():
        provenance = json.loads(meta_path.read_text(encoding="utf-8"))

    answer_vocab = sorted({p.answer for p in pairs})
    return DatasetBundle(kb, pairs, answer_vocab, provenance, links)


def save_bundle(bundle: DatasetBundle, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "kb.tsv").write_text(
        "".join(
            f"{f.head.surface}\t{f.predicate.surface}\t{f.tail.surface}\n"
            for f in bundle.kb.facts
        ),
        encoding="utf-8",
    )
    with open(directory / "qa.jsonl", "w", encoding="utf-8") as fh:
        for pair in bundle.pairs:
            rec = {"qid": pair.qid, "question": pair.question, "answer": pair.answer}
            if pair.seeds is not None:
                rec["seeds"] = pair.seeds
            if pair.path is not None:
                rec["path"] = pair.path
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    if bundle.oracle_links is not None:
        with open(directory / "links.tsv", "w", encoding="utf-8") as fh:
            for qid, seeds in bundle.oracle_links.items():
                fh.write("\t".join([qid] + seeds) + "\n")
    (directory / "meta.json").write_text(
        json.dumps(bundle.provenance, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


# ---------------------------------------------------------------------------
# synthetic generator
# ---------------------------------------------------------------------------

@dataclass
class SynthSpec:
    n_entities: int = 200
    n_relations: int = 5
    depth: int = 2
    n_questions: int = 1000
    branching: int = 2
    seed: int = 0

    def validate(self) -> None:
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.branching < 1 or self.branching > self.n_relations:
            raise ValueError(
                f"branching must be in 1..n_relations, got {self.branching} vs {self.n_relations}"
            )
        if self.n_entities < 2 * (self.depth + 1):
            raise ValueError("not enough entities for the requested depth")


def _question_text(rel_chain: list[str], seed_surface: str) -> str:
    parts = ["what is the"]
    for rel in reversed(rel_chain):
        parts.append(rel)
        parts.append("of the")
    parts[-1] = "of"
    parts.append(seed_surface)
    return " ".join(parts)


def synth_generate(spec: SynthSpec) -> DatasetBundle:
    """Generate a layered-KB bundle with unique, path-determined answers."""
    spec.validate()
    rng = random.Random(spec.seed)

    per_layer = spec.n_entities // (spec.depth + 1)
    layers: list[list[str]] = []
    idx = 0
    for layer in range(spec.depth + 1):
        size = per_layer if layer < spec.depth else spec.n_entities - idx
        layers.append([f"e{idx + j}" for j in range(size)])
        idx += size
    relations = [f"r{j}" for j in range(spec.n_relations)]

    # Every non-terminal entity gets exactly `branching` outgoing relations,
    # one target each, into the next layer: per (entity, relation) the walk
    # is deterministic, so a seed plus a relation chain has a unique terminal.
    out: dict[str, dict[str, str]] = {}
    facts: list[tuple[str, str, str]] = []
    for layer in range(spec.depth):
        for ent in layers[layer]:
            rels = rng.sample(relations, spec.branching)
            out[ent] = {}
            for rel in sorted(rels):
                target = rng.choice(layers[layer + 1])
                out[ent][rel] = target
                facts.append((ent, rel, target))

    # Enumerate every (seed, relation-chain) path, then sample the QA set.
    all_paths: list[tuple[str, tuple[str, ...], list[str]]] = []
    for seed_ent in layers[0]:
        frontier = [([seed_ent], [])]
        for _ in range(spec.depth):
            nxt = []
            for ents, rels in frontier:
                for rel in sorted(out.get(ents[-1], {})):
                    nxt.append((ents + [out[ents[-1]][rel]], rels + [rel]))
            frontier = nxt
        for ents, rels in frontier:
            chain = []
            for e, r in zip(ents, rels):
                chain.extend([e, r])
            chain.append(ents[-1])
            all_paths.append((seed_ent, tuple(rels), chain))

    if spec.n_questions > len(all_paths):
        raise ValueError(
            f"unsatisfiable spec: {spec.n_questions} questions requested, "
            f"only {len(all_paths)} distinct paths exist"
        )
    chosen = rng.sample(all_paths, spec.n_questions)

    pairs: list[QAPair] = []
    links: dict[str, list[str]] = {}
    width = len(str(max(1, spec.n_questions - 1)))
    for i, (seed_ent, rels, chain) in enumerate(chosen):
        qid = f"synth-{i:0{width}d}"
        pairs.append(
            QAPair(
                qid=qid,
                question=_question_text(list(rels), seed_ent),
                answer=chain[-1],
                seeds=[seed_ent],
                path=chain,
            )
        )
        links[qid] = [seed_ent]

    kb = load_triples("".join(f"{h}\t{r}\t{t}\n" for h, r, t in facts))
    bundle = DatasetBundle(
        kb=kb,
        pairs=pairs,
        answer_vocab=sorted({p.answer for p in pairs}),
        provenance={
            "name": "synthetic",
            "spec": {
                "n_entities": spec.n_entities,
                "n_relations": spec.n_relations,
                "depth": spec.depth,
                "n_questions": spec.n_questions,
                "branching": spec.branching,
                "seed": spec.seed,
            },
            "converter": "synth_generate/1",
        },
        oracle_links=links,
    )
    _validate_pairs(kb, pairs)
    _assert_unique_answers(bundle, spec.depth)
    return bundle


def _assert_unique_answers(bundle: DatasetBundle, depth: int) -> None:
    """Exhaustive check: each question's relation chain reaches exactly one terminal."""
    adjacency: dict[str, list[tuple[str, str]]] = {}
    for f in bundle.kb.facts:
        adjacency.setdefault(f.head.surface, []).append((f.predicate.surface, f.tail.surface))

    for pair in bundle.pairs:
        rels = [pair.path[i] for i in range(1, len(pair.path), 2)]
        frontier = [pair.path[0]]
        for rel in rels:
            frontier = [t for e in frontier for r, t in adjacency.get(e, []) if r == rel]
        if len(frontier) != 1 or frontier[0] != pair.answer:
            raise AssertionError(
                f"{pair.qid}: expected unique terminal {pair.answer!r}, got {frontier}"
            )
