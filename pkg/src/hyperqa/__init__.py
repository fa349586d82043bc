"""Multi-hop knowledge-base question answering via hyperedge matching.

The pipeline links question text to KB entities, expands the linked
entities into a query-aware knowledge hypergraph by multi-hop graph
walks, builds a question hypergraph from n-grams, matches the two
hyperedge sets with guided- and self-attention blocks, and scores
answers with an MLP or by embedding similarity. Training uses only
question/answer pairs.
"""

__version__ = "0.1.0"

from hyperqa.kbstore import KnowledgeBase, load_triples, neighbors, stats
from hyperqa.linker import LinkResult, link_question, load_oracle_links
from hyperqa.hypergraph import (
    Hyperedge,
    HypergraphPair,
    NodeToken,
    WalkConfig,
    build_pair,
    cap_hyperedges,
    knowledge_walks,
    question_ngrams,
)

__all__ = [
    "KnowledgeBase",
    "load_triples",
    "neighbors",
    "stats",
    "LinkResult",
    "link_question",
    "load_oracle_links",
    "NodeToken",
    "Hyperedge",
    "HypergraphPair",
    "WalkConfig",
    "knowledge_walks",
    "question_ngrams",
    "cap_hyperedges",
    "build_pair",
    "__version__",
]
