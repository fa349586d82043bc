"""Weakly-supervised training and evaluation over QA pairs.

Questions are prepared once into padded hyperedge batches (walks, n-grams,
caps, vocabulary ids); the loop then shuffles, batches, runs forward and
backward, and applies Adam with a linearly decaying learning rate. Model
selection keeps the best validation accuracy@1 checkpoint. Gold paths are
never read here except to locate the gold hyperedge index for trace
scoring, which plays no part in the loss.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from hyperqa import model as M
from hyperqa import tensor as T
from hyperqa.datasets import DatasetBundle, QAPair
from hyperqa.hypergraph import (
    Hyperedge,
    NodeToken,
    WalkConfig,
    build_pair,
)
from hyperqa.kbstore import SymbolTable, normalize_surface
from hyperqa.linker import LinkResult, link_question, tokenize

log = logging.getLogger(__name__)


class VocabularyMismatchError(ValueError):
    pass


@dataclass
class TrainConfig:
    lr_start: float = 1e-4
    lr_end: float = 1e-5
    batch_size: int = 128
    epochs: int = 50
    seed: int = 0
    dropout: float = 0.1
    predictor: str = "mlp"  # mlp | sim
    patience: int = 10

    def validate(self) -> None:
        if not 128 <= self.batch_size <= 256:
            raise ValueError(f"batch_size must be in 128..256, got {self.batch_size}")
        if not 0.05 <= self.dropout <= 0.2:
            raise ValueError(f"dropout must be in [0.05, 0.2], got {self.dropout}")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.predictor not in ("mlp", "sim"):
            raise ValueError(f"unknown predictor {self.predictor!r}")


@dataclass
class Metrics:
    accuracy_at_1: float = 0.0
    accuracy_at_3: float = 0.0
    loss_curve: list[float] = field(default_factory=list)
    val_accuracy: list[float] = field(default_factory=list)
    epoch_seconds: list[float] = field(default_factory=list)
    skipped: int = 0
    n_questions: int = 0
    best_epoch: int = -1
    link_mode: str = ""

    def to_dict(self, include_timings: bool = False) -> dict:
        out = {
            "accuracy_at_1": self.accuracy_at_1,
            "accuracy_at_3": self.accuracy_at_3,
            "loss_curve": self.loss_curve,
            "val_accuracy": self.val_accuracy,
            "skipped": self.skipped,
            "n_questions": self.n_questions,
            "best_epoch": self.best_epoch,
            "link_mode": self.link_mode,
        }
        if include_timings:
            out["epoch_seconds"] = self.epoch_seconds
        return out


def split_dataset(pairs: list, ratios: tuple[float, ...], seed: int) -> list[list]:
    """Seeded shuffle then contiguous cuts; exact disjoint partition."""
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {ratios}")
    if len(pairs) < len(ratios):
        raise ValueError(f"{len(pairs)} pairs cannot fill {len(ratios)} splits")
    order = list(range(len(pairs)))
    import random as _random

    _random.Random(seed).shuffle(order)
    shuffled = [pairs[i] for i in order]
    cuts = [0]
    acc = 0.0
    for r in ratios[:-1]:
        acc += r
        cuts.append(int(len(pairs) * acc))
    cuts.append(len(pairs))
    return [shuffled[a:b] for a, b in zip(cuts[:-1], cuts[1:])]


# ---------------------------------------------------------------------------
# question preparation
# ---------------------------------------------------------------------------

@dataclass
class PreparedQuestion:
    qid: str
    answer: str
    q_edges: list[Hyperedge]
    k_edges: list[Hyperedge]
    gold_edge_index: int | None = None
    q_batch: M.HyperedgeBatch | None = None
    k_batch: M.HyperedgeBatch | None = None


@dataclass
class PreparedSet:
    items: list[PreparedQuestion]
    skipped: list[tuple[str, str]]  # (qid, reason)
    word_table: SymbolTable
    link_mode: str
    walk_cfg: WalkConfig
    input_mode: tuple[str, str]  # (knowledge, question)


def word_unit_edges(edges: list[Hyperedge]) -> list[Hyperedge]:
    """Flatten hyperedges into length-1 rows, one per token, duplicates kept."""
    rows = []
    for edge in edges:
        for tok in edge.tokens:
            rows.append(Hyperedge((tok,), edge.hops, edge.side))
    return rows


def _oracle_spans(seed_surfaces: list[str], kb, tokens: list[str]) -> LinkResult:
    """Exact-match only the oracle seed surfaces against the question tokens."""
    surface_toks = {}
    for s in seed_surfaces:
        sym = kb.entity(s)
        surface_toks[tuple(sym.surface.split(" "))] = sym
    lengths = sorted({len(k) for k in surface_toks}, reverse=True)
    seeds, spans, residual = [], [], []
    i = 0
    while i < len(tokens):
        hit = None
        for ln in lengths:
            sym = surface_toks.get(tuple(tokens[i : i + ln]))
            if sym is not None:
                hit = (sym, i + ln)
                break
        if hit:
            seeds.append(hit[0])
            spans.append((i, hit[1]))
            i = hit[1]
        else:
            residual.append(tokens[i])
            i += 1
    return LinkResult(seeds, spans, residual)


def prepare_questions(
    bundle: DatasetBundle,
    walk_cfg: WalkConfig,
    input_mode: tuple[str, str] = ("hyperedge", "hyperedge"),
    use_oracle_seeds: bool = True,
) -> PreparedSet:
    """Build per-question hyperedge sets for the whole bundle.

    ``input_mode`` is (knowledge, question), each "hyperedge" or
    "word_unit". Questions with zero knowledge edges are skipped and
    reported, not fatal.
    """
    for side_mode in input_mode:
        if side_mode not in ("hyperedge", "word_unit"):
            raise ValueError(f"unknown input mode {side_mode!r}")
    word_table = SymbolTable()
    items: list[PreparedQuestion] = []
    skipped: list[tuple[str, str]] = []
    oracle = use_oracle_seeds and all(p.seeds for p in bundle.pairs)
    link_mode = "oracle" if oracle else "matched"

    for pair in bundle.pairs:
        tokens = tokenize(pair.question)
        if not tokens:
            skipped.append((pair.qid, "empty question"))
            continue
        if oracle:
            link = _oracle_spans(pair.seeds, bundle.kb, tokens)
            walk_seeds = [bundle.kb.entity(s) for s in pair.seeds]
        else:
            link = link_question(bundle.kb, tokens)
            walk_seeds = None
        hg = build_pair(
            bundle.kb, link, tokens, walk_cfg, word_table.intern, pair.qid,
            walk_seeds=walk_seeds,
        )
        k_edges = hg.knowledge_edges
        if not k_edges:
            skipped.append((pair.qid, "no knowledge edges"))
            continue

        gold_idx = None
        if pair.path is not None and input_mode[0] == "hyperedge":
            wanted = [normalize_surface(s) for s in pair.path]
            for idx, edge in enumerate(k_edges):
                if edge.surfaces() == wanted:
                    gold_idx = idx
                    break

        if input_mode[0] == "word_unit":
            from hyperqa.hypergraph import cap_hyperedges, _cap_rng_seed

            k_edges = word_unit_edges(k_edges)
            cap = walk_cfg.effective_knowledge_cap()
            if len(k_edges) > cap:
                k_edges = cap_hyperedges(
                    k_edges, cap, _cap_rng_seed(walk_cfg.cap_seed, pair.qid + "#w")
                )
        q_edges = hg.question_edges
        if input_mode[1] == "word_unit":
            from hyperqa.hypergraph import question_ngrams, question_tokens_from_link

            q_nodes = question_tokens_from_link(link, tokens, word_table.intern)
            q_edges = question_ngrams(q_nodes, 1)

        items.append(
            PreparedQuestion(pair.qid, pair.answer, q_edges, k_edges, gold_idx)
        )

    if skipped:
        log.warning("skipped %d questions: %s", len(skipped), skipped[:5])
    return PreparedSet(items, skipped, word_table, link_mode, walk_cfg, input_mode)


def build_vocab(bundle: DatasetBundle, word_table: SymbolTable) -> M.Vocabulary:
    """PAD, then KB entities, KB relations, and question words, deduped by surface."""
    vocab = M.Vocabulary()
    for sym in bundle.kb.entities:
        vocab.add(sym.surface)
    for sym in bundle.kb.relations:
        vocab.add(sym.surface)
    for surface in word_table.surfaces():
        vocab.add(surface)
    return vocab


def finalize_batches(
    prepared: PreparedSet, vocab: M.Vocabulary, k_max_nodes: int, q_max_nodes: int
) -> None:
    try:
        for item in prepared.items:
            item.q_batch = M.make_batch(item.q_edges, vocab, q_max_nodes, "question")
            item.k_batch = M.make_batch(item.k_edges, vocab, k_max_nodes, "knowledge")
    except KeyError as exc:
        raise VocabularyMismatchError(
            f"question {item.qid}: {exc.args[0]}; "
            "checkpoint vocabulary does not cover this dataset"
        ) from None


def config_hash(model_cfg: M.ModelConfig, train_cfg: TrainConfig, walk_cfg: WalkConfig) -> str:
    payload = {
        "model": model_cfg.to_dict(),
        "train": vars(train_cfg),
        "walk": vars(walk_cfg),
    }
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# forward/eval helpers
# ---------------------------------------------------------------------------

def _forward_scores(
    params: M.ModelParams,
    items: list[PreparedQuestion],
    train: bool = False,
    dropout_seed: int = 0,
) -> T.Tensor:
    z_q, z_k, _ = M.encode(
        params,
        [it.q_batch for it in items],
        [it.k_batch for it in items],
        train=train,
        dropout_seed=dropout_seed,
    )
    return M.predict(params, z_q, z_k)


def _score_answers(
    params: M.ModelParams, items: list[PreparedQuestion], batch_size: int = 256
) -> np.ndarray:
    chunks = []
    for lo in range(0, len(items), batch_size):
        chunk = items[lo : lo + batch_size]
        chunks.append(_forward_scores(params, chunk).data)
    return np.concatenate(chunks, axis=0) if chunks else np.zeros((0, len(params.answers)))


def _topk_hits(scores: np.ndarray, target: int | None, k: int) -> bool:
    if target is None:
        return False
    if k == 1:
        return int(np.argmax(scores)) == target
    top = np.argpartition(-scores, min(k, len(scores) - 1))[:k]
    return target in set(int(i) for i in top)


def evaluate(
    params: M.ModelParams,
    items: list[PreparedQuestion],
    skipped: list[tuple[str, str]] | None = None,
    batch_size: int = 256,
    workers: int = 1,
) -> tuple[Metrics, list[dict]]:
    """Accuracy@1/@3 plus a per-question prediction dump.

    Skipped (unanswerable) questions count as incorrect. Sharding across
    workers changes nothing but wall time; chunks are merged in order.
    """
    answer_to_idx = {a: i for i, a in enumerate(params.answers)}
    chunks = [items[lo : lo + batch_size] for lo in range(0, len(items), batch_size)]
    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            scored = list(pool.map(lambda c: _forward_scores(params, c).data, chunks))
    else:
        scored = [_forward_scores(params, c).data for c in chunks]

    dump: list[dict] = []
    hits1 = hits3 = 0
    for chunk, scores in zip(chunks, scored):
        for item, row in zip(chunk, scores):
            target = answer_to_idx.get(item.answer)
            top1 = int(np.argmax(row))
            h1 = _topk_hits(row, target, 1)
            h3 = _topk_hits(row, target, 3)
            hits1 += h1
            hits3 += h3
            dump.append(
                {
                    "qid": item.qid,
                    "gold": item.answer,
                    "pred": params.answers[top1],
                    "correct": bool(h1),
                }
            )
    for qid, reason in skipped or []:
        dump.append({"qid": qid, "gold": "", "pred": "", "correct": False})
    total = len(items) + len(skipped or [])
    metrics = Metrics(
        accuracy_at_1=hits1 / total if total else 0.0,
        accuracy_at_3=hits3 / total if total else 0.0,
        skipped=len(skipped or []),
        n_questions=total,
    )
    return metrics, dump


def predictions_tsv(dump: list[dict]) -> str:
    lines = [
        f"{r['qid']}\t{r['gold']}\t{r['pred']}\t{int(r['correct'])}" for r in dump
    ]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    params: M.ModelParams
    metrics: Metrics
    vocab: M.Vocabulary
    answers: list[str]
    config_hash: str
    prepared: PreparedSet
    splits: tuple[list[PreparedQuestion], list[PreparedQuestion], list[PreparedQuestion]]
    split_skipped: tuple[list, list, list]


def _lr_at(cfg: TrainConfig, epoch: int) -> float:
    if cfg.epochs <= 1:
        return cfg.lr_start
    frac = epoch / (cfg.epochs - 1)
    return cfg.lr_start + (cfg.lr_end - cfg.lr_start) * frac


def train_loop(
    bundle: DatasetBundle,
    model_cfg: M.ModelConfig,
    train_cfg: TrainConfig,
    walk_cfg: WalkConfig,
    word_vectors=None,
    input_mode: tuple[str, str] = ("hyperedge", "hyperedge"),
    split_ratios: tuple[float, float, float] = (0.8, 0.1, 0.1),
    use_oracle_seeds: bool = True,
) -> TrainResult:
    """Train from QA pairs only; returns best-validation parameters and metrics."""
    train_cfg.validate()
    model_cfg.dropout = train_cfg.dropout
    model_cfg.predictor = train_cfg.predictor
    model_cfg.k_max_nodes = 2 * walk_cfg.n_hops + 1
    model_cfg.q_max_nodes = walk_cfg.max_n
    model_cfg.validate()

    splits_pairs = split_dataset(bundle.pairs, split_ratios, train_cfg.seed)
    qid_splits = [
        {p.qid for p in part} for part in splits_pairs
    ]
    assert not (qid_splits[0] & qid_splits[1] & qid_splits[2])
    for a in range(3):
        for b in range(a + 1, 3):
            assert not (qid_splits[a] & qid_splits[b]), "split leakage"

    prepared = prepare_questions(bundle, walk_cfg, input_mode, use_oracle_seeds)
    by_qid = {item.qid: item for item in prepared.items}
    skipped_by_qid = dict(prepared.skipped)

    split_items: list[list[PreparedQuestion]] = []
    split_skipped: list[list] = []
    for part in splits_pairs:
        split_items.append([by_qid[p.qid] for p in part if p.qid in by_qid])
        split_skipped.append(
            [(p.qid, skipped_by_qid[p.qid]) for p in part if p.qid in skipped_by_qid]
        )
    train_items, val_items, test_items = split_items

    if train_cfg.predictor == "mlp":
        answers = sorted({it.answer for it in train_items})
    else:
        answers = list(bundle.answer_vocab)
    answer_to_idx = {a: i for i, a in enumerate(answers)}

    vocab = build_vocab(bundle, prepared.word_table)
    finalize_batches(prepared, vocab, model_cfg.k_max_nodes, model_cfg.q_max_nodes)

    dtype = model_cfg.np_dtype()
    if word_vectors is not None:
        embedding = M.load_word_vectors(
            word_vectors, vocab, w=model_cfg.w, oov_seed=train_cfg.seed, dtype=dtype
        )
    else:
        embedding = M.random_embedding_table(vocab, model_cfg.w, train_cfg.seed, dtype=dtype)
    candidates = None
    if train_cfg.predictor == "sim":
        # Candidate rows reuse the node rows of the answer surfaces, so both
        # sides of the dot product live in the same embedding space.
        vocab_ids = []
        missing = []
        for a in answers:
            try:
                vocab_ids.append(vocab.id(a))
            except KeyError:
                vocab_ids.append(M.PAD_ID)
                missing.append(a)
        candidates = embedding.rows[vocab_ids].astype(dtype)
        if missing:
            vec_map = (
                M.parse_word_vectors(word_vectors, expected_dim=model_cfg.w)
                if word_vectors is not None
                else None
            )
            rows, _ = M.pooled_rows(
                missing, model_cfg.w, train_cfg.seed, vec_map, dtype=dtype,
                oov="uniform_small" if vec_map else "gaussian",
            )
            for surf, row in zip(missing, rows):
                candidates[answers.index(surf)] = row
    params = M.init_params(
        model_cfg, vocab, answers, train_cfg.seed, embedding, candidates
    )

    cfg_hash = config_hash(model_cfg, train_cfg, walk_cfg)
    metrics = Metrics(skipped=len(prepared.skipped), link_mode=prepared.link_mode)
    trainable = [it for it in train_items if it.answer in answer_to_idx]
    if not trainable:
        raise ValueError("no trainable questions (every train pair was skipped)")

    state = T.AdamState()
    best_val = -1.0
    best_epoch = -1
    best_arrays: dict[str, np.ndarray] | None = None
    stale = 0
    global_step = 0

    for epoch in range(train_cfg.epochs):
        t0 = time.perf_counter()
        order = np.random.default_rng((train_cfg.seed, epoch)).permutation(len(trainable))
        lr = _lr_at(train_cfg, epoch)
        losses = []
        for lo in range(0, len(order), train_cfg.batch_size):
            batch = [trainable[i] for i in order[lo : lo + train_cfg.batch_size]]
            targets = np.array([answer_to_idx[it.answer] for it in batch], dtype=np.int64)
            drop_seed = ((train_cfg.seed + 1) * 2_654_435_761 + global_step) & 0x7FFFFFFF
            scores = _forward_scores(params, batch, train=True, dropout_seed=drop_seed)
            loss = T.cross_entropy_logits(scores, targets)
            params.zero_grads()
            T.backward(loss)
            grads = {
                name: t.grad for name, t in params.tensors.items() if t.grad is not None
            }
            T.adam_step(params.tensors, grads, state, lr)
            losses.append(float(loss.data))
            global_step += 1

        metrics.loss_curve.append(float(np.mean(losses)) if losses else float("nan"))
        if val_items:
            val_metrics, _ = evaluate(params, val_items, split_skipped[1])
            val_acc = val_metrics.accuracy_at_1
        else:
            val_acc = metrics.loss_curve[-1] * -1.0  # fall back to train loss
        metrics.val_accuracy.append(val_acc)
        metrics.epoch_seconds.append(time.perf_counter() - t0)

        if val_acc > best_val:
            best_val = val_acc
            best_epoch = epoch
            best_arrays = {k: t.data.copy() for k, t in params.tensors.items()}
            stale = 0
        else:
            stale += 1
            if stale > train_cfg.patience:
                break

    if best_arrays is not None:
        for name, arr in best_arrays.items():
            params.tensors[name].data = arr
    metrics.best_epoch = best_epoch

    return TrainResult(
        params,
        metrics,
        vocab,
        answers,
        cfg_hash,
        prepared,
        (train_items, val_items, test_items),
        tuple(split_skipped),
    )


def ablate(
    bundle: DatasetBundle,
    mode: str,
    which_sides: str,
    model_cfg: M.ModelConfig,
    train_cfg: TrainConfig,
    walk_cfg: WalkConfig,
    **train_kw,
) -> dict[str, dict]:
    """Train/eval the baseline hyperedge model and the requested variant.

    ``mode`` is the variant input format; ``which_sides`` is knowledge,
    question, or both. Word-unit rows keep positional embeddings on.
    Returns a comparison table keyed by variant name.
    """
    if mode not in ("hyperedge", "word_unit"):
        raise ValueError(f"unknown ablation mode {mode!r}")
    if which_sides not in ("knowledge", "question", "both"):
        raise ValueError(f"which_sides must be knowledge|question|both, got {which_sides!r}")

    def run(input_mode: tuple[str, str]) -> dict:
        import copy

        result = train_loop(
            bundle,
            copy.deepcopy(model_cfg),
            copy.deepcopy(train_cfg),
            copy.deepcopy(walk_cfg),
            input_mode=input_mode,
            **train_kw,
        )
        test_metrics, _ = evaluate(result.params, result.splits[2], result.split_skipped[2])
        return {
            "input_mode": list(input_mode),
            "accuracy_at_1": test_metrics.accuracy_at_1,
            "accuracy_at_3": test_metrics.accuracy_at_3,
            "skipped": result.metrics.skipped,
            "best_epoch": result.metrics.best_epoch,
        }

    k_mode = mode if which_sides in ("knowledge", "both") else "hyperedge"
    q_mode = mode if which_sides in ("question", "both") else "hyperedge"

    table = {"baseline_hyperedge": run(("hyperedge", "hyperedge"))}
    if (k_mode, q_mode) != ("hyperedge", "hyperedge"):
        table[f"{k_mode}_knowledge__{q_mode}_question"] = run((k_mode, q_mode))
    return table
