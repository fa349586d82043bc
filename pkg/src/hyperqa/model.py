"""Hyperedge matching model: embed, guided attention, self attention, predict.

Each hyperedge becomes one input row: node vectors are looked up, PAD
slots zeroed, the row concatenated and linearly projected. Knowledge and
question rows then cross-attend (each side queries the other, independent
parameters per direction), self-attend per side, and are mean-pooled into
z_k and z_q. Answers are scored either by an MLP over the joint
representation or by dot-product similarity against fixed candidate
embeddings. All node/word/answer embeddings are keyed by normalized
surface, so a relation mentioned in the question shares its row with the
same relation inside knowledge facts.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from hyperqa import tensor as T
from hyperqa.hypergraph import Hyperedge
from hyperqa.kbstore import normalize_surface
from hyperqa.tensor import Tensor

PAD_SURFACE = "<pad>"
PAD_ID = 0


class Vocabulary:
    """Surface-keyed embedding vocabulary; id 0 is the PAD row."""

    def __init__(self) -> None:
        self._ids: dict[str, int] = {PAD_SURFACE: PAD_ID}
        self._surfaces: list[str] = [PAD_SURFACE]

    def __len__(self) -> int:
        return len(self._surfaces)

    def add(self, surface: str) -> int:
        surface = normalize_surface(surface)
        idx = self._ids.get(surface)
        if idx is None:
            idx = len(self._surfaces)
            self._ids[surface] = idx
            self._surfaces.append(surface)
        return idx

    def id(self, surface: str) -> int:
        surface = normalize_surface(surface)
        if surface not in self._ids:
            raise KeyError(f"surface not in vocabulary: {surface!r}")
        return self._ids[surface]

    def surfaces(self) -> list[str]:
        return list(self._surfaces)

    @classmethod
    def from_surfaces(cls, surfaces: list[str]) -> "Vocabulary":
        vocab = cls()
        for s in surfaces:
            if s != PAD_SURFACE:
                vocab.add(s)
        return vocab


def parse_word_vectors(source, expected_dim: int | None = None) -> dict[str, np.ndarray]:
    """Parse ``word v1 ... vN`` lines into a word -> vector map."""
    if isinstance(source, str):
        lines = source.splitlines()
    else:
        lines = source
    vectors: dict[str, np.ndarray] = {}
    dim = expected_dim
    for line_no, raw in enumerate(lines, start=1):
        raw = raw.rstrip("\n")
        if not raw.strip():
            continue
        parts = raw.split(" ")
        if len(parts) < 2:
            raise ValueError(f"word-vector line {line_no}: no values")
        word = normalize_surface(parts[0])
        try:
            vec = np.array([float(v) for v in parts[1:]], dtype=np.float64)
        except ValueError:
            raise ValueError(f"word-vector line {line_no}: non-numeric value") from None
        if dim is None:
            dim = vec.shape[0]
        if vec.shape[0] != dim:
            raise ValueError(
                f"word-vector line {line_no}: dimension {vec.shape[0]} != {dim}"
            )
        vectors[word] = vec
    return vectors


# Matches the component scale of published 300-d word vectors; used when no
# vector file is given at all, so content is not drowned by unit-amplitude
# positional encodings.
RANDOM_INIT_STD = 0.4


def pooled_rows(
    surfaces: list[str],
    w: int,
    oov_seed: int,
    vectors: dict[str, np.ndarray] | None,
    dtype=np.float64,
    oov: str = "uniform_small",
) -> tuple[np.ndarray, int]:
    """One w-dim row per surface: mean of in-vocabulary word vectors.

    Surfaces with no covered word get a seeded random row: the
    uniform(-0.5/w, 0.5/w) fill for sparse misses inside a real vector
    file, or gaussian word-vector-scale rows when no file exists
    (oov="gaussian"). Returns (rows, covered_count). PAD maps to zeros.
    """
    rng = np.random.default_rng(oov_seed)
    rows = np.empty((len(surfaces), w), dtype=dtype)
    covered = 0
    for i, surface in enumerate(surfaces):
        if surface == PAD_SURFACE:
            rows[i] = 0.0
            continue
        hits = []
        if vectors:
            hits = [vectors[word] for word in surface.split(" ") if word in vectors]
        if hits:
            rows[i] = np.mean(hits, axis=0)
            covered += 1
        elif oov == "gaussian":
            rows[i] = rng.normal(0.0, RANDOM_INIT_STD, size=w)
        else:
            rows[i] = rng.uniform(-0.5 / w, 0.5 / w, size=w)
    return rows, covered


@dataclass
class EmbeddingTable:
    rows: np.ndarray
    oov_seed: int
    coverage: float


def load_word_vectors(
    source, vocab: Vocabulary, w: int = 300, oov_seed: int = 0, dtype=np.float64
) -> EmbeddingTable:
    """Initialize the vocabulary embedding from a text word-vector file.

    Multi-word surfaces take the mean of their covered constituent words;
    fully uncovered surfaces get seeded uniform(-0.5/w, 0.5/w) rows.
    """
    vectors = parse_word_vectors(source, expected_dim=w) if source is not None else None
    rows, covered = pooled_rows(vocab.surfaces(), w, oov_seed, vectors, dtype=dtype)
    denom = max(1, len(vocab) - 1)
    return EmbeddingTable(rows=rows, oov_seed=oov_seed, coverage=covered / denom)


def random_embedding_table(
    vocab: Vocabulary, w: int, seed: int, dtype=np.float64
) -> EmbeddingTable:
    """Seeded word-vector-scale rows for runs without a pretrained file."""
    rows, _ = pooled_rows(vocab.surfaces(), w, seed, None, dtype=dtype, oov="gaussian")
    return EmbeddingTable(rows=rows, oov_seed=seed, coverage=0.0)


@dataclass
class ModelConfig:
    w: int = 300
    d: int = 300
    d_v: int = 300
    heads: int = 4
    n_guided_blocks: int = 2
    n_self_blocks: int = 3
    dropout: float = 0.1
    positional_embeddings: bool = True
    k_max_nodes: int = 5   # 2 * n_hops + 1
    q_max_nodes: int = 3   # max_n
    tie_guided_directions: bool = False
    ff_relu: bool = True
    predictor: str = "mlp"  # mlp | sim
    dtype: str = "float64"

    def validate(self) -> None:
        if self.d_v % self.heads != 0:
            raise ValueError(f"d_v={self.d_v} not divisible by heads={self.heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.predictor not in ("mlp", "sim"):
            raise ValueError(f"unknown predictor {self.predictor!r}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")

    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        cfg = cls(**data)
        cfg.validate()
        return cfg


@dataclass
class ModelParams:
    cfg: ModelConfig
    tensors: dict[str, Tensor]
    vocab: Vocabulary
    answers: list[str]
    candidates: np.ndarray | None = None  # [num_answers, w], fixed, sim predictor
    seed: int = 0

    def t(self, name: str) -> Tensor:
        return self.tensors[name]

    def named_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.tensors.items()}

    def zero_grads(self) -> None:
        for t in self.tensors.values():
            t.grad = None


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)


def _ga_prefix(cfg: ModelConfig, i: int, target_side: str) -> str:
    if cfg.tie_guided_directions:
        target_side = "k"
    return f"ga{i}.{target_side}"


def init_params(
    cfg: ModelConfig,
    vocab: Vocabulary,
    answers: list[str],
    seed: int,
    embedding: EmbeddingTable | None = None,
    candidates: np.ndarray | None = None,
) -> ModelParams:
    """Seeded parameter initialization; the MLP output layer starts at zero
    so that initial logits are uniform."""
    cfg.validate()
    dtype = cfg.np_dtype()
    rng = np.random.default_rng(seed)
    p: dict[str, Tensor] = {}

    def weight(name: str, fan_in: int, fan_out: int) -> None:
        p[name] = Tensor(_xavier(rng, fan_in, fan_out, dtype), requires_grad=True, name=name)

    def bias(name: str, dim: int) -> None:
        p[name] = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True, name=name)

    if embedding is None:
        embedding = random_embedding_table(vocab, cfg.w, seed, dtype=dtype)
    if embedding.rows.shape != (len(vocab), cfg.w):
        raise T.ShapeError("init_params[embed]", embedding.rows.shape, (len(vocab), cfg.w))
    p["embed"] = Tensor(embedding.rows.astype(dtype), requires_grad=True, name="embed")

    weight("phi_q.w", cfg.q_max_nodes * cfg.w, cfg.d)
    bias("phi_q.b", cfg.d)
    weight("phi_k.w", cfg.k_max_nodes * cfg.w, cfg.d)
    bias("phi_k.b", cfg.d)
    if cfg.d != cfg.d_v:
        for side in ("q", "k"):
            weight(f"in_{side}.w", cfg.d, cfg.d_v)
            bias(f"in_{side}.b", cfg.d_v)

    def block(prefix: str) -> None:
        for part in ("wq", "wk", "wv", "wo"):
            weight(f"{prefix}.{part}", cfg.d_v, cfg.d_v)
        for part in ("bq", "bk", "bv", "bo"):
            bias(f"{prefix}.{part}", cfg.d_v)
        for ln in ("ln1", "ln2"):
            p[f"{prefix}.{ln}.g"] = Tensor(np.ones(cfg.d_v, dtype=dtype), requires_grad=True)
            p[f"{prefix}.{ln}.b"] = Tensor(np.zeros(cfg.d_v, dtype=dtype), requires_grad=True)
        weight(f"{prefix}.ff.w1", cfg.d_v, cfg.d_v)
        bias(f"{prefix}.ff.b1", cfg.d_v)
        weight(f"{prefix}.ff.w2", cfg.d_v, cfg.d_v)
        bias(f"{prefix}.ff.b2", cfg.d_v)

    for i in range(cfg.n_guided_blocks):
        block(f"ga{i}.k")
        if not cfg.tie_guided_directions:
            block(f"ga{i}.q")
    for j in range(cfg.n_self_blocks):
        block(f"sa{j}.k")
        block(f"sa{j}.q")

    weight("joint.w", 2 * cfg.d_v, cfg.w)
    bias("joint.b", cfg.w)
    if cfg.predictor == "mlp":
        weight("mlp.w1", cfg.w, cfg.w)
        bias("mlp.b1", cfg.w)
        p["mlp.w2"] = Tensor(
            np.zeros((cfg.w, len(answers)), dtype=dtype), requires_grad=True, name="mlp.w2"
        )
        bias("mlp.b2", len(answers))
    else:
        if candidates is None:
            raise ValueError("similarity predictor requires a candidate matrix")
    if candidates is not None:
        candidates = candidates.astype(dtype)

    return ModelParams(cfg, p, vocab, list(answers), candidates, seed)


# ---------------------------------------------------------------------------
# batches
# ---------------------------------------------------------------------------

@dataclass
class HyperedgeBatch:
    """One question side as padded arrays: ids, node mask, edge mask."""

    token_ids: np.ndarray  # [num_edges, max_nodes] int64
    node_mask: np.ndarray  # [num_edges, max_nodes]
    edge_mask: np.ndarray  # [num_edges]
    side: str

    @property
    def num_edges(self) -> int:
        return self.token_ids.shape[0]


def make_batch(
    edges: list[Hyperedge], vocab: Vocabulary, max_nodes: int, side: str
) -> HyperedgeBatch:
    if not edges:
        raise ValueError(f"make_batch: no edges for side {side!r}")
    ids = np.full((len(edges), max_nodes), PAD_ID, dtype=np.int64)
    node_mask = np.zeros((len(edges), max_nodes), dtype=np.float64)
    for i, edge in enumerate(edges):
        if len(edge.tokens) > max_nodes:
            raise ValueError(
                f"edge of {len(edge.tokens)} tokens exceeds max_nodes={max_nodes}"
            )
        for j, tok in enumerate(edge.tokens):
            ids[i, j] = vocab.id(tok.surface)
            node_mask[i, j] = 1.0
    return HyperedgeBatch(ids, node_mask, np.ones(len(edges)), side)


def stack_batches(batches: list[HyperedgeBatch]) -> HyperedgeBatch:
    """Pad a list of per-question sides to [B, max_edges, max_nodes] arrays."""
    max_e = max(b.num_edges for b in batches)
    n = batches[0].token_ids.shape[1]
    bsz = len(batches)
    ids = np.full((bsz, max_e, n), PAD_ID, dtype=np.int64)
    node_mask = np.zeros((bsz, max_e, n), dtype=np.float64)
    edge_mask = np.zeros((bsz, max_e), dtype=np.float64)
    for i, b in enumerate(batches):
        e = b.num_edges
        ids[i, :e] = b.token_ids
        node_mask[i, :e] = b.node_mask
        edge_mask[i, :e] = b.edge_mask
    return HyperedgeBatch(ids, node_mask, edge_mask, batches[0].side)


def _as_3d(batch: HyperedgeBatch) -> HyperedgeBatch:
    if batch.token_ids.ndim == 2:
        return HyperedgeBatch(
            batch.token_ids[None],
            batch.node_mask[None],
            batch.edge_mask[None],
            batch.side,
        )
    return batch


# ---------------------------------------------------------------------------
# forward pieces
# ---------------------------------------------------------------------------

class _DropSeeds:
    """One seeded stream shared by every dropout site in a forward pass.

    SFC64 keeps mask generation cheap; dropout masks need speed, not
    statistical heavy lifting.
    """

    def __init__(self, base: int):
        self.rng = np.random.Generator(np.random.SFC64(base))

    def next(self) -> np.random.Generator:
        return self.rng


_PE_CACHE: dict[tuple[int, int, str], np.ndarray] = {}


def _positional_encoding(num_edges: int, dim: int, dtype) -> np.ndarray:
    key = (num_edges, dim, str(dtype))
    pe = _PE_CACHE.get(key)
    if pe is None:
        pos = np.arange(num_edges, dtype=np.float64)[:, None]
        i = np.arange(dim, dtype=np.float64)[None, :]
        angle = pos / np.power(10000.0, 2.0 * (i // 2) / dim)
        pe = np.where(i % 2 == 0, np.sin(angle), np.cos(angle)).astype(dtype)
        _PE_CACHE[key] = pe
    return pe


def embed_hyperedges(
    params: ModelParams,
    batch: HyperedgeBatch,
    train: bool = False,
    seeds: _DropSeeds | None = None,
) -> Tensor:
    """Concatenate masked node vectors per edge and project to d; optionally
    add sinusoidal encodings over the edge index."""
    cfg = params.cfg
    batch = _as_3d(batch)
    bsz, num_edges, max_nodes = batch.token_ids.shape
    dtype = cfg.np_dtype()

    emb = T.embedding_lookup(params.t("embed"), batch.token_ids)  # [B,E,N,w]
    mask = Tensor(batch.node_mask[..., None].astype(dtype))
    emb = T.mul(emb, mask)
    flat = T.reshape(emb, (bsz, num_edges, max_nodes * cfg.w))
    side = "q" if batch.side == "question" else "k"
    x = T.add(T.matmul(flat, params.t(f"phi_{side}.w")), params.t(f"phi_{side}.b"))
    if cfg.positional_embeddings:
        pe = Tensor(_positional_encoding(num_edges, cfg.d, dtype))
        x = T.add(x, pe)
    if cfg.d != cfg.d_v:
        x = T.add(T.matmul(x, params.t(f"in_{side}.w")), params.t(f"in_{side}.b"))
    if train and seeds is not None and cfg.dropout > 0:
        x = T.dropout(x, cfg.dropout, train, seeds.next())
    return x


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, e, dv = x.shape
    return T.transpose(T.reshape(x, (b, e, heads, dv // heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, e, dh = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (b, e, h * dh))


def _source_mask(source_edge_mask) -> T.SoftmaxMask:
    if isinstance(source_edge_mask, T.SoftmaxMask):
        return source_edge_mask
    return T.SoftmaxMask(np.asarray(source_edge_mask)[:, None, None, :], axis=-1)


def _multi_head_attention(
    params: ModelParams,
    prefix: str,
    x_target: Tensor,
    x_source: Tensor,
    source_edge_mask,
    train: bool,
    seeds: _DropSeeds | None,
    trace_sink: list | None,
) -> Tensor:
    cfg = params.cfg
    p = params.t
    mask = _source_mask(source_edge_mask)

    q = T.add(T.matmul(x_target, p(f"{prefix}.wq")), p(f"{prefix}.bq"))
    k = T.add(T.matmul(x_source, p(f"{prefix}.wk")), p(f"{prefix}.bk"))
    v = T.add(T.matmul(x_source, p(f"{prefix}.wv")), p(f"{prefix}.bv"))
    if train and seeds is not None and cfg.dropout > 0:
        q = T.dropout(q, cfg.dropout, train, seeds.next())
        k = T.dropout(k, cfg.dropout, train, seeds.next())
        v = T.dropout(v, cfg.dropout, train, seeds.next())

    qh = _split_heads(q, cfg.heads)  # [B,h,Et,dh]
    kh = _split_heads(k, cfg.heads)
    vh = _split_heads(v, cfg.heads)

    d_head = cfg.d_v // cfg.heads
    scores = T.scale(T.matmul(qh, T.transpose(kh, (0, 1, 3, 2))), 1.0 / math.sqrt(d_head))
    weights = T.masked_softmax(scores, mask, axis=-1)
    if trace_sink is not None:
        trace_sink.append(weights.data.copy())
    if train and seeds is not None and cfg.dropout > 0:
        weights = T.dropout(weights, cfg.dropout, train, seeds.next())

    ctx = _merge_heads(T.matmul(weights, vh))
    return T.add(T.matmul(ctx, p(f"{prefix}.wo")), p(f"{prefix}.bo"))


def _attention_block(
    params: ModelParams,
    prefix: str,
    x_target: Tensor,
    x_source: Tensor,
    source_edge_mask: np.ndarray,
    train: bool = False,
    seeds: _DropSeeds | None = None,
    trace_sink: list | None = None,
) -> Tensor:
    """Attention, then residual + layer norm, then feed-forward + residual + norm."""
    cfg = params.cfg
    p = params.t
    att = _multi_head_attention(
        params, prefix, x_target, x_source, source_edge_mask, train, seeds, trace_sink
    )
    if train and seeds is not None and cfg.dropout > 0:
        att = T.dropout(att, cfg.dropout, train, seeds.next())
    x = T.layer_norm(T.add(x_target, att), p(f"{prefix}.ln1.g"), p(f"{prefix}.ln1.b"))

    h = T.add(T.matmul(x, p(f"{prefix}.ff.w1")), p(f"{prefix}.ff.b1"))
    if cfg.ff_relu:
        h = T.relu(h)
    ff = T.add(T.matmul(h, p(f"{prefix}.ff.w2")), p(f"{prefix}.ff.b2"))
    if train and seeds is not None and cfg.dropout > 0:
        ff = T.dropout(ff, cfg.dropout, train, seeds.next())
    return T.layer_norm(T.add(x, ff), p(f"{prefix}.ln2.g"), p(f"{prefix}.ln2.b"))


def guided_attention_block(
    params: ModelParams,
    block_index: int,
    target_side: str,
    x_target: Tensor,
    x_source: Tensor,
    source_edge_mask: np.ndarray,
    **kw,
) -> Tensor:
    prefix = _ga_prefix(params.cfg, block_index, target_side)
    return _attention_block(params, prefix, x_target, x_source, source_edge_mask, **kw)


def self_attention_block(
    params: ModelParams,
    block_index: int,
    side: str,
    x: Tensor,
    edge_mask: np.ndarray,
    **kw,
) -> Tensor:
    return _attention_block(params, f"sa{block_index}.{side}", x, x, edge_mask, **kw)


@dataclass
class AttentionTrace:
    """Per-stream, per-block multi-head attention matrices from one encode."""

    matrices: dict[str, list[np.ndarray]] = field(default_factory=dict)
    q_edge_mask: np.ndarray | None = None
    k_edge_mask: np.ndarray | None = None

    def sink(self, stream: str) -> list:
        return self.matrices.setdefault(stream, [])


def _masked_mean_rows(x: Tensor, edge_mask: np.ndarray, dtype) -> Tensor:
    counts = edge_mask.sum(axis=-1, keepdims=True)
    weights = (edge_mask / counts).astype(dtype)[..., None]  # [B,E,1]
    return T.sum_(T.mul(x, Tensor(weights)), axis=1)


def encode(
    params: ModelParams,
    q_batch: HyperedgeBatch | list[HyperedgeBatch],
    k_batch: HyperedgeBatch | list[HyperedgeBatch],
    train: bool = False,
    dropout_seed: int = 0,
    collect_trace: bool = False,
) -> tuple[Tensor, Tensor, AttentionTrace | None]:
    """Run the full stack over one batch of question/knowledge pairs.

    Returns (z_q, z_k) of shape [B, d_v] and, when requested, the
    attention trace. Both guided directions update simultaneously from the
    previous layer's representations.
    """
    cfg = params.cfg
    if isinstance(q_batch, list):
        q_batch = stack_batches(q_batch)
    if isinstance(k_batch, list):
        k_batch = stack_batches(k_batch)
    q_batch = _as_3d(q_batch)
    k_batch = _as_3d(k_batch)
    if not q_batch.edge_mask.any(axis=-1).all() or not k_batch.edge_mask.any(axis=-1).all():
        raise ValueError("encode: every instance needs at least one real edge per side")

    seeds = _DropSeeds(dropout_seed) if train else None
    trace = AttentionTrace() if collect_trace else None
    dtype = cfg.np_dtype()
    q_mask = _source_mask(q_batch.edge_mask)
    k_mask = _source_mask(k_batch.edge_mask)

    xq = embed_hyperedges(params, q_batch, train, seeds)
    xk = embed_hyperedges(params, k_batch, train, seeds)

    for i in range(cfg.n_guided_blocks):
        sink_k = trace.sink("knowledge_over_question") if trace else None
        sink_q = trace.sink("question_over_knowledge") if trace else None
        xk_new = guided_attention_block(
            params, i, "k", xk, xq, q_mask,
            train=train, seeds=seeds, trace_sink=sink_k,
        )
        xq_new = guided_attention_block(
            params, i, "q", xq, xk, k_mask,
            train=train, seeds=seeds, trace_sink=sink_q,
        )
        xk, xq = xk_new, xq_new

    for j in range(cfg.n_self_blocks):
        sink_k = trace.sink("knowledge_self") if trace else None
        sink_q = trace.sink("question_self") if trace else None
        xk = self_attention_block(
            params, j, "k", xk, k_mask,
            train=train, seeds=seeds, trace_sink=sink_k,
        )
        xq = self_attention_block(
            params, j, "q", xq, q_mask,
            train=train, seeds=seeds, trace_sink=sink_q,
        )

    z_q = _masked_mean_rows(xq, q_batch.edge_mask, dtype)
    z_k = _masked_mean_rows(xk, k_batch.edge_mask, dtype)
    if trace is not None:
        trace.q_edge_mask = q_batch.edge_mask.copy()
        trace.k_edge_mask = k_batch.edge_mask.copy()
    return z_q, z_k, trace


def joint_representation(params: ModelParams, z_q: Tensor, z_k: Tensor) -> Tensor:
    z = T.concat([z_k, z_q], axis=-1)
    return T.add(T.matmul(z, params.t("joint.w")), params.t("joint.b"))


def predict_mlp(z_q: Tensor, z_k: Tensor, params: ModelParams) -> Tensor:
    """Logits over the answer vocabulary: joint layer then w -> w -> |A| MLP."""
    if not params.answers:
        raise ValueError("predict_mlp: empty answer vocabulary")
    z = joint_representation(params, z_q, z_k)
    h = T.relu(T.add(T.matmul(z, params.t("mlp.w1")), params.t("mlp.b1")))
    return T.add(T.matmul(h, params.t("mlp.w2")), params.t("mlp.b2"))


def predict_similarity(
    z_q: Tensor, z_k: Tensor, params: ModelParams, candidates: np.ndarray | None = None
) -> Tensor:
    """Dot-product scores of the joint representation against candidate rows."""
    c = candidates if candidates is not None else params.candidates
    if c is None or c.shape[0] == 0:
        raise ValueError("predict_similarity: empty candidate matrix")
    z = joint_representation(params, z_q, z_k)
    return T.matmul(z, Tensor(np.ascontiguousarray(c.T)))


def predict(params: ModelParams, z_q: Tensor, z_k: Tensor) -> Tensor:
    if params.cfg.predictor == "sim":
        return predict_similarity(z_q, z_k, params)
    return predict_mlp(z_q, z_k, params)


# ---------------------------------------------------------------------------
# trace export
# ---------------------------------------------------------------------------

def attention_trace_export(trace: AttentionTrace) -> dict[str, np.ndarray]:
    """Average each stream over blocks and heads: [B, rows, cols] per stream."""
    out: dict[str, np.ndarray] = {}
    for stream, mats in trace.matrices.items():
        if not mats:
            continue
        stacked = np.stack(mats)  # [blocks, B, heads, rows, cols]
        out[stream] = stacked.mean(axis=(0, 2))
    return out


def trace_matrix_json(
    qid: str, direction: str, matrix: np.ndarray, q_tokens: list, k_tokens: list
) -> str:
    return json.dumps(
        {
            "qid": qid,
            "direction": direction,
            "matrix": [[float(x) for x in row] for row in matrix],
            "q_edge_tokens": q_tokens,
            "k_edge_tokens": k_tokens,
        },
        sort_keys=True,
    )


def write_pgm(path, matrix: np.ndarray) -> None:
    """Greyscale heatmap of an attention matrix, 0..255, P2 text format."""
    m = np.asarray(matrix, dtype=np.float64)
    top = m.max() if m.size and m.max() > 0 else 1.0
    grey = np.round(255.0 * m / top).astype(int)
    rows, cols = grey.shape
    with open(path, "w") as fh:
        fh.write(f"P2\n{cols} {rows}\n255\n")
        for row in grey:
            fh.write(" ".join(str(v) for v in row) + "\n")


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_model(path, params: ModelParams, extra_meta: dict | None = None) -> None:
    arrays = dict(params.named_arrays())
    if params.candidates is not None:
        arrays["answer_candidates"] = params.candidates
    meta = {
        "model_config": params.cfg.to_dict(),
        "vocab": params.vocab.surfaces(),
        "answers": params.answers,
        "seed": params.seed,
    }
    if extra_meta:
        meta.update(extra_meta)
    T.save_checkpoint(path, arrays, meta)


def load_model(path) -> tuple[ModelParams, dict]:
    arrays, meta = T.load_checkpoint(path)
    cfg = ModelConfig.from_dict(meta["model_config"])
    vocab = Vocabulary.from_surfaces(meta["vocab"])
    candidates = arrays.pop("answer_candidates", None)
    tensors = {
        name: Tensor(arr, requires_grad=True, name=name) for name, arr in arrays.items()
    }
    params = ModelParams(cfg, tensors, vocab, meta["answers"], candidates, meta.get("seed", 0))
    return params, meta
