"""Command-line entry point for batch experiments.

Every command reads an optional JSON config plus flag overrides, writes
its artifacts into --out, and finishes with a manifest.json recording the
config hash, component versions, and timings. Timestamps and wall times
live only in the manifest so re-runs with the same seed produce
byte-identical artifacts. Failures print a machine-readable error JSON to
stderr and exit nonzero.
"""

from __future__ import annotations

import dataclasses
import json
import platform
import sys
import time
from pathlib import Path

import click
import numpy as np

import hyperqa
from hyperqa import datasets as D
from hyperqa import hypergraph as H
from hyperqa import kbstore as K
from hyperqa import linker as L
from hyperqa import model as M
from hyperqa import train as TR


@dataclasses.dataclass
class RunConfig:
    hops: int = 2
    max_ngram: int = 3
    predictor: str = "mlp"
    pos_emb: bool = True
    exact_hops: bool = False
    add_inverse: bool = False
    allow_revisit: bool = False
    seed: int = 0
    cap: int | None = None
    mode: str = "hyperedge"
    sides: str = "both"
    epochs: int = 50
    batch_size: int = 128
    dropout: float = 0.1
    lr_start: float = 1e-4
    lr_end: float = 1e-5
    patience: int = 10
    w: int = 300
    d: int = 300
    d_v: int = 300
    heads: int = 4
    n_guided_blocks: int = 2
    n_self_blocks: int = 3
    dtype: str = "float64"
    word_vectors: str | None = None
    oracle_seeds: bool = True

    @classmethod
    def build(cls, config_path: str | None, **overrides) -> "RunConfig":
        data = dataclasses.asdict(cls())
        if config_path:
            loaded = json.loads(Path(config_path).read_text(encoding="utf-8"))
            if not isinstance(loaded, dict):
                raise ValueError("config file must hold a JSON object")
            unknown = set(loaded) - set(data)
            if unknown:
                raise ValueError(f"unknown config keys: {sorted(unknown)}")
            data.update(loaded)
        for key, value in overrides.items():
            if value is not None:
                data[key] = value
        cfg = cls(**data)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.hops not in (1, 2, 3):
            raise ValueError(f"hops must be 1, 2 or 3, got {self.hops}")
        if self.max_ngram < 1:
            raise ValueError("max_ngram must be >= 1")
        if self.mode not in ("hyperedge", "word_unit"):
            raise ValueError(f"mode must be hyperedge|word_unit, got {self.mode!r}")
        self.model_cfg().validate()

    def walk_cfg(self) -> H.WalkConfig:
        return H.WalkConfig(
            n_hops=self.hops,
            max_n=self.max_ngram,
            allow_revisit=self.allow_revisit,
            exact_hops=self.exact_hops,
            knowledge_cap=self.cap,
            cap_seed=self.seed,
        )

    def model_cfg(self) -> M.ModelConfig:
        return M.ModelConfig(
            w=self.w,
            d=self.d,
            d_v=self.d_v,
            heads=self.heads,
            n_guided_blocks=self.n_guided_blocks,
            n_self_blocks=self.n_self_blocks,
            dropout=self.dropout,
            positional_embeddings=self.pos_emb,
            k_max_nodes=2 * self.hops + 1,
            q_max_nodes=self.max_ngram,
            predictor=self.predictor,
            dtype=self.dtype,
        )

    def train_cfg(self) -> TR.TrainConfig:
        return TR.TrainConfig(
            lr_start=self.lr_start,
            lr_end=self.lr_end,
            batch_size=self.batch_size,
            epochs=self.epochs,
            seed=self.seed,
            dropout=self.dropout,
            predictor=self.predictor,
            patience=self.patience,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _config_hash(cfg: RunConfig) -> str:
    import hashlib

    return hashlib.sha256(json.dumps(cfg.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def _write_manifest(out_dir: Path, command: str, cfg: RunConfig | dict, timings: dict) -> None:
    manifest = {
        "command": command,
        "config": cfg.to_dict() if isinstance(cfg, RunConfig) else cfg,
        "config_hash": _config_hash(cfg) if isinstance(cfg, RunConfig) else "",
        "versions": {
            "hyperqa": hyperqa.__version__,
            "numpy": np.__version__,
            "python": platform.python_version(),
        },
        "timings": timings,
        "written_at": time.time(),
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def _fail(command: str, exc: Exception) -> None:
    err = {"error": type(exc).__name__, "detail": str(exc), "command": command}
    click.echo(json.dumps(err, sort_keys=True), err=True)
    sys.exit(1)


def _out_dir(path: str) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


config_option = click.option("--config", "config_path", default=None, help="JSON run config file.")
seed_option = click.option("--seed", type=int, default=None, help="Seed for all randomness.")
out_option = click.option("--out", "out", required=True, help="Output directory.")


def walk_options(fn):
    fn = click.option("--hops", type=click.Choice(["1", "2", "3"]), default=None,
                      help="Graph walk depth budget.")(fn)
    fn = click.option("--max-ngram", "max_ngram", type=int, default=None,
                      help="Longest question n-gram hyperedge.")(fn)
    fn = click.option("--exact-hops", "exact_hops", is_flag=True, default=None,
                      help="Keep only edges of exactly --hops hops.")(fn)
    fn = click.option("--add-inverse", "add_inverse", is_flag=True, default=None,
                      help="Materialize inverse relations at KB load.")(fn)
    fn = click.option("--cap", type=int, default=None,
                      help="Knowledge hyperedge budget (default per --hops).")(fn)
    return fn


def train_options(fn):
    fn = click.option("--predictor", type=click.Choice(["mlp", "sim"]), default=None,
                      help="Answer predictor.")(fn)
    fn = click.option("--pos-emb", "pos_emb", type=click.Choice(["on", "off"]), default=None,
                      help="Sinusoidal positional embeddings over edge order.")(fn)
    fn = click.option("--epochs", type=int, default=None)(fn)
    fn = click.option("--batch-size", "batch_size", type=int, default=None)(fn)
    fn = click.option("--dropout", type=float, default=None)(fn)
    fn = click.option("--word-vectors", "word_vectors", default=None,
                      help="Text word-vector file for embedding init.")(fn)
    return fn


@click.group()
@click.version_option(hyperqa.__version__)
def main() -> None:
    """Multi-hop KB question answering over matched hypergraphs."""


@main.group("kb")
def kb_group() -> None:
    """Knowledge-base utilities."""


@kb_group.command("stats")
@click.option("--kb", "kb_path", required=True, help="TSV triple file.")
@click.option("--out", "out", default=None, help="Output directory.")
def kb_stats(kb_path: str, out: str | None) -> None:
    """Count entities, relations, facts, and dropped duplicates."""
    t0 = time.perf_counter()
    try:
        kb = K.load_triples(Path(kb_path).read_text(encoding="utf-8"))
        payload = K.stats_json(kb)
    except Exception as exc:
        _fail("kb stats", exc)
    click.echo(payload)
    if out:
        out_dir = _out_dir(out)
        (out_dir / "stats.json").write_text(payload + "\n", encoding="utf-8")
        _write_manifest(out_dir, "kb stats", {"kb": kb_path}, {"seconds": time.perf_counter() - t0})


@main.command("link")
@click.option("--bundle", "bundle_dir", required=True, help="Dataset bundle directory.")
@out_option
def link_cmd(bundle_dir: str, out: str) -> None:
    """Match question text against KB entity surfaces; write JSONL links."""
    t0 = time.perf_counter()
    try:
        bundle = D.load_bundle(bundle_dir)
        out_dir = _out_dir(out)
        with open(out_dir / "links.jsonl", "w", encoding="utf-8") as fh:
            for pair in bundle.pairs:
                result = L.link_question(bundle.kb, L.tokenize(pair.question))
                fh.write(L.link_result_json(pair.qid, result) + "\n")
        _write_manifest(out_dir, "link", {"bundle": bundle_dir},
                        {"seconds": time.perf_counter() - t0})
    except Exception as exc:
        _fail("link", exc)


@main.command("walk")
@click.option("--kb", "kb_path", required=True, help="TSV triple file.")
@click.option("--seeds", required=True, help="Comma-separated seed entity surfaces.")
@config_option
@seed_option
@walk_options
@out_option
def walk_cmd(kb_path, seeds, config_path, seed, hops, max_ngram, exact_hops,
             add_inverse, cap, out) -> None:
    """Enumerate knowledge hyperedges from seed entities."""
    t0 = time.perf_counter()
    try:
        cfg = RunConfig.build(
            config_path, seed=seed, hops=int(hops) if hops else None,
            max_ngram=max_ngram, exact_hops=exact_hops, add_inverse=add_inverse, cap=cap,
        )
        kb = K.load_triples(Path(kb_path).read_text(encoding="utf-8"), add_inverse=cfg.add_inverse)
        seed_syms = [kb.entity(s) for s in seeds.split(",")]
        edges = H.knowledge_walks(kb, seed_syms, cfg.hops, cfg.allow_revisit)
        if cfg.exact_hops:
            edges = [e for e in edges if e.hops == cfg.hops]
        walk_cfg = cfg.walk_cfg()
        k_cap = walk_cfg.effective_knowledge_cap()
        if len(edges) > k_cap:
            edges = H.cap_hyperedges(edges, k_cap, cfg.seed)
        out_dir = _out_dir(out)
        with open(out_dir / "hyperedges.jsonl", "w", encoding="utf-8") as fh:
            for edge in edges:
                fh.write(json.dumps({"tokens": edge.surfaces(), "hops": edge.hops}) + "\n")
        click.echo(f"{len(edges)} hyperedges")
        _write_manifest(out_dir, "walk", cfg, {"seconds": time.perf_counter() - t0})
    except Exception as exc:
        _fail("walk", exc)


@main.command("synth")
@click.option("--entities", type=int, default=200)
@click.option("--relations", type=int, default=5)
@click.option("--depth", type=int, default=2)
@click.option("--questions", type=int, default=1000)
@click.option("--branching", type=int, default=2)
@seed_option
@out_option
def synth_cmd(entities, relations, depth, questions, branching, seed, out) -> None:
    """Generate a synthetic layered multi-hop QA bundle."""
    t0 = time.perf_counter()
    try:
        spec = D.SynthSpec(entities, relations, depth, questions, branching, seed or 0)
        bundle = D.synth_generate(spec)
        out_dir = _out_dir(out)
        D.save_bundle(bundle, out_dir)
        click.echo(f"{len(bundle.pairs)} QA pairs over {len(bundle.kb.facts)} facts")
        _write_manifest(out_dir, "synth", dataclasses.asdict(spec),
                        {"seconds": time.perf_counter() - t0})
    except Exception as exc:
        _fail("synth", exc)


def _run_training(cfg: RunConfig, bundle_dir: str, input_mode: tuple[str, str]):
    bundle = D.load_bundle(bundle_dir)
    word_vectors = (
        Path(cfg.word_vectors).read_text(encoding="utf-8") if cfg.word_vectors else None
    )
    return TR.train_loop(
        bundle,
        cfg.model_cfg(),
        cfg.train_cfg(),
        cfg.walk_cfg(),
        word_vectors=word_vectors,
        input_mode=input_mode,
        use_oracle_seeds=cfg.oracle_seeds,
    )


def _save_run(out_dir: Path, cfg: RunConfig, result: TR.TrainResult, timings: dict,
              command: str) -> None:
    ckpt = out_dir / "checkpoint.bin"
    M.save_model(
        ckpt,
        result.params,
        extra_meta={
            "config_hash": result.config_hash,
            "run_config": cfg.to_dict(),
            "revision": f"hyperqa-{hyperqa.__version__}",
            "link_mode": result.metrics.link_mode,
        },
    )
    (out_dir / "train_metrics.json").write_text(
        json.dumps(result.metrics.to_dict(), indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )
    _write_manifest(out_dir, command, cfg, timings)


@main.command("train")
@click.option("--bundle", "bundle_dir", required=True, help="Dataset bundle directory.")
@config_option
@seed_option
@walk_options
@train_options
@out_option
def train_cmd(bundle_dir, config_path, seed, hops, max_ngram, exact_hops, add_inverse,
              cap, predictor, pos_emb, epochs, batch_size, dropout, word_vectors,
              out) -> None:
    """Train on a bundle's 8:1:1 split and keep the best-validation checkpoint."""
    t0 = time.perf_counter()
    try:
        cfg = RunConfig.build(
            config_path, seed=seed, hops=int(hops) if hops else None,
            max_ngram=max_ngram, exact_hops=exact_hops, add_inverse=add_inverse,
            cap=cap, predictor=predictor,
            pos_emb=None if pos_emb is None else pos_emb == "on",
            epochs=epochs, batch_size=batch_size, dropout=dropout,
            word_vectors=word_vectors,
        )
        result = _run_training(cfg, bundle_dir, ("hyperedge", "hyperedge"))
        out_dir = _out_dir(out)
        _save_run(out_dir, cfg, result, {"seconds": time.perf_counter() - t0}, "train")
        click.echo(
            f"best epoch {result.metrics.best_epoch}, "
            f"val accuracy {max(result.metrics.val_accuracy or [0.0]):.4f}"
        )
    except Exception as exc:
        _fail("train", exc)


@main.command("eval")
@click.option("--bundle", "bundle_dir", required=True, help="Dataset bundle directory.")
@click.option("--checkpoint", "ckpt_path", required=True, help="Trained checkpoint.")
@click.option("--split", type=click.Choice(["train", "val", "test", "all"]), default="test")
@click.option("--workers", type=int, default=1, help="Worker threads for sharded scoring.")
@out_option
def eval_cmd(bundle_dir, ckpt_path, split, workers, out) -> None:
    """Score a checkpoint on a bundle split; write metrics and predictions."""
    t0 = time.perf_counter()
    try:
        params, meta = M.load_model(ckpt_path)
        run_cfg = RunConfig(**meta["run_config"])
        bundle = D.load_bundle(bundle_dir)
        prepared = TR.prepare_questions(
            bundle, run_cfg.walk_cfg(),
            use_oracle_seeds=run_cfg.oracle_seeds,
        )
        TR.finalize_batches(prepared, params.vocab, params.cfg.k_max_nodes,
                            params.cfg.q_max_nodes)
        by_qid = {item.qid: item for item in prepared.items}
        skipped_by_qid = dict(prepared.skipped)
        if split == "all":
            items = prepared.items
            skipped = prepared.skipped
        else:
            parts = TR.split_dataset(bundle.pairs, (0.8, 0.1, 0.1), run_cfg.seed)
            part = parts[{"train": 0, "val": 1, "test": 2}[split]]
            items = [by_qid[p.qid] for p in part if p.qid in by_qid]
            skipped = [(p.qid, skipped_by_qid[p.qid]) for p in part if p.qid in skipped_by_qid]
        metrics, dump = TR.evaluate(params, items, skipped, workers=workers)
        out_dir = _out_dir(out)
        (out_dir / "metrics.json").write_text(
            json.dumps(metrics.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
        (out_dir / "predictions.tsv").write_text(TR.predictions_tsv(dump), encoding="utf-8")
        _write_manifest(out_dir, "eval",
                        {"bundle": bundle_dir, "checkpoint": ckpt_path, "split": split},
                        {"seconds": time.perf_counter() - t0})
        click.echo(json.dumps({"accuracy_at_1": metrics.accuracy_at_1,
                               "accuracy_at_3": metrics.accuracy_at_3}))
    except Exception as exc:
        _fail("eval", exc)


@main.command("ablate")
@click.option("--bundle", "bundle_dir", required=True, help="Dataset bundle directory.")
@click.option("--mode", type=click.Choice(["hyperedge", "word_unit"]), default=None,
              help="Variant input format.")
@click.option("--sides", type=click.Choice(["knowledge", "question", "both"]), default=None)
@config_option
@seed_option
@walk_options
@train_options
@out_option
def ablate_cmd(bundle_dir, mode, sides, config_path, seed, hops, max_ngram, exact_hops,
               add_inverse, cap, predictor, pos_emb, epochs, batch_size, dropout,
               word_vectors, out) -> None:
    """Compare hyperedge inputs against the word-unit input format."""
    t0 = time.perf_counter()
    try:
        cfg = RunConfig.build(
            config_path, seed=seed, hops=int(hops) if hops else None,
            max_ngram=max_ngram, exact_hops=exact_hops, add_inverse=add_inverse,
            cap=cap, predictor=predictor,
            pos_emb=None if pos_emb is None else pos_emb == "on",
            epochs=epochs, batch_size=batch_size, dropout=dropout,
            word_vectors=word_vectors, mode=mode, sides=sides,
        )
        bundle = D.load_bundle(bundle_dir)
        word_vec_text = (
            Path(cfg.word_vectors).read_text(encoding="utf-8") if cfg.word_vectors else None
        )
        table = TR.ablate(
            bundle, cfg.mode, cfg.sides, cfg.model_cfg(), cfg.train_cfg(), cfg.walk_cfg(),
            word_vectors=word_vec_text, use_oracle_seeds=cfg.oracle_seeds,
        )
        out_dir = _out_dir(out)
        (out_dir / "ablation.json").write_text(
            json.dumps(table, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
        click.echo(json.dumps(table, sort_keys=True))
        _write_manifest(out_dir, "ablate", cfg, {"seconds": time.perf_counter() - t0})
    except Exception as exc:
        _fail("ablate", exc)


@main.command("trace")
@click.option("--bundle", "bundle_dir", required=True, help="Dataset bundle directory.")
@click.option("--checkpoint", "ckpt_path", required=True, help="Trained checkpoint.")
@click.option("--qid", "qids", multiple=True, help="Question ids to trace (repeatable).")
@click.option("--pgm", is_flag=True, default=False, help="Also write PGM heatmaps.")
@out_option
def trace_cmd(bundle_dir, ckpt_path, qids, pgm, out) -> None:
    """Export head/layer-averaged attention matrices for chosen questions."""
    t0 = time.perf_counter()
    try:
        params, meta = M.load_model(ckpt_path)
        run_cfg = RunConfig(**meta["run_config"])
        bundle = D.load_bundle(bundle_dir)
        prepared = TR.prepare_questions(
            bundle, run_cfg.walk_cfg(), use_oracle_seeds=run_cfg.oracle_seeds
        )
        TR.finalize_batches(prepared, params.vocab, params.cfg.k_max_nodes,
                            params.cfg.q_max_nodes)
        wanted = set(qids) if qids else {item.qid for item in prepared.items[:4]}
        out_dir = _out_dir(out)
        count = 0
        for item in prepared.items:
            if item.qid not in wanted:
                continue
            _, _, trace = M.encode(params, item.q_batch, item.k_batch, collect_trace=True)
            exported = M.attention_trace_export(trace)
            for direction, mats in exported.items():
                matrix = mats[0]
                stem = f"{item.qid}.{direction}"
                (out_dir / f"{stem}.json").write_text(
                    M.trace_matrix_json(
                        item.qid, direction, matrix,
                        [e.surfaces() for e in item.q_edges],
                        [e.surfaces() for e in item.k_edges],
                    ) + "\n",
                    encoding="utf-8",
                )
                if pgm:
                    M.write_pgm(out_dir / f"{stem}.pgm", matrix)
            count += 1
        click.echo(f"traced {count} questions")
        _write_manifest(out_dir, "trace",
                        {"bundle": bundle_dir, "checkpoint": ckpt_path},
                        {"seconds": time.perf_counter() - t0})
    except Exception as exc:
        _fail("trace", exc)


if __name__ == "__main__":
    main()
