"""Command-line driver for the synthetic-query retrieval pipeline."""

from __future__ import annotations

import argparse
import io
import json
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Sequence

import yaml

from ._base import DataError, derive_seed, make_meta
from .contrastive import DEFAULT_NEG_SINGLE, ToyEncoder, TrainingExample, mine_hard_negatives, read_examples, train_toy, write_examples, write_loss_trace
from .corpus import Corpus, ingest_documents
from .dense import DenseRetriever, PseudoEmbedder, load_embeddings, save_embeddings
from .late_interaction import ALLOWED_BITS, CompressedLateInteractionIndex, TokenEncoder
from .metrics import evaluate_run, load_qrels, load_run, mrr_at_k, system_table, write_qrels, write_run
from .pretrain import DEFAULT_DECODER_RATIO, DEFAULT_ENCODER_RATIO, build_pretrain_pairs, serialize_pairs
from .query_filter import DEFAULT_BLACKLIST, DEFAULT_RECOVERY_K, filter_queries
from .query_gen import HTTPCompletionBackend, MockBackend, SyntheticQuery, generate_for_corpus, read_queries, write_queries
from .sparse import BM25Retriever
from .synthetic import make_documents

log = logging.getLogger("legalsynth")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "max_tokens": 256,
    "mode": "aspect_guided",
    "backend": "mock",
    "max_retries": 2,
    "workers": 1,
    "k": DEFAULT_RECOVERY_K,
    "retriever": "dense",
    "dim": 64,
    "embed_seed": 0,
    "bits": 2,
    "centroids": None,
    "k1": 1.2,
    "b": 0.75,
    "n_neg": DEFAULT_NEG_SINGLE,
    "pool_depth": None,
    "encoder_ratio": DEFAULT_ENCODER_RATIO,
    "decoder_ratio": DEFAULT_DECODER_RATIO,
    "steps": 500,
    "batch_size": 32,
    "lr": 0.5,
    "momentum": 0.9,
    "temperature": 1.0,
    "top_k": 100,
    "ks": "10,100",
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


# ---------------------------------------------------------------- helpers


def _open_in(path: str | Path, mode: str = "r"):
    p = Path(path)
    if not p.exists():
        raise DataError(f"input not found: {p}")
    return p.open(mode, encoding=None if "b" in mode else "utf-8")


def _open_out(path: str | Path, mode: str = "w"):
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    return p.open(mode, encoding=None if "b" in mode else "utf-8", newline=None if "b" in mode else "\n")


def _sidecar(path: str | Path, meta: dict) -> None:
    with _open_out(f"{path}.meta.json") as f:
        f.write(json.dumps(meta, sort_keys=True, ensure_ascii=False) + "\n")


def _load_corpus(path: str) -> Corpus:
    with _open_in(path) as f:
        return Corpus.read(f)


def _load_queries(path: str) -> list[SyntheticQuery]:
    with _open_in(path) as f:
        return read_queries(f)


def _dense(corpus: Corpus, dim: int, seed: int) -> DenseRetriever:
    return DenseRetriever(PseudoEmbedder(dim, seed)).fit(corpus)


def _retriever(kind: str, corpus: Corpus, cfg: dict):
    if kind == "bm25":
        return BM25Retriever(cfg["k1"], cfg["b"]).fit(corpus)
    return _dense(corpus, cfg["dim"], cfg["embed_seed"])


def _judgments(queries: Sequence[SyntheticQuery]) -> dict[str, dict[str, int]]:
    return {q.id: {q.passage_id: 1} for q in queries}


def _run(retriever, queries: Sequence[SyntheticQuery], top_k: int) -> dict:
    return {q.id: retriever.search(q.text, top_k) for q in queries}


PATH_KEYS = frozenset(
    {"out", "documents", "passages", "queries", "examples", "index", "run", "qrels", "report", "qrels_out", "few_shot", "command"}
)


def _meta(cfg: dict, **extra) -> dict:
    """Artifact metadata; the config hash covers parameters, not file locations."""
    return make_meta(cfg["seed"], {k: v for k, v in cfg.items() if k not in PATH_KEYS}, **extra)


# ---------------------------------------------------------------- commands


def cmd_ingest(cfg: dict) -> int:
    with _open_in(cfg["documents"]) as f:
        corpus = ingest_documents(f, cfg["max_tokens"] or None)
    with _open_out(cfg["out"]) as f:
        corpus.write(f, meta=_meta(cfg, stage="ingest"))
    print(f"{len(corpus)} passages from {len(corpus.doc_index)} documents")
    return EXIT_OK


def cmd_generate(cfg: dict) -> int:
    corpus = _load_corpus(cfg["passages"])
    few_shot: list[str] = []
    if cfg.get("few_shot"):
        with _open_in(cfg["few_shot"]) as f:
            few_shot = [b.strip() for b in f.read().split("\n\n") if b.strip()]
    if cfg["backend"] == "mock":
        backend = MockBackend(seed=cfg["seed"])
    else:
        backend = HTTPCompletionBackend(options=cfg.get("backend_options") or {})
    out = generate_for_corpus(corpus, backend, cfg["mode"], few_shot, cfg["max_retries"], cfg["workers"])
    queries = out.queries()
    with _open_out(cfg["out"]) as f:
        write_queries(queries, f, meta=_meta(cfg, stage="generate", backend=backend.name))
    for s in out.skipped:
        log.warning("skipped passage %s after %d attempts: %s", s.passage_id, s.attempt_count, s.reason)
    print(f"{len(queries)} queries from {len(out.results)} passages, {len(out.skipped)} skipped")
    return EXIT_OK


def cmd_filter(cfg: dict) -> int:
    corpus = _load_corpus(cfg["passages"])
    queries = _load_queries(cfg["queries"])
    blacklist = cfg.get("blacklist") or list(DEFAULT_BLACKLIST)
    kept, report = filter_queries(queries, _retriever(cfg["retriever"], corpus, cfg), cfg["k"], blacklist, cfg["workers"])
    meta = _meta(cfg, stage="filter")
    with _open_out(cfg["out"]) as f:
        write_queries(kept, f, meta=meta)
    if cfg.get("report"):
        with _open_out(cfg["report"]) as f:
            report.write(f)
        _sidecar(cfg["report"], meta)
    if cfg.get("qrels_out"):
        with _open_out(cfg["qrels_out"]) as f:
            write_qrels(_judgments(kept), f)
        _sidecar(cfg["qrels_out"], meta)
    print(f"kept {len(kept)}/{report.input_count} (pass rate {report.pass_rate:.4f})")
    return EXIT_OK


def cmd_index(cfg: dict) -> int:
    corpus = _load_corpus(cfg["passages"])
    kind = cfg["kind"]
    if kind == "bm25":
        with _open_out(cfg["out"], "wb") as f:
            BM25Retriever(cfg["k1"], cfg["b"]).fit(corpus).save(f)
    elif kind == "dense":
        with _open_out(cfg["out"], "wb") as f:
            save_embeddings(_dense(corpus, cfg["dim"], cfg["embed_seed"]).matrix_, f)
    else:
        enc = TokenEncoder(cfg["dim"], cfg["embed_seed"])
        index = CompressedLateInteractionIndex(cfg["bits"], cfg["centroids"], seed=cfg["seed"], encoder=enc).fit(corpus)
        with _open_out(cfg["out"], "wb") as f:
            index.save(f)
    _sidecar(cfg["out"], _meta(cfg, stage="index", kind=kind))
    print(f"{kind} index over {len(corpus)} passages -> {cfg['out']}")
    return EXIT_OK


def cmd_mine(cfg: dict) -> int:
    corpus = _load_corpus(cfg["passages"])
    queries = _load_queries(cfg["queries"])
    retriever = _retriever(cfg["retriever"], corpus, cfg)
    examples = _mine(queries, retriever, corpus, cfg["n_neg"], cfg["pool_depth"], cfg["seed"])
    with _open_out(cfg["out"]) as f:
        write_examples(examples, f, meta=_meta(cfg, stage="mine"))
    print(f"{len(examples)} training examples with {cfg['n_neg']} hard negatives each")
    return EXIT_OK


def _mine(queries, retriever, corpus, n_neg, pool_depth, seed) -> list[TrainingExample]:
    positives: dict[str, set[str]] = {}
    for q in queries:
        positives.setdefault(q.id, set()).add(q.passage_id)
    texts = {q.id: q.text for q in queries}
    return mine_hard_negatives(texts, positives, retriever, corpus.ids, n_neg, pool_depth, seed)


def cmd_pairs(cfg: dict) -> int:
    corpus = _load_corpus(cfg["passages"])
    queries = _load_queries(cfg["queries"])
    pairs, skipped = build_pretrain_pairs(corpus, queries, cfg["seed"], cfg["encoder_ratio"], cfg["decoder_ratio"])
    with _open_out(cfg["out"]) as f:
        n = serialize_pairs(pairs, f, meta=_meta(cfg, stage="pairs"))
    print(f"{n} pre-training pairs, {skipped} passages without queries")
    return EXIT_OK


def _toy_encoder(cfg: dict) -> ToyEncoder:
    return ToyEncoder(
        dim=cfg["dim"], seed=cfg["seed"], steps=cfg["steps"], batch_size=cfg["batch_size"],
        learning_rate=cfg["lr"], momentum=cfg["momentum"], temperature=cfg["temperature"],
    )


def cmd_train_toy(cfg: dict) -> int:
    corpus = _load_corpus(cfg["passages"])
    queries = _load_queries(cfg["queries"])
    with _open_in(cfg["examples"]) as f:
        examples = read_examples(f)
    texts = {q.id: q.text for q in queries}
    enc = _toy_encoder(cfg)
    enc, trace = train_toy(corpus, examples, texts, enc, cfg["steps"], cfg["batch_size"], cfg["lr"])
    with _open_out(cfg["out"]) as f:
        write_loss_trace(trace, f)
    _sidecar(cfg["out"], _meta(cfg, stage="train-toy"))
    run = _run(DenseRetriever(enc).fit(corpus), queries, 10)
    print(f"final loss {trace[-1]:.6f}; training-set MRR@10 {mrr_at_k(run, _judgments(queries), 10):.4f}")
    return EXIT_OK


def _load_index(cfg: dict):
    path = cfg["index"]
    with _open_in(path, "rb") as f:
        data = f.read()
    magic = data[:4]
    if magic == b"VLBM":
        return BM25Retriever.from_bytes(data)
    if magic == b"VLCI":
        index = CompressedLateInteractionIndex.from_bytes(data)
        index.encoder = TokenEncoder(index.dim_, cfg["embed_seed"])
        return index
    if magic == b"VLDE":
        if not cfg.get("passages"):
            raise UsageError("searching a dense embedding file needs --passages for the passage ids")
        matrix = load_embeddings(io.BytesIO(data))
        corpus = _load_corpus(cfg["passages"])
        return DenseRetriever(PseudoEmbedder(matrix.shape[1], cfg["embed_seed"])).set_matrix(matrix, corpus.ids)
    raise DataError(f"{path}: unrecognized index format")


def cmd_search(cfg: dict) -> int:
    retriever = _load_index(cfg)
    queries = _load_queries(cfg["queries"])
    run = _run(retriever, queries, cfg["top_k"])
    with _open_out(cfg["out"]) as f:
        write_run(run, f, tag=cfg.get("tag") or "legalsynth")
    _sidecar(cfg["out"], _meta(cfg, stage="search"))
    print(f"{len(run)} queries searched -> {cfg['out']}")
    return EXIT_OK


def _ks(value) -> list[int]:
    if isinstance(value, (list, tuple)):
        return [int(v) for v in value]
    try:
        return [int(v) for v in str(value).split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"--ks must be comma-separated integers, got {value!r}") from None


def cmd_eval(cfg: dict) -> int:
    with _open_in(cfg["run"]) as f:
        run = load_run(f)
    with _open_in(cfg["qrels"]) as f:
        judgments = load_qrels(f)
    result = evaluate_run(run, judgments, _ks(cfg["ks"]))
    sys.stdout.write(result.table())
    if cfg.get("out"):
        with _open_out(cfg["out"]) as f:
            f.write(result.to_json() + "\n")
        _sidecar(cfg["out"], _meta(cfg, stage="eval"))
    return EXIT_OK


def cmd_storage_report(cfg: dict) -> int:
    with _open_in(cfg["index"], "rb") as f:
        index = CompressedLateInteractionIndex.load(f)
    print(json.dumps(index.storage_report(), sort_keys=True))
    return EXIT_OK


def cmd_demo(cfg: dict) -> int:
    """Seeded end-to-end toy pipeline; every artifact lands under --out."""
    seed = cfg["seed"]
    out = Path(cfg.get("out") or f"demo-{seed}")
    n_docs = cfg.get("n_docs") or 30
    meta = lambda stage: _meta(cfg, stage=stage)  # noqa: E731

    docs_path = out / "documents.jsonl"
    with _open_out(docs_path) as f:
        for d in make_documents(n_docs, seed):
            f.write(json.dumps(d, ensure_ascii=False) + "\n")
    with _open_in(docs_path) as f:
        corpus = ingest_documents(f, 64)
    with _open_out(out / "passages.jsonl") as f:
        corpus.write(f, meta=meta("ingest"))

    gen = generate_for_corpus(corpus, MockBackend(seed=seed), backoff=0)
    queries = gen.queries()
    with _open_out(out / "queries.jsonl") as f:
        write_queries(queries, f, meta=meta("generate"))

    dense = _dense(corpus, cfg["dim"], seed)
    kept, report = filter_queries(queries, dense, DEFAULT_RECOVERY_K)
    with _open_out(out / "queries.kept.jsonl") as f:
        write_queries(kept, f, meta=meta("filter"))
    with _open_out(out / "filter_report.json") as f:
        report.write(f)

    pairs, _ = build_pretrain_pairs(corpus, kept, seed)
    with _open_out(out / "pairs.jsonl") as f:
        serialize_pairs(pairs, f, meta=meta("pairs"))

    train = [q for q in kept if derive_seed(seed, "split", q.id) % 5 != 0]
    test = [q for q in kept if derive_seed(seed, "split", q.id) % 5 == 0]
    with _open_out(out / "qrels.test.tsv") as f:
        write_qrels(_judgments(test), f)

    bm25 = BM25Retriever().fit(corpus)
    with _open_out(out / "bm25.vlbm", "wb") as f:
        bm25.save(f)
    with _open_out(out / "dense.vlde", "wb") as f:
        save_embeddings(dense.matrix_, f)

    examples = _mine(train, dense, corpus, DEFAULT_NEG_SINGLE, None, seed)
    with _open_out(out / "examples.jsonl") as f:
        write_examples(examples, f, meta=meta("mine"))
    toy_cfg = dict(cfg, steps=min(cfg["steps"], 300))
    enc, trace = train_toy(corpus, examples, {q.id: q.text for q in train}, _toy_encoder(toy_cfg), toy_cfg["steps"], cfg["batch_size"], cfg["lr"])
    with _open_out(out / "loss.csv") as f:
        write_loss_trace(trace, f)

    colbert = CompressedLateInteractionIndex(cfg["bits"], seed=seed, encoder=TokenEncoder(32, seed)).fit(corpus)
    with _open_out(out / "colbert.vlci", "wb") as f:
        colbert.save(f)
    with _open_out(out / "storage_report.json") as f:
        f.write(json.dumps(colbert.storage_report(), sort_keys=True) + "\n")

    systems = {
        "bm25": bm25,
        "dense-pseudo": dense,
        "dense-toy": DenseRetriever(enc).fit(corpus),
        f"colbert-{cfg['bits']}bit": colbert,
    }
    judgments = _judgments(test)
    table: dict[str, dict[str, float]] = {}
    for name, retriever in systems.items():
        run = _run(retriever, test, 100)
        with _open_out(out / "runs" / f"{name}.tsv") as f:
            write_run(run, f, tag=name)
        _sidecar(out / "runs" / f"{name}.tsv", meta("run"))
        table[name] = evaluate_run(run, judgments, [10, 100]).metrics
    text = system_table(table)
    with _open_out(out / "metrics.txt") as f:
        f.write(text)
    with _open_out(out / "metrics.json") as f:
        f.write(json.dumps(table, sort_keys=True) + "\n")
    for name in ["filter_report.json", "qrels.test.tsv", "bm25.vlbm", "dense.vlde", "colbert.vlci", "loss.csv", "metrics.txt", "metrics.json", "storage_report.json"]:
        _sidecar(out / name, meta(name))
    print(f"passages {len(corpus)}; queries {len(queries)} generated, {len(kept)} kept; "
          f"{len(train)} train / {len(test)} test")
    sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------- parser


def _bits(value: str) -> int:
    try:
        b = int(value)
    except ValueError:
        b = -1
    if b not in ALLOWED_BITS:
        raise argparse.ArgumentTypeError(f"invalid bit width {value!r}; choose from {{1,2,4,8}}")
    return b


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="legalsynth", description=__doc__)
    p.add_argument("--config", help="YAML configuration file; flags override its values")
    p.add_argument("--seed", type=int)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name: str, fn: Callable[[dict], int], help: str):
        sp = sub.add_parser(name, help=help)
        sp.set_defaults(func=fn)
        sp.add_argument("--seed", type=int, default=argparse.SUPPRESS)
        return sp

    sp = add("ingest", cmd_ingest, "flatten and chunk document records into passages")
    sp.add_argument("--documents")
    sp.add_argument("--out")
    sp.add_argument("--max-tokens", type=int)

    sp = add("generate", cmd_generate, "generate synthetic queries per passage")
    sp.add_argument("--passages")
    sp.add_argument("--out")
    sp.add_argument("--mode", choices=["aspect_guided", "basic"])
    sp.add_argument("--backend", choices=["mock", "http"])
    sp.add_argument("--few-shot", help="file of exemplars separated by blank lines")
    sp.add_argument("--max-retries", type=int)
    sp.add_argument("--workers", type=int)

    sp = add("filter", cmd_filter, "drop self-referencing and unrecoverable queries")
    sp.add_argument("--passages")
    sp.add_argument("--queries")
    sp.add_argument("--out")
    sp.add_argument("--report")
    sp.add_argument("--qrels-out")
    sp.add_argument("--k", type=int)
    sp.add_argument("--blacklist", action="append")
    sp.add_argument("--retriever", choices=["bm25", "dense"])
    sp.add_argument("--dim", type=int)
    sp.add_argument("--embed-seed", type=int)
    sp.add_argument("--workers", type=int)

    sp = add("index", cmd_index, "build a bm25, dense or compressed late-interaction index")
    sp.add_argument("kind", choices=["bm25", "dense", "colbert"])
    sp.add_argument("--passages")
    sp.add_argument("--out")
    sp.add_argument("--bits", type=_bits)
    sp.add_argument("--centroids", type=int)
    sp.add_argument("--dim", type=int)
    sp.add_argument("--embed-seed", type=int)
    sp.add_argument("--k1", type=float)
    sp.add_argument("--b", type=float)

    sp = add("mine", cmd_mine, "mine hard negatives for training queries")
    sp.add_argument("--passages")
    sp.add_argument("--queries")
    sp.add_argument("--out")
    sp.add_argument("--n-neg", type=int)
    sp.add_argument("--pool-depth", type=int)
    sp.add_argument("--retriever", choices=["bm25", "dense"])
    sp.add_argument("--dim", type=int)
    sp.add_argument("--embed-seed", type=int)

    sp = add("pairs", cmd_pairs, "build masked query-as-context pre-training pairs")
    sp.add_argument("--passages")
    sp.add_argument("--queries")
    sp.add_argument("--out")
    sp.add_argument("--encoder-ratio", type=float)
    sp.add_argument("--decoder-ratio", type=float)

    sp = add("train-toy", cmd_train_toy, "contrastive training of the toy encoder")
    sp.add_argument("--passages")
    sp.add_argument("--queries")
    sp.add_argument("--examples")
    sp.add_argument("--out", help="loss trace CSV")
    sp.add_argument("--dim", type=int)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--momentum", type=float)
    sp.add_argument("--temperature", type=float)

    sp = add("search", cmd_search, "run queries against an index and write a TREC run")
    sp.add_argument("--index")
    sp.add_argument("--passages", help="passage ids for dense embedding files")
    sp.add_argument("--queries")
    sp.add_argument("--out")
    sp.add_argument("--top-k", type=int)
    sp.add_argument("--embed-seed", type=int)
    sp.add_argument("--tag")

    sp = add("eval", cmd_eval, "evaluate a TREC run against qrels")
    sp.add_argument("--run")
    sp.add_argument("--qrels")
    sp.add_argument("--ks")
    sp.add_argument("--out", help="optional JSON metrics record")

    sp = add("storage-report", cmd_storage_report, "itemized storage of a compressed index")
    sp.add_argument("--index")

    sp = add("demo", cmd_demo, "seeded end-to-end toy pipeline")
    sp.add_argument("--out")
    sp.add_argument("--n-docs", type=int)
    sp.add_argument("--bits", type=_bits)
    return p


REQUIRED = {
    "ingest": ("documents", "out"),
    "generate": ("passages", "out"),
    "filter": ("passages", "queries", "out"),
    "index": ("passages", "out"),
    "mine": ("passages", "queries", "out"),
    "pairs": ("passages", "queries", "out"),
    "train-toy": ("passages", "queries", "examples", "out"),
    "search": ("index", "queries", "out"),
    "eval": ("run", "qrels"),
    "storage-report": ("index",),
    "demo": (),
}


def resolve_config(args: argparse.Namespace) -> dict:
    """Defaults < config file (top level, then per-command section) < flags."""
    cfg = dict(DEFAULTS)
    if args.config:
        with _open_in(args.config) as f:
            loaded = yaml.safe_load(f) or {}
        if not isinstance(loaded, dict):
            raise DataError(f"{args.config}: configuration must be a mapping")
        section = loaded.pop(args.command, None) or {}
        for src in (loaded, section):
            cfg.update({k.replace("-", "_"): v for k, v in src.items() if not isinstance(v, dict) or k == "backend_options"})
    for k, v in vars(args).items():
        if k in ("func", "config", "verbose", "command") or v is None:
            continue
        cfg[k] = v
    cfg["command"] = args.command
    if cfg.get("bits") not in ALLOWED_BITS:
        raise UsageError(f"invalid bit width {cfg.get('bits')!r}; choose from {{1,2,4,8}}")
    missing = [k for k in REQUIRED[args.command] if not cfg.get(k)]
    if missing:
        raise UsageError(f"{args.command}: missing required option(s): " + ", ".join("--" + m.replace("_", "-") for m in missing))
    return cfg


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
        cfg = resolve_config(args)
        return args.func(cfg)
    except UsageError as exc:
        sys.stderr.write(f"{exc}\n")
        return EXIT_USAGE
    except (DataError, KeyError, ValueError, OSError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
