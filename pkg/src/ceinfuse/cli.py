"""Command line entry point: ``python -m ceinfuse <subcommand> ...``.

Exit codes: 0 on success, 2 for invalid arguments or inputs, 3 when a stage
fails while running.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import checkpoint, numkernel
from .bench import speedup, time_embedding
from .checkpoint import CheckpointFormatError
from .data import load_dataset, read_jsonl, read_qrels
from .evaluation import EvalReport, ReportRow, hits_at_k, layer_sweep, mrr_at_k, paired_t_test, write_report, write_sweep
from .model import CE, DE, ConfigError, ModelConfig, embed_texts, init_random
from .pipeline import PipelineConfig, PipelineError, ce_pairs, dump_config, load_config, mine_examples, run_pipeline
from .retrieval import EmbeddingIndex, normalize_rows, read_results_tsv, rerank, search_many, ce_scorer, write_results_tsv
from .synth import InfeasibleSpecError, SynthSpec, synth_data, write_vocab
from .tokenizer import VocabError, load_vocab
from .training import CE_BINARY, DE_MNRL, TrainConfig, model_grad_check, train, write_loss_curve

EXIT_OK, EXIT_INVALID, EXIT_STAGE = 0, 2, 3
GRAD_TOL = 1e-4

log = logging.getLogger("ceinfuse")


class UsageError(ValueError):
    """Bad arguments or inputs discovered after parsing."""


def _header(args: argparse.Namespace) -> str:
    items = {k: v for k, v in vars(args).items() if k != "func"}
    blob = json.dumps(items, sort_keys=True, default=str).encode()
    return f"seed={getattr(args, 'seed', 0)} config={hashlib.sha256(blob).hexdigest()[:12]}"


def _existing(path: str, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {path}")
    return p


def _load_model(path: str):
    return checkpoint.load(_existing(path, "checkpoint"))[0]


def _train_config(args, **over) -> TrainConfig:
    return TrainConfig(
        batch_size=args.batch_size, n_neg=args.n_neg, lr=args.lr, warmup=args.warmup, epochs=args.epochs,
        weight_decay=args.weight_decay, seed=args.seed, max_len=args.max_len, max_steps=args.max_steps, **over,
    )


# -- subcommands ------------------------------------------------------------


def cmd_synth_data(args) -> None:
    spec = SynthSpec(
        n_topics=args.topics, keywords_per_topic=args.keywords, query_len=tuple(args.query_len),
        doc_len=tuple(args.doc_len), noise_ratio=args.noise, corpus_size=args.corpus_size,
        n_queries=args.queries, seed=args.seed, world_seed=args.world_seed, noise_words=args.noise_words,
        relevance=args.relevance,
    )
    ds = synth_data(spec, args.out, header=_header(args))
    print(f"wrote {len(ds.corpus)} docs, {len(ds.queries)} queries to {args.out}")


def _texts_from(path: Path) -> list[str]:
    if path.is_dir():
        return [t for name in ("corpus.jsonl", "queries.jsonl") if (path / name).exists() for t in read_jsonl(path / name).values()]
    if path.suffix == ".jsonl":
        return list(read_jsonl(path).values())
    return [line.rstrip("\n").replace("\t", " ") for line in path.read_text(encoding="utf-8").splitlines() if line and not line.startswith("#")]


def cmd_build_vocab(args) -> None:
    texts = [t for p in args.inputs for t in _texts_from(_existing(p, "input"))]
    tokens = write_vocab(texts, args.size, args.out)
    # header goes in a sidecar: a line inside vocab.txt would shift token ids
    Path(str(args.out) + ".meta").write_text(f"# {_header(args)}\n")
    print(f"wrote {len(tokens)} tokens to {args.out}")


def cmd_train_ce(args) -> None:
    vocab = load_vocab(_existing(args.vocab, "vocab"))
    ds = load_dataset(_existing(args.data, "training data"))
    examples = mine_examples(ds, args.n_neg, args.window, args.seed)
    cfg = ModelConfig(num_layers=args.layers, hidden=args.hidden, heads=args.heads, ff=args.ff,
                      vocab_size=len(vocab), max_positions=max(64, args.max_len))
    weights = init_random(cfg, args.seed, CE)
    weights, curve = train(weights, CE_BINARY, ce_pairs(examples, args.n_neg), _train_config(args), vocab)
    hdr = _header(args)
    checkpoint.save(weights, args.out, args.vocab, {"header": hdr})
    write_loss_curve(curve, str(args.out) + ".loss.csv", hdr)
    print(f"trained CE for {len(curve)} steps, final loss {curve[-1][1]:.4f} -> {args.out}")


def cmd_train_de(args) -> None:
    vocab = load_vocab(_existing(args.vocab, "vocab"))
    ds = load_dataset(_existing(args.data, "training data"))
    examples = mine_examples(ds, args.n_neg, args.window, args.seed)
    if args.limit:
        examples = examples[: args.limit]
    if args.init:
        weights = _load_model(args.init)
        if weights.has_head:
            raise UsageError("--init must be a dual-encoder checkpoint; run `infuse` on a CE first")
    else:
        cfg = ModelConfig(num_layers=args.layers, hidden=args.hidden, heads=args.heads, ff=args.ff,
                          vocab_size=len(vocab), max_positions=max(64, args.max_len))
        weights = init_random(cfg, args.seed, DE)
    weights, curve = train(weights, DE_MNRL, examples, _train_config(args), vocab)
    hdr = _header(args)
    checkpoint.save(weights, args.out, args.vocab, {"header": hdr})
    write_loss_curve(curve, str(args.out) + ".loss.csv", hdr)
    print(f"trained DE for {len(curve)} steps, final loss {curve[-1][1]:.4f} -> {args.out}")


def cmd_infuse(args) -> None:
    ce = _load_model(args.ce)
    if not ce.has_head:
        raise UsageError(f"{args.ce} is not a cross-encoder checkpoint")
    de = checkpoint.infuse(ce, args.layers, args.k_copy, args.seed)
    if args.verify:
        vocab = load_vocab(_existing(args.vocab, "vocab")) if args.vocab else None
        if vocab is None:
            raise UsageError("--verify needs --vocab")
        rng = np.random.default_rng(args.seed)
        words = [t for t in vocab.tokens if not t.startswith("[") and not t.startswith("##")]
        probes = [" ".join(rng.choice(words, int(rng.integers(1, 12)))) for _ in range(args.verify)]
        report = checkpoint.verify_infusion(ce, de, args.k_copy, vocab, probes)
        print(report)
        if not report.ok:
            raise RuntimeError(f"infusion check failed at hidden states {report.flagged_layers}")
    checkpoint.save(de, args.out, args.vocab or "", {"header": _header(args), "source": args.ce, "k_copy": args.k_copy})
    print(f"wrote {args.layers}-layer DE (k_copy={args.k_copy}) to {args.out}")


def cmd_sweep_layers(args) -> None:
    weights = _load_model(args.model)
    vocab = load_vocab(_existing(args.vocab, "vocab"))
    ds = load_dataset(_existing(args.data, "dataset"))
    mode = CE if args.mode == "ce" else DE
    if mode == CE and not weights.has_head:
        log.warning("self-pairing a dual encoder; results describe a model never trained on pairs")
    rows = layer_sweep(weights, vocab, ds, mode, args.k, args.max_len)
    write_sweep(args.out, [(ds.name, r) for r in rows], args.k, _header(args))
    for r in rows:
        print(f"layer {r.layer}: hits@{args.k}={r.hits:.4f} mrr@{args.k}={r.mrr:.4f}")


def cmd_index(args) -> None:
    weights = _load_model(args.model)
    vocab = load_vocab(_existing(args.vocab, "vocab"))
    corpus = read_jsonl(_existing(args.corpus, "corpus"))
    ids = list(corpus)
    layer = weights.config.num_layers if args.layer is None else args.layer
    emb = embed_texts(weights, vocab, [corpus[d] for d in ids], [layer], max_len=args.max_len)[0]
    prov = {"model": args.model, "layer": layer, "header": _header(args)}
    np.savez(args.out, doc_ids=np.array(ids), matrix=normalize_rows(emb, ids), provenance=json.dumps(prov))
    print(f"indexed {len(ids)} docs at layer {layer} -> {args.out}")


def _load_index(path: str) -> EmbeddingIndex:
    with np.load(_existing(path, "index")) as z:
        return EmbeddingIndex([str(d) for d in z["doc_ids"]], z["matrix"], json.loads(str(z["provenance"])))


def cmd_search(args) -> None:
    weights = _load_model(args.model)
    vocab = load_vocab(_existing(args.vocab, "vocab"))
    index = _load_index(args.index)
    queries = read_jsonl(_existing(args.queries, "queries"))
    layer = index.provenance.get("layer", weights.config.num_layers)
    qids = list(queries)
    qemb = embed_texts(weights, vocab, [queries[q] for q in qids], [layer], max_len=args.max_len)[0]
    results = search_many(index, qemb, args.k)
    write_results_tsv(args.out, zip(qids, results), _header(args))
    print(f"searched {len(qids)} queries (k={args.k}) -> {args.out}")


def cmd_rerank(args) -> None:
    ce = _load_model(args.ce)
    if not ce.has_head:
        raise UsageError(f"{args.ce} is not a cross-encoder checkpoint")
    vocab = load_vocab(_existing(args.vocab, "vocab"))
    retrieved = read_results_tsv(_existing(args.results, "results"))
    queries = read_jsonl(_existing(args.queries, "queries"))
    corpus = read_jsonl(_existing(args.corpus, "corpus"))
    out = []
    for qid, res in retrieved.items():
        if qid not in queries:
            raise UsageError(f"query {qid} from {args.results} missing in {args.queries}")
        out.append((qid, rerank(res, ce_scorer(ce, vocab, queries[qid], corpus, args.max_len), args.depth)))
    write_results_tsv(args.out, out, _header(args))
    print(f"reranked {len(out)} queries (depth {args.depth}) -> {args.out}")


def cmd_eval(args) -> None:
    qrels = read_qrels(_existing(args.qrels, "qrels"))
    report = EvalReport(k=args.k)
    per_query: dict[str, list[float]] = {}
    for spec in args.results:
        name, _, path = spec.rpartition("=")
        name = name or Path(path).stem
        res = read_results_tsv(_existing(path, "results"))
        stage = next(iter(res.values())).stage if res else "retrieved"
        h, m = hits_at_k(res, qrels, args.k), mrr_at_k(res, qrels, args.k)
        report.rows.append(ReportRow(args.dataset, name, stage, -1, h, m))
        per_query[name] = [mrr_at_k({q: r}, qrels, args.k) for q, r in sorted(res.items()) if q in qrels]
        print(f"{name}: hits@{args.k}={h:.4f} mrr@{args.k}={m:.4f}")
    if args.out:
        write_report(report, args.out, _header(args))
    if len(per_query) == 2:
        (na, a), (nb, b) = per_query.items()
        if len(a) == len(b) and len(a) >= 2:
            tt = paired_t_test(a, b)
            print(f"paired t-test on per-query MRR ({na} vs {nb}): t={tt.t:.4f} p={tt.p:.4g} n={tt.n}")


def cmd_bench(args) -> None:
    vocab = load_vocab(_existing(args.vocab, "vocab"))
    corpus = list(read_jsonl(_existing(args.corpus, "corpus")).values())[: args.sentences]
    results = []
    for path in args.models:
        w = _load_model(path)
        r = time_embedding(w, vocab, corpus, args.batch_size, args.runs, args.threads or None, path, args.max_len)
        results.append(r)
        print(f"{path}: {r.sentences_per_sec:.1f} sentences/s (median {r.median_seconds:.3f}s over {len(r.run_seconds)} runs)")
    for r in results[1:]:
        print(f"speedup {results[0].model_id} -> {r.model_id}: {speedup(results[0], r):.2f}x")


def cmd_grad_check(args) -> None:
    failed = []
    if args.kernel:
        names = sorted(numkernel.KERNELS) if args.kernel == "all" else [args.kernel]
        for name in names:
            err = numkernel.grad_check(name, seed=args.seed)
            print(f"kernel {name}: " + ("skipped (non-differentiable input)" if err is None else f"max rel err {err:.3e}"))
            if err is not None and err >= GRAD_TOL:
                failed.append(name)
    else:
        cfg = ModelConfig(num_layers=args.layers, hidden=args.hidden, heads=args.heads, ff=args.ff, max_positions=args.max_len)
        paths = [DE_MNRL, CE_BINARY] if args.path == "both" else [args.path]
        for path in paths:
            t0 = time.perf_counter()
            err = model_grad_check(cfg, args.seed, path, max_len=args.max_len)
            print(f"{path}: max rel err {err:.3e} ({time.perf_counter() - t0:.1f}s)")
            if err >= GRAD_TOL:
                failed.append(path)
    if failed:
        raise RuntimeError(f"gradient check above {GRAD_TOL:g}: {', '.join(failed)}")


def cmd_run_pipeline(args) -> None:
    cfg = load_config(_existing(args.config, "config")) if args.config else PipelineConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.no_bench:
        cfg = replace(cfg, bench=False)
    out = args.out or str(Path("runs") / f"{time.strftime('%Y%m%d-%H%M%S')}_seed{cfg.seed}")
    cfg = replace(cfg, out_dir=out)
    if args.dump_config:
        dump_config(cfg, args.dump_config)
        print(f"wrote {args.dump_config}")
        return
    for d in cfg.data_dirs:
        _existing(d, "data directory")
    res = run_pipeline(cfg)
    print(Path(res.out_dir, "report.csv").read_text())


# -- parser -----------------------------------------------------------------


def _model_flags(p, layers: int) -> None:
    p.add_argument("--layers", type=int, default=layers, help="encoder layers")
    p.add_argument("--hidden", type=int, default=64, help="hidden width d")
    p.add_argument("--heads", type=int, default=4, help="attention heads")
    p.add_argument("--ff", type=int, default=256, help="feed-forward width")


def _train_flags(p, batch: int, lr: float, n_neg: int) -> None:
    p.add_argument("--batch-size", type=int, default=batch)
    p.add_argument("--lr", type=float, default=lr, help="peak learning rate")
    p.add_argument("--warmup", type=float, default=0.1, help="warmup fraction of total steps")
    p.add_argument("--epochs", type=int, default=1)
    p.add_argument("--max-steps", type=int, default=None, help="stop after this many steps")
    p.add_argument("--weight-decay", type=float, default=0.01)
    p.add_argument("--n-neg", type=int, default=n_neg, help="BM25 hard negatives per query")
    p.add_argument("--window", type=int, default=50, help="BM25 candidate window for negatives")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ceinfuse", description="Cross-encoder layer probing and dual-encoder infusion toolkit.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log stage progress")
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_, description=help_)
        p.set_defaults(func=func)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--max-len", type=int, default=64, help="max tokens per sequence")
        return p

    p = add("synth-data", cmd_synth_data, "Generate a synthetic topical retrieval dataset.")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--topics", type=int, default=200)
    p.add_argument("--keywords", type=int, default=16, help="keywords per topic")
    p.add_argument("--query-len", type=int, nargs=2, default=(3, 5), metavar=("MIN", "MAX"))
    p.add_argument("--doc-len", type=int, nargs=2, default=(8, 14), metavar=("MIN", "MAX"))
    p.add_argument("--noise", type=float, default=0.3, help="noise-word probability per token")
    p.add_argument("--noise-words", type=int, default=300)
    p.add_argument("--corpus-size", type=int, default=5000)
    p.add_argument("--queries", type=int, default=500)
    p.add_argument("--world-seed", type=int, default=0, help="seed of the shared word inventory")
    p.add_argument("--relevance", choices=("keyword", "topic"), default="keyword")

    p = add("build-vocab", cmd_build_vocab, "Build a WordPiece vocabulary from corpus files or dataset directories.")
    p.add_argument("inputs", nargs="+", help="JSONL/TSV/text files or dataset directories")
    p.add_argument("--size", type=int, default=8000)
    p.add_argument("--out", required=True)

    p = add("train-ce", cmd_train_ce, "Train the toy cross encoder on BM25-mined pairs.")
    p.add_argument("--data", required=True, help="training dataset directory")
    p.add_argument("--vocab", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    _model_flags(p, 4)
    _train_flags(p, 32, 1e-3, 1)

    p = add("train-de", cmd_train_de, "Train a dual encoder with MNRL (random or infused init).")
    p.add_argument("--data", required=True, help="training dataset directory")
    p.add_argument("--vocab", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--init", help="start from this DE checkpoint (e.g. output of `infuse`)")
    p.add_argument("--limit", type=int, default=0, help="use only the first N training examples")
    _model_flags(p, 2)
    _train_flags(p, 16, 5e-4, 4)

    p = add("infuse", cmd_infuse, "Build a shallow DE from a CE's embeddings and first layers.")
    p.add_argument("--ce", required=True, help="cross-encoder checkpoint")
    p.add_argument("--layers", type=int, default=2, help="DE depth")
    p.add_argument("--k-copy", type=int, default=1, help="CE layers to copy")
    p.add_argument("--out", required=True)
    p.add_argument("--vocab", help="vocab path (needed for --verify)")
    p.add_argument("--verify", type=int, default=0, metavar="N", help="check the copied prefix on N random probes")

    p = add("sweep-layers", cmd_sweep_layers, "Retrieval quality of pooled hidden states at every layer.")
    p.add_argument("--model", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--data", required=True, help="evaluation dataset directory")
    p.add_argument("--mode", choices=("de", "ce"), default="de", help="single encoding or self-pairing")
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--out", required=True, help="sweep CSV")

    p = add("index", cmd_index, "Embed a corpus into an exact cosine index (.npz).")
    p.add_argument("--model", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--corpus", required=True, help="corpus JSONL")
    p.add_argument("--layer", type=int, default=None, help="hidden-state index to pool (default: last)")
    p.add_argument("--out", required=True)

    p = add("search", cmd_search, "Top-k cosine search for a query file.")
    p.add_argument("--model", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--index", required=True)
    p.add_argument("--queries", required=True, help="queries JSONL")
    p.add_argument("--k", type=int, default=50)
    p.add_argument("--out", required=True, help="results TSV")

    p = add("rerank", cmd_rerank, "Rescore retrieved candidates with the cross encoder.")
    p.add_argument("--ce", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--results", required=True, help="retrieval results TSV")
    p.add_argument("--queries", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--depth", type=int, default=50)
    p.add_argument("--out", required=True)

    p = add("eval", cmd_eval, "Hits@k / MRR@k of result files against qrels.")
    p.add_argument("results", nargs="+", metavar="[NAME=]RESULTS_TSV")
    p.add_argument("--qrels", required=True)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--dataset", default="data", help="dataset label for the report")
    p.add_argument("--out", help="write a report CSV")

    p = add("bench", cmd_bench, "Single-threaded embedding throughput; speedups relative to the first model.")
    p.add_argument("models", nargs="+", help="checkpoints; the first is the reference")
    p.add_argument("--vocab", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--sentences", type=int, default=1000)
    p.add_argument("--runs", type=int, default=5)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--threads", type=int, default=1, help="BLAS threads (0 leaves the pool alone)")

    p = add("grad-check", cmd_grad_check, "Finite-difference gradient verification.")
    p.add_argument("--path", choices=(DE_MNRL, CE_BINARY, "both"), default="both")
    p.add_argument("--kernel", help="check one numeric kernel instead (or 'all')")
    p.set_defaults(max_len=8)
    _model_flags(p, 2)
    p.set_defaults(hidden=8, heads=2, ff=16)

    p = add("run-pipeline", cmd_run_pipeline, "Run the full experiment end to end.")
    p.set_defaults(seed=None)
    p.add_argument("--config", help="INI config file (see README)")
    p.add_argument("--out", help="run directory (default runs/<timestamp>_seed<seed>)")
    p.add_argument("--no-bench", action="store_true", help="skip timing")
    p.add_argument("--dump-config", metavar="PATH", help="write the effective config and exit")
    return ap


_INVALID = (UsageError, ConfigError, InfeasibleSpecError, VocabError, CheckpointFormatError, FileNotFoundError, KeyError)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(asctime)s %(levelname)s %(message)s")
    try:
        args.func(args)
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except _INVALID as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - any other failure is a stage failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_STAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
