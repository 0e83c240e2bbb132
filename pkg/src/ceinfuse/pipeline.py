"""End-to-end desk-scale run: data -> toy CE -> sweeps -> infusion -> DE training -> eval -> bench.

Every stage writes its artifacts under ``out_dir`` and is skipped on a rerun
when they already exist, so an interrupted run resumes from the last saved
checkpoint. Emitted text files start with a ``# seed=... config=...`` line.
"""

from __future__ import annotations

import configparser
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import bm25, checkpoint
from .bench import BenchResult, speedup, time_embedding
from .data import Dataset, load_dataset
from .evaluation import (
    DegenerateInputError, EvalReport, ReportRow, baseline_gaps, hits_at_k, layer_sweep, mrr_at_k,
    paired_t_test, write_report, write_significance, write_sweep,
)
from .model import CE, DE, EncoderWeights, ModelConfig, ce_score_batch, embed_texts, init_random
from .retrieval import RERANKED, RETRIEVED, EmbeddingIndex, normalize_rows, rerank, search_many, write_results_tsv
from .synth import SynthSpec, synth_data, training_pairs, write_vocab
from .tokenizer import load_vocab
from .training import CE_BINARY, DE_MNRL, TrainConfig, TrainExample, train, write_loss_curve

log = logging.getLogger(__name__)

BASELINE, DE2_RAND, DE2_CE = "Baseline", "DE-2-Rand", "DE-2-CE"
MODELS = (BASELINE, DE2_RAND, DE2_CE)


class PipelineError(RuntimeError):
    def __init__(self, stage: str, paths: list[str], cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause!r} (artifacts: {', '.join(paths)})")
        self.stage, self.paths = stage, paths


# one shared world: 50 topics of 16 keywords each, 300 noise words
WORLD = dict(n_topics=50, keywords_per_topic=16, noise_ratio=0.2)


def default_eval_specs() -> dict[str, SynthSpec]:
    return {
        "main": SynthSpec(**WORLD, corpus_size=5000, n_queries=500),
        "noisy": SynthSpec(**{**WORLD, "noise_ratio": 0.35}, corpus_size=1000, n_queries=100),
        "short": SynthSpec(**WORLD, corpus_size=1000, n_queries=100, query_len=(2, 3)),
        "long": SynthSpec(**WORLD, corpus_size=1000, n_queries=100, doc_len=(12, 16)),
    }


@dataclass
class PipelineConfig:
    out_dir: str = "runs/latest"
    seed: int = 0
    train_spec: SynthSpec = field(default_factory=lambda: SynthSpec(**WORLD, corpus_size=5000, n_queries=12000))
    eval_specs: dict[str, SynthSpec] = field(default_factory=default_eval_specs)
    data_dirs: list[str] = field(default_factory=list)
    train_dir: str = ""
    vocab_size: int = 8000
    ce_model: ModelConfig = field(default_factory=lambda: ModelConfig(num_layers=4, hidden=64, heads=4, ff=256))
    ce_train: TrainConfig = field(default_factory=lambda: TrainConfig(batch_size=32, lr=1e-3, epochs=1))
    de_train: TrainConfig = field(default_factory=lambda: TrainConfig(batch_size=16, lr=5e-4, epochs=1))
    de_layers: int = 2
    k_copy: int = 1
    n_neg: int = 4
    ce_n_neg: int = 1
    de_examples: int = 4000
    window: int = 50
    k: int = 10
    rerank_depth: int = 50
    max_len: int = 64
    sweep_sample: int = 0
    bench: bool = True
    bench_sentences: int = 1000
    bench_runs: int = 5

    def fingerprint(self) -> dict:
        d = asdict(self)
        d.pop("out_dir")
        return d

    def config_hash(self) -> str:
        blob = json.dumps(self.fingerprint(), sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    def header(self) -> str:
        return f"seed={self.seed} config={self.config_hash()}"


# -- config file (INI) ------------------------------------------------------


def _coerce(value: str, like):
    if isinstance(like, bool):
        return value.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(like, tuple):
        return tuple(int(v) for v in value.replace(",", " ").split())
    if isinstance(like, list):
        return [v for v in value.replace(",", " ").split()]
    if like is None:
        return None if value.strip().lower() in ("", "none") else int(value)
    return type(like)(value)


def _update(obj, section) -> object:
    kw = {}
    names = {f.name: getattr(obj, f.name) for f in fields(obj)}
    for key, value in section.items():
        if key not in names:
            raise ValueError(f"unknown config key {key!r} in [{section.name}]")
        kw[key] = _coerce(value, names[key])
    return replace(obj, **kw)


def load_config(path: str | Path) -> PipelineConfig:
    """Read an INI file; see README for the sections and keys."""
    cp = configparser.ConfigParser()
    if not cp.read(path):
        raise FileNotFoundError(path)
    cfg = PipelineConfig()
    if cp.has_section("pipeline"):
        cfg = _update(cfg, cp["pipeline"])
    for sec, attr in (("train_data", "train_spec"), ("ce_model", "ce_model"), ("ce_train", "ce_train"), ("de_train", "de_train")):
        if cp.has_section(sec):
            setattr(cfg, attr, _update(getattr(cfg, attr), cp[sec]))
    evals = {s.split(".", 1)[1]: s for s in cp.sections() if s.startswith("eval.")}
    if evals:
        base = default_eval_specs()
        cfg.eval_specs = {name: _update(base.get(name, SynthSpec()), cp[sec]) for name, sec in evals.items()}
    return cfg


def dump_config(cfg: PipelineConfig, path: str | Path) -> None:
    cp = configparser.ConfigParser()
    flat = {k: v for k, v in cfg.fingerprint().items() if not isinstance(v, dict)}
    cp["pipeline"] = {k: " ".join(map(str, v)) if isinstance(v, list) else str(v) for k, v in flat.items()}
    cp["train_data"] = {k: _ini(v) for k, v in asdict(cfg.train_spec).items()}
    for name, spec in cfg.eval_specs.items():
        cp[f"eval.{name}"] = {k: _ini(v) for k, v in asdict(spec).items()}
    cp["ce_model"] = {k: _ini(v) for k, v in asdict(cfg.ce_model).items()}
    cp["ce_train"] = {k: _ini(v) for k, v in asdict(cfg.ce_train).items()}
    cp["de_train"] = {k: _ini(v) for k, v in asdict(cfg.de_train).items()}
    with open(path, "w") as fh:
        fh.write(f"# {cfg.header()}\n")
        cp.write(fh)


def _ini(v) -> str:
    if isinstance(v, (tuple, list)):
        return " ".join(map(str, v))
    return "none" if v is None else str(v)


# -- the run ----------------------------------------------------------------


@dataclass
class PipelineResult:
    out_dir: Path
    report: EvalReport
    bench: dict[str, BenchResult] = field(default_factory=dict)


class _Stages:
    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        self.out = Path(cfg.out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.hdr = cfg.header()

    def run(self, name: str, outputs: list[Path], fn: Callable[[], object], loader: Callable[[], object] | None = None):
        if loader is not None and outputs and all(p.exists() for p in outputs):
            log.info("stage %s: reusing %s", name, ", ".join(map(str, outputs)))
            return loader()
        log.info("stage %s: running", name)
        t0 = time.perf_counter()
        try:
            result = fn()
        except Exception as exc:
            raise PipelineError(name, [str(p) for p in outputs], exc) from exc
        log.info("stage %s: done in %.1fs", name, time.perf_counter() - t0)
        return result


def _seeded(spec: SynthSpec, seed: int, offset: int) -> SynthSpec:
    return replace(spec, world_seed=spec.world_seed + seed, seed=spec.seed + 1000 * seed + offset)


def mine_examples(ds: Dataset, n_neg: int, window: int, seed: int) -> list[TrainExample]:
    """One training example per judged query, with BM25 hard negatives from ``ds.corpus``."""
    doc_ids = ds.doc_ids
    texts = [ds.corpus[d] for d in doc_ids]
    pos = {d: i for i, d in enumerate(doc_ids)}
    index = bm25.build(texts)
    triples = [(q, p, [pos[d] for d in rel]) for q, p, rel in training_pairs(ds, seed)]
    return bm25.mine_hard_negatives(index, texts, triples, n_neg, window, seed)


def ce_pairs(examples: list[TrainExample], n_neg: int) -> list[tuple[str, str, int]]:
    """Labelled cross-encoder pairs: each positive plus its first ``n_neg`` negatives."""
    pairs = []
    for e in examples:
        pairs.append((e.query, e.positive, 1))
        pairs += [(e.query, n, 0) for n in e.negatives[:n_neg]]
    return pairs


def save_examples(path: Path, examples: list[TrainExample], header: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# {header}\n")
        for e in examples:
            fh.write(json.dumps({"query": e.query, "positive": e.positive, "negatives": e.negatives}) + "\n")


def load_examples(path: Path) -> list[TrainExample]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line and not line.startswith("#"):
            r = json.loads(line)
            out.append(TrainExample(r["query"], r["positive"], r["negatives"]))
    return out


def _sample(ds: Dataset, n: int, seed: int) -> Dataset:
    """Subsample queries (keeping every doc) for faster sweeps."""
    if not n or n >= len(ds.queries):
        return ds
    rng = np.random.default_rng(seed)
    keep = sorted(rng.choice(len(ds.queries), size=n, replace=False))
    qids = list(ds.queries)
    qs = {qids[i]: ds.queries[qids[i]] for i in keep}
    return Dataset(ds.name, ds.corpus, qs, {q: ds.qrels[q] for q in qs if q in ds.qrels})


def run_pipeline(cfg: PipelineConfig) -> PipelineResult:
    st = _Stages(cfg)
    out, hdr = st.out, st.hdr
    dump_config(cfg, out / "config.ini")
    seed = cfg.seed

    # 1. data
    data_root = out / "data"
    if cfg.data_dirs:
        eval_dirs = {Path(d).name: Path(d) for d in cfg.data_dirs}
        train_dir = Path(cfg.train_dir or cfg.data_dirs[0])
    else:
        eval_dirs = {name: data_root / name for name in cfg.eval_specs}
        train_dir = data_root / "train"
        for i, (name, spec) in enumerate([("train", cfg.train_spec), *cfg.eval_specs.items()]):
            d = data_root / name
            st.run(f"synth-data[{name}]", [d / "qrels.tsv"], lambda d=d, s=spec, i=i: synth_data(_seeded(s, seed, i), d, name, hdr), lambda: None)
    datasets = {name: load_dataset(d, name) for name, d in eval_dirs.items()}
    train_ds = load_dataset(train_dir, "train")

    # 2. vocab
    vocab_path = out / "vocab.txt"

    def make_vocab():
        texts = list(train_ds.corpus.values()) + list(train_ds.queries.values())
        for ds in datasets.values():
            texts += list(ds.corpus.values()) + list(ds.queries.values())
        write_vocab(texts, cfg.vocab_size, vocab_path)
        (out / "vocab.txt.meta").write_text(f"# {hdr}\n")

    st.run("build-vocab", [vocab_path], make_vocab, lambda: None)
    vocab = load_vocab(vocab_path)
    model_cfg = cfg.ce_model.replace(vocab_size=len(vocab), max_positions=max(cfg.ce_model.max_positions, cfg.max_len))

    # 3. BM25 hard negatives on the training corpus
    ex_path = out / "train_examples.jsonl"

    def mine():
        ex = mine_examples(train_ds, cfg.n_neg, cfg.window, seed)
        save_examples(ex_path, ex, hdr)
        return ex

    examples = st.run("mine-negatives", [ex_path], mine, lambda: load_examples(ex_path))

    # 4. toy cross encoder
    ce_path = out / "ce.ntc"

    def train_ce():
        w = init_random(model_cfg, seed + 11, CE)
        pairs = ce_pairs(examples, cfg.ce_n_neg)
        tc = replace(cfg.ce_train, seed=seed + 12, max_len=cfg.max_len)
        w, curve = train(w, CE_BINARY, pairs, tc, vocab)
        write_loss_curve(curve, out / "ce_loss.csv", hdr)
        checkpoint.save(w, ce_path, str(vocab_path.name), {"header": hdr})
        return w

    ce = st.run("train-ce", [ce_path], train_ce, lambda: checkpoint.load(ce_path)[0])

    # 5. dual encoders: baseline (all CE layers), DE-2 CE (infused), DE-2 Rand
    de_tc = replace(cfg.de_train, max_len=cfg.max_len, n_neg=cfg.n_neg)
    inits = {
        BASELINE: lambda: checkpoint.infuse(ce, model_cfg.num_layers, model_cfg.num_layers, seed + 21),
        DE2_RAND: lambda: init_random(model_cfg.replace(num_layers=cfg.de_layers), seed + 22, DE),
        DE2_CE: lambda: checkpoint.infuse(ce, cfg.de_layers, cfg.k_copy, seed + 23),
    }
    # the dual encoders see a (smaller) prefix of the mined examples
    de_examples = examples[: cfg.de_examples] if cfg.de_examples else examples
    des: dict[str, EncoderWeights] = {}
    for name, init in inits.items():
        path = out / f"{name}.ntc"

        def train_de(init=init, name=name, path=path):
            w = init()
            w, curve = train(w, DE_MNRL, de_examples, replace(de_tc, seed=seed + 31), vocab)
            write_loss_curve(curve, out / f"{name}_loss.csv", hdr)
            checkpoint.save(w, path, str(vocab_path.name), {"header": hdr})
            return w

        des[name] = st.run(f"train-de[{name}]", [path], train_de, lambda path=path: checkpoint.load(path)[0])

    # 6. layer sweeps (CE self-paired, every DE single-encoded)
    report = EvalReport(k=cfg.k)
    sweep_models = {"CE": (ce, CE), **{n: (w, DE) for n, w in des.items()}}
    for name, (w, mode) in sweep_models.items():
        path = out / f"sweep_{name}.csv"

        def sweep(w=w, mode=mode, path=path):
            rows = []
            for ds_name, ds in datasets.items():
                for r in layer_sweep(w, vocab, _sample(ds, cfg.sweep_sample, seed), mode, cfg.k, cfg.max_len):
                    rows.append((ds_name, r))
            write_sweep(path, rows, cfg.k, hdr)
            return rows

        report.sweeps[name] = st.run(f"sweep-layers[{name}]", [path], sweep)

    # 7. retrieve and rerank
    rank_dir = out / "rankings"
    rank_dir.mkdir(exist_ok=True)
    for ds_name, ds in datasets.items():

        def evaluate(ds=ds, ds_name=ds_name):
            doc_ids = ds.doc_ids
            queries = ds.judged_queries()
            qids = list(queries)
            depth = max(cfg.rerank_depth, cfg.k)
            retrieved = {}
            for name in MODELS:
                w = des[name]
                emb = embed_texts(w, vocab, [ds.corpus[d] for d in doc_ids], max_len=cfg.max_len)[0]
                index = EmbeddingIndex(doc_ids, normalize_rows(emb, doc_ids), {"model": name, "layer": w.config.num_layers})
                qemb = embed_texts(w, vocab, [queries[q] for q in qids], max_len=cfg.max_len)[0]
                retrieved[name] = search_many(index, qemb, depth)
            # score each (query, doc) pair once, whichever models retrieved it
            pairs = sorted({(q, d) for res in retrieved.values() for q, r in zip(qids, res) for d in r.ids[: cfg.rerank_depth]})
            scores = ce_score_batch(ce, vocab, [(queries[q], ds.corpus[d]) for q, d in pairs], cfg.max_len, batch_size=256)
            lookup = dict(zip(pairs, scores.tolist()))
            results = {}
            for name in MODELS:
                reranked = [
                    rerank(r, lambda ids, q=q: np.array([lookup[(q, d)] for d in ids]), cfg.rerank_depth)
                    for q, r in zip(qids, retrieved[name])
                ]
                write_results_tsv(rank_dir / f"{ds_name}__{name}__retrieve.tsv", zip(qids, retrieved[name]), hdr)
                write_results_tsv(rank_dir / f"{ds_name}__{name}__rerank.tsv", zip(qids, reranked), hdr)
                results[name] = (dict(zip(qids, retrieved[name])), dict(zip(qids, reranked)))
            return results

        results = st.run(f"search+rerank[{ds_name}]", [], evaluate)
        for name in MODELS:
            for stage, res in zip((RETRIEVED, RERANKED), results[name]):
                report.rows.append(ReportRow(
                    ds_name, name, stage, des[name].config.num_layers,
                    hits_at_k(res, ds.qrels, cfg.k), mrr_at_k(res, ds.qrels, cfg.k),
                ))

    # 8. significance over per-dataset vectors
    comparisons = [(DE2_CE, DE2_RAND, RETRIEVED), (BASELINE, DE2_CE, RETRIEVED), (BASELINE, DE2_CE, RERANKED)]
    for a, b, stage in comparisons:
        for which in ("hits", "mrr"):
            row = {"comparison": f"{a} vs {b} ({stage})", "metric": f"{which}@{cfg.k}"}
            try:
                tt = paired_t_test(report.vector(a, stage, which), report.vector(b, stage, which))
                row.update(t=tt.t, p=tt.p, n=tt.n)
            except DegenerateInputError as exc:
                row.update(n=len(datasets), note=str(exc))
            report.significance.append(row)
    # early-layer signal: CE vs baseline DE at hidden-state index 0, per dataset
    ce0 = [r.hits for _, r in report.sweeps["CE"] if r.layer == 0]
    de0 = [r.hits for _, r in report.sweeps[BASELINE] if r.layer == 0]
    row = {"comparison": "CE vs Baseline (layer 0 sweep)", "metric": f"hits@{cfg.k}"}
    try:
        tt = paired_t_test(ce0, de0)
        row.update(t=tt.t, p=tt.p, n=tt.n)
    except DegenerateInputError as exc:
        row.update(n=len(ce0), note=str(exc))
    report.significance.append(row)
    write_significance(out / "significance.csv", report.significance, hdr)
    gaps = baseline_gaps(report, BASELINE, DE2_CE, RERANKED)
    _write_gaps(out / "baseline_gap.csv", gaps, hdr)

    # 9. timing (not part of the deterministic artifacts)
    bench_results: dict[str, BenchResult] = {}
    if cfg.bench:
        sentences = [t for ds in datasets.values() for t in ds.corpus.values()][: cfg.bench_sentences]
        for name in MODELS:
            bench_results[name] = time_embedding(des[name], vocab, sentences, runs=cfg.bench_runs, model_id=name, max_len=cfg.max_len)
        sp = speedup(bench_results[BASELINE], bench_results[DE2_CE])
        for r in report.rows:
            if r.model == DE2_CE:
                r.speedup = sp
        with open(out / "bench.csv", "w") as fh:
            fh.write(f"# {hdr}\nmodel,corpus_size,batch_size,threads,median_seconds,sentences_per_sec,runs\n")
            for name, b in bench_results.items():
                runs = " ".join(f"{s:.6f}" for s in b.run_seconds)
                fh.write(f"{name},{b.corpus_size},{b.batch_size},{b.threads},{b.median_seconds:.6f},{b.sentences_per_sec:.2f},{runs}\n")
    write_report(report, out / "report.csv", hdr)
    return PipelineResult(out, report, bench_results)


def _write_gaps(path: Path, rows: list[dict], hdr: str) -> None:
    cols = ["dataset", "stage", "metric", "baseline", "candidate", "within_0.01", "within_1pct"]
    with open(path, "w") as fh:
        fh.write(f"# {hdr}\n" + ",".join(cols) + "\n")
        for r in rows:
            fh.write(",".join(repr(r[c]) if isinstance(r[c], float) else str(r[c]) for c in cols) + "\n")
