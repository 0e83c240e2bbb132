from __future__ import annotations

from dataclasses import replace
from pathlib import Path

import pytest

from ceinfuse.checkpoint import file_digest
from ceinfuse.evaluation import read_report
from ceinfuse.pipeline import MODELS, PipelineError, dump_config, load_config, run_pipeline
from ceinfuse.retrieval import RERANKED, RETRIEVED

from conftest import tiny_pipeline_config


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    return run_pipeline(tiny_pipeline_config(tmp_path_factory.mktemp("run"), bench=True))


class TestRun:
    def test_three_models_two_stages(self, run):
        rows = [(r.model, r.stage) for r in run.report.rows if r.dataset == "a"]
        assert sorted(rows) == sorted((m, s) for m in MODELS for s in (RETRIEVED, RERANKED))

    def test_report_file_matches(self, run):
        assert read_report(run.out_dir / "report.csv").rows == run.report.rows

    def test_every_emitted_file_has_header(self, run):
        hdr = f"# seed=0 config={tiny_pipeline_config('x', bench=True).config_hash()}"
        files = [p for p in Path(run.out_dir).rglob("*") if p.is_file() and p.suffix in (".csv", ".tsv", ".jsonl", ".meta", ".cfg")]
        assert files
        for p in files:
            assert p.read_text().splitlines()[0] == hdr, p

    def test_significance_rows(self, run):
        assert all(row["n"] == 2 for row in run.report.significance)
        text = (run.out_dir / "significance.csv").read_text()
        assert "DE-2-CE vs DE-2-Rand (retrieved)" in text

    def test_sweeps_cover_every_layer(self, run):
        assert sorted({r.layer for _, r in run.report.sweeps["CE"]}) == [0, 1, 2]
        assert sorted({r.layer for _, r in run.report.sweeps["DE-2-CE"]}) == [0, 1, 2]

    def test_speedup_column(self, run):
        sp = [r.speedup for r in run.report.rows if r.model == "DE-2-CE"]
        assert sp and all(s is not None and s > 0 for s in sp)
        assert (run.out_dir / "bench.csv").exists()

    def test_resume_skips_finished_stages(self, run):
        before = file_digest(run.out_dir / "ce.ntc")
        again = run_pipeline(tiny_pipeline_config(run.out_dir, bench=True))
        assert file_digest(run.out_dir / "ce.ntc") == before
        assert [(r.model, r.hits) for r in again.report.rows] == [(r.model, r.hits) for r in run.report.rows]


class TestDeterminism:
    def test_identical_artifacts(self, tmp_path):
        a = run_pipeline(tiny_pipeline_config(tmp_path / "a"))
        b = run_pipeline(tiny_pipeline_config(tmp_path / "b"))
        fa = sorted(p.relative_to(a.out_dir) for p in Path(a.out_dir).rglob("*") if p.is_file())
        fb = sorted(p.relative_to(b.out_dir) for p in Path(b.out_dir).rglob("*") if p.is_file())
        assert fa == fb
        for rel in fa:
            assert (a.out_dir / rel).read_bytes() == (b.out_dir / rel).read_bytes(), rel


class TestConfig:
    def test_ini_round_trip(self, tmp_path):
        cfg = tiny_pipeline_config(tmp_path / "o", seed=5)
        dump_config(cfg, tmp_path / "c.ini")
        back = load_config(tmp_path / "c.ini")
        assert back.config_hash() == cfg.config_hash() and back.seed == 5

    def test_unknown_key(self, tmp_path):
        (tmp_path / "c.ini").write_text("[pipeline]\nbogus = 1\n")
        with pytest.raises(ValueError, match="bogus"):
            load_config(tmp_path / "c.ini")

    def test_stage_failure_names_stage(self, tmp_path):
        cfg = replace(tiny_pipeline_config(tmp_path / "o"), de_train=replace(tiny_pipeline_config("x").de_train, batch_size=10_000))
        with pytest.raises(PipelineError, match="train-de"):
            run_pipeline(cfg)
