"""Tests for the CLI: argument parsing, output formats and exit codes.

Training-heavy commands run against stubbed experiment functions; data commands
run for real on small synthetic corpora under ``tmp_path``.
"""

from __future__ import annotations

import json
from types import SimpleNamespace

import pytest

import ranklab._cli as cli
import ranklab._config as cfg_mod
from ranklab._config import Config
from ranklab.evaluation import Judgments, RankedList, write_qrels, write_run
from ranklab.tokenize import load_vocab

SMALL_ARGS = ["--queries", "6", "--docs-per-query", "2", "--doc-len-min", "200",
              "--doc-len-max", "600", "--passage-len", "30", "--pattern-len", "3",
              "--chunk-size", "200", "--vocab-size", "300", "--seed", "4"]


@pytest.fixture(autouse=True)
def isolate_config(monkeypatch):
    for name in ("RANKLAB_VERBOSE", "RANKLAB_WORKERS", "RANKLAB_RUN_ROOT"):
        monkeypatch.delenv(name, raising=False)
    monkeypatch.setattr(cfg_mod, "_config", Config())
    yield


# ────────────────────────── general ──────────────────────────


def test_version_flag(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["--version"])
    assert exc.value.code == 0
    assert "ranklab" in capsys.readouterr().out


def test_bare_invocation_prints_help(capsys):
    assert cli.main([]) == 0
    assert "usage: ranklab" in capsys.readouterr().out


def test_config_reflects_global_flags(capsys, tmp_path):
    assert cli.main(["--workers", "3", "--run-root", str(tmp_path), "--quiet", "config"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out == {"verbose": False, "workers": 3, "run_root": str(tmp_path)}


def test_errors_exit_1_with_message(capsys, tmp_path):
    assert cli.main(["evaluate", "--qrels", str(tmp_path / "nope.txt"),
                     "--run", str(tmp_path / "nope.run")]) == 1
    assert capsys.readouterr().err.startswith("error: ")


# ────────────────────────── data ──────────────────────────


def test_build_vocab(tmp_path, capsys):
    corpus = tmp_path / "corpus.tsv"
    corpus.write_text("d1\tlow lower lowest\nd2\tnew newer newest\n")
    out = tmp_path / "vocab.txt"
    assert cli.main(["build-vocab", str(corpus), "--size", "300", "--out", str(out)]) == 0
    vocab = load_vocab(out)
    assert len(vocab) <= 300
    assert f"-> {out}" in capsys.readouterr().out


def test_gen_synthetic_flags(tmp_path, capsys):
    out = tmp_path / "synth"
    assert cli.main(["gen-synthetic", "--out", str(out), "--positions", "0.5,0.3,0.2",
                     *SMALL_ARGS]) == 0
    paths = json.loads(capsys.readouterr().out)
    assert set(paths) >= {"vocab", "docs", "qrels", "placements"}
    rows = (out / "placements.tsv").read_text().splitlines()[1:]
    assert len(rows) == 6
    assert all(int(r.split("\t")[-1]) in (1, 2, 3) for r in rows)


def test_gen_synthetic_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "synth.toml"
    cfg.write_text("[synthetic]\nnum_queries = 4\npositions = [1.0]\nseed = 9\n")
    assert cli.main(["gen-synthetic", "--config", str(cfg), "--out", str(tmp_path / "a"),
                     *SMALL_ARGS[2:], "--queries", "5"]) == 0
    rows = (tmp_path / "a" / "placements.tsv").read_text().splitlines()[1:]
    assert len(rows) == 5
    assert {r.split("\t")[-1] for r in rows} == {"1"}


def test_gen_synthetic_rejects_unknown_config_key(tmp_path, capsys):
    cfg = tmp_path / "synth.toml"
    cfg.write_text("[synthetic]\nqueries = 4\n")
    assert cli.main(["gen-synthetic", "--config", str(cfg), "--out", str(tmp_path)]) == 1
    assert "unknown key(s): queries" in capsys.readouterr().err


def test_gen_synthetic_infeasible_spec(tmp_path, capsys):
    assert cli.main(["gen-synthetic", "--out", str(tmp_path), "--passage-len", "600",
                     "--chunk-size", "477"]) == 1
    assert "infeasible placement" in capsys.readouterr().err


# ────────────────────────── evaluate ──────────────────────────


@pytest.fixture
def trec_files(tmp_path):
    qrels = Judgments({"q1": {"a": 1}, "q2": {"b": 1}, "q3": {"c": 1}, "q4": {"z": 0}})
    write_qrels(tmp_path / "qrels.txt", qrels)
    good = {q: RankedList.from_scores(q, [(rel, 2.0), ("x", 1.0)])
            for q, rel in (("q1", "a"), ("q2", "b"), ("q3", "c"), ("q4", "z"))}
    bad = {q: RankedList.from_scores(q, [(rel, 1.0), ("x", 2.0)])
           for q, rel in (("q1", "a"), ("q2", "b"), ("q3", "c"))}
    write_run(tmp_path / "good.run", good)
    write_run(tmp_path / "bad.run", bad)
    return tmp_path


def test_evaluate_table(trec_files, capsys):
    assert cli.main(["evaluate", "--qrels", str(trec_files / "qrels.txt"),
                     "--run", str(trec_files / "good.run"), "--metrics", "mrr@10,map"]) == 0
    captured = capsys.readouterr()
    lines = captured.out.splitlines()
    assert lines[0].split() == ["METRIC", "VALUE", "QUERIES"]
    assert lines[1].split() == ["mrr@10", "1.0000", "3"]
    assert "excluded 1 query(s)" in captured.err


def test_evaluate_compare_json(trec_files, capsys):
    assert cli.main(["evaluate", "--qrels", str(trec_files / "qrels.txt"),
                     "--run", str(trec_files / "good.run"), "--compare",
                     str(trec_files / "bad.run"), "--metrics", "mrr@10", "--json"]) == 0
    out = json.loads(capsys.readouterr().out)
    row = out["rows"][0]
    assert out["excluded"] == ["q4"]
    assert (row["value"], row["compare"]) == ("1.0000", "0.5000")
    # every query moves by exactly 0.5
    assert row["p_value"] == "0"
    assert row["significant"] == "yes"


# ────────────────────────── analysis ──────────────────────────


def test_analyze_positions(tmp_path, capsys):
    data = tmp_path / "synth"
    assert cli.main(["gen-synthetic", "--out", str(data), "--positions", "0.5,0.3,0.2",
                     *SMALL_ARGS]) == 0
    capsys.readouterr()
    out = tmp_path / "positions"
    assert cli.main(["analyze-positions", "--vocab", str(data / "vocab.txt"),
                     "--docs", str(data / "docs.tsv"), "--passages", str(data / "passages.tsv"),
                     "--qrels", str(data / "qrels.txt"),
                     "--passage-qrels", str(data / "passage_qrels.txt"),
                     "--out", str(out), "--chunk-size", "200"]) == 0
    stdout = capsys.readouterr().out
    assert stdout.startswith("chunk\tstart%\tend%")
    assert "match rate: 6/6 (100.0%)" in stdout
    assert (out / "summary.json").exists()


# ────────────────────────── experiments (stubbed) ──────────────────────────


def test_train_defaults_to_first_seed(monkeypatch, tmp_path, capsys):
    calls = {}

    def fake_train_single(config, model, seed, out_dir, *, init_checkpoint=None):
        calls.update(model=model, seed=seed, init=init_checkpoint)
        return {"model": model, "steps": 3, "final_loss": 0.25,
                "per_query": {"mrr@10": {"q1": 1.0, "q2": 0.0}}}

    monkeypatch.setattr(cli, "load_experiment", lambda path: SimpleNamespace(seeds=(7, 8)))
    monkeypatch.setattr(cli, "train_single", fake_train_single)
    assert cli.main(["train", "exp.toml", "--model", "maxp", "--out", str(tmp_path),
                     "--init-checkpoint", "stage1.ckpt"]) == 0
    assert calls == {"model": "maxp", "seed": 7, "init": "stage1.ckpt"}
    out = json.loads(capsys.readouterr().out)
    assert out["metrics"] == {"mrr@10": 0.5}
    assert out["steps"] == 3


def test_sweep_prints_report(monkeypatch, tmp_path, capsys):
    def fake_run(config, run_dir):
        (tmp_path / "report.tsv").write_text("cell\tmodel\tseeds\tmap\nbase\tm\t1\t0.5000\n")
        return SimpleNamespace(run_dir=tmp_path, results=[{}])

    monkeypatch.setattr(cli, "load_experiment", lambda path: object())
    monkeypatch.setattr(cli, "run_experiment", fake_run)
    assert cli.main(["sweep", "exp.toml", "--run-dir", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert out.splitlines()[0] == f"1 job(s) complete -> {tmp_path}"
    assert "base\tm\t1\t0.5000" in out


def test_report_rebuilds(monkeypatch, tmp_path, capsys):
    rebuilt = []

    def fake_rebuild(run_dir):
        rebuilt.append(run_dir)
        (tmp_path / "report.tsv").write_text("cell\tmodel\tseeds\tmap\n")

    monkeypatch.setattr(cli, "rebuild_report", fake_rebuild)
    assert cli.main(["report", str(tmp_path)]) == 0
    assert rebuilt == [str(tmp_path)]
    assert capsys.readouterr().out == "cell\tmodel\tseeds\tmap\n"
