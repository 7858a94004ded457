"""Command-line surface for the ranking lab.

    $ ranklab build-vocab corpus.tsv --size 8000 --out vocab.txt
    $ ranklab gen-synthetic --out data/synth --positions 0,0,1 --seed 7
    $ ranklab train exp.toml --model maxp --seed 0 --out runs/maxp0
    $ ranklab evaluate --qrels qrels.txt --run run.txt --compare baseline.run
    $ ranklab analyze-positions --vocab vocab.txt --docs docs.tsv --passages passages.tsv \\
          --qrels qrels.txt --passage-qrels passage_qrels.txt --out positions/
    $ ranklab sweep exp.toml --run-dir runs/truncation
    $ ranklab report runs/truncation
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

from ranklab import __version__
from ranklab._config import configure, get_config, load_toml, take
from ranklab.corpus import read_tsv
from ranklab.evaluation import (
    DEFAULT_METRICS,
    evaluate_run,
    paired_significance,
    read_qrels,
    read_run,
)
from ranklab.exceptions import AnalysisError
from ranklab.experiment import load_experiment, rebuild_report, run_experiment, train_single
from ranklab.position_analysis import analyze_positions, estimate_ceiling, format_position_table
from ranklab.synthetic import SyntheticSpec, generate_synthetic
from ranklab.tokenize import build_vocab, load_vocab, save_vocab


def _print_json(obj: object) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def _print_table(rows: list[dict], cols: list[tuple[str, str, int]]) -> None:
    """Render ``rows`` as a fixed-width table. ``cols`` = (header, key, width)."""
    header = "  ".join(f"{h:<{w}}" for h, _, w in cols)
    print(header)
    for r in rows:
        print("  ".join(f"{str(r.get(k, '')):<{w}}" for _, k, w in cols))


def _csv(value: str) -> list[str]:
    return [v.strip() for v in value.split(",") if v.strip()]


# ────────────────────────── data ──────────────────────────


def cmd_build_vocab(args: argparse.Namespace) -> int:
    texts: list[str] = []
    for path in args.corpus:
        texts.extend(read_tsv(path).values())
    vocab = build_vocab(texts, args.size, continuation=args.continuation)
    save_vocab(vocab, args.out)
    print(f"{len(vocab)} tokens -> {args.out}")
    return 0


def _synthetic_spec(args: argparse.Namespace) -> SyntheticSpec:
    defaults = asdict(SyntheticSpec())
    defaults["positions"] = list(defaults["positions"])
    table: dict = {}
    if args.config:
        raw = load_toml(args.config)
        table = dict(raw.get("synthetic", {}))
    values = take(table, "synthetic", defaults, path=args.config)
    overrides = {
        "num_queries": args.queries,
        "docs_per_query": args.docs_per_query,
        "doc_len_min": args.doc_len_min,
        "doc_len_max": args.doc_len_max,
        "passage_len": args.passage_len,
        "pattern_len": args.pattern_len,
        "chunk_size": args.chunk_size,
        "vocab_size": args.vocab_size,
        "test_fraction": args.test_fraction,
        "seed": args.seed,
    }
    values.update({k: v for k, v in overrides.items() if v is not None})
    if args.positions:
        values["positions"] = [float(p) for p in _csv(args.positions)]
    values["positions"] = tuple(values["positions"])
    return SyntheticSpec(**values)


def cmd_gen_synthetic(args: argparse.Namespace) -> int:
    corpus = generate_synthetic(_synthetic_spec(args))
    paths = corpus.write(args.out)
    _print_json({role: str(p) for role, p in paths.items()})
    return 0


# ────────────────────────── models ──────────────────────────


def cmd_train(args: argparse.Namespace) -> int:
    config = load_experiment(args.config)
    seed = args.seed if args.seed is not None else config.seeds[0]
    record = train_single(config, args.model, seed, args.out, init_checkpoint=args.init_checkpoint)
    means = {m: _mean(v.values()) for m, v in record["per_query"].items()}
    _print_json({"model": record["model"], "seed": seed, "steps": record["steps"],
                 "final_loss": record["final_loss"], "metrics": means, "out": str(args.out)})
    return 0


def _mean(values) -> float:
    values = list(values)
    return sum(values) / len(values) if values else 0.0


def cmd_evaluate(args: argparse.Namespace) -> int:
    qrels = read_qrels(args.qrels)
    metrics = _csv(args.metrics) if args.metrics else list(DEFAULT_METRICS)
    primary = evaluate_run(read_run(args.run), qrels, metrics)
    other = evaluate_run(read_run(args.compare), qrels, metrics) if args.compare else None
    rows = []
    for m in metrics:
        row = {"metric": m, "value": f"{primary.mean(m):.4f}",
               "queries": len(primary.per_query[m])}
        if other is not None:
            shared = sorted(set(primary.per_query[m]) & set(other.per_query[m]))
            p, sig = paired_significance([primary.per_query[m][q] for q in shared],
                                         [other.per_query[m][q] for q in shared], args.alpha)
            row.update({"compare": f"{other.mean(m):.4f}", "p_value": f"{p:.4g}",
                        "significant": "yes" if sig else "no"})
        rows.append(row)
    if args.json:
        _print_json({"rows": rows, "excluded": primary.excluded})
        return 0
    cols = [("METRIC", "metric", 10), ("VALUE", "value", 8), ("QUERIES", "queries", 8)]
    if other is not None:
        cols += [("COMPARE", "compare", 8), ("P", "p_value", 10), ("SIG", "significant", 4)]
    _print_table(rows, cols)
    if primary.excluded:
        print(f"excluded {len(primary.excluded)} query(s) without relevant documents",
              file=sys.stderr)
    return 0


# ────────────────────────── analysis ──────────────────────────


def cmd_analyze_positions(args: argparse.Namespace) -> int:
    vocab = load_vocab(args.vocab)
    report, _ = analyze_positions(
        vocab,
        read_tsv(args.docs),
        read_tsv(args.passages),
        read_qrels(args.qrels),
        read_qrels(args.passage_qrels),
        first_only=not args.all_passages,
        chunk_size=args.chunk_size,
        max_chunks=args.max_chunks,
        out_dir=args.out,
    )
    sys.stdout.write(format_position_table(report.start, report.end))
    print(f"match rate: {report.matched}/{report.attempted} ({100 * report.match_rate:.1f}%)")
    try:
        factor = estimate_ceiling(report.end, report.start, args.max_chunks)
    except AnalysisError as e:
        print(f"no ceiling estimate: {e}", file=sys.stderr)
    else:
        print(f"ceiling with {args.max_chunks} chunks: {factor:.3f} x first-chunk ceiling")
    return 0


# ────────────────────────── experiments ──────────────────────────


def cmd_sweep(args: argparse.Namespace) -> int:
    config = load_experiment(args.config)
    result = run_experiment(config, args.run_dir)
    print(f"{len(result.results)} job(s) complete -> {result.run_dir}")
    sys.stdout.write((result.run_dir / "report.tsv").read_text())
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    rebuild_report(args.run_dir)
    sys.stdout.write((Path(args.run_dir) / "report.tsv").read_text())
    return 0


def cmd_config(_: argparse.Namespace) -> int:
    """Show the resolved runtime settings."""
    cfg = get_config()
    _print_json({"verbose": cfg.verbose, "workers": cfg.workers, "run_root": str(cfg.run_root)})
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="ranklab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"ranklab {__version__}")
    parser.add_argument("--quiet", action="store_true", help="Silence progress messages.")
    parser.add_argument("--workers", type=int, help="Parallel job workers (overrides "
                                                    "RANKLAB_WORKERS).")
    parser.add_argument("--run-root", help="Default parent of run directories.")
    subs = parser.add_subparsers(dest="cmd")

    def _cmd_help(_a: argparse.Namespace) -> int:
        parser.print_help()
        return 0

    bv = subs.add_parser("build-vocab", help="Train a subword vocabulary on TSV corpora.")
    bv.add_argument("corpus", nargs="+", help="id<TAB>text files.")
    bv.add_argument("--size", type=int, default=8000, help="Maximum vocab size (default 8000).")
    bv.add_argument("--out", required=True, help="Vocab file to write.")
    bv.add_argument("--continuation", default="", help="Prefix for word-internal pieces.")
    bv.set_defaults(func=cmd_build_vocab)

    gs = subs.add_parser("gen-synthetic", help="Generate a corpus with planted relevance.")
    gs.add_argument("--out", required=True, help="Output directory.")
    gs.add_argument("--config", help="TOML file with a [synthetic] table.")
    gs.add_argument("--positions", help="Comma-separated chunk shares, e.g. 0.71,0.15,0.06,0.08.")
    gs.add_argument("--queries", type=int, help="Number of queries.")
    gs.add_argument("--docs-per-query", type=int)
    gs.add_argument("--doc-len-min", type=int)
    gs.add_argument("--doc-len-max", type=int)
    gs.add_argument("--passage-len", type=int)
    gs.add_argument("--pattern-len", type=int)
    gs.add_argument("--chunk-size", type=int)
    gs.add_argument("--vocab-size", type=int)
    gs.add_argument("--test-fraction", type=float)
    gs.add_argument("--seed", type=int)
    gs.set_defaults(func=cmd_gen_synthetic)

    tr = subs.add_parser("train", help="Train and evaluate one configured model.")
    tr.add_argument("config", help="Experiment TOML file.")
    tr.add_argument("--model", required=True, help="Name of a [models.<name>] table.")
    tr.add_argument("--seed", type=int, help="Seed (default: first configured seed).")
    tr.add_argument("--out", required=True, help="Output directory.")
    tr.add_argument("--init-checkpoint", help="Start from this checkpoint (fine-tuning).")
    tr.set_defaults(func=cmd_train)

    ev = subs.add_parser("evaluate", help="Score a TREC run file against qrels.")
    ev.add_argument("--qrels", required=True)
    ev.add_argument("--run", required=True)
    ev.add_argument("--metrics", help="Comma-separated, e.g. mrr@10,ndcg@20,map,recall@100.")
    ev.add_argument("--compare", help="Second run for a paired t-test.")
    ev.add_argument("--alpha", type=float, default=0.05, help="Significance level (default 0.05).")
    ev.add_argument("--json", action="store_true", help="JSON output.")
    ev.set_defaults(func=cmd_evaluate)

    ap = subs.add_parser("analyze-positions", help="Locate relevant passages inside documents.")
    ap.add_argument("--vocab", required=True)
    ap.add_argument("--docs", required=True)
    ap.add_argument("--passages", required=True)
    ap.add_argument("--qrels", required=True, help="Document qrels.")
    ap.add_argument("--passage-qrels", required=True, help="Passage qrels (query -> passage).")
    ap.add_argument("--out", required=True, help="Output directory.")
    ap.add_argument("--chunk-size", type=int, default=477, help="Tokens per chunk (default 477).")
    ap.add_argument("--max-chunks", type=int, default=3, help="Chunks for the ceiling estimate.")
    ap.add_argument("--all-passages", action="store_true",
                    help="Count every matched passage, not only the first per document.")
    ap.set_defaults(func=cmd_analyze_positions)

    sw = subs.add_parser("sweep", help="Run an experiment: all cells, models and seeds.")
    sw.add_argument("config", help="Experiment TOML file.")
    sw.add_argument("--run-dir", help="Run directory (default: <run-root>/<name>).")
    sw.set_defaults(func=cmd_sweep)

    rp = subs.add_parser("report", help="Rebuild report tables of a run directory.")
    rp.add_argument("run_dir")
    rp.set_defaults(func=cmd_report)

    subs.add_parser("config", help="Show resolved runtime settings.").set_defaults(func=cmd_config)
    subs.add_parser("help", help="Show this help message.").set_defaults(func=_cmd_help)

    args = parser.parse_args(argv)

    # Bare `ranklab` prints help instead of erroring.
    if not getattr(args, "func", None):
        parser.print_help()
        return 0

    try:
        if args.quiet or args.workers is not None or args.run_root:
            configure(verbose=False if args.quiet else None, workers=args.workers,
                      run_root=args.run_root)
        return args.func(args)
    except KeyboardInterrupt:
        return 130
    except Exception as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
