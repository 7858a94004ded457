"""Experiment orchestration: configs, multi-seed jobs, sweeps and reports.

A run directory looks like::

    <run_dir>/
      config.toml                      resolved snapshot; enough to re-run
      cells/<cell>/<model>/seed<k>/    model.ckpt, train_log.jsonl, run.txt, result.json
      report.tsv  significance.tsv  report.json
      failures.json                    only when a job failed

Every (cell, model, seed) triple is an independent job; jobs go through
:func:`ranklab._jobs.map_jobs` and results are assembled in a fixed order.
"""

from __future__ import annotations

import json
import math
import string
from collections.abc import Mapping, Sequence
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from ranklab._config import dump_toml, get_config, load_toml, take, write_atomic
from ranklab._jobs import map_jobs
from ranklab._log import log
from ranklab.aggregators import DEFAULT_KERNELS, AggregatorConfig
from ranklab.chunking import GREEDY, SLIDING, ChunkingConfig
from ranklab.corpus import read_tsv, tokenize_all
from ranklab.encoder import AttentionPattern, EncoderConfig
from ranklab.evaluation import (
    DEFAULT_METRICS,
    MetricReport,
    RankedList,
    aligned,
    build_metric_report,
    evaluate_run,
    paired_significance,
    parse_metric,
    read_qrels,
    read_run,
    write_run,
)
from ranklab.exceptions import ConfigError, EvaluationError, ExperimentFailed, RemoteJobError
from ranklab.ranker import ModelSpec, Ranker
from ranklab.tensor import load_checkpoint
from ranklab.tokenize import load_vocab
from ranklab.training import CandidateList, TrainConfig, TrainingData, train

EXPERIMENT_DEFAULTS = {
    "name": "experiment",
    "seeds": [0, 1, 2],
    "metrics": list(DEFAULT_METRICS),
    "baselines": [],
    "alpha": 0.05,
    "pretrained": "",
}
DATA_DEFAULTS = {
    "vocab": "",
    "docs": "",
    "train_queries": "",
    "test_queries": "",
    "qrels": "",
    "train_candidates": "",
    "test_candidates": "",
}
_ATTENTION_KEYS = {
    "attention": "kind",
    "local_window": "local_window",
    "global_tokens": "global_tokens",
    "scatter": "scatter",
    "random_k": "random_k",
    "dilation": "dilation",
    "attention_seed": "seed",
}
MODEL_DEFAULTS = {
    "kind": "",
    "aggregator_layers": 2,
    "aggregator_heads": 2,
    "aggregator_dim": None,
    "feed_query": False,
    "init": "random",
    "scheme": None,
    "max_seq": None,
    **{key: None for key in _ATTENTION_KEYS},
}
# Model tables may override these [encoder] keys; unset keys inherit the experiment encoder.
MODEL_ENCODER_KEYS = ("max_seq", *_ATTENTION_KEYS)
SWEEP_DEFAULTS = {"max_chunks": [], "window_stride": []}


def _dataclass_defaults(cls) -> dict:
    return {k: v for k, v in asdict(cls()).items() if not isinstance(v, dict)}


@dataclass(frozen=True)
class DataPaths:
    vocab: Path
    docs: Path
    train_queries: Path
    test_queries: Path
    qrels: Path
    train_candidates: Path
    test_candidates: Path


@dataclass(frozen=True)
class Cell:
    """One sweep setting; ``base`` when no sweep is configured."""

    name: str
    chunking: ChunkingConfig


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    seeds: tuple[int, ...]
    metrics: tuple[str, ...]
    baselines: tuple[str, ...]
    alpha: float
    data: DataPaths
    chunking: ChunkingConfig
    encoder: EncoderConfig
    training: TrainConfig
    models: dict[str, dict]
    sweep_max_chunks: tuple[int, ...] = ()
    sweep_window_stride: tuple[tuple[int, int], ...] = ()
    pretrained: Path | None = None
    source: Path | None = None

    def __post_init__(self) -> None:
        if not self.seeds:
            raise ConfigError("[experiment] seeds must not be empty", key="experiment.seeds")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("[experiment] seeds must be distinct", key="experiment.seeds")
        if not self.models:
            raise ConfigError("at least one [models.<name>] table is required", key="models")
        for b in self.baselines:
            if b not in self.models:
                raise ConfigError(f"[experiment] baseline {b!r} is not a configured model",
                                  key="experiment.baselines")
        if len(self.baselines) > len(string.ascii_lowercase):
            raise ConfigError("too many baselines", key="experiment.baselines")
        if self.sweep_max_chunks and self.sweep_window_stride:
            raise ConfigError("[sweep] accepts max_chunks or window_stride, not both", key="sweep")
        for m in self.metrics:
            try:
                parse_metric(m)
            except EvaluationError as e:
                raise ConfigError(str(e), key="experiment.metrics") from None

    # ── grid ──

    def cells(self) -> list[Cell]:
        if self.sweep_max_chunks:
            return [Cell(f"max_chunks={k}", replace(self.chunking, max_chunks=k))
                    for k in self.sweep_max_chunks]
        if self.sweep_window_stride:
            return [Cell(f"window={w},stride={s}",
                         replace(self.chunking, scheme=SLIDING, window=w, stride=s))
                    for w, s in self.sweep_window_stride]
        return [Cell("base", self.chunking)]

    def model_spec(self, name: str, cell: Cell) -> ModelSpec:
        table = self.models[name]
        aggregator = AggregatorConfig(
            kind=table["kind"],
            aggregator_layers=table["aggregator_layers"],
            aggregator_heads=table["aggregator_heads"],
            aggregator_dim=table["aggregator_dim"],
            feed_query=table["feed_query"],
            init=table["init"],
            kernels=DEFAULT_KERNELS,
        )
        chunking = cell.chunking
        if table["scheme"] is not None:
            chunking = replace(chunking, scheme=table["scheme"])
        return ModelSpec(name, aggregator, self.model_encoder(name), chunking)

    def model_encoder(self, name: str) -> EncoderConfig:
        """The experiment encoder with the model table's overrides applied."""
        return _override_encoder(self.encoder, self.models[name])

    # ── snapshot ──

    def to_toml_dict(self) -> dict:
        attention = asdict(self.encoder.attention)
        encoder = {k: v for k, v in asdict(self.encoder).items() if k != "attention"}
        encoder.update({key: attention[field_] for key, field_ in _ATTENTION_KEYS.items()})
        sweep: dict = {}
        if self.sweep_max_chunks:
            sweep["max_chunks"] = list(self.sweep_max_chunks)
        if self.sweep_window_stride:
            sweep["window_stride"] = [list(p) for p in self.sweep_window_stride]
        out = {
            "experiment": {
                "name": self.name,
                "seeds": list(self.seeds),
                "metrics": list(self.metrics),
                "baselines": list(self.baselines),
                "alpha": self.alpha,
                "pretrained": str(self.pretrained) if self.pretrained else "",
            },
            "data": {k: str(v) for k, v in asdict(self.data).items()},
            "chunking": asdict(self.chunking),
            "encoder": encoder,
            "training": asdict(self.training),
            "models": {name: dict(table) for name, table in self.models.items()},
        }
        if sweep:
            out["sweep"] = sweep
        return out


def _override_encoder(encoder: EncoderConfig, table: Mapping) -> EncoderConfig:
    attention = {f: table[key] for key, f in _ATTENTION_KEYS.items() if table.get(key) is not None}
    if attention:
        encoder = replace(encoder, attention=replace(encoder.attention, **attention))
    if table.get("max_seq") is not None:
        encoder = replace(encoder, max_seq=table["max_seq"])
    return encoder


def load_experiment(path: str | Path, *, check_paths: bool = True) -> ExperimentConfig:
    """Parse an experiment TOML file. Relative data paths resolve against its directory."""
    p = Path(path)
    raw = load_toml(p)
    return experiment_from_dict(raw, base=p.parent, source=p, check_paths=check_paths)


def experiment_from_dict(
    raw: Mapping,
    *,
    base: Path = Path("."),
    source: Path | None = None,
    check_paths: bool = True,
) -> ExperimentConfig:
    where = str(source) if source else None
    known = {"experiment", "data", "chunking", "encoder", "training", "models", "sweep"}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(unknown)}", path=where,
                          key=unknown[0])
    exp = take(dict(raw.get("experiment", {})), "experiment", EXPERIMENT_DEFAULTS, path=where)
    data = take(dict(raw.get("data", {})), "data", DATA_DEFAULTS, path=where)
    chunking = take(dict(raw.get("chunking", {})), "chunking",
                    _dataclass_defaults(ChunkingConfig), path=where)
    enc_defaults = _dataclass_defaults(EncoderConfig)
    pattern_defaults = asdict(AttentionPattern())
    enc_defaults.update({key: pattern_defaults[f] for key, f in _ATTENTION_KEYS.items()})
    enc = take(dict(raw.get("encoder", {})), "encoder", enc_defaults, path=where)
    training = take(dict(raw.get("training", {})), "training",
                    _dataclass_defaults(TrainConfig), path=where)
    sweep = take(dict(raw.get("sweep", {})), "sweep", SWEEP_DEFAULTS, path=where)

    models: dict[str, dict] = {}
    for name, table in dict(raw.get("models", {})).items():
        if not isinstance(table, dict):
            raise ConfigError(f"[models.{name}] must be a table", path=where, key=f"models.{name}")
        merged = take(dict(table), f"models.{name}", MODEL_DEFAULTS, path=where)
        if not merged["kind"]:
            raise ConfigError(f"[models.{name}] kind is required", path=where,
                              key=f"models.{name}.kind")
        if merged["scheme"] not in (None, GREEDY, SLIDING):
            raise ConfigError(f"[models.{name}] scheme must be greedy or sliding",
                              path=where, key=f"models.{name}.scheme")
        overrides = {k: merged[k] for k in MODEL_ENCODER_KEYS if merged[k] is not None}
        take(overrides, f"models.{name}", {k: enc_defaults[k] for k in overrides}, path=where)
        models[name] = merged

    paths = {}
    for key, value in data.items():
        if not value:
            raise ConfigError(f"[data] {key} is required", path=where, key=f"data.{key}")
        resolved = (Path(value) if Path(value).is_absolute() else base / value).resolve()
        if check_paths and not resolved.exists():
            raise ConfigError(f"[data] {key}: {resolved} does not exist", path=where,
                              key=f"data.{key}")
        paths[key] = resolved
    pretrained = None
    if exp["pretrained"]:
        pretrained = Path(exp["pretrained"])
        if not pretrained.is_absolute():
            pretrained = (base / pretrained).resolve()
        if check_paths and not pretrained.exists():
            raise ConfigError(f"[experiment] pretrained: {pretrained} does not exist",
                              path=where, key="experiment.pretrained")

    pattern = AttentionPattern(**{f: enc.pop(key) for key, f in _ATTENTION_KEYS.items()})
    encoder = EncoderConfig(**enc, attention=pattern)
    for name, table in models.items():
        try:
            _override_encoder(encoder, table)
        except ConfigError as e:
            raise ConfigError(f"[models.{name}] {e}", path=where, key=f"models.{name}") from None
    window_stride = []
    for pair in sweep["window_stride"]:
        if not isinstance(pair, list) or len(pair) != 2:
            raise ConfigError("[sweep] window_stride entries must be [window, stride] pairs",
                              path=where, key="sweep.window_stride")
        window_stride.append((int(pair[0]), int(pair[1])))

    return ExperimentConfig(
        name=exp["name"],
        seeds=tuple(int(s) for s in exp["seeds"]),
        metrics=tuple(exp["metrics"]),
        baselines=tuple(exp["baselines"]),
        alpha=exp["alpha"],
        data=DataPaths(**paths),
        chunking=ChunkingConfig(**chunking),
        encoder=encoder,
        training=TrainConfig(**training),
        models=models,
        sweep_max_chunks=tuple(int(k) for k in sweep["max_chunks"]),
        sweep_window_stride=tuple(window_stride),
        pretrained=pretrained,
        source=source,
    )


# ────────────────────────── jobs ──────────────────────────


@dataclass(frozen=True)
class JobSpec:
    cell: str
    model: str
    seed: int
    spec: ModelSpec
    training: TrainConfig
    data: DataPaths
    metrics: tuple[str, ...]
    out_dir: Path
    pretrained: Path | None = None
    init_checkpoint: Path | None = None

    @property
    def label(self) -> str:
        return f"{self.cell}/{self.model}/seed{self.seed}"


@dataclass
class LoadedData:
    vocab: object
    train: TrainingData
    test_queries: dict
    test_candidates: dict[str, CandidateList]


def load_data(paths: DataPaths, top_k: int) -> LoadedData:
    vocab = load_vocab(paths.vocab)
    docs = tokenize_all(vocab, read_tsv(paths.docs))
    qrels = read_qrels(paths.qrels)
    train_q = tokenize_all(vocab, read_tsv(paths.train_queries))
    test_q = tokenize_all(vocab, read_tsv(paths.test_queries))
    train_c = {q: CandidateList.from_ranked(r, top_k)
               for q, r in read_run(paths.train_candidates).items()}
    test_c = {q: CandidateList.from_ranked(r, top_k)
              for q, r in read_run(paths.test_candidates).items()}
    return LoadedData(vocab, TrainingData(train_q, docs, qrels, train_c), test_q, test_c)


def rerank_queries(ranker: Ranker, data: LoadedData) -> dict[str, RankedList]:
    docs = data.train.docs
    run: dict[str, RankedList] = {}
    for qid in sorted(data.test_queries):
        cands = data.test_candidates.get(qid)
        if cands is None:
            continue
        run[qid] = ranker.rerank(qid, data.test_queries[qid], [(d, docs[d]) for d in cands.doc_ids])
    return run


def run_job(job: JobSpec) -> dict:
    """Train one model with one seed, rerank the test queries and evaluate them."""
    out = Path(job.out_dir)
    data = load_data(job.data, job.training.top_k)
    ranker = Ranker(job.spec, data.vocab)
    pretrained = load_checkpoint(job.pretrained) if job.pretrained else None
    ranker.initialize(job.seed, pretrained)
    result = train(ranker, data.train, job.training, init_checkpoint=job.init_checkpoint,
                   checkpoint_path=out / "model.ckpt", log_path=out / "train_log.jsonl")
    run = rerank_queries(ranker, data)
    write_run(out / "run.txt", run, tag=job.model)
    evaluation = evaluate_run(run, data.train.judgments, job.metrics)
    record = {
        "cell": job.cell,
        "model": job.model,
        "seed": job.seed,
        "steps": result.steps,
        "skipped": result.skipped,
        "final_loss": result.losses[-1] if result.losses else None,
        "per_query": evaluation.per_query,
        "excluded": evaluation.excluded,
    }
    write_atomic(out / "result.json", json.dumps(record, indent=2, sort_keys=True) + "\n")
    return record


def plan_jobs(config: ExperimentConfig, run_dir: Path) -> list[JobSpec]:
    jobs = []
    for cell in config.cells():
        for model in config.models:
            spec = config.model_spec(model, cell)
            for seed in config.seeds:
                jobs.append(JobSpec(
                    cell=cell.name,
                    model=model,
                    seed=seed,
                    spec=spec,
                    training=replace(config.training, seed=seed),
                    data=config.data,
                    metrics=config.metrics,
                    out_dir=run_dir / "cells" / cell.name / model / f"seed{seed}",
                    pretrained=config.pretrained,
                ))
    return jobs


@dataclass
class ExperimentResult:
    run_dir: Path
    results: list[dict]
    failures: list[dict] = field(default_factory=list)
    reports: dict = field(default_factory=dict)


def run_experiment(
    config: ExperimentConfig,
    run_dir: str | Path | None = None,
    workers: int | None = None,
) -> ExperimentResult:
    """Run every (cell, model, seed) job and emit the report.

    Failed jobs are listed in ``failures.json`` and raise :class:`ExperimentFailed`
    after the report over the successful jobs has been written.
    """
    root = Path(run_dir) if run_dir is not None else get_config().run_root / config.name
    root.mkdir(parents=True, exist_ok=True)
    write_atomic(root / "config.toml", dump_toml(config.to_toml_dict()))
    jobs = plan_jobs(config, root)
    log(f"{config.name}: {len(jobs)} job(s) -> {root}")

    outcomes = map_jobs(run_job, [(job,) for job in jobs], workers)
    results: list[dict] = []
    failures: list[dict] = []
    for job, outcome in zip(jobs, outcomes):
        if outcome.ok:
            results.append(outcome.value)
            continue
        err = outcome.error
        failures.append({
            "job": job.label,
            "type": err.remote_type if isinstance(err, RemoteJobError) else type(err).__name__,
            "message": str(err.args[0]) if err.args else str(err),
            "traceback": err.remote_traceback if isinstance(err, RemoteJobError) else "",
        })
        log(f"{job.label} failed: {failures[-1]['message']}")

    failures_path = root / "failures.json"
    if failures:
        write_atomic(failures_path, json.dumps(failures, indent=2) + "\n")
    else:
        failures_path.unlink(missing_ok=True)

    out = ExperimentResult(root, results, failures)
    if results:
        out.reports = emit_report(results, root, config.metrics, config.baselines, config.alpha)
    if failures:
        raise ExperimentFailed(
            f"{len(failures)} of {len(jobs)} job(s) failed; see {failures_path}",
            failures=failures, run_dir=str(root),
        )
    return out


def collect_results(run_dir: str | Path) -> list[dict]:
    """Every ``result.json`` under ``run_dir/cells`` in path order."""
    root = Path(run_dir)
    paths = sorted((root / "cells").glob("*/*/seed*/result.json"))
    return [json.loads(p.read_text()) for p in paths]


def rebuild_report(run_dir: str | Path) -> dict:
    """Recompute the report files of an existing run directory from its job results."""
    root = Path(run_dir)
    config = load_experiment(root / "config.toml", check_paths=False)
    results = collect_results(root)
    if not results:
        raise ConfigError(f"no job results under {root / 'cells'}")
    return emit_report(results, root, config.metrics, config.baselines, config.alpha)


# ────────────────────────── reports ──────────────────────────


def _group(results: Sequence[dict]) -> dict[str, dict[str, dict[int, dict]]]:
    grouped: dict[str, dict[str, dict[int, dict]]] = {}
    for r in results:
        grouped.setdefault(r["cell"], {}).setdefault(r["model"], {})[int(r["seed"])] = r
    return grouped


def baseline_letters(baselines: Sequence[str]) -> dict[str, str]:
    return {b: string.ascii_lowercase[i] for i, b in enumerate(baselines)}


def emit_report(
    results: Sequence[dict],
    out_dir: str | Path,
    metrics: Sequence[str],
    baselines: Sequence[str] = (),
    alpha: float = 0.05,
) -> dict:
    """Write ``report.tsv``, ``significance.tsv`` and ``report.json``.

    A value carries ``^`` plus one letter per baseline it differs from significantly,
    e.g. ``0.3412^ab``.
    """
    out = Path(out_dir)
    grouped = _group(results)
    letters = baseline_letters(baselines)
    reports: dict[str, dict[str, dict[str, MetricReport]]] = {}
    for cell, models in grouped.items():
        reports[cell] = {}
        for model, seeds in models.items():
            reports[cell][model] = {
                m: build_metric_report(m, {s: r["per_query"][m] for s, r in seeds.items()})
                for m in metrics
            }

    sig_rows = ["cell\tmetric\tmodel\tbaseline\tp_value\tsignificant"]
    markers: dict[tuple[str, str, str], str] = {}
    significance: list[dict] = []
    for cell in reports:
        for model in reports[cell]:
            for metric in metrics:
                marks = ""
                for base in baselines:
                    if base == model or base not in reports[cell]:
                        continue
                    a, b = aligned(reports[cell][model][metric], reports[cell][base][metric])
                    try:
                        p, sig = paired_significance(a, b, alpha)
                    except EvaluationError:
                        p, sig = math.nan, False
                    if sig:
                        marks += letters[base]
                    sig_rows.append(f"{cell}\t{metric}\t{model}\t{base}\t{p:.6g}\t{int(sig)}")
                    significance.append({"cell": cell, "metric": metric, "model": model,
                                         "baseline": base, "p_value": None if math.isnan(p) else p,
                                         "significant": sig})
                markers[(cell, model, metric)] = marks

    header = "cell\tmodel\tseeds\t" + "\t".join(metrics)
    rows = [header]
    summary: dict = {}
    for cell in reports:
        for model, by_metric in reports[cell].items():
            seeds = sorted(grouped[cell][model])
            cols = []
            for metric in metrics:
                value = f"{by_metric[metric].mean:.4f}"
                marks = markers[(cell, model, metric)]
                cols.append(f"{value}^{marks}" if marks else value)
            rows.append(f"{cell}\t{model}\t{len(seeds)}\t" + "\t".join(cols))
            summary.setdefault(cell, {})[model] = {
                metric: {
                    "mean": by_metric[metric].mean,
                    "per_seed_mean": {str(s): _mean(by_metric[metric].per_seed[s].values())
                                      for s in seeds},
                    "queries": len(by_metric[metric].seed_averaged),
                }
                for metric in metrics
            }
    legend = [f"# {letter} = {base}" for base, letter in letters.items()]
    write_atomic(out / "report.tsv", "\n".join(rows + legend) + "\n")
    write_atomic(out / "significance.tsv", "\n".join(sig_rows) + "\n")
    payload = {"metrics": list(metrics), "baselines": letters, "alpha": alpha,
               "cells": summary, "significance": significance}
    write_atomic(out / "report.json", json.dumps(payload, indent=2, sort_keys=True) + "\n")
    log(f"report written to {out / 'report.tsv'}")
    return reports


def _mean(values) -> float:
    values = list(values)
    return math.fsum(values) / len(values) if values else 0.0


# ────────────────────────── single-model helpers ──────────────────────────


def train_single(
    config: ExperimentConfig,
    model: str,
    seed: int,
    out_dir: str | Path,
    *,
    init_checkpoint: str | Path | None = None,
) -> dict:
    """One job outside the grid, e.g. a fine-tuning stage from ``init_checkpoint``."""
    if model not in config.models:
        raise ConfigError(f"unknown model {model!r} (configured: {', '.join(config.models)})")
    cell = config.cells()[0]
    job = JobSpec(
        cell=cell.name,
        model=model,
        seed=seed,
        spec=config.model_spec(model, cell),
        training=replace(config.training, seed=seed),
        data=config.data,
        metrics=config.metrics,
        out_dir=Path(out_dir),
        pretrained=config.pretrained,
        init_checkpoint=Path(init_checkpoint) if init_checkpoint else None,
    )
    return run_job(job)

