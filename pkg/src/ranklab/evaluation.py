"""Ranking metrics, seed averaging and paired significance tests.

Rankings are ordered by descending score, ties broken by ascending doc id, so every
metric is independent of input file order. Unjudged documents count as grade 0.
"""

from __future__ import annotations

import math
import re
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from ranklab._config import write_atomic
from ranklab.exceptions import DataError, EvaluationError, NoRelevantDocuments

DEFAULT_METRICS = ("mrr@10", "ndcg@10", "ndcg@20", "map")
_METRIC = re.compile(r"^(mrr|ndcg|recall)@(\d+)$|^(map)$")


class Judgments:
    """Graded labels: ``{query_id: {doc_id: grade}}``."""

    def __init__(self, labels: Mapping[str, Mapping[str, int]] | None = None) -> None:
        self._labels: dict[str, dict[str, int]] = {}
        for qid, docs in (labels or {}).items():
            for did, grade in docs.items():
                self.add(qid, did, grade)

    def add(self, query_id: str, doc_id: str, grade: int) -> None:
        if grade < 0:
            raise EvaluationError(f"negative grade {grade} for ({query_id}, {doc_id})")
        self._labels.setdefault(query_id, {})[doc_id] = int(grade)

    def grade(self, query_id: str, doc_id: str) -> int:
        return self._labels.get(query_id, {}).get(doc_id, 0)

    def for_query(self, query_id: str) -> dict[str, int]:
        return dict(self._labels.get(query_id, {}))

    def relevant(self, query_id: str) -> set[str]:
        return {d for d, g in self._labels.get(query_id, {}).items() if g > 0}

    def has_positive(self, query_id: str) -> bool:
        return any(g > 0 for g in self._labels.get(query_id, {}).values())

    def queries(self) -> list[str]:
        return sorted(self._labels)

    def __contains__(self, query_id: str) -> bool:
        return query_id in self._labels

    def __len__(self) -> int:
        return len(self._labels)

    def items(self) -> Iterable[tuple[str, dict[str, int]]]:
        for qid in self.queries():
            yield qid, dict(self._labels[qid])


@dataclass(frozen=True)
class RankedList:
    query_id: str
    items: tuple[tuple[str, float], ...]

    def __post_init__(self) -> None:
        ids = [d for d, _ in self.items]
        if len(set(ids)) != len(ids):
            raise EvaluationError(f"duplicate doc ids in ranking for query {self.query_id!r}")

    @classmethod
    def from_scores(cls, query_id: str, scored: Iterable[tuple[str, float]]) -> RankedList:
        ordered = sorted(((d, float(s)) for d, s in scored), key=lambda x: (-x[1], x[0]))
        return cls(query_id, tuple(ordered))

    @property
    def doc_ids(self) -> list[str]:
        return [d for d, _ in self.items]

    def __len__(self) -> int:
        return len(self.items)


# ────────────────────────── per-query metrics ──────────────────────────


def mrr(ranked: RankedList, judgments: Judgments, cutoff: int = 10) -> float:
    if not ranked.items:
        raise EvaluationError(f"empty ranking for query {ranked.query_id!r}")
    for rank, doc_id in enumerate(ranked.doc_ids[:cutoff], start=1):
        if judgments.grade(ranked.query_id, doc_id) > 0:
            return 1.0 / rank
    return 0.0


def _dcg(grades: Iterable[int]) -> float:
    return sum((2.0 ** g - 1.0) / math.log2(rank + 1) for rank, g in enumerate(grades, start=1))


def ndcg(ranked: RankedList, judgments: Judgments, k: int = 10) -> float:
    qid = ranked.query_id
    if not judgments.has_positive(qid):
        raise NoRelevantDocuments(qid)
    gains = [judgments.grade(qid, d) for d in ranked.doc_ids[:k]]
    ideal = sorted(judgments.for_query(qid).values(), reverse=True)[:k]
    return _dcg(gains) / _dcg(ideal)


def average_precision(ranked: RankedList, judgments: Judgments) -> float:
    qid = ranked.query_id
    relevant = judgments.relevant(qid)
    if not relevant:
        raise NoRelevantDocuments(qid)
    hits = 0
    total = 0.0
    for rank, doc_id in enumerate(ranked.doc_ids, start=1):
        if doc_id in relevant:
            hits += 1
            total += hits / rank
    return total / len(relevant)


def recall(ranked: RankedList, judgments: Judgments, k: int = 100) -> float:
    relevant = judgments.relevant(ranked.query_id)
    if not relevant:
        raise NoRelevantDocuments(ranked.query_id)
    found = sum(1 for d in ranked.doc_ids[:k] if d in relevant)
    return found / len(relevant)


def parse_metric(name: str) -> tuple[str, int | None]:
    """``"ndcg@10"`` -> ``("ndcg", 10)``; ``"map"`` -> ``("map", None)``."""
    m = _METRIC.match(name.strip().lower())
    if not m:
        raise EvaluationError(f"unknown metric {name!r} (expected mrr@K, ndcg@K, recall@K or map)")
    if m.group(3):
        return "map", None
    cutoff = int(m.group(2))
    if cutoff < 1:
        raise EvaluationError(f"metric cutoff must be >= 1 (got {name!r})")
    return m.group(1), cutoff


def compute_metric(name: str, ranked: RankedList, judgments: Judgments) -> float:
    kind, cutoff = parse_metric(name)
    if kind == "mrr":
        return mrr(ranked, judgments, cutoff)
    if kind == "ndcg":
        return ndcg(ranked, judgments, cutoff)
    if kind == "recall":
        return recall(ranked, judgments, cutoff)
    return average_precision(ranked, judgments)


@dataclass
class RunEvaluation:
    per_query: dict[str, dict[str, float]]
    excluded: list[str] = field(default_factory=list)

    def mean(self, metric: str) -> float:
        values = list(self.per_query[metric].values())
        return math.fsum(values) / len(values) if values else 0.0


def evaluate_run(
    run: Mapping[str, RankedList], judgments: Judgments, metrics: Iterable[str] = DEFAULT_METRICS
) -> RunEvaluation:
    """Per-query values for each metric over queries in ``run``.

    Queries without any positive judgment are excluded from every metric and listed.
    """
    metrics = list(metrics)
    for name in metrics:
        parse_metric(name)
    out = RunEvaluation({name: {} for name in metrics})
    for qid in sorted(run):
        ranked = run[qid]
        if not judgments.has_positive(qid):
            out.excluded.append(qid)
            continue
        for name in metrics:
            out.per_query[name][qid] = compute_metric(name, ranked, judgments)
    return out


# ────────────────────────── seeds and significance ──────────────────────────


@dataclass
class MetricReport:
    metric: str
    per_seed: dict[int, dict[str, float]]
    seed_averaged: dict[str, float]
    mean: float

    @property
    def name(self) -> str:
        return parse_metric(self.metric)[0]

    @property
    def cutoff(self) -> int | None:
        return parse_metric(self.metric)[1]


def _average(values: list[float]) -> float:
    if all(v == values[0] for v in values):
        return values[0]
    return math.fsum(values) / len(values)


def build_metric_report(metric: str, per_seed: Mapping[int, Mapping[str, float]]) -> MetricReport:
    """Average per-query values over seeds, then over queries."""
    if not per_seed:
        raise EvaluationError(f"{metric}: no seeds to average")
    seeds = sorted(per_seed)
    queries = sorted(per_seed[seeds[0]])
    for s in seeds[1:]:
        if sorted(per_seed[s]) != queries:
            raise EvaluationError(f"{metric}: seed {s} evaluated a different query set")
    averaged = {q: _average([per_seed[s][q] for s in seeds]) for q in queries}
    mean = math.fsum(averaged.values()) / len(averaged) if averaged else 0.0
    return MetricReport(metric, {s: dict(per_seed[s]) for s in seeds}, averaged, mean)


def paired_significance(
    per_query_a: Iterable[float], per_query_b: Iterable[float], alpha: float = 0.05
) -> tuple[float, bool]:
    """Two-sided paired t-test. Returns ``(p_value, p_value < alpha)``."""
    a = np.asarray(list(per_query_a), dtype=np.float64)
    b = np.asarray(list(per_query_b), dtype=np.float64)
    if a.shape != b.shape:
        raise EvaluationError(f"length mismatch ({a.size} vs {b.size} per-query values)")
    if a.size < 2:
        raise EvaluationError("insufficient samples")
    diff = a - b
    if np.all(diff == diff[0]):
        # Zero-variance differences: t is 0 or unbounded.
        p_value = 1.0 if diff[0] == 0 else 0.0
    else:
        p_value = float(stats.ttest_rel(a, b).pvalue)
    return p_value, p_value < alpha


def aligned(report_a: MetricReport, report_b: MetricReport) -> tuple[list[float], list[float]]:
    """Seed-averaged per-query values of two reports over their shared queries."""
    shared = sorted(set(report_a.seed_averaged) & set(report_b.seed_averaged))
    return ([report_a.seed_averaged[q] for q in shared],
            [report_b.seed_averaged[q] for q in shared])


# ────────────────────────── TREC files ──────────────────────────


def read_qrels(path: str | Path) -> Judgments:
    """``qid 0 docid grade`` per line."""
    p = Path(path)
    judgments = Judgments()
    for lineno, raw in enumerate(_read_lines(p), start=1):
        parts = raw.split()
        if not parts:
            continue
        if len(parts) != 4:
            raise DataError(f"expected 4 fields, got {len(parts)}", path=str(p), line=lineno)
        qid, _, did, grade = parts
        try:
            value = int(grade)
        except ValueError:
            raise DataError(f"grade must be an integer (got {grade!r})",
                            path=str(p), line=lineno) from None
        if value < 0:
            raise DataError(f"negative grade {value}", path=str(p), line=lineno)
        judgments.add(qid, did, value)
    return judgments


def write_qrels(path: str | Path, judgments: Judgments) -> Path:
    lines = [f"{qid} 0 {did} {grade}\n"
             for qid, docs in judgments.items() for did, grade in sorted(docs.items())]
    return write_atomic(path, "".join(lines))


def read_run(path: str | Path) -> dict[str, RankedList]:
    """``qid Q0 docid rank score tag`` per line. File ranks are ignored; scores decide."""
    p = Path(path)
    scored: dict[str, dict[str, float]] = {}
    for lineno, raw in enumerate(_read_lines(p), start=1):
        parts = raw.split()
        if not parts:
            continue
        if len(parts) != 6:
            raise DataError(f"expected 6 fields, got {len(parts)}", path=str(p), line=lineno)
        qid, _, did, _, score, _ = parts
        try:
            value = float(score)
        except ValueError:
            raise DataError(f"score must be a number (got {score!r})",
                            path=str(p), line=lineno) from None
        docs = scored.setdefault(qid, {})
        if did in docs:
            raise DataError(f"duplicate doc {did!r} for query {qid!r}", path=str(p), line=lineno)
        docs[did] = value
    return {qid: RankedList.from_scores(qid, docs.items()) for qid, docs in scored.items()}


def format_run(run: Mapping[str, RankedList], tag: str = "ranklab") -> str:
    lines = []
    for qid in sorted(run):
        for rank, (did, score) in enumerate(run[qid].items, start=1):
            lines.append(f"{qid} Q0 {did} {rank} {float(score)!r} {tag}\n")
    return "".join(lines)


def write_run(path: str | Path, run: Mapping[str, RankedList], tag: str = "ranklab") -> Path:
    return write_atomic(path, format_run(run, tag))


def _read_lines(p: Path) -> list[str]:
    try:
        return p.read_text(encoding="utf-8").splitlines()
    except FileNotFoundError:
        raise DataError("file not found", path=str(p)) from None
