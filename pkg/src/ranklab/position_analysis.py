"""Where do relevant passages sit inside relevant documents?

Pipeline: approximately match every relevant passage against every relevant document
of the same query, map the character match onto document tokens, bucket the start
and end token into fixed-size chunks, and estimate how much a model reading more
than the first chunk could gain at best.

Matching tries the longest common substring first (threshold 0.8) and falls back to
the longest common subsequence inside a sliding window 20% longer than the passage
(threshold 0.7). Scores are normalized by passage length.
"""

from __future__ import annotations

import bisect
import json
import math
from collections import defaultdict
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ranklab._config import write_atomic
from ranklab._jobs import map_jobs, unwrap
from ranklab._log import log
from ranklab.evaluation import Judgments
from ranklab.exceptions import AnalysisError
from ranklab.tokenize import TokenSeq, Vocab, normalize, tokenize

SUBSTRING = "substring"
SUBSEQUENCE = "subsequence"
NONE = "none"

SUBSTRING_THRESHOLD = 0.8
SUBSEQUENCE_THRESHOLD = 0.7
WINDOW_SCALE = 1.2
WINDOW_STRIDE_FRAC = 0.25

DEFAULT_CHUNK_SIZE = 477
DEFAULT_BUCKETS = 6
DEFAULT_LENGTH_CAP = 10_000
DEFAULT_LENGTH_BIN = 500


@dataclass(frozen=True)
class MatchResult:
    matched: bool
    method: str
    score: float
    char_span: tuple[int, int] | None = None
    token_span: tuple[int, int] | None = None


# ────────────────────────── string kernels ──────────────────────────


def _codes(s: str) -> np.ndarray:
    return np.frombuffer(s.encode("utf-32-le"), dtype=np.uint32)


def longest_common_substring(needle: str, haystack: str) -> tuple[int, int]:
    """``(length, start in haystack)`` of the longest common substring.

    Among equally long matches the earliest haystack position wins. Row-vectorized DP.
    """
    if not needle or not haystack:
        return 0, 0
    a, b = _codes(needle), _codes(haystack)
    prev = np.zeros(len(b) + 1, dtype=np.int64)
    best_len, best_end = 0, 0
    for ch in a:
        cur = np.zeros_like(prev)
        cur[1:] = np.where(b == ch, prev[:-1] + 1, 0)
        j = int(np.argmax(cur))
        n = int(cur[j])
        if n > best_len or (n == best_len and n > 0 and j < best_end):
            best_len, best_end = n, j
        prev = cur
    return best_len, best_end - best_len


def _match_masks(needle: str) -> dict[str, int]:
    masks: dict[str, int] = defaultdict(int)
    for i, ch in enumerate(needle):
        masks[ch] |= 1 << i
    return masks


def _lcs_length_bits(masks: Mapping[str, int], m: int, text: str) -> int:
    """Bit-parallel LCS length of a length-``m`` pattern (as ``masks``) against ``text``."""
    full = (1 << m) - 1
    v = full
    for ch in text:
        u = v & masks.get(ch, 0)
        v = ((v + u) | (v - u)) & full
    return m - bin(v).count("1")


def longest_common_subsequence(a: str, b: str) -> int:
    if not a or not b:
        return 0
    return _lcs_length_bits(_match_masks(a), len(a), b)


def _subsequence_span(needle: str, window: str) -> tuple[int, int]:
    """First and last window positions (end exclusive) used by one optimal alignment."""
    m, n = len(needle), len(window)
    table = [[0] * (n + 1) for _ in range(m + 1)]
    for i in range(1, m + 1):
        ai = needle[i - 1]
        row, up = table[i], table[i - 1]
        for j in range(1, n + 1):
            if ai == window[j - 1]:
                row[j] = up[j - 1] + 1
            else:
                row[j] = row[j - 1] if row[j - 1] > up[j] else up[j]
    i, j = m, n
    first = last = -1
    while i > 0 and j > 0:
        if needle[i - 1] == window[j - 1] and table[i][j] == table[i - 1][j - 1] + 1:
            if last < 0:
                last = j - 1
            first = j - 1
            i -= 1
            j -= 1
        elif table[i - 1][j] >= table[i][j - 1]:
            i -= 1
        else:
            j -= 1
    if last < 0:
        return 0, 0
    return first, last + 1


def _window_starts(n: int, width: int, stride: int) -> list[int]:
    if n <= width:
        return [0]
    starts = list(range(0, n - width + 1, stride))
    if starts[-1] != n - width:
        starts.append(n - width)
    return starts


# ────────────────────────── matching ──────────────────────────


def match_passage(
    passage: str,
    document: str,
    doc_tokens: TokenSeq | None = None,
    *,
    substring_threshold: float = SUBSTRING_THRESHOLD,
    subsequence_threshold: float = SUBSEQUENCE_THRESHOLD,
    window_scale: float = WINDOW_SCALE,
    stride_frac: float = WINDOW_STRIDE_FRAC,
) -> MatchResult:
    """Locate ``passage`` inside ``document``.

    Both strings are case-normalized like the tokenizer; spans index the original
    ``document``. ``doc_tokens`` (the tokenized document) fills ``token_span``.
    """
    if not passage:
        raise AnalysisError("empty passage")
    p, d = normalize(passage), normalize(document)
    m = len(p)
    length, start = longest_common_substring(p, d)
    sub_score = length / m
    if sub_score >= substring_threshold:
        return _result(SUBSTRING, sub_score, (start, start + length), doc_tokens)

    width = math.ceil(window_scale * m)
    stride = max(1, int(width * stride_frac))
    masks = _match_masks(p)
    best, best_start = -1, 0
    for s in _window_starts(len(d), width, stride):
        n = _lcs_length_bits(masks, m, d[s:s + width])
        if n > best:
            best, best_start = n, s
    seq_score = max(best, 0) / m
    if seq_score >= subsequence_threshold:
        lo, hi = _subsequence_span(p, d[best_start:best_start + width])
        return _result(SUBSEQUENCE, seq_score, (best_start + lo, best_start + hi), doc_tokens)
    return MatchResult(False, NONE, max(sub_score, seq_score))


def _result(method: str, score: float, span: tuple[int, int], doc_tokens) -> MatchResult:
    token_span = char_span_to_token_span(doc_tokens, span) if doc_tokens is not None else None
    return MatchResult(True, method, score, span, token_span)


def char_span_to_token_span(doc: TokenSeq, char_span: tuple[int, int]) -> tuple[int, int]:
    """Smallest token range whose offsets cover ``char_span``."""
    start, end = char_span
    ends = [e for _, e in doc.offsets]
    first = bisect.bisect_right(ends, start)
    if end <= start:
        return first, first
    starts = [s for s, _ in doc.offsets]
    last = bisect.bisect_left(starts, end)
    return first, max(first, last)


def chunk_index(token_pos: int, chunk_size: int = DEFAULT_CHUNK_SIZE) -> int:
    """1-based chunk ordinal of a token position."""
    if token_pos < 0:
        raise AnalysisError(f"token position must be >= 0 (got {token_pos})")
    return token_pos // chunk_size + 1


# ────────────────────────── histograms ──────────────────────────


@dataclass
class PositionHistogram:
    """Counts per chunk ``1..buckets`` plus an overflow bucket ``buckets + 1`` ("K+")."""

    basis: str
    chunk_size: int = DEFAULT_CHUNK_SIZE
    buckets: int = DEFAULT_BUCKETS
    counts: dict[int, int] = field(default_factory=dict)

    def add(self, chunk: int) -> None:
        key = min(chunk, self.buckets + 1)
        self.counts[key] = self.counts.get(key, 0) + 1

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def share(self, chunk: int) -> float:
        total = self.total
        return self.counts.get(chunk, 0) / total if total else 0.0

    def label(self, key: int) -> str:
        return f"{self.buckets}+" if key > self.buckets else str(key)

    def keys(self) -> list[int]:
        return list(range(1, self.buckets + 2))


@dataclass
class LengthHistogram:
    bin_size: int = DEFAULT_LENGTH_BIN
    cap: int = DEFAULT_LENGTH_CAP
    counts: list[int] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.counts:
            self.counts = [0] * (self.cap // self.bin_size + 1)

    def add(self, length: int) -> None:
        self.counts[min(length, self.cap) // self.bin_size] += 1

    def rows(self) -> list[tuple[str, int]]:
        out = []
        for i, n in enumerate(self.counts):
            lo = i * self.bin_size
            label = f"{lo}+" if lo >= self.cap else f"{lo}-{lo + self.bin_size - 1}"
            out.append((label, n))
        return out


@dataclass(frozen=True)
class PassageMatch:
    query_id: str
    doc_id: str
    passage_id: str
    result: MatchResult


@dataclass
class PositionReport:
    start: PositionHistogram
    end: PositionHistogram
    lengths: LengthHistogram
    attempted: int = 0
    matched: int = 0

    @property
    def match_rate(self) -> float:
        return self.matched / self.attempted if self.attempted else 0.0


def build_histograms(
    matches: Sequence[PassageMatch],
    docs: Mapping[str, TokenSeq],
    first_only: bool = True,
    *,
    chunk_size: int = DEFAULT_CHUNK_SIZE,
    buckets: int = DEFAULT_BUCKETS,
    length_cap: int = DEFAULT_LENGTH_CAP,
    length_bin: int = DEFAULT_LENGTH_BIN,
) -> PositionReport:
    """Chunk histograms of matched passage starts/ends plus relevant-doc lengths.

    With ``first_only`` each (query, doc) pair contributes only its earliest-starting
    matched passage.
    """
    start = PositionHistogram("start", chunk_size, buckets)
    end = PositionHistogram("end", chunk_size, buckets)
    lengths = LengthHistogram(length_bin, length_cap)
    for doc_id in sorted(docs):
        lengths.add(len(docs[doc_id]))

    by_pair: dict[tuple[str, str], list[PassageMatch]] = defaultdict(list)
    for pm in matches:
        if pm.doc_id not in docs:
            raise AnalysisError(f"match references unknown document {pm.doc_id!r}")
        if pm.result.matched and pm.result.token_span is not None:
            by_pair[(pm.query_id, pm.doc_id)].append(pm)

    matched = 0
    for key in sorted(by_pair):
        group = sorted(by_pair[key], key=lambda pm: (pm.result.token_span[0], pm.passage_id))
        for pm in group[:1] if first_only else group:
            s, e = pm.result.token_span
            start.add(chunk_index(s, chunk_size))
            end.add(chunk_index(max(s, e - 1), chunk_size))
            matched += 1
    return PositionReport(start, end, lengths, attempted=len(matches), matched=matched)


def estimate_ceiling(
    end_hist: PositionHistogram, start_hist: PositionHistogram, max_chunks: int
) -> float:
    """Best-case score of a ``max_chunks``-chunk model relative to the first-chunk ceiling.

    A first-chunk model scores only when the passage ends in chunk 1. A passage (always
    shorter than a chunk) that starts in chunk k also ends inside the first
    ``max_chunks`` chunks when ``k <= max_chunks - 1``; those starts are the extra credit.
    """
    if end_hist.total != start_hist.total:
        raise AnalysisError(f"inconsistent histograms ({start_hist.total} starts vs "
                            f"{end_hist.total} ends)")
    if max_chunks < 1:
        raise AnalysisError(f"max_chunks must be >= 1 (got {max_chunks})")
    credit = end_hist.share(1)
    if credit <= 0:
        raise AnalysisError("degenerate distribution: no passage ends in the first chunk")
    extra = sum(start_hist.share(k) for k in range(2, max_chunks))
    return 1.0 + extra / credit


# ────────────────────────── pipeline ──────────────────────────


def _match_group(
    vocab: Vocab,
    query_id: str,
    doc_id: str,
    doc_text: str,
    passages: list[tuple[str, str]],
) -> list[PassageMatch]:
    doc_tokens = tokenize(vocab, doc_text)
    return [PassageMatch(query_id, doc_id, pid, match_passage(text, doc_text, doc_tokens))
            for pid, text in passages]


def analyze_positions(
    vocab: Vocab,
    documents: Mapping[str, str],
    passages: Mapping[str, str],
    doc_qrels: Judgments,
    passage_qrels: Judgments,
    *,
    first_only: bool = True,
    chunk_size: int = DEFAULT_CHUNK_SIZE,
    max_chunks: int = 3,
    buckets: int = DEFAULT_BUCKETS,
    length_cap: int = DEFAULT_LENGTH_CAP,
    workers: int | None = None,
    out_dir: str | Path | None = None,
) -> tuple[PositionReport, list[PassageMatch]]:
    """Match every relevant passage of a query against each of its relevant documents."""
    groups: list[tuple] = []
    relevant_docs: dict[str, TokenSeq] = {}
    for qid in doc_qrels.queries():
        pids = sorted(passage_qrels.relevant(qid))
        for doc_id in sorted(doc_qrels.relevant(qid)):
            if doc_id not in documents:
                raise AnalysisError(f"relevant document {doc_id!r} missing from collection")
            relevant_docs[doc_id] = tokenize(vocab, documents[doc_id])
            if not pids:
                continue
            missing = [p for p in pids if p not in passages]
            if missing:
                raise AnalysisError(f"passages missing from passage file: {', '.join(missing)}")
            groups.append((vocab, qid, doc_id, documents[doc_id],
                           [(p, passages[p]) for p in pids]))
    log(f"matching passages for {len(groups)} (query, document) pairs")
    matches = [pm for group in unwrap(map_jobs(_match_group, groups, workers)) for pm in group]
    report = build_histograms(matches, relevant_docs, first_only, chunk_size=chunk_size,
                              buckets=buckets, length_cap=length_cap)
    log(f"matched {report.matched} of {report.attempted} passages "
        f"({100 * report.match_rate:.1f}%)")
    if out_dir is not None:
        write_position_outputs(out_dir, report, matches, max_chunks)
    return report, matches


def format_position_table(start: PositionHistogram, end: PositionHistogram) -> str:
    lines = ["chunk\tstart%\tend%"]
    for k in start.keys():
        lines.append(f"{start.label(k)}\t{100 * start.share(k):.1f}\t{100 * end.share(k):.1f}")
    return "\n".join(lines) + "\n"


def write_position_outputs(
    out_dir: str | Path,
    report: PositionReport,
    matches: Iterable[PassageMatch],
    max_chunks: int,
) -> None:
    out = Path(out_dir)
    write_atomic(out / "positions.tsv", format_position_table(report.start, report.end))
    write_atomic(out / "doc_lengths.tsv",
                 "bin\tcount\n" + "".join(f"{b}\t{n}\n" for b, n in report.lengths.rows()))
    rows = ["query_id\tdoc_id\tpassage_id\tmethod\tscore\tchar_start\tchar_end\ttok_start\ttok_end"]
    for pm in matches:
        r = pm.result
        cs = r.char_span or ("", "")
        ts = r.token_span or ("", "")
        rows.append(f"{pm.query_id}\t{pm.doc_id}\t{pm.passage_id}\t{r.method}\t{r.score:.6f}"
                    f"\t{cs[0]}\t{cs[1]}\t{ts[0]}\t{ts[1]}")
    write_atomic(out / "matches.tsv", "\n".join(rows) + "\n")
    try:
        ceiling: float | None = estimate_ceiling(report.end, report.start, max_chunks)
    except AnalysisError:
        ceiling = None
    summary = {
        "attempted": report.attempted,
        "matched": report.matched,
        "match_rate": report.match_rate,
        "max_chunks": max_chunks,
        "ceiling_factor": ceiling,
        "start_counts": {report.start.label(k): report.start.counts.get(k, 0)
                         for k in report.start.keys()},
        "end_counts": {report.end.label(k): report.end.counts.get(k, 0)
                       for k in report.end.keys()},
        "chunk_size": report.start.chunk_size,
    }
    write_atomic(out / "summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
