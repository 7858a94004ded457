"""Seeded synthetic corpora with planted relevance at controlled chunk positions.

Every word of the generated vocabulary is exactly one token, so word index equals
token index and placements can be stated in tokens. Each query is a short pattern of
words; its single relevant document embeds a passage containing the pattern
contiguously, placed entirely inside a chunk drawn from ``positions``. Negative
documents carry decoys: scattered subsets of the same pattern words.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ranklab._config import write_atomic
from ranklab._log import log
from ranklab.corpus import write_tsv
from ranklab.evaluation import Judgments, RankedList, write_qrels, write_run
from ranklab.exceptions import SyntheticError
from ranklab.tokenize import SPECIALS, Vocab, save_vocab

_ONSETS = "bdfgklmnprstvz"
_VOWELS = "aeiou"


@dataclass(frozen=True)
class SyntheticSpec:
    """``positions[i]`` is the share of relevant passages planted in chunk ``i + 1``;
    the last entry also stands for every chunk beyond it."""

    num_queries: int = 200
    docs_per_query: int = 10
    doc_len_min: int = 300
    doc_len_max: int = 1600
    passage_len: int = 60
    pattern_len: int = 4
    positions: tuple[float, ...] = (0.71, 0.15, 0.06, 0.08)
    chunk_size: int = 477
    vocab_size: int = 500
    decoys_per_negative: int = 2
    pattern_noise: float = 0.0
    test_fraction: float = 0.5
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "positions", tuple(float(p) for p in self.positions))
        if not self.positions or any(p < 0 for p in self.positions):
            raise SyntheticError("positions must be a non-empty list of non-negative shares")
        if not math.isclose(math.fsum(self.positions), 1.0, abs_tol=1e-9):
            raise SyntheticError(f"position shares sum to {math.fsum(self.positions)}, not 1")
        if self.num_queries < 2:
            raise SyntheticError(f"num_queries must be >= 2 (got {self.num_queries})")
        if self.docs_per_query < 2:
            raise SyntheticError(f"docs_per_query must be >= 2 (got {self.docs_per_query})")
        if not 1 <= self.pattern_len <= self.passage_len:
            raise SyntheticError(f"pattern_len must be in 1..passage_len (got {self.pattern_len})")
        if self.passage_len > self.chunk_size:
            raise SyntheticError(f"infeasible placement: passage of {self.passage_len} tokens "
                                 f"does not fit a {self.chunk_size}-token chunk")
        if not 1 <= self.doc_len_min <= self.doc_len_max:
            raise SyntheticError(f"doc length range {self.doc_len_min}..{self.doc_len_max} "
                                 "is empty")
        if self.passage_len > self.doc_len_max:
            raise SyntheticError(f"infeasible placement: passage of {self.passage_len} tokens is "
                                 f"longer than the longest document ({self.doc_len_max})")
        if self.vocab_size < self.pattern_len + 2:
            raise SyntheticError(f"vocab_size {self.vocab_size} is too small")
        if not 0.0 <= self.pattern_noise < 1.0:
            raise SyntheticError(f"pattern_noise must be in [0, 1) (got {self.pattern_noise})")
        if not 0.0 < self.test_fraction < 1.0:
            raise SyntheticError(f"test_fraction must be in (0, 1) (got {self.test_fraction})")
        if self.decoys_per_negative < 0:
            raise SyntheticError("decoys_per_negative must be >= 0")


@dataclass(frozen=True)
class Placement:
    query_id: str
    doc_id: str
    start: int
    end: int
    chunk: int


@dataclass
class SyntheticCorpus:
    spec: SyntheticSpec
    vocab: Vocab
    docs: dict[str, str]
    queries: dict[str, str]
    train_ids: list[str]
    test_ids: list[str]
    qrels: Judgments
    candidates: dict[str, RankedList]
    passages: dict[str, str]
    passage_qrels: Judgments
    placements: list[Placement] = field(default_factory=list)

    def write(self, out_dir: str | Path) -> dict[str, Path]:
        """Write every corpus file into ``out_dir``; returns the paths by role."""
        out = Path(out_dir)
        paths = {
            "vocab": out / "vocab.txt",
            "docs": out / "docs.tsv",
            "train_queries": out / "queries.train.tsv",
            "test_queries": out / "queries.test.tsv",
            "qrels": out / "qrels.txt",
            "train_candidates": out / "candidates.train.run",
            "test_candidates": out / "candidates.test.run",
            "passages": out / "passages.tsv",
            "passage_qrels": out / "passage_qrels.txt",
            "placements": out / "placements.tsv",
        }
        save_vocab(self.vocab, paths["vocab"])
        write_tsv(paths["docs"], self.docs)
        write_tsv(paths["train_queries"], {q: self.queries[q] for q in self.train_ids})
        write_tsv(paths["test_queries"], {q: self.queries[q] for q in self.test_ids})
        write_qrels(paths["qrels"], self.qrels)
        write_run(paths["train_candidates"], {q: self.candidates[q] for q in self.train_ids},
                  tag="synthetic")
        write_run(paths["test_candidates"], {q: self.candidates[q] for q in self.test_ids},
                  tag="synthetic")
        write_tsv(paths["passages"], self.passages)
        write_qrels(paths["passage_qrels"], self.passage_qrels)
        rows = ["query_id\tdoc_id\tstart\tend\tchunk"]
        rows += [f"{p.query_id}\t{p.doc_id}\t{p.start}\t{p.end}\t{p.chunk}"
                 for p in self.placements]
        write_atomic(paths["placements"], "\n".join(rows) + "\n")
        return paths


def syllable_words(n: int, rng: np.random.Generator) -> list[str]:
    """``n`` distinct pronounceable words of two or three syllables."""
    syllables = [c + v for c in _ONSETS for v in _VOWELS]
    capacity = len(syllables) ** 2 + len(syllables) ** 3
    if n > capacity:
        raise SyntheticError(f"cannot generate {n} distinct words (max {capacity})")
    words: list[str] = []
    seen: set[str] = set(SPECIALS)
    while len(words) < n:
        k = 2 if rng.random() < 0.5 else 3
        word = "".join(syllables[int(i)] for i in rng.integers(len(syllables), size=k))
        if word not in seen:
            seen.add(word)
            words.append(word)
    return words


def _filler(rng: np.random.Generator, words: list[str], banned: set[int], n: int) -> list[int]:
    out = rng.integers(len(words), size=n)
    for i in range(n):
        while int(out[i]) in banned:
            out[i] = rng.integers(len(words))
    return [int(x) for x in out]


def generate_synthetic(spec: SyntheticSpec) -> SyntheticCorpus:
    """Build a corpus from ``spec``. The same spec always yields the same corpus."""
    rng = np.random.default_rng(spec.seed)
    words = syllable_words(spec.vocab_size, rng)
    vocab = Vocab(SPECIALS + tuple(sorted(words)))
    cs = spec.chunk_size
    shares = np.asarray(spec.positions)
    shares = shares / shares.sum()

    docs: dict[str, str] = {}
    queries: dict[str, str] = {}
    qrels = Judgments()
    passage_qrels = Judgments()
    passages: dict[str, str] = {}
    candidates: dict[str, RankedList] = {}
    placements: list[Placement] = []
    width = len(str(spec.num_queries - 1))

    for qn in range(spec.num_queries):
        qid = f"q{qn:0{width}d}"
        pattern = [int(x) for x in rng.choice(len(words), size=spec.pattern_len, replace=False)]
        banned = set(pattern)
        queries[qid] = " ".join(words[i] for i in pattern)

        # relevant passage: filler with the pattern at a random offset
        passage = _filler(rng, words, banned, spec.passage_len)
        at = int(rng.integers(spec.passage_len - spec.pattern_len + 1))
        for k, w in enumerate(pattern):
            if spec.pattern_noise and rng.random() < spec.pattern_noise:
                continue
            passage[at + k] = w

        chunk = int(rng.choice(len(shares), p=shares)) + 1
        lo = (chunk - 1) * cs
        length = int(rng.integers(spec.doc_len_min, spec.doc_len_max + 1))
        length = max(length, lo + spec.passage_len)
        hi = min(chunk * cs, length) - spec.passage_len
        start = int(rng.integers(lo, hi + 1))
        body = _filler(rng, words, banned, length)
        body[start:start + spec.passage_len] = passage

        pos_id = f"{qid}_d0"
        docs[pos_id] = " ".join(words[i] for i in body)
        qrels.add(qid, pos_id, 1)
        pid = f"{qid}_p0"
        passages[pid] = " ".join(words[i] for i in passage)
        passage_qrels.add(qid, pid, 1)
        placements.append(Placement(qid, pos_id, start, start + spec.passage_len, chunk))

        doc_ids = [pos_id]
        for j in range(1, spec.docs_per_query):
            length = int(rng.integers(spec.doc_len_min, spec.doc_len_max + 1))
            body = _filler(rng, words, banned, length)
            subset = max(1, spec.pattern_len // 2)
            for _ in range(spec.decoys_per_negative):
                for w in rng.choice(pattern, size=subset, replace=False):
                    body[int(rng.integers(length))] = int(w)
            doc_id = f"{qid}_d{j}"
            docs[doc_id] = " ".join(words[i] for i in body)
            doc_ids.append(doc_id)

        scores = rng.random(len(doc_ids))
        candidates[qid] = RankedList.from_scores(qid, zip(doc_ids, scores.tolist()))

    order = sorted(queries)
    perm = rng.permutation(len(order))
    n_test = min(len(order) - 1, max(1, round(spec.test_fraction * len(order))))
    test_ids = sorted(order[i] for i in perm[:n_test])
    train_ids = sorted(order[i] for i in perm[n_test:])
    log(f"synthetic corpus: {len(queries)} queries ({len(train_ids)} train, {len(test_ids)} test), "
        f"{len(docs)} documents, vocab {len(vocab)}")
    return SyntheticCorpus(spec, vocab, docs, queries, train_ids, test_ids, qrels, candidates,
                           passages, passage_qrels, placements)
