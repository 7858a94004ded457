"""Tests for the seeded synthetic corpus generator."""

from __future__ import annotations

from collections import Counter

import numpy as np
import pytest

from ranklab.evaluation import read_qrels, read_run
from ranklab.exceptions import SyntheticError
from ranklab.synthetic import SyntheticSpec, generate_synthetic, syllable_words
from ranklab.tokenize import load_vocab, tokenize

SMALL = SyntheticSpec(num_queries=20, docs_per_query=3, doc_len_min=100, doc_len_max=500,
                      passage_len=20, pattern_len=3, chunk_size=120,
                      positions=(0.5, 0.25, 0.25), vocab_size=200, seed=7)


def test_spec_validation():
    with pytest.raises(SyntheticError, match="sum to"):
        SyntheticSpec(positions=(0.5, 0.4))
    with pytest.raises(SyntheticError, match="infeasible placement"):
        SyntheticSpec(passage_len=500, chunk_size=477)
    with pytest.raises(SyntheticError, match="infeasible placement"):
        SyntheticSpec(passage_len=100, doc_len_min=50, doc_len_max=80)
    with pytest.raises(SyntheticError, match="pattern_len"):
        SyntheticSpec(pattern_len=0)
    with pytest.raises(SyntheticError, match="test_fraction"):
        SyntheticSpec(test_fraction=1.0)


def test_syllable_words_are_distinct():
    words = syllable_words(300, np.random.default_rng(0))
    assert len(set(words)) == 300
    assert all(4 <= len(w) <= 6 for w in words)


def test_passages_lie_inside_their_chunk():
    corpus = generate_synthetic(SMALL)
    cs = SMALL.chunk_size
    for p in corpus.placements:
        assert p.end - p.start == SMALL.passage_len
        assert (p.chunk - 1) * cs <= p.start
        assert p.end <= p.chunk * cs
        assert 1 <= p.chunk <= len(SMALL.positions)


def test_word_positions_equal_token_positions():
    corpus = generate_synthetic(SMALL)
    for p in corpus.placements[:5]:
        text = corpus.docs[p.doc_id]
        words = text.split()
        tokens = tokenize(corpus.vocab, text)
        assert len(tokens) == len(words)
        passage_words = corpus.passages[f"{p.query_id}_p0"].split()
        assert words[p.start:p.end] == passage_words


def test_query_pattern_appears_in_positive_passage():
    corpus = generate_synthetic(SMALL)
    for qid, query in corpus.queries.items():
        passage = corpus.passages[f"{qid}_p0"]
        assert query in passage


def test_positions_follow_shares():
    spec = SyntheticSpec(num_queries=2000, docs_per_query=2, doc_len_min=100, doc_len_max=300,
                         passage_len=10, pattern_len=2, chunk_size=100,
                         positions=(0.7, 0.2, 0.1), vocab_size=100, seed=1)
    counts = Counter(p.chunk for p in generate_synthetic(spec).placements)
    assert counts[1] / 2000 == pytest.approx(0.7, abs=0.04)
    assert counts[2] / 2000 == pytest.approx(0.2, abs=0.04)


def test_split_and_candidates():
    corpus = generate_synthetic(SMALL)
    assert set(corpus.train_ids) | set(corpus.test_ids) == set(corpus.queries)
    assert not set(corpus.train_ids) & set(corpus.test_ids)
    assert len(corpus.test_ids) == 10
    for qid, ranked in corpus.candidates.items():
        assert len(ranked) == SMALL.docs_per_query
        assert f"{qid}_d0" in ranked.doc_ids
        assert corpus.qrels.relevant(qid) == {f"{qid}_d0"}


def test_same_spec_same_bytes(tmp_path):
    a = generate_synthetic(SMALL).write(tmp_path / "a")
    b = generate_synthetic(SMALL).write(tmp_path / "b")
    for role in a:
        assert a[role].read_bytes() == b[role].read_bytes(), role


def test_different_seed_differs():
    other = generate_synthetic(SyntheticSpec(**{**SMALL.__dict__, "seed": 8}))
    assert other.docs != generate_synthetic(SMALL).docs


def test_written_files_load_back(tmp_path):
    corpus = generate_synthetic(SMALL)
    paths = corpus.write(tmp_path)
    assert load_vocab(paths["vocab"]).tokens == corpus.vocab.tokens
    assert len(read_qrels(paths["qrels"])) == SMALL.num_queries
    run = read_run(paths["test_candidates"])
    assert sorted(run) == corpus.test_ids
    lines = paths["placements"].read_text().splitlines()
    assert lines[0] == "query_id\tdoc_id\tstart\tend\tchunk"
    assert len(lines) == SMALL.num_queries + 1
