"""Document partitioning and per-chunk input assembly.

Two partitioning schemes:

* greedy: disjoint chunks of ``chunk_cap`` tokens, truncated to ``max_chunks``
* sliding: windows of ``window`` tokens every ``stride`` tokens, capped at ``max_chunks``

Each chunk becomes one encoder input ``[CLS] q [SEP] d_i [SEP]`` with the query padded to
a fixed length, so the query segment is identical across the chunks of one document.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ranklab.exceptions import ChunkingError
from ranklab.tokenize import TokenSeq, Vocab

GREEDY = "greedy"
SLIDING = "sliding"
SCHEMES = (GREEDY, SLIDING)


@dataclass(frozen=True)
class Chunk:
    start: int
    end: int
    chunk_index: int

    def __post_init__(self) -> None:
        if self.start >= self.end:
            raise ChunkingError(f"chunk {self.chunk_index} is empty ({self.start}..{self.end})",
                                chunk_index=self.chunk_index)

    @property
    def doc_token_range(self) -> tuple[int, int]:
        return (self.start, self.end)

    def __len__(self) -> int:
        return self.end - self.start


@dataclass(frozen=True)
class ChunkingConfig:
    scheme: str = GREEDY
    chunk_size: int = 477
    window: int = 150
    stride: int = 100
    max_chunks: int = 3
    max_query_len: int = 32
    max_seq: int = 512

    def __post_init__(self) -> None:
        if self.scheme not in SCHEMES:
            raise ChunkingError(f"unknown chunking scheme {self.scheme!r} (expected one of "
                                f"{', '.join(SCHEMES)})")
        for name in ("chunk_size", "window", "stride", "max_chunks", "max_query_len", "max_seq"):
            if getattr(self, name) < 1:
                raise ChunkingError(f"{name} must be >= 1 (got {getattr(self, name)})")
        if self.scheme == SLIDING and self.stride > self.window:
            raise ChunkingError("stride exceeds window")

    @property
    def chunk_capacity(self) -> int:
        """Largest chunk the scheme can emit."""
        return self.chunk_size if self.scheme == GREEDY else self.window

    def partition(self, doc: TokenSeq) -> list[Chunk]:
        if self.scheme == GREEDY:
            return greedy_partition(doc, self.chunk_size, self.max_chunks)
        return sliding_window(doc, self.window, self.stride, self.max_chunks)


@dataclass(frozen=True)
class ChunkedInput:
    """Per-chunk encoder inputs for one query-document pair."""

    sequences: tuple[tuple[int, ...], ...]
    masks: tuple[tuple[int, ...], ...]
    chunks: tuple[Chunk, ...]
    query_len: int

    @property
    def m(self) -> int:
        return len(self.sequences)

    def as_batch(self, pad_id: int = 0) -> tuple[np.ndarray, np.ndarray]:
        """Stack into ``(m, L)`` id and mask arrays, right-padding short sequences."""
        width = max(len(s) for s in self.sequences)
        ids = np.full((self.m, width), pad_id, dtype=np.int64)
        mask = np.zeros((self.m, width), dtype=np.int64)
        for i, (seq, msk) in enumerate(zip(self.sequences, self.masks)):
            ids[i, : len(seq)] = seq
            mask[i, : len(msk)] = msk
        return ids, mask


# ────────────────────────── partitioning ──────────────────────────


def greedy_partition(doc: TokenSeq, chunk_cap: int = 477, max_chunks: int = 3) -> list[Chunk]:
    """Disjoint in-order chunks of ``chunk_cap`` tokens; tokens past ``chunk_cap * max_chunks``
    are dropped."""
    if chunk_cap < 1 or max_chunks < 1:
        raise ChunkingError(f"chunk_cap and max_chunks must be >= 1 "
                            f"(got {chunk_cap}, {max_chunks})")
    n = min(len(doc), chunk_cap * max_chunks)
    if n == 0:
        raise ChunkingError("empty document")
    return [
        Chunk(start, min(start + chunk_cap, n), i)
        for i, start in enumerate(range(0, n, chunk_cap))
    ]


def sliding_window(doc: TokenSeq, window: int, stride: int, max_chunks: int) -> list[Chunk]:
    """Windows ``[i*stride, min(i*stride + window, n))`` for every start below ``n``.

    A document that fits one window yields exactly one chunk.
    """
    if stride > window:
        raise ChunkingError("stride exceeds window")
    if stride < 1 or max_chunks < 1:
        raise ChunkingError(f"stride and max_chunks must be >= 1 (got {stride}, {max_chunks})")
    n = len(doc)
    if n == 0:
        raise ChunkingError("empty document")
    if n <= window:
        return [Chunk(0, n, 0)]
    chunks: list[Chunk] = []
    start = 0
    while start < n and len(chunks) < max_chunks:
        chunks.append(Chunk(start, min(start + window, n), len(chunks)))
        start += stride
    return chunks


# ────────────────────────── assembly ──────────────────────────


def assemble(
    query: TokenSeq,
    doc: TokenSeq,
    chunks: list[Chunk],
    vocab: Vocab,
    max_seq: int = 512,
) -> ChunkedInput:
    """Build ``[CLS] q [SEP] d_i [SEP]`` per chunk.

    ``query`` is expected to be already padded (see ``prepare_query``); PAD positions get
    mask 0, everything else 1.
    """
    if not chunks:
        raise ChunkingError("no chunks to assemble")
    q_ids = tuple(query.ids)
    q_mask = tuple(0 if t == vocab.pad_id else 1 for t in q_ids)
    head = (vocab.cls_id, *q_ids, vocab.sep_id)
    head_mask = (1, *q_mask, 1)
    sequences: list[tuple[int, ...]] = []
    masks: list[tuple[int, ...]] = []
    for chunk in chunks:
        length = len(q_ids) + len(chunk) + 3
        if length > max_seq:
            raise ChunkingError(
                f"chunk {chunk.chunk_index}: {len(q_ids)} query + {len(chunk)} document tokens "
                f"+ 3 specials = {length} exceeds max_seq {max_seq}",
                chunk_index=chunk.chunk_index,
            )
        if chunk.end > len(doc):
            raise ChunkingError(f"chunk {chunk.chunk_index} ends past the document "
                                f"({chunk.end} > {len(doc)})", chunk_index=chunk.chunk_index)
        body = doc.ids[chunk.start:chunk.end]
        sequences.append((*head, *body, vocab.sep_id))
        masks.append((*head_mask, *([1] * len(body)), 1))
    return ChunkedInput(tuple(sequences), tuple(masks), tuple(chunks), len(q_ids))
