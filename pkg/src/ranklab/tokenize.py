"""Deterministic subword tokenization with BERT-style special tokens.

Text is normalized character by character (lowercase, every whitespace character
becomes a space) so normalization never changes string length and token offsets
index the caller's original text directly.

Words are segmented greedily, longest match first, against a vocabulary trained
on the corpus with frequency-ranked pair merges. Offsets tile the text: the
whitespace before a word belongs to that word's first token and trailing
whitespace belongs to the last token, so concatenating the offset spans always
reconstructs the input.
"""

from __future__ import annotations

import re
from collections import Counter
from collections.abc import Iterable
from dataclasses import dataclass, field
from pathlib import Path

from ranklab._config import write_atomic
from ranklab.exceptions import TokenizerError

PAD, UNK, CLS, SEP = "[PAD]", "[UNK]", "[CLS]", "[SEP]"
SPECIALS = (PAD, UNK, CLS, SEP)
PAD_ID, UNK_ID, CLS_ID, SEP_ID = 0, 1, 2, 3

# 4 specials + room for a byte-sized alphabet.
MIN_VOCAB_SIZE = 260

_WORD = re.compile(r"\S+")


@dataclass(frozen=True)
class Vocab:
    tokens: tuple[str, ...]
    continuation: str = ""
    _index: dict[str, int] = field(init=False, repr=False, compare=False)
    _max_len: int = field(init=False, repr=False, compare=False)
    _cache: dict[str, tuple[tuple[int, int, int], ...]] = field(
        init=False, repr=False, compare=False
    )

    def __post_init__(self) -> None:
        if tuple(self.tokens[:4]) != SPECIALS:
            raise TokenizerError(f"vocab must start with {', '.join(SPECIALS)}")
        index: dict[str, int] = {}
        for i, tok in enumerate(self.tokens):
            if not tok or any(c.isspace() for c in tok):
                raise TokenizerError(f"invalid token at id {i}: {tok!r}")
            if tok in index:
                raise TokenizerError(f"duplicate token {tok!r} (ids {index[tok]} and {i})")
            index[tok] = i
        object.__setattr__(self, "_index", index)
        object.__setattr__(self, "_max_len", max(len(t) for t in self.tokens))
        object.__setattr__(self, "_cache", {})

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def id(self, token: str) -> int:
        return self._index.get(token, UNK_ID)

    def token(self, token_id: int) -> str:
        return self.tokens[token_id]

    @property
    def pad_id(self) -> int:
        return PAD_ID

    @property
    def unk_id(self) -> int:
        return UNK_ID

    @property
    def cls_id(self) -> int:
        return CLS_ID

    @property
    def sep_id(self) -> int:
        return SEP_ID


@dataclass(frozen=True)
class TokenSeq:
    ids: tuple[int, ...]
    offsets: tuple[tuple[int, int], ...]

    def __post_init__(self) -> None:
        if len(self.ids) != len(self.offsets):
            raise TokenizerError(
                f"ids/offsets length mismatch ({len(self.ids)} vs {len(self.offsets)})"
            )

    def __len__(self) -> int:
        return len(self.ids)

    def slice(self, start: int, end: int) -> TokenSeq:
        return TokenSeq(self.ids[start:end], self.offsets[start:end])


def normalize(text: str) -> str:
    """Lowercase and map whitespace to spaces without changing the string length."""
    out = []
    for c in text:
        if c.isspace():
            out.append(" ")
            continue
        low = c.lower()
        out.append(low if len(low) == 1 else c)
    return "".join(out)


# ────────────────────────── vocabulary ──────────────────────────


def build_vocab(corpus: str | Iterable[str], max_size: int, *, continuation: str = "") -> Vocab:
    """Train a vocabulary: specials, every character seen, then greedy pair merges.

    Merges pick the most frequent adjacent symbol pair (ties: lexicographically
    smallest), stopping once no pair occurs at least twice or ``max_size`` is reached.
    Non-initial symbols carry the ``continuation`` prefix when one is configured.
    """
    if max_size < MIN_VOCAB_SIZE:
        raise TokenizerError(f"max_size must be >= {MIN_VOCAB_SIZE} (got {max_size})")
    texts = [corpus] if isinstance(corpus, str) else corpus
    words: Counter[str] = Counter()
    for text in texts:
        words.update(_WORD.findall(normalize(text)))
    if not words:
        raise TokenizerError("empty corpus")

    def _sym(ch: str, initial: bool) -> str:
        return ch if initial else continuation + ch

    chars: Counter[str] = Counter()
    splits: dict[str, list[str]] = {}
    for word, n in words.items():
        syms = [_sym(c, i == 0) for i, c in enumerate(word)]
        splits[word] = syms
        for s in syms:
            chars[s] += n

    tokens = list(SPECIALS)
    seen = set(tokens)
    for sym, _ in sorted(chars.items(), key=lambda kv: (-kv[1], kv[0])):
        if len(tokens) >= max_size:
            break
        if sym not in seen:
            tokens.append(sym)
            seen.add(sym)

    while len(tokens) < max_size:
        pairs: Counter[tuple[str, str]] = Counter()
        for word, syms in splits.items():
            n = words[word]
            for a, b in zip(syms, syms[1:]):
                pairs[(a, b)] += n
        if not pairs:
            break
        (a, b), count = min(pairs.items(), key=lambda kv: (-kv[1], kv[0]))
        if count < 2:
            break
        merged = a + b[len(continuation):]
        for word, syms in splits.items():
            splits[word] = _apply_merge(syms, a, b, merged)
        if merged not in seen:
            tokens.append(merged)
            seen.add(merged)

    return Vocab(tuple(tokens), continuation)


def _apply_merge(syms: list[str], a: str, b: str, merged: str) -> list[str]:
    out: list[str] = []
    i = 0
    while i < len(syms):
        if i + 1 < len(syms) and syms[i] == a and syms[i + 1] == b:
            out.append(merged)
            i += 2
        else:
            out.append(syms[i])
            i += 1
    return out


def save_vocab(vocab: Vocab, path: str | Path) -> Path:
    """One token per line; line number is the id."""
    return write_atomic(path, "".join(f"{t}\n" for t in vocab.tokens))


def load_vocab(path: str | Path, *, continuation: str = "") -> Vocab:
    p = Path(path)
    try:
        lines = p.read_text(encoding="utf-8").splitlines()
    except FileNotFoundError:
        raise TokenizerError(f"vocab file not found: {p}") from None
    try:
        return Vocab(tuple(lines), continuation)
    except TokenizerError as e:
        raise TokenizerError(f"{p}: {e}") from e


# ────────────────────────── tokenization ──────────────────────────


def tokenize(vocab: Vocab, text: str) -> TokenSeq:
    """Greedy longest-match segmentation; uncoverable characters become 1-char UNK.

    Offsets tile ``text``: whitespace between words joins the token before it, or the
    token after it when the one before is UNK. Leading whitespace joins the first token
    and trailing whitespace the last. An UNK span is wider than one character only when
    the whitespace next to it has no other token to join; whitespace-only text is one UNK.
    """
    if not text:
        return TokenSeq((), ())
    norm = normalize(text)
    ids: list[int] = []
    offsets: list[list[int]] = []
    for m in _WORD.finditer(norm):
        base = m.start()
        for tok_id, s, e in _segment(vocab, m.group()):
            ids.append(tok_id)
            offsets.append([base + s, base + e])
    if not ids:
        return TokenSeq((UNK_ID,), ((0, len(text)),))
    offsets[0][0] = 0
    offsets[-1][1] = len(text)
    for i in range(1, len(ids)):
        prev, cur = offsets[i - 1], offsets[i]
        if prev[1] == cur[0]:
            continue
        if ids[i - 1] == UNK_ID and ids[i] != UNK_ID:
            cur[0] = prev[1]
        else:
            prev[1] = cur[0]
    return TokenSeq(tuple(ids), tuple((s, e) for s, e in offsets))


def _segment(vocab: Vocab, word: str) -> tuple[tuple[int, int, int], ...]:
    cached = vocab._cache.get(word)
    if cached is not None:
        return cached
    out: list[tuple[int, int, int]] = []
    i, n = 0, len(word)
    index = vocab._index
    marker = vocab.continuation
    while i < n:
        prefix = marker if i > 0 else ""
        hit = None
        for j in range(min(n, i + vocab._max_len), i, -1):
            tok_id = index.get(prefix + word[i:j])
            if tok_id is not None and tok_id >= len(SPECIALS):
                hit = (tok_id, i, j)
                break
        if hit is None:
            hit = (UNK_ID, i, i + 1)
        out.append(hit)
        i = hit[2]
    result = tuple(out)
    vocab._cache[word] = result
    return result


def prepare_query(vocab: Vocab, q: TokenSeq, max_q: int = 32) -> TokenSeq:
    """Truncate to ``max_q`` tokens, then pad with PAD to exactly ``max_q``.

    PAD tokens get empty offsets at the end of the last real token.
    """
    if max_q < 1:
        raise TokenizerError(f"max_q must be >= 1 (got {max_q})")
    ids = list(q.ids[:max_q])
    offsets = list(q.offsets[:max_q])
    end = offsets[-1][1] if offsets else 0
    pad = max_q - len(ids)
    ids.extend([vocab.pad_id] * pad)
    offsets.extend([(end, end)] * pad)
    return TokenSeq(tuple(ids), tuple(offsets))
