"""Line-oriented text collections: one ``id<TAB>text`` record per line."""

from __future__ import annotations

from collections.abc import Mapping
from pathlib import Path

from ranklab._config import write_atomic
from ranklab.exceptions import DataError
from ranklab.tokenize import TokenSeq, Vocab, tokenize


def read_tsv(path: str | Path) -> dict[str, str]:
    """Read ``id<TAB>text`` lines in file order. Duplicate ids are an error."""
    p = Path(path)
    try:
        lines = p.read_text(encoding="utf-8").splitlines()
    except FileNotFoundError:
        raise DataError("file not found", path=str(p)) from None
    out: dict[str, str] = {}
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        key, sep, text = line.partition("\t")
        key = key.strip()
        if not sep or not key:
            raise DataError("expected 'id<TAB>text'", path=str(p), line=lineno)
        if key in out:
            raise DataError(f"duplicate id {key!r}", path=str(p), line=lineno)
        out[key] = text
    return out


def write_tsv(path: str | Path, records: Mapping[str, str]) -> Path:
    lines = []
    for key, text in records.items():
        if "\t" in key or "\n" in text or "\t" in text:
            raise DataError(f"record {key!r} contains a tab or newline")
        lines.append(f"{key}\t{text}\n")
    return write_atomic(path, "".join(lines))


def tokenize_all(vocab: Vocab, texts: Mapping[str, str]) -> dict[str, TokenSeq]:
    return {key: tokenize(vocab, text) for key, text in texts.items()}
