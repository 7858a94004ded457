"""Stderr progress messages, prefixed ``[ranklab]``. Silenced by RANKLAB_VERBOSE=0."""

from __future__ import annotations

import sys


def log(msg: str) -> None:
    from ranklab._config import get_config

    if get_config().verbose:
        print(f"[ranklab] {msg}", file=sys.stderr, flush=True)
