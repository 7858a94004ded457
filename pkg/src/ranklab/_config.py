"""Process-global runtime settings plus TOML helpers for experiment files.

Runtime setting precedence (highest first):

1. an explicit ``ranklab.configure(...)`` call or the matching CLI flag
   (``--quiet``, ``--workers``, ``--run-root``)
2. the ``RANKLAB_VERBOSE`` / ``RANKLAB_WORKERS`` / ``RANKLAB_RUN_ROOT`` environment variables
3. the defaults below

Experiment settings live in a separate TOML file per run (see ``ranklab.experiment``);
this module only provides the strict loader and the atomic snapshot writer.
"""

from __future__ import annotations

import os
import tempfile
import tomllib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from ranklab.exceptions import ConfigError

DEFAULT_RUN_ROOT = Path("runs")


@dataclass
class Config:
    verbose: bool = True
    workers: int = 1
    run_root: Path = DEFAULT_RUN_ROOT
    # Fields pinned by configure() are not overwritten from the environment.
    explicit: set[str] = field(default_factory=set)


_config = Config()


# ────────────────────────── public configuration API ──────────────────────────


def configure(
    verbose: bool | None = None,
    workers: int | None = None,
    run_root: str | Path | None = None,
) -> Config:
    """Set process-wide settings. Any argument left as ``None`` is unchanged."""
    if verbose is not None:
        _config.verbose = verbose
        _config.explicit.add("verbose")
    if workers is not None:
        if workers < 1:
            raise ConfigError(f"workers must be >= 1 (got {workers})", key="workers")
        _config.workers = workers
        _config.explicit.add("workers")
    if run_root is not None:
        _config.run_root = Path(run_root).expanduser()
        _config.explicit.add("run_root")
    return _config


def get_config() -> Config:
    """Return the active configuration with environment overrides applied."""
    if "verbose" not in _config.explicit and "RANKLAB_VERBOSE" in os.environ:
        _config.verbose = os.environ["RANKLAB_VERBOSE"] != "0"
    if "workers" not in _config.explicit and os.environ.get("RANKLAB_WORKERS"):
        raw = os.environ["RANKLAB_WORKERS"]
        try:
            workers = int(raw)
        except ValueError:
            raise ConfigError(f"RANKLAB_WORKERS must be an integer (got {raw!r})",
                              key="workers") from None
        if workers < 1:
            raise ConfigError(f"RANKLAB_WORKERS must be >= 1 (got {workers})", key="workers")
        _config.workers = workers
    if "run_root" not in _config.explicit and os.environ.get("RANKLAB_RUN_ROOT"):
        _config.run_root = Path(os.environ["RANKLAB_RUN_ROOT"]).expanduser()
    return _config


# ────────────────────────── TOML files ──────────────────────────


def load_toml(path: str | Path) -> dict:
    """Parse a TOML file, wrapping syntax errors in :class:`ConfigError`."""
    p = Path(path)
    try:
        text = p.read_text()
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {p}", path=str(p)) from None
    try:
        return tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{p}: {e}", path=str(p)) from e


def take(table: dict, section: str, defaults: dict[str, Any], *, path: str | None = None) -> dict:
    """Merge ``table`` over ``defaults``; reject keys the section does not define.

    Types are checked against the default's type (ints are accepted where floats are expected).
    """
    unknown = sorted(set(table) - set(defaults))
    if unknown:
        raise ConfigError(f"[{section}] unknown key(s): {', '.join(unknown)}",
                          path=path, key=f"{section}.{unknown[0]}")
    merged = dict(defaults)
    for key, value in table.items():
        default = defaults[key]
        if default is not None and not _type_ok(value, default):
            raise ConfigError(
                f"[{section}] {key} must be {type(default).__name__} (got {value!r})",
                path=path, key=f"{section}.{key}",
            )
        merged[key] = float(value) if isinstance(default, float) else value
    return merged


def _type_ok(value: Any, default: Any) -> bool:
    if isinstance(default, bool):
        return isinstance(value, bool)
    if isinstance(default, float):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if isinstance(default, int):
        return isinstance(value, int) and not isinstance(value, bool)
    return isinstance(value, type(default))


def dump_toml(data: dict) -> str:
    """Render nested dicts of scalars and lists as TOML.

    Top-level scalars come first, then one ``[table]`` per nested dict (recursively, dotted).
    ``None`` values are omitted. Sufficient for config snapshots; not a general TOML writer.
    """
    lines: list[str] = []
    _dump_table(data, [], lines)
    return "\n".join(lines).strip() + "\n"


def _dump_table(table: dict, prefix: list[str], lines: list[str]) -> None:
    scalars = {k: v for k, v in table.items() if not isinstance(v, dict) and v is not None}
    tables = {k: v for k, v in table.items() if isinstance(v, dict)}
    if prefix and (scalars or not tables):
        lines.append(f"[{'.'.join(prefix)}]")
    for key, value in scalars.items():
        lines.append(f"{key} = {_toml_value(value)}")
    if scalars:
        lines.append("")
    for key, sub in tables.items():
        _dump_table(sub, [*prefix, key], lines)


def _toml_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, (str, Path)):
        escaped = str(value).replace("\\", "\\\\").replace('"', '\\"')
        return f'"{escaped}"'
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    raise ConfigError(f"cannot render {type(value).__name__} as TOML")


def write_atomic(path: str | Path, body: str | bytes) -> Path:
    """Write ``body`` to ``path`` via a same-directory temp file and ``os.replace``.

    A crash mid-write never leaves a truncated file behind.
    """
    dest = Path(path)
    dest.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(dir=str(dest.parent), prefix=f".{dest.name}-", suffix=".tmp")
    tmp = Path(tmp_name)
    try:
        mode = "wb" if isinstance(body, bytes) else "w"
        with os.fdopen(fd, mode) as fh:
            fh.write(body)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, dest)
    except BaseException:
        tmp.unlink(missing_ok=True)
        raise
    return dest
