"""Run independent jobs inline or on a process pool behind one result envelope.

Each job travels as a cloudpickle blob of ``(fn, args, kwargs)``. The worker calls
``fn(*args, **kwargs)`` and returns a cloudpickled envelope::

    {"ok": True, "result": value}
    {"ok": False, "error": {"type": ..., "message": ..., "traceback": ...}}

:func:`parse_result` turns a failure envelope into :class:`RemoteJobError` carrying the
worker traceback. ``workers == 1`` runs every job in-process through the same
pack/run/parse path, so results and error reporting do not depend on the pool.

The blobs only ever travel between this process and workers it spawned; never
feed :func:`parse_result` payloads from another origin.
"""

from __future__ import annotations

import traceback
from collections.abc import Callable, Sequence
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import cloudpickle

from ranklab._config import get_config
from ranklab.exceptions import JobError, RemoteJobError


def pack_call(fn: Callable, args: tuple, kwargs: dict | None = None) -> bytes:
    return cloudpickle.dumps((fn, args, kwargs or {}))


def run_packed(blob: bytes) -> bytes:
    """Worker side: unpack, call, and envelope the outcome. Never raises."""
    try:
        fn, args, kwargs = cloudpickle.loads(blob)
        payload = {"ok": True, "result": fn(*args, **kwargs)}
    except BaseException as exc:
        payload = {
            "ok": False,
            "error": {
                "type": type(exc).__name__,
                "message": str(exc),
                "traceback": traceback.format_exc(),
            },
        }
    try:
        return cloudpickle.dumps(payload)
    except Exception:
        return cloudpickle.dumps({
            "ok": False,
            "error": {
                "type": "ResultSerializationError",
                "message": "job result was not cloudpickle-serializable",
                "traceback": traceback.format_exc(),
            },
        })


def parse_result(blob: bytes) -> object:
    """Return the job's value, or raise :class:`RemoteJobError` if it raised."""
    if not blob:
        raise JobError("empty result payload")
    try:
        payload = cloudpickle.loads(blob)
    except Exception as e:
        raise JobError(f"failed to decode result payload: {e}") from e
    if not isinstance(payload, dict) or "ok" not in payload:
        raise JobError(f"unexpected payload shape: {payload!r}")
    if payload["ok"]:
        return payload["result"]
    err = payload.get("error") or {}
    raise RemoteJobError(
        err.get("message", "job raised"),
        remote_type=err.get("type", "Exception"),
        remote_traceback=err.get("traceback", ""),
    )


@dataclass
class JobOutcome:
    index: int
    value: object = None
    error: JobError | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


def map_jobs(
    fn: Callable,
    items: Sequence[tuple],
    workers: int | None = None,
) -> list[JobOutcome]:
    """Call ``fn(*item)`` for every item; outcomes come back in input order."""
    n = len(items)
    workers = workers or get_config().workers
    blobs = [pack_call(fn, tuple(item)) for item in items]
    if workers <= 1 or n <= 1:
        return [_outcome(i, run_packed(blob)) for i, blob in enumerate(blobs)]
    outcomes: list[JobOutcome] = []
    with ProcessPoolExecutor(max_workers=min(workers, n)) as pool:
        futures = [pool.submit(run_packed, blob) for blob in blobs]
        for i, fut in enumerate(futures):
            try:
                outcomes.append(_outcome(i, fut.result()))
            except Exception as e:
                outcomes.append(JobOutcome(i, error=JobError(f"worker failed: {e}")))
    return outcomes


def _outcome(index: int, blob: bytes) -> JobOutcome:
    try:
        return JobOutcome(index, value=parse_result(blob))
    except JobError as e:
        return JobOutcome(index, error=e)


def unwrap(outcomes: Sequence[JobOutcome]) -> list[object]:
    """Values of all outcomes; raises the first failure."""
    for o in outcomes:
        if o.error is not None:
            raise o.error
    return [o.value for o in outcomes]
