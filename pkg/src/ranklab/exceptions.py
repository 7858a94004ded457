"""Library exception hierarchy. All errors derive from RanklabError so callers can catch broadly."""

from __future__ import annotations


class RanklabError(Exception):
    """Base class for all ranklab errors."""


class ConfigError(RanklabError):
    """Invalid, missing or unknown configuration value.

    Attributes:
        path: Config file the value came from, if any.
        key: Dotted key (``training.batch_size``) that failed validation.
    """

    def __init__(self, message: str, *, path: str | None = None, key: str | None = None) -> None:
        super().__init__(message)
        self.path = path
        self.key = key


class DataError(RanklabError):
    """Malformed corpus, query, run or qrels input."""

    def __init__(self, message: str, *, path: str | None = None, line: int | None = None) -> None:
        if path is not None:
            where = f"{path}:{line}" if line is not None else path
            message = f"{where}: {message}"
        super().__init__(message)
        self.path = path
        self.line = line


class TokenizerError(RanklabError):
    """Vocabulary construction failed or a vocab file is invalid."""


class ChunkingError(RanklabError):
    """Partitioning or input assembly failed.

    Attributes:
        chunk_index: Offending chunk for capacity violations, else None.
    """

    def __init__(self, message: str, *, chunk_index: int | None = None) -> None:
        super().__init__(message)
        self.chunk_index = chunk_index


class ShapeError(RanklabError):
    """Operands of a tensor op have incompatible shapes."""

    def __init__(self, op: str, *shapes: tuple[int, ...], detail: str = "") -> None:
        rendered = " vs ".join(str(tuple(s)) for s in shapes)
        msg = f"{op}: incompatible shapes {rendered}" if shapes else f"{op}: invalid input"
        if detail:
            msg = f"{msg} ({detail})"
        super().__init__(msg)
        self.op = op
        self.shapes = shapes


class CheckpointError(RanklabError):
    """Checkpoint file is unreadable, truncated or does not match the model."""

    def __init__(self, message: str, *, path: str | None = None) -> None:
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


class AggregatorError(RanklabError):
    """Score head misconfigured or called with missing inputs."""


class TrainingDiverged(RanklabError):
    """Loss became non-finite during training.

    Attributes:
        step: Optimizer step (1-based) at which the loss was observed.
        loss: The offending loss value.
    """

    def __init__(self, message: str, *, step: int, loss: float) -> None:
        super().__init__(message)
        self.step = step
        self.loss = loss


class EvaluationError(RanklabError):
    """Metric or significance computation cannot proceed."""


class NoRelevantDocuments(EvaluationError):
    """Query has no positive judgment; excluded from graded metrics."""

    def __init__(self, query_id: str) -> None:
        super().__init__(f"query {query_id!r} has no positive judgment")
        self.query_id = query_id


class AnalysisError(RanklabError):
    """Passage matching or position-distribution analysis failed."""


class SyntheticError(RanklabError):
    """Synthetic corpus settings are invalid or infeasible."""


class JobError(RanklabError):
    """A worker job could not be run or its result could not be decoded."""


class RemoteJobError(JobError):
    """A job raised inside its worker; carries the worker-side traceback."""

    def __init__(self, message: str, *, remote_type: str, remote_traceback: str) -> None:
        super().__init__(message)
        self.remote_type = remote_type
        self.remote_traceback = remote_traceback

    def __str__(self) -> str:
        base = super().__str__()
        return f"{self.remote_type}: {base}\n\nRemote traceback:\n{self.remote_traceback}"


class ExperimentFailed(RanklabError):
    """One or more experiment jobs failed. Completed jobs are already on disk.

    Attributes:
        failures: ``[{"job": ..., "type": ..., "message": ...}, ...]``.
        run_dir: Run directory holding partial results and ``failures.json``.
    """

    def __init__(self, message: str, *, failures: list[dict], run_dir: str | None = None) -> None:
        super().__init__(message)
        self.failures = failures
        self.run_dir = run_dir
