"""Pairwise margin training with AdamW and warm-up schedules.

One epoch draws one (positive, negative) pair per eligible query. ``batch_size``
counts documents, so a step processes ``batch_size // 2`` pairs; pair losses are
summed and their gradients accumulated before a single optimizer update.
"""

from __future__ import annotations

import json
import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ranklab._config import write_atomic
from ranklab._log import log
from ranklab.evaluation import Judgments, RankedList
from ranklab.exceptions import ConfigError, TrainingDiverged
from ranklab.ranker import Ranker
from ranklab.tensor import Tensor, as_tensor, no_grad, relu
from ranklab.tokenize import TokenSeq

CONSTANT_WARMUP = "constant_warmup"
ONE_CYCLE = "one_cycle"
SCHEDULES = (CONSTANT_WARMUP, ONE_CYCLE)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    lr_main: float = 1e-5
    lr_other: float = 1e-4
    weight_decay: float = 1e-7
    warmup_frac: float = 0.2
    schedule: str = CONSTANT_WARMUP
    margin: float = 1.0
    seed: int = 0
    epochs: int = 1
    top_k: int = 100
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self) -> None:
        if not 0.0 < self.warmup_frac < 1.0:
            raise ConfigError(f"warmup_frac must be in (0, 1) (got {self.warmup_frac})",
                              key="training.warmup_frac")
        if self.batch_size < 2 or self.batch_size % 2:
            raise ConfigError(f"batch_size must be even and >= 2 (got {self.batch_size})",
                              key="training.batch_size")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"schedule must be one of {', '.join(SCHEDULES)} "
                              f"(got {self.schedule!r})", key="training.schedule")
        if self.epochs < 1 or self.top_k < 1:
            raise ConfigError("epochs and top_k must be >= 1")

    @property
    def pairs_per_step(self) -> int:
        return self.batch_size // 2


@dataclass(frozen=True)
class CandidateList:
    query_id: str
    items: tuple[tuple[str, float], ...]
    top_k: int = 100

    def __post_init__(self) -> None:
        ids = [d for d, _ in self.items]
        if len(set(ids)) != len(ids):
            raise ConfigError(f"duplicate candidates for query {self.query_id!r}")
        scores = [s for _, s in self.items]
        if any(a < b for a, b in zip(scores, scores[1:])):
            raise ConfigError(f"candidates for query {self.query_id!r} are not in descending "
                              "generator-score order")

    @classmethod
    def from_ranked(cls, ranked: RankedList, top_k: int = 100) -> CandidateList:
        return cls(ranked.query_id, ranked.items[:top_k], top_k)

    @property
    def doc_ids(self) -> list[str]:
        return [d for d, _ in self.items[: self.top_k]]


@dataclass(frozen=True)
class TrainingPair:
    query_id: str
    positive: str
    negative: str


@dataclass
class EpochSample:
    pairs: list[TrainingPair]
    skipped: int


@dataclass
class TrainingData:
    queries: Mapping[str, TokenSeq]
    docs: Mapping[str, TokenSeq]
    judgments: Judgments
    candidates: Mapping[str, CandidateList]


@dataclass
class TrainResult:
    steps: int
    records: list[dict] = field(default_factory=list)
    skipped: int = 0

    @property
    def losses(self) -> list[float]:
        return [r["loss"] for r in self.records]


# ────────────────────────── sampling ──────────────────────────


def sample_epoch(
    queries: Sequence[str],
    judgments: Judgments,
    candidates: Mapping[str, CandidateList],
    seed: int,
    epoch: int = 0,
) -> EpochSample:
    """One (query, positive, negative) per eligible query, in seed-shuffled query order.

    Negatives are drawn uniformly from the query's top-k candidates not judged relevant.
    """
    rng = np.random.default_rng([seed, epoch])
    order = sorted(queries)
    perm = rng.permutation(len(order))
    pairs: list[TrainingPair] = []
    skipped = 0
    for i in perm:
        qid = order[i]
        positives = sorted(judgments.relevant(qid))
        cands = candidates.get(qid)
        negatives = [d for d in cands.doc_ids if d not in positives] if cands else []
        if not positives or not negatives:
            skipped += 1
            continue
        pos = positives[int(rng.integers(len(positives)))]
        neg = negatives[int(rng.integers(len(negatives)))]
        pairs.append(TrainingPair(qid, pos, neg))
    return EpochSample(pairs, skipped)


# ────────────────────────── loss and optimizer ──────────────────────────


def pairwise_margin_loss(score_pos, score_neg, margin: float = 1.0) -> Tensor:
    """``max(0, margin - score_pos + score_neg)``."""
    return relu(margin - as_tensor(score_pos) + as_tensor(score_neg))


def lr_multiplier(schedule: str, t: float, total: float, warmup_frac: float) -> float:
    """Linear warm-up from 0 to 1, then a plateau (constant) or linear decay to 0 (one_cycle)."""
    if not 0 <= t <= total:
        raise ConfigError(f"step {t} outside [0, {total}]")
    warm = warmup_frac * total
    if t < warm:
        return t / warm
    if schedule == CONSTANT_WARMUP:
        return 1.0
    if schedule == ONE_CYCLE:
        rest = total - warm
        return (total - t) / rest if rest > 0 else 0.0
    raise ConfigError(f"unknown schedule {schedule!r}")


@dataclass
class AdamState:
    moments: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    step: int = 0


def adamw_step(
    groups: Mapping[str, Sequence[tuple[str, Tensor]]],
    state: AdamState,
    config: TrainConfig,
    multiplier: float = 1.0,
) -> None:
    """One AdamW update: ``main`` uses ``lr_main * multiplier``, ``other`` uses
    ``lr_other * multiplier``; weight decay is decoupled from the gradient."""
    state.step += 1
    t = state.step
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    base = {"main": config.lr_main, "other": config.lr_other}
    with no_grad():
        for group, named in groups.items():
            lr = base[group] * multiplier
            for name, p in named:
                if p.grad is None:
                    continue
                g = p.grad
                m, v = state.moments.get(name, (np.zeros_like(p.data), np.zeros_like(p.data)))
                m = b1 * m + (1.0 - b1) * g
                v = b2 * v + (1.0 - b2) * g * g
                state.moments[name] = (m, v)
                if config.weight_decay:
                    p.data = p.data * (1.0 - lr * config.weight_decay)
                p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + config.adam_eps)


# ────────────────────────── training loop ──────────────────────────


def plan_epochs(data: TrainingData, config: TrainConfig) -> list[EpochSample]:
    cands = {q: CandidateList(c.query_id, c.items, min(c.top_k, config.top_k))
             for q, c in data.candidates.items()}
    return [sample_epoch(list(data.queries), data.judgments, cands, config.seed, e)
            for e in range(config.epochs)]


def train(
    ranker: Ranker,
    data: TrainingData,
    config: TrainConfig,
    *,
    init_checkpoint: str | Path | None = None,
    checkpoint_path: str | Path | None = None,
    log_path: str | Path | None = None,
) -> TrainResult:
    """Train ``ranker`` in place. Deterministic given ``config.seed``, data and config."""
    if not ranker.params:
        ranker.initialize(config.seed)
    if init_checkpoint is not None:
        log(f"{ranker.spec.name}: fine-tuning from {init_checkpoint}")
        ranker.load(init_checkpoint)

    epochs = plan_epochs(data, config)
    pps = config.pairs_per_step
    total = sum(math.ceil(len(e.pairs) / pps) for e in epochs)
    groups = ranker.param_groups()
    state = AdamState()
    dropout_rng = np.random.default_rng([config.seed, 1])
    result = TrainResult(steps=total, skipped=sum(e.skipped for e in epochs))
    log(f"{ranker.spec.name}: {total} steps over {config.epochs} epoch(s), "
        f"{result.skipped} query skips")

    step = 0
    for epoch_no, epoch in enumerate(epochs):
        for start in range(0, len(epoch.pairs), pps):
            batch = epoch.pairs[start:start + pps]
            ranker.zero_grad()
            batch_loss = 0.0
            for pair in batch:
                q = data.queries[pair.query_id]
                sp = ranker.score(q, data.docs[pair.positive], training=True, rng=dropout_rng)
                sn = ranker.score(q, data.docs[pair.negative], training=True, rng=dropout_rng)
                loss = pairwise_margin_loss(sp, sn, config.margin)
                value = loss.item()
                if not math.isfinite(value):
                    raise TrainingDiverged(
                        f"{ranker.spec.name}: non-finite loss {value} at step {step + 1} "
                        f"(query {pair.query_id}, pos {pair.positive}, neg {pair.negative})",
                        step=step + 1, loss=value,
                    )
                loss.backward()
                batch_loss += value
            mult = lr_multiplier(config.schedule, step, total, config.warmup_frac)
            adamw_step(groups, state, config, mult)
            step += 1
            result.records.append({
                "step": step,
                "epoch": epoch_no,
                "loss": batch_loss,
                "lr_main_mult": mult,
                "lr_other_mult": mult,
                "skipped": epoch.skipped,
            })
            if step % 50 == 0 or step == total:
                log(f"{ranker.spec.name}: step {step}/{total} loss={batch_loss:.4f}")
    ranker.zero_grad()

    if log_path is not None:
        write_train_log(log_path, result.records)
    if checkpoint_path is not None:
        ranker.save(checkpoint_path)
    return result


def write_train_log(path: str | Path, records: Sequence[dict]) -> Path:
    return write_atomic(path, "".join(json.dumps(r, sort_keys=True) + "\n" for r in records))


def read_train_log(path: str | Path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
