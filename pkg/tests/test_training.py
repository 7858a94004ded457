"""Tests for pair sampling, margin loss, schedules, AdamW grouping and the training loop."""

from __future__ import annotations

import numpy as np
import pytest

from ranklab.aggregators import MAX_P, AggregatorConfig
from ranklab.chunking import ChunkingConfig
from ranklab.encoder import EncoderConfig
from ranklab.evaluation import Judgments, RankedList
from ranklab.exceptions import ConfigError, TrainingDiverged
from ranklab.ranker import ModelSpec, Ranker
from ranklab.tensor import Tensor
from ranklab.tokenize import SPECIALS, TokenSeq, Vocab
from ranklab.training import (
    CONSTANT_WARMUP,
    ONE_CYCLE,
    AdamState,
    CandidateList,
    TrainConfig,
    TrainingData,
    adamw_step,
    lr_multiplier,
    pairwise_margin_loss,
    read_train_log,
    sample_epoch,
    train,
)

VOCAB = Vocab(SPECIALS + tuple(f"w{i}" for i in range(16)))
SPEC = ModelSpec(
    "toy",
    AggregatorConfig(kind=MAX_P),
    EncoderConfig(layers=1, heads=2, model_dim=8, ff_dim=16, max_seq=20, dropout=0.1),
    ChunkingConfig(chunk_size=8, max_chunks=2, max_query_len=3, max_seq=20),
)


def _seq(*ids: int) -> TokenSeq:
    return TokenSeq(tuple(ids), tuple((i, i + 1) for i in range(len(ids))))


def _cands(qid: str, doc_ids: list[str]) -> CandidateList:
    n = len(doc_ids)
    return CandidateList(qid, tuple((d, float(n - i)) for i, d in enumerate(doc_ids)))


def _toy_data(num_queries: int = 2) -> TrainingData:
    """Each query ``qN`` is tokens (5, 6+N); its positive repeats them, negatives do not."""
    queries, docs, cands = {}, {}, {}
    judgments = Judgments()
    for n in range(num_queries):
        qid = f"q{n}"
        a, b = 5, 6 + n
        queries[qid] = _seq(a, b)
        docs[f"{qid}_pos"] = _seq(a, b, a, b, 12, 13, a, b)
        docs[f"{qid}_neg1"] = _seq(14, 15, 16, 17, 18, 19)
        docs[f"{qid}_neg2"] = _seq(17, 18, 12, 13, 16, 19, 14)
        judgments.add(qid, f"{qid}_pos", 1)
        cands[qid] = _cands(qid, [f"{qid}_neg1", f"{qid}_pos", f"{qid}_neg2"])
    return TrainingData(queries, docs, judgments, cands)


# ────────────────────────── sampling ──────────────────────────


def test_one_pair_per_eligible_query():
    judgments = Judgments({"q": {"pos": 1}})
    docs = ["pos"] + [f"n{i}" for i in range(99)]
    sample = sample_epoch(["q"], judgments, {"q": _cands("q", docs)}, seed=0)
    assert len(sample.pairs) == 1
    pair = sample.pairs[0]
    assert pair.positive == "pos"
    assert pair.negative in docs[1:]
    assert sample.skipped == 0


def test_query_without_positive_is_skipped():
    judgments = Judgments({"a": {"x": 1}, "b": {"y": 0}})
    cands = {"a": _cands("a", ["x", "z"]), "b": _cands("b", ["y", "z"])}
    sample = sample_epoch(["a", "b"], judgments, cands, seed=0)
    assert [p.query_id for p in sample.pairs] == ["a"]
    assert sample.skipped == 1


def test_query_without_negative_is_skipped():
    judgments = Judgments({"a": {"x": 1}})
    sample = sample_epoch(["a"], judgments, {"a": _cands("a", ["x"])}, seed=0)
    assert sample.pairs == []
    assert sample.skipped == 1


def test_sampling_is_seeded():
    judgments = Judgments({f"q{i}": {"p": 1} for i in range(20)})
    cands = {f"q{i}": _cands(f"q{i}", ["p"] + [f"n{j}" for j in range(10)]) for i in range(20)}
    qs = list(judgments.queries())
    a = sample_epoch(qs, judgments, cands, seed=4)
    b = sample_epoch(list(reversed(qs)), judgments, cands, seed=4)
    c = sample_epoch(qs, judgments, cands, seed=5)
    assert a.pairs == b.pairs
    assert a.pairs != c.pairs


def test_negatives_respect_top_k():
    judgments = Judgments({"q": {"p": 1}})
    docs = ["p", "n0", "n1"] + [f"far{i}" for i in range(50)]
    cands = {"q": CandidateList("q", tuple((d, float(-i)) for i, d in enumerate(docs)), top_k=3)}
    for seed in range(30):
        assert sample_epoch(["q"], judgments, cands, seed).pairs[0].negative in ("n0", "n1")


def test_candidate_list_validation():
    with pytest.raises(ConfigError, match="duplicate candidates"):
        CandidateList("q", (("a", 2.0), ("a", 1.0)))
    with pytest.raises(ConfigError, match="descending"):
        CandidateList("q", (("a", 1.0), ("b", 2.0)))
    ranked = RankedList.from_scores("q", [("a", 1.0), ("b", 3.0), ("c", 2.0)])
    assert CandidateList.from_ranked(ranked, top_k=2).doc_ids == ["b", "c"]


# ────────────────────────── loss and schedule ──────────────────────────


@pytest.mark.parametrize(("pos", "neg", "expected"), [(2.0, 0.5, 0.0), (0.5, 0.5, 1.0),
                                                     (0.0, 0.7, 1.7)])
def test_margin_loss(pos, neg, expected):
    assert pairwise_margin_loss(pos, neg, 1.0).item() == pytest.approx(expected)


def test_satisfied_margin_has_zero_gradient():
    sp = Tensor(np.array(3.0), requires_grad=True)
    sn = Tensor(np.array(0.0), requires_grad=True)
    pairwise_margin_loss(sp, sn).backward()
    assert sp.grad == 0.0
    assert sn.grad == 0.0


@pytest.mark.parametrize(("schedule", "t", "expected"), [
    (CONSTANT_WARMUP, 0, 0.0),
    (CONSTANT_WARMUP, 10, 0.5),
    (CONSTANT_WARMUP, 50, 1.0),
    (CONSTANT_WARMUP, 100, 1.0),
    (ONE_CYCLE, 0, 0.0),
    (ONE_CYCLE, 20, 1.0),
    (ONE_CYCLE, 60, 0.5),
    (ONE_CYCLE, 100, 0.0),
])
def test_lr_multiplier_closed_forms(schedule, t, expected):
    assert lr_multiplier(schedule, t, 100, 0.2) == pytest.approx(expected)


def test_lr_multiplier_rejects_out_of_range_step():
    with pytest.raises(ConfigError, match="outside"):
        lr_multiplier(CONSTANT_WARMUP, 101, 100, 0.2)


def test_train_config_validation():
    with pytest.raises(ConfigError, match="warmup_frac") as excinfo:
        TrainConfig(warmup_frac=0.0)
    assert excinfo.value.key == "training.warmup_frac"
    with pytest.raises(ConfigError, match="batch_size"):
        TrainConfig(batch_size=3)
    with pytest.raises(ConfigError, match="schedule"):
        TrainConfig(schedule="cosine")
    assert TrainConfig(batch_size=16).pairs_per_step == 8


# ────────────────────────── optimizer ──────────────────────────


def _groups(grad_main, grad_other):
    main = Tensor(np.ones(3), requires_grad=True)
    other = Tensor(np.ones(3), requires_grad=True)
    main.grad = np.asarray(grad_main, dtype=np.float64)
    other.grad = np.asarray(grad_other, dtype=np.float64)
    return {"main": [("encoder.w", main)], "other": [("head.F.weight", other)]}, main, other


def test_zero_gradient_without_decay_leaves_params():
    groups, main, other = _groups(np.zeros(3), np.zeros(3))
    adamw_step(groups, AdamState(), TrainConfig(weight_decay=0.0))
    assert main.data.tolist() == [1.0, 1.0, 1.0]
    assert other.data.tolist() == [1.0, 1.0, 1.0]


def test_zero_multiplier_leaves_params():
    groups, main, _ = _groups(np.ones(3), np.ones(3))
    adamw_step(groups, AdamState(), TrainConfig(), multiplier=0.0)
    assert main.data.tolist() == [1.0, 1.0, 1.0]


def test_first_step_moves_by_learning_rate():
    # bias-corrected Adam's first step is lr * sign(g) up to eps
    groups, main, other = _groups([2.0, -3.0, 0.5], [1.0, 1.0, 1.0])
    config = TrainConfig(lr_main=1e-3, lr_other=1e-2, weight_decay=0.0)
    adamw_step(groups, AdamState(), config)
    assert np.allclose(main.data, [1 - 1e-3, 1 + 1e-3, 1 - 1e-3], atol=1e-9)
    assert np.allclose(other.data, 1 - 1e-2, atol=1e-9)


def test_lr_other_does_not_change_main_update():
    a_groups, a_main, a_other = _groups([0.3, -1.0, 2.0], [1.0, 2.0, 3.0])
    b_groups, b_main, b_other = _groups([0.3, -1.0, 2.0], [1.0, 2.0, 3.0])
    adamw_step(a_groups, AdamState(), TrainConfig(lr_other=1e-4))
    adamw_step(b_groups, AdamState(), TrainConfig(lr_other=5e-2))
    assert np.array_equal(a_main.data, b_main.data)
    assert not np.array_equal(a_other.data, b_other.data)


def test_weight_decay_is_decoupled():
    groups, main, _ = _groups(np.zeros(3), np.zeros(3))
    adamw_step(groups, AdamState(), TrainConfig(lr_main=0.1, weight_decay=0.5))
    assert np.allclose(main.data, 1.0 - 0.1 * 0.5)


# ────────────────────────── training loop ──────────────────────────


def test_training_is_deterministic(tmp_path):
    data = _toy_data()
    config = TrainConfig(batch_size=2, lr_main=1e-3, lr_other=1e-2, epochs=2, seed=3)
    a = train(Ranker(SPEC, VOCAB), data, config, checkpoint_path=tmp_path / "a.ckpt")
    b = train(Ranker(SPEC, VOCAB), data, config, checkpoint_path=tmp_path / "b.ckpt")
    assert a.losses == b.losses
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_training_log_records(tmp_path):
    data = _toy_data(3)
    config = TrainConfig(batch_size=2, epochs=2)
    result = train(Ranker(SPEC, VOCAB), data, config, log_path=tmp_path / "log.jsonl")
    records = read_train_log(tmp_path / "log.jsonl")
    assert result.steps == 6
    assert [r["step"] for r in records] == list(range(1, 7))
    assert {"loss", "lr_main_mult", "lr_other_mult", "skipped", "epoch"} <= set(records[0])
    assert records[0]["lr_main_mult"] == 0.0
    assert all(r["loss"] >= 0 for r in records)


def test_training_reduces_loss_on_separable_task():
    data = _toy_data(4)
    config = TrainConfig(batch_size=8, lr_main=3e-3, lr_other=3e-2, epochs=40, seed=1,
                         warmup_frac=0.1)
    ranker = Ranker(SPEC, VOCAB)
    result = train(ranker, data, config)
    assert np.mean(result.losses[-5:]) < np.mean(result.losses[:5])


def test_fine_tuning_starts_from_checkpoint(tmp_path):
    data = _toy_data()
    first = Ranker(SPEC, VOCAB).initialize(42)
    path = first.save(tmp_path / "init.ckpt")
    # zero learning rates: parameters stay at the checkpoint
    config = TrainConfig(batch_size=2, lr_main=0.0, lr_other=0.0, weight_decay=0.0)
    tuned = Ranker(SPEC, VOCAB)
    train(tuned, data, config, init_checkpoint=path)
    for name, value in first.state_dict().items():
        assert np.array_equal(tuned.params[name].data, value)


def test_nonfinite_loss_aborts():
    data = _toy_data()
    ranker = Ranker(SPEC, VOCAB).initialize(0)
    ranker.params["head.F.bias"].data[:] = np.nan
    with pytest.raises(TrainingDiverged, match="non-finite loss") as excinfo:
        train(ranker, data, TrainConfig(batch_size=2))
    assert excinfo.value.step == 1
