"""Tests for the autodiff core: op gradients, graph accumulation and checkpoints."""

from __future__ import annotations

import numpy as np
import pytest

from ranklab.exceptions import CheckpointError, RanklabError, ShapeError
from ranklab.tensor import (
    CHECKPOINT_MAGIC,
    Tensor,
    concat,
    dropout,
    embedding_lookup,
    exp,
    gelu,
    getitem,
    gradcheck,
    l2_normalize,
    layer_norm,
    load_checkpoint,
    log,
    matmul,
    mean,
    no_grad,
    relu,
    reshape,
    save_checkpoint,
    softmax,
    stack,
    standardize,
    tensor,
    tmax,
    transpose,
    tsum,
)

TOL = 1e-4


def _param(rng, *shape, low=-1.0, high=1.0) -> Tensor:
    return Tensor(rng.uniform(low, high, shape), requires_grad=True)


def _weights(rng, shape) -> np.ndarray:
    # Fixed random projection so every op is checked through a scalar loss.
    return rng.normal(size=shape)


# ────────────────────────── gradient checks ──────────────────────────


UNARY = {
    "exp": lambda x: exp(x),
    "log": lambda x: log(x),
    "relu": lambda x: relu(x),
    "gelu": lambda x: gelu(x),
    "softmax": lambda x: softmax(x, axis=-1),
    "standardize": lambda x: standardize(x, axis=-1),
    "l2_normalize": lambda x: l2_normalize(x, axis=-1),
    "sum_axis": lambda x: tsum(x, axis=0, keepdims=True),
    "mean_axis": lambda x: mean(x, axis=1),
    "max_axis": lambda x: tmax(x, axis=1),
    "transpose": lambda x: transpose(x),
    "reshape": lambda x: reshape(x, (x.size,)),
    "slice": lambda x: getitem(x, (slice(1, 3), [0, 0, 2])),
    "neg_div": lambda x: -(x / 3.0) + 1.0 / (x * x + 1.0),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_gradients(name):
    fn = UNARY[name]
    for seed in range(20):
        rng = np.random.default_rng(seed)
        low = 0.2 if name == "log" else -1.0
        x = _param(rng, 3, 4, low=low)
        if name in ("relu", "max_axis"):
            # Stay away from kinks and ties.
            x.data = np.sign(x.data) * (0.1 + np.abs(x.data)) + rng.normal(0, 1e-3, x.shape)
        probe = np.asarray(fn(x).data)
        w = _weights(rng, probe.shape)
        assert gradcheck(lambda t: tsum(fn(t) * w), [x]) < TOL


def test_binary_broadcast_gradients():
    for seed in range(20):
        rng = np.random.default_rng(seed)
        a = _param(rng, 2, 3, 4)
        b = _param(rng, 4)
        c = _param(rng, 3, 1)
        w = _weights(rng, (2, 3, 4))
        assert gradcheck(lambda x, y, z: tsum(((x + y) * z - y / (z * z + 1.0)) * w),
                         [a, b, c]) < TOL


def test_matmul_gradients_batched_and_vector():
    for seed in range(20):
        rng = np.random.default_rng(seed)
        a = _param(rng, 2, 3, 4)
        b = _param(rng, 4, 5)
        v = _param(rng, 5)
        w = _weights(rng, (2, 3))
        assert gradcheck(lambda x, y, z: tsum(matmul(matmul(x, y), z) * w), [a, b, v]) < TOL


def test_masked_softmax_gradients():
    rng = np.random.default_rng(0)
    mask = np.array([[True, False, True, True], [False, False, False, False], [True] * 4])
    x = _param(rng, 3, 4)
    w = _weights(rng, (3, 4))
    assert gradcheck(lambda t: tsum(softmax(t, -1, mask) * w), [x]) < TOL


def test_layer_norm_gradients():
    for seed in range(20):
        rng = np.random.default_rng(seed)
        x = _param(rng, 3, 6)
        g = _param(rng, 6)
        b = _param(rng, 6)
        w = _weights(rng, (3, 6))
        assert gradcheck(lambda t, gg, bb: tsum(layer_norm(t, gg, bb) * w), [x, g, b]) < TOL


def test_concat_stack_embedding_gradients():
    rng = np.random.default_rng(4)
    a = _param(rng, 2, 3)
    b = _param(rng, 1, 3)
    table = _param(rng, 5, 3)
    ids = np.array([[0, 4, 4], [2, 1, 0]])
    w1 = _weights(rng, (3, 3))
    w2 = _weights(rng, (2, 2, 3))
    w3 = _weights(rng, (2, 3, 3))

    def fn(x, y, t):
        return (tsum(concat([x, y], axis=0) * w1) + tsum(stack([x, x * y], axis=0) * w2)
                + tsum(embedding_lookup(t, ids) * w3))

    assert gradcheck(fn, [a, b, table]) < TOL


def test_dropout_gradient_uses_same_mask():
    rng = np.random.default_rng(5)
    x = _param(rng, 4, 4)
    w = _weights(rng, (4, 4))
    assert gradcheck(lambda t: tsum(dropout(t, 0.3, rng=7) * w), [x]) < TOL


# ────────────────────────── semantics ──────────────────────────


def test_fully_masked_softmax_row_is_zero():
    y = softmax(tensor(np.ones((2, 3))), -1, np.array([[False] * 3, [True, False, True]]))
    assert np.all(y.data[0] == 0.0)
    assert y.data[1].tolist() == [0.5, 0.0, 0.5]


def test_max_gradient_goes_to_first_maximum():
    x = Tensor(np.array([1.0, 3.0, 3.0]), requires_grad=True)
    tmax(x, axis=0).backward()
    assert x.grad.tolist() == [0.0, 1.0, 0.0]


def test_backward_accumulates_until_zero_grad():
    x = Tensor(np.array([2.0]), requires_grad=True)
    (x * x).sum().backward()
    (x * x).sum().backward()
    assert x.grad.tolist() == [8.0]
    x.zero_grad()
    assert x.grad is None


def test_shared_subgraph_gradients_add():
    x = Tensor(np.array(3.0), requires_grad=True)
    y = x * 2.0
    (y * y + y).backward()
    assert x.grad == pytest.approx(2 * 2 * 6.0 + 2.0)


def test_backward_needs_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(RanklabError, match="scalar loss"):
        (x * 2).backward()


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = x * 2
    assert not y.requires_grad


def test_shape_errors_name_the_op():
    with pytest.raises(ShapeError, match="matmul"):
        matmul(tensor(np.ones((2, 3))), tensor(np.ones((2, 3))))
    with pytest.raises(ShapeError, match="add"):
        tensor(np.ones((2, 3))) + tensor(np.ones((4,)))


def test_dropout_identity_when_not_training():
    x = tensor(np.ones(5))
    assert dropout(x, 0.5, rng=0, training=False) is x
    with pytest.raises(RanklabError, match="dropout p"):
        dropout(x, 1.0)


def test_l2_normalize_zero_vector():
    x = Tensor(np.zeros((1, 3)), requires_grad=True)
    y = l2_normalize(x)
    assert np.all(y.data == 0)
    y.sum().backward()
    assert np.all(x.grad == 0)


# ────────────────────────── checkpoints ──────────────────────────


def test_checkpoint_round_trip_is_exact(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {"encoder.tok_emb": rng.normal(size=(5, 3)), "head.F.bias": np.zeros(1),
               "scalar": np.array(2.5)}
    path = save_checkpoint(tmp_path / "m.ckpt", tensors)
    loaded = load_checkpoint(path)
    assert list(loaded) == list(tensors)
    for name, value in tensors.items():
        assert loaded[name].shape == value.shape
        assert np.array_equal(loaded[name], value)
    assert path.read_bytes().startswith(CHECKPOINT_MAGIC)


def test_checkpoint_bytes_are_deterministic(tmp_path):
    tensors = {"a": np.arange(6.0).reshape(2, 3)}
    a = save_checkpoint(tmp_path / "a.ckpt", tensors).read_bytes()
    b = save_checkpoint(tmp_path / "b.ckpt", {"a": Tensor(np.arange(6.0).reshape(2, 3))})
    assert a == b.read_bytes()


def test_checkpoint_errors(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"nope")
    with pytest.raises(CheckpointError, match="bad magic"):
        load_checkpoint(bad)

    good = save_checkpoint(tmp_path / "good.ckpt", {"w": np.ones((4, 4))}).read_bytes()
    (tmp_path / "short.ckpt").write_bytes(good[:-8])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(tmp_path / "short.ckpt")
    (tmp_path / "long.ckpt").write_bytes(good + b"\x00")
    with pytest.raises(CheckpointError, match="trailing bytes"):
        load_checkpoint(tmp_path / "long.ckpt")
    with pytest.raises(CheckpointError, match="no such checkpoint"):
        load_checkpoint(tmp_path / "missing.ckpt")
