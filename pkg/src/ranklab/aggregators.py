"""Document-score heads over per-chunk encoder outputs.

Every head ends in a linear map ``F`` to a scalar. Heads that pool [CLS] vectors all
run ``F`` over a 2-D ``(rows, dim)`` input so a one-chunk document takes the exact
same arithmetic path whichever pooling is configured.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ranklab.encoder import init_layer_params, linear, transformer_layer
from ranklab.exceptions import AggregatorError
from ranklab.tensor import (
    Tensor,
    concat,
    exp,
    l2_normalize,
    layer_norm,
    log,
    matmul,
    reshape,
    softmax,
    transpose,
)

FIRST_P = "first_p"
AVG_P = "avg_p"
MAX_P = "max_p"
SUM_P = "sum_p"
PARADE_AVG = "parade_avg"
PARADE_MAX = "parade_max"
PARADE_ATTN = "parade_attn"
PARADE_TRANSF = "parade_transf"
LONG_P = "long_p"
CEDR_KNRM = "cedr_knrm"

KINDS = (FIRST_P, AVG_P, MAX_P, SUM_P, PARADE_AVG, PARADE_MAX, PARADE_ATTN, PARADE_TRANSF,
         LONG_P, CEDR_KNRM)

RANDOM_INIT = "random"
PRETRAINED_REUSE = "pretrained_reuse"

# mu in -0.9..0.9 step 0.2 with sigma 0.1, plus an exact-match kernel.
DEFAULT_KERNELS: tuple[tuple[float, float], ...] = tuple(
    (round(-0.9 + 0.2 * i, 1), 0.1) for i in range(10)
) + ((1.0, 1e-3),)

KNRM_FEATURE_SCALE = 0.01


@dataclass(frozen=True)
class AggregatorConfig:
    kind: str = FIRST_P
    aggregator_layers: int = 2
    aggregator_heads: int = 2
    aggregator_dim: int | None = None
    feed_query: bool = False
    init: str = RANDOM_INIT
    kernels: tuple[tuple[float, float], ...] = field(default=DEFAULT_KERNELS)

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise AggregatorError(f"unknown model kind {self.kind!r} (expected one of "
                                  f"{', '.join(KINDS)})")
        if self.feed_query and self.kind != PARADE_TRANSF:
            raise AggregatorError("feed_query is only valid for parade_transf")
        if not 2 <= self.aggregator_layers <= 6:
            raise AggregatorError(f"aggregator_layers must be in 2..6 "
                                  f"(got {self.aggregator_layers})")
        if self.init not in (RANDOM_INIT, PRETRAINED_REUSE):
            raise AggregatorError(f"init must be {RANDOM_INIT} or {PRETRAINED_REUSE} "
                                  f"(got {self.init!r})")
        if self.kind == CEDR_KNRM:
            _check_kernels(self.kernels)


@dataclass
class LinearHead:
    weight: Tensor
    bias: Tensor | None = None

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]


@dataclass
class ClsSet:
    cls_vectors: Tensor
    query_vectors: Tensor | None = None
    query_mask: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.cls_vectors.ndim != 2 or self.cls_vectors.shape[0] < 1:
            raise AggregatorError(f"cls_vectors must be (m >= 1, dim), got "
                                  f"{self.cls_vectors.shape}")
        if self.query_vectors is not None and self.query_mask is not None:
            if len(self.query_mask) != self.query_vectors.shape[0]:
                raise AggregatorError("query_mask length differs from query_vectors rows")

    @property
    def m(self) -> int:
        return self.cls_vectors.shape[0]


def _score_rows(F: LinearHead, rows: Tensor) -> Tensor:
    """``F`` over ``(n, dim)`` rows -> ``(n,)`` scores."""
    return reshape(F(rows), (rows.shape[0],))


# ────────────────────────── simple pooling heads ──────────────────────────


def score_first_p(encoded, F: LinearHead) -> Tensor:
    """``F(cls)`` of the first chunk. Accepts an EncodedChunk or a bare cls vector."""
    cls = getattr(encoded, "cls_vector", encoded)
    if cls.ndim == 2:
        cls = cls[0]
    return _score_rows(F, reshape(cls, (1, cls.shape[0])))[0]


def score_long_p(encoded, F: LinearHead) -> Tensor:
    """Whole-document sequence scored exactly like FirstP."""
    return score_first_p(encoded, F)


def score_max_sum(cls: ClsSet, F: LinearHead, mode: str = "max") -> Tensor:
    scores = _score_rows(F, cls.cls_vectors)
    if mode == "max":
        return scores.max(axis=0)
    if mode == "sum":
        return scores.sum(axis=0)
    raise AggregatorError(f"mode must be max or sum (got {mode!r})")


def score_avg_p(cls: ClsSet, F: LinearHead) -> Tensor:
    return _score_rows(F, cls.cls_vectors.mean(axis=0, keepdims=True))[0]


def parade_attention_weights(cls: ClsSet, C: Tensor) -> Tensor:
    """``softmax(C . cls_1, ..., C . cls_m)``."""
    logits = matmul(cls.cls_vectors, C)
    return softmax(logits, axis=0)


def score_parade_simple(cls: ClsSet, F: LinearHead, mode: str, C: Tensor | None = None) -> Tensor:
    if mode == "avg":
        pooled = cls.cls_vectors.mean(axis=0, keepdims=True)
    elif mode == "max":
        pooled = cls.cls_vectors.max(axis=0, keepdims=True)
    elif mode == "attn":
        if C is None:
            raise AggregatorError("attn mode needs the attention vector C")
        if C.shape != (cls.cls_vectors.shape[1],):
            raise AggregatorError(f"C must have shape ({cls.cls_vectors.shape[1]},), "
                                  f"got {C.shape}")
        w = parade_attention_weights(cls, C)
        pooled = reshape(matmul(w, cls.cls_vectors), (1, cls.cls_vectors.shape[1]))
    else:
        raise AggregatorError(f"mode must be avg, max or attn (got {mode!r})")
    return _score_rows(F, pooled)[0]


# ────────────────────────── aggregator transformer ──────────────────────────


@dataclass
class AggregatorTransformer:
    """Second-stage encoder over ``[C, (P(q)...), cls_1..cls_m]``.

    It has position embeddings and an input layer norm but no token-embedding table.
    ``proj`` maps cls vectors into the aggregator width when the widths differ.
    """

    params: dict[str, Tensor]
    layers: int
    heads: int
    prefix: str = "agg"
    proj: LinearHead | None = None
    eps: float = 1e-12

    @property
    def dim(self) -> int:
        return self.params[f"{self.prefix}.pos_emb"].shape[1]

    @property
    def max_positions(self) -> int:
        return self.params[f"{self.prefix}.pos_emb"].shape[0]

    def input_sequence(
        self, cls: ClsSet, C: Tensor, feed_query: bool, P: LinearHead | None = None
    ) -> tuple[Tensor, np.ndarray]:
        """Stacked input rows and the key mask (False on PAD query rows)."""
        d = self.dim
        rows = [reshape(C, (1, d))]
        keys = [np.ones(1, dtype=bool)]
        if feed_query:
            if cls.query_vectors is None:
                raise AggregatorError("feed_query requires query_vectors")
            qv = P(cls.query_vectors) if P is not None else cls.query_vectors
            rows.append(qv)
            qmask = (np.ones(qv.shape[0], dtype=bool) if cls.query_mask is None
                     else np.asarray(cls.query_mask).astype(bool))
            keys.append(qmask)
        cv = self.proj(cls.cls_vectors) if self.proj is not None else cls.cls_vectors
        rows.append(cv)
        keys.append(np.ones(cls.m, dtype=bool))
        for r in rows:
            if r.shape[1] != d:
                raise AggregatorError(f"aggregator input width {r.shape[1]} != {d}; "
                                      "configure a projection")
        seq = concat(rows, axis=0)
        if seq.shape[0] > self.max_positions:
            raise AggregatorError(f"aggregator input length {seq.shape[0]} exceeds "
                                  f"{self.max_positions} positions")
        return seq, np.concatenate(keys)

    def __call__(
        self,
        seq: Tensor,
        key_mask: np.ndarray,
        *,
        training: bool = False,
        rng: np.random.Generator | None = None,
        p_drop: float = 0.0,
    ) -> Tensor:
        n = seq.shape[0]
        pre = self.prefix
        x = seq + self.params[f"{pre}.pos_emb"][:n]
        x = layer_norm(x, self.params[f"{pre}.emb_ln.gamma"], self.params[f"{pre}.emb_ln.beta"],
                       eps=self.eps)
        x = reshape(x, (1, n, self.dim))
        allow = np.broadcast_to(key_mask[None, None, None, :], (1, 1, n, n))
        for i in range(self.layers):
            x = transformer_layer(x, self.params, f"{pre}.layer{i}", self.heads, allow,
                                  eps=self.eps, p_drop=p_drop, training=training, rng=rng)
        return x[0]


def score_parade_transformer(
    cls: ClsSet,
    aggreg: AggregatorTransformer,
    C: Tensor,
    F: LinearHead,
    feed_query: bool = False,
    P: LinearHead | None = None,
    *,
    training: bool = False,
    rng: np.random.Generator | None = None,
    p_drop: float = 0.0,
) -> Tensor:
    seq, key_mask = aggreg.input_sequence(cls, C, feed_query, P)
    out = aggreg(seq, key_mask, training=training, rng=rng, p_drop=p_drop)
    return score_first_p(out[0], F)


def init_aggregator_transformer_params(
    dim: int, ff_dim: int, layers: int, max_positions: int, rng: np.random.Generator,
    prefix: str = "agg",
) -> dict[str, Tensor]:
    params = {
        f"{prefix}.pos_emb": Tensor(rng.normal(0.0, 0.02, (max_positions, dim)), True),
        f"{prefix}.emb_ln.gamma": Tensor(np.ones(dim), True),
        f"{prefix}.emb_ln.beta": Tensor(np.zeros(dim), True),
    }
    for i in range(layers):
        params.update(init_layer_params(f"{prefix}.layer{i}", dim, ff_dim, rng))
    return params


# ────────────────────────── KNRM-style token head ──────────────────────────


def _check_kernels(kernels) -> None:
    if not kernels:
        raise AggregatorError("at least one kernel is required")
    for mu, sigma in kernels:
        if sigma <= 0:
            raise AggregatorError(f"kernel sigma must be > 0 (got {sigma} for mu {mu})")


def knrm_features(
    doc_vectors: Tensor | list[Tensor],
    query_vectors: Tensor,
    kernels,
    query_mask: np.ndarray | None = None,
) -> Tensor:
    """Per-kernel ``sum_q log(sum_d K(cos(q, d)) + 1e-10)``, scaled by 0.01."""
    _check_kernels(kernels)
    docs = concat(doc_vectors, axis=0) if isinstance(doc_vectors, (list, tuple)) else doc_vectors
    sim = matmul(l2_normalize(query_vectors, axis=-1),
                 transpose(l2_normalize(docs, axis=-1), (1, 0)))
    mus = np.array([k[0] for k in kernels], dtype=np.float64)[:, None, None]
    sigmas = np.array([k[1] for k in kernels], dtype=np.float64)[:, None, None]
    diff = reshape(sim, (1, *sim.shape)) - mus
    pooled = exp(diff * diff * (-1.0 / (2.0 * sigmas * sigmas))).sum(axis=2)
    logk = log(pooled + 1e-10)
    if query_mask is not None:
        logk = logk * np.asarray(query_mask, dtype=np.float64)[None, :]
    return logk.sum(axis=1) * KNRM_FEATURE_SCALE


def score_cedr_knrm(
    doc_vectors: Tensor | list[Tensor],
    query_vectors: Tensor,
    kernels,
    F: LinearHead,
    query_mask: np.ndarray | None = None,
) -> Tensor:
    features = knrm_features(doc_vectors, query_vectors, kernels, query_mask)
    return _score_rows(F, reshape(features, (1, features.shape[0])))[0]
