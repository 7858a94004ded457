"""Post-LN transformer encoder with pluggable attention patterns.

Parameters live in a flat ``{name: Tensor}`` dict (names prefixed ``encoder.``) so the
trainer can group them and checkpoints stay a plain ordered list of named tensors.

Attention patterns:

* ``dense``: every position sees every non-PAD position
* ``sparse``: a local band (optionally dilated), global tokens ([CLS], or [CLS] plus the
  query) that attend to and are attended by everything, and optional random scatter
  resampled per layer
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ranklab.exceptions import ConfigError, ShapeError
from ranklab.tensor import (
    Tensor,
    dropout,
    embedding_lookup,
    gelu,
    layer_norm,
    matmul,
    reshape,
    softmax,
    transpose,
)

DENSE = "dense"
SPARSE = "sparse"
CLS_ONLY = "cls_only"
CLS_AND_QUERY = "cls_and_query"
SCATTER_KINDS = ("none", "random", "dilated")

INIT_STD = 0.02


@dataclass(frozen=True)
class AttentionPattern:
    kind: str = DENSE
    local_window: int = 64
    global_tokens: str = CLS_AND_QUERY
    scatter: str = "none"
    random_k: int = 2
    dilation: int = 1
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in (DENSE, SPARSE):
            raise ConfigError(f"attention kind must be dense or sparse (got {self.kind!r})")
        if self.global_tokens not in (CLS_ONLY, CLS_AND_QUERY):
            raise ConfigError(f"global_tokens must be {CLS_ONLY} or {CLS_AND_QUERY} "
                              f"(got {self.global_tokens!r})")
        if self.scatter not in SCATTER_KINDS:
            raise ConfigError(f"scatter must be one of {', '.join(SCATTER_KINDS)} "
                              f"(got {self.scatter!r})")
        if self.kind == SPARSE and self.local_window < 1:
            raise ConfigError(f"local_window must be >= 1 (got {self.local_window})")
        if self.dilation < 1:
            raise ConfigError(f"dilation must be >= 1 (got {self.dilation})")
        if self.random_k < 0:
            raise ConfigError(f"random_k must be >= 0 (got {self.random_k})")


@dataclass(frozen=True)
class EncoderConfig:
    layers: int = 2
    heads: int = 2
    model_dim: int = 32
    ff_dim: int = 64
    max_seq: int = 512
    dropout: float = 0.1
    ln_eps: float = 1e-12
    attention: AttentionPattern = field(default_factory=AttentionPattern)

    def __post_init__(self) -> None:
        if self.layers < 1 or self.heads < 1 or self.ff_dim < 1:
            raise ConfigError("layers, heads and ff_dim must be >= 1")
        if self.model_dim % self.heads:
            raise ConfigError(f"model_dim {self.model_dim} is not divisible by heads {self.heads}")
        if self.max_seq < 1:
            raise ConfigError(f"max_seq must be >= 1 (got {self.max_seq})")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1) (got {self.dropout})")


@dataclass
class EncodedChunk:
    token_vectors: Tensor
    cls_vector: Tensor
    attentions: list[np.ndarray] | None = None


# ────────────────────────── attention masks ──────────────────────────


def build_attention_allow_matrix(
    pattern: AttentionPattern, seq_len: int, query_len: int = 0, layer: int = 0
) -> np.ndarray:
    """``allow[i, j]`` is True when position ``i`` may attend to position ``j``."""
    if seq_len < 1:
        raise ShapeError("attention_mask", (seq_len,), detail="seq_len must be >= 1")
    if pattern.kind == DENSE:
        return np.ones((seq_len, seq_len), dtype=bool)
    pos = np.arange(seq_len)
    dist = np.abs(pos[:, None] - pos[None, :])
    if pattern.scatter == "dilated":
        rate = pattern.dilation
        allow = (dist % rate == 0) & (dist // rate < pattern.local_window)
    else:
        allow = dist < pattern.local_window
    n_global = 1 + (query_len if pattern.global_tokens == CLS_AND_QUERY else 0)
    n_global = min(n_global, seq_len)
    allow[:n_global, :] = True
    allow[:, :n_global] = True
    if pattern.scatter == "random" and pattern.random_k > 0:
        rng = np.random.default_rng([pattern.seed, layer])
        k = min(pattern.random_k, seq_len)
        for i in range(seq_len):
            cols = rng.choice(seq_len, size=k, replace=False)
            allow[i, cols] = True
            allow[cols, i] = True
    return allow


# ────────────────────────── parameters ──────────────────────────


def _normal(rng: np.random.Generator, *shape: int) -> Tensor:
    return Tensor(rng.normal(0.0, INIT_STD, size=shape), requires_grad=True)


def _ones(n: int) -> Tensor:
    return Tensor(np.ones(n), requires_grad=True)


def _zeros(*shape: int) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def init_layer_params(prefix: str, dim: int, ff_dim: int, rng: np.random.Generator) -> dict:
    return {
        f"{prefix}.attn.wq": _normal(rng, dim, dim),
        f"{prefix}.attn.bq": _zeros(dim),
        f"{prefix}.attn.wk": _normal(rng, dim, dim),
        f"{prefix}.attn.bk": _zeros(dim),
        f"{prefix}.attn.wv": _normal(rng, dim, dim),
        f"{prefix}.attn.bv": _zeros(dim),
        f"{prefix}.attn.wo": _normal(rng, dim, dim),
        f"{prefix}.attn.bo": _zeros(dim),
        f"{prefix}.ln1.gamma": _ones(dim),
        f"{prefix}.ln1.beta": _zeros(dim),
        f"{prefix}.ffn.w1": _normal(rng, dim, ff_dim),
        f"{prefix}.ffn.b1": _zeros(ff_dim),
        f"{prefix}.ffn.w2": _normal(rng, ff_dim, dim),
        f"{prefix}.ffn.b2": _zeros(dim),
        f"{prefix}.ln2.gamma": _ones(dim),
        f"{prefix}.ln2.beta": _zeros(dim),
    }


def init_encoder_params(
    config: EncoderConfig, vocab_size: int, rng: np.random.Generator, prefix: str = "encoder"
) -> dict[str, Tensor]:
    d = config.model_dim
    params = {
        f"{prefix}.tok_emb": _normal(rng, vocab_size, d),
        f"{prefix}.pos_emb": _normal(rng, config.max_seq, d),
        f"{prefix}.emb_ln.gamma": _ones(d),
        f"{prefix}.emb_ln.beta": _zeros(d),
    }
    for i in range(config.layers):
        params.update(init_layer_params(f"{prefix}.layer{i}", d, config.ff_dim, rng))
    return params


# ────────────────────────── forward ──────────────────────────


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    out = matmul(x, w)
    return out + b if b is not None else out


def transformer_layer(
    x: Tensor,
    params: dict[str, Tensor],
    prefix: str,
    heads: int,
    allow: np.ndarray,
    *,
    eps: float = 1e-12,
    p_drop: float = 0.0,
    training: bool = False,
    rng: np.random.Generator | None = None,
    keep_attention: list | None = None,
) -> Tensor:
    """One post-LN block over ``x`` of shape ``(B, L, D)``.

    ``allow`` broadcasts to ``(B, heads, L, L)``; True marks an allowed (query, key) pair.
    """
    b, length, d = x.shape
    dh = d // heads

    def split(t: Tensor) -> Tensor:
        return transpose(reshape(t, (b, length, heads, dh)), (0, 2, 1, 3))

    q = split(linear(x, params[f"{prefix}.attn.wq"], params[f"{prefix}.attn.bq"]))
    k = split(linear(x, params[f"{prefix}.attn.wk"], params[f"{prefix}.attn.bk"]))
    v = split(linear(x, params[f"{prefix}.attn.wv"], params[f"{prefix}.attn.bv"]))
    scores = matmul(q, transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(dh))
    weights = softmax(scores, axis=-1, mask=allow)
    if keep_attention is not None:
        keep_attention.append(weights.data.copy())
    ctx = reshape(transpose(matmul(weights, v), (0, 2, 1, 3)), (b, length, d))
    attn_out = linear(ctx, params[f"{prefix}.attn.wo"], params[f"{prefix}.attn.bo"])
    attn_out = dropout(attn_out, p_drop, rng, training)
    x = layer_norm(x + attn_out, params[f"{prefix}.ln1.gamma"], params[f"{prefix}.ln1.beta"],
                   eps=eps)
    hidden = gelu(linear(x, params[f"{prefix}.ffn.w1"], params[f"{prefix}.ffn.b1"]))
    ff_out = linear(hidden, params[f"{prefix}.ffn.w2"], params[f"{prefix}.ffn.b2"])
    ff_out = dropout(ff_out, p_drop, rng, training)
    return layer_norm(x + ff_out, params[f"{prefix}.ln2.gamma"], params[f"{prefix}.ln2.beta"],
                      eps=eps)


def encode(
    config: EncoderConfig,
    params: dict[str, Tensor],
    input_ids,
    attention_mask=None,
    query_len: int = 0,
    *,
    training: bool = False,
    rng: np.random.Generator | None = None,
    return_attention: bool = False,
) -> EncodedChunk:
    """Encode ``(L,)`` or ``(B, L)`` token ids into last-layer vectors.

    ``attention_mask`` (same shape, 0 = PAD) removes positions as attention keys.
    """
    ids = np.asarray(input_ids, dtype=np.int64)
    single = ids.ndim == 1
    if single:
        ids = ids[None, :]
    if ids.ndim != 2:
        raise ShapeError("encode", ids.shape, detail="expected (L,) or (B, L) ids")
    b, length = ids.shape
    if length > config.max_seq:
        raise ShapeError("encode", ids.shape, detail=f"sequence length {length} exceeds "
                         f"max_seq {config.max_seq}")
    if length == 0:
        raise ShapeError("encode", ids.shape, detail="empty sequence")
    if attention_mask is None:
        key_ok = np.ones((b, length), dtype=bool)
    else:
        key_ok = np.asarray(attention_mask).astype(bool).reshape(b, length)

    x = embedding_lookup(params["encoder.tok_emb"], ids)
    x = x + params["encoder.pos_emb"][:length]
    x = layer_norm(x, params["encoder.emb_ln.gamma"], params["encoder.emb_ln.beta"],
                   eps=config.ln_eps)
    x = dropout(x, config.dropout, rng, training)

    attentions: list[np.ndarray] | None = [] if return_attention else None
    for i in range(config.layers):
        allow = build_attention_allow_matrix(config.attention, length, query_len, layer=i)
        full = allow[None, None, :, :] & key_ok[:, None, None, :]
        x = transformer_layer(
            x, params, f"encoder.layer{i}", config.heads, full,
            eps=config.ln_eps, p_drop=config.dropout, training=training, rng=rng,
            keep_attention=attentions,
        )

    if single:
        x = x[0]
        cls = x[0]
    else:
        cls = x[:, 0, :]
    return EncodedChunk(token_vectors=x, cls_vector=cls, attentions=attentions)
