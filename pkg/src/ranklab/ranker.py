"""A trainable ranker: one model kind bound to its encoder, head and chunking.

Parameter names starting with ``encoder.`` form the main transformer group; all
others (``head.*``, ``agg.*``) form the second optimizer group.
"""

from __future__ import annotations

from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ranklab._log import log
from ranklab.aggregators import (
    AVG_P,
    CEDR_KNRM,
    FIRST_P,
    LONG_P,
    MAX_P,
    PARADE_ATTN,
    PARADE_AVG,
    PARADE_MAX,
    PARADE_TRANSF,
    PRETRAINED_REUSE,
    SUM_P,
    AggregatorConfig,
    AggregatorTransformer,
    ClsSet,
    LinearHead,
    init_aggregator_transformer_params,
    score_avg_p,
    score_cedr_knrm,
    score_first_p,
    score_max_sum,
    score_parade_simple,
    score_parade_transformer,
)
from ranklab.chunking import Chunk, ChunkedInput, ChunkingConfig, assemble
from ranklab.encoder import EncoderConfig, encode, init_encoder_params
from ranklab.evaluation import RankedList
from ranklab.exceptions import CheckpointError, ChunkingError, ConfigError
from ranklab.tensor import Tensor, load_checkpoint, no_grad, save_checkpoint
from ranklab.tokenize import TokenSeq, Vocab, prepare_query

MAIN_PREFIX = "encoder."

_PARADE_MODES = {PARADE_AVG: "avg", PARADE_MAX: "max", PARADE_ATTN: "attn"}


@dataclass(frozen=True)
class ModelSpec:
    name: str
    aggregator: AggregatorConfig = field(default_factory=AggregatorConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    chunking: ChunkingConfig = field(default_factory=ChunkingConfig)

    def __post_init__(self) -> None:
        if self.kind == FIRST_P and self.chunking.max_chunks != 1:
            object.__setattr__(self, "chunking", replace(self.chunking, max_chunks=1))
        q = self.chunking.max_query_len
        if self.kind == LONG_P:
            if self.encoder.max_seq < q + 4:
                raise ConfigError(f"{self.name}: encoder max_seq {self.encoder.max_seq} leaves "
                                  f"no room for document tokens after a {q}-token query")
            return
        need = q + self.chunking.chunk_capacity + 3
        if need > min(self.encoder.max_seq, self.chunking.max_seq):
            raise ConfigError(
                f"{self.name}: {q} query + {self.chunking.chunk_capacity} chunk tokens + 3 "
                f"specials = {need} exceeds max_seq "
                f"{min(self.encoder.max_seq, self.chunking.max_seq)}"
            )

    @property
    def kind(self) -> str:
        return self.aggregator.kind

    @property
    def long_p_doc_tokens(self) -> int:
        return self.encoder.max_seq - self.chunking.max_query_len - 3

    @property
    def aggregator_dim(self) -> int:
        return self.aggregator.aggregator_dim or self.encoder.model_dim


class Ranker:
    def __init__(self, spec: ModelSpec, vocab: Vocab, params: dict[str, Tensor] | None = None):
        self.spec = spec
        self.vocab = vocab
        self.params: dict[str, Tensor] = params if params is not None else {}

    def __repr__(self) -> str:
        return f"Ranker({self.spec.name!r}, kind={self.spec.kind!r}, params={len(self.params)})"

    # ── parameters ──

    def initialize(
        self, seed: int, pretrained: Mapping[str, np.ndarray] | None = None
    ) -> Ranker:
        """Fresh parameters from ``seed``; ``pretrained`` seeds the encoder (and, for
        ``pretrained_reuse``, the aggregator layers). Returns self."""
        spec = self.spec
        rng = np.random.default_rng(seed)
        params = init_encoder_params(spec.encoder, len(self.vocab), rng)
        if pretrained is not None:
            _copy_encoder_weights(params, pretrained)
        d = spec.encoder.model_dim
        agg = spec.aggregator
        head_in = d

        if spec.kind == PARADE_ATTN:
            params["head.C"] = Tensor(rng.normal(0.0, 0.02, d), True)
        elif spec.kind == PARADE_TRANSF:
            ad = spec.aggregator_dim
            head_in = ad
            positions = 1 + spec.chunking.max_query_len + spec.chunking.max_chunks
            params["agg.C"] = Tensor(rng.normal(0.0, 0.02, ad), True)
            params.update(init_aggregator_transformer_params(
                ad, spec.encoder.ff_dim if ad == d else 2 * ad, agg.aggregator_layers,
                positions, rng,
            ))
            if ad != d:
                params["agg.proj.weight"] = Tensor(rng.normal(0.0, 0.02, (d, ad)), True)
                params["agg.proj.bias"] = Tensor(np.zeros(ad), True)
                if agg.feed_query:
                    params["head.P.weight"] = Tensor(rng.normal(0.0, 0.02, (d, ad)), True)
                    params["head.P.bias"] = Tensor(np.zeros(ad), True)
            if agg.init == PRETRAINED_REUSE:
                self._reuse_layers(params, pretrained)
        elif spec.kind == CEDR_KNRM:
            head_in = len(agg.kernels)

        params["head.F.weight"] = Tensor(rng.normal(0.0, 0.02, (head_in, 1)), True)
        params["head.F.bias"] = Tensor(np.zeros(1), True)
        self.params = params
        return self

    def _reuse_layers(self, params: dict[str, Tensor], pretrained) -> None:
        spec = self.spec
        if spec.aggregator_dim != spec.encoder.model_dim:
            raise ConfigError(f"{spec.name}: pretrained_reuse needs aggregator_dim == model_dim")
        layers = spec.aggregator.aggregator_layers
        if layers > spec.encoder.layers:
            raise ConfigError(f"{spec.name}: cannot reuse {layers} layers from a "
                              f"{spec.encoder.layers}-layer encoder")
        source = {k: t.data for k, t in params.items()} if pretrained is None else pretrained
        if pretrained is None:
            log(f"{spec.name}: no pretrained checkpoint, reusing the initial encoder layers")
        for i in range(layers):
            src = f"encoder.layer{i}."
            for name, value in source.items():
                if name.startswith(src):
                    dst = f"agg.layer{i}." + name[len(src):]
                    params[dst] = Tensor(np.array(value, dtype=np.float64), True)

    def param_groups(self) -> dict[str, list[tuple[str, Tensor]]]:
        groups: dict[str, list[tuple[str, Tensor]]] = {"main": [], "other": []}
        for name, p in self.params.items():
            groups["main" if name.startswith(MAIN_PREFIX) else "other"].append((name, p))
        return groups

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state_dict(self, state: Mapping[str, np.ndarray], *, path: str | None = None) -> None:
        missing = sorted(set(self.params) - set(state))
        unexpected = sorted(set(state) - set(self.params))
        if missing or unexpected:
            raise CheckpointError(
                f"parameter mismatch (missing: {', '.join(missing) or '-'}; "
                f"unexpected: {', '.join(unexpected) or '-'})", path=path,
            )
        for name, p in self.params.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                raise CheckpointError(f"{name}: shape {value.shape} != {p.shape}", path=path)
            p.data = value.copy()
            p.zero_grad()

    def save(self, path: str | Path) -> Path:
        return save_checkpoint(path, self.params)

    def load(self, path: str | Path) -> Ranker:
        self.load_state_dict(load_checkpoint(path), path=str(path))
        return self

    # ── inputs ──

    def prepare(self, query: TokenSeq, doc: TokenSeq) -> ChunkedInput:
        spec = self.spec
        q = prepare_query(self.vocab, query, spec.chunking.max_query_len)
        if spec.kind == LONG_P:
            n = min(len(doc), spec.long_p_doc_tokens)
            if n == 0:
                raise ChunkingError("empty document")
            return assemble(q, doc, [Chunk(0, n, 0)], self.vocab, max_seq=spec.encoder.max_seq)
        chunks = spec.chunking.partition(doc)
        max_seq = min(spec.encoder.max_seq, spec.chunking.max_seq)
        return assemble(q, doc, chunks, self.vocab, max_seq=max_seq)

    # ── scoring ──

    def head(self, name: str = "F") -> LinearHead:
        return LinearHead(self.params[f"head.{name}.weight"], self.params[f"head.{name}.bias"])

    def aggregator_transformer(self) -> AggregatorTransformer:
        proj = None
        if "agg.proj.weight" in self.params:
            proj = LinearHead(self.params["agg.proj.weight"], self.params["agg.proj.bias"])
        return AggregatorTransformer(
            params=self.params,
            layers=self.spec.aggregator.aggregator_layers,
            heads=self.spec.aggregator.aggregator_heads,
            proj=proj,
            eps=self.spec.encoder.ln_eps,
        )

    def score_input(
        self,
        inputs: ChunkedInput,
        *,
        training: bool = False,
        rng: np.random.Generator | None = None,
    ) -> Tensor:
        spec = self.spec
        ids, mask = inputs.as_batch(self.vocab.pad_id)
        enc = encode(spec.encoder, self.params, ids, mask, query_len=inputs.query_len,
                     training=training, rng=rng)
        F = self.head("F")
        kind = spec.kind
        if kind in (FIRST_P, LONG_P):
            return score_first_p(enc.cls_vector[0], F)
        cls = ClsSet(enc.cls_vector)
        if kind == MAX_P:
            return score_max_sum(cls, F, "max")
        if kind == SUM_P:
            return score_max_sum(cls, F, "sum")
        if kind == AVG_P:
            return score_avg_p(cls, F)
        if kind in _PARADE_MODES:
            return score_parade_simple(cls, F, _PARADE_MODES[kind], self.params.get("head.C"))
        ql = inputs.query_len
        query_vectors = enc.token_vectors[0, 1:1 + ql]
        query_mask = np.asarray(inputs.masks[0][1:1 + ql])
        if kind == PARADE_TRANSF:
            with_q = ClsSet(enc.cls_vector, query_vectors, query_mask)
            P = self.head("P") if "head.P.weight" in self.params else None
            return score_parade_transformer(
                with_q, self.aggregator_transformer(), self.params["agg.C"], F,
                spec.aggregator.feed_query, P,
                training=training, rng=rng, p_drop=spec.encoder.dropout,
            )
        if kind == CEDR_KNRM:
            start = ql + 2
            docs = [enc.token_vectors[i, start:start + len(chunk)]
                    for i, chunk in enumerate(inputs.chunks)]
            return score_cedr_knrm(docs, query_vectors, spec.aggregator.kernels, F, query_mask)
        raise ConfigError(f"unhandled model kind {kind!r}")

    def score(
        self,
        query: TokenSeq,
        doc: TokenSeq,
        *,
        training: bool = False,
        rng: np.random.Generator | None = None,
    ) -> Tensor:
        return self.score_input(self.prepare(query, doc), training=training, rng=rng)

    def rerank(
        self, query_id: str, query: TokenSeq, candidates: Iterable[tuple[str, TokenSeq]]
    ) -> RankedList:
        """Score every candidate without recording a graph."""
        scored: list[tuple[str, float]] = []
        with no_grad():
            for doc_id, doc in candidates:
                scored.append((doc_id, self.score(query, doc).item()))
        return RankedList.from_scores(query_id, scored)


def _copy_encoder_weights(params: dict[str, Tensor], pretrained: Mapping[str, np.ndarray]) -> None:
    """Copy ``encoder.*`` weights; a longer position table keeps the copied prefix rows."""
    for name, p in params.items():
        if not name.startswith(MAIN_PREFIX) or name not in pretrained:
            continue
        value = np.asarray(pretrained[name], dtype=np.float64)
        if value.shape == p.shape:
            p.data = value.copy()
        elif name.endswith("pos_emb") and value.shape[1:] == p.shape[1:]:
            rows = min(value.shape[0], p.shape[0])
            p.data[:rows] = value[:rows]
        else:
            raise CheckpointError(f"{name}: pretrained shape {value.shape} != {p.shape}")
