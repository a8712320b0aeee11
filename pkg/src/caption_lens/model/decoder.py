"""Global adaptive decoder.

Each layer runs causal word self-attention, a controller cross-attention that
reads the encoded regions and the fused global vector, and a feed-forward
block, each followed by dropout, a residual connection and layer norm.

Controllers:
    gac    cross-attention over the regions plus a sigmoid-gated global vector
    mac    cross-attention over the regions with the global row appended
    plain  cross-attention over the regions only (the plain Transformer)
"""

import logging
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from caption_lens.core.exceptions import ConfigurationError, ContractError
from caption_lens.core.tensor import (
    FloatArray,
    Tensor,
    add,
    concat,
    dropout,
    embedding_lookup,
    matmul,
    mul,
    sigmoid,
    transpose,
)
from caption_lens.model.attention import MultiHeadParams, causal_mask, multi_head
from caption_lens.model.encoder import EncodedImage
from caption_lens.model.params import (
    FeedForwardParams,
    LayerNormParams,
    ModelParams,
    apply_layer_norm,
    feed_forward,
)

logger = logging.getLogger(__name__)

CONTROLLERS = ("gac", "mac", "plain")


@dataclass(frozen=True)
class DecoderConfig:
    layers: int
    d_model: int
    heads: int
    d_ff: int
    vocab_size: int
    max_len: int
    keep_prob: float = 0.9
    controller: str = "mac"

    def __post_init__(self) -> None:
        if self.controller not in CONTROLLERS:
            raise ConfigurationError(
                f"Unknown controller: {self.controller}", "model.controller"
            )
        if self.layers < 1:
            raise ConfigurationError("Decoder needs at least one layer", "model.layers")
        if self.vocab_size < 5:
            raise ConfigurationError(
                "Vocabulary must hold the reserved tokens and at least one word",
                "vocab_size",
            )
        if self.max_len < 1:
            raise ConfigurationError("max_len must be positive", "model.max_len")


@dataclass
class DecoderLayerParams:
    self_attention: MultiHeadParams
    cross_attention: MultiHeadParams
    feed_forward: FeedForwardParams
    norm_self: LayerNormParams
    norm_cross: LayerNormParams
    norm_feed_forward: LayerNormParams


@dataclass
class TokenEmbedding:
    """Word embedding table plus a fixed sinusoidal position table."""

    table: Tensor  # |V| × d
    positions: FloatArray  # max_len × d


@dataclass
class OutputHead:
    w_y: Tensor  # |V| × d, untied from the embedding table


@dataclass
class DecoderParams:
    embedding: TokenEmbedding
    layers: list[DecoderLayerParams]
    head: OutputHead


def positional_encoding(max_len: int, d_model: int) -> FloatArray:
    """Sinusoidal encoding: sin on even columns, cos on odd columns."""
    positions = np.arange(max_len, dtype=np.float64)[:, None]
    rates = np.power(10000.0, -np.arange(0, d_model, 2, dtype=np.float64) / d_model)
    table = np.zeros((max_len, d_model))
    table[:, 0::2] = np.sin(positions * rates)
    table[:, 1::2] = np.cos(positions * rates[: d_model // 2])
    return table


def build_decoder_params(
    store: ModelParams,
    config: DecoderConfig,
    rng: np.random.Generator,
    prefix: str = "decoder",
) -> DecoderParams:
    d = config.d_model
    layers = [
        DecoderLayerParams(
            self_attention=MultiHeadParams.create(
                store, f"{prefix}.layer{i}.self_attention", d, config.heads, rng
            ),
            cross_attention=MultiHeadParams.create(
                store, f"{prefix}.layer{i}.cross_attention", d, config.heads, rng
            ),
            feed_forward=FeedForwardParams.create(
                store, f"{prefix}.layer{i}.feed_forward", d, config.d_ff, rng
            ),
            norm_self=LayerNormParams.create(store, f"{prefix}.layer{i}.norm1", d),
            norm_cross=LayerNormParams.create(store, f"{prefix}.layer{i}.norm2", d),
            norm_feed_forward=LayerNormParams.create(
                store, f"{prefix}.layer{i}.norm3", d
            ),
        )
        for i in range(config.layers)
    ]
    scale = 1.0 / np.sqrt(d)
    return DecoderParams(
        embedding=TokenEmbedding(
            table=store.add(
                f"{prefix}.embedding", rng.normal(0.0, scale, (config.vocab_size, d))
            ),
            positions=positional_encoding(config.max_len, d),
        ),
        layers=layers,
        head=OutputHead(
            w_y=store.add(f"{prefix}.w_y", rng.normal(0.0, scale, (config.vocab_size, d)))
        ),
    )


def gac_gate(queries: Tensor, global_vector: Tensor) -> Tensor:
    """Per-row gate ``sigmoid(a_i · g)``, shape ``t × 1``."""
    return sigmoid(matmul(queries, transpose(global_vector)))


def gac_cross(
    queries: Tensor,
    regions: Tensor,
    global_vector: Tensor,
    attention: MultiHeadParams,
) -> Tensor:
    """Gate adaptive controller: ``multi_head(a, V, V) + sigmoid(a g) * g``."""
    attended = multi_head(queries, regions, regions, attention)
    return add(attended, mul(gac_gate(queries, global_vector), global_vector))


def mac_cross(
    queries: Tensor,
    regions: Tensor,
    global_vector: Tensor,
    attention: MultiHeadParams,
) -> Tensor:
    """Multi-head adaptive controller: attend over ``(V; g)`` stacked by rows."""
    stacked = concat([regions, global_vector], axis=0)
    return multi_head(queries, stacked, stacked, attention)


def plain_cross(
    queries: Tensor,
    regions: Tensor,
    global_vector: Tensor,  # noqa: ARG001
    attention: MultiHeadParams,
) -> Tensor:
    return multi_head(queries, regions, regions, attention)


_CONTROLLER_FUNCTIONS = {"gac": gac_cross, "mac": mac_cross, "plain": plain_cross}


def decoder_layer(
    hidden: Tensor,
    encoded: EncodedImage,
    params: DecoderLayerParams,
    config: DecoderConfig,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    mask = causal_mask(hidden.shape[0])
    attended = multi_head(hidden, hidden, hidden, params.self_attention, mask)
    words = apply_layer_norm(
        add(hidden, dropout(attended, config.keep_prob, train, rng)), params.norm_self
    )

    controller = _CONTROLLER_FUNCTIONS[config.controller]
    crossed = controller(
        words, encoded.regions, encoded.global_vector, params.cross_attention
    )
    mixed = apply_layer_norm(
        add(words, dropout(crossed, config.keep_prob, train, rng)), params.norm_cross
    )

    transformed = feed_forward(mixed, params.feed_forward)
    return apply_layer_norm(
        add(mixed, dropout(transformed, config.keep_prob, train, rng)),
        params.norm_feed_forward,
    )


def embed_tokens(tokens: Sequence[int], embedding: TokenEmbedding) -> Tensor:
    """Word embedding plus positional encoding for a token prefix."""
    words = embedding_lookup(embedding.table, list(tokens))
    return add(words, embedding.positions[: len(tokens)])


def decode_logits(
    tokens: Sequence[int],
    encoded: EncodedImage,
    params: DecoderParams,
    config: DecoderConfig,
    bos_id: int,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """
    Next-word logits for every prefix position.

    Args:
        tokens: Prefix starting with BOS
        encoded: Encoder output for the image
        params: Decoder parameters
        config: Decoder configuration
        bos_id: Id of the start token
        train: Apply dropout
        rng: Generator for dropout masks

    Returns:
        ``t × |V|`` logits; softmax of row i is ``p(y_{i+1} | y_0..y_i)``

    Raises:
        ContractError: If the prefix is empty, does not start with BOS, or is
            longer than ``config.max_len``
        VocabularyLookupError: If a token id is out of range
    """
    if len(tokens) < 1 or tokens[0] != bos_id:
        raise ContractError("Decoder prefix must start with the BOS token")
    if len(tokens) > config.max_len:
        raise ContractError(
            f"Prefix length {len(tokens)} exceeds max_len {config.max_len}",
            details={"length": len(tokens), "max_len": config.max_len},
        )

    hidden = embed_tokens(tokens, params.embedding)
    for layer in params.layers:
        hidden = decoder_layer(hidden, encoded, layer, config, train, rng)
    return matmul(hidden, transpose(params.head.w_y))
