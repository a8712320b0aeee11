"""Scaled dot-product attention, multi-head attention and causal masking."""

import logging
import math
from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from caption_lens.core.exceptions import ConfigurationError, ContractError, DimensionError
from caption_lens.core.tensor import (
    FloatArray,
    Tensor,
    add,
    matmul,
    reshape,
    softmax,
    transpose,
)
from caption_lens.model.params import ModelParams, xavier

logger = logging.getLogger(__name__)

# Added to disallowed logits; exp() of it underflows to exactly zero.
MASK_VALUE = -1e9

BoolArray = NDArray[np.bool_]


@dataclass
class MultiHeadParams:
    """Projections for h heads of width d/h, stacked column-wise.

    Head i owns columns ``i*d/h:(i+1)*d/h`` of ``w_q``, ``w_k`` and ``w_v``,
    i.e. those blocks are the transposed per-head projection matrices.
    No projection carries a bias.
    """

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    heads: int

    def __post_init__(self) -> None:
        d = self.w_q.shape[0]
        if self.heads < 1 or d % self.heads != 0:
            raise ConfigurationError(
                f"Model width {d} is not divisible by {self.heads} heads",
                config_key="model.heads",
            )
        for w in (self.w_q, self.w_k, self.w_v, self.w_o):
            if w.shape != (d, d):
                raise DimensionError(
                    "Attention projections must all be d × d",
                    shapes=[self.w_q.shape, w.shape],
                )

    @property
    def d_model(self) -> int:
        return self.w_q.shape[0]

    @property
    def head_width(self) -> int:
        return self.d_model // self.heads

    @classmethod
    def create(
        cls,
        store: ModelParams,
        name: str,
        d_model: int,
        heads: int,
        rng: np.random.Generator,
    ) -> "MultiHeadParams":
        return cls(
            w_q=store.add(f"{name}.w_q", xavier(rng, d_model, d_model)),
            w_k=store.add(f"{name}.w_k", xavier(rng, d_model, d_model)),
            w_v=store.add(f"{name}.w_v", xavier(rng, d_model, d_model)),
            w_o=store.add(f"{name}.w_o", xavier(rng, d_model, d_model)),
            heads=heads,
        )


def causal_mask(length: int) -> BoolArray:
    """Allow position j for query i iff ``j <= i``."""
    if length < 1:
        raise ContractError(f"causal_mask needs length >= 1, got {length}")
    return np.tril(np.ones((length, length), dtype=bool))


def _mask_bias(mask: BoolArray, n_q: int, n_k: int) -> FloatArray:
    allowed = np.asarray(mask, dtype=bool)
    if allowed.shape[-2:] != (n_q, n_k):
        raise DimensionError(
            f"Mask shape {allowed.shape} does not match scores {(n_q, n_k)}",
            shapes=[allowed.shape, (n_q, n_k)],
        )
    if not allowed.any(axis=-1).all():
        raise ContractError("Attention mask has a row with no allowed key")
    return np.where(allowed, 0.0, MASK_VALUE)


def attention_weights(q: Tensor, k: Tensor, mask: BoolArray | None = None) -> Tensor:
    """
    Softmax attention weights ``softmax(Q Kᵀ / sqrt(d') + mask)``.

    Leading axes (e.g. heads) are batched; the mask broadcasts over them.

    Raises:
        DimensionError: If Q and K widths differ
        ContractError: If a mask row allows no key
    """
    if q.shape[-1] != k.shape[-1]:
        raise DimensionError(
            f"Query width {q.shape[-1]} differs from key width {k.shape[-1]}",
            shapes=[q.shape, k.shape],
        )
    scores = matmul(q, transpose(k)) * (1.0 / math.sqrt(q.shape[-1]))
    if mask is not None:
        scores = add(scores, _mask_bias(mask, q.shape[-2], k.shape[-2]))
    return softmax(scores, axis=-1)


def scaled_dot_product(
    q: Tensor, k: Tensor, v: Tensor, mask: BoolArray | None = None
) -> Tensor:
    """
    Attention read-out ``softmax(Q Kᵀ / sqrt(d') + mask) V``.

    Args:
        q: ``n_q × d'`` queries (optionally with leading batch axes)
        k: ``n_k × d'`` keys
        v: ``n_k × d_v`` values
        mask: Optional ``n_q × n_k`` booleans, True where attention is allowed

    Returns:
        ``n_q × d_v`` tensor
    """
    if k.shape[-2] != v.shape[-2]:
        raise DimensionError(
            "Keys and values must have the same number of rows",
            shapes=[k.shape, v.shape],
        )
    return matmul(attention_weights(q, k, mask), v)


def _split_heads(x: Tensor, params: MultiHeadParams) -> Tensor:
    rows = x.shape[0]
    return transpose(
        reshape(x, (rows, params.heads, params.head_width)), axes=(1, 0, 2)
    )


def _check_width(name: str, x: Tensor, params: MultiHeadParams) -> None:
    if x.ndim != 2 or x.shape[1] != params.d_model:
        raise DimensionError(
            f"multi_head {name} must be rows × {params.d_model}, got {x.shape}",
            shapes=[x.shape, (x.shape[0], params.d_model)],
        )


def head_weights(
    queries: Tensor,
    keys: Tensor,
    params: MultiHeadParams,
    mask: BoolArray | None = None,
) -> Tensor:
    """Per-head attention weights, shape ``h × n_q × n_k``."""
    _check_width("queries", queries, params)
    _check_width("keys", keys, params)
    q = _split_heads(matmul(queries, params.w_q), params)
    k = _split_heads(matmul(keys, params.w_k), params)
    return attention_weights(q, k, mask)


def multi_head(
    queries: Tensor,
    keys: Tensor,
    values: Tensor,
    params: MultiHeadParams,
    mask: BoolArray | None = None,
) -> Tensor:
    """
    Multi-head attention ``Concat(H_1..H_h) W^O``.

    Each head attends with its own projections and scales by ``sqrt(d/h)``.

    Returns:
        ``n_q × d`` tensor
    """
    _check_width("values", values, params)
    weights = head_weights(queries, keys, params, mask)
    v = _split_heads(matmul(values, params.w_v), params)
    per_head = matmul(weights, v)
    joined = reshape(
        transpose(per_head, axes=(1, 0, 2)), (queries.shape[0], params.d_model)
    )
    return matmul(joined, params.w_o)
