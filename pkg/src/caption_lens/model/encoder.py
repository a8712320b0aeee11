"""Global enhanced encoder.

Region features are projected to the model width, a global slot (the
projected mean region) is appended as the last row, and L global enhanced
attention layers run over all N+1 rows. The global row of every layer output
is collected and fused across layers into a single global vector ``g_F``.

Global vectors are carried as ``1 × d`` row tensors throughout.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np

from caption_lens.core.exceptions import ConfigurationError, ContractError, DimensionError
from caption_lens.core.tensor import (
    Tensor,
    add,
    concat,
    dropout,
    index,
    matmul,
    mul,
    reduce_mean,
    sigmoid,
    softmax,
    tanh,
    transpose,
)
from caption_lens.model.attention import MultiHeadParams, multi_head
from caption_lens.model.params import (
    FeedForwardParams,
    LayerNormParams,
    LinearParams,
    ModelParams,
    apply_layer_norm,
    feed_forward,
    linear,
    xavier,
)

logger = logging.getLogger(__name__)

INTRA_LAYER_MODES = ("plain", "g0", "gea")
FUSION_MODES = ("none", "average", "attention", "lstm")


@dataclass(frozen=True)
class EncoderConfig:
    """Shape and ablation switches of the encoder stack."""

    layers: int
    d_model: int
    heads: int
    d_ff: int
    keep_prob: float = 0.9
    intra_layer: str = "gea"
    inter_layer: str = "lstm"

    def __post_init__(self) -> None:
        if self.layers < 1:
            raise ConfigurationError("Encoder needs at least one layer", "model.layers")
        if self.intra_layer not in INTRA_LAYER_MODES:
            raise ConfigurationError(
                f"Unknown intra-layer mode: {self.intra_layer}", "model.intra_layer"
            )
        if self.inter_layer not in FUSION_MODES:
            raise ConfigurationError(
                f"Unknown fusion mode: {self.inter_layer}", "model.inter_layer"
            )
        if self.d_model % self.heads != 0:
            raise ConfigurationError(
                f"d_model {self.d_model} not divisible by heads {self.heads}",
                "model.heads",
            )
        if not 0.0 < self.keep_prob <= 1.0:
            raise ConfigurationError("keep_prob must be in (0, 1]", "model.keep_prob")

    @property
    def uses_global_slot(self) -> bool:
        return self.intra_layer != "plain"

    @property
    def fusion(self) -> str:
        """Fusion actually applied; only the gea mode fuses layer globals."""
        return self.inter_layer if self.intra_layer == "gea" else "none"


@dataclass
class EncoderLayerParams:
    attention: MultiHeadParams
    feed_forward: FeedForwardParams
    norm_attention: LayerNormParams
    norm_feed_forward: LayerNormParams


@dataclass
class LstmGate:
    """One LSTM gate: ``x @ w_x + h @ w_h + bias``."""

    w_x: Tensor
    w_h: Tensor
    bias: Tensor

    @classmethod
    def create(
        cls, store: ModelParams, name: str, width: int, rng: np.random.Generator
    ) -> "LstmGate":
        return cls(
            w_x=store.add(f"{name}.w_x", xavier(rng, width, width)),
            w_h=store.add(f"{name}.w_h", xavier(rng, width, width)),
            bias=store.add(f"{name}.bias", np.zeros((1, width))),
        )

    def __call__(self, x: Tensor, h: Tensor) -> Tensor:
        return add(add(matmul(x, self.w_x), matmul(h, self.w_h)), self.bias)


@dataclass
class LstmFusionParams:
    input: LstmGate
    forget: LstmGate
    output: LstmGate
    candidate: LstmGate


@dataclass
class FusionParams:
    lstm: LstmFusionParams | None = None
    query: Tensor | None = None


@dataclass
class EncoderParams:
    projection: LinearParams
    layers: list[EncoderLayerParams]
    fusion: FusionParams


@dataclass
class EncodedImage:
    """Encoder output consumed by the decoder."""

    regions: Tensor  # V_L, N × d
    global_vector: Tensor  # g_F, 1 × d
    per_layer_globals: Tensor | None  # L × d; None without a global slot

    @property
    def num_regions(self) -> int:
        return self.regions.shape[0]


def build_encoder_params(
    store: ModelParams,
    config: EncoderConfig,
    d_in: int,
    rng: np.random.Generator,
    prefix: str = "encoder",
) -> EncoderParams:
    """Create and register every encoder tensor for ``config``."""
    d = config.d_model
    layers = [
        EncoderLayerParams(
            attention=MultiHeadParams.create(
                store, f"{prefix}.layer{i}.attention", d, config.heads, rng
            ),
            feed_forward=FeedForwardParams.create(
                store, f"{prefix}.layer{i}.feed_forward", d, config.d_ff, rng
            ),
            norm_attention=LayerNormParams.create(store, f"{prefix}.layer{i}.norm1", d),
            norm_feed_forward=LayerNormParams.create(
                store, f"{prefix}.layer{i}.norm2", d
            ),
        )
        for i in range(config.layers)
    ]

    fusion = FusionParams()
    if config.fusion == "lstm":
        fusion.lstm = LstmFusionParams(
            **{
                gate: LstmGate.create(store, f"{prefix}.fusion.lstm.{gate}", d, rng)
                for gate in ("input", "forget", "output", "candidate")
            }
        )
    elif config.fusion == "attention":
        fusion.query = store.add(
            f"{prefix}.fusion.query", rng.normal(0.0, 1.0 / math.sqrt(d), size=(1, d))
        )

    if config.intra_layer != "gea" and config.inter_layer != "none":
        logger.warning(
            f"inter_layer={config.inter_layer} has no effect with "
            f"intra_layer={config.intra_layer}"
        )

    return EncoderParams(
        projection=LinearParams.create(store, f"{prefix}.projection", d_in, d, rng),
        layers=layers,
        fusion=fusion,
    )


def mean_pool_global(features: Tensor) -> Tensor:
    """
    Mean of the region rows, as a ``1 × d_in`` row.

    Raises:
        ContractError: If there are no regions
    """
    if features.ndim != 2 or features.shape[0] == 0:
        raise ContractError(
            f"Need at least one region row, got shape {features.shape}",
            details={"shape": features.shape},
        )
    return reduce_mean(features, axis=0, keepdims=True)


def project_inputs(
    features: Tensor, global_features: Tensor, projection: LinearParams
) -> tuple[Tensor, Tensor]:
    """
    Apply the shared input projection to every region row and to the global row.

    Raises:
        DimensionError: If the feature width differs from the projection input
    """
    d_in = projection.weight.shape[0]
    for name, x in (("features", features), ("global", global_features)):
        if x.shape[-1] != d_in:
            raise DimensionError(
                f"{name} width {x.shape[-1]} does not match projection input {d_in}",
                shapes=[x.shape, projection.weight.shape],
            )
    return linear(features, projection), linear(global_features, projection)


def gea_layer(
    rows: Tensor,
    params: EncoderLayerParams,
    keep_prob: float,
    train: bool,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """One encoder layer: self-attention and feed-forward, each with dropout,
    residual and layer norm. When a global slot is present it is the last row
    and takes part in attention like any region."""
    attended = multi_head(rows, rows, rows, params.attention)
    hidden = apply_layer_norm(
        add(rows, dropout(attended, keep_prob, train, rng)), params.norm_attention
    )
    transformed = feed_forward(hidden, params.feed_forward)
    return apply_layer_norm(
        add(hidden, dropout(transformed, keep_prob, train, rng)),
        params.norm_feed_forward,
    )


def lstm_cell(
    x: Tensor, h: Tensor, c: Tensor, params: LstmFusionParams
) -> tuple[Tensor, Tensor]:
    """Standard LSTM step; returns the new hidden and cell state."""
    i = sigmoid(params.input(x, h))
    f = sigmoid(params.forget(x, h))
    o = sigmoid(params.output(x, h))
    candidate = tanh(params.candidate(x, h))
    c_next = add(mul(f, c), mul(i, candidate))
    return mul(o, tanh(c_next)), c_next


def fuse_layers(layer_globals: Tensor, mode: str, fusion: FusionParams) -> Tensor:
    """
    Fuse per-layer global rows ``g^1..g^L`` (an ``L × d`` tensor) into ``g_F``.

    Modes: ``none`` takes ``g^L``; ``average`` the mean; ``attention`` a learned
    query attending over the L rows; ``lstm`` the last hidden state of an LSTM
    run over the rows from a zero state.

    Raises:
        ConfigurationError: If the mode is unknown or its parameters are missing
    """
    count, width = layer_globals.shape
    if count < 1:
        raise ContractError("Fusion needs at least one layer global")

    if mode == "none":
        return index(layer_globals, slice(count - 1, count))
    if mode == "average":
        return reduce_mean(layer_globals, axis=0, keepdims=True)
    if mode == "attention":
        if fusion.query is None:
            raise ConfigurationError("Attention fusion has no query parameter")
        scores = matmul(fusion.query, transpose(layer_globals)) * (1.0 / math.sqrt(width))
        return matmul(softmax(scores, axis=-1), layer_globals)
    if mode == "lstm":
        if fusion.lstm is None:
            raise ConfigurationError("LSTM fusion has no cell parameters")
        h = Tensor(np.zeros((1, width)))
        c = Tensor(np.zeros((1, width)))
        for layer in range(count):
            h, c = lstm_cell(
                index(layer_globals, slice(layer, layer + 1)), h, c, fusion.lstm
            )
        return h
    raise ConfigurationError(f"Unknown fusion mode: {mode}", config_key="model.inter_layer")


def encode(
    features: Tensor,
    config: EncoderConfig,
    params: EncoderParams,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> EncodedImage:
    """
    Run the encoder over one image's ``N × d_in`` region features.

    ``plain`` appends no global slot and uses the projected mean as ``g_F``;
    ``g0`` keeps the slot but uses the projected mean as ``g_F``; ``gea``
    fuses the per-layer global rows with the configured fusion.
    """
    global_features = mean_pool_global(features)
    regions, global_row = project_inputs(features, global_features, params.projection)
    num_regions = regions.shape[0]

    if not config.uses_global_slot:
        rows = regions
        for layer in params.layers:
            rows = gea_layer(rows, layer, config.keep_prob, train, rng)
        return EncodedImage(regions=rows, global_vector=global_row, per_layer_globals=None)

    rows = concat([regions, global_row], axis=0)
    layer_globals: list[Tensor] = []
    for layer in params.layers:
        rows = gea_layer(rows, layer, config.keep_prob, train, rng)
        layer_globals.append(index(rows, slice(num_regions, num_regions + 1)))

    stacked = concat(layer_globals, axis=0)
    if config.intra_layer == "g0":
        fused = global_row
    else:
        fused = fuse_layers(stacked, config.fusion, params.fusion)

    return EncodedImage(
        regions=index(rows, slice(0, num_regions)),
        global_vector=fused,
        per_layer_globals=stacked,
    )
