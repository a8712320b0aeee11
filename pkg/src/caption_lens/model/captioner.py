"""The global enhanced transformer captioning model."""

import logging
from collections.abc import Iterator, Sequence
from contextlib import contextmanager
from dataclasses import asdict

import numpy as np
from numpy.typing import ArrayLike

from caption_lens.core.exceptions import ContractError, VocabularyLookupError
from caption_lens.core.tensor import (
    FloatArray,
    Tensor,
    index,
    log_softmax,
    no_tape,
    reduce_sum,
)
from caption_lens.model.decoder import DecoderConfig, build_decoder_params, decode_logits
from caption_lens.model.encoder import (
    EncodedImage,
    EncoderConfig,
    build_encoder_params,
    encode,
)
from caption_lens.model.params import ModelParams

logger = logging.getLogger(__name__)


class GlobalEnhancedTransformer:
    """Encoder/decoder captioner over pre-extracted region features.

    The model starts in evaluation mode. In training mode dropout draws its
    masks from ``dropout_rng``; call :meth:`reseed` to freeze them.
    """

    def __init__(
        self,
        encoder_config: EncoderConfig,
        decoder_config: DecoderConfig,
        d_in: int,
        seed: int = 0,
        bos_id: int = 1,
        eos_id: int = 2,
    ):
        """
        Initialize model parameters.

        Args:
            encoder_config: Encoder shape and ablation switches
            decoder_config: Decoder shape, controller and vocabulary size
            d_in: Width of the input region features
            seed: Seed for parameter initialisation and dropout masks
            bos_id: Start-of-sentence token id
            eos_id: End-of-sentence token id
        """
        if encoder_config.d_model != decoder_config.d_model:
            raise ContractError("Encoder and decoder widths must match")

        self.encoder_config = encoder_config
        self.decoder_config = decoder_config
        self.d_in = d_in
        self.bos_id = bos_id
        self.eos_id = eos_id
        self.training = False

        init_rng = np.random.default_rng(seed)
        self.params = ModelParams()
        self.encoder_params = build_encoder_params(
            self.params, encoder_config, d_in, init_rng
        )
        self.decoder_params = build_decoder_params(self.params, decoder_config, init_rng)
        self.dropout_rng = np.random.default_rng(seed + 1)

        logger.info(
            f"Built model: L={encoder_config.layers}, d={encoder_config.d_model}, "
            f"h={encoder_config.heads}, intra={encoder_config.intra_layer}, "
            f"inter={encoder_config.fusion}, controller={decoder_config.controller}, "
            f"{self.params.num_values} values"
        )

    @property
    def vocab_size(self) -> int:
        return self.decoder_config.vocab_size

    @property
    def max_len(self) -> int:
        return self.decoder_config.max_len

    def model_metadata(self) -> dict[str, object]:
        """Shape and ablation settings recorded in checkpoints."""
        return {
            **asdict(self.encoder_config),
            **asdict(self.decoder_config),
            "d_in": self.d_in,
        }

    def train(self, mode: bool = True) -> "GlobalEnhancedTransformer":
        self.training = mode
        return self

    def eval(self) -> "GlobalEnhancedTransformer":
        return self.train(False)

    @contextmanager
    def evaluating(self) -> Iterator[None]:
        """Temporarily switch to evaluation mode."""
        previous = self.training
        self.training = False
        try:
            yield
        finally:
            self.training = previous

    def reseed(self, seed: int) -> None:
        """Restart the dropout mask stream."""
        self.dropout_rng = np.random.default_rng(seed)

    def _rng(self) -> np.random.Generator | None:
        return self.dropout_rng if self.training else None

    def encode(self, features: Tensor | ArrayLike) -> EncodedImage:
        """Encode one image's ``N × d_in`` region features."""
        inputs = features if isinstance(features, Tensor) else Tensor(features)
        return encode(
            inputs, self.encoder_config, self.encoder_params, self.training, self._rng()
        )

    def decode_logits(self, tokens: Sequence[int], encoded: EncodedImage) -> Tensor:
        """``t × |V|`` next-word logits for a BOS-initial prefix."""
        return decode_logits(
            tokens,
            encoded,
            self.decoder_params,
            self.decoder_config,
            self.bos_id,
            self.training,
            self._rng(),
        )

    def next_log_probs(self, prefix: Sequence[int], encoded: EncodedImage) -> FloatArray:
        """Log-probabilities of the word following ``prefix``, never recorded."""
        with no_tape(), self.evaluating():
            logits = self.decode_logits(prefix, encoded)
            return log_softmax(index(logits, -1)).data

    def token_log_probs(self, encoded: EncodedImage, tokens: Sequence[int]) -> Tensor:
        """
        Log-probability of each generated token under teacher forcing.

        Args:
            encoded: Encoder output
            tokens: Generated tokens, without the leading BOS

        Returns:
            Length-``len(tokens)`` tensor of ``log p(y_t | y_<t)``
        """
        if not tokens:
            raise ContractError("Cannot score an empty token sequence")
        out_of_range = [t for t in tokens if not 0 <= t < self.vocab_size]
        if out_of_range:
            raise VocabularyLookupError(
                f"Token id {out_of_range[0]} is outside the vocabulary",
                token_id=int(out_of_range[0]),
                vocab_size=self.vocab_size,
            )
        inputs = [self.bos_id, *tokens[:-1]]
        log_probs = log_softmax(self.decode_logits(inputs, encoded), axis=-1)
        return index(log_probs, (np.arange(len(tokens)), np.asarray(tokens)))

    def sequence_log_prob(self, encoded: EncodedImage, tokens: Sequence[int]) -> Tensor:
        """Scalar ``sum_t log p(y_t | y_<t)`` over the generated tokens."""
        return reduce_sum(self.token_log_probs(encoded, tokens))
