"""Beam search and greedy decoding over a next-word scorer."""

import logging
from collections.abc import Sequence
from dataclasses import dataclass
from typing import Protocol

import numpy as np
from numpy.typing import ArrayLike

from caption_lens.core.exceptions import ContractError
from caption_lens.core.tensor import FloatArray, no_tape
from caption_lens.data.dataset import CaptionDataset
from caption_lens.model.captioner import GlobalEnhancedTransformer
from caption_lens.model.encoder import EncodedImage

logger = logging.getLogger(__name__)


class StepScorer(Protocol):
    """Anything that scores the next word of a BOS-initial prefix."""

    bos_id: int
    eos_id: int

    def next_log_probs(
        self, prefix: Sequence[int], encoded: EncodedImage
    ) -> FloatArray: ...


@dataclass(frozen=True)
class BeamHypothesis:
    """A decoded sequence without BOS.

    ``tokens`` ends with EOS unless the hypothesis was force-finished at the
    length limit (``forced``). ``log_prob`` is the raw cumulative sum.
    """

    tokens: tuple[int, ...]
    log_prob: float
    finished: bool = True
    forced: bool = False

    @property
    def words(self) -> list[int]:
        """Tokens with the trailing EOS removed."""
        if self.forced or not self.tokens:
            return list(self.tokens)
        return list(self.tokens[:-1])

    def __len__(self) -> int:
        return len(self.tokens)


def _check_limits(beam_width: int, max_len: int) -> None:
    if beam_width < 1:
        raise ContractError(f"Beam width must be at least 1, got {beam_width}")
    if max_len < 1:
        raise ContractError(f"max_len must be at least 1, got {max_len}")


def beam_search(
    encoded: EncodedImage,
    scorer: StepScorer,
    beam_width: int,
    max_len: int,
) -> list[BeamHypothesis]:
    """
    Decode up to ``beam_width`` finished hypotheses, best first.

    Each step expands every live hypothesis over the vocabulary and keeps the
    best ``beam_width - finished`` continuations by cumulative log-prob, ties
    going to the lower token id and then the earlier hypothesis. A hypothesis
    that emits EOS leaves the beam. Hypotheses still live after ``max_len``
    steps are finished there with ``forced=True`` and ranked with the rest.

    Args:
        encoded: Encoder output for the image
        scorer: Next-word log-probabilities, usually the captioner
        beam_width: Hypotheses kept per step
        max_len: Maximum generated tokens, EOS included

    Returns:
        Finished hypotheses sorted by descending log-prob

    Raises:
        ContractError: If ``beam_width`` or ``max_len`` is below 1
    """
    _check_limits(beam_width, max_len)
    eos = scorer.eos_id
    completed: list[BeamHypothesis] = []
    hypotheses: list[list[int]] = [[]]
    scores: FloatArray = np.zeros(1)

    for _ in range(max_len):
        log_probs = np.stack(
            [scorer.next_log_probs([scorer.bos_id, *h], encoded) for h in hypotheses]
        )
        num_hyps, vocab = log_probs.shape
        candidates = (scores[:, None] + log_probs).reshape(-1)
        hyp_ids = np.repeat(np.arange(num_hyps), vocab)
        token_ids = np.tile(np.arange(vocab), num_hyps)

        keep = beam_width - len(completed)
        order = np.lexsort((hyp_ids, token_ids, -candidates))[:keep]

        survivors: list[list[int]] = []
        survivor_scores: list[float] = []
        for j in order:
            extended = [*hypotheses[hyp_ids[j]], int(token_ids[j])]
            if token_ids[j] == eos:
                completed.append(BeamHypothesis(tuple(extended), float(candidates[j])))
            else:
                survivors.append(extended)
                survivor_scores.append(float(candidates[j]))

        hypotheses = survivors
        scores = np.asarray(survivor_scores)
        if len(completed) >= beam_width or not hypotheses:
            break
    else:
        if not completed:
            logger.warning(
                f"No hypothesis reached EOS within {max_len} tokens; "
                f"force-finishing {len(hypotheses)}"
            )
        completed.extend(
            BeamHypothesis(tuple(h), float(s), finished=True, forced=True)
            for h, s in zip(hypotheses, scores, strict=True)
        )

    return sorted(completed, key=lambda hyp: -hyp.log_prob)


def greedy_decode(
    encoded: EncodedImage, scorer: StepScorer, max_len: int
) -> BeamHypothesis:
    """
    Pick the most probable word at each step, lowest id on ties.

    Returns:
        The single decoded hypothesis; ``forced`` if EOS never came
    """
    _check_limits(1, max_len)
    tokens: list[int] = []
    score = 0.0
    for _ in range(max_len):
        candidates = score + scorer.next_log_probs([scorer.bos_id, *tokens], encoded)
        token = int(np.argmax(candidates))
        score = float(candidates[token])
        tokens.append(token)
        if token == scorer.eos_id:
            return BeamHypothesis(tuple(tokens), score)
    return BeamHypothesis(tuple(tokens), score, finished=True, forced=True)


def caption_features(
    model: GlobalEnhancedTransformer,
    features: ArrayLike,
    beam_width: int,
    max_len: int,
) -> list[BeamHypothesis]:
    """Encode one image in evaluation mode and beam-decode it."""
    with no_tape(), model.evaluating():
        encoded = model.encode(features)
    return beam_search(encoded, model, beam_width, max_len)


def decode_dataset(
    model: GlobalEnhancedTransformer,
    dataset: CaptionDataset,
    beam_width: int,
    max_len: int,
    image_ids: Sequence[str] | None = None,
) -> dict[str, BeamHypothesis]:
    """
    Best beam hypothesis for each requested image, in request order.

    Raises:
        ImageLookupError: If an id has no features
    """
    return {
        image_id: caption_features(
            model, dataset.features.get(image_id), beam_width, max_len
        )[0]
        for image_id in (image_ids if image_ids is not None else dataset.image_ids)
    }
