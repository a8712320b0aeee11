"""Teacher-forced cross-entropy."""

from collections.abc import Sequence

import numpy as np

from caption_lens.core.exceptions import ContractError, VocabularyLookupError
from caption_lens.core.tensor import Tensor, index, log_softmax, neg, reduce_sum

REDUCTIONS = ("sum", "mean")


def xe_loss(
    logits: Tensor,
    targets: Sequence[int],
    pad_id: int = 0,
    reduction: str = "sum",
) -> Tensor:
    """
    ``-sum_t log p(y*_t)`` over the non-pad targets.

    Args:
        logits: ``T × |V|`` decoder logits
        targets: ``T`` target ids
        pad_id: Targets equal to this id are ignored
        reduction: ``sum`` or ``mean`` (per non-pad token)

    Returns:
        Scalar loss tensor

    Raises:
        ContractError: If lengths differ or no target is a word
        VocabularyLookupError: If a target id is out of range
    """
    if reduction not in REDUCTIONS:
        raise ContractError(f"Unknown reduction: {reduction}")
    if logits.ndim != 2 or logits.shape[0] != len(targets):
        raise ContractError(
            f"Logits {logits.shape} do not match {len(targets)} targets"
        )
    vocab_size = logits.shape[1]
    ids = np.asarray(targets, dtype=np.int64)
    bad = ids[(ids < 0) | (ids >= vocab_size)]
    if bad.size:
        raise VocabularyLookupError(
            f"Target id {int(bad[0])} outside vocabulary",
            token_id=int(bad[0]),
            vocab_size=vocab_size,
        )

    positions = np.flatnonzero(ids != pad_id)
    if positions.size == 0:
        raise ContractError("Every target is padding")

    picked = index(log_softmax(logits, axis=-1), (positions, ids[positions]))
    total = neg(reduce_sum(picked))
    if reduction == "mean":
        return total / float(positions.size)
    return total
