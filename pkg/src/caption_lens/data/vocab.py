"""Vocabulary construction and caption token encoding."""

import logging
from collections import Counter
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field

from caption_lens.core.exceptions import ContractError, VocabularyLookupError

logger = logging.getLogger(__name__)

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
UNK_ID = 3
RESERVED_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>")


def tokenize(text: str) -> list[str]:
    """Lowercase and split on whitespace."""
    return text.lower().split()


@dataclass(frozen=True)
class Vocabulary:
    """Dense id space: the four reserved tokens, then words."""

    tokens: tuple[str, ...]
    _index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        if self.tokens[: len(RESERVED_TOKENS)] != RESERVED_TOKENS:
            raise ContractError("Vocabulary must start with the reserved tokens")
        index = {token: i for i, token in enumerate(self.tokens)}
        if len(index) != len(self.tokens):
            raise ContractError("Vocabulary tokens must be unique")
        object.__setattr__(self, "_index", index)

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: object) -> bool:
        return token in self._index

    @property
    def words(self) -> tuple[str, ...]:
        return self.tokens[len(RESERVED_TOKENS) :]

    def id_of(self, token: str) -> int:
        """
        Id of a caption word.

        Words outside the vocabulary and reserved token strings met in text
        both map to UNK, so text can never place PAD, BOS or EOS.
        """
        token_id = self._index.get(token, UNK_ID)
        return UNK_ID if token_id < len(RESERVED_TOKENS) else token_id

    def token_of(self, token_id: int) -> str:
        if not 0 <= token_id < len(self.tokens):
            raise VocabularyLookupError(
                f"Token id {token_id} outside vocabulary",
                token_id=token_id,
                vocab_size=len(self.tokens),
            )
        return self.tokens[token_id]


def build_vocab(captions: Iterable[str], min_count: int = 1) -> Vocabulary:
    """
    Build a vocabulary from raw caption text.

    Words with at least ``min_count`` occurrences are kept, most frequent first
    with ties in alphabetical order; the rest encode to UNK.
    """
    if min_count < 1:
        raise ContractError(f"min_count must be >= 1, got {min_count}")
    counts = Counter(token for text in captions for token in tokenize(text))
    kept = sorted(
        (token for token, count in counts.items() if count >= min_count),
        key=lambda token: (-counts[token], token),
    )
    kept = [token for token in kept if token not in RESERVED_TOKENS]
    logger.debug(
        f"Vocabulary: {len(kept)} of {len(counts)} distinct words kept "
        f"(min_count={min_count})"
    )
    return Vocabulary(tokens=(*RESERVED_TOKENS, *kept))


@dataclass(frozen=True)
class EncodedCaption:
    ids: list[int]
    truncated: bool = False

    @property
    def length(self) -> int:
        """Position of EOS plus one, i.e. the unpadded length."""
        return self.ids.index(EOS_ID) + 1


def encode_caption(text: str, vocab: Vocabulary, max_len: int) -> EncodedCaption:
    """
    Encode ``text`` as ``[BOS, w.., EOS, PAD..]`` of exactly ``max_len`` ids.

    Text longer than ``max_len - 2`` words is truncated and flagged.
    """
    if max_len < 2:
        raise ContractError(f"max_len must leave room for BOS and EOS, got {max_len}")
    words = tokenize(text)
    truncated = len(words) > max_len - 2
    if truncated:
        logger.debug(f"Truncating caption of {len(words)} words to {max_len - 2}")
        words = words[: max_len - 2]
    ids = [BOS_ID, *(vocab.id_of(w) for w in words), EOS_ID]
    ids.extend([PAD_ID] * (max_len - len(ids)))
    return EncodedCaption(ids=ids, truncated=truncated)


def decode_tokens(ids: Sequence[int], vocab: Vocabulary) -> str:
    """Join the words of ``ids`` with spaces, dropping every reserved token."""
    return " ".join(
        vocab.token_of(int(i)) for i in ids if int(i) >= len(RESERVED_TOKENS)
    )


def strip_special(ids: Sequence[int]) -> list[int]:
    """Word ids between BOS and the first EOS, without padding."""
    words: list[int] = []
    for token in ids:
        if token == EOS_ID:
            break
        if token not in (PAD_ID, BOS_ID):
            words.append(int(token))
    return words
