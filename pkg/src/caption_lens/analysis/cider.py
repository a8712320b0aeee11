"""CIDEr-D consensus scoring over token-id captions.

Scores are the clipped TF-IDF cosine similarity of candidate and reference
n-grams (n = 1..4) with a Gaussian length penalty, averaged over n and over
references and scaled by 10.
"""

import logging
import math
from collections import Counter
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np

from caption_lens.core.exceptions import ConfigurationError, ContractError

logger = logging.getLogger(__name__)

MAX_N = 4
SIGMA = 6.0
SCALE = 10.0

NGram = tuple[int, ...]


def extract_ngrams(tokens: Sequence[int], max_n: int = MAX_N) -> list[Counter[NGram]]:
    """Per-order n-gram counts; entry ``k`` holds the ``k+1``-grams."""
    words = [int(t) for t in tokens]
    return [
        Counter(tuple(words[i : i + n]) for i in range(len(words) - n + 1))
        for n in range(1, max_n + 1)
    ]


@dataclass(frozen=True)
class NGramStats:
    """Document frequencies over a reference corpus.

    An n-gram's document frequency is the number of images whose reference
    group contains it at least once.
    """

    document_frequency: dict[NGram, int]
    corpus_size: int
    max_n: int = MAX_N

    def idf(self, ngram: NGram) -> float:
        return math.log(self.corpus_size / max(1, self.document_frequency.get(ngram, 0)))

    def __len__(self) -> int:
        return len(self.document_frequency)


def build_idf(
    reference_corpus: Sequence[Sequence[Sequence[int]]], max_n: int = MAX_N
) -> NGramStats:
    """
    Count document frequencies over reference groups, one group per image.

    Raises:
        ConfigurationError: If the corpus is empty
    """
    if not reference_corpus:
        raise ConfigurationError("Cannot build IDF statistics from an empty corpus")

    frequency: Counter[NGram] = Counter()
    for group in reference_corpus:
        seen: set[NGram] = set()
        for reference in group:
            for counts in extract_ngrams(reference, max_n):
                seen.update(counts)
        frequency.update(seen)

    logger.debug(
        f"IDF statistics: {len(frequency)} n-grams over {len(reference_corpus)} images"
    )
    return NGramStats(dict(frequency), len(reference_corpus), max_n)


@dataclass
class _Vector:
    weights: list[dict[NGram, float]]
    norms: list[float]
    length: int


def _tfidf(tokens: Sequence[int], stats: NGramStats) -> _Vector:
    weights = [
        {ngram: count * stats.idf(ngram) for ngram, count in counts.items()}
        for counts in extract_ngrams(tokens, stats.max_n)
    ]
    norms = [math.sqrt(sum(w * w for w in order.values())) for order in weights]
    return _Vector(weights, norms, len(tokens))


def _similarity(candidate: _Vector, reference: _Vector, sigma: float) -> float:
    delta = candidate.length - reference.length
    penalty = math.exp(-(delta**2) / (2.0 * sigma**2))
    per_order = []
    for hyp, ref, hyp_norm, ref_norm in zip(
        candidate.weights, reference.weights, candidate.norms, reference.norms, strict=True
    ):
        if hyp_norm == 0.0 or ref_norm == 0.0:
            per_order.append(0.0)
            continue
        overlap = sum(min(w, ref[g]) * ref[g] for g, w in hyp.items() if g in ref)
        per_order.append(min(1.0, overlap / (hyp_norm * ref_norm)) * penalty)
    return float(np.mean(per_order))


def cider_d(
    candidate: Sequence[int],
    references: Sequence[Sequence[int]],
    stats: NGramStats,
    sigma: float = SIGMA,
) -> float:
    """
    CIDEr-D of one candidate against its references, in ``[0, 10]``.

    Args:
        candidate: Candidate word ids, without BOS/EOS/PAD
        references: Reference word ids for the same image
        stats: Document frequencies of the training references
        sigma: Length-penalty width

    Returns:
        Score; an empty candidate scores 0

    Raises:
        ContractError: If ``references`` is empty
    """
    if not references:
        raise ContractError("CIDEr-D needs at least one reference")
    if not candidate:
        return 0.0

    hyp = _tfidf(candidate, stats)
    total = sum(_similarity(hyp, _tfidf(ref, stats), sigma) for ref in references)
    return SCALE * total / len(references)


@dataclass
class CorpusScore:
    mean: float
    per_image: dict[str, float] = field(default_factory=dict)

    @property
    def count(self) -> int:
        return len(self.per_image)


def score_corpus(
    candidates: Mapping[str, Sequence[int]],
    references: Mapping[str, Sequence[Sequence[int]]],
    stats: NGramStats,
) -> CorpusScore:
    """
    Mean CIDEr-D over every candidate image.

    Raises:
        ContractError: If a candidate has no reference group
    """
    missing = [image_id for image_id in candidates if image_id not in references]
    if missing:
        raise ContractError(
            "Candidates without references", details={"image_ids": ", ".join(missing)}
        )
    per_image = {
        image_id: cider_d(tokens, references[image_id], stats)
        for image_id, tokens in candidates.items()
    }
    mean = float(np.mean(list(per_image.values()))) if per_image else 0.0
    return CorpusScore(mean=mean, per_image=per_image)
