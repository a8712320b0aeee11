"""Tests for beam search and greedy decoding."""

import logging
from collections.abc import Iterator, Sequence
from itertools import product

import numpy as np
import pytest

from caption_lens.core.exceptions import ContractError
from caption_lens.inference.beam_search import (
    BeamHypothesis,
    beam_search,
    caption_features,
    decode_dataset,
    greedy_decode,
)
from caption_lens.model.captioner import GlobalEnhancedTransformer

BOS, EOS, VOCAB = 1, 2, 6


class TableScorer:
    """Next-word probabilities looked up by prefix; unknown prefixes end the caption."""

    bos_id = BOS
    eos_id = EOS

    def __init__(self, table: dict[tuple[int, ...], dict[int, float]], default_eos: bool = True):
        self.table = table
        self.default_eos = default_eos
        self.calls = 0

    def next_log_probs(self, prefix: Sequence[int], encoded: object) -> np.ndarray:
        self.calls += 1
        probs = np.full(VOCAB, 1e-9)
        fallback = {EOS: 1.0} if self.default_eos else {5: 0.9}
        for token, p in self.table.get(tuple(prefix), fallback).items():
            probs[token] = p
        return np.log(probs)


class RandomScorer:
    """Fixed random next-word distribution per prefix, drawn on first use."""

    bos_id = BOS
    eos_id = EOS

    def __init__(self, vocab: int, seed: int):
        self.vocab = vocab
        self.rng = np.random.default_rng(seed)
        self.rows: dict[tuple[int, ...], np.ndarray] = {}

    def next_log_probs(self, prefix: Sequence[int], encoded: object) -> np.ndarray:
        key = tuple(prefix)
        if key not in self.rows:
            logits = self.rng.normal(0.0, 2.0, self.vocab)
            self.rows[key] = logits - np.logaddexp.reduce(logits)
        return self.rows[key].copy()

    def score(self, tokens: Sequence[int]) -> float:
        return sum(
            self.next_log_probs([BOS, *tokens[:i]], None)[token]
            for i, token in enumerate(tokens)
        )


def all_captions(vocab: int, max_len: int) -> Iterator[tuple[int, ...]]:
    """Every EOS-terminated sequence within ``max_len`` plus the unfinished ones at it."""
    words = [t for t in range(vocab) if t != EOS]
    for length in range(max_len + 1):
        for seq in product(words, repeat=length):
            if length < max_len:
                yield (*seq, EOS)
            else:
                yield seq


@pytest.fixture
def garden_path() -> TableScorer:
    """Greedy takes 3 3 EOS (0.21); the best caption is 4 EOS (0.36)."""
    return TableScorer(
        {
            (BOS,): {3: 0.6, 4: 0.4},
            (BOS, 3): {2: 0.3, 3: 0.35, 4: 0.35},
            (BOS, 4): {2: 0.9, 3: 0.1},
        }
    )


class TestBeamSearch:
    def test_beam_beats_greedy(self, garden_path):
        greedy = greedy_decode(None, garden_path, max_len=5)
        beams = beam_search(None, garden_path, beam_width=2, max_len=5)

        assert greedy.tokens == (3, 3, EOS)
        assert greedy.log_prob == pytest.approx(np.log(0.21))
        assert [b.tokens for b in beams] == [(4, EOS), (3, 3, EOS)]
        assert beams[0].log_prob == pytest.approx(np.log(0.36))
        assert beams[1].words == [3, 3]

    def test_width_one_equals_greedy(self, garden_path):
        [beam] = beam_search(None, garden_path, 1, 5)
        assert beam == greedy_decode(None, garden_path, 5)

    def test_width_one_equals_greedy_on_model(self, tiny_model, synthetic_dataset):
        encoded = tiny_model.encode(synthetic_dataset.features.get("img0004"))

        [beam] = beam_search(encoded, tiny_model, 1, 6)
        greedy = greedy_decode(encoded, tiny_model, 6)

        assert beam.tokens == greedy.tokens
        assert beam.log_prob == pytest.approx(greedy.log_prob)
        assert beam.forced == greedy.forced

    @pytest.mark.parametrize("seed", range(20))
    def test_full_width_finds_most_probable_caption(self, seed):
        scorer = RandomScorer(vocab=3, seed=seed)

        [best, *_] = beam_search(None, scorer, beam_width=3, max_len=2)

        candidates = list(all_captions(3, 2))
        assert len(candidates) == 7
        top = max(candidates, key=scorer.score)
        assert best.tokens == top
        assert best.log_prob == pytest.approx(scorer.score(top))
        assert best.forced == (EOS not in top)

    def test_width_one_equals_greedy_on_random_tables(self):
        for seed in range(100):
            scorer = RandomScorer(vocab=VOCAB, seed=seed)
            [beam] = beam_search(None, scorer, 1, 6)
            greedy = greedy_decode(None, scorer, 6)
            assert beam.tokens == greedy.tokens, seed
            assert beam.log_prob == pytest.approx(greedy.log_prob)

    @pytest.mark.slow
    def test_width_one_equals_greedy_on_random_models(
        self, tiny_model_config, synthetic_dataset
    ):
        encoder = tiny_model_config.encoder_config()
        decoder = tiny_model_config.decoder_config(len(synthetic_dataset.vocab))
        features = synthetic_dataset.features.get("img0002")

        for seed in range(100):
            model = GlobalEnhancedTransformer(encoder, decoder, d_in=8, seed=seed)
            encoded = model.encode(features)

            [beam] = beam_search(encoded, model, 1, 6)
            greedy = greedy_decode(encoded, model, 6)

            assert beam.tokens == greedy.tokens, seed
            assert beam.log_prob == pytest.approx(greedy.log_prob)
            assert beam.forced == greedy.forced

    def test_sorted_and_bounded(self, tiny_model, synthetic_dataset):
        beams = caption_features(tiny_model, synthetic_dataset.features.get("img0001"), 3, 6)

        assert 1 <= len(beams) <= 3
        scores = [b.log_prob for b in beams]
        assert scores == sorted(scores, reverse=True)
        assert all(len(b) <= 6 for b in beams)

    def test_forced_when_no_eos(self, caplog):
        scorer = TableScorer({}, default_eos=False)

        with caplog.at_level(logging.WARNING, logger="caption_lens"):
            beams = beam_search(None, scorer, beam_width=2, max_len=3)

        assert len(beams) == 2
        assert all(b.forced and len(b) == 3 for b in beams)
        assert beams[0].tokens == (5, 5, 5)
        assert beams[0].words == [5, 5, 5]
        assert "force-finishing" in caplog.text

    def test_live_beams_finish_at_limit(self):
        """An early EOS does not push the other beam out of the result."""
        scorer = TableScorer({(BOS,): {EOS: 0.5, 3: 0.5}}, default_eos=False)

        beams = beam_search(None, scorer, beam_width=2, max_len=2)

        assert [b.tokens for b in beams] == [(EOS,), (3, 5)]
        assert [b.forced for b in beams] == [False, True]
        assert beams[0].words == []
        assert beams[1].log_prob == pytest.approx(np.log(0.45))

    def test_greedy_forced(self):
        hyp = greedy_decode(None, TableScorer({}, default_eos=False), 2)
        assert hyp.forced
        assert hyp.tokens == (5, 5)

    def test_ties_go_to_lower_token(self):
        scorer = TableScorer({(BOS,): {4: 0.5, 3: 0.5}})
        [beam] = beam_search(None, scorer, 1, 3)
        assert beam.tokens == (3, EOS)

    def test_stops_once_beam_is_full(self, garden_path):
        beam_search(None, garden_path, 2, 50)
        # one call for BOS, two at step 2, one at step 3
        assert garden_path.calls == 4

    @pytest.mark.parametrize(("width", "max_len"), [(0, 5), (2, 0)])
    def test_invalid_limits(self, garden_path, width, max_len):
        with pytest.raises(ContractError):
            beam_search(None, garden_path, width, max_len)

    def test_eos_only_hypothesis_has_no_words(self):
        assert BeamHypothesis((EOS,), -0.1).words == []


class TestDecodeDataset:
    def test_requested_order(self, tiny_model, synthetic_dataset):
        tiny_model.train()

        decoded = decode_dataset(tiny_model, synthetic_dataset, 2, 6, ["img0003", "img0000"])

        assert list(decoded) == ["img0003", "img0000"]
        assert tiny_model.training
        again = decode_dataset(tiny_model, synthetic_dataset, 2, 6, ["img0003"])
        assert again["img0003"] == decoded["img0003"]

    def test_all_images_by_default(self, tiny_model, synthetic_dataset):
        assert list(decode_dataset(tiny_model, synthetic_dataset, 1, 6)) == synthetic_dataset.image_ids
