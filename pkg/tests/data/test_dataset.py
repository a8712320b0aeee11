"""Tests for caption datasets and the synthetic generator."""

import logging
from pathlib import Path

import numpy as np
import pytest

from caption_lens.core.exceptions import ConfigurationError, ImageLookupError
from caption_lens.data.dataset import (
    CaptionDataset,
    caption_texts,
    load_caption_dataset,
    make_synthetic_dataset,
    read_captions,
    write_captions,
    write_synthetic_dataset,
)
from caption_lens.data.features import FeatureRecord, FeatureStore, write_features, write_manifest
from caption_lens.data.vocab import BOS_ID, EOS_ID, Vocabulary


class TestCaptionFiles:
    def test_groups_by_image(self, temp_dir: Path):
        path = write_captions(
            temp_dir / "captions.tsv",
            {"img1": ["a dog runs", "a dog is running"], "img2": ["a cat"]},
        )

        assert read_captions(path) == {
            "img1": ["a dog runs", "a dog is running"],
            "img2": ["a cat"],
        }

    def test_blank_lines_skipped(self, temp_dir: Path):
        path = temp_dir / "c.tsv"
        path.write_text("img1\ta dog\n\nimg1\ta cat\n", encoding="utf-8")
        assert read_captions(path) == {"img1": ["a dog", "a cat"]}

    def test_errors(self, temp_dir: Path):
        with pytest.raises(ConfigurationError):
            read_captions(temp_dir / "absent.tsv")
        bad = temp_dir / "bad.tsv"
        bad.write_text("img1 a dog\n", encoding="utf-8")
        with pytest.raises(ConfigurationError, match="line 1"):
            read_captions(bad)


class TestLoadDataset:
    @pytest.fixture
    def files(self, temp_dir: Path, rng) -> tuple[Path, Path]:
        entries = {
            image_id: write_features(
                temp_dir / "features" / f"{image_id}.getf",
                FeatureRecord(image_id, rng.normal(0.0, 1.0, (2, 4)).astype(np.float32)),
            )
            for image_id in ("img1", "img2")
        }
        manifest = write_manifest(temp_dir / "manifest.tsv", entries)
        captions = write_captions(
            temp_dir / "captions.tsv",
            {"img1": ["a dog runs", "a dog"], "img2": ["a cat sleeps on the mat today"]},
        )
        return captions, manifest

    def test_load(self, files):
        captions, manifest = files

        dataset = load_caption_dataset(captions, manifest, max_len=6)

        assert dataset.image_ids == ["img1", "img2"]
        assert dataset.num_captions == 3
        assert dataset.vocab.words[:2] == ("a", "dog")
        assert dataset.features.feature_dim == 4
        first = dataset.captions["img1"][0]
        assert first.ids[0] == BOS_ID and EOS_ID in first.ids and len(first.ids) == 6
        assert dataset.captions["img2"][0].truncated

    def test_references_strip_reserved(self, files):
        dataset = load_caption_dataset(*files, max_len=8)
        vocab = dataset.vocab

        assert dataset.references("img1") == [
            [vocab.id_of("a"), vocab.id_of("dog"), vocab.id_of("runs")],
            [vocab.id_of("a"), vocab.id_of("dog")],
        ]
        assert len(dataset.reference_corpus()) == 2
        with pytest.raises(ImageLookupError):
            dataset.references("img9")

    def test_reuses_given_vocabulary(self, files):
        train = load_caption_dataset(*files, max_len=8)
        again = load_caption_dataset(*files, max_len=8, split="val", vocab=train.vocab)
        assert again.vocab is train.vocab
        assert again.split == "val"

    def test_truncation_warning(self, files, caplog):
        with caplog.at_level(logging.WARNING, logger="caption_lens"):
            load_caption_dataset(*files, max_len=6)
        assert "truncated" in caplog.text

    def test_captioned_image_without_features(self, temp_dir: Path, files):
        captions, manifest = files
        extra = temp_dir / "extra.tsv"
        extra.write_text(captions.read_text(encoding="utf-8") + "img3\ta bird\n", encoding="utf-8")
        with pytest.raises(ImageLookupError):
            load_caption_dataset(extra, manifest, max_len=8)

    def test_pairs_are_deterministic(self, files):
        dataset = load_caption_dataset(*files, max_len=8)
        pairs = list(dataset.pairs())
        assert [image_id for image_id, _ in pairs] == ["img1", "img1", "img2"]
        assert pairs == list(dataset.pairs())


class TestSyntheticDataset:
    def test_shape_and_vocabulary(self, synthetic_dataset: CaptionDataset):
        assert len(synthetic_dataset) == 6
        assert synthetic_dataset.image_ids[0] == "img0000"
        assert len(synthetic_dataset.vocab) == 16
        assert synthetic_dataset.vocab.words[0] == "w000"
        assert synthetic_dataset.max_len == 8
        assert synthetic_dataset.features.get("img0003").shape == (3, 8)

    def test_captions_follow_object_classes(self, synthetic_dataset: CaptionDataset):
        """Each caption is two words per class, classes ascending, all distinct."""
        for image_id in synthetic_dataset:
            [words] = synthetic_dataset.references(image_id)
            assert len(words) == 6
            classes = [(w - 4) // 2 for w in words[::2]]
            assert classes == sorted(set(classes))
            assert words[1::2] == [w + 1 for w in words[::2]]

    def test_images_are_distinct(self, synthetic_dataset: CaptionDataset):
        captions = [tuple(synthetic_dataset.references(i)[0]) for i in synthetic_dataset]
        assert len(set(captions)) == len(captions)

    def test_same_seed_same_data(self):
        first = make_synthetic_dataset(3, 5, 3, 4, 20, 3)
        second = make_synthetic_dataset(3, 5, 3, 4, 20, 3)
        other = make_synthetic_dataset(4, 5, 3, 4, 20, 3)

        assert caption_texts(first) == caption_texts(second)
        np.testing.assert_array_equal(
            first.features.get("img0001"), second.features.get("img0001")
        )
        assert not np.array_equal(first.features.get("img0001"), other.features.get("img0001"))

    def test_default_encoded_length(self):
        dataset = make_synthetic_dataset(0, 2, 3, 4, 20, 3)
        assert dataset.max_len == 5
        assert all(not c.truncated for group in dataset.captions.values() for c in group)

    @pytest.mark.parametrize(
        ("images", "regions", "vocab_size", "caption_len"),
        [(2, 3, 20, 2), (2, 3, 6, 3), (100, 3, 10, 3), (0, 3, 20, 3)],
    )
    def test_impossible_settings(self, images, regions, vocab_size, caption_len):
        with pytest.raises(ConfigurationError):
            make_synthetic_dataset(0, images, regions, 4, vocab_size, caption_len)

    def test_written_files_reload(self, temp_dir: Path, synthetic_dataset: CaptionDataset):
        paths = write_synthetic_dataset(synthetic_dataset, temp_dir / "synthetic")

        reloaded = load_caption_dataset(
            paths["captions"], paths["manifest"], max_len=8, vocab=synthetic_dataset.vocab
        )

        assert reloaded.image_ids == synthetic_dataset.image_ids
        assert reloaded.reference_corpus() == synthetic_dataset.reference_corpus()
        np.testing.assert_allclose(
            reloaded.features.get("img0002"),
            synthetic_dataset.features.get("img0002"),
        )

    def test_dataset_checks_feature_coverage(self):
        vocab = Vocabulary(tokens=("<pad>", "<bos>", "<eos>", "<unk>", "a"))
        with pytest.raises(ImageLookupError):
            CaptionDataset("train", vocab, FeatureStore(), 4, {"img1": []})
