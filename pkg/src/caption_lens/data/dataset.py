"""Caption datasets, caption files and the synthetic desk-scale generator.

Caption files are UTF-8, one ``image-id<TAB>caption text`` record per line;
several lines with the same id form that image's reference group.
"""

import logging
from collections.abc import Iterator
from dataclasses import dataclass, field
from itertools import combinations
from math import comb
from pathlib import Path

import numpy as np

from caption_lens.core.exceptions import ConfigurationError, ImageLookupError
from caption_lens.data.features import (
    FeatureRecord,
    FeatureStore,
    write_features,
    write_manifest,
)
from caption_lens.data.vocab import (
    RESERVED_TOKENS,
    EncodedCaption,
    Vocabulary,
    build_vocab,
    encode_caption,
    strip_special,
)

logger = logging.getLogger(__name__)

SYNTHETIC_NOISE = 0.1


@dataclass
class CaptionDataset:
    """Reference captions per image, linked to the store holding their features.

    ``captions`` keeps the encoded references (``BOS .. EOS PAD..``, exactly
    ``max_len`` ids each) in file order; ``image_ids`` fixes iteration order.
    """

    split: str
    vocab: Vocabulary
    features: FeatureStore
    max_len: int
    captions: dict[str, list[EncodedCaption]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        missing = [image_id for image_id in self.captions if image_id not in self.features]
        if missing:
            raise ImageLookupError(
                missing[0], details={"missing": len(missing), "split": self.split}
            )

    @property
    def image_ids(self) -> list[str]:
        return list(self.captions)

    def __len__(self) -> int:
        return len(self.captions)

    def __iter__(self) -> Iterator[str]:
        return iter(self.captions)

    @property
    def num_captions(self) -> int:
        return sum(len(group) for group in self.captions.values())

    def references(self, image_id: str) -> list[list[int]]:
        """Word ids of every reference for ``image_id``, reserved tokens removed."""
        if image_id not in self.captions:
            raise ImageLookupError(image_id, details={"split": self.split})
        return [strip_special(caption.ids) for caption in self.captions[image_id]]

    def reference_corpus(self) -> list[list[list[int]]]:
        """Reference groups of every image, in dataset order."""
        return [self.references(image_id) for image_id in self.captions]

    def pairs(self) -> Iterator[tuple[str, list[int]]]:
        """Every (image id, encoded caption) training pair in deterministic order."""
        for image_id, group in self.captions.items():
            for caption in group:
                yield image_id, caption.ids


def read_captions(path: Path) -> dict[str, list[str]]:
    """
    Read a caption file into reference groups keyed by image id.

    Raises:
        ConfigurationError: If the file is missing or a line has no TAB
    """
    if not path.exists():
        raise ConfigurationError(
            f"Caption file not found: {path}",
            config_key="data.captions_path",
            file_path=path,
        )
    groups: dict[str, list[str]] = {}
    for line_number, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        image_id, sep, text = line.partition("\t")
        if not sep:
            raise ConfigurationError(
                f"Malformed caption line {line_number}",
                file_path=path,
                details={"line": line},
            )
        groups.setdefault(image_id, []).append(text)
    return groups


def write_captions(path: Path, groups: dict[str, list[str]]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"{image_id}\t{text}" for image_id, texts in groups.items() for text in texts]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def encode_groups(
    groups: dict[str, list[str]], vocab: Vocabulary, max_len: int
) -> dict[str, list[EncodedCaption]]:
    encoded = {
        image_id: [encode_caption(text, vocab, max_len) for text in texts]
        for image_id, texts in groups.items()
    }
    truncated = sum(c.truncated for group in encoded.values() for c in group)
    if truncated:
        logger.warning(f"{truncated} captions truncated to {max_len - 2} words")
    return encoded


def load_caption_dataset(
    captions_path: Path,
    manifest_path: Path,
    max_len: int,
    min_count: int = 1,
    split: str = "train",
    vocab: Vocabulary | None = None,
) -> CaptionDataset:
    """
    Load captions and their feature store from disk.

    Args:
        captions_path: Caption file
        manifest_path: Feature manifest
        max_len: Encoded caption length including BOS and EOS
        min_count: Vocabulary threshold when ``vocab`` is not given
        split: Split name recorded on the dataset
        vocab: Reuse an existing vocabulary, e.g. the training split's

    Returns:
        CaptionDataset

    Raises:
        ConfigurationError: If a file is missing or malformed
        ImageLookupError: If a captioned image has no features
    """
    groups = read_captions(captions_path)
    store = FeatureStore.from_manifest(manifest_path)
    if vocab is None:
        vocab = build_vocab((t for texts in groups.values() for t in texts), min_count)

    dataset = CaptionDataset(
        split=split,
        vocab=vocab,
        features=store,
        max_len=max_len,
        captions=encode_groups(groups, vocab, max_len),
    )
    logger.info(
        f"Loaded {split} split: {len(dataset)} images, {dataset.num_captions} captions, "
        f"vocabulary {len(vocab)}"
    )
    return dataset


def _object_sets(
    rng: np.random.Generator, classes: int, regions: int, images: int
) -> list[tuple[int, ...]]:
    """Distinct sorted class sets, one per image."""
    if comb(classes, regions) < images:
        raise ConfigurationError(
            f"{classes} object classes cannot give {images} distinct {regions}-object images",
            config_key="data.synthetic",
        )
    if comb(classes, regions) <= 4 * images:
        pool = list(combinations(range(classes), regions))
        picks = rng.permutation(len(pool))[:images]
        return [pool[i] for i in picks]

    chosen: list[tuple[int, ...]] = []
    seen: set[tuple[int, ...]] = set()
    while len(chosen) < images:
        objects = tuple(sorted(int(c) for c in rng.choice(classes, regions, replace=False)))
        if objects not in seen:
            seen.add(objects)
            chosen.append(objects)
    return chosen


def make_synthetic_dataset(
    seed: int,
    images: int,
    regions: int,
    d_in: int,
    vocab_size: int,
    caption_len: int,
    max_len: int | None = None,
) -> CaptionDataset:
    """
    Generate a learnable captioning task.

    Each object class owns a prototype feature vector and a fixed run of
    ``caption_len // regions`` words. An image holds ``regions`` distinct
    classes, one per region (prototype plus small noise, regions shuffled), and
    its single caption lists the words of its classes in ascending class order.

    Args:
        seed: Generator seed; equal seeds give identical datasets
        images: Number of images
        regions: Regions (objects) per image
        d_in: Feature width
        vocab_size: Upper bound on the vocabulary, reserved tokens included
        caption_len: Caption length in words
        max_len: Encoded caption length; defaults to ``caption_len + 2``

    Returns:
        CaptionDataset backed by an in-memory feature store
    """
    if min(images, regions, d_in, caption_len) < 1:
        raise ConfigurationError("Synthetic sizes must be positive", "data.synthetic")
    words_per_object = caption_len // regions
    if words_per_object < 1:
        raise ConfigurationError(
            f"caption_len {caption_len} is shorter than regions {regions}",
            "data.synthetic.caption_len",
        )
    classes = (vocab_size - len(RESERVED_TOKENS)) // words_per_object
    if classes < regions:
        raise ConfigurationError(
            f"vocab_size {vocab_size} leaves {classes} object classes for {regions} regions",
            "data.synthetic.vocab_size",
        )

    rng = np.random.default_rng(seed)
    words = [f"w{i:03d}" for i in range(classes * words_per_object)]
    vocab = Vocabulary(tokens=(*RESERVED_TOKENS, *words))
    prototypes = rng.normal(0.0, 1.0, (classes, d_in))

    records: list[FeatureRecord] = []
    groups: dict[str, list[str]] = {}
    for i, objects in enumerate(_object_sets(rng, classes, regions, images)):
        image_id = f"img{i:04d}"
        order = rng.permutation(regions)
        noise = rng.normal(0.0, SYNTHETIC_NOISE, (regions, d_in))
        features = prototypes[np.asarray(objects)[order]] + noise
        records.append(FeatureRecord(image_id, features.astype(np.float32)))
        groups[image_id] = [
            " ".join(
                words[c * words_per_object + j]
                for c in objects
                for j in range(words_per_object)
            )
        ]

    encoded_len = max_len if max_len is not None else caption_len + 2
    dataset = CaptionDataset(
        split="train",
        vocab=vocab,
        features=FeatureStore(records=records),
        max_len=encoded_len,
        captions=encode_groups(groups, vocab, encoded_len),
    )
    logger.info(
        f"Generated synthetic dataset: {images} images, {regions} regions, "
        f"{classes} classes, vocabulary {len(vocab)} (seed={seed})"
    )
    return dataset


def caption_texts(dataset: CaptionDataset) -> dict[str, list[str]]:
    """Reference groups as text, tokenized form."""
    return {
        image_id: [" ".join(dataset.vocab.token_of(t) for t in ref) for ref in refs]
        for image_id, refs in ((i, dataset.references(i)) for i in dataset.image_ids)
    }


def write_synthetic_dataset(dataset: CaptionDataset, out_dir: Path) -> dict[str, Path]:
    """
    Write a dataset's features, manifest and caption file under ``out_dir``.

    Returns:
        Paths keyed ``manifest`` and ``captions``
    """
    feature_dir = out_dir / "features"
    entries: dict[str, Path] = {}
    for image_id in dataset.image_ids:
        features = dataset.features.get(image_id).astype(np.float32)
        entries[image_id] = write_features(
            feature_dir / f"{image_id}.getf", FeatureRecord(image_id, features)
        )
    manifest = write_manifest(out_dir / "manifest.tsv", entries)
    captions = write_captions(out_dir / "captions.tsv", caption_texts(dataset))
    logger.info(f"Wrote {len(entries)} images to {out_dir}")
    return {"manifest": manifest, "captions": captions}

