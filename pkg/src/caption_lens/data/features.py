"""Binary region-feature files, the manifest that indexes them, and a feature store.

Feature file layout, little-endian::

    b"GETF" | u32 version (=1) | u32 N | u32 d_in | N*d_in float32, row-major

The manifest is line-delimited ``image-id<TAB>relative-path``.
"""

import logging
from collections.abc import Iterable, Iterator, Mapping
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

from caption_lens.core.exceptions import (
    CaptionLensError,
    ConfigurationError,
    ErrorCode,
    FeatureCorruptionError,
    FeatureDataError,
    FeatureFormatError,
    ImageLookupError,
)
from caption_lens.core.tensor import FloatArray

logger = logging.getLogger(__name__)

FEATURE_MAGIC = b"GETF"
FEATURE_VERSION = 1
HEADER_BYTES = 16


@dataclass(frozen=True)
class FeatureRecord:
    """Region features of one image, stored at 32-bit precision."""

    image_id: str
    features: NDArray[np.float32]

    @property
    def num_regions(self) -> int:
        return int(self.features.shape[0])

    @property
    def feature_dim(self) -> int:
        return int(self.features.shape[1])

    def as_float64(self) -> FloatArray:
        return self.features.astype(np.float64)


def write_features(path: Path, record: FeatureRecord) -> Path:
    """Write one record in the binary feature format."""
    features = np.asarray(record.features)
    if features.ndim != 2 or features.shape[0] < 1:
        raise FeatureDataError(
            f"Feature matrix must be N × d_in with N >= 1, got {features.shape}",
            file_path=path,
        )
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC)
        np.array(
            [FEATURE_VERSION, features.shape[0], features.shape[1]], dtype="<u4"
        ).tofile(f)
        np.ascontiguousarray(features, dtype="<f4").tofile(f)
    return path


def load_features(path: Path, image_id: str | None = None) -> FeatureRecord:
    """
    Parse a binary feature file.

    Args:
        path: Feature file
        image_id: Id to attach to the record; defaults to the file stem

    Returns:
        FeatureRecord with float32 features

    Raises:
        CaptionLensError: If the file does not exist
        FeatureFormatError: Bad magic bytes or unsupported version
        FeatureCorruptionError: Payload length disagrees with the header
        FeatureDataError: Zero regions or non-finite values
    """
    if not path.exists():
        raise CaptionLensError(
            "Feature file not found", ErrorCode.FILE_NOT_FOUND, file_path=path
        )
    payload = path.read_bytes()
    if len(payload) < HEADER_BYTES or payload[:4] != FEATURE_MAGIC:
        raise FeatureFormatError(
            "Not a feature file (bad magic or short header)",
            file_path=path,
            details={"magic": payload[:4].hex()},
        )

    version, num_regions, feature_dim = (
        int(v) for v in np.frombuffer(payload, dtype="<u4", count=3, offset=4)
    )
    if version != FEATURE_VERSION:
        raise FeatureFormatError(
            f"Unsupported feature file version {version}", file_path=path
        )
    if num_regions < 1 or feature_dim < 1:
        raise FeatureDataError(
            f"Feature file declares N={num_regions}, d_in={feature_dim}",
            file_path=path,
        )

    expected = HEADER_BYTES + num_regions * feature_dim * 4
    if len(payload) != expected:
        raise FeatureCorruptionError(
            "Feature payload length does not match header",
            file_path=path,
            expected_bytes=expected,
            actual_bytes=len(payload),
        )

    features = (
        np.frombuffer(payload, dtype="<f4", offset=HEADER_BYTES)
        .reshape(num_regions, feature_dim)
        .astype(np.float32)
    )
    if not np.isfinite(features).all():
        raise FeatureDataError(
            "Feature file contains non-finite values",
            file_path=path,
            details={"non_finite": int((~np.isfinite(features)).sum())},
        )

    return FeatureRecord(image_id=image_id or path.stem, features=features)


def read_manifest(path: Path) -> dict[str, Path]:
    """
    Read ``image-id<TAB>relative-path`` lines; paths resolve against the manifest.

    Raises:
        ConfigurationError: If the manifest is missing or a line is malformed
    """
    if not path.exists():
        raise ConfigurationError(
            f"Feature manifest not found: {path}",
            config_key="data.manifest_path",
            file_path=path,
        )
    entries: dict[str, Path] = {}
    for line_number, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise ConfigurationError(
                f"Malformed manifest line {line_number}",
                file_path=path,
                details={"line": line},
            )
        entries[parts[0]] = path.parent / parts[1]
    return entries


def write_manifest(path: Path, entries: Mapping[str, Path]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [
        f"{image_id}\t{file.relative_to(path.parent).as_posix()}"
        for image_id, file in entries.items()
    ]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


class FeatureStore:
    """Read-only mapping from image id to float64 region features.

    Files are parsed on first access and cached.
    """

    def __init__(
        self,
        paths: Mapping[str, Path] | None = None,
        records: Iterable[FeatureRecord] | None = None,
    ):
        self._paths = dict(paths or {})
        self._cache: dict[str, FloatArray] = {}
        for record in records or ():
            self._cache[record.image_id] = record.as_float64()
        self._order = list(dict.fromkeys([*self._paths, *self._cache]))

    @classmethod
    def from_manifest(cls, manifest_path: Path) -> "FeatureStore":
        store = cls(paths=read_manifest(manifest_path))
        logger.info(f"Opened feature store with {len(store)} images from {manifest_path}")
        return store

    def __len__(self) -> int:
        return len(self._order)

    def __contains__(self, image_id: object) -> bool:
        return image_id in self._cache or image_id in self._paths

    def __iter__(self) -> Iterator[str]:
        return iter(self._order)

    @property
    def image_ids(self) -> list[str]:
        return list(self._order)

    def get(self, image_id: str) -> FloatArray:
        """
        Region features for ``image_id`` as float64.

        Raises:
            ImageLookupError: If the id is unknown
        """
        if image_id not in self._cache:
            path = self._paths.get(image_id)
            if path is None:
                raise ImageLookupError(image_id)
            self._cache[image_id] = load_features(path, image_id).as_float64()
        return self._cache[image_id]

    @property
    def feature_dim(self) -> int:
        if not self._order:
            raise ConfigurationError("Feature store is empty")
        return int(self.get(self._order[0]).shape[1])
