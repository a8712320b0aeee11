"""Versioned binary checkpoint format for named model parameters.

Layout, all integers little-endian u32::

    b"GETC" | version | metadata length | metadata (UTF-8 JSON) | count
    then per parameter:
        name length | name (UTF-8) | ndim | dims... | float64 values, row-major
"""

import json
import logging
from collections.abc import Mapping
from pathlib import Path
from typing import Any

import numpy as np

from caption_lens.core.exceptions import (
    CaptionLensError,
    CheckpointError,
    CheckpointFormatError,
    ErrorCode,
)
from caption_lens.core.tensor import FloatArray
from caption_lens.model.params import ModelParams

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"GETC"
CHECKPOINT_VERSION = 1


def save_checkpoint(
    path: Path,
    state: Mapping[str, FloatArray],
    metadata: Mapping[str, Any] | None = None,
) -> Path:
    """
    Write named parameters and JSON metadata to ``path``.

    Args:
        path: Destination file
        state: Parameter name to array
        metadata: JSON-serialisable description, e.g. the model config

    Returns:
        The written path
    """
    path.parent.mkdir(parents=True, exist_ok=True)
    meta_bytes = json.dumps(dict(metadata or {}), sort_keys=True).encode("utf-8")

    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        np.array([CHECKPOINT_VERSION, len(meta_bytes)], dtype="<u4").tofile(f)
        f.write(meta_bytes)
        np.array([len(state)], dtype="<u4").tofile(f)
        for name, value in state.items():
            array = np.ascontiguousarray(value, dtype="<f8")
            name_bytes = name.encode("utf-8")
            np.array([len(name_bytes)], dtype="<u4").tofile(f)
            f.write(name_bytes)
            np.array([array.ndim, *array.shape], dtype="<u4").tofile(f)
            array.tofile(f)

    logger.info(f"Saved checkpoint with {len(state)} tensors to {path}")
    return path


class _Reader:
    def __init__(self, payload: bytes, path: Path):
        self.payload = payload
        self.offset = 0
        self.path = path

    def take(self, count: int, dtype: str) -> np.ndarray:
        itemsize = np.dtype(dtype).itemsize
        needed = count * itemsize
        if self.offset + needed > len(self.payload):
            raise CheckpointFormatError(
                "Checkpoint ended unexpectedly",
                file_path=self.path,
                details={
                    "expected_bytes": self.offset + needed,
                    "actual_bytes": len(self.payload),
                },
            )
        values = np.frombuffer(self.payload, dtype=dtype, count=count, offset=self.offset)
        self.offset += needed
        return values

    def take_bytes(self, count: int) -> bytes:
        return self.take(count, "u1").tobytes()


def load_checkpoint(path: Path) -> tuple[dict[str, FloatArray], dict[str, Any]]:
    """
    Read a checkpoint written by :func:`save_checkpoint`.

    Returns:
        (parameter name to float64 array, metadata dict)

    Raises:
        CaptionLensError: If the file does not exist
        CheckpointFormatError: On bad magic, unsupported version, unreadable
            metadata or a truncated or over-long payload
    """
    if not path.exists():
        raise CaptionLensError(
            "Checkpoint not found", ErrorCode.FILE_NOT_FOUND, file_path=path
        )
    payload = path.read_bytes()
    if payload[:4] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(
            "Not a checkpoint file (bad magic)",
            file_path=path,
            details={"magic": payload[:4].hex()},
        )

    reader = _Reader(payload, path)
    reader.offset = 4
    version, meta_len = (int(v) for v in reader.take(2, "<u4"))
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(
            f"Unsupported checkpoint version {version}",
            file_path=path,
            details={"version": version, "supported": CHECKPOINT_VERSION},
        )
    try:
        metadata: dict[str, Any] = json.loads(reader.take_bytes(meta_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointFormatError(
            "Checkpoint metadata is not valid JSON", file_path=path, cause=e
        ) from e

    count = int(reader.take(1, "<u4")[0])
    state: dict[str, FloatArray] = {}
    for _ in range(count):
        name_len = int(reader.take(1, "<u4")[0])
        name = reader.take_bytes(name_len).decode("utf-8")
        ndim = int(reader.take(1, "<u4")[0])
        shape = tuple(int(s) for s in reader.take(ndim, "<u4"))
        values = reader.take(int(np.prod(shape)), "<f8")
        state[name] = values.astype(np.float64).reshape(shape)

    if reader.offset != len(payload):
        raise CheckpointFormatError(
            "Checkpoint has trailing bytes",
            file_path=path,
            details={"expected_bytes": reader.offset, "actual_bytes": len(payload)},
        )

    logger.info(f"Loaded checkpoint with {len(state)} tensors from {path}")
    return state, metadata


def restore_parameters(
    params: ModelParams,
    path: Path,
    expected_model: Mapping[str, Any] | None = None,
) -> dict[str, Any]:
    """
    Load a checkpoint into ``params`` after checking its recorded model config.

    Args:
        params: Parameter store to overwrite
        path: Checkpoint file
        expected_model: Model config the checkpoint must have been trained with

    Returns:
        The checkpoint metadata

    Raises:
        CheckpointError: If the recorded config or any parameter differs
    """
    state, metadata = load_checkpoint(path)

    recorded = metadata.get("model")
    if expected_model is not None and isinstance(recorded, dict):
        differing = sorted(
            key
            for key in set(expected_model) | set(recorded)
            if expected_model.get(key) != recorded.get(key)
        )
        if differing:
            raise CheckpointError(
                "Checkpoint was trained with a different model config",
                file_path=path,
                details={"fields": ", ".join(differing)},
            )

    try:
        params.load_state_dict(state)
    except CheckpointError as e:
        e.file_path = path
        raise
    return metadata
