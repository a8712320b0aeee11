"""Custom exceptions for captioning, training and decoding operations."""

from enum import Enum
from pathlib import Path
from typing import Any


class ErrorCode(Enum):
    """Error codes for caption lens operations."""

    # Tensor errors
    DIMENSION_MISMATCH = "DIMENSION_MISMATCH"
    NUMERIC_ERROR = "NUMERIC_ERROR"
    CONTRACT_VIOLATION = "CONTRACT_VIOLATION"

    # Vocabulary and data errors
    VOCABULARY_LOOKUP = "VOCABULARY_LOOKUP"
    IMAGE_NOT_FOUND = "IMAGE_NOT_FOUND"
    FILE_NOT_FOUND = "FILE_NOT_FOUND"
    INVALID_FORMAT = "INVALID_FORMAT"
    FILE_CORRUPTED = "FILE_CORRUPTED"
    INVALID_DATA = "INVALID_DATA"

    # Model errors
    CHECKPOINT_MISMATCH = "CHECKPOINT_MISMATCH"
    CHECKPOINT_CORRUPTED = "CHECKPOINT_CORRUPTED"
    DECODE_FAILED = "DECODE_FAILED"

    # Configuration errors
    INVALID_CONFIGURATION = "INVALID_CONFIGURATION"

    # Generic errors
    UNKNOWN_ERROR = "UNKNOWN_ERROR"


class CaptionLensError(Exception):
    """Base exception for caption lens operations."""

    def __init__(
        self,
        message: str,
        error_code: ErrorCode = ErrorCode.UNKNOWN_ERROR,
        file_path: Path | str | None = None,
        details: dict[str, Any] | None = None,
        cause: Exception | None = None,
    ):
        """
        Initialize caption lens error.

        Args:
            message: Human-readable error message
            error_code: Specific error code for programmatic handling
            file_path: Path to the file that caused the error
            details: Additional error details
            cause: Original exception that caused this error
        """
        super().__init__(message)
        self.message = message
        self.error_code = error_code
        self.file_path = Path(file_path) if file_path else None
        self.details = details or {}
        self.cause = cause

    def to_dict(self) -> dict[str, Any]:
        """Convert error to dictionary format for serialization."""
        return {
            "message": self.message,
            "error_code": self.error_code.value,
            "file_path": str(self.file_path) if self.file_path else None,
            "details": self.details,
            "cause": str(self.cause) if self.cause else None,
        }

    def __str__(self) -> str:
        """Return string representation of error."""
        parts = [f"{self.error_code.value}: {self.message}"]

        if self.file_path:
            parts.append(f"File: {self.file_path}")

        if self.details:
            details_str = ", ".join(f"{k}={v}" for k, v in self.details.items())
            parts.append(f"Details: {details_str}")

        if self.cause:
            parts.append(f"Caused by: {self.cause}")

        return " | ".join(parts)


class DimensionError(CaptionLensError):
    """Operand shapes are incompatible."""

    def __init__(
        self,
        message: str,
        shapes: list[tuple[int, ...]] | None = None,
        details: dict[str, Any] | None = None,
    ):
        shape_details = details or {}
        if shapes:
            shape_details["shapes"] = " vs ".join(str(s) for s in shapes)

        super().__init__(
            message=message,
            error_code=ErrorCode.DIMENSION_MISMATCH,
            details=shape_details,
        )


class NumericError(CaptionLensError):
    """Non-finite input reached an operation that requires finite values."""

    def __init__(self, message: str, details: dict[str, Any] | None = None):
        super().__init__(
            message=message, error_code=ErrorCode.NUMERIC_ERROR, details=details
        )


class ContractError(CaptionLensError):
    """An operation was called with arguments that violate its pre-conditions."""

    def __init__(self, message: str, details: dict[str, Any] | None = None):
        super().__init__(
            message=message, error_code=ErrorCode.CONTRACT_VIOLATION, details=details
        )


class VocabularyLookupError(CaptionLensError):
    """Token id outside the vocabulary range."""

    def __init__(
        self,
        message: str,
        token_id: int | None = None,
        vocab_size: int | None = None,
    ):
        details: dict[str, int] = {}
        if token_id is not None:
            details["token_id"] = token_id
        if vocab_size is not None:
            details["vocab_size"] = vocab_size

        super().__init__(
            message=message, error_code=ErrorCode.VOCABULARY_LOOKUP, details=details
        )


class ImageLookupError(CaptionLensError):
    """Image id not present in the feature store or dataset."""

    def __init__(self, image_id: str, details: dict[str, Any] | None = None):
        lookup_details = details or {}
        lookup_details["image_id"] = image_id

        super().__init__(
            message=f"Unknown image id: {image_id}",
            error_code=ErrorCode.IMAGE_NOT_FOUND,
            details=lookup_details,
        )
        self.image_id = image_id


class FeatureFormatError(CaptionLensError):
    """Binary file has the wrong magic bytes or an unsupported version."""

    def __init__(
        self,
        message: str,
        file_path: Path | str | None = None,
        details: dict[str, Any] | None = None,
        cause: Exception | None = None,
    ):
        super().__init__(
            message=message,
            error_code=ErrorCode.INVALID_FORMAT,
            file_path=file_path,
            details=details,
            cause=cause,
        )


class FeatureCorruptionError(CaptionLensError):
    """Binary payload length disagrees with its header."""

    def __init__(
        self,
        message: str,
        file_path: Path | str | None = None,
        expected_bytes: int | None = None,
        actual_bytes: int | None = None,
    ):
        details: dict[str, int] = {}
        if expected_bytes is not None:
            details["expected_bytes"] = expected_bytes
        if actual_bytes is not None:
            details["actual_bytes"] = actual_bytes

        super().__init__(
            message=message,
            error_code=ErrorCode.FILE_CORRUPTED,
            file_path=file_path,
            details=details,
        )


class FeatureDataError(CaptionLensError):
    """Feature values are not finite or the record is empty."""

    def __init__(
        self,
        message: str,
        file_path: Path | str | None = None,
        details: dict[str, Any] | None = None,
    ):
        super().__init__(
            message=message,
            error_code=ErrorCode.INVALID_DATA,
            file_path=file_path,
            details=details,
        )


class CheckpointError(CaptionLensError):
    """Checkpoint file does not match the model it is loaded into."""

    def __init__(
        self,
        message: str,
        file_path: Path | str | None = None,
        parameter: str | None = None,
        details: dict[str, Any] | None = None,
        error_code: ErrorCode = ErrorCode.CHECKPOINT_MISMATCH,
        cause: Exception | None = None,
    ):
        checkpoint_details = details or {}
        if parameter:
            checkpoint_details["parameter"] = parameter

        super().__init__(
            message=message,
            error_code=error_code,
            file_path=file_path,
            details=checkpoint_details,
            cause=cause,
        )


class CheckpointFormatError(CheckpointError):
    """Checkpoint file has the wrong magic, an unknown version or a damaged payload."""

    def __init__(
        self,
        message: str,
        file_path: Path | str | None = None,
        details: dict[str, Any] | None = None,
        cause: Exception | None = None,
    ):
        super().__init__(
            message,
            file_path=file_path,
            details=details,
            error_code=ErrorCode.CHECKPOINT_CORRUPTED,
            cause=cause,
        )


class DecodeError(CaptionLensError):
    """Decoding produced no usable hypothesis."""

    def __init__(self, message: str, details: dict[str, Any] | None = None):
        super().__init__(
            message=message, error_code=ErrorCode.DECODE_FAILED, details=details
        )


class ConfigurationError(CaptionLensError):
    """Error in configuration or setup."""

    def __init__(
        self,
        message: str,
        config_key: str | None = None,
        details: dict[str, Any] | None = None,
        cause: Exception | None = None,
        file_path: Path | str | None = None,
    ):
        config_details = details or {}
        if config_key:
            config_details["config_key"] = config_key

        super().__init__(
            message=message,
            error_code=ErrorCode.INVALID_CONFIGURATION,
            file_path=file_path,
            details=config_details,
            cause=cause,
        )

    @property
    def violations(self) -> list[str]:
        """Every violated constraint collected while validating."""
        return list(self.details.get("violations", []))


def get_user_friendly_message(error: CaptionLensError) -> str:
    """
    Get user-friendly error message for common error types.

    Args:
        error: Caption lens error

    Returns:
        User-friendly error message
    """
    error_messages = {
        ErrorCode.FILE_NOT_FOUND: "A required file could not be found. Please check the path.",
        ErrorCode.INVALID_FORMAT: "The file is not in the expected binary format.",
        ErrorCode.FILE_CORRUPTED: "The file appears to be truncated or corrupted.",
        ErrorCode.INVALID_DATA: "The feature file contains non-finite or empty data.",
        ErrorCode.IMAGE_NOT_FOUND: "The requested image id is not in the dataset.",
        ErrorCode.CHECKPOINT_MISMATCH: "The checkpoint does not match the configured model.",
        ErrorCode.CHECKPOINT_CORRUPTED: "The checkpoint file is damaged or was not written by caption-lens.",
        ErrorCode.DECODE_FAILED: "Decoding produced no caption.",
    }

    user_message = error_messages.get(error.error_code, error.message)

    if error.error_code == ErrorCode.INVALID_CONFIGURATION and error.details.get(
        "violations"
    ):
        violations = "; ".join(error.details["violations"])
        user_message = f"{error.message}: {violations}"

    if error.file_path:
        filename = error.file_path.name
        user_message = f"{user_message} (File: {filename})"

    return user_message
