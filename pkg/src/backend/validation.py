#!/usr/bin/env python3
"""
Error types and input validation utilities for Meta-3DSeg.
Every failure the package raises on purpose belongs to the family below,
so the command-line surface can map it onto an exit code.
"""

from typing import Any, Dict, Iterable, Optional, Tuple

import numpy as np


# Exit codes of the command-line surface
EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

MIN_PARTS_PER_CATEGORY = 2
MAX_PARTS_PER_CATEGORY = 5


class ValidationError(Exception):
    """Raised for invalid configuration, usage or arguments."""
    def __init__(self, message: str, field: Optional[str] = None):
        self.message = message
        self.field = field
        super().__init__(self.message)


class ShapeError(ValidationError):
    """Raised when tensor extents do not line up."""


class LeakError(ValidationError):
    """Raised when a query-set cloud reaches a stage that updates parameters."""


class DataError(Exception):
    """Raised for malformed, missing or insufficient data."""
    def __init__(self, message: str, path: Optional[str] = None, line: Optional[int] = None):
        self.path = path
        self.line = line
        location = ""
        if path is not None:
            location = f"{path}:{line}: " if line is not None else f"{path}: "
        self.message = f"{location}{message}"
        super().__init__(self.message)


class NumericError(Exception):
    """Raised when an operation produces NaN or Inf."""
    def __init__(self, message: str, op: Optional[str] = None):
        self.message = message
        self.op = op
        super().__init__(self.message)


def validate_finite(values: np.ndarray, op: str) -> np.ndarray:
    """
    Check that every entry of an array is finite.

    Args:
        values: Array produced by an operation
        op: Name of the producing operation, used in the error message

    Returns:
        The same array

    Raises:
        NumericError: If any entry is NaN or Inf
    """
    if not np.all(np.isfinite(values)):
        raise NumericError(f"Non-finite value produced by {op}", op)
    return values


def validate_labels(labels: np.ndarray, num_classes: int, field: str = "labels") -> np.ndarray:
    """
    Check that integer labels fall in [0, num_classes).

    Raises:
        ValidationError: If a label is out of range
    """
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise ShapeError(f"{field} must be one-dimensional", field)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValidationError(
            f"{field} must lie in [0, {num_classes}), got range "
            f"[{labels.min()}, {labels.max()}]",
            field,
        )
    return labels.astype(np.int64)


def validate_counts(**counts: int) -> None:
    """
    Check that every named count is an integer of at least one.

    Raises:
        ValidationError: Naming the first offending count
    """
    for name, value in counts.items():
        if not isinstance(value, (int, np.integer)) or value < 1:
            raise ValidationError(f"{name} must be an integer >= 1, got {value!r}", name)


def validate_part_ids(part_ids: Iterable[int], category: str) -> Tuple[int, ...]:
    """
    Check a category's declared part ids: unique, 2 to 5 of them.

    Raises:
        DataError: If the part set is malformed
    """
    part_ids = tuple(int(p) for p in part_ids)
    if len(set(part_ids)) != len(part_ids):
        raise DataError(f"Category '{category}' declares duplicate part ids {part_ids}")
    if not MIN_PARTS_PER_CATEGORY <= len(part_ids) <= MAX_PARTS_PER_CATEGORY:
        raise DataError(
            f"Category '{category}' must declare {MIN_PARTS_PER_CATEGORY} to "
            f"{MAX_PARTS_PER_CATEGORY} parts, got {len(part_ids)}"
        )
    return part_ids


def handle_error(error: Exception) -> Tuple[Dict[str, Any], int]:
    """
    Convert a package error to a response dict and an exit code.

    Args:
        error: Exception raised somewhere below the command-line surface

    Returns:
        Tuple of (response_dict, exit_code)
    """
    if isinstance(error, ValidationError):
        response: Dict[str, Any] = {'error': error.message, 'type': 'validation_error'}
        if error.field:
            response['field'] = error.field
        return response, EXIT_USAGE

    if isinstance(error, DataError):
        return {'error': error.message, 'type': 'data_error'}, EXIT_DATA

    if isinstance(error, NumericError):
        response = {'error': error.message, 'type': 'numeric_error'}
        if error.op:
            response['field'] = error.op
        return response, EXIT_NUMERIC

    if isinstance(error, OSError):
        return {'error': str(error), 'type': 'io_error'}, EXIT_DATA

    raise error
