"""Input validation helpers and the package's exception taxonomy.

Images are plain numpy arrays of shape (H, W, 3) with float intensities in
[0, 1]; 8-bit conversion happens only at file I/O boundaries.  The check_*
helpers below normalize and validate inputs at public entry points, in the
spirit of sklearn's ``check_array``.
"""

from __future__ import annotations

import numpy as np

CHANNELS = 3


class ValidationError(ValueError):
    """An argument violates a documented contract."""


class GeometryError(ValidationError):
    """Image or mask geometry is inconsistent (shape, squareness, axis)."""


class ConfigurationError(ValueError):
    """A configuration value is missing or inconsistent with the model."""


class BackendError(RuntimeError):
    """A language-model backend call failed; retryable up to the retry budget."""


class CapabilityError(BackendError):
    """The backend does not support the requested modality."""


class ProtocolError(BackendError):
    """The backend answered, but with an unusable (e.g. empty) response."""


class TrainingError(RuntimeError):
    """Training produced a non-finite loss or otherwise diverged."""


class ExpansionError(RuntimeError):
    """A step of the expansion loop failed; carries the partial state."""

    def __init__(self, message, step, state=None):
        super().__init__(message)
        self.step = step
        self.state = state


def check_image(image, name="image") -> np.ndarray:
    """Validate an (H, W, 3) float image with values in [0, 1]."""
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != CHANNELS:
        raise GeometryError(f"{name} must have shape (H, W, {CHANNELS}), got {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise GeometryError(f"{name} must be at least 1x1, got {arr.shape}")
    if not np.issubdtype(arr.dtype, np.floating):
        raise ValidationError(f"{name} must be a float array, got dtype {arr.dtype}")
    if not np.isfinite(arr).all():
        raise ValidationError(f"{name} contains non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValidationError(f"{name} intensities must lie in [0, 1]")
    return arr


def check_square_image(image, name="image") -> np.ndarray:
    arr = check_image(image, name)
    if arr.shape[0] != arr.shape[1]:
        raise GeometryError(f"{name} must be square, got {arr.shape[0]}x{arr.shape[1]}")
    return arr


def check_ratio(ratio) -> tuple[int, int]:
    """Validate a (kept, masked) ratio pair of positive integers."""
    try:
        kept, masked = ratio
    except (TypeError, ValueError):
        raise ValidationError(f"ratio must be a (kept, masked) pair, got {ratio!r}") from None
    if int(kept) != kept or int(masked) != masked:
        raise ValidationError(f"ratio components must be integers, got {ratio!r}")
    kept, masked = int(kept), int(masked)
    if kept <= 0 or masked <= 0:
        raise ValidationError(f"ratio components must be positive, got {ratio!r}")
    return kept, masked


def check_positive(value, name) -> int:
    if int(value) != value or value <= 0:
        raise ValidationError(f"{name} must be a positive integer, got {value!r}")
    return int(value)


def check_non_negative(value, name) -> int:
    if int(value) != value or value < 0:
        raise ValidationError(f"{name} must be a non-negative integer, got {value!r}")
    return int(value)


def check_probabilities(probs, name="probs") -> np.ndarray:
    """Validate an (N, C) array of per-image class distributions."""
    arr = np.asarray(probs, dtype=np.float64)
    if arr.ndim != 2:
        raise ValidationError(f"{name} must be 2-dimensional (N, C), got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValidationError(f"{name} must be non-empty")
    if arr.min() < 0.0:
        raise ValidationError(f"{name} must be non-negative")
    sums = arr.sum(axis=1)
    if not np.allclose(sums, 1.0, atol=1e-6):
        raise ValidationError(f"{name} rows must sum to 1 within 1e-6")
    return arr
