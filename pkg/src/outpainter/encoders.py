"""Frozen toy encoders: deterministic seeded maps standing in for pretrained
text and vision towers.

Both encoders emit a fixed (tokens, dim) matrix for any input, need no
learned weights, and are pure functions of (input, seed), so tests are exact.
Adapters for real pretrained encoders can implement the same two-method
surface (``encode`` plus the ``tokens``/``dim`` attributes).
"""

from __future__ import annotations

import hashlib
import math

import numpy as np

from .canvas import mean_resize
from .validation import ValidationError, check_image


def _entropy(*parts) -> list[int]:
    """Stable integer entropy for numpy's SeedSequence from mixed parts."""
    out = []
    for part in parts:
        if isinstance(part, int):
            out.append(part & 0xFFFFFFFF)
        else:
            digest = hashlib.sha256(str(part).encode("utf-8")).digest()
            out.append(int.from_bytes(digest[:4], "big"))
    return out


def token_vector(token: str, dim: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(_entropy(seed, "token", token))
    return rng.standard_normal(dim)


class HashTextEncoder:
    """Whitespace tokens, each mapped to a seeded random vector; pad rows are zero."""

    def __init__(self, tokens: int = 8, dim: int = 32, seed: int = 7):
        self.tokens = int(tokens)
        self.dim = int(dim)
        self.seed = int(seed)
        self._cache: dict[str, np.ndarray] = {}

    def encode(self, text: str) -> np.ndarray:
        if not isinstance(text, str) or not text.strip():
            raise ValidationError("cannot encode an empty caption")
        out = np.zeros((self.tokens, self.dim), dtype=np.float64)
        for i, token in enumerate(text.lower().split()[: self.tokens]):
            vec = self._cache.get(token)
            if vec is None:
                vec = token_vector(token, self.dim, self.seed)
                self._cache[token] = vec
            out[i] = vec
        return out.astype(np.float32)


class PatchVisionEncoder:
    """Patch-mean tokens through one fixed seeded linear map.

    The native input is a ceil(sqrt(tokens))-square grid of patch means; any
    image resolution is block-averaged onto that grid first, then the first
    `tokens` patches (row-major) go through ``projection`` (3 x dim).
    """

    def __init__(self, tokens: int = 8, dim: int = 32, seed: int = 7):
        self.tokens = int(tokens)
        self.dim = int(dim)
        self.seed = int(seed)
        self.grid = math.isqrt(self.tokens - 1) + 1 if self.tokens > 1 else 1
        rng = np.random.default_rng(_entropy(seed, "vision"))
        self.projection = rng.standard_normal((3, self.dim))

    def encode(self, image) -> np.ndarray:
        img = check_image(image)
        means = mean_resize(img.astype(np.float64), self.grid, self.grid)
        patches = means.reshape(-1, 3)[: self.tokens]
        return (patches @ self.projection).astype(np.float32)
