"""Rotary position embedding primitives.

The convention is adjacent pairs: coordinates (2k, 2k+1) form pair k and are
rotated counterclockwise by angle t * base**(-2k/dim) at position t. The same
convention must be used by the attention model and the checkpoint converter;
the converter's exactness relies on per-pair rotations commuting with it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError


@dataclass(frozen=True)
class RopeSpec:
    dim: int
    base: float = 10000.0

    def __post_init__(self):
        if self.dim < 2 or self.dim % 2 != 0:
            raise ShapeError(f"rotary dim must be a positive even count, got {self.dim}")
        if not self.base > 1.0:
            raise ShapeError(f"rotary base must be > 1, got {self.base}")

    def frequencies(self) -> np.ndarray:
        """Angular frequency of each pair: base**(-2k/dim) for pair k."""
        k = np.arange(self.dim // 2, dtype=np.float64)
        return self.base ** (-2.0 * k / self.dim)


def apply_rope(spec: RopeSpec, v, t: int) -> np.ndarray:
    """Rotate each coordinate pair of v by its frequency times position t."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != spec.dim:
        raise ShapeError(f"vector length {v.shape[-1]} does not match rotary dim {spec.dim}")
    angles = t * spec.frequencies()
    cos, sin = np.cos(angles), np.sin(angles)
    x, y = v[..., 0::2], v[..., 1::2]
    out = np.empty_like(v)
    out[..., 0::2] = x * cos - y * sin
    out[..., 1::2] = x * sin + y * cos
    return out


def apply_folded_rope(spec: RopeSpec, v, t: int) -> np.ndarray:
    """Apply the same rotation independently to each consecutive dim-sized block."""
    v = np.asarray(v, dtype=np.float64)
    n = v.shape[-1]
    if n % spec.dim != 0:
        raise ShapeError(f"length {n} is not a multiple of rotary dim {spec.dim}")
    blocks = v.reshape(v.shape[:-1] + (n // spec.dim, spec.dim))
    return apply_rope(spec, blocks, t).reshape(v.shape)
