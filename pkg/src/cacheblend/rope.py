"""Rotary positional embedding and positional recovery of cached keys.

Keys are cached without any rotation applied.  Whenever a cached key is
placed at an absolute position it is rotated on the fly, which makes one
cached copy reusable at any offset: the score between a rotated query and a
rotated key depends only on their distance.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import ConfigurationError, DomainError


@dataclass(frozen=True)
class RopeParams:
    head_dim: int
    theta_base: float = 10000.0

    def __post_init__(self):
        if self.head_dim < 2 or self.head_dim % 2:
            raise ConfigurationError(f"head_dim must be a positive even number, got {self.head_dim}")
        if not self.theta_base > 0:
            raise ConfigurationError(f"theta_base must be positive, got {self.theta_base}")

    @cached_property
    def thetas(self) -> np.ndarray:
        """Per-pair angular frequencies ``base ** (-2i / d)``, float64."""
        i = np.arange(self.head_dim // 2, dtype=np.float64)
        return self.theta_base ** (-2.0 * i / self.head_dim)


def _cos_sin(positions, params: RopeParams, dtype):
    # angles in float64; positions up to ~1e6 keep full precision there
    angles = np.multiply.outer(np.asarray(positions, dtype=np.float64), params.thetas)
    return np.cos(angles).astype(dtype), np.sin(angles).astype(dtype)


def rotate(vec, position, params: RopeParams) -> np.ndarray:
    """Rotate components ``(2i, 2i+1)`` of ``vec`` by ``position * theta_i``.

    ``vec`` has shape ``(..., head_dim)``; ``position`` is a scalar or an
    array broadcastable against ``vec.shape[:-1]``.  Floating dtypes are
    preserved (integers are promoted to float64).
    """
    vec = np.asarray(vec)
    if vec.ndim == 0 or vec.shape[-1] != params.head_dim:
        raise DomainError(f"expected trailing dimension {params.head_dim}, got shape {vec.shape}")
    dtype = vec.dtype if np.issubdtype(vec.dtype, np.floating) else np.float64
    cos, sin = _cos_sin(position, params, dtype)
    even = vec[..., 0::2]
    odd = vec[..., 1::2]
    out = np.empty(np.broadcast_shapes(vec.shape, cos.shape[:-1] + (params.head_dim,)), dtype=dtype)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


def unrotate(vec, position, params: RopeParams) -> np.ndarray:
    """Inverse of :func:`rotate` (rotation by ``-position``)."""
    return rotate(vec, -np.asarray(position, dtype=np.float64), params)


def realign(chunk_k, target_positions, params: RopeParams) -> np.ndarray:
    """Place position-free keys at absolute positions.

    ``chunk_k`` is ``(tokens, hidden)`` with ``hidden`` a multiple of
    ``head_dim`` (heads laid out contiguously), or ``(tokens, heads, head_dim)``.
    One elementwise pass; the stored array is not modified.
    """
    chunk_k = np.asarray(chunk_k)
    positions = np.asarray(target_positions)
    if positions.ndim != 1 or positions.shape[0] != chunk_k.shape[0]:
        raise DomainError(
            f"need one target position per token: {chunk_k.shape[0]} tokens, "
            f"{positions.shape} positions")
    if positions.size > 1 and np.any(np.diff(positions) <= 0):
        raise DomainError("target positions must be strictly increasing")
    if chunk_k.ndim == 2:
        tokens, hidden = chunk_k.shape
        if hidden % params.head_dim:
            raise DomainError(f"hidden size {hidden} is not a multiple of head_dim {params.head_dim}")
        heads = chunk_k.reshape(tokens, hidden // params.head_dim, params.head_dim)
        return rotate(heads, positions[:, None], params).reshape(tokens, hidden)
    if chunk_k.ndim == 3:
        return rotate(chunk_k, positions[:, None], params)
    raise DomainError(f"unsupported key array shape {chunk_k.shape}")
