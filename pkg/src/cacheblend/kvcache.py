"""KV cache containers, chunk identity and the two deviation metrics.

All caches hold keys in the position-free convention (no rotary embedding
applied), so two caches of the same tokens can be compared directly no
matter where the tokens were placed when the cache was produced.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from .errors import DomainError


class Role(str, Enum):
    FULL = "full"   # full prefill
    PRE = "pre"     # concatenation of precomputed chunk caches
    NEW = "new"     # blended / selectively recomputed


@dataclass
class KVCache:
    """Per-layer keys and values for a token sequence.

    ``k`` and ``v`` have shape ``(num_layers, tokens, hidden)``.
    """

    role: Role
    k: np.ndarray
    v: np.ndarray
    positions: np.ndarray
    chunk_boundaries: list[tuple[int, int]] = field(default_factory=list)

    def __post_init__(self):
        self.role = Role(self.role)
        self.positions = np.asarray(self.positions, dtype=np.int64)
        if self.k.shape != self.v.shape or self.k.ndim != 3:
            raise DomainError(f"K and V must share a (layers, tokens, hidden) shape: {self.k.shape} vs {self.v.shape}")
        if self.positions.shape != (self.k.shape[1],):
            raise DomainError("one global position per token is required")
        if self.positions.size > 1 and np.any(np.diff(self.positions) <= 0):
            raise DomainError("global positions must be strictly increasing")
        if not self.chunk_boundaries:
            self.chunk_boundaries = [(0, self.num_tokens)] if self.num_tokens else []
        _check_partition(self.chunk_boundaries, self.num_tokens)

    @property
    def num_layers(self) -> int:
        return self.k.shape[0]

    @property
    def num_tokens(self) -> int:
        return self.k.shape[1]

    def layer(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        return self.k[i], self.v[i]

    def tokens(self, start: int, stop: int) -> "KVCache":
        """Restriction to tokens ``[start, stop)`` as a single-chunk cache."""
        return KVCache(self.role, self.k[:, start:stop].copy(), self.v[:, start:stop].copy(),
                       self.positions[start:stop].copy())


def _check_partition(bounds, n):
    pos = 0
    for start, stop in bounds:
        if start != pos or stop <= start:
            raise DomainError(f"chunk boundaries {bounds} do not partition [0, {n})")
        pos = stop
    if pos != n:
        raise DomainError(f"chunk boundaries {bounds} do not partition [0, {n})")


def chunk_digest(model_digest: bytes, token_ids: Sequence[int]) -> bytes:
    """SHA-256 over the model digest followed by little-endian uint32 token ids."""
    ids = np.asarray(token_ids, dtype="<u4")
    return hashlib.sha256(bytes(model_digest) + ids.tobytes()).digest()


@dataclass
class ChunkKV:
    """Precomputed cache of one chunk, computed standalone at positions ``[0, L)``.

    ``token_ids`` may be ``None`` for chunks read back from a store; the
    record format identifies chunks by hash only.
    """

    chunk_hash: bytes
    model_digest: bytes
    k: np.ndarray
    v: np.ndarray
    token_ids: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.k.shape != self.v.shape or self.k.ndim != 3:
            raise DomainError(f"K and V must share a (layers, tokens, hidden) shape: {self.k.shape} vs {self.v.shape}")
        if self.token_ids is not None:
            self.token_ids = tuple(int(t) for t in self.token_ids)
            if len(self.token_ids) != self.k.shape[1]:
                raise DomainError("token_ids length does not match cached tokens")

    @property
    def precompute_length(self) -> int:
        return self.k.shape[1]

    @property
    def num_layers(self) -> int:
        return self.k.shape[0]

    @property
    def hex_hash(self) -> str:
        return self.chunk_hash.hex()

    def verify_hash(self) -> bool:
        if self.token_ids is None:
            raise DomainError("cannot verify a chunk hash without token ids")
        return chunk_digest(self.model_digest, self.token_ids) == self.chunk_hash


@dataclass
class DeviationReport:
    layer: int
    per_token_kv_dev: np.ndarray
    attn_dev: float


def kv_deviation(candidate, oracle, *, k_only: bool = False) -> np.ndarray:
    """Per-token L2 distance between two ``(K, V)`` pairs of one layer.

    Each argument is a ``(k, v)`` tuple of ``(tokens, hidden)`` arrays.  The
    distance of token ``j`` is the norm of the concatenated K and V row
    differences (only K when ``k_only``).
    """
    ck, cv = candidate
    ok, ov = oracle
    ck, cv, ok, ov = (np.asarray(a) for a in (ck, cv, ok, ov))
    if ck.shape != ok.shape or cv.shape != ov.shape or ck.shape != cv.shape:
        raise DomainError(f"shape mismatch: {ck.shape}/{cv.shape} vs {ok.shape}/{ov.shape}")
    dk = ck.astype(np.float64) - ok
    sq = np.einsum("...j,...j->...", dk, dk)
    if not k_only:
        dv = cv.astype(np.float64) - ov
        sq = sq + np.einsum("...j,...j->...", dv, dv)
    return np.sqrt(sq)


def attention_deviation(a, oracle) -> float:
    """L2 (Frobenius) norm of the difference of two forward attention matrices.

    Accepts :class:`~cacheblend.model.ForwardAttention` instances or plain arrays.
    """
    if hasattr(a, "rows") and hasattr(oracle, "rows"):
        if a.layer != oracle.layer:
            raise DomainError(f"layer mismatch: {a.layer} vs {oracle.layer}")
        a, oracle = a.rows, oracle.rows
    a = np.asarray(a, dtype=np.float64)
    oracle = np.asarray(oracle, dtype=np.float64)
    if a.shape != oracle.shape:
        raise DomainError(f"shape mismatch: {a.shape} vs {oracle.shape}")
    return float(np.linalg.norm((a - oracle).ravel()))


def concat_chunks(chunks: Sequence[ChunkKV], start_position: int = 0) -> KVCache:
    """Concatenate chunk caches in order; positions are assigned contiguously."""
    if not chunks:
        raise DomainError("need at least one chunk")
    layers = {c.num_layers for c in chunks}
    hidden = {c.k.shape[2] for c in chunks}
    if len(layers) != 1 or len(hidden) != 1:
        raise DomainError(f"chunks disagree on layer count / hidden size: {layers}, {hidden}")
    bounds, pos = [], 0
    for c in chunks:
        bounds.append((pos, pos + c.precompute_length))
        pos += c.precompute_length
    k = np.concatenate([c.k for c in chunks], axis=1)
    v = np.concatenate([c.v for c in chunks], axis=1)
    positions = np.arange(start_position, start_position + pos, dtype=np.int64)
    return KVCache(Role.PRE, k, v, positions, bounds)
