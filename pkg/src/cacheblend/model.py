"""A seeded miniature decoder-only transformer.

Architecture (fixed): RMS pre-norm -> causal multi-head attention with
rotary embeddings -> residual -> RMS pre-norm -> GELU MLP -> residual, with
untied input embedding and output projection.  Everything is float32.

The layer primitives (`project_kv`, `project_q`, `attend`, `finish_layer`)
work on an arbitrary subset of rows so that the selective recompute path
reuses exactly the arithmetic of the full prefill.
"""
from __future__ import annotations

import hashlib
import json
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, DomainError
from .kvcache import KVCache, Role
from .rope import RopeParams, realign

DTYPE = np.float32
NORM_EPS = 1e-6


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 2
    num_heads: int = 2
    head_dim: int = 4
    mlp_dim: int = 32
    vocab_size: int = 64
    rope_theta_base: float = 10000.0
    seed: int = 0
    max_positions: int = 8192
    hidden_dim: int | None = None

    def __post_init__(self):
        for name in ("num_layers", "num_heads", "head_dim", "mlp_dim", "vocab_size", "max_positions"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ConfigurationError(f"{name} must be an integer >= 1, got {value!r}")
        if self.head_dim % 2:
            raise ConfigurationError(f"head_dim must be even for rotary pairs, got {self.head_dim}")
        expected = self.num_heads * self.head_dim
        if self.hidden_dim is None:
            object.__setattr__(self, "hidden_dim", expected)
        elif self.hidden_dim != expected:
            raise ConfigurationError(
                f"hidden_dim must equal num_heads * head_dim = {expected}, got {self.hidden_dim}")
        if not self.rope_theta_base > 0:
            raise ConfigurationError(f"rope_theta_base must be positive, got {self.rope_theta_base}")
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigurationError(f"seed must fit in 64 bits, got {self.seed}")

    @property
    def rope(self) -> RopeParams:
        return RopeParams(self.head_dim, self.rope_theta_base)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown model config field(s): {sorted(unknown)}")
        return cls(**data)

    def digest(self) -> bytes:
        """SHA-256 of the canonical JSON form; identifies the model (weights follow from it)."""
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).digest()


@dataclass(frozen=True, eq=False)
class Weights:
    config: ModelConfig
    embed: np.ndarray        # (vocab, hidden)
    wq: np.ndarray           # (layers, hidden, hidden)
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w_in: np.ndarray         # (layers, hidden, mlp)
    w_out: np.ndarray        # (layers, mlp, hidden)
    attn_norm: np.ndarray    # (layers, hidden)
    mlp_norm: np.ndarray
    final_norm: np.ndarray   # (hidden,)
    unembed: np.ndarray      # (hidden, vocab)

    @property
    def digest(self) -> bytes:
        return self.config.digest()


def init_weights(config: ModelConfig) -> Weights:
    """Draw weights from ``uniform[-0.5, 0.5) / sqrt(fan_in)`` with a PCG64 stream seeded by ``config.seed``.

    The embedding table uses fan_in = 1; normalization gains are ones.
    Draw order is fixed, so a (config, seed) pair always yields identical bits.
    """
    if not isinstance(config, ModelConfig):
        raise ConfigurationError("init_weights expects a ModelConfig")
    rng = np.random.default_rng(int(config.seed))
    L, h, m, V = config.num_layers, config.hidden_dim, config.mlp_dim, config.vocab_size

    def draw(shape, fan_in):
        return (rng.uniform(-0.5, 0.5, size=shape) / np.sqrt(fan_in)).astype(DTYPE)

    embed = draw((V, h), 1)
    wq, wk, wv, wo = (draw((L, h, h), h) for _ in range(4))
    w_in = draw((L, h, m), h)
    w_out = draw((L, m, h), m)
    unembed = draw((h, V), h)
    ones = np.ones((L, h), dtype=DTYPE)
    return Weights(config, embed, wq, wk, wv, wo, w_in, w_out,
                   ones, ones.copy(), np.ones(h, dtype=DTYPE), unembed)


@dataclass
class TokenSequence:
    token_ids: np.ndarray
    global_positions: np.ndarray | None = None

    def __post_init__(self):
        self.token_ids = np.asarray(self.token_ids, dtype=np.int64).reshape(-1)
        if self.global_positions is None:
            self.global_positions = np.arange(self.token_ids.size, dtype=np.int64)
        self.global_positions = np.asarray(self.global_positions, dtype=np.int64).reshape(-1)
        if self.global_positions.shape != self.token_ids.shape:
            raise DomainError("token_ids and global_positions must have equal length")
        if np.any(self.global_positions < 0) or np.any(np.diff(self.global_positions) <= 0):
            raise DomainError("global positions must be non-negative and strictly increasing")

    def __len__(self):
        return int(self.token_ids.size)


@dataclass
class ForwardAttention:
    """Post-softmax attention of the last ``suffix_len`` tokens over all tokens.

    ``rows`` has shape ``(num_heads, suffix_len, tokens)``.
    """

    layer: int
    rows: np.ndarray
    suffix_len: int


class MacCounter:
    """Tallies multiply-accumulates by category.

    Attention terms are counted densely (query rows x context length), which
    is the work a masked dense kernel performs.
    """

    def __init__(self):
        self.counts: dict[str, int] = defaultdict(int)
        self.per_layer: dict[int, int] = defaultdict(int)

    def add(self, kind: str, n: int, layer: int | None = None):
        self.counts[kind] += int(n)
        if layer is not None:
            self.per_layer[layer] += int(n)

    @property
    def total(self) -> int:
        return sum(self.counts.values())


# ---------------------------------------------------------------- primitives

def rms_norm(x, gain):
    x = x.astype(DTYPE)
    scale = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + NORM_EPS)
    return (x * scale * gain).astype(DTYPE)


def gelu(x):
    c = np.float32(np.sqrt(2.0 / np.pi))
    return (0.5 * x * (1.0 + np.tanh(c * (x + np.float32(0.044715) * x * x * x)))).astype(DTYPE)


def embed_tokens(weights: Weights, token_ids) -> np.ndarray:
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= weights.config.vocab_size):
        raise DomainError(f"token ids must lie in [0, {weights.config.vocab_size})")
    return weights.embed[ids]


def project_kv(weights: Weights, layer: int, x, counter: MacCounter | None = None):
    """Position-free K and V rows for hidden inputs ``x`` (rows, hidden)."""
    xn = rms_norm(x, weights.attn_norm[layer])
    if counter is not None:
        h = weights.config.hidden_dim
        counter.add("kv_proj", 2 * x.shape[0] * h * h, layer)
    return xn @ weights.wk[layer], xn @ weights.wv[layer]


def project_q(weights: Weights, layer: int, x, counter: MacCounter | None = None):
    xn = rms_norm(x, weights.attn_norm[layer])
    if counter is not None:
        h = weights.config.hidden_dim
        counter.add("q_proj", x.shape[0] * h * h, layer)
    return xn @ weights.wq[layer]


def attend(weights: Weights, layer: int, q, q_pos, k_all, v_all, k_pos,
           counter: MacCounter | None = None):
    """Causal attention of query rows over every cached token.

    ``q`` is un-rotated (rows, hidden); ``k_all`` is position-free.  Both are
    rotated to their absolute positions here.  Returns the attention output
    ``(rows, hidden)`` and probabilities ``(heads, rows, tokens)``.
    """
    cfg = weights.config
    H, d = cfg.num_heads, cfg.head_dim
    n, T = q.shape[0], k_all.shape[0]
    q_pos = np.asarray(q_pos)
    k_pos = np.asarray(k_pos)
    qr = realign(q, q_pos, cfg.rope).reshape(n, H, d).transpose(1, 0, 2)
    kr = realign(k_all, k_pos, cfg.rope).reshape(T, H, d).transpose(1, 0, 2)
    vh = v_all.reshape(T, H, d).transpose(1, 0, 2)
    scores = (qr @ kr.transpose(0, 2, 1)) * np.float32(1.0 / np.sqrt(d))
    scores = np.where(k_pos[None, None, :] > q_pos[None, :, None], -np.inf, scores)
    scores = scores - scores.max(axis=-1, keepdims=True)
    probs = np.exp(scores)
    probs = (probs / probs.sum(axis=-1, keepdims=True)).astype(DTYPE)
    out = (probs @ vh).transpose(1, 0, 2).reshape(n, H * d)
    if counter is not None:
        counter.add("attn", 2 * n * T * H * d, layer)
    return out, probs


def finish_layer(weights: Weights, layer: int, x, attn_out, counter: MacCounter | None = None):
    """Output projection, residual, MLP block and residual for the given rows."""
    x = x + attn_out @ weights.wo[layer]
    hmid = gelu(rms_norm(x, weights.mlp_norm[layer]) @ weights.w_in[layer])
    x = (x + hmid @ weights.w_out[layer]).astype(DTYPE)
    if counter is not None:
        h, m = weights.config.hidden_dim, weights.config.mlp_dim
        counter.add("o_proj", x.shape[0] * h * h, layer)
        counter.add("mlp", 2 * x.shape[0] * h * m, layer)
    return x


def output_logits(weights: Weights, x) -> np.ndarray:
    return rms_norm(x, weights.final_norm) @ weights.unembed


# ---------------------------------------------------------------- prefill / decode

def _prefill(weights: Weights, seq: TokenSequence, suffix_len: int, counter=None):
    cfg = weights.config
    if len(seq) == 0:
        raise DomainError("cannot prefill an empty input")
    if not 1 <= suffix_len <= len(seq):
        raise DomainError(f"suffix_len must be in [1, {len(seq)}], got {suffix_len}")
    if seq.global_positions[-1] >= cfg.max_positions:
        raise DomainError(f"position {seq.global_positions[-1]} exceeds max_positions {cfg.max_positions}")
    pos = seq.global_positions
    x = embed_tokens(weights, seq.token_ids)
    T, h = x.shape
    ks = np.empty((cfg.num_layers, T, h), dtype=DTYPE)
    vs = np.empty_like(ks)
    attentions = []
    for i in range(cfg.num_layers):
        k, v = project_kv(weights, i, x, counter)
        q = project_q(weights, i, x, counter)
        out, probs = attend(weights, i, q, pos, k, v, pos, counter)
        x = finish_layer(weights, i, x, out, counter)
        ks[i], vs[i] = k, v
        attentions.append(ForwardAttention(i, probs[:, T - suffix_len:, :].copy(), suffix_len))
    return KVCache(Role.FULL, ks, vs, pos.copy()), attentions, x


def full_prefill(weights: Weights, input: TokenSequence, suffix_len: int = 1,
                 counter: MacCounter | None = None):
    """Full prefill: returns the oracle cache and per-layer forward attention."""
    if not isinstance(input, TokenSequence):
        input = TokenSequence(input)
    cache, attentions, _ = _prefill(weights, input, suffix_len, counter)
    return cache, attentions


def prefill_logits(weights: Weights, input) -> np.ndarray:
    """Next-token logits after a full prefill of ``input``."""
    if not isinstance(input, TokenSequence):
        input = TokenSequence(input)
    _, _, x = _prefill(weights, input, 1)
    return output_logits(weights, x[-1:])[0]


def decode_step(weights: Weights, cache: KVCache, next_token: int):
    """Append one token at the next position; returns ``(logits, new_cache)``."""
    cfg = weights.config
    if cache.num_layers != cfg.num_layers:
        raise DomainError("cache layer count does not match the model")
    positions = cache.positions
    if positions.size and np.any(np.diff(positions) != 1):
        raise DomainError("decode requires contiguous cache positions")
    new_pos = int(positions[-1]) + 1 if positions.size else 0
    if new_pos >= cfg.max_positions:
        raise DomainError(f"position {new_pos} exceeds max_positions {cfg.max_positions}")
    x = embed_tokens(weights, [next_token])
    all_pos = np.append(positions, new_pos)
    ks = np.concatenate([cache.k, np.empty((cfg.num_layers, 1, cfg.hidden_dim), DTYPE)], axis=1)
    vs = np.concatenate([cache.v, np.empty((cfg.num_layers, 1, cfg.hidden_dim), DTYPE)], axis=1)
    for i in range(cfg.num_layers):
        k, v = project_kv(weights, i, x)
        ks[i, -1], vs[i, -1] = k[0], v[0]
        q = project_q(weights, i, x)
        out, _ = attend(weights, i, q, [new_pos], ks[i], vs[i], all_pos)
        x = finish_layer(weights, i, x, out)
    last = cache.chunk_boundaries[-1] if cache.chunk_boundaries else (0, 0)
    bounds = list(cache.chunk_boundaries[:-1]) + [(last[0], last[1] + 1)] if cache.chunk_boundaries else [(0, 1)]
    return output_logits(weights, x)[0], KVCache(cache.role, ks, vs, all_pos, bounds)


def layer_macs(config: ModelConfig, rows: int, context: int) -> int:
    """MACs of one layer for ``rows`` recomputed tokens over ``context`` keys (matches MacCounter)."""
    h, m = config.hidden_dim, config.mlp_dim
    return rows * (4 * h * h + 2 * h * m) + 2 * rows * context * h


def prefill_macs(config: ModelConfig, tokens: int) -> int:
    return config.num_layers * layer_macs(config, tokens, tokens)
