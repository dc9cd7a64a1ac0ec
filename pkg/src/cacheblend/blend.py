"""Selective KV recompute: fuse precomputed chunk caches into one cache.

The fusor walks the layers in order.  The first layer is recomputed for
every token.  On each later layer it projects K/V only for the tokens that
survived the previous layer, ranks them by how far those fresh values are
from the precomputed ones, keeps the top fraction given by the schedule and
recomputes attention/MLP for that subset alone.  Every other token keeps
its precomputed entry untouched.  The query (suffix) tokens have no
precomputed KV and are recomputed everywhere.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats

from .errors import ConfigurationError, DomainError
from .kvcache import ChunkKV, KVCache, Role, chunk_digest, kv_deviation
from .model import (DTYPE, ForwardAttention, MacCounter, TokenSequence, Weights, attend,
                    embed_tokens, finish_layer, full_prefill, project_kv, project_q)

SELECTIONS = ("gradual", "oracle", "oracle_lowest")

# slack for float products such as 0.15 * 20 when rounding selection counts up
_CEIL_EPS = 1e-9


@dataclass(frozen=True)
class RecomputeSchedule:
    """Per-layer recompute fractions; entry 0 is the full first layer."""

    target_ratio: float
    per_layer_ratios: tuple[float, ...]

    @property
    def num_layers(self) -> int:
        return len(self.per_layer_ratios)


def make_schedule(r: float, num_layers: int, spread: float = 0.2) -> RecomputeSchedule:
    """Linear ramp from ``(1+spread)*r`` down to ``(1-spread)*r`` over layers 2..L.

    The ramp is symmetric about ``r`` so its mean is exactly ``r``; near
    ``r = 1`` the amplitude shrinks to ``1 - r`` instead of clamping.
    """
    if not 0 < r <= 1:
        raise ConfigurationError(f"recompute ratio must be in (0, 1], got {r}")
    if num_layers < 2:
        raise ConfigurationError(f"need at least 2 layers for a schedule, got {num_layers}")
    if not 0 <= spread < 1:
        raise ConfigurationError(f"spread must be in [0, 1), got {spread}")
    amp = min(spread * r, 1.0 - r)
    ramp = np.linspace(r + amp, r - amp, num_layers - 1)
    # pin the ramp's mean to r despite linspace rounding
    ramp = ramp - (ramp.mean() - r)
    return RecomputeSchedule(float(r), (1.0,) + tuple(float(min(1.0, x)) for x in ramp))


@dataclass
class SelectionMask:
    layer: int
    selected: np.ndarray


def select_hkvd(deviations, candidates, ratio: float, always_on=(), total: int | None = None,
                layer: int = -1) -> SelectionMask:
    """Top ``ceil(ratio * total)`` candidates by deviation, plus ``always_on``.

    ``deviations[i]`` belongs to ``candidates[i]``.  ``total`` is the number
    of reusable tokens the ratio refers to (defaults to the number of
    rankable candidates).  Ties go to the lower token index.
    """
    if not ratio > 0:
        raise ConfigurationError(f"selection ratio must be positive, got {ratio}")
    deviations = np.asarray(deviations, dtype=np.float64)
    candidates = np.asarray(candidates, dtype=np.int64)
    if deviations.shape != candidates.shape:
        raise DomainError("one deviation per candidate is required")
    always = np.asarray(sorted(set(int(t) for t in always_on)), dtype=np.int64)
    rankable = ~np.isin(candidates, always)
    cand, dev = candidates[rankable], deviations[rankable]
    if total is None:
        total = cand.size
    count = min(cand.size, math.ceil(ratio * total - _CEIL_EPS))
    order = np.lexsort((cand, -dev))
    chosen = cand[order[:count]]
    return SelectionMask(layer, np.union1d(chosen, always))


@dataclass
class PartialLayerResult:
    k: np.ndarray               # full layer K after overwriting selected rows
    v: np.ndarray
    hidden: np.ndarray          # next-layer inputs of the selected rows
    probs: np.ndarray           # (heads, selected, tokens)
    deviations: np.ndarray      # fresh-vs-precomputed per selected row (nan without a precomputed row)


def partial_prefill_layer(weights: Weights, layer: int, x_sel, sel_idx, k_pre, v_pre, positions,
                          *, has_pre=None, kv_sel=None, counter: MacCounter | None = None
                          ) -> PartialLayerResult:
    """Run one layer for the selected rows only.

    ``k_pre``/``v_pre`` are the layer's ``(tokens, hidden)`` reused entries;
    rows flagged false in ``has_pre`` are placeholders and must be selected.
    ``kv_sel`` may carry K/V already projected for the selected rows.
    """
    sel_idx = np.asarray(sel_idx, dtype=np.int64)
    if sel_idx.size == 0:
        raise DomainError("partial prefill needs at least one selected token")
    if k_pre is None or v_pre is None:
        raise DomainError(f"precomputed KV for layer {layer} is missing")
    T = k_pre.shape[0]
    if has_pre is None:
        has_pre = np.ones(T, dtype=bool)
    missing = np.setdiff1d(np.flatnonzero(~has_pre), sel_idx)
    if missing.size:
        raise DomainError(f"tokens {missing.tolist()} have no precomputed KV and were not selected")
    if kv_sel is None:
        kv_sel = project_kv(weights, layer, x_sel, counter)
    k_s, v_s = kv_sel
    deviations = np.full(sel_idx.size, np.nan)
    pre_rows = has_pre[sel_idx]
    if pre_rows.any():
        deviations[pre_rows] = kv_deviation((k_s[pre_rows], v_s[pre_rows]),
                                            (k_pre[sel_idx[pre_rows]], v_pre[sel_idx[pre_rows]]))
    k = np.array(k_pre, dtype=DTYPE, copy=True)
    v = np.array(v_pre, dtype=DTYPE, copy=True)
    k[sel_idx], v[sel_idx] = k_s, v_s
    q = project_q(weights, layer, x_sel, counter)
    out, probs = attend(weights, layer, q, positions[sel_idx], k, v, positions, counter)
    hidden = finish_layer(weights, layer, x_sel, out, counter)
    return PartialLayerResult(k, v, hidden, probs, deviations)


@dataclass
class SelectionTrace:
    schedule: RecomputeSchedule | None
    selected: list[np.ndarray] = field(default_factory=list)
    # per layer: (candidate token indices, score used for ranking)
    checked: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)
    # per layer: fresh-vs-precomputed deviation of the recomputed reused tokens
    recomputed_dev: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)
    macs: int = 0

    def masks(self) -> list[SelectionMask]:
        return [SelectionMask(i, s) for i, s in enumerate(self.selected)]

    def recompute_fractions(self, num_reused: int) -> list[float]:
        """Fraction of reused tokens recomputed at each layer."""
        if num_reused == 0:
            return [0.0] * len(self.selected)
        return [float(np.count_nonzero(s < num_reused)) / num_reused for s in self.selected]


class Fusor:
    """Layer-by-layer blender for one request.

    ``prefill_layer`` is driven once per layer with that layer's precomputed
    K/V (position-free, reused tokens in order); the pipeline calls it as
    soon as the layer has been fetched.
    """

    def __init__(self, weights: Weights, chunk_tokens: Sequence, suffix_tokens, r: float, *,
                 reused: Sequence[bool] | None = None, start_position: int = 0,
                 schedule: RecomputeSchedule | None = None, selection: str = "gradual",
                 oracle: KVCache | None = None, counter: MacCounter | None = None,
                 k_only: bool = False):
        cfg = weights.config
        if not chunk_tokens:
            raise DomainError("need at least one chunk")
        if selection not in SELECTIONS:
            raise ConfigurationError(f"unknown selection policy {selection!r}; expected one of {SELECTIONS}")
        if not 0 <= r <= 1:
            raise ConfigurationError(f"recompute ratio must be in [0, 1], got {r}")
        if selection != "gradual" and oracle is None:
            raise ConfigurationError(f"selection {selection!r} needs an oracle cache")
        suffix = np.asarray(suffix_tokens.token_ids if isinstance(suffix_tokens, TokenSequence)
                            else suffix_tokens, dtype=np.int64).reshape(-1)
        if suffix.size == 0:
            raise DomainError("suffix must be non-empty")
        reused = [True] * len(chunk_tokens) if reused is None else list(reused)
        if len(reused) != len(chunk_tokens):
            raise DomainError("one reuse flag per chunk is required")

        ids, has_pre, bounds, pos = [], [], [], 0
        for toks, flag in zip(chunk_tokens, reused):
            # an int stands for a chunk of that length whose ids are unknown
            n = int(toks) if isinstance(toks, (int, np.integer)) else len(toks)
            if n == 0:
                raise DomainError("empty chunk")
            ids.append(np.full(n, -1, np.int64) if isinstance(toks, (int, np.integer))
                       else np.asarray(toks, np.int64))
            has_pre.append(np.full(n, flag))
            bounds.append((pos, pos + n))
            pos += n
        self.num_context = pos
        ids.append(suffix)
        has_pre.append(np.zeros(suffix.size, bool))
        bounds.append((pos, pos + suffix.size))

        self.weights = weights
        self.ids = np.concatenate(ids)
        self.has_pre = np.concatenate(has_pre)
        self.bounds = bounds
        self.T = self.ids.size
        self.positions = np.arange(start_position, start_position + self.T, dtype=np.int64)
        if self.positions[-1] >= cfg.max_positions:
            raise DomainError(f"input exceeds max_positions {cfg.max_positions}")
        self.suffix_len = suffix.size
        self.reused_idx = np.flatnonzero(self.has_pre)
        self.always_on = np.flatnonzero(~self.has_pre)
        self.r = r
        self.selection = selection
        self.oracle = oracle
        self.k_only = k_only
        self.counter = counter if counter is not None else MacCounter()
        if r > 0 and self.reused_idx.size:
            if schedule is not None:
                self.schedule = schedule
            elif cfg.num_layers >= 2:
                self.schedule = make_schedule(r, cfg.num_layers)
            else:
                self.schedule = RecomputeSchedule(r, (1.0,))
        else:
            self.schedule = None
        if self.schedule is not None and self.schedule.num_layers != cfg.num_layers:
            raise ConfigurationError("schedule length does not match the model depth")
        # token ids are only needed for rows that get embedded
        embedded = np.arange(self.T) if self.schedule is not None else self.always_on
        if np.any(self.ids[embedded] < 0):
            raise DomainError("token ids are required for every recomputed chunk")

        L, h = cfg.num_layers, cfg.hidden_dim
        self.k_new = np.zeros((L, self.T, h), DTYPE)
        self.v_new = np.zeros((L, self.T, h), DTYPE)
        self.hidden = np.zeros((self.T, h), DTYPE)
        self.active = np.arange(self.T)
        self.attentions: list[ForwardAttention] = []
        self.trace = SelectionTrace(self.schedule)
        self._next_layer = 0

    @property
    def num_reused(self) -> int:
        return int(self.reused_idx.size)

    def _expand(self, k_pre, v_pre):
        h = self.weights.config.hidden_dim
        k = np.zeros((self.T, h), DTYPE)
        v = np.zeros((self.T, h), DTYPE)
        if self.reused_idx.size:
            if k_pre is None or v_pre is None:
                raise DomainError("precomputed KV is missing for this layer")
            if k_pre.shape != (self.reused_idx.size, h) or v_pre.shape != k_pre.shape:
                raise DomainError(f"expected precomputed rows of shape {(self.reused_idx.size, h)}, got {np.shape(k_pre)}")
            k[self.reused_idx] = k_pre
            v[self.reused_idx] = v_pre
        return k, v

    def prefill_layer(self, layer: int, k_pre=None, v_pre=None) -> SelectionMask:
        """Blend one layer given its precomputed rows for the reused tokens."""
        if layer != self._next_layer:
            raise DomainError(f"layers must be blended in order; expected {self._next_layer}, got {layer}")
        w, c = self.weights, self.counter
        k_full, v_full = self._expand(k_pre, v_pre)
        cand = np.intersect1d(self.active, self.reused_idx)
        kv_sel = None

        if self.schedule is None:
            chosen = np.empty(0, np.int64)
            scores = np.empty(0)
        elif layer == 0:
            chosen = self.reused_idx
            scores = np.zeros(chosen.size)
        else:
            ratio = self.schedule.per_layer_ratios[layer]
            if self.selection == "gradual":
                check_k, check_v = project_kv(w, layer, self.hidden[cand], c)
                scores = kv_deviation((check_k, check_v), (k_full[cand], v_full[cand]), k_only=self.k_only)
            else:
                ok, ov = self.oracle.layer(layer)
                scores = kv_deviation((k_full[cand], v_full[cand]), (ok[cand], ov[cand]), k_only=self.k_only)
                if self.selection == "oracle_lowest":
                    scores = -scores
            chosen = select_hkvd(scores, cand, ratio, total=self.num_reused, layer=layer).selected
            if self.selection == "gradual":
                keep = np.isin(cand, chosen)
                check = (check_k[keep], check_v[keep])
        self.trace.checked.append((cand if layer and self.schedule is not None else chosen, scores))

        sel = np.union1d(chosen, self.always_on)
        if layer == 0:
            x_sel = embed_tokens(w, self.ids[sel])
        else:
            x_sel = self.hidden[sel]
        if self.schedule is not None and layer > 0 and self.selection == "gradual":
            # reuse the check projections; project only the always-on rows
            extra = project_kv(w, layer, self.hidden[self.always_on], c)
            k_sel = np.empty((sel.size, k_full.shape[1]), DTYPE)
            v_sel = np.empty_like(k_sel)
            in_chosen = np.isin(sel, chosen)
            k_sel[in_chosen], v_sel[in_chosen] = check
            k_sel[~in_chosen], v_sel[~in_chosen] = extra
            kv_sel = (k_sel, v_sel)

        res = partial_prefill_layer(w, layer, x_sel, sel, k_full, v_full, self.positions,
                                    has_pre=self.has_pre, kv_sel=kv_sel, counter=c)
        self.k_new[layer], self.v_new[layer] = res.k, res.v
        self.hidden[sel] = res.hidden
        self.active = sel
        self.trace.selected.append(sel)
        pre_rows = self.has_pre[sel]
        self.trace.recomputed_dev.append((sel[pre_rows], res.deviations[pre_rows]))
        S = self.suffix_len
        self.attentions.append(ForwardAttention(layer, res.probs[:, -S:, :].copy(), S))
        self._next_layer += 1
        return SelectionMask(layer, sel)

    def result(self):
        """``(KVCache role=New, forward attentions, SelectionTrace)`` once every layer is done."""
        if self._next_layer != self.weights.config.num_layers:
            raise DomainError(f"only {self._next_layer} of {self.weights.config.num_layers} layers blended")
        self.trace.macs = self.counter.total
        cache = KVCache(Role.NEW, self.k_new, self.v_new, self.positions, list(self.bounds))
        return cache, self.attentions, self.trace


# ---------------------------------------------------------------- entry points

def precompute_chunk(weights: Weights, token_ids, counter: MacCounter | None = None) -> ChunkKV:
    """Standalone full prefill of one chunk at positions ``[0, L)``."""
    ids = np.asarray(token_ids, dtype=np.int64).reshape(-1)
    if ids.size == 0:
        raise DomainError("cannot precompute an empty chunk")
    cache, _ = full_prefill(weights, TokenSequence(ids), 1, counter)
    digest = weights.digest
    return ChunkKV(chunk_digest(digest, ids), digest, cache.k, cache.v, tuple(ids.tolist()))


def _check_chunks(weights: Weights, chunks: Sequence[ChunkKV]):
    if not chunks:
        raise DomainError("need at least one chunk")
    for c in chunks:
        if c.num_layers != weights.config.num_layers:
            raise DomainError(f"chunk {c.hex_hash[:12]} has {c.num_layers} layers, model has {weights.config.num_layers}")
        if c.k.shape[2] != weights.config.hidden_dim:
            raise DomainError(f"chunk {c.hex_hash[:12]} hidden size does not match the model")


def _run(weights, chunks, suffix, r, reused=None, **kw):
    _check_chunks(weights, chunks)
    tokens = [c.token_ids if c.token_ids is not None else c.precompute_length for c in chunks]
    fusor = Fusor(weights, tokens, suffix, r, reused=reused, **kw)
    reused_chunks = [c for c, f in zip(chunks, reused or [True] * len(chunks)) if f]
    for i in range(weights.config.num_layers):
        if reused_chunks:
            k = np.concatenate([c.k[i] for c in reused_chunks])
            v = np.concatenate([c.v[i] for c in reused_chunks])
        else:
            k = v = None
        fusor.prefill_layer(i, k, v)
    return fusor.result()


def blend_prefill(weights: Weights, chunks: Sequence[ChunkKV], suffix, r: float, **kw):
    """Fuse ``chunks`` followed by ``suffix`` recomputing an average fraction ``r`` per layer.

    Keyword arguments are forwarded to :class:`Fusor` (``schedule``,
    ``selection``, ``oracle``, ``counter``, ``start_position``, ``k_only``).
    Returns ``(cache, attentions, trace)``.
    """
    return _run(weights, chunks, suffix, r, **kw)


def full_kv_reuse(weights: Weights, chunks: Sequence[ChunkKV], suffix, **kw):
    """Concatenate chunk caches as-is; only the suffix is computed."""
    cache, attentions, _ = _run(weights, chunks, suffix, 0.0, **kw)
    return cache, attentions


def prefix_reuse(weights: Weights, chunks: Sequence[ChunkKV], suffix, **kw):
    """Prefix caching: reuse only the first chunk and recompute everything after it."""
    reused = [True] + [False] * (len(chunks) - 1)
    return _run(weights, chunks, suffix, 0.0, reused=reused, **kw)


def oracle_deviations(pre: KVCache, full: KVCache, tokens=None, *, k_only: bool = False) -> np.ndarray:
    """``(layers, tokens)`` KV deviation of a reused cache against the full-prefill cache."""
    if tokens is None:
        tokens = np.arange(min(pre.num_tokens, full.num_tokens))
    return np.stack([kv_deviation((pre.k[i, tokens], pre.v[i, tokens]),
                                  (full.k[i, tokens], full.v[i, tokens]), k_only=k_only)
                     for i in range(pre.num_layers)])


def layer_rank_correlation(trace) -> list[float]:
    """Spearman rank correlation between consecutive layers' deviation vectors.

    ``trace`` is a ``(layers, tokens)`` array of deviations over a common
    token set.  Layers whose deviations are constant yield ``nan``.
    """
    dev = np.asarray(trace, dtype=np.float64)
    if dev.ndim != 2 or dev.shape[0] < 2:
        raise DomainError("need deviations for at least two layers")
    if dev.shape[1] < 2:
        raise DomainError("need at least two tokens to rank")
    out = []
    for a, b in zip(dev[:-1], dev[1:]):
        if np.ptp(a) == 0 or np.ptp(b) == 0:
            out.append(float("nan"))
        else:
            out.append(float(stats.spearmanr(a, b).statistic))
    return out
