"""Loading controller and the layer-wise fetch/recompute pipeline.

Two logical workers run per request: a fetcher that loads layer ``i+1``
from the store while the fuser blends layer ``i``.  They hand layers over
through a single slot, and the fuser waits at a per-layer barrier until its
layer has arrived.  The same contract runs against a simulated clock
(deterministic, durations from the cost model and device profile) or the
wall clock (two threads).
"""
from __future__ import annotations

import heapq
import json
import queue
import threading
import time
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Sequence

import numpy as np

from .blend import Fusor
from .errors import ConfigurationError, DomainError, PipelineError
from .kvcache import KVCache, chunk_digest
from .kvstore import DeviceProfile, KVStore
from .model import MacCounter, ModelConfig, Weights, layer_macs, prefill_macs

DEFAULT_QUALITY_FLOOR = 0.15


@dataclass(frozen=True)
class CostModel:
    """Offline-profiled prefill times plus per-token KV size.

    ``prefill_table`` holds ``(tokens, seconds)`` points for a full prefill
    of the whole model; lookups interpolate linearly between points and
    refuse to extrapolate.  ``per_token_kv_bytes`` is the K+V size of one
    token on one layer.
    """

    prefill_table: tuple[tuple[int, float], ...]
    per_token_kv_bytes: int
    num_layers: int
    quality_floor: float = DEFAULT_QUALITY_FLOOR

    def __post_init__(self):
        table = tuple(sorted((int(n), float(s)) for n, s in self.prefill_table))
        if not table:
            raise ConfigurationError("prefill table is empty")
        lengths = [n for n, _ in table]
        if len(set(lengths)) != len(lengths):
            raise ConfigurationError("prefill table has duplicate lengths")
        if any(b[1] < a[1] for a, b in zip(table, table[1:])):
            raise ConfigurationError("prefill time must be non-decreasing in length")
        if self.per_token_kv_bytes <= 0 or self.num_layers < 1:
            raise ConfigurationError("per_token_kv_bytes and num_layers must be positive")
        if not 0 < self.quality_floor <= 1:
            raise ConfigurationError(f"quality floor must be in (0, 1], got {self.quality_floor}")
        object.__setattr__(self, "prefill_table", table)

    @cached_property
    def _points(self):
        return (np.array([n for n, _ in self.prefill_table], dtype=np.float64),
                np.array([s for _, s in self.prefill_table], dtype=np.float64))

    def prefill_time_full(self, length: int) -> float:
        xs, ys = self._points
        if not xs[0] <= length <= xs[-1]:
            raise ConfigurationError(
                f"length {length} is outside the profiled range [{int(xs[0])}, {int(xs[-1])}]")
        return float(np.interp(length, xs, ys))

    @classmethod
    def from_macs(cls, config: ModelConfig, macs_per_second: float, dtype_bytes: int = 4,
                  max_tokens: int | None = None, quality_floor: float = DEFAULT_QUALITY_FLOOR) -> "CostModel":
        """Deterministic profile: prefill time = counted MACs / ``macs_per_second``."""
        if not macs_per_second > 0:
            raise ConfigurationError("macs_per_second must be positive")
        top = max_tokens or config.max_positions
        table = tuple((n, prefill_macs(config, n) / macs_per_second) for n in range(top + 1))
        return cls(table, 2 * config.hidden_dim * dtype_bytes, config.num_layers, quality_floor)

    @classmethod
    def profile(cls, weights: Weights, lengths: Sequence[int], repeats: int = 3,
                quality_floor: float = DEFAULT_QUALITY_FLOOR) -> "CostModel":
        """Measured profile: best-of-``repeats`` wall time of a full prefill per length."""
        from .model import full_prefill
        rng = np.random.default_rng(weights.config.seed)
        table = [(0, 0.0)]
        for n in sorted(set(int(x) for x in lengths if x > 0)):
            ids = rng.integers(0, weights.config.vocab_size, n)
            best = min(_timed(lambda: full_prefill(weights, ids)) for _ in range(repeats))
            table.append((n, max(best, table[-1][1])))
        cfg = weights.config
        return cls(tuple(table), 2 * cfg.hidden_dim * 4, cfg.num_layers, quality_floor)

    def to_dict(self) -> dict:
        return {"prefill_table": [list(p) for p in self.prefill_table],
                "per_token_kv_bytes": self.per_token_kv_bytes,
                "num_layers": self.num_layers, "quality_floor": self.quality_floor}

    @classmethod
    def from_dict(cls, data: dict) -> "CostModel":
        try:
            return cls(tuple(tuple(p) for p in data["prefill_table"]), int(data["per_token_kv_bytes"]),
                       int(data["num_layers"]), float(data.get("quality_floor", DEFAULT_QUALITY_FLOOR)))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigurationError(f"bad cost model: {exc}") from None


def _timed(fn) -> float:
    t0 = time.perf_counter()
    fn()
    return time.perf_counter() - t0


# ---------------------------------------------------------------- controller

def estimate_recompute(r: float, length: int, cost: CostModel, per_layer: bool = False) -> float:
    """Time to recompute a fraction ``r`` of a ``length``-token prefill."""
    if not 0 < r <= 1:
        raise ConfigurationError(f"recompute ratio must be in (0, 1], got {r}")
    t = r * cost.prefill_time_full(length)
    return t / cost.num_layers if per_layer else t


def estimate_load(length: int, device: DeviceProfile, cost: CostModel) -> float:
    """Time to load one layer's KV of ``length`` tokens from ``device``."""
    return cost.per_token_kv_bytes * length / device.throughput + device.latency_floor


def storage_cost(length: int, hours: float, device: DeviceProfile, cost: CostModel) -> float:
    """Cost of keeping every layer of a ``length``-token cache on ``device`` for ``hours``."""
    return cost.per_token_kv_bytes * length * cost.num_layers * hours * device.storage_cost


def pick_ratio(length: int, device: DeviceProfile, cost: CostModel) -> float:
    """Recompute ratio whose per-layer recompute time matches the per-layer load time.

    Never below the quality floor, never above 1.
    """
    t_load = estimate_load(length, device, cost)
    t_full = estimate_recompute(1.0, length, cost, per_layer=True)
    if t_full <= 0:
        r_eq = 1.0 if t_load > 0 else 0.0
    else:
        r_eq = t_load / t_full
    return min(1.0, max(r_eq, cost.quality_floor))


def pick_device(devices: Sequence[DeviceProfile], length: int, cost: CostModel) -> tuple[DeviceProfile, bool]:
    """Cheapest device whose per-layer load hides recompute at the quality floor.

    Returns ``(device, ok)``; when no device qualifies the fastest one is
    returned with ``ok=False``.
    """
    if not devices:
        raise ConfigurationError("no storage devices to choose from")
    budget = estimate_recompute(cost.quality_floor, length, cost, per_layer=True)
    fits = [d for d in devices if estimate_load(length, d, cost) <= budget]
    if fits:
        return min(fits, key=lambda d: (d.storage_cost, -d.throughput)), True
    fastest = min(devices, key=lambda d: estimate_load(length, d, cost))
    warnings.warn(f"no device hides loading at r*={cost.quality_floor}; using fastest ({fastest.name})",
                  stacklevel=2)
    return fastest, False


@dataclass
class PipelinePlan:
    recompute_ratio: float
    device: DeviceProfile
    t_load: float          # per layer
    t_recompute: float     # per layer, at recompute_ratio
    ttft: float
    length: int
    device_ok: bool = True

    def to_dict(self) -> dict:
        return {"recompute_ratio": self.recompute_ratio, "device": self.device.name,
                "t_load": self.t_load, "t_recompute": self.t_recompute, "ttft": self.ttft,
                "length": self.length, "device_ok": self.device_ok}


def plan_for_device(length: int, device: DeviceProfile, cost: CostModel, ratio: float | None = None,
                    device_ok: bool = True) -> PipelinePlan:
    r = pick_ratio(length, device, cost) if ratio is None else ratio
    t_load = estimate_load(length, device, cost)
    t_rec = estimate_recompute(r, length, cost, per_layer=True)
    ttft = simulate_pipeline([t_load] * cost.num_layers, [t_rec] * cost.num_layers).ttft
    return PipelinePlan(r, device, t_load, t_rec, ttft, length, device_ok)


def make_plan(length: int, devices: Sequence[DeviceProfile], cost: CostModel) -> PipelinePlan:
    """Pick the device at the quality floor, then the ratio for that device."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        device, ok = pick_device(devices, length, cost)
    return plan_for_device(length, device, cost, device_ok=ok)


# ---------------------------------------------------------------- traces

EVENTS = ("fetch_start", "fetch_end", "compute_start", "compute_end")


@dataclass
class TimingTrace:
    events: list[dict] = field(default_factory=list)

    def record(self, event: str, layer: int, t: float):
        self.events.append({"event": event, "layer": int(layer), "t": float(t)})

    def times(self, event: str) -> np.ndarray:
        rows = sorted((e["layer"], e["t"]) for e in self.events if e["event"] == event)
        return np.array([t for _, t in rows], dtype=np.float64)

    @property
    def num_layers(self) -> int:
        return len(self.times("compute_end"))

    @property
    def ttft(self) -> float:
        ends = self.times("compute_end")
        return float(ends.max()) if ends.size else 0.0

    def barrier_violations(self, eps: float = 0.0) -> list[int]:
        """Layers whose compute started before their fetch finished."""
        fe, cs = self.times("fetch_end"), self.times("compute_start")
        return [i for i in range(min(fe.size, cs.size)) if cs[i] + eps < fe[i]]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(e) + "\n" for e in self.events)

    @classmethod
    def from_jsonl(cls, text: str) -> "TimingTrace":
        events = [json.loads(line) for line in text.splitlines() if line.strip()]
        for e in events:
            if e.get("event") not in EVENTS or set(e) != {"event", "layer", "t"}:
                raise DomainError(f"bad trace event {e}")
        return cls(events)


def simulate_pipeline(load_times: Sequence[float], compute_times: Sequence[float]) -> TimingTrace:
    """Discrete-event run of the fetcher/fuser pair on a simulated clock.

    The fetcher may start layer ``i`` once it finished ``i-1`` and the fuser
    has taken ``i-1`` out of the hand-off slot; the fuser starts layer ``i``
    once it is in the slot and layer ``i-1`` is done.
    """
    n = len(load_times)
    if len(compute_times) != n:
        raise DomainError("need one load and one compute time per layer")
    trace = TimingTrace()
    if n == 0:
        return trace
    heap: list[tuple[float, int, str, int]] = []
    seq = 0

    def push(t, kind, layer):
        nonlocal seq
        heapq.heappush(heap, (t, seq, kind, layer))
        seq += 1

    slot = None
    fetcher_idle, fuser_idle = True, True
    next_fetch, next_compute = 0, 0

    def start_fetch(t):
        nonlocal fetcher_idle, next_fetch
        trace.record("fetch_start", next_fetch, t)
        push(t + load_times[next_fetch], "fetch_end", next_fetch)
        fetcher_idle = False
        next_fetch += 1

    def try_compute(t):
        nonlocal slot, fuser_idle, next_compute
        if fuser_idle and slot == next_compute:
            layer, slot = slot, None
            trace.record("compute_start", layer, t)
            push(t + compute_times[layer], "compute_end", layer)
            fuser_idle = False
            next_compute += 1
            if fetcher_idle and next_fetch < n:
                start_fetch(t)

    start_fetch(0.0)
    while heap:
        t, _, kind, layer = heapq.heappop(heap)
        trace.record(kind, layer, t)
        if kind == "fetch_end":
            fetcher_idle = True
            slot = layer
        else:
            fuser_idle = True
        try_compute(t)
    return trace


def run_threaded(num_layers: int, fetch: Callable[[int], object],
                 compute: Callable[[int, object], None]) -> TimingTrace:
    """Wall-clock variant: a fetcher thread and the calling thread as fuser."""
    trace = TimingTrace()
    lock = threading.Lock()
    handoff: queue.Queue = queue.Queue(maxsize=1)
    taken = threading.Semaphore(0)
    stop = threading.Event()
    t0 = time.perf_counter()

    def now():
        return time.perf_counter() - t0

    def log(event, layer):
        with lock:
            trace.record(event, layer, now())

    def fetcher():
        for i in range(num_layers):
            if i:
                taken.acquire()  # previous layer must leave the slot first
                if stop.is_set():
                    return
            log("fetch_start", i)
            try:
                payload = fetch(i)
            except BaseException as exc:  # surfaced by the fuser
                handoff.put((i, exc, True))
                return
            log("fetch_end", i)
            handoff.put((i, payload, False))

    worker = threading.Thread(target=fetcher, name="kv-fetcher", daemon=True)
    worker.start()
    try:
        for i in range(num_layers):
            layer, payload, failed = handoff.get()  # per-layer barrier
            taken.release()
            if failed:
                raise payload
            log("compute_start", layer)
            compute(layer, payload)
            log("compute_end", layer)
    finally:
        stop.set()
        taken.release()
        worker.join()
    return trace


# ---------------------------------------------------------------- executor

METHODS = ("full", "prefix", "reuse", "blend")


@dataclass
class BlendRequest:
    chunks: list                 # token ids per chunk
    suffix: Sequence[int]
    method: str = "blend"
    ratio: float | None = None   # defaults to the plan's ratio

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigurationError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if not self.chunks:
            raise DomainError("a request needs at least one chunk")


@dataclass
class PipelineResult:
    cache: KVCache
    attentions: list
    trace: TimingTrace
    selection: object
    macs: int
    full_macs: int


def run_pipelined(plan: PipelinePlan, request: BlendRequest, *, weights: Weights, store: KVStore,
                  cost: CostModel | None = None, clock: str = "simulated", **fusor_kw) -> PipelineResult:
    """Fetch precomputed layers from ``store`` while blending, one layer at a time.

    Simulated durations: load = bytes read / device throughput + latency
    floor (per chunk read), compute = counted MACs of the layer relative to a
    full layer, times the cost model's per-layer full prefill time.
    """
    if clock not in ("simulated", "real"):
        raise ConfigurationError(f"clock must be 'simulated' or 'real', got {clock!r}")
    cfg = weights.config
    digest = weights.digest
    chunks = [np.asarray(c, dtype=np.int64) for c in request.chunks]
    hashes = [chunk_digest(digest, c) for c in chunks]
    if request.method == "full":
        reused = [False] * len(chunks)
    elif request.method == "prefix":
        reused = [True] + [False] * (len(chunks) - 1)
    else:
        reused = [True] * len(chunks)
    for h, flag in zip(hashes, reused):
        if flag and h not in store:
            raise PipelineError(f"chunk {h.hex()} is not in the store", h.hex(), None)
    ratio = 0.0 if request.method in ("full", "prefix", "reuse") else (
        plan.recompute_ratio if request.ratio is None else request.ratio)
    counter = MacCounter()
    fusor = Fusor(weights, chunks, request.suffix, ratio, reused=reused, counter=counter, **fusor_kw)
    T = fusor.T
    cost = cost or CostModel.from_macs(cfg, 1e9, max_tokens=T)
    t_layer_full = cost.prefill_time_full(T) / cfg.num_layers
    full_layer = layer_macs(cfg, T, T)
    fetched = [h for h, flag in zip(hashes, reused) if flag]
    load_times = [0.0] * cfg.num_layers
    compute_times = [0.0] * cfg.num_layers

    def fetch(i):
        ks, vs, seconds = [], [], 0.0
        for h in fetched:
            layer = store.fetch_layer(h, i)
            if layer is None:
                raise PipelineError(f"chunk {h.hex()} layer {i} vanished from the store", h.hex(), i)
            ks.append(layer.k)
            vs.append(layer.v)
            seconds += layer.sim_seconds
        load_times[i] = seconds
        if not ks:
            return None, None
        return np.concatenate(ks), np.concatenate(vs)

    def compute(i, payload):
        before = counter.per_layer[i]
        fusor.prefill_layer(i, *payload)
        compute_times[i] = (counter.per_layer[i] - before) / full_layer * t_layer_full

    if clock == "simulated":
        for i in range(cfg.num_layers):
            compute(i, fetch(i))
        trace = simulate_pipeline(load_times, compute_times)
    else:
        trace = run_threaded(cfg.num_layers, fetch, compute)
    cache, attentions, selection = fusor.result()
    return PipelineResult(cache, attentions, trace, selection, counter.total, prefill_macs(cfg, T))
