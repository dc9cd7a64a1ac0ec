"""Synthetic RAG workloads and the metrics that compare fusing methods.

Retrieval is simulated by sampling chunk ids from a Zipf popularity law.
Each query is run through the layer pipeline against the tiered store, and
optionally against a full prefill to measure attention deviation.
"""
from __future__ import annotations

import json
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .blend import full_kv_reuse, precompute_chunk
from .errors import ConfigurationError, DomainError
from .kvcache import DeviationReport, attention_deviation, chunk_digest, concat_chunks, kv_deviation
from .kvstore import DeviceProfile, KVStore
from .model import ModelConfig, TokenSequence, Weights, full_prefill, init_weights
from .pipeline import (BlendRequest, CostModel, plan_for_device, run_pipelined)


@dataclass(frozen=True)
class WorkloadSpec:
    num_chunks_in_db: int = 64
    chunk_len: int = 512
    chunks_per_query: int = 6
    popularity: float = 1.0
    num_queries: int = 100
    suffix_len: int = 32
    seed: int = 0
    vocab_size: int = 64

    def __post_init__(self):
        if self.chunk_len < 1 or self.num_chunks_in_db < 1 or self.suffix_len < 1:
            raise ConfigurationError("chunk_len, num_chunks_in_db and suffix_len must be >= 1")
        if not 1 <= self.chunks_per_query <= self.num_chunks_in_db:
            raise ConfigurationError(
                f"chunks_per_query={self.chunks_per_query} must be in [1, num_chunks_in_db={self.num_chunks_in_db}]")
        if self.popularity < 0:
            raise ConfigurationError("Zipf exponent must be >= 0")
        if self.num_queries < 0:
            raise ConfigurationError("num_queries must be >= 0")


# Desk-scale profile used by tests and demos; the 512-token / top-6 defaults
# above are the documented benchmark profile.
DESK_WORKLOAD = WorkloadSpec(num_chunks_in_db=16, chunk_len=32, chunks_per_query=3,
                             popularity=1.0, num_queries=20, suffix_len=8, seed=0, vocab_size=64)


@dataclass(frozen=True)
class Query:
    chunk_ids: tuple[int, ...]
    suffix: tuple[int, ...]


def _streams(seed: int):
    db, queries = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(db), np.random.default_rng(queries)


def chunk_database(spec: WorkloadSpec) -> list[np.ndarray]:
    """Token ids of every chunk in the simulated corpus."""
    rng, _ = _streams(spec.seed)
    return [rng.integers(0, spec.vocab_size, spec.chunk_len) for _ in range(spec.num_chunks_in_db)]


def zipf_weights(n: int, s: float) -> np.ndarray:
    w = np.arange(1, n + 1, dtype=np.float64) ** -s
    return w / w.sum()


def generate_workload(spec: WorkloadSpec) -> list[Query]:
    _, rng = _streams(spec.seed)
    p = zipf_weights(spec.num_chunks_in_db, spec.popularity)
    out = []
    for _ in range(spec.num_queries):
        ids = rng.choice(spec.num_chunks_in_db, spec.chunks_per_query, replace=False, p=p)
        suffix = rng.integers(0, spec.vocab_size, spec.suffix_len)
        out.append(Query(tuple(int(i) for i in ids), tuple(int(t) for t in suffix)))
    return out


def parse_method(method: str, r: float | None = None) -> tuple[str, float | None]:
    """Accept ``full``, ``prefix``, ``reuse``, ``blend`` or ``blend(0.15)``."""
    m = re.fullmatch(r"blend\(([0-9.eE+-]+)\)", method.strip())
    if m:
        try:
            method, r = "blend", float(m.group(1))
        except ValueError:
            raise ConfigurationError(f"bad blend ratio in {method!r}") from None
    if method not in ("full", "prefix", "reuse", "blend"):
        raise ConfigurationError(f"unknown method {method!r}")
    if method == "blend":
        r = 0.15 if r is None else r
        if not 0 < r <= 1:
            raise ConfigurationError(f"blend ratio must be in (0, 1], got {r}")
        return method, r
    return method, None


@dataclass
class MetricsReport:
    method: str
    r: float | None
    per_query: list[dict] = field(default_factory=list)
    aggregates: dict = field(default_factory=dict)

    def to_json(self, **kw) -> str:
        return json.dumps(asdict(self), **kw)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        data = json.loads(text)
        return cls(data["method"], data.get("r"), data.get("per_query", []), data.get("aggregates", {}))


def aggregate(per_query: Sequence[dict]) -> dict:
    """Aggregates derived only from the per-query records."""
    if not per_query:
        return {"ttft_mean": None, "ttft_p95": None, "dattn_mean": None, "mac_ratio": None, "hit_rate": None}
    ttft = np.array([q["ttft_sim"] for q in per_query])
    dattn = [q["dattn_mean"] for q in per_query if q.get("dattn_mean") is not None]
    hits = sum(q["hits"] for q in per_query)
    lookups = hits + sum(q["misses"] for q in per_query)
    return {
        "ttft_mean": float(ttft.mean()),
        "ttft_p95": float(np.percentile(ttft, 95)),
        "dattn_mean": float(np.mean(dattn)) if dattn else None,
        "mac_ratio": float(np.mean([q["mac_ratio"] for q in per_query])),
        "hit_rate": hits / lookups if lookups else None,
    }


def hit_rate_curve(report: MetricsReport) -> np.ndarray:
    """Cumulative store hit rate after each query."""
    hits = np.cumsum([q["hits"] for q in report.per_query])
    lookups = np.cumsum([q["hits"] + q["misses"] for q in report.per_query])
    return np.divide(hits, lookups, out=np.zeros(len(hits)), where=lookups > 0)


def run_experiment(workload: WorkloadSpec, method: str, devices: Sequence[DeviceProfile], *,
                   config: ModelConfig, store_root, r: float | None = None, cost: CostModel | None = None,
                   oracle: bool = True, tier: str | None = None, parallel: bool = False,
                   queries: Sequence[Query] | None = None) -> MetricsReport:
    """Run every query of ``workload`` with one method and collect metrics.

    Chunks missing from the store are precomputed on first use and charged
    their standalone prefill time on the simulated clock.
    """
    method, r = parse_method(method, r)
    if workload.vocab_size > config.vocab_size:
        raise ConfigurationError("workload vocabulary exceeds the model vocabulary")
    if not devices:
        raise ConfigurationError("no storage devices configured")
    weights = init_weights(config)
    db = chunk_database(workload)
    queries = list(generate_workload(workload) if queries is None else queries)
    ctx = workload.chunk_len * workload.chunks_per_query
    cost = cost or CostModel.from_macs(config, 1e9, max_tokens=ctx + workload.suffix_len)
    store = KVStore(store_root, devices)
    device = store.tier(tier) if tier else store.tiers[0]

    def one(qi_query):
        qi, q = qi_query
        chunks = [db[i] for i in q.chunk_ids]
        needed = {"full": 0, "prefix": 1}.get(method, len(chunks))
        hits = misses = 0
        miss_time = 0.0
        for toks in chunks[:needed]:
            if chunk_digest(weights.digest, toks) in store:
                hits += 1
            else:
                misses += 1
                store.put(precompute_chunk(weights, toks), device.name)
                miss_time += cost.prefill_time_full(len(toks))
        plan = plan_for_device(ctx, device, cost, ratio=r if r is not None else None)
        res = run_pipelined(plan, BlendRequest(chunks, q.suffix, method, r), weights=weights,
                            store=store, cost=cost)
        record = {"query": qi, "chunk_ids": list(q.chunk_ids), "ttft_sim": res.trace.ttft + miss_time,
                  "macs": res.macs, "full_macs": res.full_macs, "mac_ratio": res.macs / res.full_macs,
                  "hits": hits, "misses": misses, "dattn_per_layer": None, "dattn_mean": None}
        if oracle:
            _, full_attn = full_prefill(weights, np.concatenate(chunks + [np.asarray(q.suffix)]), len(q.suffix))
            d = [attention_deviation(a, b) for a, b in zip(res.attentions, full_attn)]
            record["dattn_per_layer"] = d
            record["dattn_mean"] = float(np.mean(d))
        return record

    if parallel:
        with ThreadPoolExecutor() as pool:
            per_query = list(pool.map(one, enumerate(queries)))
    else:
        per_query = [one(item) for item in enumerate(queries)]
    store.close()
    return MetricsReport(method, r, per_query, aggregate(per_query))


# ---------------------------------------------------------------- deviation shape

def measure_deviations(weights: Weights, chunk_tokens: Sequence, suffix) -> list[DeviationReport]:
    """Per-layer deviation of full KV reuse against full prefill.

    Token deviations cover the reused (chunk) tokens only.
    """
    chunks = [precompute_chunk(weights, c) for c in chunk_tokens]
    suffix = np.asarray(suffix, dtype=np.int64)
    full, full_attn = full_prefill(weights, TokenSequence(np.concatenate([*chunk_tokens, suffix])), suffix.size)
    _, reuse_attn = full_kv_reuse(weights, chunks, suffix)
    pre = concat_chunks(chunks)
    n = pre.num_tokens
    return [DeviationReport(i, kv_deviation(pre.layer(i), (full.k[i, :n], full.v[i, :n])),
                            attention_deviation(reuse_attn[i], full_attn[i]))
            for i in range(weights.config.num_layers)]


def deviation_cdf(reports, layer: int | None = None) -> np.ndarray:
    """Empirical CDF as ``(value, quantile)`` rows, one per distinct value.

    ``reports`` is a list of :class:`DeviationReport` (filtered to ``layer``
    when given) or a plain array of deviations.
    """
    if isinstance(reports, (list, tuple)) and reports and isinstance(reports[0], DeviationReport):
        chosen = [r for r in reports if layer is None or r.layer == layer]
        values = np.concatenate([np.asarray(r.per_token_kv_dev, dtype=np.float64) for r in chosen]) \
            if chosen else np.empty(0)
    else:
        values = np.asarray(reports, dtype=np.float64).ravel()
    if values.size == 0:
        raise DomainError("no deviations to build a CDF from")
    uniq, counts = np.unique(values, return_counts=True)
    return np.column_stack([uniq, np.cumsum(counts) / values.size])


def tail_ratio(values) -> float:
    """90th percentile over median of a deviation sample (heavy tail -> large)."""
    values = np.asarray(values, dtype=np.float64)
    med = np.median(values)
    return float(np.percentile(values, 90) / med) if med > 0 else float("inf")
