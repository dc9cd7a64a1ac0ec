"""Command-line entry point: ``cacheblend <command> [options]``.

Exit codes: 0 ok, 2 configuration, 3 input parse, 4 store miss,
5 internal invariant violation.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .bench import WorkloadSpec, parse_method, run_experiment
from .blend import precompute_chunk
from .errors import CacheBlendError, ConfigurationError, PipelineError
from .kvcache import attention_deviation, chunk_digest
from .kvstore import DeviceProfile, KVStore
from .model import ModelConfig, full_prefill, init_weights
from .pipeline import (BlendRequest, CostModel, make_plan, plan_for_device, run_pipelined)

log = logging.getLogger("cacheblend")

EXIT_OK, EXIT_CONFIG, EXIT_PARSE, EXIT_MISS, EXIT_INTERNAL = 0, 2, 3, 4, 5
DEFAULT_TIER = "local=1e9:1:1e12"
MODEL_FORMAT = "cacheblend-model/1"


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# ------------------------------------------------------------------ helpers

def _emit(args, payload: dict, table: list[tuple] | None = None):
    if args.json or table is None:
        print(json.dumps(payload, sort_keys=True))
    else:
        width = max(len(str(k)) for k, *_ in table)
        for key, *vals in table:
            print(f"{str(key):<{width}}  " + "  ".join(str(v) for v in vals))


def load_model(path) -> ModelConfig:
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise CliError(EXIT_CONFIG, f"cannot read model file {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise CliError(EXIT_CONFIG, f"model file {path} is not JSON: {exc}") from None
    if data.get("format") != MODEL_FORMAT:
        raise CliError(EXIT_CONFIG, f"{path} is not a {MODEL_FORMAT} file")
    config = ModelConfig.from_dict(data["config"])
    if config.digest().hex() != data.get("digest"):
        raise CliError(EXIT_CONFIG, f"model digest in {path} does not match its config")
    return config


def _tiers(args, default=True) -> list[DeviceProfile]:
    specs = args.tier or ([DEFAULT_TIER] if default else [])
    return [DeviceProfile.parse(s) for s in specs]


def parse_chunks_file(path) -> list[list[int]]:
    """One chunk per line of space-separated decimal token ids; blank lines are skipped."""
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise CliError(EXIT_CONFIG, f"cannot read chunks file {path}: {exc}") from None
    chunks = []
    for n, line in enumerate(lines, 1):
        if not line.strip():
            log.warning("%s:%d: empty line skipped", path, n)
            continue
        try:
            ids = [int(tok, 10) for tok in line.split()]
        except ValueError:
            raise CliError(EXIT_PARSE, f"{path}:{n}: malformed token ids") from None
        if any(t < 0 for t in ids):
            raise CliError(EXIT_PARSE, f"{path}:{n}: negative token id")
        chunks.append(ids)
    return chunks


def _parse_tokens(text: str, what: str) -> list[int]:
    try:
        ids = [int(t, 10) for t in text.replace(",", " ").split()]
    except ValueError:
        raise CliError(EXIT_PARSE, f"malformed {what}: {text!r}") from None
    if not ids:
        raise CliError(EXIT_PARSE, f"{what} is empty")
    return ids


# ------------------------------------------------------------------ commands

def cmd_gen_model(args) -> int:
    fields = {}
    if args.config:
        try:
            fields.update(json.loads(Path(args.config).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError(EXIT_CONFIG, f"cannot load config {args.config}: {exc}") from None
    for name in ("num_layers", "num_heads", "head_dim", "mlp_dim", "vocab_size", "max_positions"):
        value = getattr(args, name)
        if value is not None:
            fields[name] = value
    if args.rope_theta is not None:
        fields["rope_theta_base"] = args.rope_theta
    fields["seed"] = args.seed
    config = ModelConfig.from_dict(fields)
    digest = config.digest().hex()
    doc = {"format": MODEL_FORMAT, "config": config.to_dict(), "digest": digest}
    try:
        Path(args.output).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise CliError(EXIT_CONFIG, f"cannot write {args.output}: {exc}") from None
    _emit(args, {"model": str(args.output), "digest": digest}, [("digest", digest)])
    return EXIT_OK


def cmd_precompute(args) -> int:
    config = load_model(args.model)
    weights = init_weights(config)
    chunks = parse_chunks_file(args.chunks)
    rows = []
    with KVStore(args.store, _tiers(args)) as store:
        target = args.to or store.tiers[0].name
        store.tier(target)
        for ids in chunks:
            if max(ids) >= config.vocab_size:
                raise CliError(EXIT_PARSE, f"token id {max(ids)} outside vocabulary of size {config.vocab_size}")
            h = chunk_digest(config.digest(), ids)
            entry = store.locate(h)
            if entry is None:
                entry = store.put(precompute_chunk(weights, ids), target)
            rows.append({"hash": entry.chunk_hash, "bytes": entry.size_bytes, "tier": entry.tier,
                         "tokens": len(ids)})
    _emit(args, {"chunks": rows}, [(r["hash"], r["bytes"], r["tier"]) for r in rows])
    return EXIT_OK


def cmd_run(args) -> int:
    config = load_model(args.model)
    weights = init_weights(config)
    chunks = parse_chunks_file(args.chunks)
    if not chunks:
        raise CliError(EXIT_PARSE, f"{args.chunks} holds no chunks")
    suffix = _parse_tokens(args.suffix, "suffix")
    method, r = parse_method(args.method, args.ratio)
    top = max(max(max(c) for c in chunks), max(suffix))
    if top >= config.vocab_size:
        raise CliError(EXIT_PARSE, f"token id {top} outside vocabulary of size {config.vocab_size}")
    with KVStore(args.store, _tiers(args)) as store:
        reused = {"full": 0, "prefix": 1}.get(method, len(chunks))
        missing = [chunk_digest(config.digest(), c).hex() for c in chunks[:reused]
                   if chunk_digest(config.digest(), c) not in store]
        if missing:
            raise CliError(EXIT_MISS, "chunks missing from the store: " + " ".join(missing))
        length = sum(len(c) for c in chunks)
        total = length + len(suffix)
        cost = _cost(args, config, total)
        device = store.tiers[0]
        plan = plan_for_device(length, device, cost, ratio=r)
        try:
            res = run_pipelined(plan, BlendRequest(chunks, suffix, method, r), weights=weights,
                                store=store, cost=cost, clock=args.clock)
        except PipelineError as exc:
            raise CliError(EXIT_MISS, str(exc)) from None
    record = {"query": 0, "chunk_ids": [chunk_digest(config.digest(), c).hex() for c in chunks],
              "ttft_sim": res.trace.ttft, "macs": res.macs, "full_macs": res.full_macs,
              "mac_ratio": res.macs / res.full_macs, "hits": reused, "misses": 0,
              "dattn_per_layer": None, "dattn_mean": None}
    if args.oracle:
        tokens = np.concatenate([np.asarray(c) for c in chunks] + [np.asarray(suffix)])
        _, full_attn = full_prefill(weights, tokens, len(suffix))
        d = [attention_deviation(a, b) for a, b in zip(res.attentions, full_attn)]
        record["dattn_per_layer"] = d
        record["dattn_mean"] = float(np.mean(d))
    out = {
        "method": method, "r": r, "per_query": [record],
        "aggregates": {"ttft_mean": record["ttft_sim"], "ttft_p95": record["ttft_sim"],
                       "dattn_mean": record["dattn_mean"], "mac_ratio": record["mac_ratio"], "hit_rate": 1.0},
        "ttft_sim": record["ttft_sim"], "dattn_per_layer": record["dattn_per_layer"],
        "selection_trace": [s.tolist() for s in res.selection.selected],
        "plan": plan.to_dict(),
    }
    if args.trace:
        Path(args.trace).write_text(res.trace.to_jsonl())
    # always machine-readable: the metrics document is the interface
    print(json.dumps(out, sort_keys=True))
    return EXIT_OK


def _cost(args, config: ModelConfig, max_tokens: int) -> CostModel:
    if getattr(args, "cost", None):
        try:
            return CostModel.from_dict(json.loads(Path(args.cost).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError(EXIT_CONFIG, f"cannot load cost model {args.cost}: {exc}") from None
    return CostModel.from_macs(config, args.macs_per_second, max_tokens=max_tokens)


def cmd_estimate(args) -> int:
    devices = _tiers(args, default=False)
    if not devices:
        raise CliError(EXIT_CONFIG, "estimate needs at least one --tier")
    if args.cost:
        cost = _cost(args, None, 0)
    elif args.model:
        cost = _cost(args, load_model(args.model), args.length)
    else:
        raise CliError(EXIT_CONFIG, "estimate needs --model or --cost")
    plans = [plan_for_device(args.length, d, cost) for d in devices]
    picked = make_plan(args.length, devices, cost)
    payload = {"length": args.length, "plans": [p.to_dict() for p in plans], "picked": picked.to_dict()}
    table = [("device", "ratio", "t_load", "t_recompute", "ttft")]
    table += [(p.device.name, f"{p.recompute_ratio:.4g}", f"{p.t_load:.4g}", f"{p.t_recompute:.4g}",
               f"{p.ttft:.4g}") for p in plans]
    table.append(("picked", picked.device.name, f"ratio={picked.recompute_ratio:.4g}",
                  "ok" if picked.device_ok else "WARNING: loading not hidden at r*"))
    _emit(args, payload, table)
    return EXIT_OK


def cmd_bench(args) -> int:
    config = load_model(args.model)
    spec = WorkloadSpec(num_chunks_in_db=args.db_size, chunk_len=args.chunk_len,
                        chunks_per_query=args.top_k, popularity=args.zipf, num_queries=args.queries,
                        suffix_len=args.suffix_len, seed=args.seed, vocab_size=config.vocab_size)
    report = run_experiment(spec, args.method, _tiers(args), config=config, store_root=args.store,
                            r=args.ratio, oracle=args.oracle, parallel=args.parallel)
    text = report.to_json(sort_keys=True)
    if args.output:
        Path(args.output).write_text(text + "\n")
    if args.json or not args.output:
        print(text)
    else:
        _emit(args, {}, [(k, v) for k, v in report.aggregates.items()])
    return EXIT_OK


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--json", action="store_true", help="machine-readable output")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("-v", "--verbose", action="store_true")

    store = argparse.ArgumentParser(add_help=False)
    store.add_argument("--store", required=True, help="store root directory")
    store.add_argument("--tier", action="append", metavar="NAME=THROUGHPUT:COST:CAPACITY[:FLOOR]",
                       help=f"storage tier (repeatable; default {DEFAULT_TIER})")

    p = argparse.ArgumentParser(prog="cacheblend", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-model", parents=[common], help="write a seeded model file")
    g.add_argument("-o", "--output", "--model", dest="output", required=True)
    g.add_argument("--config", help="JSON file with model config fields")
    for name in ("num_layers", "num_heads", "head_dim", "mlp_dim", "vocab_size", "max_positions"):
        g.add_argument("--" + name.replace("_", "-"), dest=name, type=int)
    g.add_argument("--rope-theta", type=float)
    g.set_defaults(func=cmd_gen_model)

    pc = sub.add_parser("precompute", parents=[common, store], help="precompute chunk caches into the store")
    pc.add_argument("--model", required=True)
    pc.add_argument("--chunks", required=True, help="text file, one chunk of token ids per line")
    pc.add_argument("--to", help="tier to write to (default: fastest)")
    pc.set_defaults(func=cmd_precompute)

    r = sub.add_parser("run", parents=[common, store], help="fuse chunk caches for one request")
    r.add_argument("--model", required=True)
    r.add_argument("--chunks", required=True)
    r.add_argument("--suffix", required=True, help="suffix token ids, space separated")
    r.add_argument("--method", default="blend", help="full | prefix | reuse | blend | blend(R)")
    r.add_argument("--ratio", type=float)
    r.add_argument("--oracle", action="store_true", help="also run full prefill and report deviations")
    r.add_argument("--clock", choices=("simulated", "real"), default="simulated")
    r.add_argument("--macs-per-second", type=float, default=1e9)
    r.add_argument("--cost", help="cost model JSON")
    r.add_argument("--trace", help="write the timing trace as JSON lines")
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("estimate", parents=[common], help="loading-controller plan per device")
    e.add_argument("--model")
    e.add_argument("--cost", help="cost model JSON (overrides --model profile)")
    e.add_argument("--length", type=int, required=True, help="context tokens to load")
    e.add_argument("--tier", action="append", metavar="NAME=THROUGHPUT:COST:CAPACITY[:FLOOR]")
    e.add_argument("--macs-per-second", type=float, default=1e9)
    e.set_defaults(func=cmd_estimate)

    b = sub.add_parser("bench", parents=[common, store], help="run a synthetic workload")
    b.add_argument("--model", required=True)
    b.add_argument("--method", default="blend")
    b.add_argument("--ratio", type=float)
    b.add_argument("--db-size", type=int, default=16)
    b.add_argument("--chunk-len", type=int, default=32)
    b.add_argument("--top-k", type=int, default=3)
    b.add_argument("--zipf", type=float, default=1.0)
    b.add_argument("--queries", type=int, default=10)
    b.add_argument("--suffix-len", type=int, default=8)
    b.add_argument("--oracle", action="store_true")
    b.add_argument("--parallel", action="store_true")
    b.add_argument("-o", "--output")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CacheBlendError, AssertionError) as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
