"""Tiered on-disk store of chunk caches with LRU eviction.

Record layout (little-endian)::

    "KVBL" | version u32 | model digest 32B | num_layers u32 | num_tokens u32
    | hidden_dim u32 | dtype u8 | layer offsets u64 * num_layers
    | per layer: K rows, then V rows (row-major) | checksum 8B

Offsets are absolute byte offsets of each layer's K block, so one layer can
be read with a single seek.  The checksum is BLAKE2b-64 over the payload
(everything between the offset table and the checksum).
"""
from __future__ import annotations

import hashlib
import logging
import os
import struct
import threading
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import CapacityError, ConfigurationError, IntegrityError
from .kvcache import ChunkKV

log = logging.getLogger(__name__)

MAGIC = b"KVBL"
VERSION = 1
DTYPE_F32 = 1
SUFFIX = ".kvbl"
_HEADER = struct.Struct("<4sI32sIIIB")
_CHECKSUM_LEN = 8


def _checksum(payload) -> bytes:
    return hashlib.blake2b(payload, digest_size=_CHECKSUM_LEN).digest()


@dataclass(frozen=True)
class RecordHeader:
    model_digest: bytes
    num_layers: int
    num_tokens: int
    hidden_dim: int
    dtype: int
    offsets: tuple[int, ...]

    @property
    def layer_bytes(self) -> int:
        return 2 * self.num_tokens * self.hidden_dim * 4

    @property
    def payload_start(self) -> int:
        return _HEADER.size + 8 * self.num_layers

    @property
    def record_size(self) -> int:
        return self.payload_start + self.num_layers * self.layer_bytes + _CHECKSUM_LEN


def serialize(chunk: ChunkKV) -> bytes:
    L, T, h = chunk.k.shape
    start = _HEADER.size + 8 * L
    layer_bytes = 2 * T * h * 4
    offsets = [start + i * layer_bytes for i in range(L)]
    parts = [_HEADER.pack(MAGIC, VERSION, bytes(chunk.model_digest), L, T, h, DTYPE_F32),
             struct.pack(f"<{L}Q", *offsets)]
    payload = b"".join(np.ascontiguousarray(a[i], dtype="<f4").tobytes()
                       for i in range(L) for a in (chunk.k, chunk.v))
    return b"".join(parts) + payload + _checksum(payload)


def parse_header(buf: bytes) -> RecordHeader:
    if len(buf) < _HEADER.size:
        raise IntegrityError("record too short for a header")
    magic, version, digest, L, T, h, dtype = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise IntegrityError(f"bad magic {magic!r}")
    if version != VERSION:
        raise IntegrityError(f"unsupported record version {version}")
    if dtype != DTYPE_F32:
        raise IntegrityError(f"unsupported dtype code {dtype}")
    if len(buf) < _HEADER.size + 8 * L:
        raise IntegrityError("record too short for its offset table")
    offsets = struct.unpack_from(f"<{L}Q", buf, _HEADER.size)
    header = RecordHeader(digest, L, T, h, dtype, offsets)
    expected = tuple(header.payload_start + i * header.layer_bytes for i in range(L))
    if offsets != expected:
        raise IntegrityError("layer offset table is inconsistent with the header")
    return header


def deserialize(data: bytes, chunk_hash: bytes | None = None, token_ids=None) -> ChunkKV:
    header = parse_header(data)
    if len(data) != header.record_size:
        raise IntegrityError(f"record is {len(data)} bytes, header implies {header.record_size}")
    payload = memoryview(data)[header.payload_start:-_CHECKSUM_LEN]
    if _checksum(payload) != data[-_CHECKSUM_LEN:]:
        raise IntegrityError("checksum mismatch")
    L, T, h = header.num_layers, header.num_tokens, header.hidden_dim
    arr = np.frombuffer(payload, dtype="<f4").reshape(L, 2, T, h).astype(np.float32)
    return ChunkKV(chunk_hash if chunk_hash is not None else b"\0" * 32, header.model_digest,
                   arr[:, 0].copy(), arr[:, 1].copy(), token_ids)


@dataclass(frozen=True)
class DeviceProfile:
    """A storage tier: throughput in bytes/s, cost per byte-hour, capacity in bytes."""

    name: str
    throughput: float
    storage_cost: float = 0.0
    capacity: int = 1 << 40
    latency_floor: float = 0.0

    def __post_init__(self):
        if not self.throughput > 0:
            raise ConfigurationError(f"tier {self.name!r}: throughput must be positive")
        if not self.capacity > 0:
            raise ConfigurationError(f"tier {self.name!r}: capacity must be positive")
        if self.latency_floor < 0:
            raise ConfigurationError(f"tier {self.name!r}: latency floor must be non-negative")

    def transfer_time(self, nbytes: int) -> float:
        return nbytes / self.throughput + self.latency_floor

    @classmethod
    def parse(cls, spec: str) -> "DeviceProfile":
        """Parse ``name=throughput:cost:capacity[:latency_floor]``."""
        try:
            name, rest = spec.split("=", 1)
            fields = rest.split(":")
            if not name or len(fields) not in (3, 4):
                raise ValueError
            throughput, cost, capacity = float(fields[0]), float(fields[1]), int(float(fields[2]))
            floor = float(fields[3]) if len(fields) == 4 else 0.0
        except ValueError:
            raise ConfigurationError(
                f"bad tier spec {spec!r}; expected name=throughput:cost:capacity[:latency_floor]") from None
        return cls(name, throughput, cost, capacity, floor)


@dataclass
class StoreEntry:
    chunk_hash: str
    tier: str
    size_bytes: int
    last_access: int
    verified: bool = False


@dataclass
class LayerKV:
    k: np.ndarray
    v: np.ndarray
    tier: str
    sim_seconds: float


@dataclass
class _Tier:
    profile: DeviceProfile
    path: Path
    entries: dict[str, StoreEntry] = field(default_factory=dict)

    @property
    def used(self) -> int:
        return sum(e.size_bytes for e in self.entries.values())


def _hex(chunk_hash) -> str:
    return chunk_hash.hex() if isinstance(chunk_hash, (bytes, bytearray)) else str(chunk_hash)


class KVStore:
    """Chunk-hash -> record store over one or more tiers.

    Tiers are searched fastest-first.  LRU order uses a logical clock that
    ticks on every put and successful fetch.  All public methods are safe to
    call from several threads; background puts are visible to fetches as soon
    as ``put`` returns (read-your-writes).
    """

    def __init__(self, root, tiers: Sequence[DeviceProfile]):
        if not tiers:
            raise ConfigurationError("a store needs at least one tier")
        names = [t.name for t in tiers]
        if len(set(names)) != len(names):
            raise ConfigurationError(f"duplicate tier names in {names}")
        self.root = Path(root)
        self._lock = threading.RLock()
        self._clock = 0
        self._tiers: dict[str, _Tier] = {}
        for profile in sorted(tiers, key=lambda t: -t.throughput):
            path = self.root / profile.name
            path.mkdir(parents=True, exist_ok=True)
            self._tiers[profile.name] = _Tier(profile, path)
        self._pending: dict[tuple[str, str], bytes] = {}
        self._writer: ThreadPoolExecutor | None = None
        self.transfers: list[tuple[str, int, float]] = []
        self._scan()

    # ------------------------------------------------------------ bookkeeping

    def _scan(self):
        found = []
        for tier in self._tiers.values():
            for f in tier.path.glob(f"*{SUFFIX}"):
                st = f.stat()
                found.append((st.st_mtime_ns, f.name, tier, st.st_size))
        for _, fname, tier, size in sorted(found, key=lambda x: (x[0], x[1])):
            self._clock += 1
            h = fname[: -len(SUFFIX)]
            tier.entries[h] = StoreEntry(h, tier.profile.name, size, self._clock)

    def _tick(self) -> int:
        self._clock += 1
        return self._clock

    @property
    def tiers(self) -> list[DeviceProfile]:
        return [t.profile for t in self._tiers.values()]

    def tier(self, name: str) -> DeviceProfile:
        return self._tier(name).profile

    def _tier(self, name) -> _Tier:
        try:
            return self._tiers[name]
        except KeyError:
            raise ConfigurationError(f"unknown tier {name!r}") from None

    def used_bytes(self, tier: str) -> int:
        with self._lock:
            return self._tier(tier).used

    def entries(self, tier: str | None = None) -> list[StoreEntry]:
        with self._lock:
            tiers = [self._tier(tier)] if tier else self._tiers.values()
            return sorted((e for t in tiers for e in t.entries.values()), key=lambda e: e.last_access)

    def locate(self, chunk_hash) -> StoreEntry | None:
        h = _hex(chunk_hash)
        with self._lock:
            for t in self._tiers.values():
                if h in t.entries:
                    return t.entries[h]
        return None

    def __contains__(self, chunk_hash) -> bool:
        return self.locate(chunk_hash) is not None

    def path_for(self, chunk_hash, tier: str) -> Path:
        return self._tier(tier).path / f"{_hex(chunk_hash)}{SUFFIX}"

    # ------------------------------------------------------------ mutation

    def evict_to_fit(self, tier: str, needed_bytes: int) -> list[str]:
        """Evict least-recently-used entries of ``tier`` until ``needed_bytes`` are free."""
        with self._lock:
            t = self._tier(tier)
            if needed_bytes > t.profile.capacity:
                raise CapacityError(
                    f"{needed_bytes} bytes exceed the capacity of tier {tier!r} ({t.profile.capacity})")
            evicted = []
            for entry in sorted(t.entries.values(), key=lambda e: e.last_access):
                if t.profile.capacity - t.used >= needed_bytes:
                    break
                self._remove(t, entry.chunk_hash)
                evicted.append(entry.chunk_hash)
            if evicted:
                log.debug("evicted %d entr(ies) from %s", len(evicted), tier)
            return evicted

    def _remove(self, t: _Tier, h: str):
        del t.entries[h]
        self._pending.pop((t.profile.name, h), None)
        try:
            (t.path / f"{h}{SUFFIX}").unlink()
        except FileNotFoundError:
            pass

    def put(self, chunk: ChunkKV, tier: str | None = None, background: bool = False) -> StoreEntry:
        """Store ``chunk`` in ``tier`` (fastest tier by default), evicting LRU entries first."""
        data = serialize(chunk)
        h = chunk.hex_hash
        with self._lock:
            t = self._tier(tier) if tier else next(iter(self._tiers.values()))
            if len(data) > t.profile.capacity:
                raise CapacityError(
                    f"chunk {h[:12]} needs {len(data)} bytes; tier {t.profile.name!r} holds {t.profile.capacity}")
            old = t.entries.pop(h, None)
            try:
                self.evict_to_fit(t.profile.name, len(data))
            except CapacityError:
                if old is not None:
                    t.entries[h] = old
                raise
            entry = StoreEntry(h, t.profile.name, len(data), self._tick(), verified=True)
            t.entries[h] = entry
            path = t.path / f"{h}{SUFFIX}"
            if background:
                key = (t.profile.name, h)
                self._pending[key] = data
                if self._writer is None:
                    self._writer = ThreadPoolExecutor(max_workers=1, thread_name_prefix="kvstore-writer")
                self._writer.submit(self._write_back, key, path, data)
            else:
                _atomic_write(path, data)
            return entry

    def _write_back(self, key, path: Path, data: bytes):
        with self._lock:
            if self._pending.get(key) is not data:
                return  # evicted or overwritten meanwhile
            _atomic_write(path, data)
            del self._pending[key]

    def flush(self):
        """Wait for background writes to land on disk."""
        if self._writer is not None:
            self._writer.shutdown(wait=True)
            self._writer = None

    def close(self):
        self.flush()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # ------------------------------------------------------------ reads

    def _read(self, entry: StoreEntry, start: int = 0, length: int | None = None) -> bytes:
        pending = self._pending.get((entry.tier, entry.chunk_hash))
        if pending is not None:
            return pending[start:None if length is None else start + length]
        with open(self.path_for(entry.chunk_hash, entry.tier), "rb") as f:
            f.seek(start)
            return f.read() if length is None else f.read(length)

    def get(self, chunk_hash, token_ids=None) -> ChunkKV | None:
        """Whole record, or ``None`` when absent.  Raises IntegrityError on corruption."""
        with self._lock:
            entry = self.locate(chunk_hash)
            if entry is None:
                return None
            data = self._read(entry)
            if len(data) != entry.size_bytes:
                raise IntegrityError(f"record {entry.chunk_hash[:12]} changed size on disk")
            chunk = deserialize(data, bytes.fromhex(entry.chunk_hash), token_ids)
            entry.verified = True
            entry.last_access = self._tick()
            return chunk

    def get_bytes(self, chunk_hash) -> bytes | None:
        with self._lock:
            entry = self.locate(chunk_hash)
            return None if entry is None else self._read(entry)

    def fetch_layer(self, chunk_hash, layer: int) -> LayerKV | None:
        """Read one layer of one chunk, or ``None`` when the chunk is absent.

        The first read of an entry (in this process) verifies the record
        checksum; after that only the header and the layer's byte range are read.
        """
        with self._lock:
            entry = self.locate(chunk_hash)
            if entry is None:
                return None
            head = self._read(entry, 0, _HEADER.size)
            if len(head) < _HEADER.size:
                raise IntegrityError(f"record {entry.chunk_hash[:12]} is truncated")
            L = _HEADER.unpack_from(head, 0)[3] if head[:4] == MAGIC else 0
            header = parse_header(self._read(entry, 0, _HEADER.size + 8 * L))
            if header.record_size != entry.size_bytes:
                raise IntegrityError(f"record {entry.chunk_hash[:12]} size disagrees with its header")
            if not 0 <= layer < header.num_layers:
                raise IndexError(f"layer {layer} out of range for a {header.num_layers}-layer record")
            if not entry.verified:
                deserialize(self._read(entry))
                entry.verified = True
            raw = self._read(entry, header.offsets[layer], header.layer_bytes)
            if len(raw) != header.layer_bytes:
                raise IntegrityError(f"record {entry.chunk_hash[:12]} is truncated")
            kv = np.frombuffer(raw, dtype="<f4").reshape(2, header.num_tokens, header.hidden_dim)
            entry.last_access = self._tick()
            profile = self._tiers[entry.tier].profile
            seconds = profile.transfer_time(header.layer_bytes)
            self.transfers.append((entry.chunk_hash, layer, seconds))
            return LayerKV(kv[0].astype(np.float32), kv[1].astype(np.float32), entry.tier, seconds)


def _atomic_write(path: Path, data: bytes):
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def populate(store: KVStore, chunks: Iterable[ChunkKV], tier: str | None = None) -> list[StoreEntry]:
    return [store.put(c, tier) for c in chunks]
