"""Why a cached chunk can be reused at any offset, and why that is not enough.

Keys are cached without rotary encoding.  Rotating them on the fly to their
new absolute positions keeps every intra-chunk attention score unchanged,
because rotary scores only depend on the distance between two tokens.

What reuse cannot restore is cross-attention: tokens of the second chunk
never saw the first chunk when their cache was computed.
"""
import numpy as np

from cacheblend import (ModelConfig, RopeParams, concat_chunks, full_prefill, init_weights, kv_deviation,
                        precompute_chunk, rotate)

rng = np.random.default_rng(0)

# -- 1. relative-position invariance --------------------------------------
p = RopeParams(head_dim=8)
q, k = rng.normal(size=8), rng.normal(size=8)
print("q.k at distance 3, placed at offsets 0 / 10 / 1000:")
for offset in (0, 10, 1000):
    print(f"  offset {offset:5d}: {rotate(q, offset + 3, p) @ rotate(k, offset, p):+.12f}")

# -- 2. prefix chunk is exact, later chunks drift -------------------------
w = init_weights(ModelConfig(num_layers=6, num_heads=4, head_dim=8, mlp_dim=64, vocab_size=100, seed=1))
a, b = rng.integers(0, 100, 12), rng.integers(0, 100, 12)
pre = concat_chunks([precompute_chunk(w, a), precompute_chunk(w, b)])
full, _ = full_prefill(w, np.r_[a, b], 1)

print("\nper-layer KV deviation of the reused cache against full prefill")
print("layer  chunk A (max)  chunk B (mean)  chunk B (max)")
for layer in range(w.config.num_layers):
    d = kv_deviation(pre.layer(layer), full.layer(layer))
    print(f"{layer:5d}  {d[:12].max():13.2e}  {d[12:].mean():14.4f}  {d[12:].max():13.4f}")

print("\nChunk A is the prefix: its cache is exact.  Chunk B's first layer is exact too")
print("(layer-0 K/V depend on the token alone); from layer 1 on it misses chunk A.")
