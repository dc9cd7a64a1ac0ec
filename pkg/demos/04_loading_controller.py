"""Choosing the recompute ratio and the storage device.

The controller recomputes just enough tokens that recompute time matches
load time per layer (never less than a 15% quality floor), and stores
caches on the cheapest device that can still keep up.  Two scenarios with
round numbers: a 32-layer model whose full prefill of 4K tokens costs
20 ms per layer, and an 80-layer model where 15% recompute takes 7 ms.
"""
import warnings

from cacheblend.kvstore import DeviceProfile
from cacheblend.pipeline import CostModel, estimate_load, estimate_recompute, make_plan, pick_device, pick_ratio

CTX = 4096

small_kv = 2 * 4096 * 2   # K+V, hidden 4096, fp16
small = CostModel(((0, 0.0), (CTX, 32 * 0.020)), small_kv, num_layers=32)
nvme = DeviceProfile("nvme", small_kv * CTX / 0.016, storage_cost=2.0)
print("32-layer model")
print(f"  recompute 15%/layer: {estimate_recompute(0.15, CTX, small, per_layer=True) * 1e3:.1f} ms,"
      f" load/layer: {estimate_load(CTX, nvme, small) * 1e3:.1f} ms -> ratio {pick_ratio(CTX, nvme, small)}")

big_kv = 2 * 8192 * 2
big = CostModel(((0, 0.0), (CTX, 80 * 0.007 / 0.15)), big_kv, num_layers=80)
ssd = DeviceProfile("ssd", big_kv * CTX / 0.004, storage_cost=1.0)
print("80-layer model")
print(f"  recompute 15%/layer: {estimate_recompute(0.15, CTX, big, per_layer=True) * 1e3:.1f} ms,"
      f" load/layer: {estimate_load(CTX, ssd, big) * 1e3:.1f} ms -> ratio {pick_ratio(CTX, ssd, big)}")

layer_bytes = small_kv * CTX
devices = [DeviceProfile(n, layer_bytes / (ms / 1e3), storage_cost=c)
           for n, ms, c in (("ram", 1.0, 10.0), ("ssd", 2.5, 3.0), ("hdd", 9.0, 1.0))]
d, ok = pick_device(devices, CTX, small)
print(f"\nrecompute at the floor is 3 ms/layer; cheapest device that hides loading: {d.name} (ok={ok})")
plan = make_plan(CTX, devices, small)
print(f"plan: ratio {plan.recompute_ratio:.3f} on {plan.device.name}, TTFT {plan.ttft * 1e3:.1f} ms")

with warnings.catch_warnings(record=True) as caught:
    warnings.simplefilter("always")
    d, ok = pick_device(devices[2:], CTX, small)
print(f"only hdd available -> {d.name}, ok={ok}: {caught[0].message}")
