"""Selective KV-cache recompute for fusing independently precomputed chunk caches."""
from .errors import (CacheBlendError, CapacityError, ConfigurationError, DomainError,
                     IntegrityError, PipelineError)
from .rope import RopeParams, realign, rotate, unrotate
from .kvcache import (ChunkKV, DeviationReport, KVCache, Role, attention_deviation, chunk_digest,
                      concat_chunks, kv_deviation)
from .model import (ForwardAttention, MacCounter, ModelConfig, TokenSequence, Weights,
                    decode_step, full_prefill, init_weights, prefill_logits)
from .blend import (Fusor, RecomputeSchedule, SelectionMask, SelectionTrace, blend_prefill,
                    full_kv_reuse, layer_rank_correlation, make_schedule, oracle_deviations,
                    partial_prefill_layer, precompute_chunk, prefix_reuse, select_hkvd)

__version__ = "0.1.0"
