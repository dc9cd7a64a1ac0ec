import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from cacheblend import ModelConfig, init_weights, precompute_chunk  # noqa: E402


@pytest.fixture(scope="session")
def tiny():
    """2-layer / 2-head / head_dim 4 model."""
    return init_weights(ModelConfig(num_layers=2, num_heads=2, head_dim=4, mlp_dim=16, vocab_size=16, seed=7))


@pytest.fixture(scope="session")
def small():
    """4-layer / 4-head / hidden 32 model."""
    return init_weights(ModelConfig(num_layers=4, num_heads=4, head_dim=8, mlp_dim=64, vocab_size=100, seed=3))


def two_chunk_instance(weights, seed, chunk_len=8, suffix_len=4, n_chunks=2):
    rng = np.random.default_rng(seed)
    V = weights.config.vocab_size
    tokens = [rng.integers(0, V, chunk_len) for _ in range(n_chunks)]
    suffix = rng.integers(0, V, suffix_len)
    return tokens, [precompute_chunk(weights, t) for t in tokens], suffix


@pytest.fixture
def instance(small):
    return two_chunk_instance(small, 11)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.RESULTS):
            terminalreporter.write_line(line)
