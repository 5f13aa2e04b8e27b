import numpy as np
import pytest

from criteria import RESULTS
from spatial_mtl.model import ModelConfig
from spatial_mtl.scenegen import caption_vocabulary


def pytest_terminal_summary(terminalreporter):
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(RESULTS):
        ok, detail = RESULTS[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def vocab():
    return tuple(caption_vocabulary())


@pytest.fixture(scope="session")
def tiny_config(vocab):
    """Small enough for per-parameter finite differences."""
    return ModelConfig(vocab=vocab, image_size=16, patch_size=4, embed_dim=8, num_layers=1, num_heads=2,
                       mlp_ratio=2, max_text_len=12, target_map_size=8, decoder_channels=4, seed=3)
