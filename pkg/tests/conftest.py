import sys
from pathlib import Path

import numpy as np
import pytest

ROOT = Path(__file__).resolve().parent.parent
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from pcrdiff.regnet import CBModelConfig, CFModelConfig  # noqa: E402


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def cloud(rng: np.random.Generator) -> np.ndarray:
    return rng.normal(size=(32, 3))


@pytest.fixture
def tiny_cf() -> CFModelConfig:
    return CFModelConfig(
        encoder_widths=(8, 12),
        transform_hidden=8,
        embed_dim=8,
        decoder_widths=(16, 8),
    )


@pytest.fixture
def tiny_cb() -> CBModelConfig:
    return CBModelConfig(
        feature_widths=(8, 8),
        sinkhorn_iters=3,
        knn=4,
        transform_hidden=8,
        embed_dim=8,
    )
