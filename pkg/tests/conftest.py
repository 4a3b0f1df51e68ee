import numpy as np
import pytest
import torch

from trinuseg.labels import generate_dataset
from trinuseg.model import ModelConfig

# keep CPU runs reproducible and cheap
torch.set_num_threads(2)


def tiny_config(**overrides) -> ModelConfig:
    """Small, fast configuration used across tests."""
    base = dict(
        input_size=64,
        embed_dim=48,
        encoder_depths=(1, 1, 1),
        decoder_depths=(1, 1, 1),
        heads_per_stage=(3, 6, 12),
        window_size=4,
    )
    base.update(overrides)
    return ModelConfig(**base)


def grad_check_config(**overrides) -> ModelConfig:
    """The two-stage double-precision configuration for gradient checks."""
    base = dict(
        input_size=32,
        embed_dim=8,
        encoder_depths=(1, 1),
        decoder_depths=(1, 1),
        heads_per_stage=(2, 2),
        window_size=4,
    )
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture(scope="session")
def small_dataset():
    """8 deterministic 64x64 samples shared by training tests."""
    return generate_dataset(0, 8, size=64, n_instances=6,
                            cluster_probability=0.4)


def rel_error(a: float, b: float) -> float:
    denom = max(abs(a), abs(b), 1e-8)
    return abs(a - b) / denom
