"""Pytest configuration and shared fixtures."""

import os
import tempfile
from collections.abc import Generator
from pathlib import Path

import numpy as np
import pytest

from caption_lens.data.dataset import CaptionDataset, make_synthetic_dataset
from caption_lens.model.captioner import GlobalEnhancedTransformer
from caption_lens.utils.config import ModelConfig

# Environment overrides would leak into every RunConfig built by the tests.
for _key in [k for k in os.environ if k.upper().startswith("CAPTION_LENS_")]:
    del os.environ[_key]


@pytest.fixture
def temp_dir() -> Generator[Path, None, None]:
    """Create a temporary directory for tests."""
    with tempfile.TemporaryDirectory() as tmp_dir:
        yield Path(tmp_dir)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model_config() -> ModelConfig:
    """Small model with every global component switched on."""
    return ModelConfig(
        layers=2,
        d_model=8,
        heads=2,
        d_ff=16,
        keep_prob=1.0,
        intra_layer="gea",
        inter_layer="lstm",
        controller="mac",
        max_len=7,
    )


@pytest.fixture
def synthetic_dataset() -> CaptionDataset:
    """Six images, three regions each, six-word captions encoded to length 8."""
    return make_synthetic_dataset(
        seed=0,
        images=6,
        regions=3,
        d_in=8,
        vocab_size=16,
        caption_len=6,
        max_len=8,
    )


@pytest.fixture
def tiny_model(
    tiny_model_config: ModelConfig, synthetic_dataset: CaptionDataset
) -> GlobalEnhancedTransformer:
    return GlobalEnhancedTransformer(
        tiny_model_config.encoder_config(),
        tiny_model_config.decoder_config(len(synthetic_dataset.vocab)),
        d_in=synthetic_dataset.features.feature_dim,
        seed=0,
    )


@pytest.fixture
def desk_config_dict(temp_dir: Path) -> dict:
    """Run configuration small enough to train in a few seconds."""
    return {
        "run_name": "test",
        "output_dir": str(temp_dir / "out"),
        "seed": 0,
        "model": {
            "layers": 1,
            "d_model": 8,
            "heads": 2,
            "d_ff": 16,
            "keep_prob": 1.0,
            "max_len": 7,
        },
        "train": {
            "batch_size": 4,
            "warmup_steps": 10,
            "xe_epochs": 5,
            "xe_max_steps": 3,
            "scst_steps": 2,
            "scst_beam": 2,
            "scst_lr": 1e-3,
            "checkpoint_every": 2,
        },
        "data": {
            "source": "synthetic",
            "synthetic": {
                "images": 4,
                "regions": 3,
                "d_in": 8,
                "vocab_size": 16,
                "caption_len": 6,
            },
        },
        "inference": {"beam_size": 2, "max_caption_len": 7, "attribution_steps": 4},
        "gradcheck": {"max_entries": 2},
        "logging": {"level": "WARNING", "console_enabled": False},
    }
