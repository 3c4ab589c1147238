import numpy as np
import pytest
import torch
from hypothesis import settings

from shapeletrf.backbone import BackboneConfig
from shapeletrf.embedder import EmbedderConfig
from shapeletrf.model import ModelConfig
from shapeletrf.shapelets import ShapeletConfig
from shapeletrf.signal import Dataset

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


def tiny_model_config(class_count=3, groups=((2, 4), (1, 8)), d_h=8) -> ModelConfig:
    return ModelConfig(
        class_count=class_count,
        d_l=6,
        embedder=EmbedderConfig(hidden_channels=4, out_channels=d_h),
        backbone=BackboneConfig(layer_count=1, d_h=d_h, head_count=2, ff_width=16, max_seq=64),
        shapelets=ShapeletConfig(groups=groups),
    )


def random_dataset(n_per_cell=4, classes=3, domains=2, T=256, seed=0) -> Dataset:
    rng = np.random.default_rng(seed)
    n = n_per_cell * classes * domains
    dev = np.repeat(np.arange(classes), n_per_cell * domains)
    dom = np.tile(np.repeat(np.arange(domains), n_per_cell), classes)
    return Dataset(rng.normal(size=(n, 2, T)), dev, dom, classes)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)
