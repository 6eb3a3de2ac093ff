import os

import numpy as np
import pytest

from dataio.class_maps import synthetic_class_map
from dataio.loader import SegmentationDataset
from dataio.synthetic import gen_synthetic
from models.segnet_model import ModelConfig

TOY_CLASSES = 5


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    """Smallest network that still has every layer group."""
    return ModelConfig.toy(num_classes=TOY_CLASSES, block_depths=(1, 1, 1, 1), width_multiplier=1 / 16)


@pytest.fixture(scope="session")
def synthetic_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synthetic")
    gen_synthetic(count=8, image_size=32, num_classes=TOY_CLASSES, seed=7, out_dir=str(out), val_fraction=0.25)
    return str(out)


@pytest.fixture
def synthetic_manifest(synthetic_dir):
    return os.path.join(synthetic_dir, "manifest.tsv")


@pytest.fixture
def train_dataset(synthetic_manifest):
    return SegmentationDataset(synthetic_manifest, synthetic_class_map(TOY_CLASSES), split="train")


@pytest.fixture
def val_dataset(synthetic_manifest):
    return SegmentationDataset(synthetic_manifest, synthetic_class_map(TOY_CLASSES), split="val")


def write_config(path, **values):
    """KEY=value file from keyword arguments."""
    with open(path, "w", encoding="utf-8") as f:
        for key, value in values.items():
            f.write(f"{key}={value}\n")
    return str(path)
