import numpy as np
import pytest

from obidiff.manifest import split_dataset, synthesize_dataset, validate_manifest


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Small on-disk dataset for unit tests: 4 classes x 40 pairs at 32px."""
    root = tmp_path_factory.mktemp("tiny_ds")
    manifest = synthesize_dataset(root, n_classes=4, pairs_per_class=40, resolution=32, seed=11)
    validate_manifest(manifest)
    split_dataset(manifest, seed=11)
    return manifest


@pytest.fixture
def rng():
    return np.random.default_rng(123)
