import numpy as np
import pytest

from modelattrib.data_io import SyntheticSpec, generate_synthetic, load_manifest
from modelattrib.protocol import TrainConfig


@pytest.fixture(scope="session")
def bench_manifest(tmp_path_factory):
    """Benchmark dataset: real singleton + 3 generator families of 3 models
    plus one holdout family, d=64, 500/100/100 samples per class."""
    out = tmp_path_factory.mktemp("bench_data")
    spec = SyntheticSpec(families=4, models_per_family=3, dim=64, seed=7)
    return load_manifest(generate_synthetic(spec, out))


@pytest.fixture(scope="session")
def bench_config():
    """Full configuration for the synthetic benchmark.

    All components are on at the reference coefficients; epochs and batch
    size are scaled to the 500-sample-per-class fixture (the reference
    4 epochs at batch 512 assume tens of thousands of samples per class).
    """
    return TrainConfig(L=2, seed=3, epochs=25, batch_size=128)


@pytest.fixture(scope="session")
def bench_state(bench_manifest, bench_config):
    from modelattrib.protocol import run_ep1

    return run_ep1(bench_manifest, bench_config)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
