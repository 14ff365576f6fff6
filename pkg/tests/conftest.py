import numpy as np
import pytest

from data_parser import SyntheticSpec, gen_synthetic, split_disjoint_classes
from experiment import ExperimentConfig


@pytest.fixture
def generator():
    return np.random.default_rng(12345)


@pytest.fixture
def tiny_split():
    """6 train and 6 test classes of 10 samples in 8 dims."""
    ds = gen_synthetic(SyntheticSpec(n_classes=12, samples_per_class=10,
                                     input_dim=8, center_spread=4.0,
                                     noise_sigma=1.0, seed=3))
    return split_disjoint_classes(ds)


@pytest.fixture
def tiny_config():
    """A run that trains for a handful of steps in well under a second."""
    return ExperimentConfig(
        loss="proxy-nca", embedding_dim=8, batch_size=12, steps=4,
        eval_every=2, seed=7,
        synthetic={"n_classes": 8, "samples_per_class": 12, "input_dim": 8})


@pytest.fixture
def tiny_args():
    """Command line flags of a small run."""
    return ["--steps", "2", "--eval-every", "1", "--batch-size", "12",
            "--embedding-dim", "8", "--synthetic", "n_classes=6",
            "--synthetic", "samples_per_class=20",
            "--synthetic", "input_dim=8"]
