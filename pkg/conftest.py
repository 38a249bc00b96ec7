import sys
from pathlib import Path

import numpy as np
import pytest

# Add project root to path
sys.path.insert(0, str(Path(__file__).parent))

from models.config import RunConfig, SynthSpec  # noqa: E402
from workers.dataset import Dataset, write_csv  # noqa: E402
from workers.pipeline import generate_synthetic  # noqa: E402

collect_ignore = ["examples"]


@pytest.fixture
def rng():
    return np.random.Generator(np.random.PCG64(12345))


@pytest.fixture
def two_domain_spec():
    """Opposite-slope domains, 3 features so q=2 leaves room below p+1"""
    return SynthSpec(
        atoms=[[2.0, 3.0, 1.0, -1.0], [-2.0, -3.0, 0.5, 1.0]],
        sizes=[40, 40],
        noise_std=0.1,
        feature_shift=[0.0, 1.5],
        test_size=30,
        seed=7,
    )


@pytest.fixture
def two_domain_data(two_domain_spec):
    train, labels, test, test_labels = generate_synthetic(two_domain_spec)
    return train, labels, test, test_labels


@pytest.fixture
def fast_config():
    """Short chains for pipeline-level tests"""
    return RunConfig.model_validate(
        {
            "gibbs": {"sweeps": 30, "burn_in": 10, "seed": 3},
            "transfer": {"q": 2, "knn": 5},
        }
    )


@pytest.fixture
def csv_pair(tmp_path, two_domain_data):
    """train.csv / test.csv written from the synthetic fixture"""
    train, _, test, _ = two_domain_data
    train_path = tmp_path / "train.csv"
    test_path = tmp_path / "test.csv"
    write_csv(train, str(train_path))
    write_csv(test, str(test_path))
    return train_path, test_path


@pytest.fixture
def tiny_dataset():
    return Dataset(
        features=np.array([[1.0, 10.0], [2.0, 20.0], [3.0, 40.0]]),
        names=["a", "b"],
        response=np.array([1.0, 2.0, 4.0]),
    )
