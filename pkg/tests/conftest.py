import numpy as np
import pytest

from shiftguard.data import Dataset, ShiftTaskSpec, partition, synth_generate
from shiftguard.learners import GbtConfig, LearnerConfig, MlpConfig
from shiftguard.numerics import rng_stream


def separable_blob(n=200, gap=9.0, seed=0):
    """Two well-separated 2-feature Gaussian blobs; a hand-coded linear
    scan (midpoint threshold on feature 0) certifies strict separability."""
    rng = rng_stream(seed, 0)
    labels = (rng.uniform(n) < 0.5).astype(np.int64)
    X = rng.normal((n, 2))
    X[:, 0] += np.where(labels == 1, gap / 2.0, -gap / 2.0)
    threshold = 0.0
    linear_scan_acc = np.mean((X[:, 0] > threshold).astype(int) == labels)
    assert linear_scan_acc == 1.0, "fixture is not separable"
    return X, labels


@pytest.fixture(scope="session")
def blob_data():
    return separable_blob()


def small_mlp_config(**overrides):
    defaults = dict(hidden_sizes=(16, 16), dropout_rate=0.1,
                    learning_rate=2e-2, max_epochs=150, batch_size=64,
                    patience=30)
    defaults.update(overrides)
    return LearnerConfig(kind="mlp", mlp=MlpConfig(**defaults))


def small_gbt_config(**overrides):
    defaults = dict(eta=0.1, max_depth=6, num_rounds=10,
                    subsample=0.9, colsample=1.0)
    defaults.update(overrides)
    return LearnerConfig(kind="gbt", gbt=GbtConfig(**defaults))


@pytest.fixture(scope="session")
def shift_task_data():
    """Far-shifted Gaussian task split for ensemble/detector tests."""
    spec = ShiftTaskSpec(generator="gauss_mean_shift", n_source=600,
                         n_target=400, seed=1)
    source, target, _ = synth_generate(spec)
    train, val, holdout = partition(source, rng=rng_stream(spec.seed, 99))
    return {"train": train, "val": val, "holdout": holdout, "target": target}


@pytest.fixture(scope="session")
def null_task_data():
    spec = ShiftTaskSpec(generator="null_resample", n_source=600,
                         n_target=400, seed=2)
    source, target, shifted = synth_generate(spec)
    assert not shifted
    train, val, holdout = partition(source, rng=rng_stream(spec.seed, 99))
    return {"train": train, "val": val, "holdout": holdout, "target": target}
