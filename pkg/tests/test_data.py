import numpy as np
import pytest

from core.data import synth_dataset, validate_dataset_spec
from core.errors import ConfigError
from models.data_classes import DatasetSpec


def test_split_sizes_are_stratified():
    data = synth_dataset(DatasetSpec(classes=3, input_dim=5, samples_per_class=50), seed=0)
    assert data.train_x.shape == (120, 5)
    assert data.val_x.shape == (30, 5)
    assert np.bincount(data.train_y).tolist() == [40, 40, 40]
    assert np.bincount(data.val_y).tolist() == [10, 10, 10]


def test_same_seed_gives_identical_data():
    spec = DatasetSpec(classes=4, input_dim=6, samples_per_class=30, anisotropy=5.0)
    first, second = synth_dataset(spec, seed=7), synth_dataset(spec, seed=7)
    for name in ("train_x", "train_y", "val_x", "val_y"):
        assert np.array_equal(getattr(first, name), getattr(second, name))
    other = synth_dataset(spec, seed=8)
    assert not np.array_equal(first.train_x, other.train_x)


def test_zero_spread_collapses_classes_to_their_means():
    data = synth_dataset(DatasetSpec(classes=3, input_dim=4, samples_per_class=20, spread=0.0), seed=3)
    means = np.stack([data.train_x[data.train_y == k][0] for k in range(3)])
    for k in range(3):
        assert np.all(data.train_x[data.train_y == k] == means[k])
    nearest = np.argmin(((data.val_x[:, None, :] - means[None]) ** 2).sum(axis=2), axis=1)
    assert np.array_equal(nearest, data.val_y)


def test_anisotropy_shapes_the_noise():
    spec = DatasetSpec(classes=2, input_dim=4, samples_per_class=3000, spread=1.0, anisotropy=10.0)
    data = synth_dataset(spec, seed=1)
    cls = data.train_x[data.train_y == 0]
    lambdas = np.linalg.eigvalsh(np.cov(cls.T))
    assert 50.0 < lambdas[-1] / lambdas[0] < 200.0


def test_descriptor_sets_for_covariance_pooling():
    spec = DatasetSpec(classes=2, input_dim=3, samples_per_class=10, points_per_sample=5)
    data = synth_dataset(spec, seed=0)
    assert data.train_x.shape == (16, 3, 5)
    assert data.val_x.shape == (4, 3, 5)


def test_validation_keeps_one_sample_each_side():
    data = synth_dataset(DatasetSpec(classes=2, samples_per_class=2, val_fraction=0.01), seed=0)
    assert data.val_y.size == 2
    assert data.train_y.size == 2


@pytest.mark.parametrize("overrides", [
    {"classes": 1},
    {"input_dim": 0},
    {"samples_per_class": 1},
    {"spread": -0.1},
    {"anisotropy": 0.5},
    {"points_per_sample": 0},
    {"val_fraction": 1.0},
    {"val_fraction": 0.0},
])
def test_invalid_spec(overrides):
    spec = DatasetSpec(**overrides)
    with pytest.raises(ConfigError):
        validate_dataset_spec(spec)
    with pytest.raises(ConfigError):
        synth_dataset(spec, seed=0)
