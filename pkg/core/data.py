import logging

import numpy as np

from core.errors import ConfigError
from core.linalg import svd
from models.data_classes import Dataset, DatasetSpec

logger = logging.getLogger(__name__)


def validate_dataset_spec(spec: DatasetSpec) -> None:
    """Raise ConfigError for a spec that cannot produce a usable split."""
    problems = []
    if spec.classes < 2:
        problems.append(f"classes must be >= 2, got {spec.classes}")
    if spec.input_dim < 1:
        problems.append(f"input_dim must be >= 1, got {spec.input_dim}")
    if spec.samples_per_class < 2:
        problems.append(f"samples_per_class must be >= 2, got {spec.samples_per_class}")
    if not spec.spread >= 0:
        problems.append(f"spread must be >= 0, got {spec.spread}")
    if not spec.anisotropy >= 1:
        problems.append(f"anisotropy must be >= 1, got {spec.anisotropy}")
    if spec.points_per_sample < 1:
        problems.append(f"points_per_sample must be >= 1, got {spec.points_per_sample}")
    if not 0 < spec.val_fraction < 1:
        problems.append(f"val_fraction must lie in (0, 1), got {spec.val_fraction}")
    if problems:
        raise ConfigError("invalid dataset spec: " + "; ".join(problems))


def _random_rotation(rng: np.random.Generator, d: int) -> np.ndarray:
    return svd(rng.standard_normal((d, d))).U


def synth_dataset(spec: DatasetSpec, seed: int) -> Dataset:
    """Deterministic Gaussian-mixture classification data.

    Class means are drawn from N(0, I). Noise is spread * R diag(s) z with a
    random rotation R and scales s spaced geometrically from 1 to
    1/anisotropy. With points_per_sample = m >= 2 every sample is a
    d_in x m set of descriptors whose class is carried by a class-specific
    covariance, since covariance pooling discards the mean.

    The split is stratified: round(val_fraction * samples_per_class) samples
    of each class (at least one, at most all but one) go to validation.
    """
    validate_dataset_spec(spec)
    rng = np.random.default_rng(seed)
    d_in, m = spec.input_dim, spec.points_per_sample

    means = rng.standard_normal((spec.classes, d_in))
    scales = np.geomspace(1.0, 1.0 / spec.anisotropy, d_in)
    noise_map = spec.spread * _random_rotation(rng, d_in) * scales
    mixings = [rng.standard_normal((d_in, d_in)) / np.sqrt(d_in) for _ in range(spec.classes)] if m > 1 else []

    n_val = int(round(spec.val_fraction * spec.samples_per_class))
    n_val = min(max(n_val, 1), spec.samples_per_class - 1)

    train_x, train_y, val_x, val_y = [], [], [], []
    for label in range(spec.classes):
        n = spec.samples_per_class
        if m == 1:
            x = means[label] + rng.standard_normal((n, d_in)) @ noise_map.T
        else:
            z = rng.standard_normal((n, d_in, m))
            e = rng.standard_normal((n, d_in, m))
            x = means[label][None, :, None] + mixings[label] @ z + noise_map @ e
        order = rng.permutation(n)
        val_x.append(x[order[:n_val]])
        train_x.append(x[order[n_val:]])
        val_y.append(np.full(n_val, label, dtype=np.int64))
        train_y.append(np.full(n - n_val, label, dtype=np.int64))

    train_perm = rng.permutation(sum(len(y) for y in train_y))
    val_perm = rng.permutation(sum(len(y) for y in val_y))
    dataset = Dataset(
        train_x=np.concatenate(train_x)[train_perm],
        train_y=np.concatenate(train_y)[train_perm],
        val_x=np.concatenate(val_x)[val_perm],
        val_y=np.concatenate(val_y)[val_perm],
    )
    logger.debug(
        "Generated dataset: %d train / %d validation samples, %d classes",
        dataset.train_y.size, dataset.val_y.size, spec.classes,
    )
    return dataset
